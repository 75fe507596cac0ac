//! Command-line front end: synthetic data, training, reconstruction,
//! generation and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use vocabflow::{Config, Error};

#[derive(Debug, Parser)]
#[command(
    name = "vocabflow",
    version,
    about = "Discrete image tokenizer with a rectified-flow decoder",
    after_help = "Any config key can be overridden after the subcommand flags, e.g. `--train_steps 500`."
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shape corpus as PPM files plus labels.txt
    SynthData {
        #[command(flatten)]
        rest: Overrides,
    },
    /// Train the tokenizer on a directory of PPM images
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Tokenize and reconstruct every image in a directory
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Train the autoregressive prior on tokenized, labelled images
    TrainPrior {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Sample token sequences from the prior and decode them to images
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        /// Class to generate; all classes when omitted
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        rest: Overrides,
    },
    /// PSNR and SSIM between two directories of same-named images
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    pairs: Vec<String>,
}

/// Failure classes: usage problems exit 2, everything else 1.
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Config(_) => "config",
        Error::Contract(_) => "contract",
        Error::NonFinite { .. } => "non_finite",
        Error::Parse { .. } => "parse",
        Error::BadMagic => "bad_magic",
        Error::Version { .. } => "version",
        Error::Crc { .. } => "crc",
        Error::ArchMismatch { .. } => "arch_mismatch",
        Error::MissingTensor(_) => "missing_tensor",
        Error::Io { .. } => "io",
    }
}

/// Split `--key value` pairs into `(key, value)`, normalising dashes.
fn parse_pairs(pairs: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = pairs.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("unexpected argument `{flag}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.replace('-', "_"), v.to_string()),
            None => {
                let key = key.replace('-', "_");
                let value = it
                    .next()
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("flag `--{key}` needs a value")))?;
                (key, value)
            }
        };
        out.push((key, value));
    }
    Ok(out)
}

/// Defaults, then the config file, then `--seed`, then `--key value` pairs.
/// Returns the config and the output directory; `--config` and `--out` may
/// also trail the overrides.
fn resolve_config(global: &Global, pairs: &[String]) -> Result<(Config, Option<PathBuf>), Failure> {
    let mut config_path = global.config.clone();
    let mut out = global.out.clone();
    let mut sets = Vec::new();
    for (key, value) in parse_pairs(pairs)? {
        match key.as_str() {
            "config" => config_path = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            k if Config::KEYS.contains(&k) => sets.push((key, value)),
            _ => return Err(Failure::Usage(format!("unknown flag `--{key}`"))),
        }
    }
    let mut cfg = match &config_path {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    for (key, value) in sets {
        cfg.set(&key, &value)?;
    }
    cfg.validate()?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let resolve = |pairs: &[String]| -> Result<(Config, PathBuf), Failure> {
        let (cfg, out) = resolve_config(g, pairs)?;
        let out = out.ok_or_else(|| Failure::Usage("this subcommand needs --out <dir>".into()))?;
        Ok((cfg, out))
    };
    match &cli.command {
        Command::SynthData { rest } => {
            let (cfg, out) = resolve(&rest.pairs)?;
            commands::synth_data(&cfg, &out)?;
        }
        Command::TrainTokenizer { data, rest } => {
            let (cfg, out) = resolve(&rest.pairs)?;
            commands::train_tokenizer(&cfg, data, &out)?;
        }
        Command::Reconstruct {
            checkpoint,
            input,
            rest,
        } => {
            let (cfg, out) = resolve(&rest.pairs)?;
            commands::reconstruct(&cfg, checkpoint, input, &out)?;
        }
        Command::TrainPrior { checkpoint, data, rest } => {
            let (cfg, out) = resolve(&rest.pairs)?;
            commands::train_prior(&cfg, checkpoint, data, &out)?;
        }
        Command::Generate {
            checkpoint,
            prior,
            class,
            count,
            rest,
        } => {
            let (cfg, out) = resolve(&rest.pairs)?;
            commands::generate(&cfg, checkpoint, prior, *class, *count, &out)?;
        }
        Command::Eval { reference, recon, rest } => {
            let (cfg, out) = resolve_config(g, &rest.pairs)?;
            commands::eval(&cfg, reference, recon, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error kind=usage msg=\"{msg}\"");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            let msg = e.to_string().replace('"', "'");
            eprintln!("error kind={} msg=\"{msg}\"", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
