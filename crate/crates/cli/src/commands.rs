use std::path::{Path, PathBuf};

use vocabflow::checkpoint::Checkpoint;
use vocabflow::image::write_atomic;
use vocabflow::metrics::MetricReport;
use vocabflow::prior::{ConversationSample, Prior, BOS};
use vocabflow::sampler::{ar_reconstruct, SamplerConfig};
use vocabflow::synth::{synth_dataset, SynthSpec};
use vocabflow::{Config, Error, Image, Result, Tokenizer, Trainer};

const LABELS: &str = "labels.txt";
const TOKENIZER_CKPT: &str = "tokenizer.ckpt";
const PRIOR_CKPT: &str = "prior.ckpt";

/// Sorted `(file name, path)` of every `.ppm` in `dir`.
fn list_ppm(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })? {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|x| x == "ppm") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Contract(format!("no .ppm files in {}", dir.display())));
    }
    Ok(out)
}

fn read_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_ppm(dir)?
        .into_iter()
        .map(|(name, path)| Ok((name, Image::read_ppm(&path)?)))
        .collect()
}

/// Create `dir` and write every file atomically, only after all contents exist.
fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(())
}

pub fn synth_data(cfg: &Config, out: &Path) -> Result<()> {
    let samples = synth_dataset(&SynthSpec::new(cfg.image_size, cfg.synth_count, cfg.seed));
    let mut files = Vec::with_capacity(samples.len() + 1);
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        labels.push_str(&format!("{name} {}\n", s.class));
        files.push((name, s.image.to_ppm()?));
    }
    files.push((LABELS.to_string(), labels.into_bytes()));
    write_all(out, &files)?;
    println!("images={} out={}", samples.len(), out.display());
    Ok(())
}

pub fn train_tokenizer(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let images: Vec<Image> = read_images(data)?.into_iter().map(|(_, img)| img).collect();
    let mut trainer = Trainer::new(Tokenizer::<f32>::new(cfg.clone())?);
    trainer.fit(&images, |r| {
        if (r.step + 1) % 50 == 0 || r.step + 1 == cfg.train_steps {
            eprintln!(
                "step={} loss={:.6} fm={:.6} commit={:.6} lr={:.6} tau={:.4} restarted={}",
                r.step + 1,
                r.loss,
                r.fm,
                r.commit,
                r.lr,
                r.tau,
                r.restarted
            );
        }
    })?;
    let ck = trainer.into_model().to_checkpoint();
    write_all(out, &[(TOKENIZER_CKPT.to_string(), ck.to_bytes())])?;
    println!("checkpoint={}", out.join(TOKENIZER_CKPT).display());
    Ok(())
}

fn load_tokenizer(cfg: &Config, path: &Path) -> Result<Tokenizer<f32>> {
    Tokenizer::from_checkpoint(&Checkpoint::load(path)?, cfg)
}

fn sampler(cfg: &Config, index: usize) -> SamplerConfig {
    SamplerConfig {
        seed: cfg.seed.wrapping_add(index as u64),
        ..SamplerConfig::from_config(cfg)
    }
}

pub fn reconstruct(cfg: &Config, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_tokenizer(cfg, checkpoint)?;
    let mut files = Vec::new();
    for (i, (name, img)) in read_images(input)?.into_iter().enumerate() {
        let tokens = model.tokenize(&img)?;
        let rec = ar_reconstruct(&model, &tokens, &sampler(cfg, i))?;
        let ids: Vec<String> = tokens.indices.iter().map(usize::to_string).collect();
        println!("image={name} tokens={}", ids.join(","));
        files.push((name, rec.to_ppm()?));
    }
    write_all(out, &files)
}

fn read_labels(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(LABELS);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next().and_then(|c| c.parse().ok())) {
                (Some(name), Some(class)) => Ok((name.to_string(), class)),
                _ => Err(Error::Config(format!("bad line in {}: `{l}`", path.display()))),
            }
        })
        .collect()
}

pub fn train_prior(cfg: &Config, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_tokenizer(cfg, checkpoint)?;
    let mut prior = Prior::new(cfg, &model.codebook)?;
    let mut corpus = Vec::new();
    for (name, class) in read_labels(data)? {
        let img = Image::read_ppm(&data.join(&name))?;
        let tokens = model.tokenize(&img)?;
        corpus.push(ConversationSample::for_class(&prior.vocab, class, &tokens.indices)?);
    }
    prior.fit(&corpus, cfg, |r| {
        if (r.step + 1) % 50 == 0 || r.step + 1 == cfg.prior_steps {
            eprintln!("step={} loss={:.6} lr={:.6}", r.step + 1, r.loss, r.lr);
        }
    })?;
    println!("accuracy={:.6}", prior.accuracy(&corpus)?);
    write_all(out, &[(PRIOR_CKPT.to_string(), prior.to_checkpoint(cfg).to_bytes())])?;
    println!("checkpoint={}", out.join(PRIOR_CKPT).display());
    Ok(())
}

pub fn generate(
    cfg: &Config,
    checkpoint: &Path,
    prior: &Path,
    class: Option<usize>,
    count: usize,
    out: &Path,
) -> Result<()> {
    let model = load_tokenizer(cfg, checkpoint)?;
    let prior = Prior::from_checkpoint(&Checkpoint::load(prior)?, cfg, &model.codebook)?;
    let classes: Vec<usize> = match class {
        Some(c) => vec![c],
        None => (0..cfg.num_classes).collect(),
    };
    let mut files = Vec::new();
    for &c in &classes {
        let prefix = [BOS, prior.vocab.class_id(c)?];
        for k in 0..count {
            let seed = cfg.seed.wrapping_add(k as u64);
            let gen = prior.generate(&prefix, cfg.temperature, cfg.tokens + 1, seed)?;
            let (tokens, fit) = gen.to_tokens(&prior.vocab, &model.codebook, cfg.tokens)?;
            let img = ar_reconstruct(&model, &tokens, &sampler(cfg, k))?;
            let name = format!("gen_c{c}_{k:03}.ppm");
            println!("image={name} completion={:?} fit={fit:?}", gen.completion);
            files.push((name, img.to_ppm()?));
        }
    }
    write_all(out, &files)
}

pub fn eval(_cfg: &Config, reference: &Path, recon: &Path, out: Option<&Path>) -> Result<()> {
    let refs = read_images(reference)?;
    let recs = read_images(recon)?;
    let names = |v: &[(String, Image)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(&refs) != names(&recs) {
        return Err(Error::Contract(
            "reference and reconstruction directories hold different file names".into(),
        ));
    }
    let report = MetricReport::evaluate(refs.iter().zip(&recs).map(|((n, a), (_, b))| (n.clone(), a, b)))?;
    println!("{}", report.summary());
    let kv = report.to_kv();
    print!("{kv}");
    if let Some(dir) = out {
        write_all(dir, &[("metrics.txt".to_string(), kv.into_bytes())])?;
    }
    Ok(())
}
