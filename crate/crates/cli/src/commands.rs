use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use sonoseg::checkpoint::{file_sha256, Checkpoint};
use sonoseg::config::{Averaging, RunConfig, TrainMode};
use sonoseg::data::{
    generate_toy, load_directory, make_splits, partition_labels, read_split, write_sample, write_split, LoadOptions,
    Sample,
};
use sonoseg::ldm::{
    denoiser_checkpoint, load_denoiser, load_vae, reconstruction_mse, train_ldm as fit_denoiser, train_vae as fit_vae,
    vae_checkpoint, Generator, Vae,
};
use sonoseg::metrics::{aggregate, aggregate_csv, aggregate_table, Scores};
use sonoseg::rng::derive_seed;
use sonoseg::trainer::{evaluate, load_model, load_pools, parse_log, FitEvent, Trainer};
use sonoseg::{Error, Result};

use crate::{ConfigArg, Preset, Select, SplitPart};

pub fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut cfg = match (&arg.config, arg.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Desk)) => RunConfig::desk(),
        (None, Some(Preset::Full)) | (None, None) => RunConfig::default(),
    };
    if let Some(seed) = arg.seed {
        cfg.run.seed = seed;
        cfg.ldm.ddim.seed = seed;
    }
    Ok(cfg)
}

pub fn config(arg: &ConfigArg) -> Result<()> {
    let cfg = load_config(arg)?.validated()?;
    print!("{}", cfg.to_toml());
    Ok(())
}

pub fn prepare(
    arg: &ConfigArg,
    input: Option<PathBuf>,
    toy: Option<usize>,
    out: &Path,
    train_ratio: Option<f64>,
    labeled_fraction: Option<f64>,
    repeats: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(arg)?;
    if let Some(r) = train_ratio {
        cfg.data.train_ratio = r;
    }
    if let Some(f) = labeled_fraction {
        cfg.data.labeled_fraction = f;
    }
    if let Some(r) = repeats {
        cfg.data.repeats = r;
        cfg.data.split_index = cfg.data.split_index.min(r.saturating_sub(1));
    }
    let cfg = cfg.validated()?;
    let seed = cfg.run.seed;
    let root = match (input, toy) {
        (Some(dir), _) => dir,
        (None, Some(n)) => {
            let mut toy_cfg = cfg.data.toy.clone();
            toy_cfg.seed = seed;
            let samples = generate_toy(&toy_cfg, n)?;
            for s in &samples {
                write_sample(out, s, &cfg.data.mask_suffix)?;
            }
            println!("wrote {n} toy images to {}", out.display());
            out.to_path_buf()
        }
        (None, None) => return Err(Error::Invalid("either --input or --toy is required".into())),
    };
    let opts = LoadOptions {
        mask_suffix: cfg.data.mask_suffix.clone(),
        size: None,
    };
    let samples = load_directory(&root, &opts)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits_dir = out.join("splits");
    for split in make_splits(&ids, cfg.data.train_ratio, cfg.data.repeats, seed)? {
        let split = partition_labels(&split, cfg.data.labeled_fraction, seed)?;
        write_split(&splits_dir, &split)?;
        println!(
            "split {}: train {} / val {} / labeled {}",
            split.repeat_index,
            split.train_ids.len(),
            split.val_ids.len(),
            split.labeled_ids.len()
        );
    }
    println!("manifests in {}", splits_dir.display());
    Ok(())
}

pub struct SegOverrides {
    pub mode: Option<TrainMode>,
    pub epochs: Option<usize>,
    pub data: Option<PathBuf>,
    pub split: Option<usize>,
    pub extra_unlabeled: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn train_seg(arg: &ConfigArg, o: SegOverrides, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(arg)?;
    if let Some(m) = o.mode {
        cfg.optim.mode = m;
    }
    if let Some(e) = o.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(d) = o.data {
        cfg.data.root = d;
    }
    if let Some(s) = o.split {
        cfg.data.split_index = s;
    }
    if let Some(d) = o.extra_unlabeled {
        cfg.data.extra_unlabeled_dir = Some(d);
    }
    if let Some(p) = o.pool {
        cfg.data.extra_unlabeled_manifest = Some(p);
    }
    if let Some(out) = o.out {
        cfg.run.output_dir = out;
    }
    let cfg = cfg.validated()?;
    let pools = load_pools(&cfg.data)?;
    let run_dir = cfg.run.output_dir.clone();
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, pools, &Checkpoint::load(&path)?)?,
        None => Trainer::new(cfg, pools)?,
    };
    let p = trainer.pools();
    eprintln!(
        "training {:?}: {} labeled, {} unlabeled, {} validation; {} steps/epoch, {} steps",
        trainer.config().optim.mode,
        p.labeled.len(),
        p.unlabeled.len(),
        p.val.len(),
        trainer.steps_per_epoch(),
        trainer.total_steps()
    );
    let summary = trainer.fit(&run_dir, |e| {
        if let FitEvent::Eval(r) = e {
            eprintln!(
                "epoch {:>4}  loss {:.4} (sup {:.4}, unsup {:.5})  val IoU {:.4}  F1 {:.4}",
                r.epoch + 1,
                r.loss_total,
                r.loss_sup,
                r.loss_unsup,
                r.scores.iou,
                r.scores.f1
            );
        }
    })?;
    println!(
        "done: {} steps, best val IoU {:.4}, run directory {}",
        summary.steps,
        summary.best_val_iou,
        summary.run_dir.display()
    );
    Ok(())
}

fn ldm_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.output_dir.join("ldm")
}

/// Training images of the configured split at the generator's resolution.
fn ldm_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let split = read_split(&cfg.data.splits_dir(), cfg.data.split_index)?;
    let size = cfg.ldm.vae.image_size;
    let opts = LoadOptions {
        mask_suffix: cfg.data.mask_suffix.clone(),
        size: Some((size, size)),
    };
    let train: HashSet<&String> = split.train_ids.iter().collect();
    let samples: Vec<Sample> = load_directory(&cfg.data.root, &opts)?
        .into_iter()
        .filter(|s| train.contains(&s.id))
        .map(|s| Sample { mask: None, ..s })
        .collect();
    if samples.len() != split.train_ids.len() {
        return Err(Error::Data(format!(
            "{} of {} training ids found under {}",
            samples.len(),
            split.train_ids.len(),
            cfg.data.root.display()
        )));
    }
    Ok(samples)
}

pub fn train_vae(arg: &ConfigArg, data: Option<PathBuf>, epochs: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(arg)?;
    if let Some(d) = data {
        cfg.data.root = d;
    }
    if let Some(e) = epochs {
        cfg.ldm.vae.epochs = e;
    }
    let cfg = cfg.validated()?;
    let samples = ldm_samples(&cfg)?;
    let mut untrained_store = sonoseg::params::ParamStore::new();
    let seed = derive_seed(cfg.run.seed, "vae");
    let untrained = Vae::new(&cfg.ldm.vae, &mut untrained_store, seed)?;
    let before = reconstruction_mse(&untrained, &untrained_store, &samples)?;
    eprintln!("training VAE on {} images", samples.len());
    let every = (cfg.ldm.vae.epochs / 10).max(1);
    let (vae, store, history) = fit_vae(&samples, &cfg.ldm.vae, seed, |e| {
        if (e.epoch + 1) % every == 0 {
            eprintln!(
                "epoch {:>5}  loss {:.6}  mse {:.6}  kl {:.4}",
                e.epoch + 1,
                e.loss,
                e.mse,
                e.kl
            );
        }
    })?;
    let after = reconstruction_mse(&vae, &store, &samples)?;
    let path = out.unwrap_or_else(|| ldm_dir(&cfg).join("vae.ckpt"));
    let losses: Vec<f64> = history.iter().map(|e| e.loss).collect();
    vae_checkpoint(&cfg, &store, &losses).save(&path)?;
    println!(
        "reconstruction MSE {before:.6} -> {after:.6} ({:.1}% of untrained); saved {}",
        100.0 * after / before.max(f64::MIN_POSITIVE),
        path.display()
    );
    Ok(())
}

pub fn train_ldm(
    arg: &ConfigArg,
    data: Option<PathBuf>,
    epochs: Option<usize>,
    vae_path: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(arg)?;
    if let Some(d) = data {
        cfg.data.root = d;
    }
    if let Some(e) = epochs {
        cfg.ldm.denoiser.epochs = e;
    }
    let vae_path = vae_path.unwrap_or_else(|| ldm_dir(&cfg).join("vae.ckpt"));
    let (vae_cfg, vae, vae_store) = load_vae(&Checkpoint::load(&vae_path)?)?;
    // The denoiser is tied to the latent layout of this particular VAE.
    cfg.ldm.vae = vae_cfg.ldm.vae;
    let cfg = cfg.validated()?;
    let samples = ldm_samples(&cfg)?;
    let schedule = sonoseg::ldm::DiffusionSchedule::new(&cfg.ldm.schedule)?;
    eprintln!("training denoiser on {} latents", samples.len());
    let every = (cfg.ldm.denoiser.epochs / 10).max(1);
    let (_, store, scale, history) = fit_denoiser(
        &vae,
        &vae_store,
        &samples,
        &cfg.ldm.denoiser,
        &schedule,
        derive_seed(cfg.run.seed, "denoiser"),
        |epoch, loss| {
            if (epoch + 1) % every == 0 {
                eprintln!("epoch {:>5}  loss {loss:.6}", epoch + 1);
            }
        },
    )?;
    let path = out.unwrap_or_else(|| ldm_dir(&cfg).join("denoiser.ckpt"));
    denoiser_checkpoint(&cfg, &store, scale, &file_sha256(&vae_path)?, &history).save(&path)?;
    println!(
        "final loss {:.6}, latent scale {scale:.4}; saved {}",
        history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    arg: &ConfigArg,
    n: Option<usize>,
    steps: Option<usize>,
    eta: Option<f64>,
    vae_path: Option<PathBuf>,
    denoiser_path: Option<PathBuf>,
    out: Option<PathBuf>,
    pool: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(arg)?;
    if let Some(s) = steps {
        cfg.ldm.ddim.steps = s;
    }
    if let Some(e) = eta {
        cfg.ldm.ddim.eta = e;
    }
    let cfg = cfg.validated()?;
    let n = n.unwrap_or(cfg.ldm.count);
    let vae_path = vae_path.unwrap_or_else(|| ldm_dir(&cfg).join("vae.ckpt"));
    let denoiser_path = denoiser_path.unwrap_or_else(|| ldm_dir(&cfg).join("denoiser.ckpt"));
    let den = load_denoiser(&Checkpoint::load(&denoiser_path)?)?;
    let vae_hash = file_sha256(&vae_path)?;
    if !den.vae_sha256.is_empty() && den.vae_sha256 != vae_hash {
        return Err(Error::Data(format!(
            "{} was trained on a different VAE than {}",
            denoiser_path.display(),
            vae_path.display()
        )));
    }
    let (_, vae, vae_store) = load_vae(&Checkpoint::load(&vae_path)?)?;
    let generator = Generator {
        vae: &vae,
        vae_store: &vae_store,
        denoiser: &den.net,
        denoiser_store: &den.store,
        latent_scale: den.latent_scale,
        schedule: &den.schedule,
    };
    let out = out.unwrap_or_else(|| ldm_dir(&cfg).join("synthetic"));
    let pool = pool.unwrap_or_else(|| out.join("pool.txt"));
    let den_hash = file_sha256(&denoiser_path)?;
    let samples = generator.synthesize(n, &cfg.ldm.ddim, &out, (&vae_hash, &den_hash), Some(&pool))?;
    println!(
        "wrote {} images ({} DDIM steps, seed {}) to {}; pool manifest {}",
        samples.len(),
        cfg.ldm.ddim.steps,
        cfg.ldm.ddim.seed,
        out.display(),
        pool.display()
    );
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    part: SplitPart,
    split_index: Option<usize>,
    threshold: Option<f64>,
    averaging: Option<Averaging>,
) -> Result<()> {
    let (stored, network, store) = load_model(&Checkpoint::load(ckpt)?)?;
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => stored,
    };
    if let Some(d) = data {
        cfg.data.root = d;
    }
    if let Some(k) = split_index {
        cfg.data.split_index = k;
    }
    let split = read_split(&cfg.data.splits_dir(), cfg.data.split_index)?;
    let (name, ids) = match part {
        SplitPart::Train => ("train", split.train_ids),
        SplitPart::Val => ("val", split.val_ids),
        SplitPart::Labeled => ("labeled", split.labeled_ids),
    };
    let size = cfg.data.image_size;
    let opts = LoadOptions {
        mask_suffix: cfg.data.mask_suffix.clone(),
        size: Some((size, size)),
    };
    let wanted: HashSet<&String> = ids.iter().collect();
    let samples: Vec<Sample> = load_directory(&cfg.data.root, &opts)?
        .into_iter()
        .filter(|s| wanted.contains(&s.id))
        .collect();
    if samples.len() != ids.len() {
        return Err(Error::Data(format!(
            "{} of {} {name} ids found under {}",
            samples.len(),
            ids.len(),
            cfg.data.root.display()
        )));
    }
    let threshold = threshold.unwrap_or(cfg.optim.threshold);
    let averaging = averaging.unwrap_or(cfg.optim.averaging);
    let s = evaluate(&network, &store, &samples, threshold, averaging)?;
    let how = match averaging {
        Averaging::Macro => "per-image macro average; empty prediction on empty ground truth scores 1",
        Averaging::Micro => "pixel counts summed over the split",
    };
    println!(
        "# {}: split {} {name}, {} images, threshold {threshold}; {how}",
        ckpt.display(),
        cfg.data.split_index,
        samples.len()
    );
    println!(
        "{:<8}  {:>8}  {:>8}  {:>9}  {:>8}",
        "split", "IoU", "Recall", "Precision", "F1"
    );
    println!(
        "{name:<8}  {:>8.4}  {:>8.4}  {:>9.4}  {:>8.4}",
        s.iou, s.recall, s.precision, s.f1
    );
    Ok(())
}

/// Validation scores selected from one run's `log.csv`.
pub fn run_scores(dir: &Path, select: Select) -> Result<Scores> {
    let path = dir.join("log.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = parse_log(&text).map_err(|m| Error::item(&path, m))?;
    let vals: Vec<Scores> = rows.iter().filter_map(|r| r.val).collect();
    let chosen = match select {
        Select::Last => vals.last().copied(),
        Select::Best => vals.iter().copied().reduce(|a, b| if b.iou > a.iou { b } else { a }),
    };
    chosen.ok_or_else(|| Error::item(&path, "no validation rows"))
}

pub fn report(runs: &[PathBuf], label: &str, select: Select, csv: bool) -> Result<()> {
    let scores = runs.iter().map(|d| run_scores(d, select)).collect::<Result<Vec<_>>>()?;
    let rows = vec![(label.to_string(), aggregate(&scores)?)];
    if csv {
        print!("{}", aggregate_csv(&rows));
    } else {
        print!("{}", aggregate_table(&rows));
    }
    Ok(())
}
