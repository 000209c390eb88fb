//! Optimization loop: batches, losses, SGD with the poly schedule,
//! periodic validation and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sonoseg_tensor::{logistic, Tensor};

use crate::backbone::Network;
use crate::checkpoint::{config_diff, Checkpoint};
use crate::config::{Averaging, DataConfig, RunConfig, TrainMode};
use crate::data::{
    augment, load_directory, read_manifest, read_split, BatchPlan, DatasetSplit, LoadOptions, Mask, Sample, Source,
};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Confusion, Scores};
use crate::nn::{Ctx, Mode};
use crate::objective::{consistency_loss, lambda_at, supervised_loss, total_loss, LossReport, WarmupSchedule};
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from, RngState};

pub const CHECKPOINT_KIND: &str = "segmentation";
pub const LOG_HEADER: &str =
    "epoch,step,lr,lambda,loss_total,loss_sup,loss_unsup,val_iou,val_recall,val_precision,val_f1";
const EVAL_BATCH: usize = 16;

/// Sample pools for one split.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Pools {
    /// SHA-256 over ids, pixels and masks of one pool, in order.
    pub fn hash(samples: &[Sample]) -> String {
        let mut h = Sha256::new();
        for s in samples {
            h.update(s.id.as_bytes());
            h.update([0u8]);
            h.update(s.image.to_u8());
            if let Some(m) = &s.mask {
                h.update(&m.data);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Labeled, unlabeled and validation pools of `split` drawn from `all`.
/// Unlabeled samples lose their masks.
pub fn pools_from_split(all: &[Sample], split: &DatasetSplit, in_domain_unlabeled: bool) -> Result<Pools> {
    let by_id: HashMap<&str, &Sample> = all.iter().map(|s| (s.id.as_str(), s)).collect();
    let lookup = |id: &str| -> Result<&Sample> {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("split id {id:?} is not in the dataset")))
    };
    let with_mask = |id: &str, what: &str| -> Result<Sample> {
        let s = lookup(id)?;
        if s.mask.is_none() {
            return Err(Error::Data(format!("{what} sample {id:?} has no mask")));
        }
        Ok(s.clone())
    };
    let mut pools = Pools::default();
    for id in &split.labeled_ids {
        pools.labeled.push(Sample {
            source: Source::RealLabeled,
            ..with_mask(id, "labeled")?
        });
    }
    for id in &split.val_ids {
        pools.val.push(with_mask(id, "validation")?);
    }
    if in_domain_unlabeled {
        for id in split.unlabeled_ids() {
            pools.unlabeled.push(Sample {
                mask: None,
                source: Source::RealUnlabeled,
                ..lookup(&id)?.clone()
            });
        }
    }
    Ok(pools)
}

/// Loads the labeled, unlabeled and validation pools of the configured split.
pub fn load_pools(cfg: &DataConfig) -> Result<Pools> {
    let size = cfg.image_size;
    let opts = LoadOptions {
        mask_suffix: cfg.mask_suffix.clone(),
        size: Some((size, size)),
    };
    let split = read_split(&cfg.splits_dir(), cfg.split_index)?;
    let all = load_directory(&cfg.root, &opts)?;
    let mut pools = pools_from_split(&all, &split, cfg.in_domain_unlabeled)?;
    if let Some(dir) = &cfg.extra_unlabeled_dir {
        let extra = load_directory(dir, &opts)?;
        match &cfg.extra_unlabeled_manifest {
            Some(path) => {
                let ids = read_manifest(path)?;
                let extra: HashMap<&str, &Sample> = extra.iter().map(|s| (s.id.as_str(), s)).collect();
                for id in ids {
                    let s = extra.get(id.as_str()).ok_or_else(|| {
                        Error::Data(format!(
                            "pool id {id:?} from {} is not under {}",
                            path.display(),
                            dir.display()
                        ))
                    })?;
                    pools.unlabeled.push(Sample {
                        mask: None,
                        ..(*s).clone()
                    });
                }
            }
            None => pools
                .unlabeled
                .extend(extra.into_iter().map(|s| Sample { mask: None, ..s })),
        }
    }
    if let Some(max) = cfg.max_unlabeled {
        pools.unlabeled.truncate(max);
    }
    Ok(pools)
}

/// Validation result at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub scores: Scores,
    /// Mean losses over the steps since the previous record.
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
}

impl MetricRecord {
    fn to_line(&self) -> String {
        let s = &self.scores;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.split,
            s.iou,
            s.recall,
            s.precision,
            s.f1,
            self.loss_total,
            self.loss_sup,
            self.loss_unsup
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed history line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            split: f[2].to_string(),
            scores: Scores {
                iou: num(3)?,
                recall: num(4)?,
                precision: num(5)?,
                f1: num(6)?,
            },
            loss_total: num(7)?,
            loss_sup: num(8)?,
            loss_unsup: num(9)?,
        })
    }
}

/// Everything observable about one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step that ran.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    /// Images passed through the network in this step.
    pub forwarded_images: usize,
    /// Decoder passes over that batch.
    pub decoder_forwards: usize,
}

#[derive(Debug, Clone)]
pub enum FitEvent<'a> {
    Step(&'a StepReport),
    Eval(&'a MetricRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub best_val_iou: f64,
    pub last: Option<MetricRecord>,
    pub run_dir: PathBuf,
}

pub struct Trainer {
    config: RunConfig,
    network: Network,
    store: ParamStore<f32>,
    sgd: Sgd<f32>,
    rng: ChaCha8Rng,
    plan: BatchPlan,
    pools: Pools,
    step: u64,
    best_val_iou: f64,
    history: Vec<MetricRecord>,
    window: (f64, f64, f64, usize),
}

impl Trainer {
    pub fn new(config: RunConfig, pools: Pools) -> Result<Self> {
        let config = config.validated()?;
        let seed = config.run.seed;
        let mut store = ParamStore::new();
        let network = Network::new(&config.network, &mut store, derive_seed(seed, "network"))?;
        let sgd = Sgd::new(&store, config.optim.momentum, config.optim.weight_decay);
        let upb = match config.optim.mode {
            TrainMode::Mgcc => config.data.unlabeled_per_batch,
            TrainMode::Supervised => 0,
        };
        let plan = BatchPlan::new(
            pools.labeled.len(),
            pools.unlabeled.len(),
            config.data.labeled_per_batch,
            upb,
            derive_seed(seed, "batches"),
        )?;
        for s in pools.labeled.iter().chain(&pools.unlabeled).chain(&pools.val) {
            let (w, h) = s.size();
            if w != config.data.image_size || h != config.data.image_size {
                return Err(Error::Data(format!(
                    "{} is {w}x{h}, configuration expects {}x{}",
                    s.id, config.data.image_size, config.data.image_size
                )));
            }
        }
        Ok(Self {
            rng: rng_from(derive_seed(seed, "train")),
            config,
            network,
            store,
            sgd,
            plan,
            pools,
            step: 0,
            best_val_iou: f64::NEG_INFINITY,
            history: Vec::new(),
            window: (0.0, 0.0, 0.0, 0),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    /// The network section of `config` must match the stored one.
    pub fn resume(config: RunConfig, pools: Pools, ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let diff = config_diff("network", &ck.config, &config.to_toml())?;
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        let mut t = Self::new(config, pools)?;
        t.store.load_from(ck.group("params")?)?;
        t.sgd.load_slots(&t.store, ck.group("sgd")?)?;
        t.rng = ck.rng("train")?.restore();
        t.step = ck.counter("step")?;
        t.best_val_iou = ck.float("best_val_iou")?;
        let w = (
            ck.float("window.total")?,
            ck.float("window.sup")?,
            ck.float("window.unsup")?,
            ck.counter("window.count")? as usize,
        );
        t.window = w;
        t.history = ck
            .texts
            .get("history")
            .map(|h| h.lines().map(MetricRecord::from_line).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, self.config.to_toml());
        ck.groups.push(("params".into(), self.store.named_values()));
        ck.groups.push(("sgd".into(), self.sgd.slots(&self.store)));
        ck.counters.insert("step".into(), self.step);
        ck.counters.insert("epoch".into(), self.epochs_completed() as u64);
        ck.counters.insert("window.count".into(), self.window.3 as u64);
        ck.floats.insert("best_val_iou".into(), self.best_val_iou);
        ck.floats.insert("window.total".into(), self.window.0);
        ck.floats.insert("window.sup".into(), self.window.1);
        ck.floats.insert("window.unsup".into(), self.window.2);
        ck.rngs.push(RngState::capture("train", &self.rng));
        let mut history = String::new();
        for r in &self.history {
            history.push_str(&r.to_line());
            history.push('\n');
        }
        ck.texts.insert("history".into(), history);
        ck
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn pools(&self) -> &Pools {
        &self.pools
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn best_val_iou(&self) -> f64 {
        self.best_val_iou
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.plan.steps_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.optim.epochs * self.steps_per_epoch()) as u64
    }

    pub fn epochs_completed(&self) -> usize {
        self.step as usize / self.steps_per_epoch()
    }

    pub fn warmup(&self) -> WarmupSchedule {
        WarmupSchedule {
            w_max: self.config.objective.w_max,
            t_max: self.config.objective.t_max.unwrap_or(self.total_steps().max(1)),
        }
    }

    /// One forward/backward pass and SGD update on batch `step`.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let lr = poly_lr(
            step,
            self.total_steps(),
            self.config.optim.lr0,
            self.config.optim.poly_power,
        );
        let (li, ui) = self.plan.batch(step as usize);
        let aug = &self.config.data.augment;
        let labeled: Vec<Sample> = li
            .iter()
            .map(|&i| augment(&self.pools.labeled[i], aug, &mut self.rng))
            .collect();
        let unlabeled: Vec<Sample> = ui
            .iter()
            .map(|&i| augment(&self.pools.unlabeled[i], aug, &mut self.rng))
            .collect();
        let (nl, nu) = (labeled.len(), unlabeled.len());
        let images = stack_images(labeled.iter().chain(&unlabeled))?;
        let target = stack_masks(&labeled)?;
        let num_aux = self.config.network.num_aux;

        let mut ctx = Ctx::new(&self.store, Mode::Train);
        let x = ctx.input(images);
        let y = ctx.input(target);
        let out = self.network.forward(&mut ctx, x, &mut self.rng)?;
        let decoder_forwards = out.decoder_count();
        let lab = if nu == 0 {
            out.clone()
        } else {
            out.narrow(&mut ctx.tape, 0, nl)?
        };
        let (sup, per_decoder) = supervised_loss(&mut ctx.tape, &lab, num_aux, y)?;
        let sup_v = ctx.tape.value(sup).data()[0] as f64;
        let sched = self.warmup();
        let lambda = lambda_at(step as i64, &sched)?;
        let (loss, unsup_v) = if nu > 0 && num_aux > 0 {
            let u = out.narrow(&mut ctx.tape, nl, nu)?;
            let unsup = consistency_loss(&mut ctx.tape, u.main, &u.aux)?;
            let unsup_v = ctx.tape.value(unsup).data()[0] as f64;
            let weighted = ctx.tape.scale(unsup, lambda);
            (ctx.tape.add(sup, weighted)?, unsup_v)
        } else {
            (sup, 0.0)
        };
        let mut report = total_loss(sup_v, unsup_v, step as i64, &sched)?;
        report.per_decoder_supervised = per_decoder;
        let grads = ctx.tape.backward(loss)?;
        let (_, bn) = ctx.finish();
        bn.apply(&mut self.store);
        self.sgd.step(&mut self.store, &grads, lr);

        self.step += 1;
        self.window.0 += report.total;
        self.window.1 += report.supervised;
        self.window.2 += report.unsupervised;
        self.window.3 += 1;
        Ok(StepReport {
            step,
            epoch: step as usize / self.steps_per_epoch(),
            lr,
            loss: report,
            labeled_ids: labeled.into_iter().map(|s| s.id).collect(),
            unlabeled_ids: unlabeled.into_iter().map(|s| s.id).collect(),
            forwarded_images: nl + nu,
            decoder_forwards,
        })
    }

    /// Scores the current parameters on the validation pool.
    pub fn validate(&self) -> Result<Scores> {
        evaluate(
            &self.network,
            &self.store,
            &self.pools.val,
            self.config.optim.threshold,
            self.config.optim.averaging,
        )
    }

    fn record_eval(&mut self, epoch: usize) -> Result<MetricRecord> {
        let scores = self.validate()?;
        let n = self.window.3.max(1) as f64;
        let rec = MetricRecord {
            epoch,
            step: self.step,
            split: "val".into(),
            scores,
            loss_total: self.window.0 / n,
            loss_sup: self.window.1 / n,
            loss_unsup: self.window.2 / n,
        };
        self.window = (0.0, 0.0, 0.0, 0);
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until the configured number of epochs, writing `manifest.toml`,
    /// `log.csv`, `ckpt_best` and `ckpt_last` under `run_dir`. Resumed
    /// trainers continue from their current step.
    pub fn fit(&mut self, run_dir: &Path, mut on_event: impl FnMut(&FitEvent)) -> Result<FitSummary> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let manifest = run_dir.join("manifest.toml");
        if self.step == 0 || !manifest.exists() {
            fs::write(&manifest, self.run_manifest()).map_err(|e| Error::io(&manifest, e))?;
        }
        let log_path = run_dir.join("log.csv");
        let mut log = open_log(&log_path, self.step)?;
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let mut last = None;
        while self.step < total {
            let report = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    let dump = run_dir.join("ckpt_abort");
                    self.checkpoint().save(&dump)?;
                    return Err(Error::NonFinite(format!("{e}; state saved to {}", dump.display())));
                }
                Err(e) => return Err(e),
            };
            on_event(&FitEvent::Step(&report));
            let epoch_done = (self.step as usize).is_multiple_of(spe);
            let epoch = report.epoch;
            let eval = epoch_done && ((epoch + 1) % self.config.optim.eval_every == 0 || self.step == total);
            let rec = if eval { Some(self.record_eval(epoch)?) } else { None };
            let l = &report.loss;
            let mut row = format!(
                "{},{},{},{},{},{},{}",
                epoch, report.step, report.lr, l.lambda, l.total, l.supervised, l.unsupervised
            );
            match &rec {
                Some(r) => {
                    let s = &r.scores;
                    let _ = write!(row, ",{},{},{},{}", s.iou, s.recall, s.precision, s.f1);
                }
                None => row.push_str(",,,,"),
            }
            writeln!(log, "{row}").map_err(|e| Error::io(&log_path, e))?;
            if let Some(r) = rec {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                on_event(&FitEvent::Eval(&r));
                if r.scores.iou > self.best_val_iou {
                    self.best_val_iou = r.scores.iou;
                    self.checkpoint().save(&run_dir.join("ckpt_best"))?;
                }
                self.checkpoint().save(&run_dir.join("ckpt_last"))?;
                last = Some(r);
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if last.is_none() {
            self.checkpoint().save(&run_dir.join("ckpt_last"))?;
        }
        Ok(FitSummary {
            steps: self.step,
            best_val_iou: self.best_val_iou,
            last: last.or_else(|| self.history.last().cloned()),
            run_dir: run_dir.to_path_buf(),
        })
    }

    /// Config snapshot, seeds and dataset hashes.
    pub fn run_manifest(&self) -> String {
        let mut m = String::new();
        let seed = self.config.run.seed;
        let _ = writeln!(m, "[run]\nseed = {seed}");
        let _ = writeln!(m, "network_seed = {}", derive_seed(seed, "network"));
        let _ = writeln!(m, "batch_seed = {}", derive_seed(seed, "batches"));
        let _ = writeln!(m, "train_seed = {}", derive_seed(seed, "train"));
        let _ = writeln!(m, "steps_per_epoch = {}", self.steps_per_epoch());
        let _ = writeln!(m, "total_steps = {}\n", self.total_steps());
        let _ = writeln!(m, "[dataset]");
        for (name, pool) in [
            ("labeled", &self.pools.labeled),
            ("unlabeled", &self.pools.unlabeled),
            ("val", &self.pools.val),
        ] {
            let _ = writeln!(m, "{name}_count = {}", pool.len());
            let _ = writeln!(m, "{name}_sha256 = \"{}\"", Pools::hash(pool));
        }
        let synthetic = self
            .pools
            .unlabeled
            .iter()
            .filter(|s| s.source == Source::Synthetic)
            .count();
        let _ = writeln!(m, "synthetic_unlabeled_count = {synthetic}\n");
        let _ = writeln!(m, "[config]");
        let _ = writeln!(m, "text = '''\n{}'''", self.config.to_toml());
        m
    }
}

fn open_log(path: &Path, step: u64) -> Result<fs::File> {
    if step == 0 {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        return Ok(f);
    }
    // Resuming: keep the header and rows for steps already taken.
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    kept.push_str(LOG_HEADER);
    kept.push('\n');
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split(',').nth(1).and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Stacks images into `[N, 1, H, W]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for s in samples {
        let size = s.size();
        if *dims.get_or_insert(size) != size {
            return Err(Error::Data(format!("{} does not match the batch image size", s.id)));
        }
        data.extend_from_slice(&s.image.data);
        n += 1;
    }
    let (w, h) = dims.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok(Tensor::from_vec(&[n, 1, h, w], data)?)
}

/// Stacks masks into `[N, 1, H, W]` of 0.0 / 1.0.
pub fn stack_masks(samples: &[Sample]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for s in samples {
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no mask", s.id)))?;
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    let (w, h) = samples
        .first()
        .map(|s| s.size())
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok(Tensor::from_vec(&[samples.len(), 1, h, w], data)?)
}

/// Main-decoder foreground probabilities in eval mode, one map per sample.
pub fn predict(network: &Network, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    // Eval mode never draws from the stream.
    let mut rng = rng_from(0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.input(stack_images(chunk)?);
        let logits = network.forward(&mut ctx, x, &mut rng)?.main;
        let v = ctx.tape.value(logits);
        let per = v.numel() / chunk.len();
        for i in 0..chunk.len() {
            out.push(v.data()[i * per..(i + 1) * per].iter().map(|&l| logistic(l)).collect());
        }
    }
    Ok(out)
}

/// `p >= threshold` as a mask.
pub fn binarize(prob: &[f32], width: usize, height: usize, threshold: f64) -> Result<Mask> {
    let t = threshold as f32;
    Mask::new(width, height, prob.iter().map(|&p| u8::from(p >= t)).collect())
}

/// Validation scores of the main decoder. Macro averaging scores each
/// image and takes the mean; micro averaging sums confusion counts first.
pub fn evaluate(
    network: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    threshold: f64,
    averaging: Averaging,
) -> Result<Scores> {
    if samples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let probs = predict(network, store, samples)?;
    let mut per_image = Vec::with_capacity(samples.len());
    let mut sum = Confusion::default();
    for (s, p) in samples.iter().zip(&probs) {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("validation sample {} has no mask", s.id)))?;
        let (w, h) = s.size();
        let c = confusion(&binarize(p, w, h, threshold)?, gt)?;
        sum.tp += c.tp;
        sum.fp += c.fp;
        sum.fn_ += c.fn_;
        sum.tn += c.tn;
        per_image.push(c.scores());
    }
    match averaging {
        Averaging::Macro => Scores::macro_average(&per_image),
        Averaging::Micro => Ok(sum.scores()),
    }
}

/// Network and parameters from a segmentation checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(RunConfig, Network, ParamStore<f32>)> {
    ck.expect_kind(CHECKPOINT_KIND)?;
    let config = RunConfig::from_toml(&ck.config)?;
    let mut store = ParamStore::new();
    let network = Network::new(&config.network, &mut store, 0)?;
    store.load_from(ck.group("params")?)?;
    Ok((config, network, store))
}

/// One row of `log.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    /// Present on rows where validation ran.
    pub val: Option<Scores>,
}

/// Parses a training log. The header must match [`LOG_HEADER`]; the four
/// validation fields are either all empty or all present.
pub fn parse_log(text: &str) -> std::result::Result<Vec<LogRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == LOG_HEADER => {}
        Some(h) => return Err(format!("unexpected header {h:?}")),
        None => return Err("empty log".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            return Err(format!("line {n}: expected 11 fields, found {}", f.len()));
        }
        let num = |j: usize| -> std::result::Result<f64, String> {
            f[j].parse::<f64>()
                .map_err(|_| format!("line {n}: field {j} is not a number: {:?}", f[j]))
        };
        let val = match f[7..].iter().filter(|v| v.is_empty()).count() {
            4 => None,
            0 => Some(Scores {
                iou: num(7)?,
                recall: num(8)?,
                precision: num(9)?,
                f1: num(10)?,
            }),
            _ => return Err(format!("line {n}: validation fields partially filled")),
        };
        rows.push(LogRow {
            epoch: f[0].parse().map_err(|_| format!("line {n}: bad epoch {:?}", f[0]))?,
            step: f[1].parse().map_err(|_| format!("line {n}: bad step {:?}", f[1]))?,
            lr: num(2)?,
            lambda: num(3)?,
            loss_total: num(4)?,
            loss_sup: num(5)?,
            loss_unsup: num(6)?,
            val,
        });
    }
    Ok(rows)
}
