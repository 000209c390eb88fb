//! Trains the desk preset in both modes on a toy split and prints
//! validation IoU. Args: `[epochs] [seed] [n_toy] [w_max] [modes]`, where
//! `modes` is a comma list of `supervised` and `mgcc`. `SONOSEG_TOY` may hold
//! a TOML fragment overriding the toy generator settings.

use std::time::Instant;

use sonoseg::config::{RunConfig, TrainMode};
use sonoseg::data::{generate_toy, make_splits, partition_labels, ToyGenConfig};
use sonoseg::trainer::{pools_from_split, Trainer};

fn main() -> sonoseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(40, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let n: usize = args.get(3).map_or(300, |s| s.parse().unwrap());
    let w_max: Option<f64> = args.get(4).map(|s| s.parse().unwrap());
    let modes: Vec<TrainMode> = args
        .get(5)
        .map_or("supervised,mgcc", |s| s.as_str())
        .split(',')
        .map(|m| m.parse().unwrap())
        .collect();
    let base: ToyGenConfig = match std::env::var("SONOSEG_TOY") {
        Ok(text) => toml::from_str(&text).expect("toy override"),
        Err(_) => ToyGenConfig::default(),
    };
    let toy = ToyGenConfig { seed, ..base };
    let samples = generate_toy(&toy, n)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut cfg = RunConfig::desk();
    cfg.optim.epochs = epochs;
    cfg.run.seed = seed;
    if let Some(w) = w_max {
        cfg.objective.w_max = w;
    }
    let split = &make_splits(&ids, cfg.data.train_ratio, 1, seed)?[0];
    let split = partition_labels(split, cfg.data.labeled_fraction, seed)?;
    for mode in modes {
        let pools = pools_from_split(&samples, &split, true)?;
        let mut c = cfg.clone();
        c.optim.mode = mode;
        let t0 = Instant::now();
        let mut trainer = Trainer::new(c, pools)?;
        let dir = std::env::temp_dir().join(format!("ssl_probe_{mode:?}_{seed}"));
        let summary = trainer.fit(&dir, |e| {
            if let sonoseg::trainer::FitEvent::Eval(r) = e {
                eprintln!(
                    "  {mode:?} epoch {} iou {:.4} loss {:.4} sup {:.4} unsup {:.5}",
                    r.epoch, r.scores.iou, r.loss_total, r.loss_sup, r.loss_unsup
                );
            }
        })?;
        let last = summary.last.unwrap();
        println!(
            "{mode:?}: labeled {} unlabeled {} val {} final iou {:.4} best {:.4} in {:.1}s",
            trainer.pools().labeled.len(),
            trainer.pools().unlabeled.len(),
            trainer.pools().val.len(),
            last.scores.iou,
            summary.best_val_iou,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
