//! Pixel confusion counts, overlap scores and multi-run aggregation.
//!
//! Conventions: a ratio whose numerator and denominator are both zero is
//! 1.0 when prediction and ground truth are both empty, 0.0 otherwise.
//! Spread across runs is the sample standard deviation (n - 1), 0 for a
//! single run.

use std::fmt::Write;

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn ratio(&self, num: u64, den: u64) -> f64 {
        if den == 0 {
            if self.both_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }

    /// Equivalent to `2 p r / (p + r)`, written in counts so it stays exact.
    pub fn f1(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn scores(&self) -> Scores {
        Scores {
            iou: self.iou(),
            recall: self.recall(),
            precision: self.precision(),
            f1: self.f1(),
        }
    }
}

/// Counts over two equal-length binary slices.
pub fn confusion_slices(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Invalid("masks must be binary".into())),
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Invalid(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    confusion_slices(&pred.data, &gt.data)
}

/// The four reported scores, in table column order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Scores {
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Scores {
    pub const NAMES: [&'static str; 4] = ["IoU", "Recall", "Precision", "F1"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.iou, self.recall, self.precision, self.f1]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            iou: a[0],
            recall: a[1],
            precision: a[2],
            f1: a[3],
        }
    }

    /// Per-item mean of each score.
    pub fn macro_average(items: &[Scores]) -> Result<Scores> {
        if items.is_empty() {
            return Err(Error::Invalid("cannot average zero score sets".into()));
        }
        let mut acc = [0.0; 4];
        for s in items {
            for (a, v) in acc.iter_mut().zip(s.as_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

/// Mean and spread of every score over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub scores: [MeanStd; 4],
}

pub fn aggregate(runs: &[Scores]) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::Invalid("aggregation needs at least one run".into()));
    }
    let scores = std::array::from_fn(|i| {
        let vals: Vec<f64> = runs.iter().map(|s| s.as_array()[i]).collect();
        mean_std(&vals)
    });
    Ok(Aggregate {
        runs: runs.len(),
        scores,
    })
}

const FOOTER: &str = "per-image macro average; empty prediction on empty ground truth scores 1; stdev is the sample stdev (n-1) over runs";

/// CSV with one row per labelled aggregate, scores in percent.
pub fn aggregate_csv(rows: &[(String, Aggregate)]) -> String {
    let mut out = String::from("method,runs");
    for n in Scores::NAMES {
        let _ = write!(out, ",{n}_mean,{n}_std");
    }
    out.push('\n');
    for (name, agg) in rows {
        let _ = write!(out, "{name},{}", agg.runs);
        for s in &agg.scores {
            let _ = write!(out, ",{:.4},{:.4}", 100.0 * s.mean, 100.0 * s.std);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "# {FOOTER}");
    out
}

/// Aligned plain-text table, scores in percent as `mean ± std`.
pub fn aggregate_table(rows: &[(String, Aggregate)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let cell_w = 15;
    let mut out = format!("{:<name_w$}  {:>4}", "method", "runs");
    for n in Scores::NAMES {
        let _ = write!(out, "  {n:>cell_w$}");
    }
    out.push('\n');
    for (name, agg) in rows {
        let _ = write!(out, "{name:<name_w$}  {:>4}", agg.runs);
        for s in &agg.scores {
            let cell = format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
            let _ = write!(out, "  {cell:>cell_w$}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "note: {FOOTER}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let gt = Mask::new(4, 4, (0..16).map(|i| (i < 5) as u8).collect()).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 5,
                fp: 0,
                fn_: 0,
                tn: 11
            }
        );
        let inv = Mask::new(4, 4, gt.data.iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn hand_scores() {
        let c = Confusion {
            tp: 2,
            fp: 2,
            fn_: 2,
            tn: 10,
        };
        assert!((c.iou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 0.5);
        assert_eq!(c.f1(), 0.5);
        let empty = Confusion {
            tn: 9,
            ..Default::default()
        };
        assert_eq!(empty.scores().as_array(), [1.0; 4]);
        let missed = Confusion {
            fn_: 3,
            tn: 6,
            ..Default::default()
        };
        assert_eq!(missed.scores().as_array(), [0.0; 4]);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(confusion(&Mask::empty(2, 2), &Mask::empty(2, 3)).is_err());
    }

    #[test]
    fn aggregation() {
        let s = |v: f64| Scores {
            iou: v,
            recall: v,
            precision: v,
            f1: v,
        };
        let a = aggregate(&[s(0.66), s(0.68), s(0.70)]).unwrap();
        assert!((a.scores[0].mean - 0.68).abs() < 1e-12);
        assert!((a.scores[0].std - 0.02).abs() < 1e-12);
        let a = aggregate(&[s(0.68); 3]).unwrap();
        assert_eq!(a.scores[0].std, 0.0);
        let a = aggregate(&[s(0.5)]).unwrap();
        assert_eq!(a.scores[0], MeanStd { mean: 0.5, std: 0.0 });
        let table = aggregate_table(&[("mgcc".into(), a.clone())]);
        assert!(table.contains("50.00 ± 0.00"));
        assert!(aggregate_csv(&[("mgcc".into(), a)]).starts_with("method,runs,IoU_mean"));
    }
}
