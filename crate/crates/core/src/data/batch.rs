use rand::seq::SliceRandom;

use super::sample::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Deterministic batch schedule over a labeled and an unlabeled pool.
///
/// Each pool is read as an endless sequence of independent permutations,
/// one per pass. Batch `k` takes positions `[k * per_batch, (k + 1) *
/// per_batch)` of each sequence, so any batch can be recomputed from the
/// seed and its index alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub labeled_len: usize,
    pub unlabeled_len: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(
        labeled_len: usize,
        unlabeled_len: usize,
        labeled_per_batch: usize,
        unlabeled_per_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if labeled_per_batch == 0 {
            return Err(Error::Invalid("labeled_per_batch must be >= 1".into()));
        }
        if labeled_len == 0 {
            return Err(Error::Data("labeled pool is empty".into()));
        }
        if unlabeled_per_batch > 0 && unlabeled_len == 0 {
            return Err(Error::Data(
                "unlabeled pool is empty but unlabeled_per_batch > 0".into(),
            ));
        }
        Ok(Self {
            labeled_len,
            unlabeled_len,
            labeled_per_batch,
            unlabeled_per_batch,
            seed,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.labeled_len.div_ceil(self.labeled_per_batch)
    }

    fn indices(&self, pool: &str, len: usize, per_batch: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(per_batch);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in batch * per_batch..(batch + 1) * per_batch {
            let (cycle, offset) = (pos / len, pos % len);
            if cached.as_ref().map(|(c, _)| *c) != Some(cycle) {
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut rng_from(derive_seed(self.seed, &format!("{pool}{cycle}"))));
                cached = Some((cycle, perm));
            }
            out.push(cached.as_ref().expect("filled above").1[offset]);
        }
        out
    }

    /// Pool indices for batch `batch`: `(labeled, unlabeled)`.
    pub fn batch(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let l = self.indices("labeled", self.labeled_len, self.labeled_per_batch, batch);
        let u = if self.unlabeled_per_batch == 0 {
            Vec::new()
        } else {
            self.indices("unlabeled", self.unlabeled_len, self.unlabeled_per_batch, batch)
        };
        (l, u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

/// Iterator over one epoch of [`MixedBatch`]es starting at batch `start`.
pub struct BatchIter<'a> {
    plan: BatchPlan,
    labeled: &'a [Sample],
    unlabeled: &'a [Sample],
    next: usize,
    end: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        if self.next >= self.end {
            return None;
        }
        let (l, u) = self.plan.batch(self.next);
        self.next += 1;
        Some(MixedBatch {
            labeled: l.into_iter().map(|i| self.labeled[i].clone()).collect(),
            unlabeled: u.into_iter().map(|i| self.unlabeled[i].clone()).collect(),
        })
    }
}

/// Batches for epoch `epoch` of the plan over the given pools.
pub fn compose_batches<'a>(
    labeled: &'a [Sample],
    unlabeled: &'a [Sample],
    labeled_per_batch: usize,
    unlabeled_per_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchIter<'a>> {
    let plan = BatchPlan::new(
        labeled.len(),
        unlabeled.len(),
        labeled_per_batch,
        unlabeled_per_batch,
        seed,
    )?;
    if labeled.iter().any(|s| s.mask.is_none()) {
        return Err(Error::Data("labeled pool contains a sample without a mask".into()));
    }
    let spe = plan.steps_per_epoch();
    Ok(BatchIter {
        plan,
        labeled,
        unlabeled,
        next: epoch * spe,
        end: (epoch + 1) * spe,
    })
}
