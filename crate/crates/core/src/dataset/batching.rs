use rand::seq::SliceRandom;

use super::{Manifest, Split};
use crate::error::{Error, Result};
use crate::rng;

/// One epoch's batch schedule as indices into `Manifest::records`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// Records left out because the trailing batch was a singleton while the
    /// ranking term needs pairs.
    pub dropped: Vec<usize>,
}

impl BatchPlan {
    pub fn ids<'m>(&self, manifest: &'m Manifest) -> Vec<Vec<&'m str>> {
        self.batches
            .iter()
            .map(|b| b.iter().map(|&i| manifest.records[i].id.as_str()).collect())
            .collect()
    }
}

/// Shuffles the split with a permutation keyed on `(seed, epoch)` and chops
/// it into batches. The short final batch is kept unless it holds a single
/// sample and `ranking_enabled` is set.
pub fn make_batches(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    ranking_enabled: bool,
) -> Result<BatchPlan> {
    if batch_size == 0 || (ranking_enabled && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch size {batch_size} too small (ranking loss needs at least 2)"
        )));
    }
    let mut order: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(Error::Empty(format!("{split} split")));
    }
    let mut rng = rng::stream(seed, &format!("batches/epoch-{epoch}"));
    order.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut dropped = Vec::new();
    if ranking_enabled && batches.last().is_some_and(|b| b.len() < 2) {
        dropped = batches.pop().unwrap_or_default();
        log::warn!(
            "epoch {epoch}: dropping singleton batch ({} sample) because the ranking loss needs pairs",
            dropped.len()
        );
    }
    Ok(BatchPlan { batches, dropped })
}
