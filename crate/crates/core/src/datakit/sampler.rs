use rand::seq::SliceRandom;

use super::Labelled;
use crate::error::{ensure, Result};
use crate::losses::BatchLabels;
use crate::seed::SeedStream;

/// One optimizer step's data: N items from each of the three parts.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTriplet<T> {
    pub parts: [Vec<T>; 3],
}

impl<T: Labelled> BatchTriplet<T> {
    /// Labels of every loss-bearing instance, flattened per part.
    pub fn labels(&self) -> BatchLabels {
        let mut out = BatchLabels::default();
        for (p, items) in self.parts.iter().enumerate() {
            out.parts[p] = items.iter().flat_map(|it| it.instance_labels().into_iter().map(|(_, l)| l)).collect();
        }
        out
    }
}

/// Epoch-wise sampler over three pools. Each part is drawn without replacement
/// through a seeded permutation; an epoch has as many batches as the smallest part
/// can fill, and trailing partial batches are dropped.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    sizes: [usize; 3],
    per_part: usize,
    seed: SeedStream,
}

impl TripletSampler {
    pub fn new(sizes: [usize; 3], per_part: usize, seed: SeedStream) -> Result<Self> {
        ensure!(per_part >= 1, "per-part batch size must be positive");
        for (p, s) in sizes.iter().enumerate() {
            ensure!(
                *s >= per_part,
                "part {} has {s} items, fewer than the per-part batch size {per_part}",
                p + 1
            );
        }
        Ok(TripletSampler { sizes, per_part, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sizes.iter().map(|s| s / self.per_part).min().unwrap_or(0)
    }

    /// Index triplets of epoch `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<[Vec<usize>; 3]> {
        let perms: Vec<Vec<usize>> = (0..3)
            .map(|p| {
                let mut order: Vec<usize> = (0..self.sizes[p]).collect();
                let mut rng = self.seed.child("part").index(p as u64).index(epoch as u64).rng();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        (0..self.batches_per_epoch())
            .map(|b| {
                let range = b * self.per_part..(b + 1) * self.per_part;
                std::array::from_fn(|p| perms[p][range.clone()].to_vec())
            })
            .collect()
    }
}

/// All batch triplets of one epoch, materialized from the pools.
pub fn sample_batch_triplet<T: Clone>(
    pools: &[Vec<T>; 3],
    per_part: usize,
    seed: SeedStream,
    epoch: usize,
) -> Result<Vec<BatchTriplet<T>>> {
    let sampler = TripletSampler::new([pools[0].len(), pools[1].len(), pools[2].len()], per_part, seed)?;
    Ok(sampler
        .epoch(epoch)
        .into_iter()
        .map(|idx| BatchTriplet {
            parts: std::array::from_fn(|p| idx[p].iter().map(|&i| pools[p][i].clone()).collect()),
        })
        .collect())
}
