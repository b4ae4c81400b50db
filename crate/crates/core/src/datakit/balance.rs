use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, Part};
use crate::error::{ensure, Result};
use crate::losses::va_bin_index;
use crate::seed::SeedStream;

/// Oversampling parameters. MIXED_EXPR and EXPR_VA are balanced over expression
/// classes, MIXED_VA over `num_bins` uniform valence bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub num_bins: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig { num_bins: 20, seed: 0 }
    }
}

fn balance_key(rec: &AnnotationRecord, num_bins: usize) -> Option<usize> {
    match rec.part {
        Part::MixedExpr | Part::ExprVa => rec.expr.map(|e| e.class_index()),
        Part::MixedVa => rec.va.map(|v| va_bin_index(v.valence(), num_bins).expect("valid bins")),
    }
}

/// Count of records per balancing key (class or valence bin) within `part`.
pub fn key_counts(records: &[AnnotationRecord], part: Part, num_bins: usize) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for r in records.iter().filter(|r| r.part == part) {
        if let Some(k) = balance_key(r, num_bins) {
            *counts.entry(k).or_insert(0) += 1;
        }
    }
    counts
}

/// Largest over smallest non-zero count.
pub fn max_min_ratio(counts: &BTreeMap<usize, usize>) -> f64 {
    let max = counts.values().copied().max().unwrap_or(0);
    let min = counts.values().copied().filter(|c| *c > 0).min().unwrap_or(0);
    if min == 0 {
        return f64::INFINITY;
    }
    max as f64 / min as f64
}

/// Oversamples every class (or valence bin) of each part up to the part's largest
/// group. Extra copies cycle through seeded permutations of the group, so no record is
/// duplicated twice before every record of its group has been duplicated once. The
/// original records are always kept; each part's output is shuffled and parts are
/// returned in part order.
pub fn balance_parts(records: &[AnnotationRecord], cfg: &BalanceConfig) -> Result<Vec<AnnotationRecord>> {
    ensure!(cfg.num_bins >= 2, "balancing needs at least two valence bins");
    let root = SeedStream::new(cfg.seed).child("balance");
    let mut out = Vec::with_capacity(records.len());
    for part in Part::ALL {
        let pool: Vec<&AnnotationRecord> = records.iter().filter(|r| r.part == part).collect();
        ensure!(!pool.is_empty(), "cannot balance: part {part} has no records");
        let mut rng = root.child(part.as_str()).rng();

        let mut groups: BTreeMap<usize, Vec<&AnnotationRecord>> = BTreeMap::new();
        for r in &pool {
            if let Some(k) = balance_key(r, cfg.num_bins) {
                groups.entry(k).or_default().push(r);
            }
        }
        let mut balanced: Vec<AnnotationRecord> = pool.iter().map(|r| (*r).clone()).collect();
        if groups.len() <= 1 {
            log::warn!("part {part} has a single class/bin; left unbalanced");
        } else {
            let target = groups.values().map(Vec::len).max().unwrap_or(0);
            for members in groups.values() {
                let mut missing = target - members.len();
                while missing > 0 {
                    let mut order: Vec<usize> = (0..members.len()).collect();
                    order.shuffle(&mut rng);
                    for &i in order.iter().take(missing) {
                        balanced.push(members[i].clone());
                    }
                    missing = missing.saturating_sub(members.len());
                }
            }
        }
        balanced.shuffle(&mut rng);
        out.extend(balanced);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ExprLabel, VaLabel};

    fn expr_rec(i: usize, class: usize, part: Part) -> AnnotationRecord {
        AnnotationRecord {
            frame_ref: format!("f{i}"),
            part,
            expr: Some(ExprLabel::new(class).unwrap()),
            va: (part == Part::ExprVa).then(|| VaLabel::new(0.0, 0.0).unwrap()),
            video_id: "v".into(),
            frame_index: i as u64,
        }
    }

    fn va_rec(i: usize, valence: f64) -> AnnotationRecord {
        AnnotationRecord {
            frame_ref: format!("va{i}"),
            part: Part::MixedVa,
            expr: None,
            va: Some(VaLabel::new(valence, 0.0).unwrap()),
            video_id: "w".into(),
            frame_index: i as u64,
        }
    }

    fn skewed() -> Vec<AnnotationRecord> {
        let mut recs = Vec::new();
        let counts = [100, 10, 37, 5, 64, 1, 20];
        let mut i = 0;
        for (class, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                recs.push(expr_rec(i, class, Part::MixedExpr));
                i += 1;
            }
        }
        for k in 0..50 {
            recs.push(va_rec(k, if k < 40 { 0.05 } else { -0.8 + 0.01 * k as f64 }));
        }
        for k in 0..12 {
            recs.push(expr_rec(1000 + k, k % 3, Part::ExprVa));
        }
        recs
    }

    #[test]
    fn oversampling_reaches_largest_class() {
        let out = balance_parts(&skewed(), &BalanceConfig::default()).unwrap();
        let counts = key_counts(&out, Part::MixedExpr, 20);
        assert!(counts.values().all(|c| (100..=110).contains(c)), "{counts:?}");
        assert!(max_min_ratio(&counts) <= 1.1);
        assert!(max_min_ratio(&key_counts(&out, Part::MixedVa, 20)) <= 1.5);
    }

    #[test]
    fn originals_are_kept() {
        let input = skewed();
        let out = balance_parts(&input, &BalanceConfig::default()).unwrap();
        for r in &input {
            assert!(out.contains(r));
        }
    }

    #[test]
    fn uniform_input_is_permuted() {
        let input: Vec<_> = (0..21).map(|i| expr_rec(i, i % 7, Part::MixedExpr))
            .chain((0..4).map(|k| va_rec(k, -0.9 + 0.5 * k as f64)))
            .chain((0..7).map(|i| expr_rec(100 + i, i, Part::ExprVa)))
            .collect();
        let out = balance_parts(&input, &BalanceConfig::default()).unwrap();
        assert_eq!(out.len(), input.len());
        let mut a: Vec<_> = input.iter().map(|r| r.frame_ref.clone()).collect();
        let mut b: Vec<_> = out.iter().map(|r| r.frame_ref.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = BalanceConfig { num_bins: 20, seed: 42 };
        assert_eq!(balance_parts(&skewed(), &cfg).unwrap(), balance_parts(&skewed(), &cfg).unwrap());
    }

    #[test]
    fn single_class_part_unchanged() {
        let mut input = skewed();
        input.retain(|r| r.part != Part::ExprVa);
        input.extend((0..5).map(|i| expr_rec(500 + i, 2, Part::ExprVa)));
        let out = balance_parts(&input, &BalanceConfig::default()).unwrap();
        assert_eq!(out.iter().filter(|r| r.part == Part::ExprVa).count(), 5);
    }

    #[test]
    fn empty_part_is_an_error() {
        let mut input = skewed();
        input.retain(|r| r.part != Part::MixedVa);
        assert!(balance_parts(&input, &BalanceConfig::default()).is_err());
    }
}
