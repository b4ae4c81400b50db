//! Challenge evaluation: `0.67·F1 + 0.33·accuracy` for expressions and mean CCC for
//! valence/arousal, computed on frame-level predictions.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::losses::{ccc_with_epsilon, ExprLabel, VaLabel, NUM_EXPR_CLASSES};

const F1_WEIGHT: f64 = 0.67;
const ACCURACY_WEIGHT: f64 = 0.33;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Unweighted mean over all classes; classes that never occur score 0.
    #[default]
    Macro,
    /// Mean weighted by true-class support.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub f1_average: F1Average,
    pub ccc_epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { f1_average: F1Average::Macro, ccc_epsilon: 1e-8 }
    }
}

fn check_aligned(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<()> {
    ensure!(!truth.is_empty(), "classification metrics need at least one frame");
    ensure!(
        truth.len() == pred.len(),
        "{} true labels for {} predictions",
        truth.len(),
        pred.len()
    );
    ensure!(
        truth.iter().chain(pred).all(|c| *c < num_classes),
        "class index outside 0..{num_classes}"
    );
    Ok(())
}

fn per_class_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> (Vec<f64>, Vec<usize>) {
    let mut tp = vec![0usize; num_classes];
    let mut n_pred = vec![0usize; num_classes];
    let mut n_true = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        n_true[t] += 1;
        n_pred[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let f1 = (0..num_classes)
        .map(|c| {
            // 2PR/(P+R) = 2TP/(|pred| + |true|), and 0 when the class is never hit.
            let denom = n_pred[c] + n_true[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    (f1, n_true)
}

/// Unweighted mean of per-class F1 over `num_classes` classes.
pub fn macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    check_aligned(truth, pred, num_classes)?;
    let (f1, _) = per_class_f1(truth, pred, num_classes);
    Ok(f1.iter().sum::<f64>() / num_classes as f64)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    check_aligned(truth, pred, num_classes)?;
    let (f1, support) = per_class_f1(truth, pred, num_classes);
    let total = truth.len() as f64;
    Ok(f1.iter().zip(&support).map(|(f, s)| f * *s as f64).sum::<f64>() / total)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    ensure!(!truth.is_empty(), "accuracy needs at least one frame");
    ensure!(truth.len() == pred.len(), "{} true labels for {} predictions", truth.len(), pred.len());
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `0.67·f1 + 0.33·accuracy`.
pub fn expr_challenge_score(f1: f64, acc: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&f1) && (0.0..=1.0).contains(&acc),
        "F1 and accuracy must lie in [0, 1], got ({f1}, {acc})"
    );
    Ok(F1_WEIGHT * f1 + ACCURACY_WEIGHT * acc)
}

/// Frame-aligned predictions with optional ground truth per task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub frame_ids: Vec<String>,
    pub expr_true: Vec<Option<ExprLabel>>,
    pub expr_pred: Vec<usize>,
    pub va_true: Vec<Option<VaLabel>>,
    pub va_pred: Vec<(f64, f64)>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn push(
        &mut self,
        frame_id: impl Into<String>,
        expr_true: Option<ExprLabel>,
        expr_pred: usize,
        va_true: Option<VaLabel>,
        va_pred: (f64, f64),
    ) {
        self.frame_ids.push(frame_id.into());
        self.expr_true.push(expr_true);
        self.expr_pred.push(expr_pred);
        self.va_true.push(va_true);
        self.va_pred.push(va_pred);
    }

    fn validate(&self) -> Result<()> {
        let n = self.frame_ids.len();
        ensure!(
            self.expr_true.len() == n
                && self.expr_pred.len() == n
                && self.va_true.len() == n
                && self.va_pred.len() == n,
            "prediction set columns are not aligned"
        );
        ensure!(
            self.expr_pred.iter().all(|c| *c < NUM_EXPR_CLASSES),
            "predicted expression class outside 0..=6"
        );
        ensure!(
            self.va_pred.iter().all(|(v, a)| v.is_finite() && a.is_finite()),
            "non-finite valence/arousal prediction"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    /// Number of frames with an expression ground truth, per class.
    pub expr_support: Vec<usize>,
    pub expr_frames: usize,
    pub va_frames: usize,
}

/// Metrics of one prediction set. Scores of a task without any labelled frame are 0
/// and its frame count is 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub expr_score: f64,
    pub macro_f1: f64,
    pub total_accuracy: f64,
    pub valence_ccc: f64,
    pub arousal_ccc: f64,
    pub va_score: f64,
    pub counts: MetricCounts,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(preds: &PredictionSet, cfg: &MetricsConfig) -> Result<MetricsReport> {
    preds.validate()?;
    let mut report = MetricsReport::default();

    let (truth, pred): (Vec<usize>, Vec<usize>) = preds
        .expr_true
        .iter()
        .zip(&preds.expr_pred)
        .filter_map(|(t, p)| t.map(|t| (t.class_index(), *p)))
        .unzip();
    let (va_truth, va_pred): (Vec<VaLabel>, Vec<(f64, f64)>) = preds
        .va_true
        .iter()
        .zip(&preds.va_pred)
        .filter_map(|(t, p)| t.map(|t| (t, *p)))
        .unzip();
    if truth.is_empty() && va_truth.is_empty() {
        return Err(invalid!("no frame carries ground truth for any task"));
    }

    if !truth.is_empty() {
        let f1 = match cfg.f1_average {
            F1Average::Macro => macro_f1(&truth, &pred, NUM_EXPR_CLASSES)?,
            F1Average::Weighted => weighted_f1(&truth, &pred, NUM_EXPR_CLASSES)?,
        };
        let acc = accuracy(&truth, &pred)?;
        report.macro_f1 = f1;
        report.total_accuracy = acc;
        report.expr_score = expr_challenge_score(f1, acc)?;
        let mut support = vec![0; NUM_EXPR_CLASSES];
        truth.iter().for_each(|c| support[*c] += 1);
        report.counts.expr_support = support;
        report.counts.expr_frames = truth.len();
    }

    if !va_truth.is_empty() {
        ensure!(va_truth.len() >= 2, "CCC needs at least two frames with valence/arousal truth");
        let col = |f: fn(&VaLabel) -> f64| va_truth.iter().map(f).collect::<Vec<_>>();
        let (tv, ta) = (col(|l| l.valence()), col(|l| l.arousal()));
        let pv: Vec<f64> = va_pred.iter().map(|p| p.0).collect();
        let pa: Vec<f64> = va_pred.iter().map(|p| p.1).collect();
        report.valence_ccc = ccc_with_epsilon(&tv, &pv, cfg.ccc_epsilon)?;
        report.arousal_ccc = ccc_with_epsilon(&ta, &pa, cfg.ccc_epsilon)?;
        report.va_score = (report.valence_ccc + report.arousal_ccc) / 2.0;
        report.counts.va_frames = va_truth.len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_fixture() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let want = (2.0 / 3.0 + 0.8) / 7.0;
        assert!((macro_f1(&truth, &pred, 7).unwrap() - want).abs() < 1e-12);
        assert!((macro_f1(&truth, &pred, 7).unwrap() - 0.2095).abs() < 1e-4);
        let all: Vec<usize> = (0..7).collect();
        assert_eq!(macro_f1(&all, &all, 7).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[3, 3, 3], 7).unwrap(), 0.0);
        assert!(macro_f1(&[], &[], 7).is_err());
    }

    #[test]
    fn accuracy_fixture() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&[2, 3], &[2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[2, 3]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn challenge_score() {
        assert_eq!(expr_challenge_score(1.0, 1.0).unwrap(), 1.0);
        assert!((expr_challenge_score(0.3, 0.5).unwrap() - 0.366).abs() < 1e-12);
        assert_eq!(expr_challenge_score(0.0, 0.0).unwrap(), 0.0);
        assert!(expr_challenge_score(1.1, 0.0).is_err());
    }

    #[test]
    fn weighted_f1_uses_support() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let want = (2.0 * (2.0 / 3.0) + 2.0 * 0.8) / 4.0;
        assert!((weighted_f1(&truth, &pred, 7).unwrap() - want).abs() < 1e-12);
    }

    fn perfect_set() -> PredictionSet {
        let mut s = PredictionSet::default();
        for i in 0..10 {
            let e = ExprLabel::new(i % 7).unwrap();
            let v = -0.9 + 0.2 * i as f64;
            let a = 0.5 - 0.1 * i as f64;
            s.push(format!("f{i}"), Some(e), i % 7, Some(VaLabel::new(v, a).unwrap()), (v, a));
        }
        s
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&perfect_set(), &MetricsConfig::default()).unwrap();
        assert!((r.expr_score - 1.0).abs() < 1e-12);
        assert!((r.valence_ccc - 1.0).abs() < 1e-6);
        assert!((r.arousal_ccc - 1.0).abs() < 1e-6);
        assert_eq!(r.counts.expr_frames, 10);
    }

    #[test]
    fn missing_truth_is_excluded() {
        let mut s = perfect_set();
        s.expr_true[0] = None;
        s.expr_pred[0] = 3;
        s.va_true[1] = None;
        s.va_pred[1] = (0.99, -0.99);
        let r = evaluate(&s, &MetricsConfig::default()).unwrap();
        assert_eq!(r.counts.expr_frames, 9);
        assert_eq!(r.counts.va_frames, 9);
        assert!((r.total_accuracy - 1.0).abs() < 1e-12);
        assert!((r.valence_ccc - 1.0).abs() < 1e-6);
    }

    #[test]
    fn no_truth_is_an_error() {
        let mut s = PredictionSet::default();
        s.push("a", None, 0, None, (0.0, 0.0));
        assert!(evaluate(&s, &MetricsConfig::default()).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let r = evaluate(&perfect_set(), &MetricsConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["expr_score", "macro_f1", "total_accuracy", "valence_ccc", "arousal_ccc", "va_score", "counts"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn challenge_score_monotone(f in 0.0f64..1.0, a in 0.0f64..1.0, df in 0.0f64..1.0, da in 0.0f64..1.0) {
            let base = expr_challenge_score(f, a).unwrap();
            prop_assert!(expr_challenge_score((f + df).min(1.0), a).unwrap() >= base);
            prop_assert!(expr_challenge_score(f, (a + da).min(1.0)).unwrap() >= base);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..500) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = PredictionSet::default();
            for i in 0..30 {
                let e = rng.random_bool(0.8).then(|| ExprLabel::new(rng.random_range(0..7)).unwrap());
                let v = rng.random_bool(0.8).then(|| VaLabel::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).unwrap());
                s.push(format!("{i}"), e, rng.random_range(0..7), v, (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            }
            prop_assume!(s.va_true.iter().filter(|v| v.is_some()).count() >= 2);
            let mut order: Vec<usize> = (0..30).collect();
            order.shuffle(&mut rng);
            let mut p = PredictionSet::default();
            for &i in &order {
                p.push(s.frame_ids[i].clone(), s.expr_true[i], s.expr_pred[i], s.va_true[i], s.va_pred[i]);
            }
            let a = evaluate(&s, &MetricsConfig::default()).unwrap();
            let b = evaluate(&p, &MetricsConfig::default()).unwrap();
            prop_assert!((a.expr_score - b.expr_score).abs() < 1e-12);
            prop_assert!((a.valence_ccc - b.valence_ccc).abs() < 1e-9);
            prop_assert!((a.arousal_ccc - b.arousal_ccc).abs() < 1e-9);
        }
    }
}
