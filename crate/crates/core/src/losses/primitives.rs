use crate::error::{ensure, Result};

/// Lower bound applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    ensure!(xs.iter().all(|v| v.is_finite()), "{what} contains non-finite values");
    Ok(())
}

/// Softmax of `logits / temperature`, computed after subtracting the maximum.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    ensure!(!logits.is_empty(), "softmax of an empty vector");
    ensure!(
        temperature.is_finite() && temperature > 0.0,
        "temperature must be positive, got {temperature}"
    );
    check_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Pulls an upstream gradient on softmax probabilities back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot) / temperature).collect()
}

/// `-Σ target·ln(max(predicted, floor))`.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    ensure!(
        target.len() == predicted.len(),
        "cross entropy length mismatch: {} vs {}",
        target.len(),
        predicted.len()
    );
    ensure!(!target.is_empty(), "cross entropy of empty vectors");
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(t, p)| if *t == 0.0 { 0.0 } else { t * p.max(PROB_FLOOR).ln() })
        .sum::<f64>())
}

/// Cross entropy and its gradient with respect to `predicted`.
pub fn cross_entropy_grad(target: &[f64], predicted: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = cross_entropy(target, predicted)?;
    let grad = target.iter().zip(predicted).map(|(t, p)| -t / p.max(PROB_FLOOR)).collect();
    Ok((value, grad))
}

/// `Σ p·ln(p / max(q, floor))`, with zero-probability terms of `p` contributing nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(p.len() == q.len(), "KL length mismatch: {} vs {}", p.len(), q.len());
    ensure!(!p.is_empty(), "KL of empty vectors");
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(pi, qi)| if *pi <= 0.0 { 0.0 } else { pi * (pi / qi.max(PROB_FLOOR)).ln() })
        .sum();
    // Rounding can leave a tiny negative residue for p ≈ q.
    Ok(kl.max(0.0))
}

/// KL divergence with gradients with respect to `p` and `q`.
pub fn kl_divergence_grad(p: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let value = kl_divergence(p, q)?;
    let gp = p
        .iter()
        .zip(q)
        .map(|(pi, qi)| if *pi <= 0.0 { 0.0 } else { (pi / qi.max(PROB_FLOOR)).ln() + 1.0 })
        .collect();
    let gq = p.iter().zip(q).map(|(pi, qi)| -pi / qi.max(PROB_FLOOR)).collect();
    Ok((value, gp, gq))
}

struct Moments {
    n: f64,
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mean_x, b - mean_y);
        var_x += da * da;
        var_y += db * db;
        cov += da * db;
    }
    Moments { n, mean_x, mean_y, var_x: var_x / n, var_y: var_y / n, cov: cov / n }
}

/// Concordance correlation coefficient with the default denominator guard (1e-8).
pub fn ccc(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    ccc_with_epsilon(truth, prediction, 1e-8)
}

/// `2·cov / (var_x + var_y + (mean_x − mean_y)² + ε)` with population moments.
pub fn ccc_with_epsilon(truth: &[f64], prediction: &[f64], epsilon: f64) -> Result<f64> {
    check_series(truth, prediction)?;
    let m = moments(truth, prediction);
    let gap = m.mean_x - m.mean_y;
    Ok(2.0 * m.cov / (m.var_x + m.var_y + gap * gap + epsilon))
}

fn check_series(truth: &[f64], prediction: &[f64]) -> Result<()> {
    ensure!(
        truth.len() == prediction.len(),
        "CCC length mismatch: {} vs {}",
        truth.len(),
        prediction.len()
    );
    ensure!(truth.len() >= 2, "CCC needs at least two points, got {}", truth.len());
    check_finite(truth, "CCC truth")?;
    check_finite(prediction, "CCC prediction")
}

/// CCC together with its gradient with respect to the prediction series.
pub fn ccc_grad(truth: &[f64], prediction: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_series(truth, prediction)?;
    let m = moments(truth, prediction);
    let gap = m.mean_x - m.mean_y;
    let num = 2.0 * m.cov;
    let den = m.var_x + m.var_y + gap * gap + epsilon;
    let grad = truth
        .iter()
        .zip(prediction)
        .map(|(x, y)| {
            let d_num = 2.0 * (x - m.mean_x) / m.n;
            let d_den = 2.0 * (y - m.mean_y) / m.n - 2.0 * gap / m.n;
            (d_num * den - num * d_den) / (den * den)
        })
        .collect();
    Ok((num / den, grad))
}

/// Bin of `value` (clamped into [-1, 1]) among `num_bins` uniform bins; the last bin
/// is closed on the right.
pub fn va_bin_index(value: f64, num_bins: usize) -> Result<usize> {
    ensure!(num_bins >= 2, "bin count must be at least 2, got {num_bins}");
    ensure!(value.is_finite(), "VA value must be finite, got {value}");
    let v = value.clamp(-1.0, 1.0);
    let idx = ((v + 1.0) / 2.0 * num_bins as f64).floor() as usize;
    Ok(idx.min(num_bins - 1))
}

/// One-hot encoding of [`va_bin_index`].
pub fn discretize_va(value: f64, num_bins: usize) -> Result<Vec<f64>> {
    let idx = va_bin_index(value, num_bins)?;
    let mut v = vec![0.0; num_bins];
    v[idx] = 1.0;
    Ok(v)
}

pub fn bin_center(k: usize, num_bins: usize) -> f64 {
    -1.0 + (2 * k + 1) as f64 / num_bins as f64
}

/// Expected bin centre under `bin_probs`.
pub fn decode_va(bin_probs: &[f64]) -> Result<f64> {
    ensure!(bin_probs.len() >= 2, "need at least two bins, got {}", bin_probs.len());
    check_finite(bin_probs, "bin probabilities")?;
    ensure!(bin_probs.iter().all(|p| *p >= 0.0), "bin probabilities must be non-negative");
    let total: f64 = bin_probs.iter().sum();
    ensure!((total - 1.0).abs() < 1e-6, "bin probabilities must sum to 1, got {total}");
    let b = bin_probs.len();
    Ok(bin_probs.iter().enumerate().map(|(k, p)| p * bin_center(k, b)).sum())
}

/// Gradient of [`decode_va`] with respect to the probabilities: the bin centres.
pub fn decode_va_grad(num_bins: usize) -> Vec<f64> {
    (0..num_bins).map(|k| bin_center(k, num_bins)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_temperature(&[LN2, 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = softmax_temperature(&[10.0, 0.0], 1000.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 0.01));
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
        assert!(softmax_temperature(&[f64::NAN, 1.0], 1.0).is_err());
        assert!(softmax_temperature(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax_temperature(&[1e300, 0.0, -1e300], 1.0).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-10);
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
        // Floor keeps a zero prediction finite.
        let ce = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((ce - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p).unwrap() <= 1e-10);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        let want = 0.5 * LN2 + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1438).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ccc_examples() {
        assert!((ccc(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!((ccc(&[0.0, 1.0], &[1.0, 0.0]).unwrap() + 1.0).abs() < 1e-6);
        assert!(ccc(&[1.0, 1.0], &[0.0, 0.0]).unwrap().abs() < 1e-6);
        // Fully degenerate: both constant and equal.
        assert!(ccc(&[0.3, 0.3], &[0.3, 0.3]).unwrap().abs() < 1e-6);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(va_bin_index(-1.0, 20).unwrap(), 0);
        assert_eq!(va_bin_index(1.0, 20).unwrap(), 19);
        assert_eq!(va_bin_index(0.05, 20).unwrap(), 10);
        assert_eq!(va_bin_index(7.0, 20).unwrap(), 19);
        let oh = discretize_va(0.05, 20).unwrap();
        assert_eq!(oh[10], 1.0);
        assert_eq!(oh.iter().sum::<f64>(), 1.0);
        assert!(discretize_va(0.0, 1).is_err());
    }

    #[test]
    fn decode_examples() {
        let uniform = vec![1.0 / 20.0; 20];
        assert!(decode_va(&uniform).unwrap().abs() < 1e-9);
        let mut first = vec![0.0; 20];
        first[0] = 1.0;
        assert!((decode_va(&first).unwrap() + 0.95).abs() < 1e-12);
        let mut last = vec![0.0; 20];
        last[19] = 1.0;
        assert!((decode_va(&last).unwrap() - 0.95).abs() < 1e-12);
        assert!(decode_va(&[0.7, 0.7]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..12), t in 0.05f64..20.0) {
            let p = softmax_temperature(&logits, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn temperature_keeps_argmax(logits in prop::collection::vec(-20.0f64..20.0, 2..10), t in 0.01f64..100.0) {
            let p = softmax_temperature(&logits, t).unwrap();
            // Ties can legitimately resolve either way; skip them.
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(super::super::argmax(&p), super::super::argmax(&logits));
        }

        #[test]
        fn divergences_nonnegative(a in prop::collection::vec(-8.0f64..8.0, 2..9), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + ((seed + i as u64) % 7) as f64 - 3.0).collect();
            let p = softmax_temperature(&a, 1.0).unwrap();
            let q = softmax_temperature(&b, 1.0).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(cross_entropy(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn ccc_bounded(x in prop::collection::vec(-1.0f64..1.0, 2..30), shift in -1.0f64..1.0) {
            let y: Vec<f64> = x.iter().rev().map(|v| v * 0.7 + shift).collect();
            let c = ccc(&x, &y).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        }

        #[test]
        fn discretize_decode_round_trip(v in -1.0f64..=1.0, b in 2usize..64) {
            let decoded = decode_va(&discretize_va(v, b).unwrap()).unwrap();
            prop_assert!((decoded - v).abs() <= 1.0 / b as f64 + 1e-12);
        }
    }
}
