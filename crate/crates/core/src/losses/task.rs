use super::primitives::{
    bin_center, ccc_grad, cross_entropy, decode_va, discretize_va, kl_divergence_grad,
    softmax_backward, softmax_temperature,
};
use super::{DistillationConfig, FrameModelOutput, InstanceLabels, OutputGrad, TaskId, VA_DIMS};
use crate::error::{ensure, invalid, Result};

/// A loss value with its gradient for each evaluated output.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<OutputGrad>,
}

/// Distillation value with gradients on both sides of the KL.
#[derive(Clone, Debug)]
pub struct DistillationGrad {
    pub value: f64,
    pub student: Vec<OutputGrad>,
    pub teacher: Vec<OutputGrad>,
}

/// Blended sample loss, its two components and the student-side gradient.
#[derive(Clone, Debug)]
pub struct CombinedGrad {
    pub value: f64,
    pub supervision: f64,
    pub distillation: f64,
    pub grads: Vec<OutputGrad>,
}

pub(super) fn zero_grads(n: usize, num_bins: usize) -> Vec<OutputGrad> {
    vec![FrameModelOutput::zeros(num_bins); n]
}

pub(super) fn check_outputs(outputs: &[FrameModelOutput], cfg: &DistillationConfig) -> Result<()> {
    for (i, o) in outputs.iter().enumerate() {
        ensure!(
            o.num_bins() == cfg.num_bins && o.expr_logits.len() == super::NUM_EXPR_CLASSES,
            "output {i} has {} expression logits and {} VA bins, expected 7 and {}",
            o.expr_logits.len(),
            o.num_bins(),
            cfg.num_bins
        );
    }
    Ok(())
}

/// `Σ_{n∈idx} CE(onehot(y_n), SF(expr_n, 1)) / denom`; adds `w·∂/∂logits` into `grads`.
pub(super) fn expr_supervision_term(
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    w: f64,
    grads: &mut [OutputGrad],
) -> Result<f64> {
    let mut value = 0.0;
    for &n in idx {
        let label = labels[n]
            .expr
            .ok_or_else(|| invalid!("instance {n} lacks the expression label its task requires"))?;
        let target = label.one_hot();
        let p = softmax_temperature(&outputs[n].expr_logits, 1.0)?;
        value += cross_entropy(&target, &p)? / denom;
        for ((g, pk), tk) in grads[n].expr_logits.iter_mut().zip(&p).zip(&target) {
            *g += w * (pk - tk) / denom;
        }
    }
    Ok(value)
}

/// How the set-level CCC term reacts to fewer than two instances.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(super) enum CccArity {
    /// Fewer than two instances is an error.
    Strict,
    /// Fewer than two instances drops the CCC term.
    SkipSingleton,
}

/// VA supervision on the subset `idx`: per-instance bin cross entropy averaged by
/// `denom`, plus `ccc_weight·(1 − CCC)/B` per dimension with CCC taken over the subset.
#[allow(clippy::too_many_arguments)]
pub(super) fn va_supervision_term(
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    ccc_weight: f64,
    cfg: &DistillationConfig,
    arity: CccArity,
    w: f64,
    grads: &mut [OutputGrad],
) -> Result<f64> {
    let b = cfg.num_bins;
    let mut truths = Vec::with_capacity(idx.len());
    for &n in idx {
        let va = labels[n]
            .va
            .ok_or_else(|| invalid!("instance {n} lacks the valence/arousal label its task requires"))?;
        ensure!(
            va.valence().is_finite() && va.arousal().is_finite(),
            "instance {n} has a malformed valence/arousal label"
        );
        truths.push(va);
    }
    if idx.len() < 2 && arity == CccArity::Strict {
        return Err(invalid!("VA supervision needs at least two instances for CCC, got {}", idx.len()));
    }
    let mut value = 0.0;
    for dim in 0..VA_DIMS {
        let mut probs = Vec::with_capacity(idx.len());
        let mut decoded = Vec::with_capacity(idx.len());
        for (&n, va) in idx.iter().zip(&truths) {
            let target = discretize_va(va.get(dim), b)?;
            let p = softmax_temperature(outputs[n].va_row(dim), 1.0)?;
            value += cross_entropy(&target, &p)? / denom;
            for ((g, pk), tk) in grads[n].va_row_mut(dim).iter_mut().zip(&p).zip(&target) {
                *g += w * (pk - tk) / denom;
            }
            decoded.push(decode_va(&p)?);
            probs.push(p);
        }
        if idx.len() >= 2 {
            let truth: Vec<f64> = truths.iter().map(|va| va.get(dim)).collect();
            let (c, dc) = ccc_grad(&truth, &decoded, cfg.ccc_epsilon)?;
            let scale = ccc_weight / b as f64;
            value += scale * (1.0 - c);
            for (k, &n) in idx.iter().enumerate() {
                // d(decoded)/d(logit_j) = p_j (centre_j − decoded)
                let upstream = -scale * dc[k] * w;
                let row = grads[n].va_row_mut(dim);
                for (j, g) in row.iter_mut().enumerate() {
                    *g += upstream * probs[k][j] * (bin_center(j, b) - decoded[k]);
                }
            }
        }
    }
    Ok(value)
}

fn kl_rows(
    t_logits: &[f64],
    s_logits: &[f64],
    temperature: f64,
    scale: f64,
    gs: &mut [f64],
    gt: Option<&mut [f64]>,
) -> Result<f64> {
    let p = softmax_temperature(t_logits, temperature)?;
    let q = softmax_temperature(s_logits, temperature)?;
    let (kl, gp, _) = kl_divergence_grad(&p, &q)?;
    for ((g, qk), pk) in gs.iter_mut().zip(&q).zip(&p) {
        *g += scale * (qk - pk) / temperature;
    }
    if let Some(gt) = gt {
        for (g, d) in gt.iter_mut().zip(softmax_backward(&p, &gp, temperature)) {
            *g += scale * d;
        }
    }
    Ok(kl)
}

/// `Σ_{n∈idx} KL(SF(t_expr,T), SF(s_expr,T)) / denom`.
#[allow(clippy::too_many_arguments)]
pub(super) fn expr_distillation_term(
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    temperature: f64,
    w: f64,
    gs: &mut [OutputGrad],
    mut gt: Option<&mut [OutputGrad]>,
) -> Result<f64> {
    let mut value = 0.0;
    for &n in idx {
        let gt_row = gt.as_deref_mut().map(|g| g[n].expr_logits.as_mut_slice());
        value += kl_rows(
            &teacher[n].expr_logits,
            &student[n].expr_logits,
            temperature,
            w / denom,
            &mut gs[n].expr_logits,
            gt_row,
        )? / denom;
    }
    Ok(value)
}

/// `Σ_{n∈idx} Σ_dim KL(SF(t_dim,T), SF(s_dim,T)) / denom`.
#[allow(clippy::too_many_arguments)]
pub(super) fn va_distillation_term(
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    temperature: f64,
    w: f64,
    gs: &mut [OutputGrad],
    mut gt: Option<&mut [OutputGrad]>,
) -> Result<f64> {
    let mut value = 0.0;
    for &n in idx {
        for dim in 0..VA_DIMS {
            let gt_row = gt.as_deref_mut().map(|g| g[n].va_row_mut(dim));
            value += kl_rows(
                teacher[n].va_row(dim),
                student[n].va_row(dim),
                temperature,
                w / denom,
                gs[n].va_row_mut(dim),
                gt_row,
            )? / denom;
        }
    }
    Ok(value)
}

/// Supervision term for `task` on subset `idx` of a part. Adds `w·∂` into `grads`.
#[allow(clippy::too_many_arguments)]
pub(super) fn supervision_term(
    task: TaskId,
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    ccc_weight: f64,
    cfg: &DistillationConfig,
    arity: CccArity,
    w: f64,
    grads: &mut [OutputGrad],
) -> Result<f64> {
    let mut value = 0.0;
    if task.uses_expr() {
        value += expr_supervision_term(labels, outputs, idx, denom, w, grads)?;
    }
    if task.uses_va() {
        value += va_supervision_term(labels, outputs, idx, denom, ccc_weight, cfg, arity, w, grads)?;
    }
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn distillation_term(
    task: TaskId,
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    idx: &[usize],
    denom: f64,
    cfg: &DistillationConfig,
    w: f64,
    gs: &mut [OutputGrad],
    mut gt: Option<&mut [OutputGrad]>,
) -> Result<f64> {
    let t = cfg.temperature;
    let mut value = 0.0;
    if task.uses_expr() {
        value += expr_distillation_term(teacher, student, idx, denom, t, w, gs, gt.as_deref_mut())?;
    }
    if task.uses_va() {
        value += va_distillation_term(teacher, student, idx, denom, t, w, gs, gt)?;
    }
    Ok(value)
}

/// Supervision loss of `task`, averaged over instances (CCC over the whole list).
pub fn supervision_loss(
    task: TaskId,
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<f64> {
    Ok(supervision_loss_grad(task, labels, outputs, cfg)?.value)
}

pub fn supervision_loss_grad(
    task: TaskId,
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    ensure!(
        labels.len() == outputs.len(),
        "{} labels for {} outputs",
        labels.len(),
        outputs.len()
    );
    ensure!(!outputs.is_empty(), "supervision loss over an empty instance list");
    check_outputs(outputs, cfg)?;
    let n = outputs.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut grads = zero_grads(n, cfg.num_bins);
    let value = supervision_term(
        task,
        labels,
        outputs,
        &idx,
        n as f64,
        1.0,
        cfg,
        CccArity::Strict,
        1.0,
        &mut grads,
    )?;
    Ok(LossGrad { value, grads })
}

/// Distillation loss of `task` from teacher to student outputs, averaged over instances.
pub fn distillation_loss(
    task: TaskId,
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<f64> {
    Ok(distillation_loss_grad(task, teacher, student, cfg)?.value)
}

pub fn distillation_loss_grad(
    task: TaskId,
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<DistillationGrad> {
    cfg.validate()?;
    ensure!(
        teacher.len() == student.len(),
        "{} teacher outputs for {} student outputs",
        teacher.len(),
        student.len()
    );
    ensure!(!student.is_empty(), "distillation loss over an empty instance list");
    check_outputs(teacher, cfg)?;
    check_outputs(student, cfg)?;
    let n = student.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut gs = zero_grads(n, cfg.num_bins);
    let mut gt = zero_grads(n, cfg.num_bins);
    let value =
        distillation_term(task, teacher, student, &idx, n as f64, cfg, 1.0, &mut gs, Some(&mut gt))?;
    Ok(DistillationGrad { value, student: gs, teacher: gt })
}

/// `λ·supervision + (1 − λ)·distillation` on the same instances.
pub fn combined_sample_loss(
    task: TaskId,
    labels: &[InstanceLabels],
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<f64> {
    Ok(combined_sample_loss_grad(task, labels, teacher, student, cfg)?.value)
}

pub fn combined_sample_loss_grad(
    task: TaskId,
    labels: &[InstanceLabels],
    teacher: &[FrameModelOutput],
    student: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<CombinedGrad> {
    let sup = supervision_loss_grad(task, labels, student, cfg)?;
    let dist = distillation_loss_grad(task, teacher, student, cfg)?;
    let lambda = cfg.lambda_weight;
    let mut grads = sup.grads;
    for (g, d) in grads.iter_mut().zip(&dist.student) {
        g.expr_logits.iter_mut().for_each(|v| *v *= lambda);
        g.va_logits.iter_mut().for_each(|v| *v *= lambda);
        g.add_scaled(d, 1.0 - lambda);
    }
    Ok(CombinedGrad {
        value: lambda * sup.value + (1.0 - lambda) * dist.value,
        supervision: sup.value,
        distillation: dist.value,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{ExprLabel, VaLabel};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(b: usize) -> DistillationConfig {
        DistillationConfig { num_bins: b, ..Default::default() }
    }

    fn random_output(rng: &mut ChaCha8Rng, b: usize) -> FrameModelOutput {
        FrameModelOutput {
            expr_logits: (0..7).map(|_| rng.random_range(-3.0..3.0)).collect(),
            va_logits: (0..2 * b).map(|_| rng.random_range(-3.0..3.0)).collect(),
        }
    }

    fn random_both(rng: &mut ChaCha8Rng) -> InstanceLabels {
        InstanceLabels::both(
            ExprLabel::new(rng.random_range(0..7)).unwrap(),
            VaLabel::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).unwrap(),
        )
    }

    #[test]
    fn perfect_expr_prediction_is_free() {
        let mut logits = vec![-50.0; 7];
        logits[0] = 50.0;
        let out = FrameModelOutput { expr_logits: logits, va_logits: vec![0.0; 40] };
        let labels = [InstanceLabels::expr(ExprLabel::new(0).unwrap())];
        let l = supervision_loss(TaskId::Expr, &labels, &[out], &cfg(20)).unwrap();
        assert!(l <= 1e-6);
    }

    #[test]
    fn va_with_perfect_ccc_reduces_to_cross_entropy() {
        // Labels sit exactly on bin centres and the logits put all mass on those bins,
        // so decoded predictions equal the labels and CCC = 1 up to the epsilon in its
        // denominator (about 1e-8 / variance).
        let b = 4;
        let centres = [bin_center(0, b), bin_center(2, b), bin_center(3, b)];
        let mut labels = Vec::new();
        let mut outputs = Vec::new();
        let mut ce_part = 0.0;
        for (i, &c) in centres.iter().enumerate() {
            let a = centres[(i + 1) % 3];
            labels.push(InstanceLabels::va(VaLabel::new(c, a).unwrap()));
            let mut o = FrameModelOutput::zeros(b);
            for (dim, v) in [c, a].into_iter().enumerate() {
                let k = crate::losses::va_bin_index(v, b).unwrap();
                o.va_row_mut(dim).iter_mut().for_each(|z| *z = -60.0);
                o.va_row_mut(dim)[k] = 60.0;
                let p = softmax_temperature(o.va_row(dim), 1.0).unwrap();
                ce_part += cross_entropy(&discretize_va(v, b).unwrap(), &p).unwrap() / 3.0;
            }
            outputs.push(o);
        }
        let l = supervision_loss(TaskId::Va, &labels, &outputs, &cfg(b)).unwrap();
        assert!((l - ce_part).abs() < 1e-7, "{l} vs {ce_part}");
    }

    #[test]
    fn expr_va_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<_> = (0..5).map(|_| random_both(&mut rng)).collect();
        let outputs: Vec<_> = (0..5).map(|_| random_output(&mut rng, 8)).collect();
        let c = cfg(8);
        let both = supervision_loss(TaskId::ExprVa, &labels, &outputs, &c).unwrap();
        let e = supervision_loss(TaskId::Expr, &labels, &outputs, &c).unwrap();
        let v = supervision_loss(TaskId::Va, &labels, &outputs, &c).unwrap();
        assert!((both - (e + v)).abs() <= 1e-9 * both.abs());

        let teacher: Vec<_> = (0..5).map(|_| random_output(&mut rng, 8)).collect();
        let both = distillation_loss(TaskId::ExprVa, &teacher, &outputs, &c).unwrap();
        let e = distillation_loss(TaskId::Expr, &teacher, &outputs, &c).unwrap();
        let v = distillation_loss(TaskId::Va, &teacher, &outputs, &c).unwrap();
        assert!((both - (e + v)).abs() <= 1e-9 * both.abs());
    }

    #[test]
    fn supervision_errors() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = random_output(&mut rng, 8);
        let va_only = [InstanceLabels::va(VaLabel::new(0.1, 0.2).unwrap())];
        assert!(supervision_loss(TaskId::Expr, &va_only, std::slice::from_ref(&out), &c).is_err());
        // CCC undefined for one instance.
        assert!(supervision_loss(TaskId::Va, &va_only, std::slice::from_ref(&out), &c).is_err());
        let expr_only = [InstanceLabels::expr(ExprLabel::new(1).unwrap()); 2];
        assert!(supervision_loss(TaskId::ExprVa, &expr_only, &[out.clone(), out.clone()], &c).is_err());
        assert!(supervision_loss(TaskId::Expr, &expr_only, &[out], &c).is_err());
    }

    #[test]
    fn self_distillation_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let outs: Vec<_> = (0..4).map(|_| random_output(&mut rng, 8)).collect();
        for task in TaskId::ALL {
            for t in [0.5, 1.0, 2.0, 7.0] {
                let c = DistillationConfig { temperature: t, ..cfg(8) };
                assert!(distillation_loss(task, &outs, &outs, &c).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn expr_distillation_matches_kl_example() {
        // Teacher softened probs ≈ [1, 0, ...]; student softened ≈ [0.5, 0.5, 0, ...].
        let c = DistillationConfig { temperature: 1.0, ..cfg(8) };
        let mut t = FrameModelOutput::zeros(8);
        t.expr_logits = vec![100.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut s = FrameModelOutput::zeros(8);
        s.expr_logits = vec![100.0, 100.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let l = distillation_loss(TaskId::Expr, &[t], &[s], &c).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn distillation_length_mismatch() {
        let c = cfg(8);
        let o = FrameModelOutput::zeros(8);
        assert!(distillation_loss(TaskId::Expr, std::slice::from_ref(&o), &[o.clone(), o.clone()], &c).is_err());
    }

    #[test]
    fn combined_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<_> = (0..4).map(|_| random_both(&mut rng)).collect();
        let s: Vec<_> = (0..4).map(|_| random_output(&mut rng, 8)).collect();
        let t: Vec<_> = (0..4).map(|_| random_output(&mut rng, 8)).collect();
        for task in TaskId::ALL {
            let sup = supervision_loss(task, &labels, &s, &cfg(8)).unwrap();
            let dist = distillation_loss(task, &t, &s, &cfg(8)).unwrap();
            let at = |lambda: f64| {
                let c = DistillationConfig { lambda_weight: lambda, ..cfg(8) };
                combined_sample_loss(task, &labels, &t, &s, &c).unwrap()
            };
            assert_eq!(at(1.0), sup);
            assert_eq!(at(0.0), dist);
            assert!((at(0.6) - (0.6 * sup + 0.4 * dist)).abs() <= 1e-12 * at(0.6));
            let mid = at(0.5);
            assert!((mid - 0.5 * (at(0.0) + at(1.0))).abs() <= 1e-9 * mid.abs());
        }
    }
}
