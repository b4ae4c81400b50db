//! Supervision and distillation objectives for the expression (EXPR), valence-arousal
//! (VA) and combined (EXPR_VA) tasks, together with their analytic gradients with
//! respect to the model logits.
//!
//! Reduction convention: per-instance terms are averaged within a dataset part, and
//! summed across parts, tasks and VA dimensions.

mod batch;
mod primitives;
mod task;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};

pub use batch::{
    student_batch_loss, student_batch_loss_grad, teacher_batch_loss, teacher_batch_loss_grad,
    BatchLabels, BlendMode, BlendTerm, LossBreakdown, PartGrads, PartOutputs, StudentLossOptions,
    TaskSet, TermRole,
};
pub use primitives::{
    bin_center, ccc, ccc_grad, ccc_with_epsilon, cross_entropy, cross_entropy_grad, decode_va,
    decode_va_grad, discretize_va, kl_divergence, kl_divergence_grad, softmax_backward,
    softmax_temperature, va_bin_index, PROB_FLOOR,
};
pub use task::{
    combined_sample_loss, combined_sample_loss_grad, distillation_loss, distillation_loss_grad,
    supervision_loss, supervision_loss_grad, CombinedGrad, DistillationGrad, LossGrad,
};

pub const NUM_EXPR_CLASSES: usize = 7;
pub const VA_DIMS: usize = 2;

pub const EXPR_CLASS_NAMES: [&str; NUM_EXPR_CLASSES] =
    ["neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise"];

/// The three training tasks. EXPR_VA has no head of its own; it reuses both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "EXPR")]
    Expr = 1,
    #[serde(rename = "VA")]
    Va = 2,
    #[serde(rename = "EXPR_VA")]
    ExprVa = 3,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Expr, TaskId::Va, TaskId::ExprVa];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(TaskId::Expr),
            2 => Ok(TaskId::Va),
            3 => Ok(TaskId::ExprVa),
            _ => Err(invalid!("task id must be 1, 2 or 3, got {n}")),
        }
    }

    /// Position of the dataset part that carries this task's labels.
    pub fn part_index(self) -> usize {
        self as usize - 1
    }

    pub fn uses_expr(self) -> bool {
        matches!(self, TaskId::Expr | TaskId::ExprVa)
    }

    pub fn uses_va(self) -> bool {
        matches!(self, TaskId::Va | TaskId::ExprVa)
    }

    /// The other single-head task, i.e. the secondary task for instances of this part.
    pub fn secondary(self) -> Option<TaskId> {
        match self {
            TaskId::Expr => Some(TaskId::Va),
            TaskId::Va => Some(TaskId::Expr),
            TaskId::ExprVa => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskId::Expr => "EXPR",
            TaskId::Va => "VA",
            TaskId::ExprVa => "EXPR_VA",
        })
    }
}

impl FromStr for TaskId {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EXPR" | "1" => Ok(TaskId::Expr),
            "VA" | "2" => Ok(TaskId::Va),
            "EXPR_VA" | "3" => Ok(TaskId::ExprVa),
            _ => Err(invalid!("unknown task `{s}`")),
        }
    }
}

/// One of the seven basic expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ExprLabel(u8);

impl ExprLabel {
    pub fn new(class_index: usize) -> Result<Self> {
        ensure!(
            class_index < NUM_EXPR_CLASSES,
            "expression class must be in 0..=6, got {class_index}"
        );
        Ok(ExprLabel(class_index as u8))
    }

    pub fn class_index(self) -> usize {
        self.0 as usize
    }

    pub fn one_hot(self) -> [f64; NUM_EXPR_CLASSES] {
        let mut v = [0.0; NUM_EXPR_CLASSES];
        v[self.0 as usize] = 1.0;
        v
    }
}

impl TryFrom<u8> for ExprLabel {
    type Error = crate::Error;
    fn try_from(v: u8) -> Result<Self> {
        ExprLabel::new(v as usize)
    }
}

impl From<ExprLabel> for u8 {
    fn from(l: ExprLabel) -> u8 {
        l.0
    }
}

/// Valence and arousal, both finite and within [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VaLabel {
    valence: f64,
    arousal: f64,
}

impl VaLabel {
    pub fn new(valence: f64, arousal: f64) -> Result<Self> {
        ensure!(
            valence.is_finite() && arousal.is_finite(),
            "valence/arousal must be finite, got ({valence}, {arousal})"
        );
        ensure!(
            (-1.0..=1.0).contains(&valence) && (-1.0..=1.0).contains(&arousal),
            "valence/arousal must lie in [-1, 1], got ({valence}, {arousal})"
        );
        Ok(VaLabel { valence, arousal })
    }

    /// Clamps finite values into [-1, 1]. The flag reports whether clamping happened.
    pub fn clamped(valence: f64, arousal: f64) -> Result<(Self, bool)> {
        ensure!(
            valence.is_finite() && arousal.is_finite(),
            "valence/arousal must be finite, got ({valence}, {arousal})"
        );
        let v = valence.clamp(-1.0, 1.0);
        let a = arousal.clamp(-1.0, 1.0);
        Ok((VaLabel { valence: v, arousal: a }, v != valence || a != arousal))
    }

    pub fn valence(self) -> f64 {
        self.valence
    }

    pub fn arousal(self) -> f64 {
        self.arousal
    }

    /// Dimension 0 is valence, 1 is arousal.
    pub fn get(self, dim: usize) -> f64 {
        match dim {
            0 => self.valence,
            1 => self.arousal,
            _ => panic!("VA dimension out of range: {dim}"),
        }
    }
}

/// Ground truth carried by one instance. Either side may be missing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct InstanceLabels {
    pub expr: Option<ExprLabel>,
    pub va: Option<VaLabel>,
}

impl InstanceLabels {
    pub fn expr(label: ExprLabel) -> Self {
        InstanceLabels { expr: Some(label), va: None }
    }

    pub fn va(label: VaLabel) -> Self {
        InstanceLabels { expr: None, va: Some(label) }
    }

    pub fn both(expr: ExprLabel, va: VaLabel) -> Self {
        InstanceLabels { expr: Some(expr), va: Some(va) }
    }

    pub fn has(&self, task: TaskId) -> bool {
        (!task.uses_expr() || self.expr.is_some()) && (!task.uses_va() || self.va.is_some())
    }
}

/// Raw head outputs for one instance: 7 expression logits and a 2×B block of VA bin
/// logits stored row-major (row 0 valence, row 1 arousal).
///
/// The same layout doubles as the gradient of a loss with respect to those logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameModelOutput {
    pub expr_logits: Vec<f64>,
    pub va_logits: Vec<f64>,
}

pub type OutputGrad = FrameModelOutput;

impl FrameModelOutput {
    pub fn new(expr_logits: Vec<f64>, va_logits: Vec<f64>) -> Result<Self> {
        ensure!(
            expr_logits.len() == NUM_EXPR_CLASSES,
            "expected {NUM_EXPR_CLASSES} expression logits, got {}",
            expr_logits.len()
        );
        ensure!(
            va_logits.len() >= 2 * VA_DIMS && va_logits.len().is_multiple_of(VA_DIMS),
            "VA logits must form a 2×B block with B ≥ 2, got {} values",
            va_logits.len()
        );
        let out = FrameModelOutput { expr_logits, va_logits };
        ensure!(out.is_finite(), "model output contains non-finite values");
        Ok(out)
    }

    pub fn zeros(num_bins: usize) -> Self {
        FrameModelOutput {
            expr_logits: vec![0.0; NUM_EXPR_CLASSES],
            va_logits: vec![0.0; VA_DIMS * num_bins],
        }
    }

    pub fn num_bins(&self) -> usize {
        self.va_logits.len() / VA_DIMS
    }

    pub fn va_row(&self, dim: usize) -> &[f64] {
        let b = self.num_bins();
        &self.va_logits[dim * b..(dim + 1) * b]
    }

    pub fn va_row_mut(&mut self, dim: usize) -> &mut [f64] {
        let b = self.num_bins();
        &mut self.va_logits[dim * b..(dim + 1) * b]
    }

    pub fn is_finite(&self) -> bool {
        self.expr_logits.iter().chain(&self.va_logits).all(|v| v.is_finite())
    }

    /// Predicted expression class (arg-max of the logits).
    pub fn predicted_class(&self) -> usize {
        argmax(&self.expr_logits)
    }

    /// Continuous (valence, arousal) estimate: expected bin centre under softmax.
    pub fn predicted_va(&self) -> (f64, f64) {
        let decode = |dim| {
            let p = softmax_temperature(self.va_row(dim), 1.0).expect("finite logits");
            decode_va(&p).expect("softmax output is a distribution")
        };
        (decode(0), decode(1))
    }

    pub(crate) fn add_scaled(&mut self, other: &FrameModelOutput, scale: f64) {
        for (a, b) in self.expr_logits.iter_mut().zip(&other.expr_logits) {
            *a += scale * b;
        }
        for (a, b) in self.va_logits.iter_mut().zip(&other.va_logits) {
            *a += scale * b;
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Weights and constants shared by all objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    /// Weight of supervision against distillation in the blended sample loss.
    pub lambda_weight: f64,
    /// Softmax temperature applied to teacher and student logits for distillation.
    pub temperature: f64,
    /// Number of uniform bins per VA dimension.
    pub num_bins: usize,
    /// Guard added to the CCC denominator.
    pub ccc_epsilon: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig { lambda_weight: 0.6, temperature: 2.0, num_bins: 20, ccc_epsilon: 1e-8 }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda_weight),
            "lambda_weight must lie in [0, 1], got {}",
            self.lambda_weight
        );
        ensure!(
            self.temperature.is_finite() && self.temperature > 0.0,
            "temperature must be positive, got {}",
            self.temperature
        );
        ensure!(self.num_bins >= 2, "num_bins must be at least 2, got {}", self.num_bins);
        ensure!(
            self.ccc_epsilon.is_finite() && self.ccc_epsilon > 0.0,
            "ccc_epsilon must be positive, got {}",
            self.ccc_epsilon
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expr_label_one_hot() {
        let l = ExprLabel::new(4).unwrap();
        let oh = l.one_hot();
        assert_eq!(oh.iter().sum::<f64>(), 1.0);
        assert_eq!(oh[4], 1.0);
        assert!(ExprLabel::new(7).is_err());
    }

    #[test]
    fn va_label_bounds() {
        assert!(VaLabel::new(1.0, -1.0).is_ok());
        assert!(VaLabel::new(1.01, 0.0).is_err());
        assert!(VaLabel::new(f64::NAN, 0.0).is_err());
        let (l, clamped) = VaLabel::clamped(1.2, -0.3).unwrap();
        assert!(clamped);
        assert_eq!(l.valence(), 1.0);
        assert!(VaLabel::clamped(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn task_secondary_pairs() {
        assert_eq!(TaskId::Expr.secondary(), Some(TaskId::Va));
        assert_eq!(TaskId::Va.secondary(), Some(TaskId::Expr));
        assert_eq!(TaskId::ExprVa.secondary(), None);
        assert_eq!("EXPR_VA".parse::<TaskId>().unwrap(), TaskId::ExprVa);
    }

    #[test]
    fn output_shape_validation() {
        assert!(FrameModelOutput::new(vec![0.0; 7], vec![0.0; 40]).is_ok());
        assert!(FrameModelOutput::new(vec![0.0; 6], vec![0.0; 40]).is_err());
        assert!(FrameModelOutput::new(vec![0.0; 7], vec![0.0; 2]).is_err());
        assert!(FrameModelOutput::new(vec![f64::NAN; 7], vec![0.0; 40]).is_err());
    }

    #[test]
    fn default_config() {
        let c = DistillationConfig::default();
        assert_eq!(c.lambda_weight, 0.6);
        assert_eq!(c.num_bins, 20);
        c.validate().unwrap();
        assert!(DistillationConfig { temperature: 0.0, ..c.clone() }.validate().is_err());
        assert!(DistillationConfig { num_bins: 1, ..c }.validate().is_err());
    }
}
