use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::task::{check_outputs, distillation_term, supervision_term, zero_grads, CccArity};
use super::{DistillationConfig, FrameModelOutput, InstanceLabels, OutputGrad, TaskId};
use crate::error::{ensure, invalid, Result};

/// Labels of one batch, indexed by dataset part (MIXED_EXPR, MIXED_VA, EXPR_VA).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLabels {
    pub parts: [Vec<InstanceLabels>; 3],
}

pub type PartOutputs = [Vec<FrameModelOutput>; 3];
pub type PartGrads = [Vec<OutputGrad>; 3];

/// Which tasks contribute to a training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSet {
    /// EXPR and VA only.
    #[serde(rename = "1,2")]
    Two,
    /// EXPR, VA and the combined EXPR_VA task.
    #[default]
    #[serde(rename = "1,2,3")]
    Three,
}

impl TaskSet {
    pub fn includes(self, task: TaskId) -> bool {
        task != TaskId::ExprVa || self == TaskSet::Three
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSet::Two => "1,2",
            TaskSet::Three => "1,2,3",
        })
    }
}

impl FromStr for TaskSet {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "1,2" => Ok(TaskSet::Two),
            "1,2,3" => Ok(TaskSet::Three),
            _ => Err(invalid!("task set must be `1,2` or `1,2,3`, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermRole {
    /// The part's own task.
    Primary,
    /// The other task, evaluated on instances that carry its label too.
    Secondary,
}

/// One blended `λ·supervision + (1 − λ)·distillation` term as it entered a batch loss.
/// `weight` is the fraction of the part it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendTerm {
    pub part: TaskId,
    pub task: TaskId,
    pub role: TermRole,
    pub lambda: f64,
    pub supervision: f64,
    pub distillation: f64,
    pub combined: f64,
    pub weight: f64,
}

/// Decomposition of a batch objective. `per_task` is keyed by the dataset part's task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_task: BTreeMap<TaskId, f64>,
    pub supervision_part: f64,
    pub distillation_part: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blend_terms: Vec<BlendTerm>,
}

/// How the blended sample loss is formed in the student objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// `λ·supervision + (1 − λ)·distillation`.
    #[default]
    Lambda,
    /// Supervision term alone; the reference for the λ = 1 degeneration.
    SupervisionOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentLossOptions {
    /// Use the secondary label when an instance carries one, instead of distilling it.
    pub use_shared_annotations: bool,
    pub blend: BlendMode,
    /// With [`TaskSet::Two`] the EXPR_VA part contributes nothing.
    pub task_set: TaskSet,
}

fn check_part(
    part: usize,
    labels: &[InstanceLabels],
    outputs: &[FrameModelOutput],
    cfg: &DistillationConfig,
) -> Result<()> {
    ensure!(!outputs.is_empty(), "dataset part {} of the batch is empty", part + 1);
    ensure!(
        labels.len() == outputs.len(),
        "part {}: {} labels for {} outputs",
        part + 1,
        labels.len(),
        outputs.len()
    );
    check_outputs(outputs, cfg)
}

fn part_task(p: usize) -> TaskId {
    TaskId::ALL[p]
}

/// Teacher objective: the sum over parts of each part's own supervision loss.
pub fn teacher_batch_loss(
    labels: &BatchLabels,
    outputs: &PartOutputs,
    cfg: &DistillationConfig,
    task_set: TaskSet,
) -> Result<LossBreakdown> {
    Ok(teacher_batch_loss_grad(labels, outputs, cfg, task_set)?.0)
}

pub fn teacher_batch_loss_grad(
    labels: &BatchLabels,
    outputs: &PartOutputs,
    cfg: &DistillationConfig,
    task_set: TaskSet,
) -> Result<(LossBreakdown, PartGrads)> {
    cfg.validate()?;
    let mut grads: PartGrads = Default::default();
    let mut out = LossBreakdown::default();
    for p in 0..3 {
        let task = part_task(p);
        grads[p] = zero_grads(outputs[p].len(), cfg.num_bins);
        if !task_set.includes(task) {
            continue;
        }
        check_part(p, &labels.parts[p], &outputs[p], cfg)?;
        let n = outputs[p].len();
        let idx: Vec<usize> = (0..n).collect();
        let value = supervision_term(
            task,
            &labels.parts[p],
            &outputs[p],
            &idx,
            n as f64,
            1.0,
            cfg,
            CccArity::Strict,
            1.0,
            &mut grads[p],
        )?;
        out.per_task.insert(task, value);
        out.supervision_part += value;
    }
    out.total = out.per_task.values().sum();
    Ok((out, grads))
}

/// Student objective. For every part the blended loss of its own task, and for the
/// two single-task parts a secondary term on the same instances: distillation of the
/// other head, or the blended loss when the instance carries that label and shared
/// annotations are enabled.
pub fn student_batch_loss(
    labels: &BatchLabels,
    teacher: &PartOutputs,
    student: &PartOutputs,
    cfg: &DistillationConfig,
    opts: StudentLossOptions,
) -> Result<LossBreakdown> {
    Ok(student_batch_loss_grad(labels, teacher, student, cfg, opts)?.0)
}

/// [`student_batch_loss`] with gradients with respect to the student outputs.
pub fn student_batch_loss_grad(
    labels: &BatchLabels,
    teacher: &PartOutputs,
    student: &PartOutputs,
    cfg: &DistillationConfig,
    opts: StudentLossOptions,
) -> Result<(LossBreakdown, PartGrads)> {
    cfg.validate()?;
    let lambda = match opts.blend {
        BlendMode::Lambda => cfg.lambda_weight,
        BlendMode::SupervisionOnly => 1.0,
    };
    let with_distillation = opts.blend == BlendMode::Lambda;
    let mut grads: PartGrads = Default::default();
    let mut out = LossBreakdown::default();

    for p in 0..3 {
        let task = part_task(p);
        if !opts.task_set.includes(task) {
            grads[p] = zero_grads(student[p].len(), cfg.num_bins);
            continue;
        }
        let (lab, s_out, t_out) = (&labels.parts[p], &student[p], &teacher[p]);
        check_part(p, lab, s_out, cfg)?;
        ensure!(
            t_out.len() == s_out.len(),
            "part {}: {} teacher outputs for {} student outputs",
            p + 1,
            t_out.len(),
            s_out.len()
        );
        check_outputs(t_out, cfg)?;
        let n = s_out.len();
        let g = &mut grads[p];
        *g = zero_grads(n, cfg.num_bins);
        let all: Vec<usize> = (0..n).collect();

        let blend = |target: TaskId, idx: &[usize], weight: f64, arity, g: &mut [OutputGrad]| {
            let denom = idx.len() as f64;
            let sup = supervision_term(
                target,
                lab,
                s_out,
                idx,
                denom,
                1.0,
                cfg,
                arity,
                weight * lambda,
                g,
            )?;
            let dist = if with_distillation {
                distillation_term(target, t_out, s_out, idx, denom, cfg, weight * (1.0 - lambda), g, None)?
            } else {
                0.0
            };
            let combined = lambda * sup + (1.0 - lambda) * dist;
            Ok::<_, crate::Error>((sup, dist, combined))
        };

        let (sup, dist, combined) = blend(task, &all, 1.0, CccArity::Strict, g)?;
        out.blend_terms.push(BlendTerm {
            part: task,
            task,
            role: TermRole::Primary,
            lambda,
            supervision: sup,
            distillation: dist,
            combined,
            weight: 1.0,
        });
        let mut part_total = combined;
        out.supervision_part += lambda * sup;
        out.distillation_part += (1.0 - lambda) * dist;

        if let Some(secondary) = task.secondary() {
            let (shared, missing): (Vec<usize>, Vec<usize>) =
                all.iter().partition(|&&i| opts.use_shared_annotations && lab[i].has(secondary));
            if !missing.is_empty() {
                let h = distillation_term(secondary, t_out, s_out, &missing, n as f64, cfg, 1.0, g, None)?;
                part_total += h;
                out.distillation_part += h;
            }
            if !shared.is_empty() {
                let weight = shared.len() as f64 / n as f64;
                let (sup, dist, combined) = blend(secondary, &shared, weight, CccArity::SkipSingleton, g)?;
                out.blend_terms.push(BlendTerm {
                    part: task,
                    task: secondary,
                    role: TermRole::Secondary,
                    lambda,
                    supervision: sup,
                    distillation: dist,
                    combined,
                    weight,
                });
                part_total += weight * combined;
                out.supervision_part += weight * lambda * sup;
                out.distillation_part += weight * (1.0 - lambda) * dist;
            }
        }
        out.per_task.insert(task, part_total);
    }
    out.total = out.per_task.values().sum();
    Ok((out, grads))
}
