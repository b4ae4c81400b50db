//! Teacher/student training: configuration, early stopping, run records and the
//! stage entry points.

mod fit;
mod pipeline;
mod stages;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use fit::{fit, FitContext, ForwardPass, Network, Sample};
pub use pipeline::{run_pipeline, summarize_sweep, PipelineConfig, PipelineReport, StageReport, SweepStat, SweepSummary};
pub use stages::{
    evaluate_frame_model, evaluate_temporal_model, frame_from_checkpoint, predict_frames, predict_sequences,
    checkpoint_of, sequence_data, temporal_from_checkpoint, train_frame_student, train_frame_teacher, train_temporal_student,
    train_temporal_teacher, FrameData, SequenceData, StudentOptions,
};

use crate::datakit::AugmentConfig;
use crate::error::{ensure, Result};
use crate::losses::{BlendTerm, LossBreakdown, TaskId, TaskSet};
use crate::metrics::MetricsReport;
use crate::models::Role;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FrameTeacher,
    FrameStudent,
    TemporalTeacher,
    TemporalStudent,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::FrameTeacher, Stage::FrameStudent, Stage::TemporalTeacher, Stage::TemporalStudent];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FrameTeacher => "frame_teacher",
            Stage::FrameStudent => "frame_student",
            Stage::TemporalTeacher => "temporal_teacher",
            Stage::TemporalStudent => "temporal_student",
        }
    }

    pub fn role(self) -> Role {
        match self {
            Stage::FrameTeacher | Stage::TemporalTeacher => Role::Teacher,
            Stage::FrameStudent | Stage::TemporalStudent => Role::Student,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Fresh,
    FromTeacher,
}

/// Optimisation protocol shared by every stage. Batch sizes count instances per
/// dataset part, so a triplet holds three times as many.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub per_part_batch_frame: usize,
    pub per_part_batch_sequence: usize,
    pub seed: u64,
    pub task_set: TaskSet,
    pub augmentation: AugmentConfig,
    pub student_init: StudentInit,
    /// Oversample frame-stage training pools before sampling.
    pub balance: bool,
    /// Caps the triplets drawn per epoch; `None` uses every full triplet.
    pub max_batches_per_epoch: Option<usize>,
    pub seq_len: usize,
    pub seq_stride: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            max_epochs: 40,
            patience: 5,
            per_part_batch_frame: 8,
            per_part_batch_sequence: 4,
            seed: 0,
            task_set: TaskSet::Three,
            augmentation: AugmentConfig::default(),
            student_init: StudentInit::Fresh,
            balance: true,
            max_batches_per_epoch: None,
            seq_len: crate::datakit::DEFAULT_SEQ_LEN,
            seq_stride: crate::datakit::DEFAULT_SEQ_LEN,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(self.max_epochs >= 1, "max_epochs must be positive");
        ensure!(self.patience >= 1, "patience must be positive");
        ensure!(
            self.patience <= self.max_epochs,
            "patience {} exceeds max_epochs {}",
            self.patience,
            self.max_epochs
        );
        ensure!(self.per_part_batch_frame >= 2, "per_part_batch_frame must be at least 2");
        ensure!(self.per_part_batch_sequence >= 1, "per_part_batch_sequence must be positive");
        ensure!(self.max_batches_per_epoch != Some(0), "max_batches_per_epoch must be positive when set");
        ensure!(self.seq_len >= 2 && self.seq_stride >= 1, "seq_len must be at least 2 and seq_stride positive");
        Ok(())
    }
}

/// Score used for early stopping and checkpoint selection.
pub fn selection_score(report: &MetricsReport) -> f64 {
    report.expr_score + report.va_score
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { improved: bool },
    Stop,
}

/// Stops once `patience` consecutive scores fail to strictly beat the best so far.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, stale: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, score: f64) -> StopDecision {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale = 0;
            return StopDecision::Continue { improved: true };
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue { improved: false }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    /// 1-based, as in [`EpochLog`].
    pub epoch: usize,
    /// 0-based position within the epoch.
    pub batch: usize,
    pub total: f64,
    pub supervision_part: f64,
    pub distillation_part: f64,
    pub per_task: BTreeMap<TaskId, f64>,
    pub blend_terms: Vec<BlendTerm>,
}

impl BatchLog {
    fn new(epoch: usize, batch: usize, b: LossBreakdown) -> Self {
        BatchLog {
            epoch,
            batch,
            total: b.total,
            supervision_part: b.supervision_part,
            distillation_part: b.distillation_part,
            per_task: b.per_task,
            blend_terms: b.blend_terms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
    pub mean_supervision: f64,
    pub mean_distillation: f64,
    pub validation: MetricsReport,
    pub selection_score: f64,
    pub improved: bool,
}

/// Everything a stage produced. `batches` is kept in memory only; the run directory
/// receives the per-epoch records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    #[serde(skip)]
    pub batches: Vec<BatchLog>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    /// Relative to the run directory, so identical runs write identical reports.
    pub best_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn best_report(&self) -> Option<&MetricsReport> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map(|e| &e.validation)
    }

    /// Total loss of every batch in order.
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(scores: &[f64], patience: usize) -> Option<usize> {
        let mut s = EarlyStopper::new(patience);
        scores.iter().position(|&x| s.update(x) == StopDecision::Stop).map(|i| i + 1)
    }

    #[test]
    fn flat_scores_stop_after_patience() {
        assert_eq!(run(&[0.5; 6], 5), Some(6));
        assert_eq!(run(&[0.5; 5], 5), None);
    }

    #[test]
    fn improving_scores_continue() {
        assert_eq!(run(&[1.0, 2.0, 3.0], 5), None);
        assert_eq!(run(&[3.0, 2.0, 2.0, 2.0, 2.0, 2.0], 5), Some(6));
        assert_eq!(run(&[1.0, 1.0, 1.0, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0], 5), Some(9));
    }

    #[test]
    fn default_protocol() {
        let c = TrainingConfig::default();
        assert_eq!((c.learning_rate, c.max_epochs, c.patience), (1e-4, 40, 5));
        assert_eq!((c.per_part_batch_frame, c.per_part_batch_sequence), (8, 4));
        c.validate().unwrap();
        assert!(TrainingConfig { patience: 50, ..c.clone() }.validate().is_err());
        assert!(TrainingConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }
}
