use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::{
    checkpoint_of, sequence_data, train_frame_student, train_frame_teacher, train_temporal_student,
    train_temporal_teacher, FrameData, StudentOptions,
};
use super::{selection_score, RunRecord, Stage, TrainingConfig};
use crate::datakit::Corpus;
use crate::error::{Error, Result};
use crate::losses::{DistillationConfig, TaskSet};
use crate::metrics::MetricsReport;
use crate::models::{extract_features, FrameModelSpec, Role, TemporalModelSpec};

/// Full configuration of the four-stage pipeline. The frame model's bin count and
/// image size, and the temporal model's input size and bin count, are derived from
/// the distillation config, the corpus and the frame model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub frame_model: FrameModelSpec,
    pub temporal_model: TemporalModelSpec,
    /// Protocol of the two frame-level stages.
    pub training: TrainingConfig,
    /// Protocol of the two temporal stages.
    pub temporal_training: TrainingConfig,
    pub distillation: DistillationConfig,
    pub student: StudentOptions,
}

impl PipelineConfig {
    /// Specs with the derived fields filled in for images of `height × width`.
    pub fn resolved_specs(&self, height: usize, width: usize) -> (FrameModelSpec, TemporalModelSpec) {
        let frame = FrameModelSpec {
            num_bins: self.distillation.num_bins,
            image_height: height,
            image_width: width,
            ..self.frame_model.clone()
        };
        let temporal = TemporalModelSpec {
            input_dim: frame.feature_dim,
            num_bins: self.distillation.num_bins,
            ..self.temporal_model.clone()
        };
        (frame, temporal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub selection_score: f64,
    pub metrics: MetricsReport,
}

impl StageReport {
    fn from_record(r: &RunRecord) -> Result<Self> {
        let metrics = r
            .best_report()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("stage {} logged no epochs", r.stage)))?;
        Ok(StageReport {
            stage: r.stage,
            epochs_run: r.epochs.len(),
            best_epoch: r.best_epoch,
            stopped_early: r.stopped_early,
            selection_score: selection_score(&metrics),
            metrics,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub task_set: TaskSet,
    pub use_shared_annotations: bool,
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: stage.to_string(), source: Box::new(e) })
}

/// frame teacher → frame student → feature extraction → temporal teacher → temporal
/// student. With `out`, each stage writes its run directory under `out/<stage>`,
/// features go to `out/features.bin` and the consolidated report to
/// `out/report.json`; completed stages keep their artifacts if a later one fails.
pub fn run_pipeline(corpus: &Corpus, cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineReport> {
    let (frame_spec, temporal_spec) = cfg.resolved_specs(corpus.images.height, corpus.images.width);
    let (train, ttrain, dist) = (&cfg.training, &cfg.temporal_training, &cfg.distillation);
    let dir = |s: Stage| out.map(|o| o.join(s.as_str()));
    let data = FrameData { train: &corpus.train, val: &corpus.val, images: &corpus.images };
    let mut stages = Vec::new();

    let (teacher, rec) = in_stage(
        Stage::FrameTeacher.as_str(),
        train_frame_teacher(&data, &frame_spec, train, dist, dir(Stage::FrameTeacher).as_deref()),
    )?;
    stages.push(StageReport::from_record(&rec)?);
    let teacher_ck = checkpoint_of(&teacher, Role::Teacher, dist, &rec);

    let (student, rec) = in_stage(
        Stage::FrameStudent.as_str(),
        train_frame_student(&data, &teacher_ck, train, dist, cfg.student, dir(Stage::FrameStudent).as_deref()),
    )?;
    stages.push(StageReport::from_record(&rec)?);

    let seqs = in_stage("extract_features", (|| {
        let all: Vec<_> = corpus.train.iter().chain(&corpus.val).cloned().collect();
        let features = extract_features(&student, &all, &corpus.images)?;
        if let Some(o) = out {
            features.save(o.join("features.bin"))?;
        }
        sequence_data(&features, &corpus.train, &corpus.val, ttrain.seq_len, ttrain.seq_stride)
    })())?;

    let (t_teacher, rec) = in_stage(
        Stage::TemporalTeacher.as_str(),
        train_temporal_teacher(&seqs, &temporal_spec, ttrain, dist, dir(Stage::TemporalTeacher).as_deref()),
    )?;
    stages.push(StageReport::from_record(&rec)?);
    let t_teacher_ck = checkpoint_of(&t_teacher, Role::Teacher, dist, &rec);

    let (_, rec) = in_stage(
        Stage::TemporalStudent.as_str(),
        train_temporal_student(&seqs, &t_teacher_ck, ttrain, dist, cfg.student, dir(Stage::TemporalStudent).as_deref()),
    )?;
    stages.push(StageReport::from_record(&rec)?);

    let report = PipelineReport {
        seed: train.seed,
        task_set: train.task_set,
        use_shared_annotations: cfg.student.use_shared_annotations,
        stages,
    };
    if let Some(o) = out {
        let path = o.join("report.json");
        std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStat {
    pub stage: Stage,
    pub expr_score_mean: f64,
    pub expr_score_std: f64,
    pub va_score_mean: f64,
    pub va_score_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub stages: Vec<SweepStat>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and population standard deviation per stage across seed runs.
pub fn summarize_sweep(reports: &[PipelineReport]) -> Result<SweepSummary> {
    crate::error::ensure!(!reports.is_empty(), "no runs to summarize");
    let stages = Stage::ALL
        .iter()
        .filter_map(|&stage| {
            let found: Vec<&MetricsReport> = reports.iter().filter_map(|r| r.stage(stage)).map(|s| &s.metrics).collect();
            if found.is_empty() {
                return None;
            }
            let (em, es) = mean_std(&found.iter().map(|m| m.expr_score).collect::<Vec<_>>());
            let (vm, vs) = mean_std(&found.iter().map(|m| m.va_score).collect::<Vec<_>>());
            Some(SweepStat { stage, expr_score_mean: em, expr_score_std: es, va_score_mean: vm, va_score_std: vs })
        })
        .collect();
    Ok(SweepSummary { seeds: reports.iter().map(|r| r.seed).collect(), stages })
}
