use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{fit, FitContext, Network};
use super::{RunRecord, Stage, StudentInit, TrainingConfig};
use crate::datakit::{
    augment_image, balance_parts, build_sequence_dataset, split_by_part, AnnotationRecord, AugmentParams,
    BalanceConfig, FeatureStore, ImageStore, SequenceSample,
};
use crate::error::{ensure, Error, Result};
use crate::losses::{BlendMode, DistillationConfig, StudentLossOptions};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport, PredictionSet};
use crate::models::{Checkpoint, FrameModel, FrameModelSpec, ModelSpec, Role, TemporalModel, TemporalModelSpec};
use crate::seed::SeedStream;

const EVAL_CHUNK: usize = 256;

/// Frame-level training data: manifests plus the pixels they reference.
#[derive(Clone, Copy)]
pub struct FrameData<'a> {
    pub train: &'a [AnnotationRecord],
    pub val: &'a [AnnotationRecord],
    pub images: &'a ImageStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentOptions {
    pub use_shared_annotations: bool,
    pub blend: BlendMode,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    stage: Stage,
    training: &'a TrainingConfig,
    distillation: &'a DistillationConfig,
    model: ModelSpec,
    student: Option<StudentOptions>,
}

fn prepare_dir(out: Option<&Path>, snap: &Snapshot) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.snapshot");
        let text = serde_json::to_string_pretty(snap)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn init_seed(cfg: &TrainingConfig, stage: Stage) -> u64 {
    SeedStream::new(cfg.seed).child(stage.as_str()).child("init").value()
}

fn student_loss(cfg: &TrainingConfig, opts: StudentOptions) -> StudentLossOptions {
    StudentLossOptions { use_shared_annotations: opts.use_shared_annotations, blend: opts.blend, task_set: cfg.task_set }
}

fn check_bins(spec_bins: usize, dist: &DistillationConfig) -> Result<()> {
    ensure!(
        spec_bins == dist.num_bins,
        "model emits {spec_bins} bins per dimension but the distillation config uses {}",
        dist.num_bins
    );
    Ok(())
}

fn restore_params(ck: &Checkpoint, expected: usize) -> Result<Vec<f32>> {
    ensure!(
        ck.params.len() == expected,
        "checkpoint holds {} parameters but its spec implies {expected}",
        ck.params.len()
    );
    Ok(ck.params.clone())
}

pub fn frame_from_checkpoint(ck: &Checkpoint) -> Result<FrameModel> {
    let ModelSpec::Frame(spec) = &ck.spec else {
        return Err(Error::InvalidArgument("checkpoint does not hold a frame model".into()));
    };
    let mut m = FrameModel::new(spec, 0, ck.role)?;
    m.params.values = restore_params(ck, m.num_params())?;
    Ok(m)
}

pub fn temporal_from_checkpoint(ck: &Checkpoint) -> Result<TemporalModel> {
    let ModelSpec::Temporal(spec) = &ck.spec else {
        return Err(Error::InvalidArgument("checkpoint does not hold a temporal model".into()));
    };
    let mut m = TemporalModel::new(spec, 0, ck.role)?;
    m.params.values = restore_params(ck, m.num_params())?;
    Ok(m)
}

pub fn predict_frames(model: &FrameModel, records: &[AnnotationRecord], images: &ImageStore) -> Result<PredictionSet> {
    let mut preds = PredictionSet::default();
    for chunk in records.chunks(EVAL_CHUNK) {
        let imgs = chunk.iter().map(|r| images.get(&r.frame_ref)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = imgs.iter().collect();
        let (out, _) = model.forward(&refs)?;
        for (r, o) in chunk.iter().zip(&out) {
            preds.push(r.frame_ref.clone(), r.expr, o.predicted_class(), r.va, o.predicted_va());
        }
    }
    Ok(preds)
}

/// Predictions for every non-padded frame of every sample.
pub fn predict_sequences(model: &TemporalModel, samples: &[SequenceSample]) -> Result<PredictionSet> {
    let mut preds = PredictionSet::default();
    for chunk in samples.chunks(EVAL_CHUNK / 8) {
        let seqs: Vec<&[Vec<f32>]> = chunk.iter().map(|s| s.features.as_slice()).collect();
        let out = model.forward(&seqs)?;
        for (s, o) in chunk.iter().zip(&out) {
            for ((r, pad), o) in s.labels.iter().zip(&s.padded).zip(o) {
                if !pad {
                    preds.push(r.frame_ref.clone(), r.expr, o.predicted_class(), r.va, o.predicted_va());
                }
            }
        }
    }
    Ok(preds)
}

pub fn evaluate_frame_model(model: &FrameModel, records: &[AnnotationRecord], images: &ImageStore) -> Result<MetricsReport> {
    evaluate(&predict_frames(model, records, images)?, &MetricsConfig::default())
}

pub fn evaluate_temporal_model(model: &TemporalModel, samples: &[SequenceSample]) -> Result<MetricsReport> {
    evaluate(&predict_sequences(model, samples)?, &MetricsConfig::default())
}

/// Cuts train and validation feature sequences. Every record must have a feature row.
pub fn sequence_data(
    features: &FeatureStore,
    train: &[AnnotationRecord],
    val: &[AnnotationRecord],
    seq_len: usize,
    stride: usize,
) -> Result<SequenceData> {
    let lookup = features.lookup();
    let rows = |recs: &[AnnotationRecord]| -> Result<Vec<Vec<f32>>> {
        recs.iter()
            .map(|r| {
                let i = lookup.get(&(r.video_id.as_str(), r.frame_index)).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no feature row for frame {} (video {}, index {})",
                        r.frame_ref, r.video_id, r.frame_index
                    ))
                })?;
                Ok(features.row(*i).to_vec())
            })
            .collect()
    };
    Ok(SequenceData {
        train: build_sequence_dataset(&rows(train)?, train, seq_len, stride)?,
        val: build_sequence_dataset(&rows(val)?, val, seq_len, stride)?,
    })
}

fn frame_pools(data: &FrameData, cfg: &TrainingConfig, dist: &DistillationConfig, stage: Stage) -> Result<[Vec<AnnotationRecord>; 3]> {
    let records = if cfg.balance {
        let seed = SeedStream::new(cfg.seed).child(stage.as_str()).child("balance").value();
        balance_parts(data.train, &BalanceConfig { num_bins: dist.num_bins, seed })?
    } else {
        data.train.to_vec()
    };
    Ok(split_by_part(&records, |r| r.part))
}

fn check_frame_data(spec: &FrameModelSpec, data: &FrameData) -> Result<()> {
    ensure!(
        data.images.height == spec.image_height && data.images.width == spec.image_width,
        "images are {}x{} but the model expects {}x{}",
        data.images.height,
        data.images.width,
        spec.image_height,
        spec.image_width
    );
    ensure!(!data.val.is_empty(), "validation split is empty");
    Ok(())
}

fn frame_fit(
    model: &mut FrameModel,
    distill: Option<(&FrameModel, StudentOptions)>,
    data: &FrameData,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    stage: Stage,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let (teacher, student) = (distill.map(|d| d.0), distill.map(|d| d.1));
    prepare_dir(out, &Snapshot { stage, training: cfg, distillation: dist, model: model.spec(), student })?;
    let pools = frame_pools(data, cfg, dist, stage)?;
    let (h, w) = (model.spec.image_height, model.spec.image_width);
    let make_input = |r: &AnnotationRecord, rng: &mut rand_chacha::ChaCha8Rng| {
        let img = data.images.get(&r.frame_ref)?;
        if !cfg.augmentation.enabled {
            return Ok(img);
        }
        let p = AugmentParams::draw(&cfg.augmentation, h, w, rng);
        Ok(augment_image(&img, &p))
    };
    let mut eval = |m: &FrameModel| evaluate_frame_model(m, data.val, data.images);
    let ctx = FitContext {
        stage,
        cfg,
        dist,
        per_part: cfg.per_part_batch_frame,
        student: student.map(|o| student_loss(cfg, o)),
        out_dir: out,
    };
    fit(model, teacher, &pools, make_input, &mut eval, &ctx)
}

/// Trains a frame-level teacher on ground truth only.
pub fn train_frame_teacher(
    data: &FrameData,
    spec: &FrameModelSpec,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    out: Option<&Path>,
) -> Result<(FrameModel, RunRecord)> {
    check_bins(spec.num_bins, dist)?;
    check_frame_data(spec, data)?;
    let mut model = FrameModel::new(spec, init_seed(cfg, Stage::FrameTeacher), Role::Teacher)?;
    let record = frame_fit(&mut model, None, data, cfg, dist, Stage::FrameTeacher, out)?;
    Ok((model, record))
}

/// Trains a frame-level student against a frozen teacher restored from `teacher`.
pub fn train_frame_student(
    data: &FrameData,
    teacher: &Checkpoint,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    opts: StudentOptions,
    out: Option<&Path>,
) -> Result<(FrameModel, RunRecord)> {
    let teacher = frame_from_checkpoint(teacher)?;
    check_bins(teacher.spec.num_bins, dist)?;
    check_frame_data(&teacher.spec, data)?;
    let mut student = FrameModel::new(&teacher.spec, init_seed(cfg, Stage::FrameStudent), Role::Student)?;
    if cfg.student_init == StudentInit::FromTeacher {
        student.params.values.copy_from_slice(&teacher.params.values);
    }
    let record = frame_fit(&mut student, Some((&teacher, opts)), data, cfg, dist, Stage::FrameStudent, out)?;
    Ok((student, record))
}

fn temporal_fit(
    model: &mut TemporalModel,
    distill: Option<(&TemporalModel, StudentOptions)>,
    data: &SequenceData,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    stage: Stage,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let (teacher, student) = (distill.map(|d| d.0), distill.map(|d| d.1));
    ensure!(!data.val.is_empty(), "validation split is empty");
    for s in data.train.iter().chain(&data.val) {
        if let Some(f) = s.features.first() {
            ensure!(
                f.len() == model.spec.input_dim,
                "sequence features have dimension {} but the model expects {}",
                f.len(),
                model.spec.input_dim
            );
        }
    }
    prepare_dir(out, &Snapshot { stage, training: cfg, distillation: dist, model: model.spec(), student })?;
    let pools = split_by_part(&data.train, |s| s.part);
    let make_input = |s: &SequenceSample, _: &mut rand_chacha::ChaCha8Rng| Ok(s.features.clone());
    let mut eval = |m: &TemporalModel| evaluate_temporal_model(m, &data.val);
    let ctx = FitContext {
        stage,
        cfg,
        dist,
        per_part: cfg.per_part_batch_sequence,
        student: student.map(|o| student_loss(cfg, o)),
        out_dir: out,
    };
    fit(model, teacher, &pools, make_input, &mut eval, &ctx)
}

pub fn train_temporal_teacher(
    data: &SequenceData,
    spec: &TemporalModelSpec,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    out: Option<&Path>,
) -> Result<(TemporalModel, RunRecord)> {
    check_bins(spec.num_bins, dist)?;
    let mut model = TemporalModel::new(spec, init_seed(cfg, Stage::TemporalTeacher), Role::Teacher)?;
    let record = temporal_fit(&mut model, None, data, cfg, dist, Stage::TemporalTeacher, out)?;
    Ok((model, record))
}

pub fn train_temporal_student(
    data: &SequenceData,
    teacher: &Checkpoint,
    cfg: &TrainingConfig,
    dist: &DistillationConfig,
    opts: StudentOptions,
    out: Option<&Path>,
) -> Result<(TemporalModel, RunRecord)> {
    let teacher = temporal_from_checkpoint(teacher)?;
    check_bins(teacher.spec.num_bins, dist)?;
    let mut student = TemporalModel::new(&teacher.spec, init_seed(cfg, Stage::TemporalStudent), Role::Student)?;
    if cfg.student_init == StudentInit::FromTeacher {
        student.params.values.copy_from_slice(&teacher.params.values);
    }
    let record = temporal_fit(&mut student, Some((&teacher, opts)), data, cfg, dist, Stage::TemporalStudent, out)?;
    Ok((student, record))
}

/// In-memory checkpoint of a trained network at its selected epoch (no optimizer state).
pub fn checkpoint_of<N: Network>(net: &N, role: Role, dist: &DistillationConfig, record: &RunRecord) -> Checkpoint {
    Checkpoint {
        spec: net.spec(),
        role,
        distillation: dist.clone(),
        epoch: record.best_epoch,
        best_score: record.best_score.is_finite().then_some(record.best_score),
        params: net.params().to_vec(),
        optimizer: None,
    }
}
