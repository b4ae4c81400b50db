use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{selection_score, BatchLog, EarlyStopper, EpochLog, RunRecord, Stage, StopDecision, TrainingConfig};
use crate::datakit::{AnnotationRecord, Part, SequenceSample, TripletSampler};
use crate::error::{Error, Result};
use crate::losses::{
    student_batch_loss_grad, teacher_batch_loss_grad, BatchLabels, DistillationConfig, FrameModelOutput, OutputGrad,
    PartOutputs, StudentLossOptions,
};
use crate::metrics::MetricsReport;
use crate::models::{Adam, AdamConfig, Checkpoint, FrameModel, FrameTape, ModelSpec, SequenceTape, TemporalModel};
use crate::seed::SeedStream;

/// A trainable network: per-input lists of per-frame outputs.
/// Per-input outputs and the tapes needed to backpropagate through them.
pub type ForwardPass<T> = (Vec<Vec<FrameModelOutput>>, Vec<T>);

pub trait Network: Sync {
    type Input: Sync;
    type Tape: Send;

    fn spec(&self) -> ModelSpec;
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];
    fn eval(&self, inputs: &[&Self::Input]) -> Result<Vec<Vec<FrameModelOutput>>>;
    fn train_forward(&self, inputs: &[&Self::Input]) -> Result<ForwardPass<Self::Tape>>;
    fn backward(&self, tapes: &[Self::Tape], grads: &[Vec<OutputGrad>]) -> Result<Vec<f32>>;
}

impl Network for FrameModel {
    type Input = crate::datakit::Image;
    type Tape = FrameTape;

    fn spec(&self) -> ModelSpec {
        ModelSpec::Frame(self.spec.clone())
    }
    fn params(&self) -> &[f32] {
        &self.params.values
    }
    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params.values
    }
    fn eval(&self, inputs: &[&Self::Input]) -> Result<Vec<Vec<FrameModelOutput>>> {
        Ok(self.forward(inputs)?.0.into_iter().map(|o| vec![o]).collect())
    }
    fn train_forward(&self, inputs: &[&Self::Input]) -> Result<ForwardPass<FrameTape>> {
        let (o, t) = self.forward_train(inputs)?;
        Ok((o.into_iter().map(|o| vec![o]).collect(), t))
    }
    fn backward(&self, tapes: &[FrameTape], grads: &[Vec<OutputGrad>]) -> Result<Vec<f32>> {
        let flat: Vec<OutputGrad> = grads.iter().map(|g| g[0].clone()).collect();
        FrameModel::backward(self, tapes, &flat)
    }
}

impl Network for TemporalModel {
    type Input = Vec<Vec<f32>>;
    type Tape = SequenceTape;

    fn spec(&self) -> ModelSpec {
        ModelSpec::Temporal(self.spec.clone())
    }
    fn params(&self) -> &[f32] {
        &self.params.values
    }
    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params.values
    }
    fn eval(&self, inputs: &[&Self::Input]) -> Result<Vec<Vec<FrameModelOutput>>> {
        let seqs: Vec<&[Vec<f32>]> = inputs.iter().map(|s| s.as_slice()).collect();
        self.forward(&seqs)
    }
    fn train_forward(&self, inputs: &[&Self::Input]) -> Result<ForwardPass<SequenceTape>> {
        let seqs: Vec<&[Vec<f32>]> = inputs.iter().map(|s| s.as_slice()).collect();
        self.forward_train(&seqs)
    }
    fn backward(&self, tapes: &[SequenceTape], grads: &[Vec<OutputGrad>]) -> Result<Vec<f32>> {
        TemporalModel::backward(self, tapes, grads)
    }
}

/// A training item: one frame, or a window of frames.
pub trait Sample: Sync {
    fn part(&self) -> Part;
    /// Loss-bearing output positions and their records.
    fn frames(&self) -> Vec<(usize, &AnnotationRecord)>;
    fn positions(&self) -> usize;
}

impl Sample for AnnotationRecord {
    fn part(&self) -> Part {
        self.part
    }
    fn frames(&self) -> Vec<(usize, &AnnotationRecord)> {
        vec![(0, self)]
    }
    fn positions(&self) -> usize {
        1
    }
}

impl Sample for SequenceSample {
    fn part(&self) -> Part {
        self.part
    }
    fn frames(&self) -> Vec<(usize, &AnnotationRecord)> {
        self.labels.iter().zip(&self.padded).enumerate().filter(|(_, (_, p))| !**p).map(|(i, (r, _))| (i, r)).collect()
    }
    fn positions(&self) -> usize {
        self.labels.len()
    }
}

pub struct FitContext<'a> {
    pub stage: Stage,
    pub cfg: &'a TrainingConfig,
    pub dist: &'a DistillationConfig,
    pub per_part: usize,
    /// `Some` for student stages.
    pub student: Option<StudentLossOptions>,
    pub out_dir: Option<&'a Path>,
}

const BEST_CHECKPOINT: &str = "best.ckpt";

/// Flattens per-item outputs into per-part instance lists following `frames()`.
fn gather<S: Sample>(items: &[Vec<&S>; 3], outputs: &[Vec<FrameModelOutput>]) -> PartOutputs {
    let mut out: PartOutputs = Default::default();
    let mut k = 0;
    for (p, part) in items.iter().enumerate() {
        for it in part {
            for (pos, _) in it.frames() {
                out[p].push(outputs[k][pos].clone());
            }
            k += 1;
        }
    }
    out
}

fn labels_of<S: Sample>(items: &[Vec<&S>; 3]) -> BatchLabels {
    let mut l = BatchLabels::default();
    for (p, part) in items.iter().enumerate() {
        l.parts[p] = part.iter().flat_map(|it| it.frames().into_iter().map(|(_, r)| r.labels())).collect();
    }
    l
}

fn scatter<S: Sample>(items: &[Vec<&S>; 3], grads: [Vec<OutputGrad>; 3], num_bins: usize) -> Vec<Vec<OutputGrad>> {
    let mut out = Vec::new();
    for (part, g) in items.iter().zip(grads) {
        let mut g = g.into_iter();
        for it in part {
            let mut per = vec![FrameModelOutput::zeros(num_bins); it.positions()];
            for (pos, _) in it.frames() {
                per[pos] = g.next().expect("one gradient per loss-bearing frame");
            }
            out.push(per);
        }
    }
    out
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    stage: Stage,
    epoch: usize,
    batch: usize,
    outputs_finite: bool,
    log: Option<&'a BatchLog>,
    param_l2: f64,
    grad_finite: bool,
}

/// Builds the divergence error and, with a run directory, writes `divergence.json`.
fn diverged<N: Network>(net: &N, ctx: &FitContext, epoch: usize, batch: usize, log: Option<&BatchLog>, grad_finite: bool) -> Error {
    let param_l2 = net.params().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let dump = DivergenceDump { stage: ctx.stage, epoch, batch, outputs_finite: log.is_some(), log, param_l2, grad_finite };
    let text = serde_json::to_string(&dump).unwrap_or_default();
    if let Some(dir) = ctx.out_dir {
        let path = dir.join("divergence.json");
        if let Err(e) = std::fs::write(&path, &text) {
            log::warn!("could not write {}: {e}", path.display());
        }
    }
    Error::Divergence(format!("stage {} epoch {epoch} batch {batch}: {text}", ctx.stage))
}

fn open_log(dir: Option<&Path>, name: &str) -> Result<Option<BufWriter<File>>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    Ok(Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?)))
}

fn write_json_line<T: Serialize>(w: &mut Option<BufWriter<File>>, value: &T) -> Result<()> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("epochs.log", e))?;
    }
    Ok(())
}

fn checkpoint<N: Network>(net: &N, ctx: &FitContext, epoch: usize, best: Option<f64>, adam: &Adam) -> Checkpoint {
    Checkpoint {
        spec: net.spec(),
        role: ctx.stage.role(),
        distillation: ctx.dist.clone(),
        epoch,
        best_score: best,
        params: net.params().to_vec(),
        optimizer: Some((adam.config.clone(), adam.state.clone())),
    }
}

/// Runs one stage. `make_input` builds (and may augment) the network input for an
/// item using the batch's random stream; `evaluate` scores the current network on
/// validation data once per epoch. On return `net` holds the best-scoring parameters.
pub fn fit<N, S, I>(
    net: &mut N,
    teacher: Option<&N>,
    pools: &[Vec<S>; 3],
    make_input: I,
    evaluate: &mut dyn FnMut(&N) -> Result<MetricsReport>,
    ctx: &FitContext,
) -> Result<RunRecord>
where
    N: Network,
    S: Sample,
    I: Fn(&S, &mut ChaCha8Rng) -> Result<N::Input>,
{
    let cfg = ctx.cfg;
    cfg.validate()?;
    ctx.dist.validate()?;
    if ctx.student.is_some() && teacher.is_none() {
        return Err(Error::InvalidArgument("student stage needs a teacher".into()));
    }
    let stream = SeedStream::new(cfg.seed).child(ctx.stage.as_str());
    let sampler = TripletSampler::new(
        [pools[0].len(), pools[1].len(), pools[2].len()],
        ctx.per_part,
        stream.child("sampler"),
    )?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), net.params().len());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs_log = open_log(ctx.out_dir, "epochs.log")?;
    let mut record = RunRecord {
        stage: ctx.stage,
        epochs: Vec::new(),
        batches: Vec::new(),
        best_epoch: 0,
        best_score: f64::NEG_INFINITY,
        stopped_early: false,
        best_checkpoint: None,
    };
    let mut best_params = net.params().to_vec();

    for epoch in 1..=cfg.max_epochs {
        let mut batches = sampler.epoch(epoch);
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut sum_total, mut sum_sup, mut sum_dist) = (0.0, 0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let items: [Vec<&S>; 3] = std::array::from_fn(|p| idx[p].iter().map(|&i| &pools[p][i]).collect());
            let mut rng = stream.child("augment").index(epoch as u64).index(b as u64).rng();
            let inputs = items.iter().flatten().map(|it| make_input(it, &mut rng)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&N::Input> = inputs.iter().collect();

            let (out, tapes) = net.train_forward(&refs)?;
            if !out.iter().flatten().all(|o| o.is_finite()) {
                return Err(diverged(net, ctx, epoch, b, None, false));
            }
            let student_out = gather(&items, &out);
            let labels = labels_of(&items);
            let (breakdown, grads) = match (ctx.student, teacher) {
                (Some(opts), Some(t)) => {
                    let t_out = gather(&items, &t.eval(&refs)?);
                    student_batch_loss_grad(&labels, &t_out, &student_out, ctx.dist, opts)?
                }
                _ => teacher_batch_loss_grad(&labels, &student_out, ctx.dist, cfg.task_set)?,
            };
            let log = BatchLog::new(epoch, b, breakdown);
            let per_item = scatter(&items, grads, ctx.dist.num_bins);
            let g = net.backward(&tapes, &per_item)?;
            let grad_finite = g.iter().all(|v| v.is_finite());
            if !log.total.is_finite() || !grad_finite {
                return Err(diverged(net, ctx, epoch, b, Some(&log), grad_finite));
            }
            adam.step(net.params_mut(), &g)?;
            sum_total += log.total;
            sum_sup += log.supervision_part;
            sum_dist += log.distillation_part;
            record.batches.push(log);
        }

        let validation = evaluate(net)?;
        let score = selection_score(&validation);
        let decision = stopper.update(score);
        let improved = matches!(decision, StopDecision::Continue { improved: true });
        let n = batches.len().max(1) as f64;
        let entry = EpochLog {
            epoch,
            batches: batches.len(),
            mean_loss: sum_total / n,
            mean_supervision: sum_sup / n,
            mean_distillation: sum_dist / n,
            validation,
            selection_score: score,
            improved,
        };
        log::info!("{} epoch {epoch}: loss {:.4} score {:.4}{}", ctx.stage, entry.mean_loss, score, if improved { " *" } else { "" });
        write_json_line(&mut epochs_log, &entry)?;
        record.epochs.push(entry);
        if improved {
            record.best_epoch = epoch;
            record.best_score = score;
            best_params.copy_from_slice(net.params());
            if let Some(dir) = ctx.out_dir {
                checkpoint(net, ctx, epoch, Some(score), &adam).save(dir.join(BEST_CHECKPOINT))?;
                record.best_checkpoint = Some(BEST_CHECKPOINT.into());
            }
        }
        if decision == StopDecision::Stop {
            record.stopped_early = true;
            break;
        }
    }

    if let Some(dir) = ctx.out_dir {
        let last_epoch = record.epochs.last().map_or(0, |e| e.epoch);
        checkpoint(net, ctx, last_epoch, stopper.best(), &adam).save(dir.join("last.ckpt"))?;
    }
    net.params_mut().copy_from_slice(&best_params);
    if let Some(dir) = ctx.out_dir {
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(record)
}
