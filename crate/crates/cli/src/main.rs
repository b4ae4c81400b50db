//! `affect-mtl`: corpus synthesis, stage-wise training, feature extraction and
//! evaluation for the multitask expression / valence-arousal pipeline.
//!
//! Settings resolve as: command-line flag, then the `--config` TOML file, then the
//! built-in default. Exit status is 0 on success, 1 on a failed run (one line
//! `error[<class>]: <message>` on stderr) and 2 on a usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affect_mtl::datakit::{
    join_predictions, load_manifest, load_predictions, synthesize_corpus, write_predictions, Corpus, FeatureStore,
    SynthSpec,
};
use affect_mtl::losses::{DistillationConfig, TaskSet};
use affect_mtl::metrics::{evaluate, MetricsConfig, MetricsReport, PredictionSet};
use affect_mtl::models::{extract_features, Checkpoint, FrameModelSpec, Role, TemporalModelSpec};
use affect_mtl::trainer::{
    checkpoint_of, frame_from_checkpoint, predict_frames, predict_sequences, run_pipeline, sequence_data,
    train_frame_student, train_frame_teacher, train_temporal_student, train_temporal_teacher, FrameData,
    PipelineConfig, RunRecord, Stage, StudentOptions, TrainingConfig,
};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const SNAPSHOT: &str = "config.snapshot";
const PREDICTIONS: &str = "predictions.csv";
const FEATURES: &str = "features.bin";
const REPORT: &str = "report.json";

#[derive(Parser)]
#[command(name = "affect-mtl", version, about = "Multitask affect training with teacher/student distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus: train.csv, val.csv, images.bin and its index.
    GenData(Common),
    /// Train the frame-level teacher into OUT/frame_teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the frame-level student against a frozen teacher into OUT/frame_student.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint, e.g. OUT/frame_teacher/best.ckpt.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Run a frame checkpoint over every train and val frame into OUT/features.bin.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Frame-model checkpoint (usually the student's best.ckpt).
        #[arg(long)]
        model: PathBuf,
    },
    /// Train the temporal teacher, then the temporal student, on extracted features.
    TrainTemporal {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; only its manifests are read.
        #[arg(long)]
        data: PathBuf,
        /// Feature store written by extract-features.
        #[arg(long)]
        features: PathBuf,
    },
    /// Score a predictions CSV against a manifest; prints the report and writes OUT/report.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// CSV with columns frame_ref,expr,valence,arousal.
        #[arg(long)]
        pred: PathBuf,
        /// Manifest with the ground truth, e.g. DATA/val.csv.
        #[arg(long)]
        truth: PathBuf,
    },
    /// All four stages end to end; synthesizes the corpus from [synth] unless --data is given.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

/// Flags shared by every command. Unset flags fall back to the config file.
#[derive(Args)]
struct Common {
    /// TOML config; every key optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus synthesis and every training stage [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Task set `1,2` or `1,2,3` [default: 1,2,3].
    #[arg(long)]
    tasks: Option<TaskSet>,
    /// Use shared annotations in the student objective [default: off].
    #[arg(long, value_enum)]
    shared: Option<OnOff>,
    /// Supervision weight in the blended student loss [default: 0.6].
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    /// Distillation softmax temperature [default: 2].
    #[arg(long)]
    temperature: Option<f64>,
    /// Bins per valence/arousal dimension [default: 20].
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    synth: SynthSpec,
    frame_model: FrameModelSpec,
    temporal_model: TemporalModelSpec,
    training: TrainingConfig,
    temporal_training: TrainingConfig,
    distillation: DistillationConfig,
    student: StudentOptions,
    metrics: MetricsConfig,
}

impl CliConfig {
    fn resolve(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| lib_io(path, e))?;
                toml::from_str::<CliConfig>(&text).map_err(|e| affect_mtl::Error::Parse {
                    path: path.display().to_string(),
                    message: e.message().to_string(),
                })?
            }
            None => CliConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.synth.seed = seed;
            cfg.training.seed = seed;
            cfg.temporal_training.seed = seed;
        }
        if let Some(tasks) = common.tasks {
            cfg.training.task_set = tasks;
            cfg.temporal_training.task_set = tasks;
        }
        if let Some(shared) = common.shared {
            cfg.student.use_shared_annotations = matches!(shared, OnOff::On);
        }
        if let Some(l) = common.lambda {
            cfg.distillation.lambda_weight = l;
        }
        if let Some(t) = common.temperature {
            cfg.distillation.temperature = t;
        }
        if let Some(b) = common.bins {
            cfg.distillation.num_bins = b;
        }
        cfg.synth.validate()?;
        cfg.training.validate()?;
        cfg.temporal_training.validate()?;
        cfg.distillation.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            frame_model: self.frame_model.clone(),
            temporal_model: self.temporal_model.clone(),
            training: self.training.clone(),
            temporal_training: self.temporal_training.clone(),
            distillation: self.distillation.clone(),
            student: self.student,
        }
    }

    /// Writes the fully resolved configuration as `OUT/config.snapshot`.
    fn snapshot(&self, out: &Path) -> Result<()> {
        create_dir(out)?;
        let path = out.join(SNAPSHOT);
        let text = toml::to_string(self).context("serializing config snapshot")?;
        std::fs::write(&path, text).map_err(|e| lib_io(&path, e))?;
        Ok(())
    }
}

fn lib_io(path: &Path, source: std::io::Error) -> affect_mtl::Error {
    affect_mtl::Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| lib_io(dir, e))?;
    Ok(())
}

fn save_predictions(path: &Path, preds: &PredictionSet) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| lib_io(path, e))?;
    write_predictions(std::io::BufWriter::new(f), preds)?;
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    create_dir(out)?;
    let path = out.join(REPORT);
    std::fs::write(&path, report.to_json()).map_err(|e| lib_io(&path, e))?;
    Ok(())
}

fn summarize(record: &RunRecord) {
    match record.best_report() {
        Some(r) => log::info!(
            "{}: best epoch {} of {}, expr {:.4}, va {:.4}",
            record.stage,
            record.best_epoch,
            record.epochs.len(),
            r.expr_score,
            r.va_score
        ),
        None => log::info!("{}: no epochs", record.stage),
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus::load(dir)?)
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let corpus = synthesize_corpus(&cfg.synth)?;
    corpus.save(&common.out)?;
    cfg.snapshot(&common.out)?;
    log::info!("{} train / {} val frames in {}", corpus.train.len(), corpus.val.len(), common.out.display());
    Ok(())
}

fn train_teacher(common: &Common, data: &Path) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let corpus = load_corpus(data)?;
    cfg.snapshot(&common.out)?;
    let (spec, _) = cfg.pipeline().resolved_specs(corpus.images.height, corpus.images.width);
    let dir = common.out.join(Stage::FrameTeacher.as_str());
    let frame = FrameData { train: &corpus.train, val: &corpus.val, images: &corpus.images };
    let (model, record) = train_frame_teacher(&frame, &spec, &cfg.training, &cfg.distillation, Some(&dir))?;
    save_predictions(&dir.join(PREDICTIONS), &predict_frames(&model, &corpus.val, &corpus.images)?)?;
    summarize(&record);
    Ok(())
}

fn train_student(common: &Common, data: &Path, teacher: &Path) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let corpus = load_corpus(data)?;
    let teacher = Checkpoint::load(teacher)?;
    cfg.snapshot(&common.out)?;
    let dir = common.out.join(Stage::FrameStudent.as_str());
    let frame = FrameData { train: &corpus.train, val: &corpus.val, images: &corpus.images };
    let (model, record) =
        train_frame_student(&frame, &teacher, &cfg.training, &cfg.distillation, cfg.student, Some(&dir))?;
    save_predictions(&dir.join(PREDICTIONS), &predict_frames(&model, &corpus.val, &corpus.images)?)?;
    summarize(&record);
    Ok(())
}

fn extract(common: &Common, data: &Path, model: &Path) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let corpus = load_corpus(data)?;
    let model = frame_from_checkpoint(&Checkpoint::load(model)?)?;
    cfg.snapshot(&common.out)?;
    let all: Vec<_> = corpus.train.iter().chain(&corpus.val).cloned().collect();
    let features = extract_features(&model, &all, &corpus.images)?;
    features.save(common.out.join(FEATURES))?;
    log::info!("{} feature rows of dimension {}", features.len(), features.feature_dim);
    Ok(())
}

fn train_temporal(common: &Common, data: &Path, features: &Path) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let train = load_manifest(data.join(Corpus::TRAIN_MANIFEST))?;
    let val = load_manifest(data.join(Corpus::VAL_MANIFEST))?;
    let features = FeatureStore::load(features)?;
    cfg.snapshot(&common.out)?;
    let tcfg = &cfg.temporal_training;
    let seqs = sequence_data(&features, &train, &val, tcfg.seq_len, tcfg.seq_stride)?;
    let spec = TemporalModelSpec {
        input_dim: features.feature_dim,
        num_bins: cfg.distillation.num_bins,
        ..cfg.temporal_model.clone()
    };

    let dir = common.out.join(Stage::TemporalTeacher.as_str());
    let (teacher, record) = train_temporal_teacher(&seqs, &spec, tcfg, &cfg.distillation, Some(&dir))?;
    save_predictions(&dir.join(PREDICTIONS), &predict_sequences(&teacher, &seqs.val)?)?;
    summarize(&record);
    let teacher_ck = checkpoint_of(&teacher, Role::Teacher, &cfg.distillation, &record);

    let dir = common.out.join(Stage::TemporalStudent.as_str());
    let (student, record) =
        train_temporal_student(&seqs, &teacher_ck, tcfg, &cfg.distillation, cfg.student, Some(&dir))?;
    save_predictions(&dir.join(PREDICTIONS), &predict_sequences(&student, &seqs.val)?)?;
    summarize(&record);
    Ok(())
}

fn evaluate_cmd(common: &Common, pred: &Path, truth: &Path) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let rows = load_predictions(pred)?;
    let truth = load_manifest(truth)?;
    let report = evaluate(&join_predictions(&rows, &truth)?, &cfg.metrics)?;
    println!("{}", report.to_json());
    write_report(&common.out, &report)
}

fn pipeline_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = CliConfig::resolve(common)?;
    let corpus = match data {
        Some(d) => load_corpus(d)?,
        None => synthesize_corpus(&cfg.synth)?,
    };
    cfg.snapshot(&common.out)?;
    let report = run_pipeline(&corpus, &cfg.pipeline(), Some(&common.out))?;
    println!("{}", report.to_json());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::TrainTeacher { common, data } => train_teacher(common, data),
        Command::TrainStudent { common, data, teacher } => train_student(common, data, teacher),
        Command::ExtractFeatures { common, data, model } => extract(common, data, model),
        Command::TrainTemporal { common, data, features } => train_temporal(common, data, features),
        Command::Evaluate { common, pred, truth } => evaluate_cmd(common, pred, truth),
        Command::RunPipeline { common, data } => pipeline_cmd(common, data.as_deref()),
    }
}

/// Class of the first library error in the chain; anything else is `internal`.
fn error_class(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<affect_mtl::Error>())
        .map_or("internal", affect_mtl::Error::class)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&e));
            ExitCode::from(1)
        }
    }
}
