//! Synthetic stand-in corpus.
//!
//! Every frame has a latent expression class and a latent (valence, arousal). Class
//! frequencies follow [`CLASS_PRIOR`] and VA is drawn around the class mean in
//! [`CLASS_VA_MEAN`] with standard deviation 0.15, so the two tasks are correlated.
//! Images are
//!
//! `0.5 + 0.1·(s·(T_class + 1.5·(valence·P_v + arousal·P_a)) + nuisance + white)`
//!
//! where `s` is `class_signal_strength`, `T_*` and `P_*` are fixed smooth,
//! left-right symmetric unit-RMS fields (so flips preserve labels), `nuisance` is a
//! random per-frame combination of six further smooth fields with unit RMS overall,
//! and `white` is unit Gaussian pixel noise.
//!
//! With `temporal_dependence` the class switches with probability 1/40 per frame, the
//! VA mean follows the class mean with an exponential lag and VA deviations follow an
//! AR(1) process, so neighbouring frames share information. Without it every frame is
//! drawn independently.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{load_manifest, write_manifest, AnnotationRecord, Image, ImageStore, Part};
use crate::error::{ensure, Error, Result};
use crate::losses::{ExprLabel, VaLabel, NUM_EXPR_CLASSES};
use crate::par;
use crate::seed::SeedStream;

pub const CLASS_PRIOR: [f64; NUM_EXPR_CLASSES] = [0.30, 0.08, 0.05, 0.06, 0.25, 0.12, 0.14];

/// (valence, arousal) centre per class: neutral, anger, disgust, fear, happiness,
/// sadness, surprise.
pub const CLASS_VA_MEAN: [(f64, f64); NUM_EXPR_CLASSES] = [
    (0.0, 0.0),
    (-0.6, 0.6),
    (-0.6, 0.1),
    (-0.25, 0.8),
    (0.65, 0.35),
    (-0.55, -0.5),
    (0.3, 0.7),
];

const VA_STD: f64 = 0.15;
const VA_PATTERN_GAIN: f64 = 1.5;
const PIXEL_SCALE: f64 = 0.1;
const NUISANCE_FIELDS: usize = 6;
const FIELD_GRID: usize = 8;
const SWITCH_PROB: f64 = 1.0 / 40.0;
const VA_LAG: f64 = 0.15;
const VA_AR: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Training videos per dataset part.
    pub videos_per_part: usize,
    /// Held-out validation videos per dataset part.
    pub val_videos_per_part: usize,
    pub frames_per_video: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub class_signal_strength: f64,
    /// Fraction of MIXED_EXPR / MIXED_VA training videos labelled for both tasks.
    pub shared_fraction: f64,
    pub temporal_dependence: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos_per_part: 20,
            val_videos_per_part: 4,
            frames_per_video: 120,
            image_height: 32,
            image_width: 32,
            class_signal_strength: 3.0,
            shared_fraction: 0.0,
            temporal_dependence: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.videos_per_part >= 1, "videos_per_part must be positive");
        ensure!(self.val_videos_per_part >= 1, "val_videos_per_part must be positive");
        ensure!(self.frames_per_video >= 2, "frames_per_video must be at least 2");
        ensure!(
            self.image_height >= 4 && self.image_width >= 4,
            "image size must be at least 4x4, got {}x{}",
            self.image_height,
            self.image_width
        );
        ensure!(
            self.class_signal_strength.is_finite() && self.class_signal_strength >= 0.0,
            "class_signal_strength must be finite and non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.shared_fraction),
            "shared_fraction must lie in [0, 1], got {}",
            self.shared_fraction
        );
        Ok(())
    }
}

/// Records plus pixels of a corpus. Validation records carry both labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    pub images: ImageStore,
}

impl Corpus {
    pub const TRAIN_MANIFEST: &'static str = "train.csv";
    pub const VAL_MANIFEST: &'static str = "val.csv";
    pub const IMAGES: &'static str = "images.bin";

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, recs) in [(Self::TRAIN_MANIFEST, &self.train), (Self::VAL_MANIFEST, &self.val)] {
            let path = dir.join(name);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_manifest(std::io::BufWriter::new(f), recs)?;
        }
        self.images.save(dir.join(Self::IMAGES))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Corpus {
            train: load_manifest(dir.join(Self::TRAIN_MANIFEST))?,
            val: load_manifest(dir.join(Self::VAL_MANIFEST))?,
            images: ImageStore::load(dir.join(Self::IMAGES))?,
        })
    }
}

struct Fields {
    class: Vec<Vec<f64>>,
    valence: Vec<f64>,
    arousal: Vec<f64>,
    nuisance: Vec<Vec<f64>>,
}

/// Smooth field: Gaussian values on a coarse grid, bilinearly upsampled, mirrored
/// left-right, then centred and scaled to unit RMS.
fn smooth_field<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let g = FIELD_GRID;
    let grid: Vec<f64> = (0..g * g).map(|_| StandardNormal.sample(rng)).collect();
    let sample = |y: usize, x: usize| {
        let fy = y as f64 / (h - 1).max(1) as f64 * (g - 1) as f64;
        let fx = x as f64 / (w - 1).max(1) as f64 * (g - 1) as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| grid[yy * g + xx];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
    };
    let mut f: Vec<f64> = (0..h * w).map(|i| sample(i / w, i % w)).collect();
    for y in 0..h {
        for x in 0..w / 2 {
            let (a, b) = (y * w + x, y * w + w - 1 - x);
            let m = 0.5 * (f[a] + f[b]);
            f[a] = m;
            f[b] = m;
        }
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= mean);
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v /= rms);
    f
}

fn make_fields(spec: &SynthSpec, root: SeedStream) -> Fields {
    let mut rng = root.child("fields").rng();
    let (h, w) = (spec.image_height, spec.image_width);
    Fields {
        class: (0..NUM_EXPR_CLASSES).map(|_| smooth_field(h, w, &mut rng)).collect(),
        valence: smooth_field(h, w, &mut rng),
        arousal: smooth_field(h, w, &mut rng),
        nuisance: (0..NUISANCE_FIELDS).map(|_| smooth_field(h, w, &mut rng)).collect(),
    }
}

struct LatentFrame {
    class: usize,
    valence: f64,
    arousal: f64,
}

fn latent_track<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<LatentFrame> {
    let prior = WeightedIndex::new(CLASS_PRIOR).expect("valid prior");
    let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let mut out = Vec::with_capacity(spec.frames_per_video);
    if !spec.temporal_dependence {
        for _ in 0..spec.frames_per_video {
            let class = prior.sample(rng);
            let (mv, ma) = CLASS_VA_MEAN[class];
            let valence = (mv + VA_STD * normal(rng)).clamp(-1.0, 1.0);
            let arousal = (ma + VA_STD * normal(rng)).clamp(-1.0, 1.0);
            out.push(LatentFrame { class, valence, arousal });
        }
        return out;
    }
    let mut class = prior.sample(rng);
    let (mut mv, mut ma) = CLASS_VA_MEAN[class];
    let (mut dv, mut da) = (VA_STD * normal(rng), VA_STD * normal(rng));
    let innovation = VA_STD * (1.0 - VA_AR * VA_AR).sqrt();
    for t in 0..spec.frames_per_video {
        if t > 0 {
            if rng.random_bool(SWITCH_PROB) {
                class = prior.sample(rng);
            }
            let (tv, ta) = CLASS_VA_MEAN[class];
            mv += VA_LAG * (tv - mv);
            ma += VA_LAG * (ta - ma);
            dv = VA_AR * dv + innovation * normal(rng);
            da = VA_AR * da + innovation * normal(rng);
        }
        out.push(LatentFrame {
            class,
            valence: (mv + dv).clamp(-1.0, 1.0),
            arousal: (ma + da).clamp(-1.0, 1.0),
        });
    }
    out
}

fn render<R: Rng>(spec: &SynthSpec, fields: &Fields, f: &LatentFrame, rng: &mut R) -> Image {
    let s = spec.class_signal_strength;
    let coeffs: Vec<f64> = (0..NUISANCE_FIELDS)
        .map(|_| StandardNormal.sample(rng))
        .map(|c: f64| c / (NUISANCE_FIELDS as f64).sqrt())
        .collect();
    let n = spec.image_height * spec.image_width;
    let pixels = (0..n)
        .map(|i| {
            let signal = fields.class[f.class][i]
                + VA_PATTERN_GAIN * (f.valence * fields.valence[i] + f.arousal * fields.arousal[i]);
            let nuisance: f64 = coeffs.iter().zip(&fields.nuisance).map(|(c, fld)| c * fld[i]).sum();
            let white: f64 = StandardNormal.sample(rng);
            (0.5 + PIXEL_SCALE * (s * signal + nuisance + white)) as f32
        })
        .collect();
    Image::new(spec.image_height, spec.image_width, pixels)
}

struct VideoJob {
    split: &'static str,
    part: Part,
    video: usize,
    shared: bool,
}

/// Generates a corpus deterministically from `spec.seed`.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed).child("synth");
    let fields = make_fields(spec, root);

    let mut jobs = Vec::new();
    for part in Part::ALL {
        let mut shared = vec![false; spec.videos_per_part];
        if part != Part::ExprVa {
            let k = (spec.shared_fraction * spec.videos_per_part as f64).round() as usize;
            let mut order: Vec<usize> = (0..spec.videos_per_part).collect();
            order.shuffle(&mut root.child("shared").index(part.index() as u64).rng());
            order.iter().take(k).for_each(|&v| shared[v] = true);
        }
        for (video, s) in shared.into_iter().enumerate() {
            jobs.push(VideoJob { split: "train", part, video, shared: s });
        }
        for video in 0..spec.val_videos_per_part {
            jobs.push(VideoJob { split: "val", part, video, shared: true });
        }
    }

    let videos = par::map(&jobs, |job| {
        let stream = root.child(job.split).index(job.part.index() as u64).index(job.video as u64);
        let mut rng = stream.rng();
        let track = latent_track(spec, &mut rng);
        let video_id = format!("{}_p{}_v{:03}", job.split, job.part.index() + 1, job.video);
        track
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let img = render(spec, &fields, f, &mut rng);
                let expr = ExprLabel::new(f.class).expect("class in range");
                let va = VaLabel::new(f.valence, f.arousal).expect("clamped");
                let (expr, va) = match (job.part, job.shared) {
                    (Part::ExprVa, _) | (_, true) => (Some(expr), Some(va)),
                    (Part::MixedExpr, false) => (Some(expr), None),
                    (Part::MixedVa, false) => (None, Some(va)),
                };
                let rec = AnnotationRecord {
                    frame_ref: format!("{video_id}_f{t:04}"),
                    part: job.part,
                    expr,
                    va,
                    video_id: video_id.clone(),
                    frame_index: t as u64,
                };
                (rec, img)
            })
            .collect::<Vec<_>>()
    });

    let mut images = ImageStore::new(spec.image_height, spec.image_width);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (job, frames) in jobs.iter().zip(videos) {
        for (rec, img) in frames {
            images.push(&rec.frame_ref, &img)?;
            if job.split == "train" { train.push(rec) } else { val.push(rec) }
        }
    }
    Ok(Corpus { train, val, images })
}

/// Accuracy of a nearest-class-mean classifier on raw pixels: class means from the
/// expression-labelled `train` frames, evaluated on expression-labelled `test` frames.
pub fn nearest_class_mean_accuracy(
    train: &[AnnotationRecord],
    test: &[AnnotationRecord],
    images: &ImageStore,
) -> Result<f64> {
    let n = images.height * images.width;
    let mut sums = vec![vec![0.0f64; n]; NUM_EXPR_CLASSES];
    let mut counts = [0usize; NUM_EXPR_CLASSES];
    for r in train {
        if let Some(e) = r.expr {
            let img = images.get(&r.frame_ref)?;
            counts[e.class_index()] += 1;
            sums[e.class_index()].iter_mut().zip(&img.pixels).for_each(|(s, p)| *s += *p as f64);
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for r in test {
        let Some(e) = r.expr else { continue };
        let img = images.get(&r.frame_ref)?;
        let best = (0..NUM_EXPR_CLASSES)
            .filter(|c| counts[*c] > 0)
            .min_by(|a, b| {
                let d = |c: usize| sums[c].iter().zip(&img.pixels).map(|(m, p)| (m - *p as f64).powi(2)).sum::<f64>();
                d(*a).partial_cmp(&d(*b)).unwrap()
            })
            .unwrap_or(0);
        hits += (best == e.class_index()) as usize;
        total += 1;
    }
    ensure!(total > 0, "no expression-labelled test frames");
    Ok(hits as f64 / total as f64)
}
