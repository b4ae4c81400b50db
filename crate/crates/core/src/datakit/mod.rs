//! Dataset model and data plumbing: annotation records and their CSV manifest,
//! class/bin balancing, three-part batch sampling, synthetic corpora, 32-frame
//! sequence windows, augmentation, and the binary image/feature stores.

mod augment;
mod balance;
mod manifest;
mod predictions;
mod sampler;
mod sequence;
mod store;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::losses::{ExprLabel, InstanceLabels, TaskId, VaLabel};

pub use augment::{augment, augment_image, augment_sequence, AugmentConfig, AugmentParams, Image};
pub use balance::{balance_parts, key_counts, max_min_ratio, BalanceConfig};
pub use manifest::{load_manifest, read_manifest, write_manifest, MANIFEST_COLUMNS};
pub use predictions::{
    join_predictions, load_predictions, read_predictions, write_predictions, PredictionRow, PREDICTION_COLUMNS,
};
pub use sampler::{sample_batch_triplet, BatchTriplet, TripletSampler};
pub use sequence::{build_sequence_dataset, SequenceSample, DEFAULT_SEQ_LEN};
pub use store::{FeatureStore, ImageStore, FEATURE_MAGIC, IMAGE_MAGIC, STORE_VERSION};
pub use synth::{nearest_class_mean_accuracy, synthesize_corpus, Corpus, SynthSpec, CLASS_PRIOR, CLASS_VA_MEAN};

/// The three dataset parts, one per training task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "MIXED_EXPR")]
    MixedExpr,
    #[serde(rename = "MIXED_VA")]
    MixedVa,
    #[serde(rename = "EXPR_VA")]
    ExprVa,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::MixedExpr, Part::MixedVa, Part::ExprVa];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn task(self) -> TaskId {
        TaskId::ALL[self.index()]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Part::MixedExpr => "MIXED_EXPR",
            Part::MixedVa => "MIXED_VA",
            Part::ExprVa => "EXPR_VA",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "MIXED_EXPR" => Ok(Part::MixedExpr),
            "MIXED_VA" => Ok(Part::MixedVa),
            "EXPR_VA" => Ok(Part::ExprVa),
            other => Err(invalid!("unknown part `{other}`")),
        }
    }
}

/// One annotated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub frame_ref: String,
    pub part: Part,
    pub expr: Option<ExprLabel>,
    pub va: Option<VaLabel>,
    pub video_id: String,
    pub frame_index: u64,
}

impl AnnotationRecord {
    /// Checks the part invariants: MIXED_EXPR needs an expression label, MIXED_VA
    /// needs valence/arousal, EXPR_VA needs both.
    pub fn validate(&self) -> Result<(), String> {
        let need_expr = matches!(self.part, Part::MixedExpr | Part::ExprVa);
        let need_va = matches!(self.part, Part::MixedVa | Part::ExprVa);
        if need_expr && self.expr.is_none() {
            return Err(format!("{} record `{}` has no expression label", self.part, self.frame_ref));
        }
        if need_va && self.va.is_none() {
            return Err(format!("{} record `{}` has no valence/arousal label", self.part, self.frame_ref));
        }
        Ok(())
    }

    pub fn labels(&self) -> InstanceLabels {
        InstanceLabels { expr: self.expr, va: self.va }
    }

    /// True for single-task records that also carry the other task's label.
    pub fn is_shared(&self) -> bool {
        self.part != Part::ExprVa && self.expr.is_some() && self.va.is_some()
    }
}

/// Anything that contributes labelled instances to a batch.
pub trait Labelled {
    /// Labels of each loss-bearing instance, in output order, paired with the output
    /// position they belong to.
    fn instance_labels(&self) -> Vec<(usize, InstanceLabels)>;
}

impl Labelled for AnnotationRecord {
    fn instance_labels(&self) -> Vec<(usize, InstanceLabels)> {
        vec![(0, self.labels())]
    }
}

/// Records split by part, in part order.
pub fn split_by_part<T: Clone>(items: &[T], part_of: impl Fn(&T) -> Part) -> [Vec<T>; 3] {
    let mut out: [Vec<T>; 3] = Default::default();
    for it in items {
        out[part_of(it).index()].push(it.clone());
    }
    out
}
