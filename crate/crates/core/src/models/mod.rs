//! Frame-level and temporal networks, optimiser, checkpoints and feature extraction.

mod checkpoint;
mod frame;
pub mod nn;
mod optim;
mod temporal;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ModelSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use frame::{build_frame_model, frame_forward, Backbone, FrameModel, FrameModelSpec, FrameTape};
pub use optim::{Adam, AdamConfig, AdamState};
pub use temporal::{build_temporal_model, temporal_forward, SequenceTape, TemporalModel, TemporalModelSpec};

use crate::datakit::{AnnotationRecord, FeatureStore, ImageStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Flat parameter vector tagged with the role it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub role: Role,
    pub values: Vec<f32>,
}

const EXTRACT_CHUNK: usize = 256;

/// One penultimate-feature row per record, in record order.
pub fn extract_features(model: &FrameModel, records: &[AnnotationRecord], images: &ImageStore) -> Result<FeatureStore> {
    let mut store = FeatureStore::new(model.spec.feature_dim);
    for chunk in records.chunks(EXTRACT_CHUNK) {
        let imgs = chunk.iter().map(|r| images.get(&r.frame_ref)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = imgs.iter().collect();
        let (_, feats) = model.forward(&refs)?;
        for (r, f) in chunk.iter().zip(&feats) {
            store.push(&r.video_id, r.frame_index, f)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{synthesize_corpus, SynthSpec};

    #[test]
    fn extracted_rows_match_direct_forward() {
        let corpus = synthesize_corpus(&SynthSpec {
            videos_per_part: 2,
            val_videos_per_part: 1,
            frames_per_video: 17,
            image_height: 16,
            image_width: 16,
            ..Default::default()
        })
        .unwrap();
        let records: Vec<_> = corpus.train.iter().take(100).cloned().collect();
        let spec = FrameModelSpec { image_height: 16, image_width: 16, ..Default::default() };
        let m = build_frame_model(&spec, 2).unwrap();
        let store = extract_features(&m, &records, &corpus.images).unwrap();
        assert_eq!(store.len(), 100);
        assert_eq!(store.feature_dim, 32);
        for i in [0, 57, 99] {
            let img = corpus.images.get(&records[i].frame_ref).unwrap();
            let (_, f) = frame_forward(&m, &[img]).unwrap();
            for (a, b) in f[0].iter().zip(store.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        let again = extract_features(&m, &records, &corpus.images).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        store.write_to(&mut x).unwrap();
        again.write_to(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn missing_frame_is_named() {
        let spec = FrameModelSpec { image_height: 16, image_width: 16, ..Default::default() };
        let m = build_frame_model(&spec, 2).unwrap();
        let images = ImageStore::new(16, 16);
        let rec = AnnotationRecord {
            frame_ref: "ghost_frame".into(),
            part: crate::datakit::Part::MixedExpr,
            expr: Some(crate::losses::ExprLabel::new(1).unwrap()),
            va: None,
            video_id: "v".into(),
            frame_index: 0,
        };
        let err = extract_features(&m, &[rec], &images).unwrap_err();
        assert!(err.to_string().contains("ghost_frame"));
    }
}
