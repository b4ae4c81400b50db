use std::collections::BTreeMap;

use super::{AnnotationRecord, Labelled, Part};
use crate::error::{ensure, Result};
use crate::losses::InstanceLabels;

pub const DEFAULT_SEQ_LEN: usize = 32;

/// A window of consecutive frames from one video. Windows that run past the end of
/// the video are padded by repeating the last frame; padded positions are flagged and
/// carry no loss or metric weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub video_id: String,
    pub part: Part,
    pub start_index: u64,
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<AnnotationRecord>,
    pub padded: Vec<bool>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn real_frames(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }
}

impl Labelled for SequenceSample {
    fn instance_labels(&self) -> Vec<(usize, InstanceLabels)> {
        self.labels
            .iter()
            .zip(&self.padded)
            .enumerate()
            .filter(|(_, (_, pad))| !**pad)
            .map(|(i, (r, _))| (i, r.labels()))
            .collect()
    }
}

/// Groups frames by video, orders them by frame index and cuts windows of `seq_len`
/// starting every `stride` frames. Windows continue until the video's last frame is
/// covered; the final short window is padded.
pub fn build_sequence_dataset(
    features: &[Vec<f32>],
    records: &[AnnotationRecord],
    seq_len: usize,
    stride: usize,
) -> Result<Vec<SequenceSample>> {
    ensure!(seq_len >= 1 && stride >= 1, "sequence length and stride must be positive");
    ensure!(
        features.len() == records.len(),
        "{} feature rows for {} records",
        features.len(),
        records.len()
    );
    let mut videos: BTreeMap<(&str, Part), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        videos.entry((r.video_id.as_str(), r.part)).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((video_id, part), mut frames) in videos {
        if frames.is_empty() {
            log::warn!("video {video_id} has no frames; skipped");
            continue;
        }
        frames.sort_by_key(|&i| (records[i].frame_index, records[i].frame_ref.clone()));
        let n = frames.len();
        let mut start = 0;
        loop {
            let mut sample = SequenceSample {
                video_id: video_id.to_string(),
                part,
                start_index: records[frames[start]].frame_index,
                features: Vec::with_capacity(seq_len),
                labels: Vec::with_capacity(seq_len),
                padded: Vec::with_capacity(seq_len),
            };
            for k in 0..seq_len {
                let pos = start + k;
                let i = frames[pos.min(n - 1)];
                sample.features.push(features[i].clone());
                sample.labels.push(records[i].clone());
                sample.padded.push(pos >= n);
            }
            out.push(sample);
            if start + seq_len >= n {
                break;
            }
            start += stride;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ExprLabel;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn video(id: &str, frames: usize) -> (Vec<Vec<f32>>, Vec<AnnotationRecord>) {
        let recs: Vec<_> = (0..frames)
            .map(|f| AnnotationRecord {
                frame_ref: format!("{id}/{f}"),
                part: Part::MixedExpr,
                expr: Some(ExprLabel::new(f % 7).unwrap()),
                va: None,
                video_id: id.into(),
                frame_index: f as u64,
            })
            .collect();
        let feats = (0..frames).map(|f| vec![f as f32, 1.0]).collect();
        (feats, recs)
    }

    #[test]
    fn sixty_four_frames_make_two_windows() {
        let (f, r) = video("a", 64);
        let seqs = build_sequence_dataset(&f, &r, 32, 32).unwrap();
        assert_eq!(seqs.len(), 2);
        assert!(seqs.iter().all(|s| s.real_frames() == 32));
    }

    #[test]
    fn short_tail_is_padded() {
        let (f, r) = video("a", 40);
        let seqs = build_sequence_dataset(&f, &r, 32, 32).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].start_index, 32);
        assert_eq!(seqs[1].padded.iter().filter(|p| **p).count(), 24);
        assert_eq!(seqs[1].features[31], vec![39.0, 1.0]);
        assert_eq!(seqs[1].instance_labels().len(), 8);
    }

    #[test]
    fn input_order_does_not_matter() {
        let (mut f, mut r) = video("a", 45);
        let (f2, r2) = video("b", 10);
        f.extend(f2);
        r.extend(r2);
        let want = build_sequence_dataset(&f, &r, 32, 32).unwrap();
        let mut order: Vec<usize> = (0..f.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let fs: Vec<_> = order.iter().map(|&i| f[i].clone()).collect();
        let rs: Vec<_> = order.iter().map(|&i| r[i].clone()).collect();
        assert_eq!(build_sequence_dataset(&fs, &rs, 32, 32).unwrap(), want);
    }

    #[test]
    fn default_stride_partitions_real_frames() {
        for n in [1, 31, 32, 33, 95, 96, 100] {
            let (f, r) = video("v", n);
            let seqs = build_sequence_dataset(&f, &r, 32, 32).unwrap();
            let mut seen: Vec<u64> = seqs
                .iter()
                .flat_map(|s| s.labels.iter().zip(&s.padded).filter(|(_, p)| !**p).map(|(l, _)| l.frame_index))
                .collect();
            seen.sort();
            assert_eq!(seen, (0..n as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn overlapping_stride() {
        let (f, r) = video("v", 40);
        let seqs = build_sequence_dataset(&f, &r, 32, 16).unwrap();
        assert_eq!(seqs.iter().map(|s| s.start_index).collect::<Vec<_>>(), vec![0, 16]);
    }
}
