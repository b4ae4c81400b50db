//! Prediction files: CSV with header `frame_ref,expr,valence,arousal`, one row per
//! frame. Joining them with a manifest yields a [`PredictionSet`].

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::AnnotationRecord;
use crate::error::{Error, Result};
use crate::losses::NUM_EXPR_CLASSES;
use crate::metrics::PredictionSet;

pub const PREDICTION_COLUMNS: [&str; 4] = ["frame_ref", "expr", "valence", "arousal"];

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub frame_ref: String,
    pub expr: usize,
    pub valence: f64,
    pub arousal: f64,
}

pub fn write_predictions<W: Write>(writer: W, preds: &PredictionSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(PREDICTION_COLUMNS)?;
    for i in 0..preds.len() {
        let (v, a) = preds.va_pred[i];
        wtr.write_record([preds.frame_ids[i].clone(), preds.expr_pred[i].to_string(), v.to_string(), a.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn read_predictions<R: Read>(reader: R, source: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 4];
    for (k, name) in PREDICTION_COLUMNS.iter().enumerate() {
        col[k] = headers.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Parse {
            path: source.to_string(),
            message: format!("missing column `{name}`"),
        })?;
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let n = i + 1;
        let bad = |what: &str| Error::Validation { row: n, message: format!("bad {what} in {source}") };
        let field = |k: usize| row.get(col[k]).map(str::trim).unwrap_or("");
        let expr: usize = field(1).parse().map_err(|_| bad("expr"))?;
        if expr >= NUM_EXPR_CLASSES {
            return Err(bad("expr"));
        }
        let valence: f64 = field(2).parse().map_err(|_| bad("valence"))?;
        let arousal: f64 = field(3).parse().map_err(|_| bad("arousal"))?;
        if !valence.is_finite() || !arousal.is_finite() {
            return Err(bad("valence/arousal"));
        }
        out.push(PredictionRow { frame_ref: field(0).to_string(), expr, valence, arousal });
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(std::io::BufReader::new(f), &path.display().to_string())
}

/// Pairs every truth record with its prediction, in truth order. A truth frame
/// without a prediction is an error; predictions for unknown frames are ignored.
pub fn join_predictions(rows: &[PredictionRow], truth: &[AnnotationRecord]) -> Result<PredictionSet> {
    let by_ref: HashMap<&str, &PredictionRow> = rows.iter().map(|r| (r.frame_ref.as_str(), r)).collect();
    let mut set = PredictionSet::default();
    for (i, t) in truth.iter().enumerate() {
        let p = by_ref.get(t.frame_ref.as_str()).ok_or_else(|| Error::Validation {
            row: i + 1,
            message: format!("no prediction for frame {}", t.frame_ref),
        })?;
        set.push(t.frame_ref.clone(), t.expr, p.expr, t.va, (p.valence, p.arousal));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::Part;
    use crate::losses::ExprLabel;

    #[test]
    fn roundtrip_and_join() {
        let mut s = PredictionSet::default();
        s.push("a", None, 3, None, (0.1, -0.2));
        s.push("b", None, 6, None, (1.0 / 3.0, 0.5));
        let mut buf = Vec::new();
        write_predictions(&mut buf, &s).unwrap();
        let rows = read_predictions(buf.as_slice(), "p.csv").unwrap();
        assert_eq!(rows[1].valence, 1.0 / 3.0);
        let truth = vec![AnnotationRecord {
            frame_ref: "b".into(),
            part: Part::MixedExpr,
            expr: Some(ExprLabel::new(6).unwrap()),
            va: None,
            video_id: "v".into(),
            frame_index: 0,
        }];
        let joined = join_predictions(&rows, &truth).unwrap();
        assert_eq!(joined.len(), 1);
        assert_eq!(joined.expr_pred[0], 6);
        let missing = join_predictions(&rows[..1], &truth).unwrap_err();
        assert!(missing.to_string().contains("no prediction for frame b"));
    }

    #[test]
    fn bad_rows() {
        let err = read_predictions("frame_ref,expr,valence\na,1,0\n".as_bytes(), "p.csv").unwrap_err();
        assert!(err.to_string().contains("arousal"));
        let err = read_predictions("frame_ref,expr,valence,arousal\na,9,0,0\n".as_bytes(), "p.csv").unwrap_err();
        assert_eq!(err.class(), "validation");
    }
}
