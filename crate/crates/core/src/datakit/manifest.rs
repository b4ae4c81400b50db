use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{AnnotationRecord, Part};
use crate::error::{Error, Result};
use crate::losses::{ExprLabel, VaLabel};

pub const MANIFEST_COLUMNS: [&str; 7] =
    ["frame_ref", "part", "expr", "valence", "arousal", "video_id", "frame_index"];

fn is_na(s: &str) -> bool {
    let s = s.trim();
    s.is_empty() || s.eq_ignore_ascii_case("NA")
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file, &path.display().to_string())
}

/// Parses a manifest. `source` names the input in error messages. Rows are numbered
/// from 1, excluding the header.
pub fn read_manifest<R: Read>(reader: R, source: &str) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 7];
    for (slot, name) in col.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: source.to_string(),
            message: format!("missing required column `{name}`"),
        })?;
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |k: usize| row.get(col[k]).unwrap_or("");
        let bad = |message: String| Error::Validation { row: row_no, message };

        let part: Part = field(1).parse().map_err(|e: Error| bad(e.to_string()))?;
        let expr = if is_na(field(2)) {
            None
        } else {
            let k: usize = field(2)
                .parse()
                .map_err(|_| bad(format!("expr `{}` is neither 0-6 nor NA", field(2))))?;
            Some(ExprLabel::new(k).map_err(|e| bad(e.to_string()))?)
        };
        let va = match (is_na(field(3)), is_na(field(4))) {
            (true, true) => None,
            (false, false) => {
                let parse = |s: &str, what: &str| {
                    s.parse::<f64>().map_err(|_| bad(format!("{what} `{s}` is not a number")))
                };
                let (v, a) = (parse(field(3), "valence")?, parse(field(4), "arousal")?);
                let (label, clamped) = VaLabel::clamped(v, a).map_err(|e| bad(e.to_string()))?;
                if clamped {
                    log::warn!("{source} row {row_no}: valence/arousal ({v}, {a}) clamped into [-1, 1]");
                }
                Some(label)
            }
            _ => return Err(bad("valence and arousal must both be given or both be NA".into())),
        };
        let frame_index: u64 = field(6)
            .parse()
            .map_err(|_| bad(format!("frame_index `{}` is not a non-negative integer", field(6))))?;
        let rec = AnnotationRecord {
            frame_ref: field(0).to_string(),
            part,
            expr,
            va,
            video_id: field(5).to_string(),
            frame_index,
        };
        rec.validate().map_err(bad)?;
        records.push(rec);
    }
    Ok(records)
}

/// Writes records in manifest format. Floats use the shortest representation that
/// parses back to the same value, so write → read → write is byte-stable.
pub fn write_manifest<W: Write>(writer: W, records: &[AnnotationRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(MANIFEST_COLUMNS)?;
    for r in records {
        let expr = r.expr.map_or("NA".to_string(), |e| e.class_index().to_string());
        let (v, a) = r
            .va
            .map_or(("NA".to_string(), "NA".to_string()), |l| (l.valence().to_string(), l.arousal().to_string()));
        wtr.write_record([
            r.frame_ref.as_str(),
            r.part.as_str(),
            &expr,
            &v,
            &a,
            &r.video_id,
            &r.frame_index.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "frame_ref,part,expr,valence,arousal,video_id,frame_index\n";

    fn parse(body: &str) -> Result<Vec<AnnotationRecord>> {
        read_manifest(format!("{HEADER}{body}").as_bytes(), "test.csv")
    }

    #[test]
    fn expr_only_row() {
        let r = parse("img1.png,MIXED_EXPR,3,NA,NA,v1,0\n").unwrap();
        assert_eq!(r[0].expr.unwrap().class_index(), 3);
        assert!(r[0].va.is_none());
        assert_eq!(r[0].video_id, "v1");
    }

    #[test]
    fn shared_annotation_row() {
        let r = parse("img2.png,MIXED_EXPR,2,0.5,-0.25,v9,4\n").unwrap();
        assert_eq!(r[0].expr.unwrap().class_index(), 2);
        let va = r[0].va.unwrap();
        assert_eq!((va.valence(), va.arousal()), (0.5, -0.25));
        assert_eq!(r[0].frame_index, 4);
        assert!(r[0].is_shared());
    }

    #[test]
    fn va_part_without_va_is_rejected() {
        match parse("img1.png,MIXED_EXPR,1,NA,NA,v1,0\nimg3.png,MIXED_VA,NA,NA,NA,v2,0\n") {
            Err(Error::Validation { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let err = read_manifest("frame_ref,part,expr,valence,video_id,frame_index\n".as_bytes(), "m.csv")
            .unwrap_err();
        assert!(err.to_string().contains("`arousal`"), "{err}");
        assert_eq!(err.class(), "parse");
    }

    #[test]
    fn out_of_range_va_is_clamped() {
        let r = parse("a,MIXED_VA,NA,1.02,-1.5,v,0\n").unwrap();
        let va = r[0].va.unwrap();
        assert_eq!((va.valence(), va.arousal()), (1.0, -1.0));
    }

    #[test]
    fn half_missing_va_is_rejected() {
        assert!(parse("a,MIXED_VA,NA,0.1,NA,v,0\n").is_err());
        assert!(parse("a,MIXED_EXPR,9,NA,NA,v,0\n").is_err());
        assert!(parse("a,OTHER,1,NA,NA,v,0\n").is_err());
        assert!(parse("a,MIXED_EXPR,1,NA,NA,v,-1\n").is_err());
    }

    #[test]
    fn write_read_write_is_stable() {
        let body = "a,MIXED_EXPR,3,NA,NA,v1,0\nb,MIXED_VA,NA,0.123456789012345,-0.3,v2,7\nc,EXPR_VA,6,1,-1,v3,2\n";
        let recs = parse(body).unwrap();
        let mut first = Vec::new();
        write_manifest(&mut first, &recs).unwrap();
        let again = read_manifest(first.as_slice(), "x").unwrap();
        assert_eq!(again, recs);
        let mut second = Vec::new();
        write_manifest(&mut second, &again).unwrap();
        assert_eq!(first, second);
    }
}
