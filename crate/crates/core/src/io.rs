//! File formats.
//!
//! CEF ("compact embedding file"), all integers and floats little-endian:
//!
//! | offset | size     | field                        |
//! |--------|----------|------------------------------|
//! | 0      | 4        | magic `b"CEF1"`              |
//! | 4      | 4        | `u32` row count `n`          |
//! | 8      | 4        | `u32` dimension `d`          |
//! | 12     | 1        | `u8` has_labels (0 or 1)     |
//! | 13     | 4·n·d    | `f32` rows, row-major        |
//! | ...    | 4·n      | `u32` labels iff has_labels  |
//!
//! The CSV fallback has a header row, `d` float columns and an optional final
//! column named `label`.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::data::{EmbeddingSet, PredictionSet};
use crate::error::{Error, Result};

pub const CEF_MAGIC: &[u8; 4] = b"CEF1";
pub const CEF_HEADER_LEN: usize = 13;

/// Loads a CEF file, or a CSV file when the path ends in `.csv` and the
/// content does not start with the CEF magic.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv && !bytes.starts_with(CEF_MAGIC) {
        return decode_csv(&bytes);
    }
    decode_cef(&bytes)
}

/// Writes `set` as CEF.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cef(set)).map_err(|e| Error::io(path, e))
}

pub fn encode_cef(set: &EmbeddingSet) -> Vec<u8> {
    let labels = set.labels();
    let mut out = Vec::with_capacity(
        CEF_HEADER_LEN + 4 * set.count() * set.dim() + labels.map_or(0, |l| 4 * l.len()),
    );
    out.extend_from_slice(CEF_MAGIC);
    out.extend_from_slice(&(set.count() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.push(u8::from(labels.is_some()));
    for &x in set.vectors().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_cef(bytes: &[u8]) -> Result<EmbeddingSet> {
    let take = |offset: usize, needed: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + needed).ok_or(Error::Truncated {
            offset,
            needed,
            len: bytes.len(),
        })
    };
    let magic = take(0, 4)?;
    if magic != CEF_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic { found });
    }
    let read_u32 = |offset: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(offset, 4)?.try_into().unwrap()))
    };
    let n = read_u32(4)? as usize;
    let d = read_u32(8)? as usize;
    let has_labels = match take(12, 1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::BadLabelFlag(other)),
    };

    let payload = take(CEF_HEADER_LEN, 4 * n * d)?;
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = if has_labels {
        let raw = take(CEF_HEADER_LEN + 4 * n * d, 4 * n)?;
        Some(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    } else {
        None
    };
    let vectors = Array2::from_shape_vec((n, d), floats).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingSet::new(vectors, labels)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

pub fn decode_csv(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let labeled = headers.iter().last().is_some_and(|h| h.trim() == "label");
    let dim = headers.len() - usize::from(labeled);
    if dim == 0 {
        return Err(Error::Csv("no feature columns".into()));
    }
    let mut floats = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != headers.len() {
            return Err(Error::Csv(format!("row {row}: expected {} fields", headers.len())));
        }
        for field in record.iter().take(dim) {
            let x: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::Csv(format!("row {row}: bad float {field:?}")))?;
            floats.push(x);
        }
        if labeled {
            let raw = record[dim].trim();
            let label: u32 = raw.parse().map_err(|_| Error::LabelOutOfRange {
                row,
                value: raw.to_string(),
            })?;
            labels.push(label);
        }
        n += 1;
    }
    let vectors = Array2::from_shape_vec((n, dim), floats).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingSet::new(vectors, labeled.then_some(labels))
}

pub fn save_embeddings_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..set.dim()).map(|j| format!("x{j}")).collect();
    if set.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..set.count() {
        let mut rec: Vec<String> = set.row(i).iter().map(|x| x.to_string()).collect();
        if let Some(labels) = set.labels() {
            rec.push(labels[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `sample_index,class_id,confidence`
pub fn write_predictions(pred: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sample_index", "class_id", "confidence"]).map_err(csv_err)?;
    for (i, (c, p)) in pred.assignments.iter().zip(&pred.confidences).enumerate() {
        w.write_record(&[i.to_string(), c.to_string(), p.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let rows = read_indexed_csv(path.as_ref(), 3)?;
    let mut pred = PredictionSet { assignments: Vec::new(), confidences: Vec::new() };
    for (row, fields) in rows.iter().enumerate() {
        pred.assignments.push(parse_label(&fields[0], row)?);
        pred.confidences.push(
            fields[1]
                .parse()
                .map_err(|_| Error::Csv(format!("row {row}: bad confidence {:?}", fields[1])))?,
        );
    }
    Ok(pred)
}

/// `sample_index,label`
pub fn write_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sample_index", "label"]).map_err(csv_err)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record(&[i.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    read_indexed_csv(path.as_ref(), 2)?
        .iter()
        .enumerate()
        .map(|(row, f)| parse_label(&f[0], row))
        .collect()
}

fn parse_label(raw: &str, row: usize) -> Result<u32> {
    raw.parse().map_err(|_| Error::LabelOutOfRange { row, value: raw.to_string() })
}

/// Reads a CSV whose first column is a dense `0..n` sample index and returns
/// the remaining columns.
fn read_indexed_csv(path: &Path, width: usize) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != width {
            return Err(Error::Csv(format!("row {row}: expected {width} fields")));
        }
        if record[0].trim().parse::<usize>().ok() != Some(row) {
            return Err(Error::Csv(format!("row {row}: sample_index must equal {row}")));
        }
        out.push(record.iter().skip(1).map(|s| s.trim().to_string()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_round_trip() {
        let set = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], None).unwrap();
        let back = decode_cef(&encode_cef(&set)).unwrap();
        assert_eq!(back.count(), 2);
        assert_eq!(back.dim(), 2);
        assert!(back.labels().is_none());
        assert_eq!(back, set);
    }

    #[test]
    fn renormalizes_on_load() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CEF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&3.0f32.to_le_bytes());
        bytes.extend_from_slice(&4.0f32.to_le_bytes());
        let set = decode_cef(&bytes).unwrap();
        assert_eq!(set.row(0).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = decode_cef(b"XXXX\0\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn reports_truncation_offset() {
        let set = EmbeddingSet::new(array![[1.0f32, 0.0], [0.0, 1.0]], Some(vec![0, 1])).unwrap();
        let bytes = encode_cef(&set);
        let err = decode_cef(&bytes[..bytes.len() - 2]).unwrap_err();
        match err {
            Error::Truncated { offset, needed, .. } => {
                assert_eq!(offset, CEF_HEADER_LEN + 16);
                assert_eq!(needed, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_row_is_rejected_with_index() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CEF1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(decode_cef(&bytes), Err(Error::ZeroRow { row: 1 })));
    }

    #[test]
    fn labels_set_header_flag() {
        let set = EmbeddingSet::new(array![[1.0f32, 0.0]], Some(vec![7])).unwrap();
        let bytes = encode_cef(&set);
        assert_eq!(bytes[12], 1);
        assert_eq!(&bytes[bytes.len() - 4..], &7u32.to_le_bytes());
    }

    #[test]
    fn empty_set_is_header_only() {
        let set = EmbeddingSet::empty(4, false).unwrap();
        let bytes = encode_cef(&set);
        assert_eq!(bytes.len(), CEF_HEADER_LEN);
        let back = decode_cef(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn csv_with_labels() {
        let text = b"a,b,label\n3,4,2\n0,1,0\n";
        let set = decode_csv(text).unwrap();
        assert_eq!(set.labels(), Some(&[2, 0][..]));
        assert_eq!(set.row(0).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn csv_negative_label_names_row() {
        let err = decode_csv(b"a,b,label\n1,0,0\n0,1,-1\n").unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 1, .. }));
        let err = decode_csv(b"a,label\n1,4294967296\n").unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 0, .. }));
    }

    #[test]
    fn csv_without_labels() {
        let set = decode_csv(b"x0,x1\n1,0\n").unwrap();
        assert!(set.labels().is_none());
        assert_eq!(set.dim(), 2);
    }
}
