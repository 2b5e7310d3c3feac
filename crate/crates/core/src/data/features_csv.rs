//! Feature CSV: header `label,f0,...,f{d-1}`, optionally preceded by
//! `sample_id,task_id` metadata columns (as written by embedding dumps).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-row metadata carried by embedding dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    pub sample_id: usize,
    pub task_id: usize,
}

pub fn load_feature_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    Ok(read_feature_csv(File::open(path)?)?.0)
}

/// Parses a feature CSV; metadata is returned when its columns are present.
pub fn read_feature_csv(reader: impl Read) -> Result<(LabeledDataset, Option<Vec<RowMeta>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e))?,
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let with_meta = cols.first() == Some(&"sample_id");
    let lead = if with_meta { 2 } else { 0 };
    if with_meta && cols.get(1) != Some(&"task_id") {
        return Err(Error::Parse { line: 1, msg: "expected task_id after sample_id".into() });
    }
    if cols.get(lead) != Some(&"label") {
        return Err(Error::Parse { line: 1, msg: "unknown header: expected a label column".into() });
    }
    let dim = cols.len() - lead - 1;
    if dim == 0 {
        return Err(Error::Parse { line: 1, msg: "no feature columns".into() });
    }
    for (j, name) in cols[lead + 1..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unknown header column {name:?}, expected \"f{j}\""),
            });
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut meta = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_err(0, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, found {}", cols.len(), rec.len()),
            });
        }
        let int = |j: usize| -> Result<usize> {
            rec[j].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {}: {:?} is not a non-negative integer", cols[j], &rec[j]),
            })
        };
        if with_meta {
            meta.push(RowMeta { sample_id: int(0)?, task_id: int(1)? });
        }
        labels.push(int(lead)?);
        for j in lead + 1..cols.len() {
            let v: f64 = rec[j].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {}: {:?} is not a number", cols[j], &rec[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("column {}: non-finite value", cols[j]) });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("feature csv"));
    }
    let ds = LabeledDataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels)?;
    Ok((ds, with_meta.then_some(meta)))
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

/// Writes `data` (with metadata columns when given). Floats use Rust's
/// shortest round-trip formatting, so reading back is exact.
pub fn write_feature_csv(
    writer: impl Write,
    data: &LabeledDataset,
    meta: Option<&[RowMeta]>,
) -> Result<()> {
    if let Some(m) = meta {
        if m.len() != data.len() {
            return Err(Error::mismatch("csv metadata", data.features().shape(), (m.len(), 2)));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = Vec::new();
    if meta.is_some() {
        header.extend(["sample_id".into(), "task_id".into()]);
    }
    header.push("label".into());
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..data.len() {
        row.clear();
        if let Some(m) = meta {
            row.push(m[i].sample_id.to_string());
            row.push(m[i].task_id.to_string());
        }
        let (x, y) = data.sample(i);
        row.push(y.to_string());
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_feature_csv(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    write_feature_csv(File::create(path)?, data, None)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_fixture() {
        let text = "label,f0,f1\n3,0.5,-1\n7,2e-3,4\n";
        let (d, meta) = read_feature_csv(text.as_bytes()).unwrap();
        assert!(meta.is_none());
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[3, 7]);
        assert_eq!(d.features().as_slice(), &[0.5, -1.0, 0.002, 4.0]);
    }

    #[test]
    fn ragged_row_names_its_line() {
        let text = "label,f0,f1\n3,0.5,-1\n7,2e-3\n";
        match read_feature_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_cells_and_headers() {
        assert!(matches!(
            read_feature_csv("label,f0\n1,abc\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_feature_csv("label,f0\n-1,0\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_feature_csv("class,f0\n1,0\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_feature_csv("label,x0\n1,0\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_feature_csv("label,f0\n".as_bytes()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let f = Matrix::from_vec(3, 2, vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, 0.0, -2.5])
            .unwrap();
        let d = LabeledDataset::new(f, vec![0, 4, 4]).unwrap();
        let meta = [
            RowMeta { sample_id: 0, task_id: 1 },
            RowMeta { sample_id: 1, task_id: 2 },
            RowMeta { sample_id: 2, task_id: 2 },
        ];
        for m in [None, Some(&meta[..])] {
            let mut buf = Vec::new();
            write_feature_csv(&mut buf, &d, m).unwrap();
            let (back, back_meta) = read_feature_csv(buf.as_slice()).unwrap();
            assert_eq!(back, d);
            assert_eq!(back_meta.as_deref(), m);
        }
    }
}
