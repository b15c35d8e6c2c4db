//! CSV persistence for datasets.
//!
//! Labeled files start with a `label,f0,f1,...` header, unlabeled ones with
//! `f0,f1,...`. Line numbers in errors are 1-based and count the header.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

/// Loads a dataset. When `num_classes` is given every label must lie below it;
/// otherwise the class count is inferred as `max(label) + 1`.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset<T>> {
    let file = File::open(path.as_ref())?;
    read_csv(file, num_classes)
}

pub fn read_csv<T: Scalar, R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let labeled = header.get(0) == Some("label");
    let width = header.len();
    let dims = if labeled { width - 1 } else { width };
    if dims == 0 {
        return Err(Error::Parse {
            line: 1,
            reason: "header declares no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                line,
                reason: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut fields = record.iter();
        if labeled {
            let cell = fields.next().unwrap_or_default();
            let label: usize = cell.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("label `{cell}` is not a non-negative integer"),
            })?;
            if let Some(k) = num_classes {
                if label >= k {
                    return Err(Error::Parse {
                        line,
                        reason: format!("label {label} outside declared range [0, {k})"),
                    });
                }
            }
            labels.push(label);
        }
        for cell in fields {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("non-finite value `{cell}`"),
                });
            }
            data.push(T::of(v));
        }
    }
    let rows = data.len() / dims;
    let features = Matrix::from_vec(rows, dims, data)?;
    if labeled {
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::labeled(features, labels, k)
    } else {
        Ok(Dataset::unlabeled(features))
    }
}

pub fn write_csv<T: Scalar, W: Write>(dataset: &Dataset<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = Vec::new();
    if dataset.is_labeled() {
        header.push("label".into());
    }
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io_err)?;
    for (r, row) in dataset.features().iter_rows().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(labels) = dataset.labels() {
            rec.push(labels[r].to_string());
        }
        // `{}` on f64 prints the shortest representation that parses back exactly.
        rec.extend(row.iter().map(|x| format!("{}", x.as_f64())));
        w.write_record(&rec).map_err(csv_io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    write_csv(dataset, File::create(path.as_ref())?)
}

fn csv_io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_labeled_and_unlabeled() {
        let m = Matrix::<f64>::from_f64_rows(&[&[0.1, -2.5e-7], &[1.0 / 3.0, 4.0]]);
        let labeled = Dataset::labeled(m.clone(), vec![1, 0], 2).unwrap();
        let unlabeled = Dataset::unlabeled(m);
        for ds in [labeled, unlabeled] {
            let mut buf = Vec::new();
            write_csv(&ds, &mut buf).unwrap();
            let back: Dataset<f64> = read_csv(buf.as_slice(), Some(2)).unwrap();
            assert_eq!(back.features(), ds.features());
            assert_eq!(back.labels(), ds.labels());
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::labeled(Matrix::<f32>::from_f64_rows(&[&[0.1, 0.2]]), vec![2], 3).unwrap();
        save_csv(&ds, &path).unwrap();
        let back: Dataset<f32> = load_csv(&path, Some(3)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_cell_names_line() {
        let text = "label,f0,f1\n0,1.0,2.0\n1,2,x\n";
        match read_csv::<f64, _>(text.as_bytes(), None) {
            Err(Error::Parse { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains('x'));
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "f0,f1\n1,2,x\n";
        assert!(matches!(
            read_csv::<f64, _>(text.as_bytes(), None),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn ragged_rows_and_label_range() {
        let ragged = "f0,f1\n1,2\n3\n";
        assert!(matches!(
            read_csv::<f64, _>(ragged.as_bytes(), None),
            Err(Error::Parse { line: 3, .. })
        ));
        let bad_label = "label,f0\n0,1\n5,2\n";
        assert!(matches!(
            read_csv::<f64, _>(bad_label.as_bytes(), Some(3)),
            Err(Error::Parse { line: 3, .. })
        ));
        let inferred: Dataset<f64> = read_csv(bad_label.as_bytes(), None).unwrap();
        assert_eq!(inferred.num_classes(), 6);
    }
}
