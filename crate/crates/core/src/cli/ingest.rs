//! Lazy CSV ingestion.
//!
//! Files carry a header row. Every remaining column except the optional
//! target and auxiliary columns is a feature. Records are parsed one at a
//! time as the stream is consumed; only the caller decides what to retain.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

/// Which header columns play a special role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvSchema {
    /// Target column. `None` with `target_required` selects the last column.
    pub target: Option<String>,
    pub target_required: bool,
    /// Optional side column (class labels for the reduction task).
    pub aux: Option<String>,
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    /// Zero-based arrival index among data rows.
    pub index: u64,
    /// One-based row number in the file, counting the header as row 1.
    pub line: u64,
    pub x: Vec<f64>,
    pub target: Option<f64>,
    pub aux: Option<f64>,
}

pub struct CsvStream {
    records: csv::StringRecordsIntoIter<File>,
    header: Vec<String>,
    feature_cols: Vec<usize>,
    target_col: Option<usize>,
    aux_col: Option<usize>,
    next_index: u64,
}

fn find(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse {
            row: 1,
            column: None,
            message: format!("header has no column named {name:?}"),
        })
}

impl CsvStream {
    pub fn open(path: &Path, schema: &CsvSchema) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse {
                row: 1,
                column: None,
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_owned)
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(Error::Parse {
                row: 1,
                column: None,
                message: "missing header row".into(),
            });
        }
        let target_col = match (&schema.target, schema.target_required) {
            (Some(name), _) => Some(find(&header, name)?),
            (None, true) => Some(header.len() - 1),
            (None, false) => None,
        };
        let aux_col = schema.aux.as_deref().map(|n| find(&header, n)).transpose()?;
        if aux_col.is_some() && aux_col == target_col {
            return Err(Error::Config("target and label columns must differ".into()));
        }
        let feature_cols: Vec<usize> = (0..header.len())
            .filter(|c| Some(*c) != target_col && Some(*c) != aux_col)
            .collect();
        if feature_cols.is_empty() {
            return Err(Error::Parse {
                row: 1,
                column: None,
                message: "no feature columns".into(),
            });
        }
        Ok(CsvStream {
            records: reader.into_records(),
            header,
            feature_cols,
            target_col,
            aux_col,
            next_index: 0,
        })
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_cols.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.feature_cols.iter().map(|&c| self.header[c].as_str()).collect()
    }

    fn parse(&self, record: &csv::StringRecord) -> Result<StreamRecord> {
        let line = self.next_index + 2;
        if record.len() != self.header.len() {
            return Err(Error::Parse {
                row: line,
                column: None,
                message: format!("expected {} fields, found {}", self.header.len(), record.len()),
            });
        }
        let cell = |c: usize| -> Result<f64> {
            let raw = &record[c];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::Parse {
                    row: line,
                    column: Some(c + 1),
                    message: format!("non-finite value {raw:?}"),
                }),
                Err(_) => Err(Error::Parse {
                    row: line,
                    column: Some(c + 1),
                    message: format!("not a number: {raw:?}"),
                }),
            }
        };
        Ok(StreamRecord {
            index: self.next_index,
            line,
            x: self.feature_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?,
            target: self.target_col.map(cell).transpose()?,
            aux: self.aux_col.map(cell).transpose()?,
        })
    }
}

impl Iterator for CsvStream {
    type Item = Result<StreamRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = match self.records.next()? {
            Ok(r) => r,
            Err(e) => {
                let row = self.next_index + 2;
                return Some(Err(Error::Parse {
                    row,
                    column: None,
                    message: e.to_string(),
                }));
            }
        };
        let parsed = self.parse(&record);
        if parsed.is_ok() {
            self.next_index += 1;
        }
        Some(parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn supervised() -> CsvSchema {
        CsvSchema {
            target_required: true,
            ..CsvSchema::default()
        }
    }

    fn read_all(text: &str, schema: &CsvSchema) -> Result<Vec<StreamRecord>> {
        let f = write(text);
        CsvStream::open(f.path(), schema)?.collect()
    }

    #[test]
    fn crlf_and_lf_give_identical_records() {
        let lf = read_all("a,b,y\n1,2,3\n4,5,6\n", &supervised()).unwrap();
        let crlf = read_all("a,b,y\r\n1,2,3\r\n4,5,6\r\n", &supervised()).unwrap();
        assert_eq!(lf, crlf);
        assert_eq!(lf[1].x, vec![4.0, 5.0]);
        assert_eq!(lf[1].target, Some(6.0));
        assert_eq!(lf[1].index, 1);
    }

    #[test]
    fn empty_data_section_yields_nothing() {
        assert!(read_all("a,y\n", &supervised()).unwrap().is_empty());
    }

    #[test]
    fn wide_header_is_accepted() {
        let names: Vec<String> = (0..21).map(|i| format!("q{i}")).chain(["torque".into()]).collect();
        let f = write(&format!("{}\n", names.join(",")));
        let schema = CsvSchema {
            target: Some("torque".into()),
            ..supervised()
        };
        let s = CsvStream::open(f.path(), &schema).unwrap();
        assert_eq!(s.feature_dim(), 21);
        assert_eq!(s.feature_names()[20], "q20");
    }

    #[test]
    fn errors_carry_positions() {
        let err = read_all("a,y\n1,2\n3\n", &supervised()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, column: None, .. }), "{err}");
        let err = read_all("a,y\n1,2\n1,x\n", &supervised()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, column: Some(2), .. }), "{err}");
        let err = read_all("a,y\nNaN,2\n", &supervised()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, column: Some(1), .. }), "{err}");
    }

    #[test]
    fn named_columns_are_split_out() {
        let schema = CsvSchema {
            target: None,
            target_required: false,
            aux: Some("label".into()),
        };
        let rows = read_all("y1,label,y2\n1,0,2\n", &schema).unwrap();
        assert_eq!(rows[0].x, vec![1.0, 2.0]);
        assert_eq!(rows[0].aux, Some(0.0));
        assert_eq!(rows[0].target, None);
        assert!(read_all("a,b\n1,2\n", &CsvSchema { target: Some("c".into()), ..supervised() }).is_err());
    }
}
