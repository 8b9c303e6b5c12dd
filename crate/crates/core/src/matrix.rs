//! Row-major feature matrices with named columns and CSV I/O.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::fsutil::write_atomic;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub columns: Vec<String>,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(columns: Vec<String>, rows: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        let cols = columns.len();
        if data.len() != rows * cols {
            return Err(MatrixError::Dimension(format!(
                "{} values for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            columns,
            data,
        })
    }

    pub fn from_rows(columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let cols = columns.len();
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(MatrixError::Dimension(format!(
                "row of width {} for {cols} columns",
                r.len()
            )));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            columns,
            data: rows.concat(),
        })
    }

    /// `prefix000, prefix001, …`
    pub fn numbered_columns(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}")).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            columns: self.columns.clone(),
            data,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, MatrixError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(MatrixError::Csv {
            line: 1,
            msg: "missing header".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(MatrixError::Csv {
                    line: i + 1,
                    msg: format!("{} fields, header has {}", fields.len(), columns.len()),
                });
            }
            for f in fields {
                data.push(f.trim().parse::<f64>().map_err(|_| MatrixError::Csv {
                    line: i + 1,
                    msg: format!("`{f}` is not a number"),
                })?);
            }
            rows += 1;
        }
        Matrix::new(columns, rows, data)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MatrixError> {
        write_atomic(path, self.to_csv().as_bytes()).map_err(|source| MatrixError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, MatrixError> {
        let text = std::fs::read_to_string(path).map_err(|source| MatrixError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Matrix::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Matrix::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 1e300]],
        )
        .unwrap();
        assert_eq!(Matrix::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Matrix::from_csv("a,b\n1,2\n3\n").is_err());
        assert!(Matrix::from_rows(vec!["a".into()], &[vec![1.0, 2.0]]).is_err());
    }
}
