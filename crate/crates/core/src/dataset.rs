//! Observational rows `(x, a, y[, s])` and their CSV form.
//!
//! CSV header is `x1,...,xp,a,y[,s]`. Source labels are 1-based. Floats are
//! written with Rust's shortest round-trip formatting.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub s: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Matrix, a: Vec<u8>, y: Vec<f64>, s: Option<Vec<usize>>) -> Result<Self> {
        let n = x.nrows();
        if a.len() != n || y.len() != n || s.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::Dimension(format!("inconsistent column lengths for {n} rows")));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::Input(format!("treatment at row {i} is {}, expected 0 or 1", a[i])));
        }
        if s.as_ref().is_some_and(|s| s.contains(&0)) {
            return Err(Error::Input("source labels are 1-based".into()));
        }
        Ok(Self { x, a, y, s })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            s: self.s.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Number of sources implied by the largest label.
    pub fn num_sources(&self) -> Option<usize> {
        self.s.as_ref().map(|s| s.iter().copied().max().unwrap_or(0))
    }

    /// Rows grouped by source label `1..=k`.
    pub fn split_by_source(&self) -> Result<Vec<Dataset>> {
        let labels = self.s.as_ref().ok_or_else(|| Error::Input("dataset has no source column".into()))?;
        let k = self.num_sources().unwrap_or(0);
        let mut groups = vec![Vec::new(); k];
        for (i, &s) in labels.iter().enumerate() {
            groups[s - 1].push(i);
        }
        if let Some(empty) = groups.iter().position(Vec::is_empty) {
            return Err(Error::ClassCoverage(format!("source {} has no rows", empty + 1)));
        }
        Ok(groups.iter().map(|g| self.subset(g)).collect())
    }

    /// Concatenates datasets; labels survive only if every part has them.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let mut x = Matrix::empty(first.dim());
        let (mut a, mut y) = (Vec::new(), Vec::new());
        let mut s = parts.iter().all(|p| p.s.is_some()).then(Vec::new);
        for p in parts {
            x = x.vstack(&p.x)?;
            a.extend_from_slice(&p.a);
            y.extend_from_slice(&p.y);
            if let (Some(dst), Some(src)) = (s.as_mut(), p.s.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        Self::new(x, a, y, s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("a".into());
        header.push("y".into());
        if self.s.is_some() {
            header.push("s".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.a[i].to_string());
            rec.push(self.y[i].to_string());
            if let Some(s) = &self.s {
                rec.push(s[i].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads a labeled dataset; `a` and `y` columns are required, `s` optional.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let table = Table::read(input)?;
        let a_col = table.require("a")?;
        let y_col = table.require("y")?;
        let s_col = table.column("s");
        let mut a = Vec::with_capacity(table.rows.len());
        let mut y = Vec::with_capacity(table.rows.len());
        let mut s = s_col.map(|_| Vec::with_capacity(table.rows.len()));
        for (line, rec) in &table.rows {
            let av = parse_f64(&rec[a_col], *line, "a")?;
            if av != 0.0 && av != 1.0 {
                return Err(Error::Parse { line: *line, msg: format!("treatment must be 0 or 1, got {av}") });
            }
            a.push(av as u8);
            y.push(parse_f64(&rec[y_col], *line, "y")?);
            if let (Some(col), Some(dst)) = (s_col, s.as_mut()) {
                let sv: usize = rec[col].trim().parse().map_err(|_| Error::Parse {
                    line: *line,
                    msg: format!("source label `{}` is not a positive integer", &rec[col]),
                })?;
                if sv == 0 {
                    return Err(Error::Parse { line: *line, msg: "source labels are 1-based".into() });
                }
                dst.push(sv);
            }
        }
        Self::new(table.covariates()?, a, y, s)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Reads only the `x1..xp` columns; any other columns are ignored.
pub fn read_covariates_csv<R: Read>(input: R) -> Result<Matrix> {
    Table::read(input)?.covariates()
}

pub fn read_covariates_csv_path(path: &Path) -> Result<Matrix> {
    read_covariates_csv(std::fs::File::open(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}

fn parse_f64(field: &str, line: u64, col: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("column `{col}`: `{field}` is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("column `{col}` is not finite") });
    }
    Ok(v)
}

struct Table {
    header: Vec<String>,
    x_cols: Vec<usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
        let mut numbered: Vec<(usize, usize)> = Vec::new();
        for (col, h) in header.iter().enumerate() {
            if let Some(k) = h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
                numbered.push((k, col));
            }
        }
        numbered.sort_unstable();
        if numbered.is_empty() {
            return Err(Error::Parse { line: 1, msg: "header has no covariate columns x1..xp".into() });
        }
        for (expect, (k, _)) in numbered.iter().enumerate() {
            if *k != expect + 1 {
                return Err(Error::Parse { line: 1, msg: format!("covariate columns must be x1..xp, found x{k}") });
            }
        }
        let x_cols = numbered.into_iter().map(|(_, c)| c).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { header, x_cols, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing required column `{name}`") })
    }

    fn covariates(&self) -> Result<Matrix> {
        let p = self.x_cols.len();
        let mut data = Vec::with_capacity(self.rows.len() * p);
        for (line, rec) in &self.rows {
            for (j, &c) in self.x_cols.iter().enumerate() {
                data.push(parse_f64(&rec[c], *line, &format!("x{}", j + 1))?);
            }
        }
        Matrix::from_vec(self.rows.len(), p, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Dataset {
        let x = Matrix::from_rows(&[vec![0.1, -2.5], vec![1e-17, 3.0], vec![-0.3, 0.0]]).unwrap();
        Dataset::new(x, vec![1, 0, 1], vec![0.5, -1.25, 2.0], Some(vec![1, 2, 2])).unwrap()
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,a,y,s\n"));
    }

    #[test]
    fn missing_y_is_a_parse_error() {
        let err = Dataset::read_csv("x1,a\n1.0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn bad_field_reports_line() {
        let err = Dataset::read_csv("x1,a,y\n1.0,1,2\n2.0,0,oops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = Dataset::read_csv("x1,a,y\n1.0,2,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn covariates_ignore_other_columns() {
        let m = read_covariates_csv("y,x2,x1\n9,2,1\n".as_bytes()).unwrap();
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert!(read_covariates_csv("x1,x3\n1,2\n".as_bytes()).is_err());
        let empty = read_covariates_csv("x1,x2\n".as_bytes()).unwrap();
        assert_eq!((empty.nrows(), empty.ncols()), (0, 2));
    }

    #[test]
    fn split_and_concat() {
        let d = sample();
        let parts = d.split_by_source().unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].len(), 2);
        let back = Dataset::concat(&parts).unwrap();
        assert_eq!(back.len(), 3);
        let gap = Dataset::new(d.x.clone(), d.a.clone(), d.y.clone(), Some(vec![1, 3, 3])).unwrap();
        assert!(matches!(gap.split_by_source(), Err(Error::ClassCoverage(_))));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 3), 0u8..2, -1e6f64..1e6, 1usize..4), 0..20)
        ) {
            let x = Matrix::from_vec(rows.len(), 3, rows.iter().flat_map(|r| r.0.clone()).collect()).unwrap();
            let d = Dataset::new(
                x,
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
                Some(rows.iter().map(|r| r.3).collect()),
            ).unwrap();
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            prop_assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);
        }
    }
}
