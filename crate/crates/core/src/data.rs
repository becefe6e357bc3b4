//! Observed-data model: units, datasets, cross-fitting folds and the
//! counterfactual-mean matrix with its two parametrizations.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// One observation `(y, a, x)`. Arms are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedUnit {
    pub y: f64,
    pub a: usize,
    pub x: Vec<f64>,
}

/// A validated sample with `p` arms and `d` covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    units: Vec<ObservedUnit>,
    p: usize,
    d: usize,
}

impl Dataset {
    /// Validates and wraps `units`.
    ///
    /// Every arm in `1..=p` must appear at least once, all covariate vectors
    /// must share one length `d >= 1`, and all values must be finite.
    pub fn new(units: Vec<ObservedUnit>, p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config(format!("need at least 2 arms, got {p}")));
        }
        let d = units.first().map(|u| u.x.len()).unwrap_or(0);
        if units.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if d == 0 {
            return Err(Error::Data("dataset has no covariates".into()));
        }
        let mut seen = vec![false; p];
        for (i, u) in units.iter().enumerate() {
            let row = i + 1;
            if u.a < 1 || u.a > p {
                return Err(Error::Data(format!("arm out of range at row {row}")));
            }
            if u.x.len() != d {
                return Err(Error::Data(format!(
                    "row {row} has {} covariates, expected {d}",
                    u.x.len()
                )));
            }
            if !u.y.is_finite() {
                return Err(Error::Data(format!("non-finite outcome at row {row}")));
            }
            if let Some(j) = u.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite covariate x{} at row {row}",
                    j + 1
                )));
            }
            seen[u.a - 1] = true;
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("arm {} unobserved", a + 1)));
        }
        Ok(Dataset { units, p, d })
    }

    pub fn units(&self) -> &[ObservedUnit] {
        &self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn covariates(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.units.iter().map(|u| u.x.as_slice()).collect();
        Matrix::from_rows(&rows).expect("validated dimensions")
    }

    /// Writes the dataset as `y,a,x1,…,xd` CSV.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string(), "a".to_string()];
        header.extend((1..=self.d).map(|j| format!("x{j}")));
        wtr.write_record(&header).map_err(csv_io)?;
        for u in &self.units {
            let mut rec = vec![crate::io::fmt_f64(u.y), u.a.to_string()];
            rec.extend(u.x.iter().map(|&v| crate::io::fmt_f64(v)));
            wtr.write_record(&rec).map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a `y,a,x1,…,xd` CSV file and validates it against `p` arms.
pub fn load_dataset(path: impl AsRef<Path>, p: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    read_dataset(file, p)
}

/// Parses dataset CSV from any reader. Row numbers in errors count data rows
/// from 1.
pub fn read_dataset<R: std::io::Read>(reader: R, p: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 3 || &header[0] != "y" || &header[1] != "a" {
        return Err(Error::Data(
            "header must be `y,a,x1,…,xd` with at least one covariate".into(),
        ));
    }
    for (j, name) in header.iter().enumerate().skip(2) {
        if name != format!("x{}", j - 1) {
            return Err(Error::Data(format!(
                "header column {} is `{name}`, expected `x{}`",
                j + 1,
                j - 1
            )));
        }
    }
    let d = header.len() - 2;
    let mut units = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("malformed row {row}: {e}")))?;
        if rec.len() != d + 2 {
            return Err(Error::Data(format!(
                "row {row} has {} cells, expected {}",
                rec.len(),
                d + 2
            )));
        }
        let num = |j: usize| -> Result<f64> {
            let cell = &rec[j];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "non-numeric value `{cell}` at row {row}, column {}",
                        &header[j]
                    ))
                })
        };
        let y = num(0)?;
        let a: i64 = rec[1].parse().map_err(|_| {
            Error::Data(format!(
                "non-integer arm `{}` at row {row}, column a",
                &rec[1]
            ))
        })?;
        if a < 1 || a as usize > p {
            return Err(Error::Data(format!("arm out of range at row {row}")));
        }
        let x = (2..d + 2).map(num).collect::<Result<Vec<_>>>()?;
        units.push(ObservedUnit {
            y,
            a: a as usize,
            x,
        });
    }
    Dataset::new(units, p)
}

/// Cross-fitting split: `labels[i] ∈ 1..=k` is the fold of unit `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    labels: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    /// Wraps explicit labels; every fold in `1..=k` must be used.
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {k}")));
        }
        let mut used = vec![false; k];
        for &l in &labels {
            if l < 1 || l > k {
                return Err(Error::Config(format!("fold label {l} outside 1..={k}")));
            }
            used[l - 1] = true;
        }
        if let Some(b) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!("fold {} is empty", b + 1)));
        }
        Ok(FoldAssignment { labels, k, seed: 0 })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }

    /// Indices of units in fold `b` (1-based fold).
    pub fn members(&self, b: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == b)
            .collect()
    }
}

/// Balanced random fold labels: a label vector `1,2,…,k,1,2,…` shuffled by a
/// generator seeded from `seed`.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "fold count must satisfy 2 <= K <= n, got K={k}, n={n}"
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % k + 1).collect();
    let mut rng = rng::rng_from_seed(seed);
    labels.shuffle(&mut rng);
    Ok(FoldAssignment { labels, k, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parametrization {
    #[default]
    Levels,
    /// Row `(m1, …, mp)` stored as `(m1, m2 − m1, …, mp − m1)`.
    ContrastsVsBaseline,
}

impl std::str::FromStr for Parametrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "levels" => Ok(Parametrization::Levels),
            "contrasts" | "contrasts_vs_baseline" => Ok(Parametrization::ContrastsVsBaseline),
            other => Err(Error::Config(format!("unknown parametrization `{other}`"))),
        }
    }
}

/// `n × p` matrix of counterfactual means, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualMatrix {
    values: Matrix,
    parametrization: Parametrization,
}

impl CounterfactualMatrix {
    pub fn new(values: Matrix, parametrization: Parametrization) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Data("counterfactual matrix has non-finite entries".into()));
        }
        Ok(CounterfactualMatrix {
            values,
            parametrization,
        })
    }

    pub fn levels(values: Matrix) -> Result<Self> {
        Self::new(values, Parametrization::Levels)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }
}

/// Converts between levels and baseline contrasts.
///
/// Requesting contrasts from a contrast matrix is a state error; requesting
/// levels from contrasts inverts the map, and levels from levels is the
/// identity.
pub fn reparametrize(
    m: &CounterfactualMatrix,
    mode: Parametrization,
) -> Result<CounterfactualMatrix> {
    use Parametrization::*;
    let mut values = m.values.clone();
    match (m.parametrization, mode) {
        (Levels, Levels) => {}
        (Levels, ContrastsVsBaseline) => {
            for i in 0..values.nrows() {
                let row = values.row_mut(i);
                let base = row[0];
                row[1..].iter_mut().for_each(|v| *v -= base);
            }
        }
        (ContrastsVsBaseline, Levels) => {
            for i in 0..values.nrows() {
                let row = values.row_mut(i);
                let base = row[0];
                row[1..].iter_mut().for_each(|v| *v += base);
            }
        }
        (ContrastsVsBaseline, ContrastsVsBaseline) => {
            return Err(Error::State(
                "matrix is already in contrasts parametrization".into(),
            ))
        }
    }
    Ok(CounterfactualMatrix {
        values,
        parametrization: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, p: usize) -> Result<Dataset> {
        read_dataset(s.as_bytes(), p)
    }

    #[test]
    fn loads_minimal_file() {
        let ds = parse("y,a,x1\n1.0,1,0.5\n2.0,2,0.1\n3.5,1,-1\n", 2).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 1);
        assert_eq!(ds.units()[2].y, 3.5);
        assert_eq!(ds.units()[1].a, 2);
    }

    #[test]
    fn arm_zero_is_out_of_range() {
        let err = parse("y,a,x1\n1,1,0\n1,0,0\n1,2,0\n", 2).unwrap_err();
        assert_eq!(err.to_string(), "data error: arm out of range at row 2");
    }

    #[test]
    fn unobserved_arm_is_rejected() {
        let err = parse("y,a,x1\n1,1,0\n1,1,0\n", 2).unwrap_err();
        assert_eq!(err.to_string(), "data error: arm 2 unobserved");
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse("y,a,x1,x2\n1,1,0,0\n1,2,abc,0\n", 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("x1"), "{msg}");
        let err = parse("y,a,x1\nfoo,1,0\n1,2,0\n", 2).unwrap_err();
        assert!(err.to_string().contains("column y"));
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(parse("y,arm,x1\n1,1,0\n", 2).is_err());
        assert!(parse("y,a,x2\n1,1,0\n", 2).is_err());
    }

    #[test]
    fn folds_balanced_examples() {
        let f = assign_folds(10, 5, 3).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        let f = assign_folds(7, 2, 3).unwrap();
        let mut s = f.fold_sizes();
        s.sort();
        assert_eq!(s, vec![3, 4]);
        assert_eq!(assign_folds(7, 2, 3).unwrap(), f);
    }

    #[test]
    fn fold_count_bounds() {
        assert!(matches!(assign_folds(3, 4, 0), Err(Error::Config(_))));
        assert!(matches!(assign_folds(3, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn contrasts_examples() {
        let m = CounterfactualMatrix::levels(
            Matrix::from_rows(&[vec![10.0, 12.0]]).unwrap(),
        )
        .unwrap();
        let c = reparametrize(&m, Parametrization::ContrastsVsBaseline).unwrap();
        assert_eq!(c.values().row(0), &[10.0, 2.0]);

        let m = CounterfactualMatrix::levels(
            Matrix::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap(),
        )
        .unwrap();
        let c = reparametrize(&m, Parametrization::ContrastsVsBaseline).unwrap();
        assert_eq!(c.values().row(0), &[5.0, 0.0, 0.0]);
        assert_eq!(reparametrize(&m, Parametrization::Levels).unwrap(), m);

        let err = reparametrize(&c, Parametrization::ContrastsVsBaseline).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
