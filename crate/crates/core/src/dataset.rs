//! In-memory representation of the fused experimental/observational dataset,
//! CSV ingestion and egress, and cross-fitting fold assignment.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv header must be `s,z,y,x1,...,xd`, got `{0}`")]
    MalformedHeader(String),
    #[error("row {row}: column `{column}` must be 0 or 1, got {value}")]
    NonBinaryIndicator {
        row: usize,
        column: &'static str,
        value: f64,
    },
    #[error("row {row}: outcome must be 0 or 1 under a binary outcome model, got {value}")]
    NonBinaryOutcome { row: usize, value: f64 },
    #[error("no data rows")]
    EmptyFile,
    #[error("row {row}, column {column}: `{cell}` does not parse as a finite number")]
    MalformedCell {
        row: usize,
        column: usize,
        cell: String,
    },
    #[error("row {row}: expected {expected} columns, got {got}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("fold count must satisfy 2 <= K <= N, got K={k} with N={n}")]
    BadFoldCount { k: usize, n: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Whether outcomes are restricted to {0,1} or free reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

/// One record of the fused dataset: dataset indicator `s` (1 = experimental),
/// treatment `z`, outcome `y`, and the covariate vector `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedObservation {
    pub s: u8,
    pub z: u8,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Immutable fused dataset. Safe to share across parallel workers.
///
/// Construction checks that indicators are binary, covariate dimension is
/// uniform, and outcomes honor `outcome_kind`. A dataset containing only one
/// of the two samples loads fine; estimand-level operations reject it later.
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: Vec<FusedObservation>,
    d: usize,
    outcome_kind: OutcomeKind,
}

impl Dataset {
    pub fn new(rows: Vec<FusedObservation>, outcome_kind: OutcomeKind) -> Result<Self, DatasetError> {
        if rows.is_empty() {
            return Err(DatasetError::EmptyFile);
        }
        let d = rows[0].x.len();
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != d {
                return Err(DatasetError::RaggedRow {
                    row: i,
                    expected: d + 3,
                    got: r.x.len() + 3,
                });
            }
            if r.s > 1 {
                return Err(DatasetError::NonBinaryIndicator {
                    row: i,
                    column: "s",
                    value: r.s as f64,
                });
            }
            if r.z > 1 {
                return Err(DatasetError::NonBinaryIndicator {
                    row: i,
                    column: "z",
                    value: r.z as f64,
                });
            }
            if !r.y.is_finite() {
                return Err(DatasetError::MalformedCell {
                    row: i,
                    column: 2,
                    cell: r.y.to_string(),
                });
            }
            if outcome_kind == OutcomeKind::Binary && r.y != 0.0 && r.y != 1.0 {
                return Err(DatasetError::NonBinaryOutcome { row: i, value: r.y });
            }
        }
        Ok(Dataset { rows, d, outcome_kind })
    }

    /// Read a dataset from a CSV file with header `s,z,y,x1,...,xd`.
    pub fn load_csv(path: impl AsRef<Path>, outcome_kind: OutcomeKind) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())?;
        let header: Vec<String> = match reader.headers() {
            Ok(h) if !h.is_empty() => h.iter().map(|s| s.trim().to_string()).collect(),
            _ => return Err(DatasetError::EmptyFile),
        };
        if header.len() < 4 || header[0] != "s" || header[1] != "z" || header[2] != "y" {
            return Err(DatasetError::MalformedHeader(header.join(",")));
        }
        for (j, name) in header[3..].iter().enumerate() {
            if *name != format!("x{}", j + 1) {
                return Err(DatasetError::MalformedHeader(header.join(",")));
            }
        }
        let d = header.len() - 3;

        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != d + 3 {
                return Err(DatasetError::RaggedRow {
                    row: i,
                    expected: d + 3,
                    got: record.len(),
                });
            }
            let mut vals = Vec::with_capacity(d + 3);
            for (j, cell) in record.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| DatasetError::MalformedCell {
                    row: i,
                    column: j,
                    cell: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::MalformedCell {
                        row: i,
                        column: j,
                        cell: cell.to_string(),
                    });
                }
                vals.push(v);
            }
            let s = binary_indicator(vals[0], i, "s")?;
            let z = binary_indicator(vals[1], i, "z")?;
            let y = vals[2];
            if outcome_kind == OutcomeKind::Binary && y != 0.0 && y != 1.0 {
                return Err(DatasetError::NonBinaryOutcome { row: i, value: y });
            }
            rows.push(FusedObservation {
                s,
                z,
                y,
                x: vals[3..].to_vec(),
            });
        }
        if rows.is_empty() {
            return Err(DatasetError::EmptyFile);
        }
        Dataset::new(rows, outcome_kind)
    }

    /// Write the dataset back out with the canonical header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut header = vec!["s".to_string(), "z".to_string(), "y".to_string()];
        for j in 0..self.d {
            header.push(format!("x{}", j + 1));
        }
        let mut table = Table::new(header);
        for r in &self.rows {
            let mut row = vec![
                Cell::Int(r.s as i64),
                Cell::Int(r.z as i64),
                Cell::Float(r.y),
            ];
            row.extend(r.x.iter().map(|&v| Cell::Float(v)));
            table.push(row);
        }
        table.write_csv(path)
    }

    pub fn rows(&self) -> &[FusedObservation] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn n_rct(&self) -> usize {
        self.rows.iter().filter(|r| r.s == 1).count()
    }

    pub fn n_obs(&self) -> usize {
        self.rows.iter().filter(|r| r.s == 0).count()
    }
}

fn binary_indicator(v: f64, row: usize, column: &'static str) -> Result<u8, DatasetError> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(DatasetError::NonBinaryIndicator { row, column, value: v })
    }
}

/// Assignment of observation indices to K cross-fitting folds.
///
/// Fold sizes differ by at most one and every fold is nonempty.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    pub fn indices_in(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn indices_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    /// Relabel folds through a permutation of {0,...,K-1}. The partition is
    /// unchanged; estimates must be invariant to this.
    pub fn relabeled(&self, perm: &[usize]) -> FoldAssignment {
        assert_eq!(perm.len(), self.k);
        FoldAssignment {
            fold_of: self.fold_of.iter().map(|&f| perm[f]).collect(),
            k: self.k,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_parts(fold_of: Vec<usize>, k: usize) -> FoldAssignment {
        debug_assert!(fold_of.iter().all(|&f| f < k));
        FoldAssignment { fold_of, k }
    }
}

/// Uniformly random balanced partition of {0,...,n-1} into k folds.
pub fn make_folds(n: usize, k: usize, rng: &mut impl Rng) -> Result<FoldAssignment, DatasetError> {
    if k < 2 || k > n {
        return Err(DatasetError::BadFoldCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // Which folds receive the extra observations is itself randomized.
    let mut labels: Vec<usize> = (0..k).collect();
    labels.shuffle(rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = labels[pos % k];
    }
    Ok(FoldAssignment { fold_of, k })
}

/// A cell of a tabular result.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

/// Rectangular table written as RFC-4180-style CSV with `\n` line endings.
/// Floats are formatted with the shortest decimal that round-trips to the
/// identical double.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "table rows must be rectangular");
        self.rows.push(row);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &self
                .header
                .iter()
                .map(|h| escape(h))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
        for row in &self.rows {
            let mut first = true;
            for cell in row {
                if !first {
                    out.push(',');
                }
                first = false;
                match cell {
                    Cell::Int(v) => out.push_str(&v.to_string()),
                    Cell::Float(v) => out.push_str(&v.to_string()),
                    Cell::Text(t) => out.push_str(&escape(t)),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

fn escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_two_rows() {
        let f = write_temp("s,z,y,x1,x2\n1,1,1,0,1\n0,0,0,1,0\n");
        let ds = Dataset::load_csv(f.path(), OutcomeKind::Binary).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.rows()[0].s, 1);
        assert_eq!(ds.rows()[1].x, vec![1.0, 0.0]);
    }

    #[test]
    fn load_csv_nonbinary_indicator() {
        let f = write_temp("s,z,y,x1\n2,0,1,0\n");
        match Dataset::load_csv(f.path(), OutcomeKind::Binary) {
            Err(DatasetError::NonBinaryIndicator { column: "s", .. }) => {}
            other => panic!("expected NonBinaryIndicator, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_nonbinary_outcome() {
        let f = write_temp("s,z,y,x1\n1,0,0.5,0\n");
        assert!(matches!(
            Dataset::load_csv(f.path(), OutcomeKind::Binary),
            Err(DatasetError::NonBinaryOutcome { .. })
        ));
        // Same file is fine under a continuous outcome model.
        assert!(Dataset::load_csv(f.path(), OutcomeKind::Continuous).is_ok());
    }

    #[test]
    fn load_csv_single_group_loads() {
        // Only experimental rows: loads here, estimand ops reject downstream.
        let f = write_temp("s,z,y,x1\n1,1,1,0\n1,0,0,1\n");
        let ds = Dataset::load_csv(f.path(), OutcomeKind::Binary).unwrap();
        assert_eq!(ds.n_obs(), 0);
    }

    #[test]
    fn load_csv_rejects_bad_header_and_empty() {
        let f = write_temp("s,z,y,w1\n1,0,1,0\n");
        assert!(matches!(
            Dataset::load_csv(f.path(), OutcomeKind::Binary),
            Err(DatasetError::MalformedHeader(_))
        ));
        let f = write_temp("s,z,y,x1\n");
        assert!(matches!(
            Dataset::load_csv(f.path(), OutcomeKind::Binary),
            Err(DatasetError::EmptyFile)
        ));
    }

    #[test]
    fn make_folds_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let folds = make_folds(10, 5, &mut rng).unwrap();
        for k in 0..5 {
            assert_eq!(folds.indices_in(k).len(), 2);
        }

        let folds = make_folds(11, 5, &mut rng).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| folds.indices_in(k).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn make_folds_deterministic_and_partition() {
        let a = make_folds(37, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_folds(37, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.fold_of, b.fold_of);
        // each index in exactly one fold
        let mut seen = vec![0usize; 37];
        for k in 0..4 {
            for i in a.indices_in(k) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn make_folds_bad_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_folds(10, 1, &mut rng), Err(DatasetError::BadFoldCount { .. })));
        assert!(matches!(make_folds(3, 4, &mut rng), Err(DatasetError::BadFoldCount { .. })));
    }

    #[test]
    fn extra_fold_placement_is_seed_dependent() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..32 {
            let folds = make_folds(11, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let big = (0..5).find(|&k| folds.indices_in(k).len() == 3).unwrap();
            seen.insert(big);
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn table_formatting() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec![Cell::Float(0.5), Cell::Text("x,y".into())]);
        assert_eq!(t.to_csv_string(), "a,b\n0.5,\"x,y\"\n");

        let t = Table::new(["only", "header"]);
        assert_eq!(t.to_csv_string(), "only,header\n");
    }

    #[test]
    fn float_round_trip_third() {
        let mut t = Table::new(["v"]);
        let third = 1.0_f64 / 3.0;
        t.push(vec![Cell::Float(third)]);
        let s = t.to_csv_string();
        let cell = s.lines().nth(1).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap().to_bits(), third.to_bits());
    }

    proptest! {
        #[test]
        fn csv_round_trip_identity(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed as usize % 17);
            let d = 1 + (seed as usize % 3);
            let rows: Vec<FusedObservation> = (0..n)
                .map(|i| FusedObservation {
                    s: if i == 0 { 1 } else { rng.random_range(0..2) as u8 },
                    z: rng.random_range(0..2) as u8,
                    y: rng.random::<f64>() * 7.0 - 3.0,
                    x: (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                })
                .collect();
            let ds = Dataset::new(rows, OutcomeKind::Continuous).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            ds.write_csv(f.path()).unwrap();
            let back = Dataset::load_csv(f.path(), OutcomeKind::Continuous).unwrap();
            prop_assert_eq!(back.n(), ds.n());
            for (a, b) in ds.rows().iter().zip(back.rows()) {
                prop_assert_eq!(a.s, b.s);
                prop_assert_eq!(a.z, b.z);
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
                for (xa, xb) in a.x.iter().zip(&b.x) {
                    prop_assert_eq!(xa.to_bits(), xb.to_bits());
                }
            }
        }
    }
}
