//! Discrete plug-in estimators for mutual information and conditional
//! mutual information over binary variables, and the target variable they
//! are estimated against.
//!
//! Estimates are in nats (natural log). The estimator is the plain
//! maximum-likelihood plug-in on empirical cell counts with the usual
//! `0 ln 0 = 0` convention and no smoothing; inputs are binarized
//! (nonzero -> 1) before counting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Binary per-item target labels plus a descriptor of how they were derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetVector {
    pub values: Vec<u8>,
    pub derivation: String,
}

impl TargetVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Label each item by whether its training interaction count strictly
/// exceeds the median count over all items.
pub fn build_target(urm_train: &SparseMatrix) -> TargetVector {
    let counts = urm_train.col_counts();
    let median = median_of_counts(&counts);
    let values = counts
        .iter()
        .map(|&c| u8::from(c as f64 > median))
        .collect();
    TargetVector {
        values,
        derivation: "popularity-median".to_string(),
    }
}

fn median_of_counts(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<usize> = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Per-feature MI plus the full (asymmetric) pairwise CMI matrix.
/// `cmi[i][j]` is CMI(f_i; y | f_j); the diagonal is stored as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiStats {
    pub mi: Vec<f64>,
    pub cmi: Vec<Vec<f64>>,
}

impl MiStats {
    pub fn len(&self) -> usize {
        self.mi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mi.is_empty()
    }
}

/// Packed binary column over items; counting happens on 64-bit words.
#[derive(Debug, Clone)]
struct BitColumn {
    words: Vec<u64>,
    len: usize,
}

impl BitColumn {
    fn zeros(len: usize) -> Self {
        BitColumn {
            words: vec![0u64; len.div_ceil(64)],
            len,
        }
    }

    fn from_binary(values: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for v in values {
            if len % 64 == 0 {
                words.push(0);
            }
            if v {
                *words.last_mut().unwrap() |= 1u64 << (len % 64);
            }
            len += 1;
        }
        BitColumn { words, len }
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1u64 << (i % 64);
    }

    fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn count_and(&self, other: &BitColumn) -> u64 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    fn count_and3(&self, b: &BitColumn, c: &BitColumn) -> u64 {
        self.words
            .iter()
            .zip(&b.words)
            .zip(&c.words)
            .map(|((x, y), z)| (x & y & z).count_ones() as u64)
            .sum()
    }
}

/// Plug-in MI from 2x2 cell counts: `n` samples, marginal one-counts `ca`,
/// `cb`, and joint one-count `c11`.
///
/// Swapping the two variables maps the (1,0) cell to (0,1) and fixes the
/// other two, so grouping the sums as below makes MI(a;b) == MI(b;a) exact
/// (float addition is commutative).
fn mi_from_counts(n: u64, ca: u64, cb: u64, c11: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n_f = n as f64;
    let term = |joint: u64, ma: u64, mb: u64| -> f64 {
        if joint == 0 {
            return 0.0; // 0 ln 0 = 0
        }
        let p = joint as f64 / n_f;
        let pa = ma as f64 / n_f;
        let pb = mb as f64 / n_f;
        p * (p / (pa * pb)).ln()
    };
    let diag = term(c11, ca, cb) + term(n + c11 - ca - cb, n - ca, n - cb);
    let cross = term(ca - c11, ca, n - cb) + term(cb - c11, n - ca, cb);
    diag + cross
}

fn binarize(values: &[f64]) -> BitColumn {
    BitColumn::from_binary(values.iter().map(|&v| v != 0.0))
}

fn target_bits(y: &TargetVector) -> BitColumn {
    BitColumn::from_binary(y.values.iter().map(|&v| v != 0))
}

/// Plug-in mutual information between a feature column and the target, in
/// nats. The feature is binarized (nonzero -> 1).
pub fn mutual_information(feature: &[f64], y: &TargetVector) -> Result<f64> {
    if feature.len() != y.len() {
        return Err(Error::Shape(format!(
            "feature length {} != target length {}",
            feature.len(),
            y.len()
        )));
    }
    let f = binarize(feature);
    let t = target_bits(y);
    Ok(mi_from_counts(
        f.len as u64,
        f.count(),
        t.count(),
        f.count_and(&t),
    ))
}

/// Plug-in conditional mutual information CMI(f_i; y | f_j) in nats:
/// the stratum-weighted average of the conditional plug-in MIs, with an
/// empty stratum contributing 0.
pub fn conditional_mutual_information(f_i: &[f64], y: &TargetVector, f_j: &[f64]) -> Result<f64> {
    if f_i.len() != y.len() || f_j.len() != y.len() {
        return Err(Error::Shape(format!(
            "lengths disagree: f_i {}, y {}, f_j {}",
            f_i.len(),
            y.len(),
            f_j.len()
        )));
    }
    let fi = binarize(f_i);
    let fj = binarize(f_j);
    let t = target_bits(y);
    Ok(cmi_bits(&fi, &t, &fj))
}

fn cmi_bits(fi: &BitColumn, y: &BitColumn, fj: &BitColumn) -> f64 {
    let n = fi.len as u64;
    if n == 0 {
        return 0.0;
    }
    let cj = fj.count();
    let ci = fi.count();
    let cy = y.count();
    let ci_j = fi.count_and(fj);
    let cy_j = y.count_and(fj);
    let ciy = fi.count_and(y);
    let ciy_j = fi.count_and3(y, fj);

    // Stratum f_j = 1.
    let mut cmi = 0.0;
    if cj > 0 {
        cmi += cj as f64 / n as f64 * mi_from_counts(cj, ci_j, cy_j, ciy_j);
    }
    // Stratum f_j = 0, by complement counts.
    let n0 = n - cj;
    if n0 > 0 {
        cmi += n0 as f64 / n as f64 * mi_from_counts(n0, ci - ci_j, cy - cy_j, ciy - ciy_j);
    }
    cmi
}

/// MI for every feature and CMI for every ordered feature pair, computed
/// over `feature_subset` when given (in subset order) or over all columns.
pub fn compute_mi_stats(
    icm: &SparseMatrix,
    y: &TargetVector,
    feature_subset: Option<&[usize]>,
) -> Result<MiStats> {
    if y.len() != icm.n_rows() {
        return Err(Error::Shape(format!(
            "target length {} != item count {}",
            y.len(),
            icm.n_rows()
        )));
    }
    let all: Vec<usize>;
    let subset: &[usize] = match feature_subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&f| f >= icm.n_cols()) {
                return Err(Error::Shape(format!(
                    "feature index {bad} outside {} columns",
                    icm.n_cols()
                )));
            }
            s
        }
        None => {
            all = (0..icm.n_cols()).collect();
            &all
        }
    };

    // Pack the selected columns as bitsets over items.
    let n_items = icm.n_rows();
    let mut col_of = vec![usize::MAX; icm.n_cols()];
    for (slot, &f) in subset.iter().enumerate() {
        col_of[f] = slot;
    }
    let mut columns = vec![BitColumn::zeros(n_items); subset.len()];
    for item in 0..n_items {
        for &(f, v) in icm.row(item) {
            let slot = col_of[f];
            if slot != usize::MAX && v != 0.0 {
                columns[slot].set(item);
            }
        }
    }
    let t = target_bits(y);

    let mi: Vec<f64> = columns
        .iter()
        .map(|c| mi_from_counts(n_items as u64, c.count(), t.count(), c.count_and(&t)))
        .collect();
    let cmi: Vec<Vec<f64>> = columns
        .par_iter()
        .enumerate()
        .map(|(i, fi)| {
            let mut row = vec![0.0; columns.len()];
            for (j, fj) in columns.iter().enumerate() {
                if i != j {
                    row[j] = cmi_bits(fi, &t, fj);
                }
            }
            row
        })
        .collect();

    Ok(MiStats { mi, cmi })
}

/// Extract ICM column `f` as a dense vector over items.
pub fn dense_column(icm: &SparseMatrix, f: usize) -> Vec<f64> {
    (0..icm.n_rows()).map(|item| icm.get(item, f)).collect()
}

/// Write `mi.tsv` (`index<TAB>value`) and `cmi.tsv` (`i<TAB>j<TAB>value`,
/// off-diagonal only) next to each other for inspection and reuse.
pub fn save_mi_stats_tsv(
    stats: &MiStats,
    mi_path: impl AsRef<std::path::Path>,
    cmi_path: impl AsRef<std::path::Path>,
) -> Result<()> {
    use std::io::Write;
    let write = |path: &std::path::Path, body: String| -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        f.write_all(body.as_bytes()).map_err(io_err)?;
        f.flush().map_err(io_err)
    };
    let mut mi_body = String::new();
    for (i, v) in stats.mi.iter().enumerate() {
        mi_body.push_str(&format!("{i}\t{v}\n"));
    }
    write(mi_path.as_ref(), mi_body)?;
    let mut cmi_body = String::new();
    for (i, row) in stats.cmi.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                cmi_body.push_str(&format!("{i}\t{j}\t{v}\n"));
            }
        }
    }
    write(cmi_path.as_ref(), cmi_body)
}
