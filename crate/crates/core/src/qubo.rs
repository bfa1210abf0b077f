//! QUBO instances: symmetric coefficient matrix with an energy offset,
//! selection masks, and the builders that assemble feature-selection
//! objectives from information metrics and counterfactual scores.
//!
//! Energy convention for a stored symmetric matrix `q`:
//!
//! ```text
//! Y(x) = sum_i q[i][i] x_i  +  2 sum_{i<j} q[i][j] x_i x_j  +  offset
//! ```
//!
//! which equals `x^T q x + offset`. Builders symmetrize asymmetric raw
//! coefficients by averaging, which leaves the quadratic form unchanged.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counterfactual::CounterfactualScores;
use crate::error::{Error, Result};
use crate::infometrics::MiStats;

/// Binary decision vector: `bits[i]` is true when feature `i` is selected.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionMask {
    pub bits: Vec<bool>,
}

impl SelectionMask {
    pub fn all(m: usize) -> Self {
        SelectionMask {
            bits: vec![true; m],
        }
    }

    pub fn none(m: usize) -> Self {
        SelectionMask {
            bits: vec![false; m],
        }
    }

    pub fn from_indices(m: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = SelectionMask::none(m);
        for &i in indices {
            if i >= m {
                return Err(Error::Shape(format!("index {i} outside mask length {m}")));
            }
            mask.bits[i] = true;
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Copy with bit `i` cleared.
    pub fn without(&self, i: usize) -> Self {
        let mut mask = self.clone();
        mask.bits[i] = false;
        mask
    }
}

/// Write a mask as one selected index per line.
pub fn save_mask(mask: &SelectionMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for i in mask.indices() {
        writeln!(out, "{i}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read a mask file (one selected index per line, `#` comments allowed)
/// into a mask of length `m`.
pub fn load_mask(path: impl AsRef<Path>, m: usize) -> Result<SelectionMask> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut indices = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let i: usize = trimmed.parse().map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: format!("bad feature index {trimmed:?}"),
        })?;
        indices.push(i);
    }
    SelectionMask::from_indices(m, &indices)
}

/// Parameters of the counterfactual-augmented objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaquboParams {
    /// Weight of the counterfactual score on the diagonal.
    pub lambda: f64,
    /// Uniform scaling applied to every coefficient.
    pub mu: f64,
    /// Desired number of selected features.
    pub k: usize,
    /// Cardinality penalty weight.
    pub gamma: f64,
}

/// Symmetric QUBO coefficient matrix with a scalar energy offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuboMatrix {
    m: usize,
    q: Vec<Vec<f64>>,
    offset: f64,
    provenance: String,
}

impl QuboMatrix {
    /// Zero matrix; mostly useful in tests.
    pub fn zero(m: usize) -> Self {
        QuboMatrix {
            m,
            q: vec![vec![0.0; m]; m],
            offset: 0.0,
            provenance: "zero".to_string(),
        }
    }

    /// Build from a full coefficient matrix, symmetrizing by averaging.
    pub fn from_raw(
        raw: Vec<Vec<f64>>,
        offset: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let m = raw.len();
        if raw.iter().any(|row| row.len() != m) {
            return Err(Error::Shape(
                "coefficient matrix must be square".to_string(),
            ));
        }
        let mut q = vec![vec![0.0; m]; m];
        for i in 0..m {
            q[i][i] = raw[i][i];
            for j in (i + 1)..m {
                let avg = (raw[i][j] + raw[j][i]) / 2.0;
                q[i][j] = avg;
                q[j][i] = avg;
            }
        }
        Ok(QuboMatrix {
            m,
            q,
            offset,
            provenance: provenance.into(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    /// Largest coefficient magnitude; 0 for an all-zero matrix.
    pub fn max_abs(&self) -> f64 {
        self.q
            .iter()
            .flatten()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    /// Contiguous principal submatrix over `range`, offset carried along.
    pub fn principal_submatrix(&self, range: std::ops::Range<usize>) -> Result<QuboMatrix> {
        if range.end > self.m || range.start > range.end {
            return Err(Error::Shape(format!(
                "block {range:?} outside matrix of size {}",
                self.m
            )));
        }
        let q: Vec<Vec<f64>> = self.q[range.clone()]
            .iter()
            .map(|row| row[range.clone()].to_vec())
            .collect();
        Ok(QuboMatrix {
            m: range.len(),
            q,
            offset: self.offset,
            provenance: format!(
                "{} -> block({}..{})",
                self.provenance, range.start, range.end
            ),
        })
    }

    /// Quadratic-form energy of a mask under the stored convention.
    pub fn energy(&self, x: &SelectionMask) -> Result<f64> {
        if x.len() != self.m {
            return Err(Error::Shape(format!(
                "mask length {} != matrix size {}",
                x.len(),
                self.m
            )));
        }
        let mut e = self.offset;
        for i in 0..self.m {
            if !x.bits[i] {
                continue;
            }
            e += self.q[i][i];
            for j in (i + 1)..self.m {
                if x.bits[j] {
                    e += 2.0 * self.q[i][j];
                }
            }
        }
        Ok(e)
    }

    /// Energy change of flipping bit `i` of `x`, in O(m) via row `i`.
    pub(crate) fn flip_delta(&self, x: &[bool], i: usize) -> f64 {
        let sign = if x[i] { -1.0 } else { 1.0 };
        let mut cross = 0.0;
        let row = &self.q[i];
        for (j, &xj) in x.iter().enumerate() {
            if xj && j != i {
                cross += row[j];
            }
        }
        sign * (row[i] + 2.0 * cross)
    }
}

/// Objective from information metrics alone: diagonal `-mi[i]`,
/// off-diagonal the symmetrized `-cmi[i][j]`.
pub fn build_miqubo(stats: &MiStats) -> Result<QuboMatrix> {
    build_blended(stats, None)
}

/// Objective with the counterfactual term: diagonal `-mi[i] - lambda * e[i]`,
/// off-diagonal as in [`build_miqubo`]. `lambda = 0` reproduces the
/// information-only matrix bit for bit.
pub fn build_caqubo(
    stats: &MiStats,
    scores: &CounterfactualScores,
    lambda: f64,
) -> Result<QuboMatrix> {
    if scores.deltas.len() != stats.len() {
        return Err(Error::Shape(format!(
            "counterfactual scores length {} != stats length {}",
            scores.deltas.len(),
            stats.len()
        )));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidParam(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    build_blended(stats, Some((&scores.deltas, lambda)))
}

fn build_blended(stats: &MiStats, counterfactual: Option<(&[f64], f64)>) -> Result<QuboMatrix> {
    let m = stats.len();
    if stats.cmi.len() != m || stats.cmi.iter().any(|row| row.len() != m) {
        return Err(Error::Shape(format!("cmi matrix must be {m}x{m}")));
    }
    let mut q = vec![vec![0.0; m]; m];
    for (i, row) in q.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = if i == j {
                match counterfactual {
                    Some((deltas, lambda)) if lambda != 0.0 => -stats.mi[i] - lambda * deltas[i],
                    _ => -stats.mi[i],
                }
            } else {
                // Commutative sum keeps q[i][j] and q[j][i] bit-identical.
                -(stats.cmi[i][j] + stats.cmi[j][i]) / 2.0
            };
        }
    }
    let provenance = match counterfactual {
        Some((_, lambda)) => format!("caqubo(lambda={lambda})"),
        None => "miqubo".to_string(),
    };
    Ok(QuboMatrix {
        m,
        q,
        offset: 0.0,
        provenance,
    })
}

/// Multiply every coefficient and the offset by `mu > 0`.
pub fn scale(qm: &QuboMatrix, mu: f64) -> Result<QuboMatrix> {
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::InvalidParam(format!("mu must be > 0, got {mu}")));
    }
    let q =
        qm.q.iter()
            .map(|row| row.iter().map(|&v| v * mu).collect())
            .collect();
    Ok(QuboMatrix {
        m: qm.m,
        q,
        offset: qm.offset * mu,
        provenance: format!("{} -> scaled(mu={mu})", qm.provenance),
    })
}

/// Add the soft cardinality constraint `gamma * (popcount(x) - k)^2`:
/// `gamma * (1 - 2k)` on the diagonal, `gamma` on every off-diagonal pair,
/// and `gamma * k^2` on the offset.
pub fn add_cardinality_penalty(qm: &QuboMatrix, k: usize, gamma: f64) -> Result<QuboMatrix> {
    if k < 1 || k > qm.m {
        return Err(Error::InvalidParam(format!(
            "k must be in 1..={}, got {k}",
            qm.m
        )));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    let mut q = qm.q.clone();
    let k_f = k as f64;
    for (i, row) in q.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell += if i == j {
                gamma * (1.0 - 2.0 * k_f)
            } else {
                gamma
            };
        }
    }
    Ok(QuboMatrix {
        m: qm.m,
        q,
        offset: qm.offset + gamma * k_f * k_f,
        provenance: format!("{} -> penalized(k={k},gamma={gamma})", qm.provenance),
    })
}

/// Dump format: optional `# provenance: ...` comment, a `m offset` header
/// line, then one `i j value` line per stored upper-triangle nonzero.
pub fn save_qubo(qm: &QuboMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "# provenance: {}", qm.provenance).map_err(io_err)?;
    writeln!(out, "{} {}", qm.m, qm.offset).map_err(io_err)?;
    for i in 0..qm.m {
        for j in i..qm.m {
            let v = qm.q[i][j];
            if v != 0.0 {
                writeln!(out, "{i} {j} {v}").map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

pub fn load_qubo(path: impl AsRef<Path>) -> Result<QuboMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut provenance = "dump".to_string();
    let mut header: Option<(usize, f64)> = None;
    let mut qm: Option<QuboMatrix> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(p) = comment.trim().strip_prefix("provenance:") {
                provenance = p.trim().to_string();
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if header.is_none() {
            if fields.len() != 2 {
                return Err(malformed(lineno, "expected header `m offset`".to_string()));
            }
            let m: usize = fields[0]
                .parse()
                .map_err(|_| malformed(lineno, format!("bad size {:?}", fields[0])))?;
            let offset: f64 = fields[1]
                .parse()
                .map_err(|_| malformed(lineno, format!("bad offset {:?}", fields[1])))?;
            header = Some((m, offset));
            let mut z = QuboMatrix::zero(m);
            z.offset = offset;
            z.provenance = provenance.clone();
            qm = Some(z);
            continue;
        }
        let qm_ref = qm.as_mut().unwrap();
        if fields.len() != 3 {
            return Err(malformed(lineno, "expected `i j value`".to_string()));
        }
        let i: usize = fields[0]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad index {:?}", fields[0])))?;
        let j: usize = fields[1]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad index {:?}", fields[1])))?;
        let v: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad value {:?}", fields[2])))?;
        if i >= qm_ref.m || j >= qm_ref.m {
            return Err(malformed(
                lineno,
                format!("index ({i}, {j}) outside size {}", qm_ref.m),
            ));
        }
        qm_ref.q[i][j] = v;
        qm_ref.q[j][i] = v;
    }
    qm.ok_or_else(|| malformed(0, "missing header".to_string()))
}
