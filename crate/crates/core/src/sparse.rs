//! Row-compressed sparse matrix used for interaction (URM), item-content
//! (ICM), and item-similarity data, plus the TSV triple file format.
//!
//! Invariants maintained by every constructor:
//! * each row holds `(col, value)` pairs strictly increasing by column,
//! * no explicit zeros are stored,
//! * all stored values are finite and non-negative.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    /// An all-zero matrix of the given shape.
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            rows: vec![Vec::new(); n_rows],
        }
    }

    /// Build from `(row, col, value)` triples. Zero values are dropped;
    /// duplicate `(row, col)` pairs, out-of-range indices, and negative or
    /// non-finite values are rejected.
    pub fn from_triples(
        n_rows: usize,
        n_cols: usize,
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut m = SparseMatrix::zeros(n_rows, n_cols);
        for (r, c, v) in triples {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "value at ({r}, {c}) must be finite and non-negative, got {v}"
                )));
            }
            if v != 0.0 {
                m.rows[r].push((c, v));
            }
        }
        for (r, row) in m.rows.iter_mut().enumerate() {
            row.sort_unstable_by_key(|&(c, _)| c);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidParam(format!("duplicate column in row {r}")));
            }
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Entries of row `r`, sorted by column index.
    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.rows[r]
            .binary_search_by_key(&c, |&(col, _)| col)
            .map(|i| self.rows[r][i].1)
            .unwrap_or(0.0)
    }

    /// Number of stored entries per column.
    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_cols];
        for row in &self.rows {
            for &(c, _) in row {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut rows = vec![Vec::new(); self.n_cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                rows[c].push((r, v));
            }
        }
        // Row-major traversal emits each transposed row in ascending order.
        SparseMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            rows,
        }
    }

    /// Append an entry to row `r`; the caller guarantees ascending column
    /// order within the row and a positive finite value.
    pub fn push_sorted(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(c < self.n_cols);
        debug_assert!(v.is_finite() && v > 0.0);
        debug_assert!(self.rows[r].last().is_none_or(|&(last, _)| last < c));
        self.rows[r].push((c, v));
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
    }
}

/// Load a TSV triple file: one `row<TAB>col<TAB>value` entry per line,
/// `#`-prefixed comment lines skipped. The shape is taken from
/// `expected_shape` when given, else from a leading `# shape: R C` comment,
/// else inferred as `(max_row + 1, max_col + 1)`.
pub fn load_tsv(
    path: impl AsRef<Path>,
    expected_shape: Option<(usize, usize)>,
) -> Result<SparseMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let malformed = |line: usize, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut header_shape: Option<(usize, usize)> = None;
    let mut triples: Vec<(usize, usize, f64, usize)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
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
            // Only a shape comment seen before any data line is meaningful.
            if triples.is_empty() && header_shape.is_none() {
                if let Some(rest) = comment.trim().strip_prefix("shape:") {
                    let dims: Vec<_> = rest.split_whitespace().collect();
                    if dims.len() == 2 {
                        if let (Ok(r), Ok(c)) = (dims[0].parse(), dims[1].parse()) {
                            header_shape = Some((r, c));
                        }
                    }
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let row: usize = fields[0]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad row index {:?}", fields[0])))?;
        let col: usize = fields[1]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad column index {:?}", fields[1])))?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad value {:?}", fields[2])))?;
        if !value.is_finite() || value < 0.0 {
            return Err(malformed(
                lineno,
                format!("value must be finite and non-negative, got {value}"),
            ));
        }
        triples.push((row, col, value, lineno));
    }

    let shape = expected_shape.or(header_shape).unwrap_or_else(|| {
        let r = triples.iter().map(|t| t.0 + 1).max().unwrap_or(0);
        let c = triples.iter().map(|t| t.1 + 1).max().unwrap_or(0);
        (r, c)
    });
    let (n_rows, n_cols) = shape;

    // Duplicate (row, col) pairs are rejected even when one of the entries
    // is an explicit zero.
    let mut seen: Vec<(usize, usize, usize)> = triples.iter().map(|t| (t.0, t.1, t.3)).collect();
    seen.sort_unstable_by_key(|&(r, c, _)| (r, c));
    if let Some(w) = seen.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
        let lineno = w[0].2.max(w[1].2);
        return Err(malformed(lineno, format!("duplicate entry ({}, {})", w[0].0, w[0].1)));
    }

    let mut m = SparseMatrix::zeros(n_rows, n_cols);
    for &(r, c, v, lineno) in &triples {
        if r >= n_rows || c >= n_cols {
            return Err(malformed(
                lineno,
                format!("index ({r}, {c}) outside shape {n_rows}x{n_cols}"),
            ));
        }
        if v != 0.0 {
            m.rows[r].push((c, v));
        }
    }
    for row in &mut m.rows {
        row.sort_unstable_by_key(|&(c, _)| c);
    }
    Ok(m)
}

/// Write a matrix as a TSV triple file with a `# shape: R C` header so the
/// shape survives a round trip even when trailing rows/columns are empty.
pub fn save_tsv(m: &SparseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "# shape: {} {}", m.n_rows(), m.n_cols()).map_err(io_err)?;
    for (r, c, v) in m.iter_entries() {
        writeln!(out, "{r}\t{c}\t{v}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_triples() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t0\t1\n1\t2\t1\n");
        let m = load_tsv(&path, Some((2, 3))).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 2), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn empty_file_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "");
        let m = load_tsv(&path, Some((5, 4))).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (5, 4));
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn out_of_bounds_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t7\t1\n");
        let err = load_tsv(&path, Some((2, 3))).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_entry_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t1\t1\n0\t1\t2\n");
        let err = load_tsv(&path, None).unwrap_err();
        match err {
            Error::Malformed { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"), "msg: {msg}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_with_explicit_zero_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t1\t0\n0\t1\t2\n");
        let err = load_tsv(&path, None).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "got {err}");
    }

    #[test]
    fn malformed_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t0\t1\nnot-a-triple\n");
        let err = load_tsv(&path, None).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn shape_inferred_from_max_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "2\t5\t1\n");
        let m = load_tsv(&path, None).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (3, 6));
    }

    #[test]
    fn explicit_zero_values_not_stored() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "0\t0\t0\n0\t1\t2.5\n");
        let m = load_tsv(&path, Some((1, 2))).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 2.5);
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = SparseMatrix::from_triples(
            4,
            7,
            vec![(0, 3, 1.0), (0, 6, 0.125), (2, 1, std::f64::consts::PI)],
        )
        .unwrap();
        let path = dir.path().join("rt.tsv");
        save_tsv(&m, &path).unwrap();
        let back = load_tsv(&path, None).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn expected_shape_overrides_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "m.tsv", "# shape: 2 2\n0\t0\t1\n");
        let m = load_tsv(&path, Some((9, 9))).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (9, 9));
    }

    #[test]
    fn transpose_round_trip() {
        let m =
            SparseMatrix::from_triples(3, 5, vec![(0, 4, 1.0), (1, 0, 2.0), (2, 2, 1.0)]).unwrap();
        let t = m.transpose();
        assert_eq!((t.n_rows(), t.n_cols()), (5, 3));
        assert_eq!(t.get(4, 0), 1.0);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn negative_value_rejected() {
        let err = SparseMatrix::from_triples(1, 1, vec![(0, 0, -1.0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidParam(_)));
    }
}
