//! Leave-one-feature-out impact analysis: refit the item-KNN model without
//! each feature in turn and record the nDCG delta against the full-feature
//! baseline. Positive delta means the feature helps; removing it costs
//! ranking quality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::HoldoutSplit;
use crate::error::{Error, Result};
use crate::itemknn::{fit_item_knn, ndcg_at_k, EvalParams, KnnParams};
use crate::qubo::SelectionMask;
use crate::sparse::SparseMatrix;

/// Per-feature counterfactual nDCG deltas plus the evaluation context they
/// were measured under. `deltas[i] = base_ndcg - per_feature_ndcg[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualScores {
    pub base_ndcg: f64,
    pub deltas: Vec<f64>,
    /// nDCG of the model refit without feature `i`.
    pub per_feature_ndcg: Vec<f64>,
    pub eval: EvalParams,
    pub knn: KnnParams,
    /// The baseline feature set every leave-one-out run is measured against.
    pub mask_evaluated: SelectionMask,
}

impl CounterfactualScores {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Assemble scores from externally computed deltas (base nDCG unknown).
    pub fn from_deltas(deltas: Vec<f64>) -> Self {
        let m = deltas.len();
        let per_feature_ndcg = deltas.iter().map(|&d| 0.0 - d).collect();
        CounterfactualScores {
            base_ndcg: 0.0,
            deltas,
            per_feature_ndcg,
            eval: EvalParams::default(),
            knn: KnnParams::default(),
            mask_evaluated: SelectionMask::all(m),
        }
    }
}

/// Compute the counterfactual score vector. The same evaluation parameters
/// (and therefore the same deterministic user sample) are used for the base
/// run and every leave-one-out run, so the subtraction compares like with
/// like. `features` restricts which deltas are computed; the rest stay 0.
pub fn counterfactual_scores(
    icm: &SparseMatrix,
    split: &HoldoutSplit,
    knn: &KnnParams,
    eval: &EvalParams,
    features: Option<&[usize]>,
) -> Result<CounterfactualScores> {
    let m = icm.n_cols();
    if m < 2 {
        return Err(Error::DegenerateFeatureSet(m));
    }
    if icm.n_rows() != split.train.n_cols() {
        return Err(Error::Shape(format!(
            "ICM items {} != URM items {}",
            icm.n_rows(),
            split.train.n_cols()
        )));
    }
    let all: Vec<usize>;
    let targets: &[usize] = match features {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&f| f >= m) {
                return Err(Error::Shape(format!(
                    "feature index {bad} outside {m} columns"
                )));
            }
            s
        }
        None => {
            all = (0..m).collect();
            &all
        }
    };

    let full_mask = SelectionMask::all(m);
    let base_model = fit_item_knn(icm, &full_mask, knn)?;
    let base_ndcg = ndcg_at_k(&base_model, split, eval)?;

    let nonzero_col: Vec<bool> = {
        let counts = icm.col_counts();
        counts.iter().map(|&c| c > 0).collect()
    };

    let computed: Vec<(usize, f64)> = targets
        .par_iter()
        .map(|&f| -> Result<(usize, f64)> {
            if !nonzero_col[f] {
                // Removing an all-zero column cannot change the model.
                return Ok((f, base_ndcg));
            }
            let model = fit_item_knn(icm, &full_mask.without(f), knn)?;
            Ok((f, ndcg_at_k(&model, split, eval)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_feature_ndcg = vec![base_ndcg; m];
    for (f, ndcg) in computed {
        per_feature_ndcg[f] = ndcg;
    }
    let deltas = per_feature_ndcg.iter().map(|&n| base_ndcg - n).collect();

    Ok(CounterfactualScores {
        base_ndcg,
        deltas,
        per_feature_ndcg,
        eval: eval.clone(),
        knn: knn.clone(),
        mask_evaluated: full_mask,
    })
}

/// Write `e.tsv`: one `feature<TAB>delta<TAB>ndcg_without_feature` line per
/// feature.
pub fn save_scores_tsv(
    scores: &CounterfactualScores,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for i in 0..scores.len() {
        writeln!(
            out,
            "{i}\t{}\t{}",
            scores.deltas[i], scores.per_feature_ndcg[i]
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// JSON sidecar carrying everything needed to reuse the scores without
/// recomputation: base nDCG, deltas, and the parameters they were measured
/// under.
pub fn save_scores_json(
    scores: &CounterfactualScores,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(scores)
        .map_err(|e| Error::Config(format!("serialize scores: {e}")))?;
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_scores_json(path: impl AsRef<std::path::Path>) -> Result<CounterfactualScores> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("bad scores JSON: {e}"),
    })
}
