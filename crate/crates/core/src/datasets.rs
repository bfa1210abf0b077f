//! Holdout splitting of the interaction matrix and a planted-feature
//! synthetic generator for end-to-end testing at desk scale.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Per-user train/test partition of a URM. Train and test have the same
/// shape, are entrywise disjoint, and union back to the original matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub train: SparseMatrix,
    pub test: SparseMatrix,
    pub ratio: f64,
    pub seed: u64,
}

impl HoldoutSplit {
    /// Reassemble a split from already-partitioned matrices (for example
    /// files written by an earlier `split` run). The ratio is derived from
    /// the observed interaction counts.
    pub fn from_matrices(train: SparseMatrix, test: SparseMatrix) -> Result<Self> {
        if train.n_rows() != test.n_rows() || train.n_cols() != test.n_cols() {
            return Err(Error::Shape(format!(
                "train {}x{} and test {}x{} must have identical shape",
                train.n_rows(),
                train.n_cols(),
                test.n_rows(),
                test.n_cols()
            )));
        }
        let total = train.nnz() + test.nnz();
        let ratio = if total == 0 {
            0.5
        } else {
            train.nnz() as f64 / total as f64
        };
        Ok(HoldoutSplit {
            train,
            test,
            ratio,
            seed: 0,
        })
    }
}

/// Split each user's interactions at `ratio` (train share). Users with a
/// single interaction keep it in train; for everyone else the test size is
/// `round((1 - ratio) * n_u)` clamped to `[1, n_u - 1]`. Deterministic in
/// `seed`.
pub fn split_holdout(urm: &SparseMatrix, ratio: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParam(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = SparseMatrix::zeros(urm.n_rows(), urm.n_cols());
    let mut test = SparseMatrix::zeros(urm.n_rows(), urm.n_cols());

    for user in 0..urm.n_rows() {
        let row = urm.row(user);
        let n_u = row.len();
        if n_u == 0 {
            continue;
        }
        let n_test = if n_u < 2 {
            0
        } else {
            // Round half up, then keep both sides non-empty.
            let raw = ((1.0 - ratio) * n_u as f64 + 0.5).floor() as usize;
            raw.clamp(1, n_u - 1)
        };
        let mut order: Vec<usize> = (0..n_u).collect();
        order.shuffle(&mut rng);
        let mut to_test = vec![false; n_u];
        for &pos in order.iter().take(n_test) {
            to_test[pos] = true;
        }
        for (pos, &(item, value)) in row.iter().enumerate() {
            if to_test[pos] {
                test.push_sorted(user, item, value);
            } else {
                train.push_sorted(user, item, value);
            }
        }
    }

    Ok(HoldoutSplit {
        train,
        test,
        ratio,
        seed,
    })
}

/// Parameters of the planted-feature generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_features: usize,
    /// Number of latent item clusters, each exposed as one indicator feature.
    pub n_informative: usize,
    /// Bernoulli rate of the remaining noise feature columns.
    pub noise_rate: f64,
    /// Target interactions per user as a fraction of the item count.
    pub interaction_density: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_informative > self.n_features {
            return Err(Error::InvalidParam(format!(
                "n_informative {} exceeds n_features {}",
                self.n_informative, self.n_features
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidParam(format!(
                "noise_rate must be in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if !(self.interaction_density > 0.0 && self.interaction_density < 1.0) {
            return Err(Error::InvalidParam(format!(
                "interaction_density must be in (0, 1), got {}",
                self.interaction_density
            )));
        }
        Ok(())
    }
}

/// Generate `(urm, icm, planted)` where items belong to latent clusters,
/// each cluster is exposed as one indicator column (the planted features),
/// users interact mostly within a preferred cluster, and the remaining
/// columns are Bernoulli noise. Bit-identical output for equal specs.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(SparseMatrix, SparseMatrix, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Which feature columns carry the cluster indicators.
    let mut planted: Vec<usize> =
        rand::seq::index::sample(&mut rng, spec.n_features, spec.n_informative).into_vec();
    planted.sort_unstable();

    let item_cluster: Vec<usize> = (0..spec.n_items)
        .map(|_| {
            if spec.n_informative == 0 {
                0
            } else {
                rng.gen_range(0..spec.n_informative)
            }
        })
        .collect();

    let planted_set: Vec<bool> = {
        let mut s = vec![false; spec.n_features];
        for &f in &planted {
            s[f] = true;
        }
        s
    };
    let mut icm = SparseMatrix::zeros(spec.n_items, spec.n_features);
    for item in 0..spec.n_items {
        for (f, &is_planted) in planted_set.iter().enumerate() {
            let on = if is_planted {
                spec.n_informative > 0 && planted[item_cluster[item]] == f
            } else {
                spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate)
            };
            if on {
                icm.push_sorted(item, f, 1.0);
            }
        }
    }

    // Weighted sampling without replacement (exponential keys): items in a
    // user's preferred cluster get enough extra weight that roughly 80% of
    // the profile stays in-cluster.
    let per_user =
        ((spec.interaction_density * spec.n_items as f64).round() as usize).clamp(1, spec.n_items);
    let preference_weight = 4.0 * (spec.n_informative.saturating_sub(1)).max(1) as f64;
    let mut urm = SparseMatrix::zeros(spec.n_users, spec.n_items);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(spec.n_items);
    for user in 0..spec.n_users {
        let preferred = if spec.n_informative == 0 {
            usize::MAX
        } else {
            rng.gen_range(0..spec.n_informative)
        };
        keyed.clear();
        for (item, &cluster) in item_cluster.iter().enumerate() {
            let w = if spec.n_informative > 0 && cluster == preferred {
                preference_weight
            } else {
                1.0
            };
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            keyed.push((-u.ln() / w, item));
        }
        keyed.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = keyed.iter().take(per_user).map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        for item in chosen {
            urm.push_sorted(user, item, 1.0);
        }
    }

    Ok((urm, icm, planted))
}
