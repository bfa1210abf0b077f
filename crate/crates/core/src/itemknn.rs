//! Content-based item-KNN: cosine similarity over selected (binarized) ICM
//! features with per-row top-K pruning, profile-sum scoring, and nDCG@k
//! evaluation against a holdout split.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::HoldoutSplit;
use crate::error::{Error, Result};
use crate::qubo::SelectionMask;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnParams {
    /// Neighbors kept per item row.
    pub n_neighbors: usize,
    /// Shrink term added to the similarity denominator.
    pub shrink: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            n_neighbors: 100,
            shrink: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Ranking cutoff for nDCG.
    pub cutoff: usize,
    /// Fraction of users evaluated, in (0, 1].
    pub user_sample_fraction: f64,
    /// Seed for the user sample when the fraction is below 1.
    pub sample_seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            cutoff: 10,
            user_sample_fraction: 1.0,
            sample_seed: 0,
        }
    }
}

/// Fitted item-item similarity model.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSimilarityModel {
    /// Item x item similarities, zero diagonal, at most `n_neighbors`
    /// entries per row.
    pub similarities: SparseMatrix,
    pub params: KnnParams,
    pub feature_mask: SelectionMask,
}

impl ItemSimilarityModel {
    pub fn n_items(&self) -> usize {
        self.similarities.n_rows()
    }
}

/// Fit cosine similarities over the masked, binarized ICM columns.
///
/// `similarity(i, j) = |v_i ∩ v_j| / (sqrt(|v_i|) sqrt(|v_j|) + shrink)`
/// where `v_i` is the set of selected features of item `i`. Each row keeps
/// the `n_neighbors` largest values, ties resolved toward the lower item
/// index, and the diagonal is forced to zero.
pub fn fit_item_knn(
    icm: &SparseMatrix,
    mask: &SelectionMask,
    params: &KnnParams,
) -> Result<ItemSimilarityModel> {
    if mask.len() != icm.n_cols() {
        return Err(Error::Shape(format!(
            "mask length {} != feature count {}",
            mask.len(),
            icm.n_cols()
        )));
    }
    if params.n_neighbors < 1 {
        return Err(Error::InvalidParam("n_neighbors must be >= 1".to_string()));
    }
    if params.shrink.is_nan() || params.shrink < 0.0 {
        return Err(Error::InvalidParam("shrink must be >= 0".to_string()));
    }
    if mask.popcount() == 0 {
        return Err(Error::EmptyMask);
    }

    let n_items = icm.n_rows();

    // Selected features per item, and the inverted index feature -> items.
    let mut item_features: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    let mut feature_items: Vec<Vec<usize>> = vec![Vec::new(); icm.n_cols()];
    for (item, features) in item_features.iter_mut().enumerate() {
        for &(f, v) in icm.row(item) {
            if mask.bits[f] && v != 0.0 {
                features.push(f);
                feature_items[f].push(item);
            }
        }
    }
    let norms: Vec<f64> = item_features
        .iter()
        .map(|fs| (fs.len() as f64).sqrt())
        .collect();

    let rows: Vec<Vec<(usize, f64)>> = (0..n_items)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n_items], Vec::<usize>::new()),
            |(overlaps, touched), item| {
                for &f in &item_features[item] {
                    for &other in &feature_items[f] {
                        if other != item {
                            if overlaps[other] == 0 {
                                touched.push(other);
                            }
                            overlaps[other] += 1;
                        }
                    }
                }
                let mut candidates: Vec<(usize, f64)> = touched
                    .iter()
                    .map(|&other| {
                        // Cauchy-Schwarz caps the cosine at 1; the clamp
                        // only absorbs the sqrt rounding of identical rows.
                        let sim = (overlaps[other] as f64
                            / (norms[item] * norms[other] + params.shrink))
                            .min(1.0);
                        (other, sim)
                    })
                    .filter(|&(_, sim)| sim > 0.0)
                    .collect();
                for &other in touched.iter() {
                    overlaps[other] = 0;
                }
                touched.clear();
                candidates
                    .sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                candidates.truncate(params.n_neighbors);
                candidates.sort_unstable_by_key(|&(j, _)| j);
                candidates
            },
        )
        .collect();

    let mut similarities = SparseMatrix::zeros(n_items, n_items);
    for (item, row) in rows.into_iter().enumerate() {
        for (j, sim) in row {
            similarities.push_sorted(item, j, sim);
        }
    }

    Ok(ItemSimilarityModel {
        similarities,
        params: params.clone(),
        feature_mask: mask.clone(),
    })
}

/// Rank unseen items for each user: `score(u, j)` is the sum of
/// `similarity(j, l)` over the user's training profile items `l`. Items
/// already in the profile and items with zero score are omitted; ties are
/// resolved toward the lower item index.
pub fn score_users(
    model: &ItemSimilarityModel,
    urm_train: &SparseMatrix,
    users: &[usize],
    top_n: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if model.n_items() != urm_train.n_cols() {
        return Err(Error::Shape(format!(
            "model items {} != training items {}",
            model.n_items(),
            urm_train.n_cols()
        )));
    }
    let n_items = model.n_items();
    // incoming.row(l) lists the items j whose similarity row contains l,
    // i.e. the contributions item l makes to other items' scores.
    let incoming = model.similarities.transpose();

    let ranked: Vec<Vec<(usize, f64)>> = users
        .par_iter()
        .map_init(
            || (vec![0.0f64; n_items], Vec::<usize>::new()),
            |(scores, touched), &user| {
                let profile = urm_train.row(user);
                for &(item, _) in profile {
                    for &(j, sim) in incoming.row(item) {
                        if scores[j] == 0.0 {
                            touched.push(j);
                        }
                        scores[j] += sim;
                    }
                }
                let mut candidates: Vec<(usize, f64)> = touched
                    .iter()
                    .filter(|&&j| {
                        scores[j] > 0.0 && profile.binary_search_by_key(&j, |&(c, _)| c).is_err()
                    })
                    .map(|&j| (j, scores[j]))
                    .collect();
                for &j in touched.iter() {
                    scores[j] = 0.0;
                }
                touched.clear();
                candidates
                    .sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                candidates.truncate(top_n);
                candidates
            },
        )
        .collect();
    Ok(ranked)
}

/// The evaluated user sample: all users at fraction 1, otherwise a
/// deterministic shuffle prefix, returned in ascending order.
pub fn sample_users(n_users: usize, eval: &EvalParams) -> Result<Vec<usize>> {
    if !(eval.user_sample_fraction > 0.0 && eval.user_sample_fraction <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "user_sample_fraction must be in (0, 1], got {}",
            eval.user_sample_fraction
        )));
    }
    if eval.user_sample_fraction == 1.0 {
        return Ok((0..n_users).collect());
    }
    let n_sampled =
        ((eval.user_sample_fraction * n_users as f64).round() as usize).clamp(1, n_users.max(1));
    let mut indices: Vec<usize> = (0..n_users).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(eval.sample_seed);
    indices.shuffle(&mut rng);
    indices.truncate(n_sampled);
    indices.sort_unstable();
    Ok(indices)
}

/// Mean nDCG@cutoff over the sampled users that have a non-empty test set.
///
/// Per user, `DCG = sum_{r=1..cutoff} rel_r / log2(r + 1)` with binary
/// relevance from the test set, and `IDCG` assumes all test items at the
/// top. Errors when no sampled user is evaluable.
pub fn ndcg_at_k(
    model: &ItemSimilarityModel,
    split: &HoldoutSplit,
    eval: &EvalParams,
) -> Result<f64> {
    if eval.cutoff < 1 {
        return Err(Error::InvalidParam("cutoff must be >= 1".to_string()));
    }
    if model.n_items() != split.train.n_cols() {
        return Err(Error::Shape(format!(
            "model items {} != split items {}",
            model.n_items(),
            split.train.n_cols()
        )));
    }
    let users = sample_users(split.train.n_rows(), eval)?;
    let evaluable: Vec<usize> = users
        .into_iter()
        .filter(|&u| !split.test.row(u).is_empty())
        .collect();
    if evaluable.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let ranked = score_users(model, &split.train, &evaluable, eval.cutoff)?;

    let mut total = 0.0;
    for (&user, list) in evaluable.iter().zip(&ranked) {
        let test_row = split.test.row(user);
        let mut dcg = 0.0;
        for (rank0, &(item, _)) in list.iter().enumerate() {
            if test_row.binary_search_by_key(&item, |&(c, _)| c).is_ok() {
                dcg += 1.0 / ((rank0 + 2) as f64).log2();
            }
        }
        let ideal_hits = test_row.len().min(eval.cutoff);
        let idcg: f64 = (0..ideal_hits).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        total += dcg / idcg;
    }
    Ok(total / evaluable.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::HoldoutSplit;

    fn icm(n_items: usize, n_features: usize, entries: &[(usize, usize)]) -> SparseMatrix {
        SparseMatrix::from_triples(
            n_items,
            n_features,
            entries.iter().map(|&(i, f)| (i, f, 1.0)),
        )
        .unwrap()
    }

    fn split_from(train: SparseMatrix, test: SparseMatrix) -> HoldoutSplit {
        HoldoutSplit {
            train,
            test,
            ratio: 0.8,
            seed: 0,
        }
    }

    #[test]
    fn identical_single_feature_items_have_similarity_one() {
        let icm = icm(2, 1, &[(0, 0), (1, 0)]);
        let model = fit_item_knn(&icm, &SelectionMask::all(1), &KnnParams::default()).unwrap();
        assert_eq!(model.similarities.get(0, 1), 1.0);
        assert_eq!(model.similarities.get(1, 0), 1.0);
        assert_eq!(model.similarities.get(0, 0), 0.0);
    }

    #[test]
    fn disjoint_items_have_no_stored_similarity() {
        let icm = icm(2, 2, &[(0, 0), (1, 1)]);
        let model = fit_item_knn(&icm, &SelectionMask::all(2), &KnnParams::default()).unwrap();
        assert_eq!(model.similarities.nnz(), 0);
    }

    #[test]
    fn cosine_half_for_one_common_of_two() {
        // (1,1,0) . (1,0,1) = 1, norms sqrt(2) each -> 1/2.
        let icm = icm(2, 3, &[(0, 0), (0, 1), (1, 0), (1, 2)]);
        let model = fit_item_knn(&icm, &SelectionMask::all(3), &KnnParams::default()).unwrap();
        let sim = model.similarities.get(0, 1);
        assert!((sim - 0.5).abs() <= 1e-12, "got {sim}");
    }

    #[test]
    fn empty_mask_refused() {
        let icm = icm(2, 2, &[(0, 0)]);
        let err = fit_item_knn(&icm, &SelectionMask::none(2), &KnnParams::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn top_k_keeps_lower_index_on_ties() {
        // Item 0 ties with items 1, 2, 3 (identical vectors); keep 2 neighbors.
        let icm = icm(4, 1, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        let params = KnnParams {
            n_neighbors: 2,
            shrink: 0.0,
        };
        let model = fit_item_knn(&icm, &SelectionMask::all(1), &params).unwrap();
        let row: Vec<usize> = model.similarities.row(0).iter().map(|&(j, _)| j).collect();
        assert_eq!(row, vec![1, 2]);
    }

    #[test]
    fn mask_restriction_equals_physical_truncation() {
        let icm_full = icm(
            5,
            4,
            &[
                (0, 0),
                (0, 2),
                (1, 2),
                (1, 3),
                (2, 0),
                (2, 1),
                (3, 3),
                (4, 0),
                (4, 2),
            ],
        );
        let mask = SelectionMask::from_indices(4, &[0, 2]).unwrap();
        let masked = fit_item_knn(&icm_full, &mask, &KnnParams::default()).unwrap();

        // Physically truncate columns 0 and 2 into a 2-column ICM.
        let truncated = SparseMatrix::from_triples(
            5,
            2,
            icm_full
                .iter_entries()
                .filter(|&(_, f, _)| f == 0 || f == 2)
                .map(|(i, f, v)| (i, if f == 0 { 0 } else { 1 }, v)),
        )
        .unwrap();
        let direct =
            fit_item_knn(&truncated, &SelectionMask::all(2), &KnnParams::default()).unwrap();
        assert_eq!(masked.similarities, direct.similarities);
    }

    #[test]
    fn zero_column_leaves_model_bit_identical() {
        let base = icm(3, 2, &[(0, 0), (1, 0), (2, 1)]);
        let padded = icm(3, 3, &[(0, 0), (1, 0), (2, 1)]);
        let a = fit_item_knn(&base, &SelectionMask::all(2), &KnnParams::default()).unwrap();
        let b = fit_item_knn(&padded, &SelectionMask::all(3), &KnnParams::default()).unwrap();
        assert_eq!(a.similarities, b.similarities);
    }

    #[test]
    fn single_edge_propagates_to_ranked_list() {
        // User's profile = {item 0}; similarity(1, 0) = 0.9 is the only edge.
        let mut sims = SparseMatrix::zeros(3, 3);
        sims.push_sorted(1, 0, 0.9);
        let model = ItemSimilarityModel {
            similarities: sims,
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(1, 3, vec![(0, 0, 1.0)]).unwrap();
        let ranked = score_users(&model, &train, &[0], 10).unwrap();
        assert_eq!(ranked[0], vec![(1, 0.9)]);
    }

    #[test]
    fn empty_profile_yields_empty_list() {
        let model = ItemSimilarityModel {
            similarities: SparseMatrix::zeros(3, 3),
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::zeros(2, 3);
        let ranked = score_users(&model, &train, &[0, 1], 5).unwrap();
        assert!(ranked[0].is_empty());
        assert!(ranked[1].is_empty());
    }

    #[test]
    fn equal_scores_rank_lower_index_first() {
        let mut sims = SparseMatrix::zeros(4, 4);
        sims.push_sorted(2, 0, 0.5);
        sims.push_sorted(1, 0, 0.5);
        let model = ItemSimilarityModel {
            similarities: sims,
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(1, 4, vec![(0, 0, 1.0)]).unwrap();
        let ranked = score_users(&model, &train, &[0], 10).unwrap();
        let items: Vec<usize> = ranked[0].iter().map(|&(j, _)| j).collect();
        assert_eq!(items, vec![1, 2]);
    }

    #[test]
    fn profile_items_are_excluded() {
        let mut sims = SparseMatrix::zeros(2, 2);
        sims.push_sorted(0, 1, 0.7);
        sims.push_sorted(1, 0, 0.7);
        let model = ItemSimilarityModel {
            similarities: sims,
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(1, 2, vec![(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let ranked = score_users(&model, &train, &[0], 10).unwrap();
        assert!(ranked[0].is_empty());
    }

    #[test]
    fn perfect_ranking_scores_one() {
        // Two items similar to the profile item land at the top; both in test.
        let icm_m = icm(4, 1, &[(0, 0), (1, 0), (2, 0)]);
        let model = fit_item_knn(&icm_m, &SelectionMask::all(1), &KnnParams::default()).unwrap();
        let train = SparseMatrix::from_triples(1, 4, vec![(0, 0, 1.0)]).unwrap();
        let test = SparseMatrix::from_triples(1, 4, vec![(0, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let ndcg = ndcg_at_k(&model, &split_from(train, test), &EvalParams::default()).unwrap();
        assert_eq!(ndcg, 1.0);
    }

    #[test]
    fn single_relevant_at_rank_three_scores_half() {
        // Ranked list [1, 2, 3] by descending similarity; only 3 is relevant.
        let mut sims = SparseMatrix::zeros(5, 5);
        sims.push_sorted(1, 0, 0.9);
        sims.push_sorted(2, 0, 0.8);
        sims.push_sorted(3, 0, 0.7);
        let model = ItemSimilarityModel {
            similarities: sims,
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(1, 5, vec![(0, 0, 1.0)]).unwrap();
        let test = SparseMatrix::from_triples(1, 5, vec![(0, 3, 1.0)]).unwrap();
        let ndcg = ndcg_at_k(&model, &split_from(train, test), &EvalParams::default()).unwrap();
        assert!((ndcg - 0.5).abs() <= 1e-12, "got {ndcg}");
    }

    #[test]
    fn relevant_below_cutoff_scores_zero() {
        let mut sims = SparseMatrix::zeros(4, 4);
        sims.push_sorted(1, 0, 0.9);
        let model = ItemSimilarityModel {
            similarities: sims,
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(1, 4, vec![(0, 0, 1.0)]).unwrap();
        let test = SparseMatrix::from_triples(1, 4, vec![(0, 2, 1.0)]).unwrap();
        let split = split_from(train, test);
        let eval = EvalParams {
            cutoff: 1,
            ..EvalParams::default()
        };
        // Item 2 has zero score and never enters the list; nDCG is 0.
        assert_eq!(ndcg_at_k(&model, &split, &eval).unwrap(), 0.0);
    }

    #[test]
    fn no_evaluable_users_is_an_error() {
        let model = ItemSimilarityModel {
            similarities: SparseMatrix::zeros(3, 3),
            params: KnnParams::default(),
            feature_mask: SelectionMask::all(1),
        };
        let train = SparseMatrix::from_triples(2, 3, vec![(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let test = SparseMatrix::zeros(2, 3);
        let err = ndcg_at_k(&model, &split_from(train, test), &EvalParams::default()).unwrap_err();
        assert!(matches!(err, Error::NoEvaluableUsers));
    }

    #[test]
    fn ndcg_invariant_under_relabeling_zero_score_irrelevant_items() {
        // Items 3 and 4 have zero score and zero relevance; swapping their
        // identities must not change the metric.
        let build = |a: usize, b: usize| {
            let mut sims = SparseMatrix::zeros(5, 5);
            sims.push_sorted(1, 0, 0.9);
            sims.push_sorted(2, 0, 0.4);
            let model = ItemSimilarityModel {
                similarities: sims,
                params: KnnParams::default(),
                feature_mask: SelectionMask::all(1),
            };
            let train = SparseMatrix::from_triples(1, 5, vec![(0, 0, 1.0)]).unwrap();
            let test = SparseMatrix::from_triples(1, 5, vec![(0, 2, 1.0)]).unwrap();
            let _ = (a, b); // relabeled items never appear in sims or test
            ndcg_at_k(&model, &split_from(train, test), &EvalParams::default()).unwrap()
        };
        assert_eq!(build(3, 4), build(4, 3));
    }

    #[test]
    fn similarities_stay_in_unit_interval_and_ndcg_in_range() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n_items = rng.gen_range(5..40);
            let n_features = rng.gen_range(2..10);
            let n_users = rng.gen_range(3..30);
            let icm_triples: Vec<(usize, usize, f64)> = (0..n_items)
                .flat_map(|i| (0..n_features).map(move |f| (i, f)))
                .filter(|_| rng.gen_bool(0.3))
                .map(|(i, f)| (i, f, 1.0))
                .collect();
            let icm = SparseMatrix::from_triples(n_items, n_features, icm_triples).unwrap();
            let k = rng.gen_range(1..8);
            let params = KnnParams {
                n_neighbors: k,
                shrink: 0.0,
            };
            let model = fit_item_knn(&icm, &SelectionMask::all(n_features), &params).unwrap();
            for (i, j, sim) in model.similarities.iter_entries() {
                assert!(i != j, "diagonal must stay zero");
                assert!((0.0..=1.0).contains(&sim), "sim({i},{j}) = {sim}");
            }
            for i in 0..n_items {
                assert!(model.similarities.row(i).len() <= k);
            }

            let urm_triples: Vec<(usize, usize, f64)> = (0..n_users)
                .flat_map(|u| (0..n_items).map(move |i| (u, i)))
                .filter(|_| rng.gen_bool(0.2))
                .map(|(u, i)| (u, i, 1.0))
                .collect();
            let urm = SparseMatrix::from_triples(n_users, n_items, urm_triples).unwrap();
            if let Ok(split) = crate::datasets::split_holdout(&urm, 0.7, 3) {
                match ndcg_at_k(&model, &split, &EvalParams::default()) {
                    Ok(ndcg) => assert!((0.0..=1.0).contains(&ndcg), "ndcg {ndcg}"),
                    Err(Error::NoEvaluableUsers) => {}
                    Err(e) => panic!("unexpected error: {e}"),
                }
            }
        }
    }

    #[test]
    fn sample_users_is_deterministic_and_sorted() {
        let eval = EvalParams {
            cutoff: 10,
            user_sample_fraction: 0.3,
            sample_seed: 99,
        };
        let a = sample_users(50, &eval).unwrap();
        let b = sample_users(50, &eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
