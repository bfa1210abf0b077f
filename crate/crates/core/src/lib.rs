//! Feature selection for recommender systems via QUBO optimization.
//!
//! The toolkit selects item-content features for an item-based KNN
//! recommender by minimizing a quadratic binary objective whose diagonal
//! blends per-feature mutual information with counterfactual nDCG impact
//! scores, and whose off-diagonal carries conditional mutual information.
//! Instances are solved with simulated annealing (an exhaustive oracle is
//! available at small sizes), optionally partitioned into contiguous blocks
//! and merged, with repeated-run voting to stabilize the stochastic solver.
//!
//! Modules follow the data flow:
//!
//! * [`sparse`] / [`datasets`] — sparse interaction/content matrices, TSV
//!   I/O, holdout splitting, and a planted-feature synthetic generator.
//! * [`itemknn`] — the content-based item-KNN model and nDCG@k evaluation.
//! * [`infometrics`] — discrete MI/CMI estimators and the target variable.
//! * [`counterfactual`] — leave-one-feature-out nDCG deltas.
//! * [`qubo`] — QUBO matrices: builders, scaling, cardinality penalty,
//!   energy evaluation, and a plain-text dump format.
//! * [`annealing`] — simulated annealing, exhaustive search, voting, and
//!   partition-and-merge.
//! * [`pipeline`] — end-to-end orchestration, grid experiments, stage
//!   caching, and report emission.

pub mod annealing;
pub mod counterfactual;
pub mod datasets;
pub mod error;
pub mod infometrics;
pub mod itemknn;
pub mod pipeline;
pub mod qubo;
pub mod sparse;

pub use error::{Error, Result};
pub use sparse::SparseMatrix;
