//! End-to-end orchestration: load data, split, derive the target, compute
//! MI/CMI and counterfactual scores (cached on disk, keyed by content
//! hashes), build and solve the selection objective over a lambda x k grid,
//! and emit CSV / JSON / markdown reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annealing::{make_partition, partition_solve, SolverConfig, SolverKind};
use crate::counterfactual::{counterfactual_scores, CounterfactualScores};
use crate::datasets::{split_holdout, HoldoutSplit};
use crate::error::{Error, Result};
use crate::infometrics::{build_target, compute_mi_stats, MiStats, TargetVector};
use crate::itemknn::{fit_item_knn, ndcg_at_k, EvalParams, KnnParams};
use crate::qubo::{
    add_cardinality_penalty, build_caqubo, save_mask, scale, CaquboParams, SelectionMask,
};
use crate::sparse::{load_tsv, save_tsv, SparseMatrix};

/// Environment variable overriding the stage-cache directory.
pub const CACHE_DIR_ENV: &str = "CAQUBO_CACHE_DIR";

/// Cardinality penalty weight: a fixed value, or scale-aware
/// `0.5 * max|q|` resolved against the scaled (pre-penalty) objective.
///
/// Keeping the penalty within the data scale matters for single-flip
/// annealing: once the penalty dwarfs the data coefficients, the popcount
/// freezes at temperatures where the data terms are still indistinguishable
/// and the selection quality collapses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaSpec {
    Fixed(f64),
    Auto,
}

impl GammaSpec {
    fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(GammaSpec::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("gamma must be a number or `auto`, got {s:?}")))?;
        Ok(GammaSpec::Fixed(v))
    }

    fn render(&self) -> String {
        match self {
            GammaSpec::Fixed(v) => v.to_string(),
            GammaSpec::Auto => "auto".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub urm: PathBuf,
    pub icm: PathBuf,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub knn_neighbors: usize,
    pub knn_shrink: f64,
    pub eval_cutoff: usize,
    pub eval_user_fraction: f64,
    pub eval_sample_seed: u64,
    pub target: String,
    pub lambda_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub mu: f64,
    pub gamma: GammaSpec,
    pub n_partitions: usize,
    pub solver: String,
    pub sa_sweeps: usize,
    /// `None` derives the scale-aware default per instance.
    pub sa_t_start: Option<f64>,
    pub sa_t_end: f64,
    pub n_runs: usize,
    /// `None` means strict majority.
    pub vote_threshold: Option<usize>,
    pub seed_base: u64,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            urm: PathBuf::new(),
            icm: PathBuf::new(),
            split_ratio: 0.8,
            split_seed: 42,
            knn_neighbors: 100,
            knn_shrink: 0.0,
            eval_cutoff: 10,
            eval_user_fraction: 1.0,
            eval_sample_seed: 7,
            target: "popularity-median".to_string(),
            lambda_grid: Vec::new(),
            k_grid: Vec::new(),
            mu: 1.0,
            gamma: GammaSpec::Fixed(1.0),
            n_partitions: 1,
            solver: "sa".to_string(),
            sa_sweeps: 200,
            sa_t_start: None,
            sa_t_end: 1e-3,
            n_runs: 5,
            vote_threshold: None,
            seed_base: 1,
            output_dir: PathBuf::new(),
            cache_dir: None,
            no_cache: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: bad element {s:?}")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: bad value {value:?}")))
}

impl ExperimentConfig {
    /// Apply one `key=value` setting; keys match the config-file keys and
    /// the CLI flag names one for one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "urm" => self.urm = PathBuf::from(v),
            "icm" => self.icm = PathBuf::from(v),
            "split_ratio" => self.split_ratio = parse_scalar(key, v)?,
            "split_seed" => self.split_seed = parse_scalar(key, v)?,
            "knn_neighbors" => self.knn_neighbors = parse_scalar(key, v)?,
            "knn_shrink" => self.knn_shrink = parse_scalar(key, v)?,
            "eval_cutoff" => self.eval_cutoff = parse_scalar(key, v)?,
            "eval_user_fraction" => self.eval_user_fraction = parse_scalar(key, v)?,
            "eval_sample_seed" => self.eval_sample_seed = parse_scalar(key, v)?,
            "target" => self.target = v.to_string(),
            "lambda_grid" => self.lambda_grid = parse_list(key, v)?,
            "k_grid" => self.k_grid = parse_list(key, v)?,
            "mu" => self.mu = parse_scalar(key, v)?,
            "gamma" => self.gamma = GammaSpec::parse(v)?,
            "n_partitions" => self.n_partitions = parse_scalar(key, v)?,
            "solver" => self.solver = v.to_string(),
            "sa_sweeps" => self.sa_sweeps = parse_scalar(key, v)?,
            "sa_t_start" => {
                self.sa_t_start = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_scalar(key, v)?)
                }
            }
            "sa_t_end" => self.sa_t_end = parse_scalar(key, v)?,
            "n_runs" => self.n_runs = parse_scalar(key, v)?,
            "vote_threshold" => {
                self.vote_threshold = if v.eq_ignore_ascii_case("majority") {
                    None
                } else {
                    Some(parse_scalar(key, v)?)
                }
            }
            "seed_base" => self.seed_base = parse_scalar(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(v)),
            "no_cache" => {
                self.no_cache = match v {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("no_cache: bad value {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file; `#` comments and blank lines
    /// are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = ExperimentConfig::default();
        for (idx, line) in body.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected key=value".to_string(),
            })?;
            config.set(key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.urm.as_os_str().is_empty() || self.icm.as_os_str().is_empty() {
            return Err(Error::Config("urm and icm paths are required".to_string()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is required".to_string()));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid must be non-empty".to_string()));
        }
        if self.k_grid.is_empty() {
            return Err(Error::Config("k_grid must be non-empty".to_string()));
        }
        if self.target != "popularity-median" {
            return Err(Error::Config(format!(
                "unsupported target derivation {:?}",
                self.target
            )));
        }
        match self.solver.as_str() {
            "sa" | "exhaustive" => {}
            other => {
                return Err(Error::Config(format!(
                    "solver must be `sa` or `exhaustive`, got {other:?}"
                )))
            }
        }
        if self.n_runs < 1 {
            return Err(Error::Config("n_runs must be >= 1".to_string()));
        }
        if let Some(t) = self.vote_threshold {
            if t < 1 || t > self.n_runs {
                return Err(Error::Config(format!(
                    "vote_threshold must be in 1..={}, got {t}",
                    self.n_runs
                )));
            }
        }
        if self.n_partitions < 1 {
            return Err(Error::Config("n_partitions must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Canonical key/value rendering, used for hashing and the JSON echo.
    pub fn canonical_kv(&self) -> Vec<(String, String)> {
        let render_f64s = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let render_usizes = |xs: &[usize]| {
            xs.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("urm".into(), self.urm.display().to_string()),
            ("icm".into(), self.icm.display().to_string()),
            ("split_ratio".into(), self.split_ratio.to_string()),
            ("split_seed".into(), self.split_seed.to_string()),
            ("knn_neighbors".into(), self.knn_neighbors.to_string()),
            ("knn_shrink".into(), self.knn_shrink.to_string()),
            ("eval_cutoff".into(), self.eval_cutoff.to_string()),
            (
                "eval_user_fraction".into(),
                self.eval_user_fraction.to_string(),
            ),
            ("eval_sample_seed".into(), self.eval_sample_seed.to_string()),
            ("target".into(), self.target.clone()),
            ("lambda_grid".into(), render_f64s(&self.lambda_grid)),
            ("k_grid".into(), render_usizes(&self.k_grid)),
            ("mu".into(), self.mu.to_string()),
            ("gamma".into(), self.gamma.render()),
            ("n_partitions".into(), self.n_partitions.to_string()),
            ("solver".into(), self.solver.clone()),
            ("sa_sweeps".into(), self.sa_sweeps.to_string()),
            (
                "sa_t_start".into(),
                self.sa_t_start
                    .map_or("auto".to_string(), |v| v.to_string()),
            ),
            ("sa_t_end".into(), self.sa_t_end.to_string()),
            ("n_runs".into(), self.n_runs.to_string()),
            (
                "vote_threshold".into(),
                self.vote_threshold
                    .map_or("majority".to_string(), |v| v.to_string()),
            ),
            ("seed_base".into(), self.seed_base.to_string()),
        ]
    }

    pub fn knn_params(&self) -> KnnParams {
        KnnParams {
            n_neighbors: self.knn_neighbors,
            shrink: self.knn_shrink,
        }
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            cutoff: self.eval_cutoff,
            user_sample_fraction: self.eval_user_fraction,
            sample_seed: self.eval_sample_seed,
        }
    }

    fn solver_kind(&self) -> SolverKind {
        if self.solver == "exhaustive" {
            SolverKind::Exhaustive
        } else {
            SolverKind::SimulatedAnnealing
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            kind: self.solver_kind(),
            t_start: self.sa_t_start,
            t_end: self.sa_t_end,
            n_sweeps: self.sa_sweeps,
            n_runs: self.n_runs,
            vote_threshold: self.vote_threshold,
            seed_base: self.seed_base,
        }
    }

    fn resolved_cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.output_dir.join("cache")
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
        hasher.update([0u8]);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    /// Times the MI/CMI stage actually ran (cache misses).
    pub mistats_computed: usize,
    /// Times the counterfactual stage actually ran (cache misses).
    pub counterfactual_computed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub artifact_version: String,
    pub counters: StageCounters,
}

/// One grid cell (or the all-features baseline when `lambda`/`k` are None).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub mu: f64,
    /// Penalty weight actually applied (resolved from `auto` if needed).
    pub gamma: Option<f64>,
    pub solver: String,
    pub n_selected: usize,
    pub ndcg: Option<f64>,
    pub energy: Option<f64>,
    pub seed_base: u64,
    pub mask_file: Option<String>,
    pub error: Option<String>,
    pub wall_time_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    /// Grid rows sorted by (k, lambda).
    pub rows: Vec<ReportRow>,
    pub baseline: ReportRow,
}

/// Shared pipeline state: inputs loaded once, expensive stages computed
/// once (with a disk cache) and reused across grid cells.
pub struct Pipeline {
    config: ExperimentConfig,
    icm: SparseMatrix,
    split: HoldoutSplit,
    target: TargetVector,
    stats: MiStats,
    scores: CounterfactualScores,
    counters: StageCounters,
    urm_digest: String,
    icm_digest: String,
}

impl Pipeline {
    /// Load inputs, split, derive the target, and compute (or load from
    /// cache) the MI/CMI statistics and counterfactual scores. Also writes
    /// `urm_train.tsv` / `urm_test.tsv` into the output directory so every
    /// emitted mask can be re-evaluated by the standalone `eval` command.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.output_dir).map_err(|source| Error::Io {
            path: config.output_dir.clone(),
            source,
        })?;

        let urm_bytes = std::fs::read(&config.urm).map_err(|source| Error::Io {
            path: config.urm.clone(),
            source,
        })?;
        let icm_bytes = std::fs::read(&config.icm).map_err(|source| Error::Io {
            path: config.icm.clone(),
            source,
        })?;
        let urm_digest = sha256_hex(&[&urm_bytes]);
        let icm_digest = sha256_hex(&[&icm_bytes]);

        let urm = load_tsv(&config.urm, None).map_err(|e| e.in_stage("load"))?;
        let icm = load_tsv(&config.icm, None).map_err(|e| e.in_stage("load"))?;
        if urm.n_cols() != icm.n_rows() {
            return Err(Error::Shape(format!(
                "URM items {} != ICM items {}",
                urm.n_cols(),
                icm.n_rows()
            ))
            .in_stage("load"));
        }

        let split = split_holdout(&urm, config.split_ratio, config.split_seed)
            .map_err(|e| e.in_stage("split"))?;
        save_tsv(&split.train, config.output_dir.join("urm_train.tsv"))
            .map_err(|e| e.in_stage("split"))?;
        save_tsv(&split.test, config.output_dir.join("urm_test.tsv"))
            .map_err(|e| e.in_stage("split"))?;

        let target = build_target(&split.train);

        let mut counters = StageCounters::default();
        let cache_dir = config.resolved_cache_dir();
        if !config.no_cache {
            std::fs::create_dir_all(&cache_dir).map_err(|source| Error::Io {
                path: cache_dir.clone(),
                source,
            })?;
        }

        let mistats_key = sha256_hex(&[
            urm_digest.as_bytes(),
            icm_digest.as_bytes(),
            config.split_ratio.to_string().as_bytes(),
            config.split_seed.to_string().as_bytes(),
            config.target.as_bytes(),
        ]);
        let stats = cached_stage(
            &cache_dir,
            &format!("mistats_{}.json", &mistats_key[..16]),
            config.no_cache,
            || {
                counters.mistats_computed += 1;
                compute_mi_stats(&icm, &target, None).map_err(|e| e.in_stage("mistats"))
            },
        )?;

        let knn = config.knn_params();
        let eval = config.eval_params();
        let scores_key = sha256_hex(&[
            mistats_key.as_bytes(),
            config.knn_neighbors.to_string().as_bytes(),
            config.knn_shrink.to_string().as_bytes(),
            config.eval_cutoff.to_string().as_bytes(),
            config.eval_user_fraction.to_string().as_bytes(),
            config.eval_sample_seed.to_string().as_bytes(),
        ]);
        let scores = cached_stage(
            &cache_dir,
            &format!("counterfactual_{}.json", &scores_key[..16]),
            config.no_cache,
            || {
                counters.counterfactual_computed += 1;
                counterfactual_scores(&icm, &split, &knn, &eval, None)
                    .map_err(|e| e.in_stage("counterfactual"))
            },
        )?;

        Ok(Pipeline {
            config,
            icm,
            split,
            target,
            stats,
            scores,
            counters,
            urm_digest,
            icm_digest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn counters(&self) -> &StageCounters {
        &self.counters
    }

    pub fn stats(&self) -> &MiStats {
        &self.stats
    }

    pub fn scores(&self) -> &CounterfactualScores {
        &self.scores
    }

    pub fn target(&self) -> &TargetVector {
        &self.target
    }

    fn config_hash(&self) -> String {
        let kv: Vec<u8> = self
            .config
            .canonical_kv()
            .iter()
            .flat_map(|(k, v)| format!("{k}={v}\n").into_bytes())
            .collect();
        sha256_hex(&[&kv, self.urm_digest.as_bytes(), self.icm_digest.as_bytes()])
    }

    fn empty_row(&self, lambda: f64, k: usize) -> ReportRow {
        ReportRow {
            lambda: Some(lambda),
            k: Some(k),
            mu: self.config.mu,
            gamma: None,
            solver: self.config.solver.clone(),
            n_selected: 0,
            ndcg: None,
            energy: None,
            seed_base: self.config.seed_base,
            mask_file: None,
            error: None,
            wall_time_ms: 0,
        }
    }

    /// Solve one (lambda, k) cell and evaluate the resulting mask,
    /// capturing any error in the row rather than propagating it.
    pub fn run_cell(&self, lambda: f64, k: usize) -> ReportRow {
        let started = std::time::Instant::now();
        let mut row = self.empty_row(lambda, k);
        match self.solve_and_eval(lambda, k) {
            Ok((mask, gamma, energy, ndcg, mask_file)) => {
                row.gamma = Some(gamma);
                row.n_selected = mask.popcount();
                row.energy = Some(energy);
                row.ndcg = Some(ndcg);
                row.mask_file = Some(mask_file);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row.wall_time_ms = started.elapsed().as_millis();
        row
    }

    /// As [`Pipeline::run_cell`] but propagating errors, for single-cell
    /// runs.
    pub fn run_cell_strict(&self, lambda: f64, k: usize) -> Result<(SelectionMask, ReportRow)> {
        let started = std::time::Instant::now();
        let (mask, gamma, energy, ndcg, mask_file) = self.solve_and_eval(lambda, k)?;
        let mut row = self.empty_row(lambda, k);
        row.gamma = Some(gamma);
        row.n_selected = mask.popcount();
        row.energy = Some(energy);
        row.ndcg = Some(ndcg);
        row.mask_file = Some(mask_file);
        row.wall_time_ms = started.elapsed().as_millis();
        Ok((mask, row))
    }

    fn resolve_gamma(&self, scaled_max_abs: f64) -> f64 {
        match self.config.gamma {
            GammaSpec::Fixed(g) => g,
            GammaSpec::Auto => {
                let g = 0.5 * scaled_max_abs;
                if g > 0.0 {
                    g
                } else {
                    1.0
                }
            }
        }
    }

    fn solve_and_eval(
        &self,
        lambda: f64,
        k: usize,
    ) -> Result<(SelectionMask, f64, f64, f64, String)> {
        let m = self.stats.len();
        let built =
            build_caqubo(&self.stats, &self.scores, lambda).map_err(|e| e.in_stage("build"))?;
        let scaled = scale(&built, self.config.mu).map_err(|e| e.in_stage("build"))?;
        let gamma = self.resolve_gamma(scaled.max_abs());

        let params = CaquboParams {
            lambda,
            mu: self.config.mu,
            k,
            gamma,
        };
        let plan =
            make_partition(m, self.config.n_partitions, k).map_err(|e| e.in_stage("solve"))?;
        let solver = self.config.solver_config();
        let mask = partition_solve(&self.stats, &self.scores, &params, &plan, &solver)
            .map_err(|e| e.in_stage("solve"))?;

        // Report energy under the global objective (scaled + one global
        // cardinality penalty), independent of how the solve was split.
        let penalized =
            add_cardinality_penalty(&scaled, k, gamma).map_err(|e| e.in_stage("solve"))?;
        let energy = penalized.energy(&mask).map_err(|e| e.in_stage("solve"))?;

        if mask.popcount() == 0 {
            return Err(Error::EmptyMask.in_stage("solve"));
        }
        let model = fit_item_knn(&self.icm, &mask, &self.config.knn_params())
            .map_err(|e| e.in_stage("eval"))?;
        let ndcg = ndcg_at_k(&model, &self.split, &self.config.eval_params())
            .map_err(|e| e.in_stage("eval"))?;

        let mask_file = format!("mask_k{k}_lambda{lambda}.txt");
        save_mask(&mask, self.config.output_dir.join(&mask_file))
            .map_err(|e| e.in_stage("emit"))?;
        Ok((mask, gamma, energy, ndcg, mask_file))
    }

    /// Evaluate the all-features baseline and emit its mask file.
    pub fn baseline_row(&self) -> ReportRow {
        let started = std::time::Instant::now();
        let m = self.icm.n_cols();
        let mask = SelectionMask::all(m);
        let mut row = ReportRow {
            lambda: None,
            k: None,
            mu: self.config.mu,
            gamma: None,
            solver: "baseline".to_string(),
            n_selected: m,
            ndcg: None,
            energy: None,
            seed_base: self.config.seed_base,
            mask_file: None,
            error: None,
            wall_time_ms: 0,
        };
        let result: Result<(f64, String)> = (|| {
            let model = fit_item_knn(&self.icm, &mask, &self.config.knn_params())
                .map_err(|e| e.in_stage("eval"))?;
            let ndcg = ndcg_at_k(&model, &self.split, &self.config.eval_params())
                .map_err(|e| e.in_stage("eval"))?;
            let mask_file = "mask_baseline.txt".to_string();
            save_mask(&mask, self.config.output_dir.join(&mask_file))
                .map_err(|e| e.in_stage("emit"))?;
            Ok((ndcg, mask_file))
        })();
        match result {
            Ok((ndcg, mask_file)) => {
                row.ndcg = Some(ndcg);
                row.mask_file = Some(mask_file);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row.wall_time_ms = started.elapsed().as_millis();
        row
    }

    /// Run the full lambda x k cross product (cells in parallel, shared
    /// stages computed exactly once) plus the baseline row.
    pub fn run_grid(&self) -> ExperimentReport {
        let mut cells: Vec<(usize, f64)> = Vec::new();
        for &k in &self.config.k_grid {
            for &lambda in &self.config.lambda_grid {
                cells.push((k, lambda));
            }
        }
        let mut rows: Vec<ReportRow> = cells
            .par_iter()
            .map(|&(k, lambda)| self.run_cell(lambda, k))
            .collect();
        rows.sort_by(|a, b| {
            let ka = (a.k.unwrap_or(0), a.lambda.unwrap_or(0.0));
            let kb = (b.k.unwrap_or(0), b.lambda.unwrap_or(0.0));
            ka.0.cmp(&kb.0).then(ka.1.partial_cmp(&kb.1).unwrap())
        });
        ExperimentReport {
            config: self.config.clone(),
            provenance: Provenance {
                config_hash: self.config_hash(),
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                counters: self.counters.clone(),
            },
            rows,
            baseline: self.baseline_row(),
        }
    }
}

fn cached_stage<T, F>(cache_dir: &Path, file_name: &str, no_cache: bool, compute: F) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
    F: FnOnce() -> Result<T>,
{
    let path = cache_dir.join(file_name);
    if !no_cache {
        if let Ok(body) = std::fs::read_to_string(&path) {
            if let Ok(value) = serde_json::from_str(&body) {
                return Ok(value);
            }
            // Unreadable cache entries are treated as misses.
        }
    }
    let value = compute()?;
    if !no_cache {
        let body = serde_json::to_string(&value)
            .map_err(|e| Error::Config(format!("serialize cache entry: {e}")))?;
        std::fs::write(&path, body).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(value)
}

/// Run a single-cell experiment; the config must have exactly one lambda
/// and one k. Cell errors propagate (unlike in a grid run).
pub fn run_caqubo(config: ExperimentConfig) -> Result<(SelectionMask, ReportRow)> {
    if config.lambda_grid.len() != 1 || config.k_grid.len() != 1 {
        return Err(Error::Config(format!(
            "single run needs exactly one lambda and one k, got {} and {}",
            config.lambda_grid.len(),
            config.k_grid.len()
        )));
    }
    let lambda = config.lambda_grid[0];
    let k = config.k_grid[0];
    let pipeline = Pipeline::prepare(config)?;
    pipeline.run_cell_strict(lambda, k)
}

/// Run the full grid for a config.
pub fn run_grid(config: ExperimentConfig) -> Result<ExperimentReport> {
    let pipeline = Pipeline::prepare(config)?;
    Ok(pipeline.run_grid())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

const CSV_HEADER: &str =
    "lambda,k,mu,gamma,solver,n_selected,ndcg,energy,seed_base,mask_file,error,wall_time_ms";

fn csv_cell_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(row: &ReportRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        csv_cell_f64(row.lambda),
        row.k.map(|k| k.to_string()).unwrap_or_default(),
        row.mu,
        csv_cell_f64(row.gamma),
        row.solver,
        row.n_selected,
        csv_cell_f64(row.ndcg),
        csv_cell_f64(row.energy),
        row.seed_base,
        row.mask_file.clone().unwrap_or_default(),
        row.error
            .clone()
            .map(|e| e.replace(',', ";"))
            .unwrap_or_default(),
        row.wall_time_ms
    )
}

pub fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        out.push_str(&csv_row(row));
        out.push('\n');
    }
    out.push_str(&csv_row(&report.baseline));
    out.push('\n');
    out
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "err".to_string())
}

/// Markdown grid shaped lambda-rows x k-columns with nDCG@cutoff cells and
/// the all-features baseline as a footer.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let mut lambdas: Vec<f64> = report.rows.iter().filter_map(|r| r.lambda).collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();
    let mut ks: Vec<usize> = report.rows.iter().filter_map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();

    let mut cells: BTreeMap<(String, usize), Option<f64>> = BTreeMap::new();
    for row in &report.rows {
        if let (Some(l), Some(k)) = (row.lambda, row.k) {
            cells.insert((l.to_string(), k), row.ndcg);
        }
    }

    let cutoff = report.config.eval_cutoff;
    let mut out = String::new();
    out.push_str("| lambda \\ k |");
    for k in &ks {
        out.push_str(&format!(" {k} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &ks {
        out.push_str("---|");
    }
    out.push('\n');
    for lambda in &lambdas {
        out.push_str(&format!("| {lambda} |"));
        for k in &ks {
            let v = cells.get(&(lambda.to_string(), *k)).copied().flatten();
            out.push_str(&format!(" {} |", fmt4(v)));
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&format!(
        "baseline (all {} features): nDCG@{cutoff} {}\n",
        report.baseline.n_selected,
        fmt4(report.baseline.ndcg)
    ));
    out
}

/// Write the report in the requested format; returns the file path.
pub fn emit_report(
    report: &ExperimentReport,
    format: ReportFormat,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if report.rows.is_empty() {
        return Err(Error::Config("cannot emit an empty report".to_string()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let (name, body) = match format {
        ReportFormat::Csv => ("report.csv", render_csv(report)),
        ReportFormat::Markdown => ("report.md", render_markdown(report)),
        ReportFormat::Json => (
            "report.json",
            serde_json::to_string_pretty(report)
                .map_err(|e| Error::Config(format!("serialize report: {e}")))?,
        ),
    };
    let path = out_dir.join(name);
    std::fs::write(&path, body).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_and_render_round_trip() {
        let mut config = ExperimentConfig::default();
        config.set("lambda_grid", "0,1e1,1e3").unwrap();
        config.set("k_grid", "5, 10").unwrap();
        config.set("gamma", "auto").unwrap();
        config.set("mu", "1e-3").unwrap();
        config.set("vote_threshold", "3").unwrap();
        assert_eq!(config.lambda_grid, vec![0.0, 10.0, 1000.0]);
        assert_eq!(config.k_grid, vec![5, 10]);
        assert_eq!(config.gamma, GammaSpec::Auto);
        assert_eq!(config.mu, 1e-3);
        assert_eq!(config.vote_threshold, Some(3));
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = ExperimentConfig::default();
        let err = config.set("lambda", "1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_k_grid_fails_validation() {
        let mut config = ExperimentConfig::default();
        config.set("urm", "a.tsv").unwrap();
        config.set("icm", "b.tsv").unwrap();
        config.set("output_dir", "out").unwrap();
        config.set("lambda_grid", "0").unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("k_grid"));
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(
            &path,
            "# comment\nurm=u.tsv\nicm=i.tsv\noutput_dir=out\nlambda_grid=0,1e5\nk_grid=10\nsolver=exhaustive\n",
        )
        .unwrap();
        let config = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(config.lambda_grid, vec![0.0, 1e5]);
        assert_eq!(config.solver, "exhaustive");
        config.validate().unwrap();
    }

    #[test]
    fn cache_dir_resolution_order() {
        let mut config = ExperimentConfig::default();
        config.set("output_dir", "out").unwrap();
        // Env var beats the output-dir default; explicit cache_dir beats both.
        std::env::set_var(CACHE_DIR_ENV, "/tmp/env-cache");
        assert_eq!(config.resolved_cache_dir(), PathBuf::from("/tmp/env-cache"));
        config.set("cache_dir", "/tmp/explicit").unwrap();
        assert_eq!(config.resolved_cache_dir(), PathBuf::from("/tmp/explicit"));
        std::env::remove_var(CACHE_DIR_ENV);
        config.cache_dir = None;
        assert_eq!(config.resolved_cache_dir(), PathBuf::from("out").join("cache"));
    }

    #[test]
    fn four_decimal_rendering() {
        assert_eq!(fmt4(Some(0.10334)), "0.1033");
        assert_eq!(fmt4(Some(1.0)), "1.0000");
        assert_eq!(fmt4(None), "err");
    }

    #[test]
    fn csv_single_row_shape() {
        let row = ReportRow {
            lambda: Some(0.0),
            k: Some(10),
            mu: 1.0,
            gamma: Some(1.0),
            solver: "sa".to_string(),
            n_selected: 10,
            ndcg: Some(0.25),
            energy: Some(-1.5),
            seed_base: 1,
            mask_file: Some("mask.txt".to_string()),
            error: None,
            wall_time_ms: 3,
        };
        let report = ExperimentReport {
            config: ExperimentConfig::default(),
            provenance: Provenance {
                config_hash: "x".to_string(),
                artifact_version: "0".to_string(),
                counters: StageCounters::default(),
            },
            rows: vec![row.clone()],
            baseline: ReportRow {
                lambda: None,
                k: None,
                solver: "baseline".to_string(),
                ..row
            },
        };
        let csv = render_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3); // header + row + baseline
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,10,1,1,sa,10,0.25,-1.5,1,mask.txt,,"));
    }

    #[test]
    fn markdown_grid_shape() {
        let mk_row = |lambda: f64, k: usize, ndcg: f64| ReportRow {
            lambda: Some(lambda),
            k: Some(k),
            mu: 1.0,
            gamma: Some(1.0),
            solver: "sa".to_string(),
            n_selected: k,
            ndcg: Some(ndcg),
            energy: None,
            seed_base: 1,
            mask_file: None,
            error: None,
            wall_time_ms: 0,
        };
        let mut rows = Vec::new();
        for (i, &lambda) in [0.0, 10.0, 1000.0, 1e5, 1e7].iter().enumerate() {
            for (j, &k) in [50usize, 100, 130, 140, 145].iter().enumerate() {
                rows.push(mk_row(lambda, k, 0.1 + (i * 5 + j) as f64 * 1e-4));
            }
        }
        let baseline = ReportRow {
            lambda: None,
            k: None,
            ndcg: Some(0.1028),
            n_selected: 150,
            solver: "baseline".to_string(),
            ..mk_row(0.0, 0, 0.0)
        };
        let report = ExperimentReport {
            config: ExperimentConfig::default(),
            provenance: Provenance {
                config_hash: "x".to_string(),
                artifact_version: "0".to_string(),
                counters: StageCounters::default(),
            },
            rows,
            baseline,
        };
        let md = render_markdown(&report);
        let lines: Vec<&str> = md.lines().collect();
        // Header, separator, 5 lambda rows, blank, baseline footer.
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0].matches('|').count(), 7); // 5 k columns + 2 edges
        assert!(lines.last().unwrap().contains("0.1028"));
        assert!(md.contains("| 100000 |"));
    }
}
