//! QUBO solvers: Metropolis single-flip simulated annealing with a
//! geometric temperature schedule, an exhaustive oracle for small
//! instances, repeated-run voting, and partition-and-merge for feature
//! sets larger than one solve can handle.

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::counterfactual::CounterfactualScores;
use crate::error::{Error, Result};
use crate::infometrics::MiStats;
use crate::qubo::{
    add_cardinality_penalty, build_caqubo, scale, CaquboParams, QuboMatrix, SelectionMask,
};

/// Exhaustive enumeration is capped at this many variables.
pub const EXHAUSTIVE_LIMIT: usize = 25;

const DEFAULT_SWEEPS: usize = 200;
const DEFAULT_T_END: f64 = 1e-3;

/// Geometric cooling schedule; one sweep proposes each variable once.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub n_sweeps: usize,
}

impl AnnealSchedule {
    pub fn new(t_start: f64, t_end: f64, n_sweeps: usize) -> Result<Self> {
        let s = AnnealSchedule {
            t_start,
            t_end,
            n_sweeps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scale-aware default: start at ten times the largest coefficient
    /// magnitude so one schedule serves instances whose entries span many
    /// orders of magnitude.
    pub fn default_for(qm: &QuboMatrix) -> Self {
        AnnealSchedule {
            t_start: (10.0 * qm.max_abs()).max(DEFAULT_T_END),
            t_end: DEFAULT_T_END,
            n_sweeps: DEFAULT_SWEEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_start.is_finite()
            && self.t_end.is_finite()
            && self.t_start >= self.t_end
            && self.t_end > 0.0
            && self.n_sweeps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "invalid schedule: t_start {}, t_end {}, n_sweeps {}",
                self.t_start, self.t_end, self.n_sweeps
            )))
        }
    }

    fn temperature(&self, sweep: usize) -> f64 {
        if self.n_sweeps <= 1 {
            return self.t_start;
        }
        let frac = sweep as f64 / (self.n_sweeps - 1) as f64;
        self.t_start * (self.t_end / self.t_start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub mask: SelectionMask,
    /// Energy of `mask`, recomputed from scratch at the end of the run.
    pub energy: f64,
    pub seed: u64,
    pub n_energy_evals: usize,
    pub wall_time: Duration,
}

/// Metropolis single-flip annealing. Per sweep each variable is proposed
/// once in random order; a flip is accepted when its energy delta is
/// non-positive, otherwise with probability `exp(-delta / T)`. Returns the
/// best mask ever visited. Deterministic in `seed`.
pub fn simulated_anneal(
    qm: &QuboMatrix,
    schedule: &AnnealSchedule,
    seed: u64,
    init: Option<&SelectionMask>,
) -> Result<SolveResult> {
    anneal_with_trace(qm, schedule, seed, init, None)
}

/// As [`simulated_anneal`], recording the best energy after each sweep.
pub fn anneal_with_trace(
    qm: &QuboMatrix,
    schedule: &AnnealSchedule,
    seed: u64,
    init: Option<&SelectionMask>,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<SolveResult> {
    schedule.validate()?;
    let m = qm.m();
    if m == 0 {
        return Err(Error::InvalidParam(
            "cannot solve a 0-variable instance".to_string(),
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut bits: Vec<bool> = match init {
        Some(mask) => {
            if mask.len() != m {
                return Err(Error::Shape(format!(
                    "init mask length {} != instance size {m}",
                    mask.len()
                )));
            }
            mask.bits.clone()
        }
        None => (0..m).map(|_| rng.gen_bool(0.5)).collect(),
    };

    let mut current = qm.energy(&SelectionMask { bits: bits.clone() })?;
    let mut best = current;
    let mut best_bits = bits.clone();
    let mut n_evals = 1usize;
    #[cfg(debug_assertions)]
    let mut accepted: usize = 0;
    // Drift in the incremental bookkeeping scales with the coefficient
    // magnitudes, not with the (possibly cancelled) final energy.
    #[cfg(debug_assertions)]
    let drift_tolerance = 1e-9 * (1.0 + m as f64 * qm.max_abs());

    let mut order: Vec<usize> = (0..m).collect();
    for sweep in 0..schedule.n_sweeps {
        let t = schedule.temperature(sweep);
        order.shuffle(&mut rng);
        for &i in &order {
            let delta = qm.flip_delta(&bits, i);
            n_evals += 1;
            let accept = delta <= 0.0 || rng.gen::<f64>() < (-delta / t).exp();
            if !accept {
                continue;
            }
            bits[i] = !bits[i];
            current += delta;
            #[cfg(debug_assertions)]
            {
                // Incremental bookkeeping must agree with a full
                // re-evaluation; sampled on large instances to stay cheap.
                accepted += 1;
                if m <= 64 || accepted.is_multiple_of(128) {
                    let full = qm.energy(&SelectionMask { bits: bits.clone() }).unwrap();
                    debug_assert!(
                        (current - full).abs() <= drift_tolerance,
                        "incremental energy {current} drifted from {full}"
                    );
                }
            }
            if current < best {
                best = current;
                best_bits.copy_from_slice(&bits);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(best);
        }
    }

    let mask = SelectionMask { bits: best_bits };
    let energy = qm.energy(&mask)?;
    n_evals += 1;
    Ok(SolveResult {
        mask,
        energy,
        seed,
        n_energy_evals: n_evals,
        wall_time: start.elapsed(),
    })
}

/// Enumerate all `2^m` masks (Gray-code order, incremental deltas) and
/// return the minimum; energy ties resolve to the lexicographically
/// smallest mask. Guarded at [`EXHAUSTIVE_LIMIT`] variables.
pub fn exhaustive_solve(qm: &QuboMatrix) -> Result<SolveResult> {
    let m = qm.m();
    if m == 0 {
        return Err(Error::InvalidParam(
            "cannot solve a 0-variable instance".to_string(),
        ));
    }
    if m > EXHAUSTIVE_LIMIT {
        return Err(Error::TooManyVariables {
            m,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let start = Instant::now();
    let mut bits = vec![false; m];
    let mut current = qm.offset();
    let mut best = current;
    let mut best_bits = bits.clone();

    let total: u64 = 1u64 << m;
    for code in 1..total {
        // Successive Gray codes differ in bit trailing_zeros(code).
        let flip = code.trailing_zeros() as usize;
        current += qm.flip_delta(&bits, flip);
        bits[flip] = !bits[flip];
        if current < best || (current == best && bits < best_bits) {
            best = current;
            best_bits.copy_from_slice(&bits);
        }
    }

    let mask = SelectionMask { bits: best_bits };
    let energy = qm.energy(&mask)?;
    Ok(SolveResult {
        mask,
        energy,
        seed: 0,
        n_energy_evals: total as usize,
        wall_time: start.elapsed(),
    })
}

/// Majority-style vote over equal-length masks: feature `i` is kept when it
/// is selected in at least `threshold` masks. Returns the final mask and
/// the per-feature tally.
pub fn vote_masks(
    masks: &[SelectionMask],
    threshold: usize,
) -> Result<(SelectionMask, Vec<usize>)> {
    let n_runs = masks.len();
    if n_runs == 0 {
        return Err(Error::InvalidParam(
            "voting needs at least one mask".to_string(),
        ));
    }
    if threshold < 1 || threshold > n_runs {
        return Err(Error::InvalidParam(format!(
            "vote threshold must be in 1..={n_runs}, got {threshold}"
        )));
    }
    let m = masks[0].len();
    if masks.iter().any(|x| x.len() != m) {
        return Err(Error::Shape("masks must share one length".to_string()));
    }
    let mut tally = vec![0usize; m];
    for mask in masks {
        for (i, &b) in mask.bits.iter().enumerate() {
            if b {
                tally[i] += 1;
            }
        }
    }
    let bits = tally.iter().map(|&t| t >= threshold).collect();
    Ok((SelectionMask { bits }, tally))
}

/// Default voting threshold: strict majority.
pub fn majority_threshold(n_runs: usize) -> usize {
    n_runs.div_ceil(2)
}

/// Run `n_runs` independent annealing solves (one per seed, in parallel)
/// and vote the final mask. `threshold` defaults to the strict majority.
pub fn repeated_solve_vote(
    qm: &QuboMatrix,
    schedule: &AnnealSchedule,
    n_runs: usize,
    threshold: Option<usize>,
    seeds: &[u64],
) -> Result<(SelectionMask, Vec<usize>)> {
    if n_runs == 0 {
        return Err(Error::InvalidParam("n_runs must be >= 1".to_string()));
    }
    if seeds.len() != n_runs {
        return Err(Error::InvalidParam(format!(
            "expected {n_runs} seeds, got {}",
            seeds.len()
        )));
    }
    let threshold = threshold.unwrap_or_else(|| majority_threshold(n_runs));
    let masks: Vec<SelectionMask> = seeds
        .par_iter()
        .map(|&seed| simulated_anneal(qm, schedule, seed, None).map(|r| r.mask))
        .collect::<Result<Vec<_>>>()?;
    vote_masks(&masks, threshold)
}

/// Contiguous index blocks with per-block selection budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub subsets: Vec<Range<usize>>,
    pub budgets: Vec<usize>,
}

impl PartitionPlan {
    pub fn n_subsets(&self) -> usize {
        self.subsets.len()
    }

    /// Total index count covered by the plan.
    pub fn len(&self) -> usize {
        self.subsets.last().map_or(0, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

/// Split `m` features into `n` contiguous blocks of near-equal size and
/// apportion the global budget `k` proportionally (largest remainder, ties
/// to the earlier block), so the budgets sum to exactly `k`.
pub fn make_partition(m: usize, n: usize, k: usize) -> Result<PartitionPlan> {
    if n < 1 || n > m {
        return Err(Error::InvalidParam(format!(
            "n must be in 1..={m}, got {n}"
        )));
    }
    if k > m {
        return Err(Error::InvalidParam(format!("k must be <= {m}, got {k}")));
    }
    let base = m / n;
    let extra = m % n;
    let mut subsets = Vec::with_capacity(n);
    let mut start = 0;
    for b in 0..n {
        let size = base + usize::from(b < extra);
        subsets.push(start..start + size);
        start += size;
    }

    // Largest-remainder apportionment in exact integer arithmetic.
    let mut budgets: Vec<usize> = Vec::with_capacity(n);
    let mut remainders: Vec<(usize, usize)> = Vec::with_capacity(n); // (remainder, block)
    let mut assigned = 0usize;
    for (b, subset) in subsets.iter().enumerate() {
        let numer = k * subset.len();
        budgets.push(numer / m);
        assigned += numer / m;
        remainders.push((numer % m, b));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, b) in remainders.iter().take(k - assigned) {
        budgets[b] += 1;
    }

    Ok(PartitionPlan { subsets, budgets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    SimulatedAnnealing,
    Exhaustive,
}

/// How each (sub)instance is solved.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Explicit start temperature; `None` derives `10 * max|q|` per
    /// instance.
    pub t_start: Option<f64>,
    pub t_end: f64,
    pub n_sweeps: usize,
    pub n_runs: usize,
    /// Voting threshold; `None` means strict majority.
    pub vote_threshold: Option<usize>,
    /// Run `r` of block `b` uses seed `seed_base + b * n_runs + r`.
    pub seed_base: u64,
}

impl SolverConfig {
    pub fn exhaustive() -> Self {
        SolverConfig {
            kind: SolverKind::Exhaustive,
            t_start: None,
            t_end: DEFAULT_T_END,
            n_sweeps: DEFAULT_SWEEPS,
            n_runs: 1,
            vote_threshold: None,
            seed_base: 0,
        }
    }

    pub fn annealing(n_runs: usize, seed_base: u64) -> Self {
        SolverConfig {
            kind: SolverKind::SimulatedAnnealing,
            t_start: None,
            t_end: DEFAULT_T_END,
            n_sweeps: DEFAULT_SWEEPS,
            n_runs,
            vote_threshold: None,
            seed_base,
        }
    }

    /// The schedule used for `qm`, with an auto start temperature when none
    /// was given.
    pub fn schedule_for(&self, qm: &QuboMatrix) -> AnnealSchedule {
        AnnealSchedule {
            t_start: self
                .t_start
                .unwrap_or_else(|| (10.0 * qm.max_abs()).max(self.t_end)),
            t_end: self.t_end,
            n_sweeps: self.n_sweeps,
        }
    }
}

fn solve_block(
    pen: &QuboMatrix,
    solver: &SolverConfig,
    block_index: usize,
) -> Result<SelectionMask> {
    match solver.kind {
        SolverKind::Exhaustive => Ok(exhaustive_solve(pen)?.mask),
        SolverKind::SimulatedAnnealing => {
            let schedule = solver.schedule_for(pen);
            let base = solver.seed_base + (block_index * solver.n_runs) as u64;
            let seeds: Vec<u64> = (0..solver.n_runs).map(|r| base + r as u64).collect();
            let (mask, _) =
                repeated_solve_vote(pen, &schedule, solver.n_runs, solver.vote_threshold, &seeds)?;
            Ok(mask)
        }
    }
}

/// Build the blended objective, scale it, and solve it block by block: each
/// block takes the principal submatrix, its own cardinality penalty with
/// the apportioned budget, and an independent solve; the final mask is the
/// union of the block selections. A block with budget 0 selects nothing.
pub fn partition_solve(
    stats: &MiStats,
    scores: &CounterfactualScores,
    params: &CaquboParams,
    plan: &PartitionPlan,
    solver: &SolverConfig,
) -> Result<SelectionMask> {
    let m = stats.len();
    if plan.len() != m || plan.subsets.is_empty() {
        return Err(Error::Shape(format!(
            "partition covers {} of {m} features",
            plan.len()
        )));
    }
    let mut expect = 0;
    for r in &plan.subsets {
        if r.start != expect || r.end < r.start {
            return Err(Error::Shape(
                "partition blocks must be contiguous and ordered".to_string(),
            ));
        }
        expect = r.end;
    }
    if plan.budgets.len() != plan.subsets.len() {
        return Err(Error::Shape("one budget per block required".to_string()));
    }

    let full = build_caqubo(stats, scores, params.lambda)?;
    let scaled = scale(&full, params.mu)?;

    let block_masks: Vec<(usize, SelectionMask)> = plan
        .subsets
        .par_iter()
        .zip(plan.budgets.par_iter())
        .enumerate()
        .filter(|(_, (range, _))| !range.is_empty())
        .map(|(b, (range, &budget))| -> Result<(usize, SelectionMask)> {
            if budget == 0 {
                return Ok((b, SelectionMask::none(range.len())));
            }
            let sub = scaled.principal_submatrix(range.clone())?;
            let pen = add_cardinality_penalty(&sub, budget, params.gamma)?;
            Ok((b, solve_block(&pen, solver, b)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut bits = vec![false; m];
    for (b, local) in block_masks {
        let range = &plan.subsets[b];
        for (offset, &selected) in local.bits.iter().enumerate() {
            if selected {
                bits[range.start + offset] = true;
            }
        }
    }
    Ok(SelectionMask { bits })
}
