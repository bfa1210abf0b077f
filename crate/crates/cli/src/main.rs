//! Command-line interface for the caqubo feature-selection toolkit.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use caqubo::annealing::{
    exhaustive_solve, majority_threshold, repeated_solve_vote, simulated_anneal, AnnealSchedule,
};
use caqubo::counterfactual::{counterfactual_scores, save_scores_json, save_scores_tsv};
use caqubo::datasets::{generate_synthetic, split_holdout, HoldoutSplit, SyntheticSpec};
use caqubo::infometrics::{build_target, compute_mi_stats, save_mi_stats_tsv};
use caqubo::itemknn::{fit_item_knn, ndcg_at_k, EvalParams, KnnParams};
use caqubo::pipeline::{emit_report, run_caqubo, run_grid, ExperimentConfig, ReportFormat};
use caqubo::qubo::{load_mask, load_qubo, save_mask};
use caqubo::sparse::{load_tsv, save_tsv};

#[derive(Parser)]
#[command(
    name = "caqubo",
    about = "QUBO feature selection for item-KNN recommenders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-feature synthetic dataset (urm.tsv, icm.tsv, planted.txt).
    Synth(SynthArgs),
    /// Split a URM into per-user train/test TSVs.
    Split(SplitArgs),
    /// Compute MI/CMI statistics (mi.tsv, cmi.tsv).
    Mistats(MistatsArgs),
    /// Compute leave-one-feature-out nDCG deltas (e.tsv + JSON sidecar).
    Counterfactual(CounterfactualArgs),
    /// Run a single (lambda, k) selection.
    Select(SelectArgs),
    /// Run the full lambda x k grid and emit reports.
    Grid(GridArgs),
    /// Solve a QUBO dump file.
    Solve(SolveArgs),
    /// Evaluate a feature mask with the item-KNN recommender (prints mean nDCG).
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 50)]
    features: usize,
    #[arg(long, default_value_t = 10)]
    informative: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    urm: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MistatsArgs {
    #[arg(long)]
    urm_train: PathBuf,
    #[arg(long)]
    icm: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct KnnEvalFlags {
    #[arg(long, default_value_t = 100)]
    neighbors: usize,
    #[arg(long, default_value_t = 0.0)]
    shrink: f64,
    #[arg(long, default_value_t = 10)]
    cutoff: usize,
    #[arg(long, default_value_t = 1.0)]
    user_fraction: f64,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

impl KnnEvalFlags {
    fn knn(&self) -> KnnParams {
        KnnParams {
            n_neighbors: self.neighbors,
            shrink: self.shrink,
        }
    }

    fn eval(&self) -> EvalParams {
        EvalParams {
            cutoff: self.cutoff,
            user_sample_fraction: self.user_fraction,
            sample_seed: self.sample_seed,
        }
    }
}

#[derive(Args)]
struct CounterfactualArgs {
    #[arg(long)]
    urm_train: PathBuf,
    #[arg(long)]
    urm_test: PathBuf,
    #[arg(long)]
    icm: PathBuf,
    #[command(flatten)]
    params: KnnEvalFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Overrides for the flat key=value experiment config; each flag carries
/// the same name as its config key.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "urm")]
    urm: Option<String>,
    #[arg(long = "icm")]
    icm: Option<String>,
    #[arg(long = "split_ratio")]
    split_ratio: Option<String>,
    #[arg(long = "split_seed")]
    split_seed: Option<String>,
    #[arg(long = "knn_neighbors")]
    knn_neighbors: Option<String>,
    #[arg(long = "knn_shrink")]
    knn_shrink: Option<String>,
    #[arg(long = "eval_cutoff")]
    eval_cutoff: Option<String>,
    #[arg(long = "eval_user_fraction")]
    eval_user_fraction: Option<String>,
    #[arg(long = "eval_sample_seed")]
    eval_sample_seed: Option<String>,
    #[arg(long = "target")]
    target: Option<String>,
    #[arg(long = "lambda_grid")]
    lambda_grid: Option<String>,
    #[arg(long = "k_grid")]
    k_grid: Option<String>,
    #[arg(long = "mu")]
    mu: Option<String>,
    #[arg(long = "gamma")]
    gamma: Option<String>,
    #[arg(long = "n_partitions")]
    n_partitions: Option<String>,
    #[arg(long = "solver")]
    solver: Option<String>,
    #[arg(long = "sa_sweeps")]
    sa_sweeps: Option<String>,
    #[arg(long = "sa_t_start")]
    sa_t_start: Option<String>,
    #[arg(long = "sa_t_end")]
    sa_t_end: Option<String>,
    #[arg(long = "n_runs")]
    n_runs: Option<String>,
    #[arg(long = "vote_threshold")]
    vote_threshold: Option<String>,
    #[arg(long = "seed_base")]
    seed_base: Option<String>,
    #[arg(long = "output_dir")]
    output_dir: Option<String>,
    #[arg(long = "cache_dir")]
    cache_dir: Option<String>,
    #[arg(long = "no_cache")]
    no_cache: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let overrides: [(&str, &Option<String>); 25] = [
            ("urm", &self.urm),
            ("icm", &self.icm),
            ("split_ratio", &self.split_ratio),
            ("split_seed", &self.split_seed),
            ("knn_neighbors", &self.knn_neighbors),
            ("knn_shrink", &self.knn_shrink),
            ("eval_cutoff", &self.eval_cutoff),
            ("eval_user_fraction", &self.eval_user_fraction),
            ("eval_sample_seed", &self.eval_sample_seed),
            ("target", &self.target),
            ("lambda_grid", &self.lambda_grid),
            ("k_grid", &self.k_grid),
            ("mu", &self.mu),
            ("gamma", &self.gamma),
            ("n_partitions", &self.n_partitions),
            ("solver", &self.solver),
            ("sa_sweeps", &self.sa_sweeps),
            ("sa_t_end", &self.sa_t_end),
            ("sa_t_start", &self.sa_t_start),
            ("n_runs", &self.n_runs),
            ("vote_threshold", &self.vote_threshold),
            ("seed_base", &self.seed_base),
            ("output_dir", &self.output_dir),
            ("cache_dir", &self.cache_dir),
            ("no_cache", &self.no_cache),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        Ok(config)
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Shorthand for a one-element lambda_grid.
    #[arg(long)]
    lambda: Option<f64>,
    /// Shorthand for a one-element k_grid.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SolveArgs {
    /// QUBO dump file (`m offset` header plus `i j value` lines).
    #[arg(long)]
    qubo: PathBuf,
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    /// Start temperature; defaults to 10 * max|q|.
    #[arg(long)]
    t_start: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    t_end: f64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Voting threshold; defaults to strict majority.
    #[arg(long)]
    vote_threshold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enumerate all masks instead of annealing (m <= 25).
    #[arg(long, default_value_t = false)]
    exhaustive: bool,
    /// Mask output path; a JSON summary lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    urm_train: PathBuf,
    #[arg(long)]
    urm_test: PathBuf,
    #[arg(long)]
    icm: PathBuf,
    /// Mask file, one selected feature index per line.
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    params: KnnEvalFlags,
}

fn ensure_dir(dir: &PathBuf) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    ensure_dir(&args.out_dir)?;
    let spec = SyntheticSpec {
        n_users: args.users,
        n_items: args.items,
        n_features: args.features,
        n_informative: args.informative,
        noise_rate: args.noise_rate,
        interaction_density: args.density,
        seed: args.seed,
    };
    let (urm, icm, planted) = generate_synthetic(&spec)?;
    save_tsv(&urm, args.out_dir.join("urm.tsv"))?;
    save_tsv(&icm, args.out_dir.join("icm.tsv"))?;
    let planted_body: String = planted.iter().map(|f| format!("{f}\n")).collect();
    std::fs::write(args.out_dir.join("planted.txt"), planted_body)?;
    println!(
        "wrote urm.tsv ({} interactions), icm.tsv ({} entries), planted.txt ({} features) to {}",
        urm.nnz(),
        icm.nnz(),
        planted.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_split(args: SplitArgs) -> anyhow::Result<()> {
    ensure_dir(&args.out_dir)?;
    let urm = load_tsv(&args.urm, None)?;
    let split = split_holdout(&urm, args.ratio, args.seed)?;
    save_tsv(&split.train, args.out_dir.join("urm_train.tsv"))?;
    save_tsv(&split.test, args.out_dir.join("urm_test.tsv"))?;
    println!(
        "split {} interactions into {} train / {} test",
        urm.nnz(),
        split.train.nnz(),
        split.test.nnz()
    );
    Ok(())
}

fn cmd_mistats(args: MistatsArgs) -> anyhow::Result<()> {
    ensure_dir(&args.out_dir)?;
    let train = load_tsv(&args.urm_train, None)?;
    let icm = load_tsv(&args.icm, None)?;
    let target = build_target(&train);
    let stats = compute_mi_stats(&icm, &target, None)?;
    save_mi_stats_tsv(
        &stats,
        args.out_dir.join("mi.tsv"),
        args.out_dir.join("cmi.tsv"),
    )?;
    println!("wrote mi.tsv and cmi.tsv for {} features", stats.len());
    Ok(())
}

fn cmd_counterfactual(args: CounterfactualArgs) -> anyhow::Result<()> {
    ensure_dir(&args.out_dir)?;
    let train = load_tsv(&args.urm_train, None)?;
    let test = load_tsv(&args.urm_test, None)?;
    let icm = load_tsv(&args.icm, None)?;
    let split = HoldoutSplit::from_matrices(train, test)?;
    let scores =
        counterfactual_scores(&icm, &split, &args.params.knn(), &args.params.eval(), None)?;
    save_scores_tsv(&scores, args.out_dir.join("e.tsv"))?;
    save_scores_json(&scores, args.out_dir.join("e.json"))?;
    println!(
        "base nDCG@{} {:.4}; wrote e.tsv and e.json for {} features",
        args.params.cutoff,
        scores.base_ndcg,
        scores.len()
    );
    Ok(())
}

fn cmd_select(args: SelectArgs) -> anyhow::Result<()> {
    let mut config = args.config.build()?;
    if let Some(lambda) = args.lambda {
        config.lambda_grid = vec![lambda];
    }
    if let Some(k) = args.k {
        config.k_grid = vec![k];
    }
    let (mask, row) = run_caqubo(config)?;
    println!("{}", serde_json::to_string_pretty(&row)?);
    println!(
        "selected {} features: {:?}",
        mask.popcount(),
        mask.indices()
    );
    Ok(())
}

fn cmd_grid(args: GridArgs) -> anyhow::Result<()> {
    let config = args.config.build()?;
    let out_dir = config.output_dir.clone();
    let report = run_grid(config)?;
    for format in [
        ReportFormat::Csv,
        ReportFormat::Json,
        ReportFormat::Markdown,
    ] {
        let path = emit_report(&report, format, &out_dir)?;
        println!("wrote {}", path.display());
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells ({} failed), baseline nDCG {}",
        report.rows.len(),
        failed,
        report
            .baseline
            .ndcg
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "err".to_string())
    );
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> anyhow::Result<()> {
    let qm = load_qubo(&args.qubo)?;
    let started = std::time::Instant::now();
    let (mask, energy, n_evals, seed) = if args.exhaustive {
        let result = exhaustive_solve(&qm)?;
        (result.mask, result.energy, Some(result.n_energy_evals), 0)
    } else {
        let schedule = AnnealSchedule {
            t_start: args
                .t_start
                .unwrap_or_else(|| (10.0 * qm.max_abs()).max(args.t_end)),
            t_end: args.t_end,
            n_sweeps: args.sweeps,
        };
        if args.runs == 1 {
            let result = simulated_anneal(&qm, &schedule, args.seed, None)?;
            (
                result.mask,
                result.energy,
                Some(result.n_energy_evals),
                args.seed,
            )
        } else {
            let seeds: Vec<u64> = (0..args.runs).map(|r| args.seed + r as u64).collect();
            let (mask, _tally) =
                repeated_solve_vote(&qm, &schedule, args.runs, args.vote_threshold, &seeds)?;
            let energy = qm.energy(&mask)?;
            (mask, energy, None, args.seed)
        }
    };
    let wall_time_ms = started.elapsed().as_millis();
    save_mask(&mask, &args.out)?;
    let summary = serde_json::json!({
        "energy": energy,
        "popcount": mask.popcount(),
        "wall_time_ms": wall_time_ms,
        "seed": seed,
        "n_energy_evals": n_evals,
        "runs": args.runs,
        "vote_threshold": if args.exhaustive || args.runs == 1 {
            serde_json::Value::Null
        } else {
            args.vote_threshold.unwrap_or_else(|| majority_threshold(args.runs)).into()
        },
    });
    let json_path = {
        let mut p = args.out.clone().into_os_string();
        p.push(".json");
        PathBuf::from(p)
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let train = load_tsv(&args.urm_train, None)?;
    let test = load_tsv(&args.urm_test, None)?;
    let icm = load_tsv(&args.icm, None)?;
    let mask = load_mask(&args.mask, icm.n_cols())?;
    let split = HoldoutSplit::from_matrices(train, test)?;
    let model = fit_item_knn(&icm, &mask, &args.params.knn())?;
    let ndcg = ndcg_at_k(&model, &split, &args.params.eval())?;
    println!("{ndcg:.4}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Split(args) => cmd_split(args),
        Command::Mistats(args) => cmd_mistats(args),
        Command::Counterfactual(args) => cmd_counterfactual(args),
        Command::Select(args) => cmd_select(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Eval(args) => cmd_eval(args),
    }
}
