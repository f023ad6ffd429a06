use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use robustpsr::ambiguity::SimplexGrid;
use robustpsr::diagnostics::{coverage_report, wellness_cb_exact};
use robustpsr::duals::{
    kl_dual_expectation, p_kl_dual, p_tv_dual_with, p_tv_primal_with, tv_dual_expectation, BudgetConvention,
    DEFAULT_SUBGRADIENT_ITERS, DEFAULT_SUBGRADIENT_STEP,
};
use robustpsr::harness::{emit_csv, fit_slope, median_gaps, with_threads, ExperimentConfig};
use robustpsr::instances::{random_distribution, random_instance, random_policy, Instance};
use robustpsr::learner::{algorithm1, algorithm2, LearnerParams, ModelClass, OfflineDataset};
use robustpsr::oracle::{grid_min_expectation, p_ball_grid_h2};
use robustpsr::robust::{robust_value_bruteforce, robust_value_p_with, robust_value_t, RobustOptions};
use robustpsr::{Divergence, Error, Policy, RewardSpec, SetKind, TabularModel, UncertaintySpec};

#[derive(Parser)]
#[command(name = "robustpsr", version, about = "Robust offline RL for tabular non-Markovian processes")]
struct Cli {
    /// Worker threads (defaults to ROBUSTPSR_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dual,
    Lp,
    Brute,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    HalfL1,
    L1,
}

#[derive(Subcommand)]
enum Cmd {
    /// Robust value of a policy.
    RobustValue {
        /// Model JSON, or an instance JSON holding both model and reward.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Reward JSON; omit when --model is an instance file.
        #[arg(long)]
        reward: Option<PathBuf>,
        #[arg(long)]
        set: SetKind,
        #[arg(long)]
        div: Divergence,
        #[arg(long)]
        xi: f64,
        #[arg(long, value_enum, default_value = "dual")]
        method: Method,
        /// Grid resolution for --method brute.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, value_enum, default_value = "half-l1")]
        convention: Convention,
    },
    /// Runs a learner on a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class: PathBuf,
        /// JSON list of candidate policies.
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long, default_value_t = 1)]
        algo: u8,
        #[arg(long)]
        set: SetKind,
        #[arg(long)]
        div: Divergence,
        #[arg(long)]
        xi: f64,
        #[arg(long)]
        pmin: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs an experiment sweep and writes its CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output path of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks the dual solvers against brute-force oracles.
    ValidateDuals {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model_reward(model: &Path, reward: Option<&Path>) -> anyhow::Result<(TabularModel, RewardSpec)> {
    match reward {
        Some(r) => Ok((read(model)?, read(r)?)),
        None => {
            let inst: Instance = read(model).context("without --reward, --model must be an instance file")?;
            Ok((inst.model, inst.reward))
        }
    }
}

fn robust_value_cmd(
    model: &Path,
    policy: &Path,
    reward: Option<&Path>,
    spec: UncertaintySpec,
    method: Method,
    grid: usize,
    convention: Convention,
) -> anyhow::Result<()> {
    let (model, reward) = load_model_reward(model, reward)?;
    let policy: Policy = read(policy)?;
    let convention = match convention {
        Convention::HalfL1 => BudgetConvention::HalfL1,
        Convention::L1 => BudgetConvention::L1,
    };
    let out = match (method, spec.set) {
        (Method::Brute, _) => {
            let g = SimplexGrid::new(grid, model.num_obs())?;
            json!({ "value": robust_value_bruteforce(&model, &policy, &reward, &spec, &g)?, "method": "brute-force", "grid": grid })
        }
        (_, SetKind::T) => serde_json::to_value(robust_value_t(&model, &policy, &reward, &spec)?)?,
        (m, SetKind::P) => {
            let opts = RobustOptions { convention, cross_check: matches!(m, Method::Dual), ..Default::default() };
            serde_json::to_value(robust_value_p_with(&model, &policy, &reward, &spec, &opts)?)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit_cmd(
    data: &Path,
    class: &Path,
    policies: &Path,
    reward: &Path,
    algo: u8,
    spec: UncertaintySpec,
    params: LearnerParams,
) -> anyhow::Result<()> {
    let data: OfflineDataset = read(data)?;
    let cls: ModelClass = read(class)?;
    cls.check()?;
    let policies: Vec<Policy> = read(policies)?;
    let reward: RewardSpec = read(reward)?;
    let out = match algo {
        1 => {
            let r = algorithm1(&data, &cls, &policies, &reward, &spec, &params)?;
            let theta = &cls.models[r.theta_hat];
            let cov = coverage_report(&policies[r.selected], &data.behavior, theta, &cls.core_tests()).ok();
            json!({
                "policy": policies[r.selected],
                "diagnostics": {
                    "selected": r.selected,
                    "theta_hat": r.theta_hat,
                    "dg_size": r.retained,
                    "distilled_empty": r.distilled_empty,
                    "params": r.params,
                    "objectives": r.scores,
                    "coverage": cov,
                    "c_b": wellness_cb_exact(theta, &spec).ok(),
                }
            })
        }
        2 => {
            let r = algorithm2(&data, &cls, &policies, &reward, &spec, &params)?;
            json!({
                "policy": policies[r.selected],
                "diagnostics": {
                    "selected": r.selected,
                    "theta_hat": r.theta_hat,
                    "beta": r.beta,
                    "conf_size": r.confidence_set.len(),
                    "confidence_set": r.confidence_set,
                    "objectives": r.scores,
                }
            })
        }
        a => bail!(Error::Config(format!("--algo must be 1 or 2, got {a}"))),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn sweep_cmd(config: &Path, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let cfg = ExperimentConfig::load(config)?;
    let outcome = robustpsr::harness::run_sweep(&cfg)?;
    if let Some(path) = out.or_else(|| cfg.output.clone()) {
        emit_csv(&outcome.rows, &path)?;
        eprintln!("wrote {} rows to {}", outcome.rows.len(), path.display());
    }
    for e in &outcome.errors {
        eprintln!("row N={} seed={} failed: {}", e.n, e.seed, e.message);
    }
    let slope = fit_slope(&outcome.rows);
    let summary = json!({
        "rows": outcome.rows.len(),
        "errors": outcome.errors.len(),
        "reference_values": outcome.reference,
        "median_gaps": median_gaps(&outcome.rows),
        "lcb_valid_fraction": outcome.rows.iter().filter(|r| r.lcb_valid).count() as f64 / outcome.rows.len().max(1) as f64,
        "slope": slope.as_ref().ok(),
        "slope_error": slope.as_ref().err().map(|e| e.to_string()),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(outcome.errors.is_empty())
}

struct Check {
    name: &'static str,
    worst: f64,
    tol: f64,
}

fn validate_duals(draws: usize, seed: u64) -> anyhow::Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (name, div, k, tol) in [
        ("scalar TV vs grid", Divergence::Tv, 10_000usize, 2e-4),
        ("scalar KL vs grid", Divergence::Kl, 1_000, 2e-3),
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let p0 = random_distribution(&mut rng, 2);
            let ell: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let xi = rng.gen_range(0.01..0.5);
            let d = match div {
                Divergence::Tv => tv_dual_expectation(&p0, &ell, xi)?,
                Divergence::Kl => kl_dual_expectation(&p0, &ell, xi)?,
            };
            let g = grid_min_expectation(&p0, &ell, div, xi, k)?;
            worst = worst.max((d.value - g).abs());
        }
        checks.push(Check { name, worst, tol });
    }
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let inst = random_instance(&mut rng, 2 + i % 2, 2, 2);
        let pi = random_policy(&mut rng, *inst.model.shape());
        let xi = rng.gen_range(0.01..0.4);
        let conv = BudgetConvention::HalfL1;
        let lp = p_tv_primal_with(&inst.model, &pi, &inst.reward, xi, conv)?;
        let d = p_tv_dual_with(&inst.model, &pi, &inst.reward, xi, DEFAULT_SUBGRADIENT_ITERS, DEFAULT_SUBGRADIENT_STEP, conv)?;
        worst = worst.max((lp - d.value).abs());
    }
    checks.push(Check { name: "P-TV dual vs LP (H <= 3)", worst, tol: 1e-3 });
    let mut worst: f64 = 0.0;
    for _ in 0..draws.min(50) {
        let inst = random_instance(&mut rng, 2, 2, 2);
        let pi = random_policy(&mut rng, *inst.model.shape());
        let xi = rng.gen_range(0.01..0.4);
        let d = p_kl_dual(&inst.model, &pi, &inst.reward, xi)?;
        let g = p_ball_grid_h2(&inst.model, &pi, &inst.reward, Divergence::Kl, xi, 1000)?;
        worst = worst.max((d.value - g).abs());
    }
    checks.push(Check { name: "P-KL dual vs grid (H = 2)", worst, tol: 2e-3 });
    println!("{:<28} {:>12} {:>10}  result", "suite", "worst", "tol");
    let mut ok = true;
    for c in &checks {
        let pass = c.worst <= c.tol;
        ok &= pass;
        println!("{:<28} {:>12.3e} {:>10.1e}  {}", c.name, c.worst, c.tol, if pass { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Error>().is_some_and(|e| matches!(e.kind(), "config" | "io" | "json" | "invalid-argument"))
            || c.is::<std::io::Error>()
            || c.is::<serde_json::Error>()
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::RobustValue { model, policy, reward, set, div, xi, method, grid, convention } => {
            let spec = UncertaintySpec::new(set, div, xi)?;
            robust_value_cmd(&model, &policy, reward.as_deref(), spec, method, grid, convention)?;
            Ok(true)
        }
        Cmd::Fit { data, class, policies, reward, algo, set, div, xi, pmin, alpha, lambda, beta, delta, seed } => {
            let spec = UncertaintySpec::new(set, div, xi)?;
            let params =
                LearnerParams { delta, p_min: pmin, alpha, ridge: lambda, beta, split_seed: seed, ..Default::default() };
            fit_cmd(&data, &class, &policies, &reward, algo, spec, params)?;
            Ok(true)
        }
        Cmd::Sweep { config, out } => sweep_cmd(&config, out),
        Cmd::ValidateDuals { draws, seed } => validate_duals(draws, seed),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let threads = cli.threads;
    match with_threads(threads, || run(cli)) {
        Ok(Ok(true)) => ExitCode::SUCCESS,
        Ok(Ok(false)) => ExitCode::from(2),
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
