//! Experiment configuration, sample-size sweeps, rate fitting and CSV output.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{SimplexGrid, UncertaintySpec};
use crate::error::{Error, Result};
use crate::instances::{all_deterministic_policies, perturb, ring, ring2, ring_family, Instance};
use crate::learner::{algorithm1, algorithm2, LearnerParams, ModelClass, OfflineDataset};
use crate::process::{Policy, Shape, TabularModel};
use crate::robust::{robust_value_bruteforce, robust_value_with};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "ROBUSTPSR_THREADS";

pub const CSV_HEADER: &str = "N,seed,gap,dg_size,theta_hat,conf_size,lcb_valid,ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InstanceSpec {
    Ring2,
    Ring { advance: Vec<f64> },
    RingFamily { advance: Vec<f64> },
    /// JSON file holding `{"model": ..., "reward": ...}`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    Uniform,
    Constant { action: usize },
    /// `probs` at the first step, uniform afterwards.
    FirstStep { probs: Vec<f64> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyClassSpec {
    /// One constant-action policy per action.
    Constants,
    AllDeterministic { cap: usize },
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelClassSpec {
    /// Ring-family models, one per advance vector.
    RingFamily { advances: Vec<Vec<f64>>, nominal: usize },
    /// Two-observation rings, one per advance vector.
    Ring { advances: Vec<Vec<f64>>, nominal: usize },
    /// The instance model first, then `count - 1` random mixtures with noise.
    Perturbed { count: usize, weight: f64, seed: u64 },
    Files { paths: Vec<PathBuf>, nominal: Option<usize> },
}

/// How true robust values are computed when scoring a selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Referee {
    Exact,
    Grid { resolution: usize },
}

fn default_referee() -> Referee {
    Referee::Exact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub behavior: PolicySpec,
    pub policies: PolicyClassSpec,
    pub model_class: ModelClassSpec,
    pub uncertainty: UncertaintySpec,
    pub n_schedule: Vec<usize>,
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub algorithm: u8,
    #[serde(default)]
    pub params: LearnerParams,
    #[serde(default = "default_referee")]
    pub referee: Referee,
    /// Record wall time per row; off keeps the CSV reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_schedule.is_empty() || self.n_schedule.windows(2).any(|w| w[0] >= w[1]) || self.n_schedule[0] == 0 {
            return Err(Error::Config("n_schedule must be positive and strictly increasing".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.algorithm != 1 && self.algorithm != 2 {
            return Err(Error::Config(format!("algorithm must be 1 or 2, got {}", self.algorithm)));
        }
        Ok(())
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Everything a sweep needs, built from a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub instance: Instance,
    pub behavior: Policy,
    pub policies: Vec<Policy>,
    pub class: ModelClass,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn build_policy(spec: &PolicySpec, shape: Shape, cfg: &ExperimentConfig) -> Result<Policy> {
    match spec {
        PolicySpec::Uniform => Ok(Policy::uniform(shape)),
        PolicySpec::Constant { action } => Policy::constant(shape, *action),
        PolicySpec::FirstStep { probs } => {
            if probs.len() != shape.num_actions {
                return Err(Error::Config("first-step probabilities must have one entry per action".into()));
            }
            let uni = vec![1.0 / shape.num_actions as f64; shape.num_actions];
            Policy::from_fn(shape, |h, _, _| if h == 1 { probs.clone() } else { uni.clone() })
        }
        PolicySpec::File { path } => read_json(&cfg.resolve_path(path)),
    }
}

impl Experiment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let instance = match &cfg.instance {
            InstanceSpec::Ring2 => ring2(),
            InstanceSpec::Ring { advance } => ring(advance)?,
            InstanceSpec::RingFamily { advance } => ring_family(advance)?,
            InstanceSpec::File { path } => read_json(&cfg.resolve_path(path))?,
        };
        let shape = *instance.model.shape();
        instance.model.check_compatible(&instance.model)?;
        if instance.reward.shape() != &shape {
            return Err(Error::Config("instance reward does not match its model".into()));
        }
        let behavior = build_policy(&cfg.behavior, shape, cfg)?;
        let policies = match &cfg.policies {
            PolicyClassSpec::Constants => (0..shape.num_actions).map(|a| Policy::constant(shape, a)).collect::<Result<_>>()?,
            PolicyClassSpec::AllDeterministic { cap } => all_deterministic_policies(shape, *cap)?,
            PolicyClassSpec::Files { paths } => {
                paths.iter().map(|p| read_json::<Policy>(&cfg.resolve_path(p))).collect::<Result<_>>()?
            }
        };
        if policies.is_empty() {
            return Err(Error::Config("empty policy class".into()));
        }
        let class = match &cfg.model_class {
            ModelClassSpec::RingFamily { advances, nominal } => ModelClass::new(
                advances.iter().map(|a| ring_family(a).map(|i| i.model)).collect::<Result<_>>()?,
                Some(*nominal),
            )?,
            ModelClassSpec::Ring { advances, nominal } => ModelClass::new(
                advances.iter().map(|a| ring(a).map(|i| i.model)).collect::<Result<_>>()?,
                Some(*nominal),
            )?,
            ModelClassSpec::Perturbed { count, weight, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut models = vec![instance.model.clone()];
                for _ in 1..*count {
                    models.push(perturb(&mut rng, &instance.model, *weight));
                }
                ModelClass::new(models, Some(0))?
            }
            ModelClassSpec::Files { paths, nominal } => ModelClass::new(
                paths.iter().map(|p| read_json::<TabularModel>(&cfg.resolve_path(p))).collect::<Result<_>>()?,
                *nominal,
            )?,
        };
        instance.model.check_compatible(&class.models[0]).map_err(|e| Error::Config(e.to_string()))?;
        for p in &policies {
            if p.shape() != &shape {
                return Err(Error::Config("policy dimensions differ from the instance".into()));
            }
        }
        Ok(Experiment { instance, behavior, policies, class })
    }
}

/// One `(N, seed)` outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: usize,
    pub gap: f64,
    pub dg_size: Option<usize>,
    pub theta_hat: usize,
    pub conf_size: Option<usize>,
    pub lcb_valid: bool,
    pub ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub n: usize,
    pub seed: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub errors: Vec<RowError>,
    /// True robust value of every listed policy.
    pub reference: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-row generator seed derived from the master seed and the row coordinates.
pub fn row_seed(master: u64, n: usize, seed: usize) -> u64 {
    splitmix64(master ^ splitmix64((n as u64) << 20 ^ seed as u64))
}

/// Robust values of all listed policies under the nominal model.
pub fn reference_values(exp: &Experiment, spec: &UncertaintySpec, referee: Referee, params: &LearnerParams) -> Result<Vec<f64>> {
    exp.policies
        .par_iter()
        .map(|p| match referee {
            Referee::Exact => robust_value_with(&exp.instance.model, p, &exp.instance.reward, spec, &params.robust),
            Referee::Grid { resolution } => {
                let grid = SimplexGrid::new(resolution, exp.instance.model.num_obs())?;
                robust_value_bruteforce(&exp.instance.model, p, &exp.instance.reward, spec, &grid)
            }
        })
        .collect()
}

fn run_row(cfg: &ExperimentConfig, exp: &Experiment, reference: &[f64], n: usize, seed: usize) -> Result<SweepRow> {
    let start = Instant::now();
    let rs = row_seed(cfg.master_seed, n, seed);
    let data = OfflineDataset::sample(&exp.instance.model, &exp.behavior, n, rs)?;
    let params = LearnerParams { split_seed: splitmix64(rs), ..cfg.params.clone() };
    let (selected, bounds, dg, theta_hat, conf) = if cfg.algorithm == 1 {
        let r = algorithm1(&data, &exp.class, &exp.policies, &exp.instance.reward, &cfg.uncertainty, &params)?;
        (r.selected, r.scores.iter().map(|s| s.objective).collect::<Vec<_>>(), Some(r.retained), r.theta_hat, None)
    } else {
        let r = algorithm2(&data, &exp.class, &exp.policies, &exp.instance.reward, &cfg.uncertainty, &params)?;
        (r.selected, r.scores, None, r.theta_hat, Some(r.confidence_set.len()))
    };
    let best = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = (best - reference[selected]).max(0.0);
    let lcb_valid = bounds.iter().zip(reference).all(|(b, v)| *b <= v + 1e-9);
    let ms = if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
    Ok(SweepRow { n, seed, gap, dg_size: dg, theta_hat, conf_size: conf, lcb_valid, ms })
}

/// Runs every `(N, seed)` pair of the schedule. Row failures are recorded,
/// not propagated; only configuration problems return an error.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let exp = Experiment::from_config(cfg)?;
    run_sweep_on(cfg, &exp)
}

pub fn run_sweep_on(cfg: &ExperimentConfig, exp: &Experiment) -> Result<SweepOutcome> {
    let reference = reference_values(exp, &cfg.uncertainty, cfg.referee, &cfg.params)?;
    let cells: Vec<(usize, usize)> =
        cfg.n_schedule.iter().flat_map(|&n| (0..cfg.seeds).map(move |s| (n, s))).collect();
    let results: Vec<(usize, usize, Result<SweepRow>)> =
        cells.par_iter().map(|&(n, s)| (n, s, run_row(cfg, exp, &reference, n, s))).collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (n, seed, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(RowError { n, seed, kind: e.kind().to_string(), message: e.to_string() }),
        }
    }
    rows.sort_by_key(|r| (r.n, r.seed));
    Ok(SweepOutcome { rows, errors, reference })
}

/// Runs `f` inside a pool of `threads` workers, or the env-capped default.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let n = threads.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok())).filter(|&n| n > 0);
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(N, median gap)` pairs used in the fit.
    pub points: Vec<(usize, f64)>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median gap per `N`, for every `N` present in `rows`.
pub fn median_gaps(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let mut g: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.gap).collect();
            (n, median(&mut g))
        })
        .collect()
}

/// Least squares of `log median gap` on `log N`; nonpositive medians are dropped.
pub fn fit_slope(rows: &[SweepRow]) -> Result<SlopeFit> {
    let points: Vec<(usize, f64)> = median_gaps(rows).into_iter().filter(|&(_, m)| m > 0.0).collect();
    if points.len() < 3 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit { slope, intercept, r2, points })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV text with 17 significant digits for floats and rows sorted by `(N, seed)`.
pub fn render_csv(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.n, r.seed));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{:.16e},{},{},{},{},{}\n",
            r.n,
            r.seed,
            r.gap,
            opt(r.dg_size),
            r.theta_hat,
            opt(r.conf_size),
            r.lcb_valid,
            r.ms
        ));
    }
    out
}

/// Writes the CSV through a temporary file in the target directory and renames it into place.
pub fn emit_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(render_csv(rows).as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, seed: usize, gap: f64) -> SweepRow {
        SweepRow { n, seed, gap, dg_size: Some(n / 2), theta_hat: 0, conf_size: None, lcb_valid: true, ms: 0 }
    }

    fn trivial_config() -> ExperimentConfig {
        ExperimentConfig {
            instance: InstanceSpec::Ring2,
            behavior: PolicySpec::Uniform,
            policies: PolicyClassSpec::Files { paths: vec![] },
            model_class: ModelClassSpec::Ring { advances: vec![vec![0.7, 0.8]], nominal: 0 },
            uncertainty: UncertaintySpec::p_tv(0.1),
            n_schedule: vec![128],
            seeds: 1,
            master_seed: 0,
            algorithm: 1,
            params: LearnerParams { alpha: Some(0.1), ..Default::default() },
            referee: Referee::Exact,
            timing: false,
            output: None,
            base_dir: None,
        }
    }

    #[test]
    fn synthetic_slopes() {
        let rows: Vec<SweepRow> = [100usize, 400, 1600, 6400].iter().map(|&n| row(n, 0, 3.0 / (n as f64).sqrt())).collect();
        let f = fit_slope(&rows).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        let flat: Vec<SweepRow> = [100usize, 400, 1600].iter().map(|&n| row(n, 0, 0.2)).collect();
        assert!(fit_slope(&flat).unwrap().slope.abs() < 1e-12);
        let few: Vec<SweepRow> = [100usize, 400, 1600].iter().map(|&n| row(n, 0, if n == 1600 { 0.0 } else { 0.1 })).collect();
        assert_eq!(fit_slope(&few).unwrap_err().kind(), "insufficient-points");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        emit_csv(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{CSV_HEADER}\n"));
        let rows = vec![
            row(512, 1, 0.1 + 0.2),
            SweepRow { conf_size: Some(3), dg_size: None, lcb_valid: false, ..row(128, 0, 1.0 / 3.0) },
        ];
        emit_csv(&rows, &p).unwrap();
        let back = read_csv(&p).unwrap();
        assert_eq!(back, vec![rows[1].clone(), rows[0].clone()]);
        for line in fs::read_to_string(&p).unwrap().lines() {
            assert_eq!(line.split(',').count(), 8);
        }
    }

    #[test]
    fn singleton_sweep_has_zero_gap() {
        let mut cfg = trivial_config();
        cfg.policies = PolicyClassSpec::Constants;
        let mut exp = Experiment::from_config(&cfg).unwrap();
        exp.policies.truncate(1);
        let out = run_sweep_on(&cfg, &exp).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].gap, 0.0);
        assert!(out.errors.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = trivial_config();
        cfg.n_schedule = vec![512, 128];
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        let mut cfg = trivial_config();
        cfg.seeds = 0;
        assert!(cfg.validate().is_err());
        let text = serde_json::to_string(&trivial_config()).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, trivial_config());
    }

    #[test]
    fn sweeps_are_reproducible() {
        let mut cfg = trivial_config();
        cfg.policies = PolicyClassSpec::Constants;
        cfg.model_class = ModelClassSpec::Ring { advances: vec![vec![0.7, 0.8], vec![0.8, 0.7], vec![0.5, 0.5]], nominal: 0 };
        cfg.n_schedule = vec![64, 256];
        cfg.seeds = 4;
        let a = with_threads(Some(1), || run_sweep(&cfg)).unwrap().unwrap();
        let b = with_threads(Some(3), || run_sweep(&cfg)).unwrap().unwrap();
        assert_eq!(render_csv(&a.rows), render_csv(&b.rows));
        assert_eq!(a.rows.len(), 8);
    }
}
