//! Robust values under the four uncertainty sets, brute-force references,
//! dual-optimizer estimates and scaling constants.

use serde::{Deserialize, Serialize};

use crate::ambiguity::{enumerate_ball_capped, f_divergence, Divergence, SetKind, SimplexGrid, UncertaintySpec, DEFAULT_BALL_CAP};
use crate::duals::{
    kl_dual_expectation, p_kl_dual, p_tv_dual_with, p_tv_primal_with, tv_dual_expectation, BudgetConvention, DualSolution,
    DEFAULT_SUBGRADIENT_ITERS, DEFAULT_SUBGRADIENT_STEP,
};
use crate::error::{Error, Result};
use crate::process::{check_triple, value, Policy, RewardSpec, TabularModel};

/// Floor applied to dual-optimizer estimates.
pub const ETA_LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BellmanDual,
    PDual,
    Lp,
    BruteForce,
}

/// Per-history inner problems of the `T`-type recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellmanTables {
    /// `Q_h(tau_h)` for `h = 1..H`, indexed `[h - 1][rank]`.
    pub q: Vec<Vec<f64>>,
    /// Inner dual maximizer for `h = 1..H-1`, indexed `[h - 1][rank]`; `NaN`
    /// where the row is not reachable from the first observation.
    pub lambda: Vec<Vec<f64>>,
    /// Whether the inner problem at `[h - 1][rank]` had a non-constant objective.
    pub informative: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustValueReport {
    pub value: f64,
    pub method: Method,
    pub tables: Option<BellmanTables>,
    pub dual: Option<DualSolution>,
    /// Primal optimum when the dual is reported as a cross-check.
    pub primal: Option<f64>,
}

/// Solver choices for robust values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustOptions {
    pub convention: BudgetConvention,
    /// Also run the `P`-TV subgradient dual next to the LP.
    pub cross_check: bool,
    pub iters: usize,
    pub step: f64,
}

impl Default for RobustOptions {
    fn default() -> Self {
        RobustOptions { convention: BudgetConvention::default(), cross_check: false, iters: DEFAULT_SUBGRADIENT_ITERS, step: DEFAULT_SUBGRADIENT_STEP }
    }
}

fn require(spec: &UncertaintySpec, kind: SetKind) -> Result<()> {
    if spec.set != kind {
        return Err(Error::InvalidArgument(format!("expected a {kind}-type set, got {}", spec.set)));
    }
    Ok(())
}

/// `V_h(x_h) = sum_a pi(a | x_h) Q_h(x_h, a)` for every prefix rank at step `h`.
fn state_values(policy: &Policy, q: &[f64], h: usize) -> Vec<f64> {
    let s = policy.shape();
    let na = s.num_actions;
    (0..s.prefix_count(h)).map(|x| policy.row(h, x).iter().enumerate().map(|(a, p)| p * q[x * na + a]).sum()).collect()
}

/// Backward recursion over full histories with a row-wise inner minimization.
fn bellman<F>(model: &TabularModel, policy: &Policy, reward: &RewardSpec, mut inner: F) -> Result<(f64, BellmanTables)>
where
    F: FnMut(&[f64], &[f64]) -> Result<(f64, f64)>,
{
    check_triple(model, policy, reward)?;
    let s = *model.shape();
    s.check_enumerable(crate::process::DEFAULT_ENUMERATION_CAP)?;
    let hz = s.horizon;
    let (no, na) = (s.num_obs, s.num_actions);
    let mut q = vec![Vec::new(); hz];
    let mut lambda = vec![Vec::new(); hz - 1];
    let mut informative = vec![Vec::new(); hz - 1];
    q[hz - 1] = reward.values().to_vec();
    for h in (1..=hz).rev() {
        if h < hz {
            let v = state_values(policy, &q[h], h + 1);
            let count = s.history_count(h);
            let per_first = count / no;
            let start = model.o1() * per_first;
            let mut qh = vec![0.0; count];
            let mut lh = vec![f64::NAN; count];
            let mut ih = vec![false; count];
            for t in start..start + per_first {
                let ell = &v[t * no..(t + 1) * no];
                let row = model.row(h, t);
                let (val, lam) = inner(row, ell)?;
                qh[t] = val;
                lh[t] = lam;
                let support = row.iter().zip(ell).filter(|(p, _)| **p > 0.0).map(|(_, l)| *l);
                let (lo, hi) = support.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
                ih[t] = hi > lo;
            }
            q[h - 1] = qh;
            lambda[h - 1] = lh;
            informative[h - 1] = ih;
        }
    }
    let x1 = model.o1();
    let v1: f64 = policy.row(1, x1).iter().enumerate().map(|(a, p)| p * q[0][x1 * na + a]).sum();
    Ok((v1, BellmanTables { q, lambda, informative }))
}

/// Robust value under a `T`-type set by the rectangular Bellman recursion.
pub fn robust_value_t(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
) -> Result<RobustValueReport> {
    require(spec, SetKind::T)?;
    let xi = spec.xi;
    let (v, tables) = bellman(model, policy, reward, |row, ell| {
        let d = match spec.div {
            Divergence::Tv => tv_dual_expectation(row, ell, xi)?,
            Divergence::Kl => kl_dual_expectation(row, ell, xi)?,
        };
        Ok((d.value, d.lambda[0]))
    })?;
    Ok(RobustValueReport { value: v, method: Method::BellmanDual, tables: Some(tables), dual: None, primal: None })
}

/// Robust value under a `P`-type set; TV runs the LP and the subgradient dual.
pub fn robust_value_p(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
) -> Result<RobustValueReport> {
    robust_value_p_with(model, policy, reward, spec, &RobustOptions { cross_check: true, ..Default::default() })
}

pub fn robust_value_p_with(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    opts: &RobustOptions,
) -> Result<RobustValueReport> {
    require(spec, SetKind::P)?;
    match spec.div {
        Divergence::Tv => {
            let primal = p_tv_primal_with(model, policy, reward, spec.xi, opts.convention)?;
            let dual = if opts.cross_check {
                Some(p_tv_dual_with(model, policy, reward, spec.xi, opts.iters, opts.step, opts.convention)?)
            } else {
                None
            };
            Ok(RobustValueReport { value: primal, method: Method::Lp, tables: None, dual, primal: Some(primal) })
        }
        Divergence::Kl => {
            let d = p_kl_dual(model, policy, reward, spec.xi)?;
            Ok(RobustValueReport { value: d.value, method: Method::PDual, tables: None, dual: Some(d), primal: None })
        }
    }
}

/// Robust value for any set kind without the `P`-TV cross-check.
pub fn robust_value(model: &TabularModel, policy: &Policy, reward: &RewardSpec, spec: &UncertaintySpec) -> Result<f64> {
    robust_value_with(model, policy, reward, spec, &RobustOptions::default())
}

pub fn robust_value_with(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    opts: &RobustOptions,
) -> Result<f64> {
    Ok(match spec.set {
        SetKind::T => robust_value_t(model, policy, reward, spec)?.value,
        SetKind::P => robust_value_p_with(model, policy, reward, spec, opts)?.value,
    })
}

/// Grid reference for robust values.
///
/// `T`-type: the Bellman recursion with each inner minimum taken over the grid
/// points of the row ball (the grid-rounded nominal row when that ball holds
/// no grid point). `P`-type: minimum value over the enumerated grid models.
pub fn robust_value_bruteforce(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    grid: &SimplexGrid,
) -> Result<f64> {
    robust_value_bruteforce_capped(model, policy, reward, spec, grid, DEFAULT_BALL_CAP)
}

pub fn robust_value_bruteforce_capped(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    grid: &SimplexGrid,
    cap: u128,
) -> Result<f64> {
    check_triple(model, policy, reward)?;
    if grid.dim != model.num_obs() {
        return Err(Error::Shape(format!("grid dimension {} vs |O| = {}", grid.dim, model.num_obs())));
    }
    match spec.set {
        SetKind::T => {
            let s = model.shape();
            let rows = (s.history_count(s.horizon.saturating_sub(1).max(1)) as u128) * grid.count();
            if rows > cap {
                return Err(Error::TooLarge { count: rows, cap });
            }
            let points: Vec<Vec<f64>> = grid.points().collect();
            let (v, _) = bellman(model, policy, reward, |row, ell| {
                let mut best = f64::INFINITY;
                for p in &points {
                    let inside = if spec.xi == 0.0 {
                        p.iter().zip(row).all(|(a, b)| (a - b).abs() <= 1e-12)
                    } else {
                        f_divergence(p, row, spec.div)? <= spec.xi + 1e-12
                    };
                    if inside {
                        best = best.min(p.iter().zip(ell).map(|(a, b)| a * b).sum());
                    }
                }
                if best == f64::INFINITY {
                    best = grid.round(row).iter().zip(ell).map(|(a, b)| a * b).sum();
                }
                Ok((best, f64::NAN))
            })?;
            Ok(v)
        }
        SetKind::P => {
            let stream = enumerate_ball_capped(model, spec, grid, cap)?;
            let mut best = f64::INFINITY;
            for m in stream {
                best = best.min(value(&m, policy, reward)?);
            }
            if best == f64::INFINITY {
                return Err(Error::Infeasible);
            }
            Ok(best)
        }
    }
}

/// Lower-bound estimates of the KL dual optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaLambda {
    pub eta: f64,
    pub lambda: f64,
    /// Set when no informative inner problem exists or a floor was applied.
    pub degenerate: bool,
}

/// `eta*` from the per-sequence `P`-KL maximizers and `lambda*` from the
/// per-history `T`-KL maximizers, each the minimum over informative problems
/// and floored at [`ETA_LAMBDA_FLOOR`].
pub fn estimate_eta_lambda(model_hat: &TabularModel, policy: &Policy, reward: &RewardSpec, xi: f64) -> Result<EtaLambda> {
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument("optimizer estimates need xi > 0".into()));
    }
    let p = p_kl_dual(model_hat, policy, reward, xi)?;
    let eta = p.eta.iter().copied().filter(|e| *e > 0.0 && e.is_finite()).fold(f64::INFINITY, f64::min);
    let t = robust_value_t(model_hat, policy, reward, &UncertaintySpec::t_kl(xi))?;
    let tables = t.tables.expect("T-type recursion records its tables");
    let mut lambda = f64::INFINITY;
    for (lh, ih) in tables.lambda.iter().zip(&tables.informative) {
        for (l, inf) in lh.iter().zip(ih) {
            if *inf && l.is_finite() {
                lambda = lambda.min(*l);
            }
        }
    }
    let mut degenerate = false;
    let mut floor = |v: f64| {
        if !v.is_finite() || v < ETA_LAMBDA_FLOOR {
            degenerate = true;
            ETA_LAMBDA_FLOOR
        } else {
            v
        }
    };
    let eta = floor(eta);
    let lambda = floor(lambda);
    Ok(EtaLambda { eta, lambda, degenerate })
}

/// Smallest informative `T`-KL inner maximizer when the rows of one model are
/// paired with the continuation values of the other, in both directions.
pub fn cross_lambda_star(
    model_a: &TabularModel,
    model_b: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument("optimizer estimates need xi > 0".into()));
    }
    model_a.check_compatible(model_b)?;
    let spec = UncertaintySpec::t_kl(xi);
    let ta = robust_value_t(model_a, policy, reward, &spec)?.tables.expect("tables");
    let tb = robust_value_t(model_b, policy, reward, &spec)?.tables.expect("tables");
    let s = *model_a.shape();
    let no = s.num_obs;
    let mut best = f64::INFINITY;
    for (rows, tables) in [(model_a, &tb), (model_b, &ta)] {
        for h in 1..s.horizon {
            let v = state_values(policy, &tables.q[h], h + 1);
            let per_first = s.history_count(h) / no;
            let start = rows.o1() * per_first;
            for t in start..start + per_first {
                let row = rows.row(h, t);
                let ell = &v[t * no..(t + 1) * no];
                let support = row.iter().zip(ell).filter(|(p, _)| **p > 0.0).map(|(_, l)| *l);
                let (lo, hi) = support.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
                if hi > lo {
                    best = best.min(kl_dual_expectation(row, ell, xi)?.lambda[0]);
                }
            }
        }
    }
    Ok(if best.is_finite() { best.max(ETA_LAMBDA_FLOOR) } else { ETA_LAMBDA_FLOOR })
}

/// Inputs to the scaling constants `C_u^i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingInputs {
    pub eta: f64,
    pub lambda: f64,
    pub c_b: f64,
    pub xi: f64,
}

impl ScalingInputs {
    pub fn new(eta: f64, lambda: f64, c_b: f64, xi: f64) -> Result<Self> {
        if !(eta > 0.0) || !(lambda > 0.0) {
            return Err(Error::InvalidArgument("eta* and lambda* must be positive".into()));
        }
        if !(c_b >= 1.0) {
            return Err(Error::InvalidArgument(format!("C_B must be at least 1, got {c_b}")));
        }
        if !(xi >= 0.0) {
            return Err(Error::InvalidArgument("xi must be nonnegative".into()));
        }
        Ok(ScalingInputs { eta, lambda, c_b, xi })
    }
}

/// `C_P^1 = 1`, `C_T^1 = C_B`, `C_P^2 = 3 e^{1/eta*}`,
/// `C_T^2 = C_B max{e^xi / xi, lambda* e^{1/lambda*}}`.
pub fn scaling_constant(spec: &UncertaintySpec, inputs: &ScalingInputs) -> Result<f64> {
    Ok(match (spec.set, spec.div) {
        (SetKind::P, Divergence::Tv) => 1.0,
        (SetKind::T, Divergence::Tv) => inputs.c_b,
        (SetKind::P, Divergence::Kl) => 3.0 * (1.0 / inputs.eta).exp(),
        (SetKind::T, Divergence::Kl) => {
            if inputs.xi == 0.0 {
                return Err(Error::UndefinedScaling("exp(xi) / xi diverges at xi = 0".into()));
            }
            inputs.c_b * (inputs.xi.exp() / inputs.xi).max(inputs.lambda * (1.0 / inputs.lambda).exp())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance, random_policy, ring2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_specs(xi: f64) -> [UncertaintySpec; 4] {
        [UncertaintySpec::t_tv(xi), UncertaintySpec::t_kl(xi), UncertaintySpec::p_tv(xi), UncertaintySpec::p_kl(xi)]
    }

    #[test]
    fn ring2_examples() {
        let inst = ring2();
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        let t = robust_value_t(&inst.model, &pi, &inst.reward, &UncertaintySpec::t_tv(0.1)).unwrap();
        assert!((t.value - 0.7).abs() < 1e-12);
        let p = robust_value_p(&inst.model, &pi, &inst.reward, &UncertaintySpec::p_tv(0.2)).unwrap();
        assert!((p.value - 0.6).abs() < 1e-12);
        assert!((p.dual.unwrap().value - 0.6).abs() < 1e-3);
        let t2 = robust_value_t(&inst.model, &pi, &inst.reward, &UncertaintySpec::t_tv(0.2)).unwrap();
        assert!(t2.value <= t.value);
    }

    #[test]
    fn zero_radius_is_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for h in [1, 2, 3] {
            let inst = random_instance(&mut rng, h, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let nominal = value(&inst.model, &pi, &inst.reward).unwrap();
            for spec in all_specs(0.0) {
                let v = robust_value(&inst.model, &pi, &inst.reward, &spec).unwrap();
                assert!((v - nominal).abs() < 1e-12, "{spec:?}: {v} vs {nominal}");
            }
        }
    }

    #[test]
    fn center_dominance_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 3, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let nominal = value(&inst.model, &pi, &inst.reward).unwrap();
            for spec in all_specs(0.0) {
                let mut prev = nominal + 1e-12;
                for k in 0..=10 {
                    let v = robust_value(&inst.model, &pi, &inst.reward, &spec.with_xi(0.05 * k as f64)).unwrap();
                    assert!(v <= prev + 1e-9, "{spec:?} at {k}: {v} > {prev}");
                    assert!((0.0..=1.0 + 1e-12).contains(&v));
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn bellman_matches_grid_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = SimplexGrid::new(50, 2).unwrap();
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 2, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let xi = rng.gen_range(0.01..0.4);
            for spec in [UncertaintySpec::t_tv(xi), UncertaintySpec::t_kl(xi)] {
                let d = robust_value_t(&inst.model, &pi, &inst.reward, &spec).unwrap().value;
                let b = robust_value_bruteforce(&inst.model, &pi, &inst.reward, &spec, &grid).unwrap();
                assert!((d - b).abs() <= 2.0 / 50.0, "{spec:?}: {d} vs {b}");
            }
        }
    }

    #[test]
    fn p_type_grid_reference_is_above_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let grid = SimplexGrid::new(20, 2).unwrap();
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 2, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            for spec in [UncertaintySpec::p_tv(0.15), UncertaintySpec::p_kl(0.1)] {
                let exact = robust_value(&inst.model, &pi, &inst.reward, &spec).unwrap();
                let b = robust_value_bruteforce(&inst.model, &pi, &inst.reward, &spec, &grid).unwrap();
                assert!(b >= exact - 1e-9 && b - exact <= 2.0 / 20.0, "{spec:?}: {exact} vs {b}");
            }
        }
    }

    #[test]
    fn p_ball_is_tighter_when_t_image_fits() {
        // at horizon 2 the two balls coincide row by row, so values agree
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let inst = random_instance(&mut rng, 2, 2, 2);
        let pi = random_policy(&mut rng, *inst.model.shape());
        let t = robust_value(&inst.model, &pi, &inst.reward, &UncertaintySpec::t_tv(0.1)).unwrap();
        let p = robust_value(&inst.model, &pi, &inst.reward, &UncertaintySpec::p_tv(0.1)).unwrap();
        assert!(p <= t + 1e-12);
    }

    #[test]
    fn scaling_examples() {
        let inputs = ScalingInputs::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(scaling_constant(&UncertaintySpec::p_tv(1.0), &inputs).unwrap(), 1.0);
        assert!((scaling_constant(&UncertaintySpec::p_kl(1.0), &inputs).unwrap() - 3.0 * 1f64.exp()).abs() < 1e-12);
        assert!((scaling_constant(&UncertaintySpec::t_kl(1.0), &inputs).unwrap() - 1f64.exp()).abs() < 1e-12);
        let zero = ScalingInputs::new(1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(scaling_constant(&UncertaintySpec::t_kl(0.0), &zero).unwrap_err().kind(), "undefined-scaling");
        assert!(ScalingInputs::new(0.0, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn eta_lambda_estimates() {
        let inst = ring2();
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        let e = estimate_eta_lambda(&inst.model, &pi, &inst.reward, 0.1).unwrap();
        assert!(e.eta > ETA_LAMBDA_FLOOR && e.lambda > ETA_LAMBDA_FLOOR && !e.degenerate);
        // the grid of tolerances only moves the optimizers slightly
        let coarse = crate::duals::kl_dual_expectation_tol(&[0.2, 0.8], &[0.0, 1.0], 0.1, 1e-8).unwrap();
        let fine = crate::duals::kl_dual_expectation_tol(&[0.2, 0.8], &[0.0, 1.0], 0.1, 1e-10).unwrap();
        assert!((coarse.lambda[0] - fine.lambda[0]).abs() < 1e-4);
        let again = estimate_eta_lambda(&inst.model, &pi, &inst.reward, 0.1).unwrap();
        assert_eq!(e, again);
        let flat = RewardSpec::constant(*inst.model.shape(), 0.5).unwrap();
        let d = estimate_eta_lambda(&inst.model, &pi, &flat, 0.1).unwrap();
        assert!(d.degenerate && d.eta == ETA_LAMBDA_FLOOR && d.lambda == ETA_LAMBDA_FLOOR);
    }
}
