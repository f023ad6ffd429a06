//! Coverage coefficients, the wellness number `C_B` and suboptimality gaps.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ambiguity::{enumerate_ball_capped, Divergence, SetKind, SimplexGrid, UncertaintySpec, DEFAULT_BALL_CAP};
use crate::error::{Error, Result};
use crate::process::{history_distribution, Policy, RewardSpec, TabularModel};
use crate::psr::{feature_table, CoreTests};
use crate::robust::{robust_value_with, RobustOptions};

/// Eigenvalues of the behavior moment matrix at or below this are treated as zero.
pub const RANGE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub type1: f64,
    pub type2: f64,
    /// Largest generalized eigenvalue at each `h = 0..H-1`.
    pub type1_per_step: Vec<f64>,
    /// `E^rho[(D^pi / D^rho)^2]` at each `h = 1..H`.
    pub type2_per_step: Vec<f64>,
    /// `max_{h, tau_h} D^pi(tau_h) / D^rho(tau_h)`.
    pub pointwise: f64,
}

fn check_pair(pi: &Policy, rho: &Policy, model: &TabularModel) -> Result<()> {
    if pi.shape() != model.shape() || rho.shape() != model.shape() {
        return Err(Error::Shape("policy and model dimensions differ".into()));
    }
    Ok(())
}

fn moment(model: &TabularModel, policy: &Policy, feats: &[Option<Vec<f64>>], h: usize, dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    if h == 0 {
        let f = feats[0].as_ref().expect("the empty history is always reachable");
        return DMatrix::from_fn(dim, dim, |i, j| f[i] * f[j]);
    }
    let d = history_distribution(model, policy, h);
    for (r, &p) in d.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        if let Some(f) = &feats[r] {
            for i in 0..dim {
                for j in 0..dim {
                    m[(i, j)] += p * f[i] * f[j];
                }
            }
        }
    }
    m
}

/// `max_x x^T A x / x^T B x` restricted to the range of `B`; `+inf` when `A`
/// has mass outside that range.
pub fn generalized_max_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let eb = SymmetricEigen::new(b.clone());
    let keep: Vec<usize> = (0..eb.eigenvalues.len()).filter(|&i| eb.eigenvalues[i] > RANGE_CUTOFF).collect();
    let n = a.nrows();
    let v = DMatrix::from_fn(n, keep.len(), |i, k| eb.eigenvectors[(i, keep[k])]);
    let proj = &v * v.transpose();
    let perp = DMatrix::identity(n, n) - proj;
    let outside = (&perp * a * &perp).norm();
    if outside > RANGE_CUTOFF.max(1e-9 * a.norm()) {
        return f64::INFINITY;
    }
    if keep.is_empty() {
        return 0.0;
    }
    let w = DMatrix::from_fn(n, keep.len(), |i, k| eb.eigenvectors[(i, keep[k])] / eb.eigenvalues[keep[k]].sqrt());
    let c = w.transpose() * a * &w;
    let c = (&c + c.transpose()) * 0.5;
    SymmetricEigen::new(c).eigenvalues.iter().copied().fold(0.0, f64::max)
}

fn type1_per_step(pi: &Policy, rho: &Policy, model: &TabularModel, tests: &CoreTests) -> Result<Vec<f64>> {
    check_pair(pi, rho, model)?;
    tests.check(model.shape())?;
    let mut out = Vec::new();
    for h in 0..model.horizon() {
        let feats = feature_table(model, tests, h);
        let dim = tests.tests(h).len();
        let a = moment(model, pi, &feats, h, dim);
        let b = moment(model, rho, &feats, h, dim);
        out.push(generalized_max_eigen(&a, &b));
    }
    Ok(out)
}

/// Type-I coefficient: largest generalized eigenvalue of the feature second
/// moments under `pi` and `rho`, maximized over steps.
pub fn type1_coeff(pi: &Policy, rho: &Policy, model: &TabularModel, tests: &CoreTests) -> Result<f64> {
    Ok(type1_per_step(pi, rho, model, tests)?.into_iter().fold(0.0, f64::max))
}

fn type2_per_step(pi: &Policy, rho: &Policy, model: &TabularModel) -> Result<Vec<f64>> {
    check_pair(pi, rho, model)?;
    Ok((1..=model.horizon())
        .map(|h| {
            let dp = history_distribution(model, pi, h);
            let dr = history_distribution(model, rho, h);
            let mut total = 0.0;
            for (p, r) in dp.iter().zip(&dr) {
                if *p == 0.0 {
                    continue;
                }
                if *r == 0.0 {
                    return f64::INFINITY;
                }
                total += p * p / r;
            }
            total
        })
        .collect())
}

/// Type-II coefficient `sum_h E^rho[(D^pi / D^rho)^2]`.
pub fn type2_coeff(pi: &Policy, rho: &Policy, model: &TabularModel) -> Result<f64> {
    Ok(type2_per_step(pi, rho, model)?.iter().sum())
}

/// Largest density ratio `D^pi(tau_h) / D^rho(tau_h)` over all steps.
pub fn pointwise_ratio(pi: &Policy, rho: &Policy, model: &TabularModel) -> Result<f64> {
    check_pair(pi, rho, model)?;
    let mut best: f64 = 0.0;
    for h in 1..=model.horizon() {
        let dp = history_distribution(model, pi, h);
        let dr = history_distribution(model, rho, h);
        for (p, r) in dp.iter().zip(&dr) {
            if *p > 0.0 {
                best = best.max(if *r == 0.0 { f64::INFINITY } else { p / r });
            }
        }
    }
    Ok(best)
}

pub fn coverage_report(pi: &Policy, rho: &Policy, model: &TabularModel, tests: &CoreTests) -> Result<CoverageReport> {
    let t1 = type1_per_step(pi, rho, model, tests)?;
    let t2 = type2_per_step(pi, rho, model)?;
    Ok(CoverageReport {
        type1: t1.iter().copied().fold(0.0, f64::max),
        type2: t2.iter().sum(),
        type1_per_step: t1,
        type2_per_step: t2,
        pointwise: pointwise_ratio(pi, rho, model)?,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    match (num > 0.0, den > 0.0) {
        (_, true) => num / den,
        (false, false) => 1.0,
        (true, false) => f64::INFINITY,
    }
}

/// Grid estimate of `C_B`: the largest `P^theta(x_h | a) / P^center(x_h | a)`
/// over ball members on the grid. A lower bound on the supremum.
pub fn wellness_cb(center: &TabularModel, spec: &UncertaintySpec, grid: &SimplexGrid) -> Result<f64> {
    wellness_cb_capped(center, spec, grid, DEFAULT_BALL_CAP)
}

pub fn wellness_cb_capped(center: &TabularModel, spec: &UncertaintySpec, grid: &SimplexGrid, cap: u128) -> Result<f64> {
    if spec.xi == 0.0 {
        return Ok(1.0);
    }
    let hz = center.horizon();
    let base: Vec<Vec<f64>> = (2..=hz).map(|h| center.prefix_probs(h)).collect();
    let mut best: f64 = 1.0;
    for m in enumerate_ball_capped(center, spec, grid, cap)? {
        for (k, h) in (2..=hz).enumerate() {
            for (p, q) in m.prefix_probs(h).iter().zip(&base[k]) {
                best = best.max(ratio(*p, *q));
            }
        }
        if best == f64::INFINITY {
            break;
        }
    }
    Ok(best)
}

/// Largest `q / p` with `KL(Bern(q) || Bern(p)) <= xi`.
fn kl_event_ratio(p: f64, xi: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 || -p.ln() <= xi {
        return 1.0 / p;
    }
    let bkl = |q: f64| {
        let a = if q > 0.0 { q * (q / p).ln() } else { 0.0 };
        let b = if q < 1.0 { (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln() } else { 0.0 };
        a + b
    };
    let (mut lo, mut hi) = (p, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bkl(mid) <= xi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo / p
}

/// Largest ratio by which a ball member can inflate an event of nominal probability `p`.
fn event_ratio(p: f64, div: Divergence, xi: f64) -> f64 {
    match div {
        Divergence::Tv => {
            if p <= 0.0 {
                if xi > 0.0 { f64::INFINITY } else { 1.0 }
            } else {
                (p + xi).min(1.0) / p
            }
        }
        Divergence::Kl => kl_event_ratio(p, xi),
    }
}

/// Exact `C_B` for either set kind.
///
/// `T`-type balls are rectangular, so the supremum of a prefix ratio is the
/// product of the per-row suprema along the prefix. For `P`-type balls the
/// supremum of a prefix probability is the largest mass the joint ball can put
/// on that event.
pub fn wellness_cb_exact(center: &TabularModel, spec: &UncertaintySpec) -> Result<f64> {
    let s = *center.shape();
    s.check_enumerable(crate::process::DEFAULT_ENUMERATION_CAP)?;
    if spec.xi == 0.0 {
        return Ok(1.0);
    }
    let (no, na) = (s.num_obs, s.num_actions);
    let mut best: f64 = 1.0;
    match spec.set {
        SetKind::P => {
            for h in 2..=s.horizon {
                let start = center.o1() * s.prefix_count(h) / no;
                for p in &center.prefix_probs(h)[start..start + s.prefix_count(h) / no] {
                    best = best.max(event_ratio(*p, spec.div, spec.xi));
                }
            }
        }
        SetKind::T => {
            // running product along prefixes starting at o_1
            let mut layer = vec![0.0; s.prefix_count(1)];
            layer[center.o1()] = 1.0;
            for h in 1..s.horizon {
                let mut next = vec![0.0; s.prefix_count(h + 1)];
                for (x, &r) in layer.iter().enumerate() {
                    if r == 0.0 {
                        continue;
                    }
                    for a in 0..na {
                        let t = x * na + a;
                        for (o, &p) in center.row(h, t).iter().enumerate() {
                            let v = r * event_ratio(p, spec.div, spec.xi);
                            next[t * no + o] = v;
                            best = best.max(v);
                        }
                    }
                }
                layer = next;
            }
        }
    }
    Ok(best)
}

/// `max_pi V_B^pi - V_B^selected` over the listed policies.
pub fn suboptimality_gap(
    selected: &Policy,
    policies: &[Policy],
    model: &TabularModel,
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    opts: &RobustOptions,
) -> Result<f64> {
    let own = robust_value_with(model, selected, reward, spec, opts)?;
    let mut best = own;
    for p in policies {
        best = best.max(robust_value_with(model, p, reward, spec, opts)?);
    }
    Ok(best - own)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance, random_policy, ring2};
    use crate::process::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_policy_gives_unit_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inst = random_instance(&mut rng, 3, 2, 2);
        let rho = random_policy(&mut rng, *inst.model.shape());
        let tests = CoreTests::default_for(inst.model.shape());
        assert!((type1_coeff(&rho, &rho, &inst.model, &tests).unwrap() - 1.0).abs() < 1e-9);
        assert!((type2_coeff(&rho, &rho, &inst.model).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn type1_below_pointwise_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let rho = random_policy(&mut rng, *inst.model.shape());
            let tests = CoreTests::default_for(inst.model.shape());
            let r = coverage_report(&pi, &rho, &inst.model, &tests).unwrap();
            assert!(r.type1 <= r.pointwise * (1.0 + 1e-8), "{r:?}");
        }
    }

    #[test]
    fn unreachable_histories_give_infinity() {
        let inst = ring2();
        let s = *inst.model.shape();
        let pi = Policy::constant(s, 1).unwrap();
        let rho = Policy::constant(s, 0).unwrap();
        assert_eq!(type2_coeff(&pi, &rho, &inst.model).unwrap(), f64::INFINITY);
        let tests = CoreTests::default_for(&s);
        assert_eq!(type1_coeff(&pi, &rho, &inst.model, &tests).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ring2_type2_by_hand() {
        let inst = ring2();
        let s = *inst.model.shape();
        let pi = Policy::constant(s, 1).unwrap();
        let rho = Policy::uniform(s);
        // h = 1: one history with ratio 2; h = 2: pi puts p(o_2) on (1, 1), rho p(o_2) / 4
        let expected = 2.0 + (0.2f64.powi(2) / (0.2 / 4.0) + 0.8f64.powi(2) / (0.8 / 4.0));
        assert!((type2_coeff(&pi, &rho, &inst.model).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn wellness_examples() {
        let inst = ring2();
        let grid = SimplexGrid::new(20, 2).unwrap();
        assert_eq!(wellness_cb(&inst.model, &UncertaintySpec::t_tv(0.0), &grid).unwrap(), 1.0);
        let mut prev = 1.0;
        for xi in [0.05, 0.1, 0.2] {
            let spec = UncertaintySpec::t_tv(xi);
            let g = wellness_cb(&inst.model, &spec, &grid).unwrap();
            let e = wellness_cb_exact(&inst.model, &spec).unwrap();
            assert!(g.is_finite() && g >= prev && g <= e + 1e-12);
            prev = g;
        }
        let s = Shape::new(2, 2, 1).unwrap();
        let m = TabularModel::from_fn(s, 0, |_, _, _| vec![1.0, 0.0]).unwrap();
        assert_eq!(wellness_cb(&m, &UncertaintySpec::t_tv(0.1), &grid).unwrap(), f64::INFINITY);
        assert_eq!(wellness_cb_exact(&m, &UncertaintySpec::t_tv(0.1)).unwrap(), f64::INFINITY);
        assert_eq!(wellness_cb_exact(&m, &UncertaintySpec::t_kl(0.1)).unwrap(), 1.0);
    }

    #[test]
    fn exact_cb_bounds_grid_cb() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let grid = SimplexGrid::new(40, 2).unwrap();
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 3, 2, 1);
            for spec in [UncertaintySpec::t_tv(0.1), UncertaintySpec::t_kl(0.05)] {
                let g = wellness_cb(&inst.model, &spec, &grid).unwrap();
                let e = wellness_cb_exact(&inst.model, &spec).unwrap();
                assert!(g <= e * (1.0 + 1e-9), "{spec:?}: {g} > {e}");
            }
        }
    }

    #[test]
    fn ring2_gap() {
        let inst = ring2();
        let s = *inst.model.shape();
        let pols = vec![Policy::constant(s, 0).unwrap(), Policy::constant(s, 1).unwrap()];
        let spec = UncertaintySpec::t_tv(0.1);
        let opts = RobustOptions::default();
        let g = suboptimality_gap(&pols[0], &pols, &inst.model, &inst.reward, &spec, &opts).unwrap();
        assert!((g - 0.1).abs() < 1e-12);
        assert_eq!(suboptimality_gap(&pols[1], &pols, &inst.model, &inst.reward, &spec, &opts).unwrap(), 0.0);
        assert_eq!(suboptimality_gap(&pols[0], &pols[..1], &inst.model, &inst.reward, &spec, &opts).unwrap(), 0.0);
    }
}
