//! Offline learners over explicit model and policy classes: the pessimistic
//! bonus learner (MLE, distillation, elliptical bonus, lower confidence bound)
//! and the double-pessimism learner (likelihood confidence set, maximin).

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{Divergence, SetKind, UncertaintySpec};
use crate::diagnostics::wellness_cb_exact;
use crate::error::{Error, Result};
use crate::process::{expectation, sample_with, traj_prob_policy, Policy, RewardSpec, Shape, TabularModel, Trajectory};
use crate::psr::{feature_table, gamma_condition, CoreTests};
use crate::robust::{estimate_eta_lambda, robust_value_with, scaling_constant, RobustOptions, ScalingInputs};

/// A finite model class sharing one shape and one set of core tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelClass {
    pub models: Vec<TabularModel>,
    /// Index of the data-generating model; experiments only.
    #[serde(default)]
    pub nominal: Option<usize>,
    #[serde(default)]
    pub tests: Option<CoreTests>,
}

impl ModelClass {
    pub fn new(models: Vec<TabularModel>, nominal: Option<usize>) -> Result<Self> {
        let c = ModelClass { models, nominal, tests: None };
        c.check()?;
        Ok(c)
    }

    pub fn with_tests(mut self, tests: CoreTests) -> Result<Self> {
        tests.check(self.shape())?;
        self.tests = Some(tests);
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let first = self.models.first().ok_or_else(|| Error::InvalidArgument("empty model class".into()))?;
        for m in &self.models[1..] {
            first.check_compatible(m)?;
        }
        if let Some(n) = self.nominal {
            if n >= self.models.len() {
                return Err(Error::InvalidArgument(format!("nominal index {n} out of range")));
            }
        }
        if let Some(t) = &self.tests {
            t.check(first.shape())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn shape(&self) -> &Shape {
        self.models[0].shape()
    }

    pub fn core_tests(&self) -> CoreTests {
        self.tests.clone().unwrap_or_else(|| CoreTests::default_for(self.shape()))
    }
}

/// Trajectories collected by a behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub trajectories: Vec<Trajectory>,
    pub behavior: Policy,
}

impl OfflineDataset {
    pub fn new(trajectories: Vec<Trajectory>, behavior: Policy) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one trajectory".into()));
        }
        for t in &trajectories {
            t.check(behavior.shape())?;
        }
        Ok(OfflineDataset { trajectories, behavior })
    }

    /// `n` trajectories from `model` under `behavior`, deterministic in `seed`.
    pub fn sample(model: &TabularModel, behavior: &Policy, n: usize, seed: u64) -> Result<Self> {
        if model.shape() != behavior.shape() {
            return Err(Error::Shape("model/behavior dimensions differ".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..n).map(|_| sample_with(model, behavior, &mut rng)).collect();
        Self::new(t, behavior.clone())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    fn counts(&self) -> BTreeMap<&Trajectory, usize> {
        let mut c = BTreeMap::new();
        for t in &self.trajectories {
            *c.entry(t).or_insert(0) += 1;
        }
        c
    }
}

/// `sum_n log D_theta^rho(tau^n)` for every class member (`-inf` on a zero).
pub fn log_likelihoods(data: &OfflineDataset, cls: &ModelClass) -> Result<Vec<f64>> {
    cls.check()?;
    if data.behavior.shape() != cls.shape() {
        return Err(Error::Shape("dataset and class dimensions differ".into()));
    }
    let counts = data.counts();
    cls.models
        .iter()
        .map(|m| {
            let mut ll = 0.0;
            for (t, &c) in &counts {
                let p = traj_prob_policy(m, &data.behavior, t)?;
                if p <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                ll += c as f64 * p.ln();
            }
            Ok(ll)
        })
        .collect()
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index minimizing the average negative log-likelihood; lowest index on ties.
pub fn mle_fit(data: &OfflineDataset, cls: &ModelClass) -> Result<usize> {
    let ll = log_likelihoods(data, cls)?;
    if ll.iter().all(|x| *x == f64::NEG_INFINITY) {
        return Err(Error::ClassIncompatible);
    }
    Ok(first_argmax(&ll))
}

/// Retained trajectories and their per-step split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledDataset {
    /// Indices into the source dataset.
    pub retained: Vec<usize>,
    /// `splits[h]` feeds the bonus matrix at step `h = 0..H-1`.
    pub splits: Vec<Vec<usize>>,
    pub p_min: f64,
    /// `D_theta_hat^rho` of every source trajectory.
    pub probs: Vec<f64>,
    pub empty: bool,
}

/// Keeps trajectories with `D_theta_hat^rho(tau) >= p_min`, then splits them
/// evenly at random into `H` parts.
///
/// The retained trajectories are put in canonical order before shuffling so
/// the split does not depend on the order of the dataset.
pub fn distill(data: &OfflineDataset, theta_hat: &TabularModel, p_min: f64, seed: u64) -> Result<DistilledDataset> {
    if !(p_min >= 0.0) {
        return Err(Error::InvalidArgument("p_min must be nonnegative".into()));
    }
    let probs: Vec<f64> =
        data.trajectories.iter().map(|t| traj_prob_policy(theta_hat, &data.behavior, t)).collect::<Result<_>>()?;
    let mut retained: Vec<usize> = (0..data.len()).filter(|&i| probs[i] >= p_min).collect();
    retained.sort_by(|&i, &j| data.trajectories[i].cmp(&data.trajectories[j]).then(i.cmp(&j)));
    let mut order = retained.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let hz = theta_hat.horizon();
    let mut splits = vec![Vec::new(); hz];
    for (k, i) in order.into_iter().enumerate() {
        splits[k % hz].push(i);
    }
    retained.sort_unstable();
    let empty = retained.is_empty();
    if empty {
        warn!("distillation kept no trajectories at p_min = {p_min:e}");
    }
    Ok(DistilledDataset { retained, splits, p_min, probs, empty })
}

/// Elliptical bonus `min{alpha sqrt(sum_h |psi_bar(tau_h)|^2_{U_h^{-1}}), 1}`.
#[derive(Debug, Clone)]
pub struct BonusFn {
    pub ridge: f64,
    pub alpha: f64,
    /// `U_h` for `h = 0..H-1`.
    pub u: Vec<DMatrix<f64>>,
    chol: Vec<Cholesky<f64, nalgebra::Dyn>>,
    feats: Vec<Vec<Option<Vec<f64>>>>,
    shape: Shape,
}

impl BonusFn {
    /// `|psi_bar(tau_h)|^2_{U_h^{-1}}` for history rank `rank` at step `h`;
    /// `None` when the history is unreachable under the fitted model.
    pub fn quad_form(&self, h: usize, rank: usize) -> Option<f64> {
        let f = self.feats[h][rank].as_ref()?;
        let v = DVector::from_column_slice(f);
        Some(v.dot(&self.chol[h].solve(&v)))
    }

    /// Bonus of the trajectory with rank `rank`; unreachable prefixes give 1.
    pub fn at_rank(&self, rank: usize) -> f64 {
        if self.alpha == 0.0 {
            return 0.0;
        }
        let hz = self.shape.horizon;
        let radix = self.shape.pair_radix();
        let mut total = 0.0;
        for h in 0..hz {
            let r = if h == 0 { 0 } else { rank / radix.pow((hz - h) as u32) };
            match self.quad_form(h, r) {
                Some(q) => total += q.max(0.0),
                None => return 1.0,
            }
        }
        (self.alpha * total.sqrt()).min(1.0)
    }

    pub fn eval(&self, traj: &Trajectory) -> Result<f64> {
        traj.check(&self.shape)?;
        Ok(self.at_rank(traj.rank(&self.shape)))
    }

    /// Dense bonus over every trajectory rank.
    pub fn table(&self) -> Vec<f64> {
        (0..self.shape.history_count(self.shape.horizon)).map(|r| self.at_rank(r)).collect()
    }
}

/// `U_h = ridge I + sum_{tau in D_h} psi_bar(tau_h) psi_bar(tau_h)^T` under the fitted model.
pub fn build_bonus(
    theta_hat: &TabularModel,
    tests: &CoreTests,
    data: &OfflineDataset,
    distilled: &DistilledDataset,
    ridge: f64,
    alpha: f64,
) -> Result<BonusFn> {
    if !(ridge > 0.0) {
        return Err(Error::InvalidArgument("ridge must be positive".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
    }
    let s = *theta_hat.shape();
    tests.check(&s)?;
    let radix = s.pair_radix();
    let feats: Vec<Vec<Option<Vec<f64>>>> = (0..s.horizon).map(|h| feature_table(theta_hat, tests, h)).collect();
    let mut u = Vec::with_capacity(s.horizon);
    let mut chol = Vec::with_capacity(s.horizon);
    for h in 0..s.horizon {
        let d = tests.tests(h).len();
        let mut m = DMatrix::<f64>::identity(d, d) * ridge;
        let split = distilled.splits.get(h).map(Vec::as_slice).unwrap_or(&[]);
        for &i in split {
            let rank = data.trajectories[i].rank(&s);
            let r = if h == 0 { 0 } else { rank / radix.pow((s.horizon - h) as u32) };
            match &feats[h][r] {
                Some(f) => {
                    for a in 0..d {
                        for b in 0..d {
                            m[(a, b)] += f[a] * f[b];
                        }
                    }
                }
                None => warn!("skipping trajectory {i}: unreachable at step {h} under the fitted model"),
            }
        }
        chol.push(Cholesky::new(m.clone()).ok_or_else(|| Error::InvalidArgument("bonus matrix not positive definite".into()))?);
        u.push(m);
    }
    Ok(BonusFn { ridge, alpha, u, chol, feats, shape: s })
}

/// `iota = min_{h, tau_h, q} rho(q^a | tau_h, q^o)` over the core tests.
pub fn iota(rho: &Policy, tests: &CoreTests) -> Result<f64> {
    let s = *rho.shape();
    tests.check(&s)?;
    let mut best: f64 = 1.0;
    for h in 0..s.horizon {
        let rows = if h == 0 { 1 } else { s.history_count(h) };
        for r in 0..rows {
            let (ho, ha) = if h == 0 { (vec![], vec![]) } else { s.decode_history(r, h) };
            for t in tests.tests(h) {
                let mut o = ho.clone();
                let mut a = ha.clone();
                let mut p = 1.0;
                for k in 0..t.len() {
                    o.push(t.0[k]);
                    let step = h + k + 1;
                    p *= rho.prob(step, s.prefix_rank(&o, &a, step), t.1[k]);
                    a.push(t.1[k]);
                }
                best = best.min(p);
            }
        }
    }
    Ok(best)
}

/// User overrides and constants for the learners. Unset values take the
/// defaults below with leading constant one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerParams {
    pub delta: f64,
    /// Default `delta / (N (|O||A|)^{2H})`.
    pub p_min: Option<f64>,
    /// Default `H^2 Q_A^2`.
    pub ridge: Option<f64>,
    /// Default `Q_A sqrt(dH) / gamma^2 sqrt(ridge) + sqrt(beta) / (iota gamma)`.
    pub alpha: Option<f64>,
    /// Default `log(|class| / delta)`.
    pub beta: Option<f64>,
    /// Default: exact `C_B` of the fitted model (`T`-type sets only).
    pub c_b: Option<f64>,
    /// Replaces `C_u^i` outright.
    pub scaling: Option<f64>,
    pub split_seed: u64,
    pub robust: RobustOptions,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            delta: 0.1,
            p_min: None,
            ridge: None,
            alpha: None,
            beta: None,
            c_b: None,
            scaling: None,
            split_seed: 0,
            robust: RobustOptions::default(),
        }
    }
}

pub fn default_p_min(delta: f64, n: usize, shape: &Shape) -> f64 {
    delta / (n as f64 * ((shape.num_obs * shape.num_actions) as f64).powi(2 * shape.horizon as i32))
}

pub fn default_beta(class_size: usize, delta: f64) -> f64 {
    (class_size as f64 / delta).ln()
}

/// Values actually used by a learner run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub p_min: f64,
    pub ridge: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iota: Option<f64>,
    pub gamma: Option<f64>,
}

fn resolve(
    params: &LearnerParams,
    data: &OfflineDataset,
    cls: &ModelClass,
    theta_hat: &TabularModel,
    tests: &CoreTests,
) -> Result<ResolvedParams> {
    if !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)".into()));
    }
    let s = cls.shape();
    let q_a = tests.max_core_actions() as f64;
    let beta = params.beta.unwrap_or_else(|| default_beta(cls.len(), params.delta));
    let ridge = params.ridge.unwrap_or((s.horizon as f64 * q_a).powi(2));
    let p_min = params.p_min.unwrap_or_else(|| default_p_min(params.delta, data.len(), s));
    let (alpha, iota_v, gamma) = match params.alpha {
        Some(a) => (a, None, None),
        None => {
            let io = iota(&data.behavior, tests)?;
            if io <= 0.0 {
                return Err(Error::InvalidArgument("behavior policy gives iota = 0; set alpha explicitly".into()));
            }
            let g = 1.0 / gamma_condition(theta_hat, tests)?;
            let d = tests.dim() as f64;
            let a = q_a * (d * s.horizon as f64).sqrt() / (g * g) * ridge.sqrt() + beta.sqrt() / (io * g);
            (a, Some(io), Some(g))
        }
    };
    Ok(ResolvedParams { p_min, ridge, alpha, beta, iota: iota_v, gamma })
}

/// Objective terms for one candidate policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub robust: f64,
    pub bonus: f64,
    pub scaling: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm1Report {
    pub selected: usize,
    pub theta_hat: usize,
    pub retained: usize,
    pub distilled_empty: bool,
    pub params: ResolvedParams,
    pub scores: Vec<PolicyScore>,
}

/// `C_u^i` for one policy under the fitted model.
pub fn scaling_for(
    spec: &UncertaintySpec,
    theta_hat: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    c_b: f64,
) -> Result<f64> {
    if spec.xi == 0.0 {
        return Ok(1.0);
    }
    let (eta, lambda) = match spec.div {
        Divergence::Tv => (1.0, 1.0),
        Divergence::Kl => {
            let e = estimate_eta_lambda(theta_hat, policy, reward, spec.xi)?;
            (e.eta, e.lambda)
        }
    };
    scaling_constant(spec, &ScalingInputs::new(eta, lambda, c_b, spec.xi)?)
}

fn penalized(robust: f64, scaling: f64, bonus: f64) -> f64 {
    if bonus == 0.0 {
        robust
    } else {
        robust - scaling * bonus
    }
}

/// Lower-confidence-bound learner: MLE, distillation, bonus, then
/// `argmax_pi V_{B(theta_hat)}^pi - C V_{theta_hat, b_hat}^pi` over `policies`.
pub fn algorithm1(
    data: &OfflineDataset,
    cls: &ModelClass,
    policies: &[Policy],
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    params: &LearnerParams,
) -> Result<Algorithm1Report> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("empty policy list".into()));
    }
    let k = mle_fit(data, cls)?;
    let theta_hat = &cls.models[k];
    let tests = cls.core_tests();
    let rp = resolve(params, data, cls, theta_hat, &tests)?;
    let distilled = distill(data, theta_hat, rp.p_min, params.split_seed)?;
    let bonus = build_bonus(theta_hat, &tests, data, &distilled, rp.ridge, rp.alpha)?;
    let table = bonus.table();
    let c_b = match (params.c_b, spec.set) {
        (Some(c), _) => c,
        (None, SetKind::T) if params.scaling.is_none() => wellness_cb_exact(theta_hat, spec)?,
        _ => 1.0,
    };
    let scores: Vec<PolicyScore> = policies
        .par_iter()
        .map(|pi| {
            let robust = robust_value_with(theta_hat, pi, reward, spec, &params.robust)?;
            let b = expectation(theta_hat, pi, &table)?;
            let scaling = match params.scaling {
                Some(c) => c,
                None if b == 0.0 => 1.0,
                None => scaling_for(spec, theta_hat, pi, reward, c_b)?,
            };
            Ok(PolicyScore { robust, bonus: b, scaling, objective: penalized(robust, scaling, b) })
        })
        .collect::<Result<_>>()?;
    let obj: Vec<f64> = scores.iter().map(|s| s.objective).collect();
    Ok(Algorithm1Report {
        selected: first_argmax(&obj),
        theta_hat: k,
        retained: distilled.retained.len(),
        distilled_empty: distilled.empty,
        params: rp,
        scores,
    })
}

/// `{theta : loglik(theta) >= max loglik - beta}`.
pub fn confidence_set(data: &OfflineDataset, cls: &ModelClass, beta: f64) -> Result<Vec<usize>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument("beta must be nonnegative".into()));
    }
    let ll = log_likelihoods(data, cls)?;
    let best = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::ClassIncompatible);
    }
    Ok((0..ll.len()).filter(|&i| ll[i] >= best - beta).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm2Report {
    pub selected: usize,
    pub theta_hat: usize,
    pub beta: f64,
    pub confidence_set: Vec<usize>,
    /// `min_{theta in C} V_{B(theta)}^pi` per policy.
    pub scores: Vec<f64>,
}

/// Double-pessimism learner: `argmax_pi min_{theta in C} V_{B(theta)}^pi`.
pub fn algorithm2(
    data: &OfflineDataset,
    cls: &ModelClass,
    policies: &[Policy],
    reward: &RewardSpec,
    spec: &UncertaintySpec,
    params: &LearnerParams,
) -> Result<Algorithm2Report> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("empty policy list".into()));
    }
    if !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)".into()));
    }
    let beta = params.beta.unwrap_or_else(|| default_beta(cls.len(), params.delta));
    let theta_hat = mle_fit(data, cls)?;
    let conf = confidence_set(data, cls, beta)?;
    let pairs: Vec<(usize, usize)> = (0..policies.len()).flat_map(|p| conf.iter().map(move |&m| (p, m))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(p, m)| robust_value_with(&cls.models[m], &policies[p], reward, spec, &params.robust))
        .collect::<Result<_>>()?;
    let mut scores = vec![f64::INFINITY; policies.len()];
    for (&(p, _), v) in pairs.iter().zip(&values) {
        scores[p] = scores[p].min(*v);
    }
    Ok(Algorithm2Report { selected: first_argmax(&scores), theta_hat, beta, confidence_set: conf, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance, random_policy, ring2};
    use crate::process::value;

    fn ring_setup() -> (crate::instances::Instance, Vec<Policy>) {
        let inst = ring2();
        let s = *inst.model.shape();
        (inst, vec![Policy::constant(s, 0).unwrap(), Policy::constant(s, 1).unwrap()])
    }

    #[test]
    fn singleton_class_fits_index_zero() {
        let (inst, _) = ring_setup();
        let cls = ModelClass::new(vec![inst.model.clone()], Some(0)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(*inst.model.shape()), 50, 1).unwrap();
        assert_eq!(mle_fit(&data, &cls).unwrap(), 0);
    }

    #[test]
    fn incompatible_class_is_reported() {
        let (inst, _) = ring_setup();
        let s = *inst.model.shape();
        let stuck = TabularModel::from_fn(s, 0, |_, o, _| {
            let mut r = vec![0.0; 2];
            r[o[0]] = 1.0;
            r
        })
        .unwrap();
        let cls = ModelClass::new(vec![stuck], None).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 200, 2).unwrap();
        assert_eq!(mle_fit(&data, &cls).unwrap_err().kind(), "class-incompatible");
    }

    #[test]
    fn argmin_ignores_a_shared_constant() {
        let (inst, _) = ring_setup();
        let s = *inst.model.shape();
        let other = crate::instances::ring(&[0.5, 0.5]).unwrap().model;
        let cls = ModelClass::new(vec![other, inst.model.clone()], Some(1)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 300, 3).unwrap();
        let ll = log_likelihoods(&data, &cls).unwrap();
        let shifted: Vec<f64> = ll.iter().map(|x| x + 17.5).collect();
        assert_eq!(first_argmax(&ll), first_argmax(&shifted));
    }

    #[test]
    fn distill_thresholds() {
        let (inst, _) = ring_setup();
        let s = *inst.model.shape();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 101, 4).unwrap();
        let all = distill(&data, &inst.model, 0.0, 9).unwrap();
        assert_eq!(all.retained.len(), 101);
        let sizes: Vec<usize> = all.splits.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let none = distill(&data, &inst.model, 1.1, 9).unwrap();
        assert!(none.empty && none.retained.is_empty());
        let mid = distill(&data, &inst.model, 0.1, 9).unwrap();
        for i in 0..data.len() {
            assert_eq!(mid.retained.contains(&i), mid.probs[i] >= 0.1);
        }
    }

    #[test]
    fn bonus_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let inst = random_instance(&mut rng, 3, 2, 2);
        let s = *inst.model.shape();
        let rho = random_policy(&mut rng, s);
        let tests = CoreTests::default_for(&s);
        let data = OfflineDataset::sample(&inst.model, &rho, 200, 5).unwrap();
        let d = distill(&data, &inst.model, 0.0, 1).unwrap();
        let zero = build_bonus(&inst.model, &tests, &data, &d, 1.0, 0.0).unwrap();
        assert!(zero.table().iter().all(|b| *b == 0.0));
        let b = build_bonus(&inst.model, &tests, &data, &d, 0.5, 0.3).unwrap();
        for h in 0..3 {
            let rows = if h == 0 { 1 } else { s.history_count(h) };
            for r in 0..rows {
                if let (Some(q), Some(f)) = (b.quad_form(h, r), b.feats[h][r].as_ref()) {
                    let v = DVector::from_column_slice(f);
                    let x = b.u[h].clone().lu().solve(&v).unwrap();
                    assert!((q - v.dot(&x)).abs() < 1e-10);
                }
            }
        }
        assert!(b.table().iter().all(|x| (0.0..=1.0).contains(x)));
        // ridge only
        let empty = distill(&data, &inst.model, 2.0, 1).unwrap();
        let r = build_bonus(&inst.model, &tests, &data, &empty, 2.0, 0.1).unwrap();
        let t = &data.trajectories[0];
        let rank = t.rank(&s);
        let mut total = 0.0;
        for h in 0..3 {
            let hr = if h == 0 { 0 } else { rank / s.pair_radix().pow(3 - h as u32) };
            total += r.feats[h][hr].as_ref().unwrap().iter().map(|x| x * x).sum::<f64>() / 2.0;
        }
        assert!((r.eval(t).unwrap() - (0.1 * total.sqrt()).min(1.0)).abs() < 1e-12);
    }

    #[test]
    fn exact_planning_special_cases() {
        let (inst, pols) = ring_setup();
        let s = *inst.model.shape();
        let cls = ModelClass::new(vec![inst.model.clone()], Some(0)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 100, 6).unwrap();
        let params = LearnerParams { alpha: Some(0.0), ..Default::default() };
        let spec = UncertaintySpec::p_tv(0.0);
        let a1 = algorithm1(&data, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        assert_eq!(a1.selected, 1);
        let a2 = algorithm2(&data, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        assert_eq!(a2.selected, 1);
        assert!((a2.scores[1] - value(&inst.model, &pols[1], &inst.reward).unwrap()).abs() < 1e-12);
        let one = algorithm1(&data, &cls, &pols[..1], &inst.reward, &spec, &LearnerParams::default()).unwrap();
        assert_eq!(one.selected, 0);
    }

    #[test]
    fn confidence_set_extremes() {
        let (inst, _) = ring_setup();
        let s = *inst.model.shape();
        let other = crate::instances::ring(&[0.5, 0.5]).unwrap().model;
        let cls = ModelClass::new(vec![other, inst.model.clone()], Some(1)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 300, 7).unwrap();
        let mle = mle_fit(&data, &cls).unwrap();
        assert_eq!(confidence_set(&data, &cls, 0.0).unwrap(), vec![mle]);
        assert_eq!(confidence_set(&data, &cls, f64::INFINITY).unwrap(), vec![0, 1]);
    }

    #[test]
    fn reordering_the_dataset_changes_nothing() {
        let (inst, pols) = ring_setup();
        let s = *inst.model.shape();
        let other = crate::instances::ring(&[0.6, 0.9]).unwrap().model;
        let cls = ModelClass::new(vec![inst.model.clone(), other], Some(0)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 200, 8).unwrap();
        let mut rev = data.clone();
        rev.trajectories.reverse();
        let spec = UncertaintySpec::t_tv(0.1);
        let params = LearnerParams { alpha: Some(0.2), split_seed: 3, ..Default::default() };
        let a = algorithm1(&data, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        let b = algorithm1(&rev, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        assert_eq!(a.selected, b.selected);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x.objective - y.objective).abs() < 1e-12);
        }
        let c = algorithm2(&data, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        let d = algorithm2(&rev, &cls, &pols, &inst.reward, &spec, &params).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn theorem_defaults_are_finite() {
        let (inst, pols) = ring_setup();
        let s = *inst.model.shape();
        let cls = ModelClass::new(vec![inst.model.clone()], Some(0)).unwrap();
        let data = OfflineDataset::sample(&inst.model, &Policy::uniform(s), 100, 9).unwrap();
        let r = algorithm1(&data, &cls, &pols, &inst.reward, &UncertaintySpec::t_kl(0.1), &LearnerParams::default()).unwrap();
        assert!(r.params.alpha.is_finite() && r.params.alpha > 0.0);
        assert!(r.params.iota.unwrap() > 0.0 && r.params.gamma.unwrap() > 0.0);
        assert!((r.params.p_min - 0.1 / (100.0 * 4f64.powi(4))).abs() < 1e-18);
        assert!(iota(&Policy::constant(s, 1).unwrap(), &CoreTests::default_for(&s)).unwrap() == 0.0);
    }
}
