//! Tabular non-Markovian decision processes.
//!
//! A process of horizon `H` emits a fixed first observation `o_1`, then for
//! every step `h < H` draws `o_{h+1}` from `T_h(. | tau_h)` where
//! `tau_h = (o_{1:h}, a_{1:h})` is the full history. Histories are stored
//! densely: each `(o, a)` pair is a digit of radix `|O||A|` and a history of
//! length `h` is ranked big-endian over its `h` digits. Agent-side prefixes
//! `x_h = (o_{1:h}, a_{1:h-1})` are ranked as `rank(tau_{h-1}) * |O| + o_h`.
//!
//! Rewards are terminal, `R(tau_H)`. Per-step rewards can be folded into the
//! terminal table because `tau_H` determines every prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of trajectories any exact enumeration touches.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

const SUM_TOL: f64 = 1e-12;

/// Horizon and alphabet sizes shared by models, policies and rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub horizon: usize,
    pub num_obs: usize,
    pub num_actions: usize,
}

impl Shape {
    pub fn new(horizon: usize, num_obs: usize, num_actions: usize) -> Result<Self> {
        if horizon == 0 || num_obs == 0 || num_actions == 0 {
            return Err(Error::Shape(format!(
                "horizon, num_obs and num_actions must be positive (got {horizon}, {num_obs}, {num_actions})"
            )));
        }
        Ok(Shape { horizon, num_obs, num_actions })
    }

    /// Radix of one `(o, a)` digit.
    pub fn pair_radix(&self) -> usize {
        self.num_obs * self.num_actions
    }

    /// Number of histories `tau_h` (all first observations included).
    pub fn history_count(&self, h: usize) -> usize {
        self.pair_radix().pow(h as u32)
    }

    /// Number of agent prefixes `x_h`, `h >= 1`.
    pub fn prefix_count(&self, h: usize) -> usize {
        self.history_count(h - 1) * self.num_obs
    }

    /// Number of full trajectories starting from a fixed first observation.
    pub fn trajectory_count(&self) -> u128 {
        (self.num_obs as u128).pow(self.horizon as u32 - 1) * (self.num_actions as u128).pow(self.horizon as u32)
    }

    pub fn check_enumerable(&self, cap: u128) -> Result<()> {
        // dense tables are indexed over every first observation
        let dense = (self.pair_radix() as u128).pow(self.horizon as u32);
        let count = self.trajectory_count().max(dense);
        if count > cap {
            return Err(Error::TooLarge { count, cap });
        }
        Ok(())
    }

    /// Rank of `tau_h = (o[..h], a[..h])`.
    pub fn history_rank(&self, o: &[usize], a: &[usize], h: usize) -> usize {
        let mut r = 0;
        for k in 0..h {
            r = r * self.pair_radix() + o[k] * self.num_actions + a[k];
        }
        r
    }

    /// Rank of `x_h = (o[..h], a[..h-1])`, `h >= 1`.
    pub fn prefix_rank(&self, o: &[usize], a: &[usize], h: usize) -> usize {
        self.history_rank(o, a, h - 1) * self.num_obs + o[h - 1]
    }

    /// Inverse of [`Shape::history_rank`].
    pub fn decode_history(&self, mut rank: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
        let mut o = vec![0; h];
        let mut a = vec![0; h];
        for k in (0..h).rev() {
            let digit = rank % self.pair_radix();
            rank /= self.pair_radix();
            o[k] = digit / self.num_actions;
            a[k] = digit % self.num_actions;
        }
        (o, a)
    }

    /// Inverse of [`Shape::prefix_rank`]; the returned action vector has `h - 1` entries.
    pub fn decode_prefix(&self, rank: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut o, a) = self.decode_history(rank / self.num_obs, h - 1);
        o.push(rank % self.num_obs);
        (o, a)
    }

    fn check_same(&self, other: &Shape, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Shape(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// A trajectory `(o_{1:H}, a_{1:H})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trajectory {
    pub o: Vec<usize>,
    pub a: Vec<usize>,
}

impl Trajectory {
    pub fn new(o: Vec<usize>, a: Vec<usize>) -> Self {
        Trajectory { o, a }
    }

    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn check(&self, shape: &Shape) -> Result<()> {
        if self.o.len() != shape.horizon || self.a.len() != shape.horizon {
            return Err(Error::Shape(format!(
                "trajectory lengths ({}, {}) do not match horizon {}",
                self.o.len(),
                self.a.len(),
                shape.horizon
            )));
        }
        if self.o.iter().any(|&o| o >= shape.num_obs) || self.a.iter().any(|&a| a >= shape.num_actions) {
            return Err(Error::Shape("trajectory symbol out of range".into()));
        }
        Ok(())
    }

    pub fn rank(&self, shape: &Shape) -> usize {
        shape.history_rank(&self.o, &self.a, shape.horizon)
    }
}

pub(crate) fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::Shape(format!("{what}: expected {len} entries, got {}", p.len())));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {s}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    #[serde(rename = "H")]
    horizon: usize,
    num_obs: usize,
    num_actions: usize,
    o1: usize,
    transitions: Vec<Vec<Vec<f64>>>,
}

/// Full history-dependent dynamics `{T_h(. | tau_h)}` with a fixed first observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct TabularModel {
    shape: Shape,
    o1: usize,
    /// `transitions[h - 1][rank(tau_h)]` is `T_h(. | tau_h)`.
    transitions: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<ModelDoc> for TabularModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let shape = Shape::new(doc.horizon, doc.num_obs, doc.num_actions)?;
        TabularModel::new(shape, doc.o1, doc.transitions)
    }
}

impl From<TabularModel> for ModelDoc {
    fn from(m: TabularModel) -> Self {
        ModelDoc {
            horizon: m.shape.horizon,
            num_obs: m.shape.num_obs,
            num_actions: m.shape.num_actions,
            o1: m.o1,
            transitions: m.transitions,
        }
    }
}

impl TabularModel {
    pub fn new(shape: Shape, o1: usize, transitions: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if o1 >= shape.num_obs {
            return Err(Error::Shape(format!("o1 = {o1} out of range")));
        }
        if transitions.len() != shape.horizon - 1 {
            return Err(Error::Shape(format!(
                "expected {} transition steps, got {}",
                shape.horizon - 1,
                transitions.len()
            )));
        }
        for (i, step) in transitions.iter().enumerate() {
            let h = i + 1;
            if step.len() != shape.history_count(h) {
                return Err(Error::Shape(format!(
                    "step {h}: expected {} histories, got {}",
                    shape.history_count(h),
                    step.len()
                )));
            }
            for (r, row) in step.iter().enumerate() {
                check_distribution(row, shape.num_obs, &format!("T_{h} row {r}"))?;
            }
        }
        Ok(TabularModel { shape, o1, transitions })
    }

    /// Builds a model from a row generator called as `row(h, o_{1:h}, a_{1:h})`.
    pub fn from_fn<F>(shape: Shape, o1: usize, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], &[usize]) -> Vec<f64>,
    {
        let transitions = (1..shape.horizon)
            .map(|h| {
                (0..shape.history_count(h))
                    .map(|r| {
                        let (o, a) = shape.decode_history(r, h);
                        row(h, &o, &a)
                    })
                    .collect()
            })
            .collect();
        TabularModel::new(shape, o1, transitions)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon
    }

    pub fn num_obs(&self) -> usize {
        self.shape.num_obs
    }

    pub fn num_actions(&self) -> usize {
        self.shape.num_actions
    }

    pub fn o1(&self) -> usize {
        self.o1
    }

    /// `T_h(. | tau_h)` by history rank, `1 <= h < H`.
    pub fn row(&self, h: usize, rank: usize) -> &[f64] {
        &self.transitions[h - 1][rank]
    }

    pub fn transitions(&self) -> &[Vec<Vec<f64>>] {
        &self.transitions
    }

    /// Returns a copy with `T_h(. | tau_h)` replaced.
    pub fn with_row(&self, h: usize, rank: usize, row: Vec<f64>) -> Result<Self> {
        check_distribution(&row, self.shape.num_obs, "replacement row")?;
        let mut out = self.clone();
        out.transitions[h - 1][rank] = row;
        Ok(out)
    }

    pub fn check_compatible(&self, other: &TabularModel) -> Result<()> {
        self.shape.check_same(&other.shape, "model shapes differ")?;
        if self.o1 != other.o1 {
            return Err(Error::Shape(format!("first observations differ ({} vs {})", self.o1, other.o1)));
        }
        Ok(())
    }

    /// `P(o_{1:h} | a_{1:h-1})` for the prefix `x_h` given as sequences (`h >= 1`).
    pub fn prefix_prob(&self, o: &[usize], a: &[usize], h: usize) -> f64 {
        if o[0] != self.o1 {
            return 0.0;
        }
        let mut p = 1.0;
        for k in 1..h {
            let r = self.shape.history_rank(o, a, k);
            p *= self.transitions[k - 1][r][o[k]];
            if p == 0.0 {
                break;
            }
        }
        p
    }

    /// Dense `P(o_{1:h} | a_{1:h-1})` over all `x_h` ranks.
    pub fn prefix_probs(&self, h: usize) -> Vec<f64> {
        let s = &self.shape;
        let mut cur = vec![0.0; s.num_obs];
        cur[self.o1] = 1.0;
        for k in 1..h {
            let mut next = vec![0.0; s.prefix_count(k + 1)];
            for (x, &p) in cur.iter().enumerate() {
                for a in 0..s.num_actions {
                    let t = x * s.num_actions + a;
                    let row = &self.transitions[k - 1][t];
                    for o in 0..s.num_obs {
                        next[t * s.num_obs + o] = p * row[o];
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// Whether every transition row matches `other` within `tol`.
    pub fn approx_eq(&self, other: &TabularModel, tol: f64) -> bool {
        self.shape == other.shape
            && self.o1 == other.o1
            && self
                .transitions
                .iter()
                .flatten()
                .flatten()
                .zip(other.transitions.iter().flatten().flatten())
                .all(|(x, y)| (x - y).abs() <= tol)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    #[serde(rename = "H")]
    horizon: usize,
    num_obs: usize,
    num_actions: usize,
    #[serde(default)]
    deterministic: bool,
    probs: Vec<Vec<Vec<f64>>>,
}

/// History-dependent policy `pi_h(. | x_h)`, `h = 1..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDoc", into = "PolicyDoc")]
pub struct Policy {
    shape: Shape,
    deterministic: bool,
    /// `probs[h - 1][rank(x_h)]` is `pi_h(. | x_h)`.
    probs: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<PolicyDoc> for Policy {
    type Error = Error;

    fn try_from(doc: PolicyDoc) -> Result<Self> {
        let shape = Shape::new(doc.horizon, doc.num_obs, doc.num_actions)?;
        let p = Policy::new(shape, doc.probs)?;
        if doc.deterministic && !p.deterministic {
            return Err(Error::InvalidDistribution("policy flagged deterministic but is not".into()));
        }
        Ok(p)
    }
}

impl From<Policy> for PolicyDoc {
    fn from(p: Policy) -> Self {
        PolicyDoc {
            horizon: p.shape.horizon,
            num_obs: p.shape.num_obs,
            num_actions: p.shape.num_actions,
            deterministic: p.deterministic,
            probs: p.probs,
        }
    }
}

impl Policy {
    pub fn new(shape: Shape, probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if probs.len() != shape.horizon {
            return Err(Error::Shape(format!("expected {} policy steps, got {}", shape.horizon, probs.len())));
        }
        for (i, step) in probs.iter().enumerate() {
            let h = i + 1;
            if step.len() != shape.prefix_count(h) {
                return Err(Error::Shape(format!(
                    "policy step {h}: expected {} prefixes, got {}",
                    shape.prefix_count(h),
                    step.len()
                )));
            }
            for (r, row) in step.iter().enumerate() {
                check_distribution(row, shape.num_actions, &format!("pi_{h} row {r}"))?;
            }
        }
        let deterministic = probs.iter().flatten().all(|row| row.iter().any(|&p| p == 1.0));
        Ok(Policy { shape, deterministic, probs })
    }

    /// Builds a policy from `row(h, o_{1:h}, a_{1:h-1})`.
    pub fn from_fn<F>(shape: Shape, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], &[usize]) -> Vec<f64>,
    {
        let probs = (1..=shape.horizon)
            .map(|h| {
                (0..shape.prefix_count(h))
                    .map(|r| {
                        let (o, a) = shape.decode_prefix(r, h);
                        row(h, &o, &a)
                    })
                    .collect()
            })
            .collect();
        Policy::new(shape, probs)
    }

    /// Deterministic policy from `choose(h, o_{1:h}, a_{1:h-1})`.
    pub fn deterministic_from_fn<F>(shape: Shape, mut choose: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], &[usize]) -> usize,
    {
        Policy::from_fn(shape, |h, o, a| {
            let mut row = vec![0.0; shape.num_actions];
            row[choose(h, o, a)] = 1.0;
            row
        })
    }

    pub fn uniform(shape: Shape) -> Self {
        let u = 1.0 / shape.num_actions as f64;
        Policy::from_fn(shape, |_, _, _| vec![u; shape.num_actions]).expect("uniform policy is valid")
    }

    /// Always plays `action`.
    pub fn constant(shape: Shape, action: usize) -> Result<Self> {
        if action >= shape.num_actions {
            return Err(Error::Shape(format!("action {action} out of range")));
        }
        Policy::deterministic_from_fn(shape, |_, _, _| action)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// `pi_h(. | x_h)` by prefix rank.
    pub fn row(&self, h: usize, rank: usize) -> &[f64] {
        &self.probs[h - 1][rank]
    }

    pub fn prob(&self, h: usize, rank: usize, a: usize) -> f64 {
        self.probs[h - 1][rank][a]
    }

    /// `prod_{h=1}^{upto} pi_h(a_h | x_h)` along a trajectory.
    pub fn action_prob(&self, o: &[usize], a: &[usize], upto: usize) -> f64 {
        (1..=upto)
            .map(|h| self.probs[h - 1][self.shape.prefix_rank(o, a, h)][a[h - 1]])
            .product()
    }
}

#[derive(Serialize, Deserialize)]
struct RewardDoc {
    #[serde(rename = "H")]
    horizon: usize,
    num_obs: usize,
    num_actions: usize,
    values: Vec<f64>,
}

/// Terminal reward table `R(tau_H)` with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardDoc", into = "RewardDoc")]
pub struct RewardSpec {
    shape: Shape,
    values: Vec<f64>,
}

impl TryFrom<RewardDoc> for RewardSpec {
    type Error = Error;

    fn try_from(doc: RewardDoc) -> Result<Self> {
        RewardSpec::new(Shape::new(doc.horizon, doc.num_obs, doc.num_actions)?, doc.values)
    }
}

impl From<RewardSpec> for RewardDoc {
    fn from(r: RewardSpec) -> Self {
        RewardDoc {
            horizon: r.shape.horizon,
            num_obs: r.shape.num_obs,
            num_actions: r.shape.num_actions,
            values: r.values,
        }
    }
}

impl RewardSpec {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.history_count(shape.horizon) {
            return Err(Error::Shape(format!(
                "reward table: expected {} entries, got {}",
                shape.history_count(shape.horizon),
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("reward entries must lie in [0, 1]".into()));
        }
        Ok(RewardSpec { shape, values })
    }

    /// Builds a reward from `r(o_{1:H}, a_{1:H})`.
    pub fn from_fn<F>(shape: Shape, mut r: F) -> Result<Self>
    where
        F: FnMut(&[usize], &[usize]) -> f64,
    {
        let h = shape.horizon;
        let values = (0..shape.history_count(h))
            .map(|rank| {
                let (o, a) = shape.decode_history(rank, h);
                r(&o, &a)
            })
            .collect();
        RewardSpec::new(shape, values)
    }

    /// Folds per-step rewards `r_h(tau_h)` into one terminal table, clipped to `[0, 1]`.
    pub fn from_step_rewards<F>(shape: Shape, mut step: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], &[usize]) -> f64,
    {
        RewardSpec::from_fn(shape, |o, a| {
            (1..=shape.horizon).map(|h| step(h, &o[..h], &a[..h])).sum::<f64>().clamp(0.0, 1.0)
        })
    }

    pub fn constant(shape: Shape, c: f64) -> Result<Self> {
        RewardSpec::new(shape, vec![c; shape.history_count(shape.horizon)])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, rank: usize) -> f64 {
        self.values[rank]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn check_triple(model: &TabularModel, policy: &Policy, reward: &RewardSpec) -> Result<()> {
    model.shape.check_same(&policy.shape, "model/policy")?;
    model.shape.check_same(&reward.shape, "model/reward")
}

/// `prod_{h=1}^{H-1} T_h(o_{h+1} | tau_h)`; the last action never enters.
pub fn traj_prob_dynamics(model: &TabularModel, traj: &Trajectory) -> Result<f64> {
    traj.check(&model.shape)?;
    Ok(model.prefix_prob(&traj.o, &traj.a, model.horizon()))
}

/// Dynamics probability times `prod_{h=1}^{H} pi_h(a_h | x_h)`.
pub fn traj_prob_policy(model: &TabularModel, policy: &Policy, traj: &Trajectory) -> Result<f64> {
    model.shape.check_same(&policy.shape, "model/policy")?;
    let p = traj_prob_dynamics(model, traj)?;
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(p * policy.action_prob(&traj.o, &traj.a, model.horizon()))
}

/// Dense `D^pi(tau_h)` over every history rank at step `h` (`h >= 1`).
pub fn history_distribution(model: &TabularModel, policy: &Policy, h: usize) -> Vec<f64> {
    let s = model.shape;
    let mut x = vec![0.0; s.num_obs];
    x[model.o1] = 1.0;
    let mut tau = Vec::new();
    for k in 1..=h {
        tau = vec![0.0; s.history_count(k)];
        for (xr, &p) in x.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let pr = policy.row(k, xr);
            for a in 0..s.num_actions {
                tau[xr * s.num_actions + a] = p * pr[a];
            }
        }
        if k < h {
            x = vec![0.0; s.prefix_count(k + 1)];
            for (t, &p) in tau.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let row = model.row(k, t);
                for o in 0..s.num_obs {
                    x[t * s.num_obs + o] = p * row[o];
                }
            }
        }
    }
    tau
}

/// Dense `D^pi(tau_H)` over all trajectory ranks, subject to `cap`.
pub fn trajectory_distribution(model: &TabularModel, policy: &Policy, cap: u128) -> Result<Vec<f64>> {
    model.shape.check_same(&policy.shape, "model/policy")?;
    model.shape.check_enumerable(cap)?;
    Ok(history_distribution(model, policy, model.horizon()))
}

/// Exact `E^pi_theta[R(tau_H)]` with the default enumeration cap.
pub fn value(model: &TabularModel, policy: &Policy, reward: &RewardSpec) -> Result<f64> {
    value_capped(model, policy, reward, DEFAULT_ENUMERATION_CAP)
}

pub fn value_capped(model: &TabularModel, policy: &Policy, reward: &RewardSpec, cap: u128) -> Result<f64> {
    check_triple(model, policy, reward)?;
    let d = trajectory_distribution(model, policy, cap)?;
    Ok(d.iter().zip(&reward.values).map(|(p, r)| p * r).sum())
}

/// Value of an arbitrary terminal function given as a dense table (entries unrestricted).
pub fn expectation(model: &TabularModel, policy: &Policy, table: &[f64]) -> Result<f64> {
    let d = trajectory_distribution(model, policy, DEFAULT_ENUMERATION_CAP)?;
    if table.len() != d.len() {
        return Err(Error::Shape("terminal table length".into()));
    }
    Ok(d.iter().zip(table).map(|(p, r)| p * r).sum())
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws one trajectory from `D^pi_theta` using the supplied generator.
pub fn sample_with<R: Rng + ?Sized>(model: &TabularModel, policy: &Policy, rng: &mut R) -> Trajectory {
    let s = model.shape;
    let mut o = Vec::with_capacity(s.horizon);
    let mut a = Vec::with_capacity(s.horizon);
    o.push(model.o1);
    for h in 1..=s.horizon {
        let xr = s.prefix_rank(&o, &a, h);
        a.push(categorical(rng, policy.row(h, xr)));
        if h < s.horizon {
            let t = xr * s.num_actions + a[h - 1];
            o.push(categorical(rng, model.row(h, t)));
        }
    }
    Trajectory { o, a }
}

/// Draws one trajectory; deterministic in `seed`.
pub fn sample_trajectory(model: &TabularModel, policy: &Policy, seed: u64) -> Result<Trajectory> {
    model.shape.check_same(&policy.shape, "model/policy")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with(model, policy, &mut rng))
}

/// `|| D^pi_a - D^pi_b ||_1` over full trajectories.
pub fn l1_model_distance(model_a: &TabularModel, model_b: &TabularModel, policy: &Policy) -> Result<f64> {
    model_a.check_compatible(model_b)?;
    let p = trajectory_distribution(model_a, policy, DEFAULT_ENUMERATION_CAP)?;
    let q = trajectory_distribution(model_b, policy, DEFAULT_ENUMERATION_CAP)?;
    Ok(p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum())
}

/// Squared Hellinger distance `1/2 sum (sqrt p - sqrt q)^2` between trajectory laws.
pub fn hellinger_sq(model_a: &TabularModel, model_b: &TabularModel, policy: &Policy) -> Result<f64> {
    model_a.check_compatible(model_b)?;
    let p = trajectory_distribution(model_a, policy, DEFAULT_ENUMERATION_CAP)?;
    let q = trajectory_distribution(model_b, policy, DEFAULT_ENUMERATION_CAP)?;
    Ok(hellinger_sq_dense(&p, &q))
}

pub(crate) fn hellinger_sq_dense(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::ring2;

    #[test]
    fn ranks_round_trip() {
        let s = Shape::new(3, 3, 2).unwrap();
        for h in 0..=3 {
            for r in 0..s.history_count(h) {
                let (o, a) = s.decode_history(r, h);
                assert_eq!(s.history_rank(&o, &a, h), r);
            }
        }
        for h in 1..=3 {
            for r in 0..s.prefix_count(h) {
                let (o, a) = s.decode_prefix(r, h);
                assert_eq!(s.prefix_rank(&o, &a, h), r);
            }
        }
    }

    #[test]
    fn horizon_one_has_empty_product() {
        let s = Shape::new(1, 2, 2).unwrap();
        let m = TabularModel::new(s, 0, vec![]).unwrap();
        let t = Trajectory::new(vec![0], vec![1]);
        assert_eq!(traj_prob_dynamics(&m, &t).unwrap(), 1.0);
        let pi = Policy::uniform(s);
        assert_eq!(traj_prob_policy(&m, &pi, &t).unwrap(), 0.5);
    }

    #[test]
    fn ring2_lookups() {
        let inst = ring2();
        let t = Trajectory::new(vec![0, 1], vec![1, 0]);
        assert!((traj_prob_dynamics(&inst.model, &t).unwrap() - 0.8).abs() < 1e-15);
        let t1 = Trajectory::new(vec![0, 1], vec![1, 1]);
        assert_eq!(
            traj_prob_dynamics(&inst.model, &t).unwrap(),
            traj_prob_dynamics(&inst.model, &t1).unwrap()
        );
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        assert!((traj_prob_policy(&inst.model, &pi, &t1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(traj_prob_policy(&inst.model, &pi, &t).unwrap(), 0.0);
        assert!((value(&inst.model, &pi, &inst.reward).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_rewards_give_constant_values() {
        let inst = ring2();
        let s = *inst.model.shape();
        let pi = Policy::uniform(s);
        assert!((value(&inst.model, &pi, &RewardSpec::constant(s, 1.0).unwrap()).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(value(&inst.model, &pi, &RewardSpec::constant(s, 0.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let inst = ring2();
        let bad = Trajectory::new(vec![0, 1, 0], vec![0, 0, 0]);
        assert_eq!(traj_prob_dynamics(&inst.model, &bad).unwrap_err().kind(), "shape");
        let other = Shape::new(3, 2, 2).unwrap();
        let pi = Policy::uniform(other);
        assert_eq!(value(&inst.model, &pi, &inst.reward).unwrap_err().kind(), "shape");
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let inst = ring2();
        let pi = Policy::uniform(*inst.model.shape());
        let err = value_capped(&inst.model, &pi, &inst.reward, 3).unwrap_err();
        assert_eq!(err.kind(), "too-large");
    }

    #[test]
    fn deterministic_sampling_is_unique() {
        let s = Shape::new(3, 2, 2).unwrap();
        let m = TabularModel::from_fn(s, 0, |_, o, _| {
            let mut r = vec![0.0; 2];
            r[1 - o[o.len() - 1]] = 1.0;
            r
        })
        .unwrap();
        let pi = Policy::constant(s, 1).unwrap();
        for seed in 0..5 {
            let t = sample_trajectory(&m, &pi, seed).unwrap();
            assert_eq!(t, Trajectory::new(vec![0, 1, 0], vec![1, 1, 1]));
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let inst = ring2();
        let pi = Policy::uniform(*inst.model.shape());
        assert_eq!(
            sample_trajectory(&inst.model, &pi, 42).unwrap(),
            sample_trajectory(&inst.model, &pi, 42).unwrap()
        );
    }

    #[test]
    fn distances_on_extremes() {
        let s = Shape::new(2, 2, 1).unwrap();
        let a = TabularModel::from_fn(s, 0, |_, _, _| vec![1.0, 0.0]).unwrap();
        let b = TabularModel::from_fn(s, 0, |_, _, _| vec![0.0, 1.0]).unwrap();
        let pi = Policy::uniform(s);
        assert_eq!(l1_model_distance(&a, &a, &pi).unwrap(), 0.0);
        assert_eq!(hellinger_sq(&a, &a, &pi).unwrap(), 0.0);
        assert!((l1_model_distance(&a, &b, &pi).unwrap() - 2.0).abs() < 1e-15);
        assert!((hellinger_sq(&a, &b, &pi).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ring2_perturbed_l1() {
        let inst = ring2();
        let shifted = inst.model.with_row(1, 1, vec![0.3, 0.7]).unwrap();
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        assert!((l1_model_distance(&inst.model, &shifted, &pi).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_rewards_fold_into_terminal() {
        let s = Shape::new(2, 2, 2).unwrap();
        let r = RewardSpec::from_step_rewards(s, |h, o, _| if h == 2 && o[1] == 1 { 0.5 } else { 0.25 }).unwrap();
        let rank = s.history_rank(&[0, 1], &[0, 0], 2);
        assert!((r.at(rank) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let inst = crate::instances::random_instance(&mut ChaCha8Rng::seed_from_u64(3), 3, 2, 2);
        let text = serde_json::to_string(&inst.model).unwrap();
        let back: TabularModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, inst.model);
        let text = serde_json::to_string(&inst.reward).unwrap();
        let back: RewardSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, inst.reward);
        let pi = Policy::uniform(*inst.model.shape());
        let back: Policy = serde_json::from_str(&serde_json::to_string(&pi).unwrap()).unwrap();
        assert_eq!(back, pi);
    }

    #[test]
    fn invalid_rows_rejected() {
        let s = Shape::new(2, 2, 1).unwrap();
        let err = TabularModel::from_fn(s, 0, |_, _, _| vec![0.5, 0.6]).unwrap_err();
        assert_eq!(err.kind(), "invalid-distribution");
    }
}
