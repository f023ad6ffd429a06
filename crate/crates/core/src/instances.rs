//! Built-in instances and random generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Policy, RewardSpec, Shape, TabularModel};

/// A model together with the reward it is evaluated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub model: TabularModel,
    pub reward: RewardSpec,
}

/// Two-observation ring of horizon 2: from `o` the process advances to
/// `(o + 1) mod 2` with probability 0.7 under action 0 and 0.8 under
/// action 1, otherwise it stays. The reward is `1{o_2 = 1}`.
pub fn ring2() -> Instance {
    ring(&[0.7, 0.8]).expect("ring2 parameters are valid")
}

/// Horizon-2 ring over two observations with per-action advance probabilities.
pub fn ring(advance: &[f64]) -> Result<Instance> {
    if advance.is_empty() || advance.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("advance probabilities must lie in [0, 1]".into()));
    }
    let shape = Shape::new(2, 2, advance.len())?;
    let model = TabularModel::from_fn(shape, 0, |_, o, a| {
        let p = advance[a[0]];
        let mut row = vec![0.0; 2];
        row[(o[0] + 1) % 2] = p;
        row[o[0]] += 1.0 - p;
        row
    })?;
    let reward = RewardSpec::from_fn(shape, |o, _| if o[1] == 1 { 1.0 } else { 0.0 })?;
    Ok(Instance { model, reward })
}

/// Horizon-2 ring where each action owns its own target position.
///
/// Observation 0 is the start cell. Action `k` advances to cell `k + 1` with
/// probability `advance[k]` and otherwise stays at 0, so `|O| = |A| + 1`.
/// The reward is 1 whenever the process left the start cell. Distinct
/// targets keep the per-action prediction features linearly independent.
pub fn ring_family(advance: &[f64]) -> Result<Instance> {
    if advance.is_empty() || advance.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("advance probabilities must lie in [0, 1]".into()));
    }
    let k = advance.len();
    let shape = Shape::new(2, k + 1, k)?;
    let model = TabularModel::from_fn(shape, 0, |_, _, a| {
        let mut row = vec![0.0; k + 1];
        row[a[0] + 1] = advance[a[0]];
        row[0] = 1.0 - advance[a[0]];
        row
    })?;
    let reward = RewardSpec::from_fn(shape, |o, _| if o[1] != 0 { 1.0 } else { 0.0 })?;
    Ok(Instance { model, reward })
}

/// Uniform draw from the probability simplex of dimension `n`.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    let fix = 1.0 - v.iter().sum::<f64>();
    v[0] += fix;
    v
}

pub fn random_model<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> TabularModel {
    TabularModel::from_fn(shape, 0, |_, _, _| random_distribution(rng, shape.num_obs)).expect("valid random model")
}

pub fn random_reward<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> RewardSpec {
    RewardSpec::from_fn(shape, |_, _| rng.gen::<f64>()).expect("valid random reward")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Policy {
    Policy::from_fn(shape, |_, _, _| random_distribution(rng, shape.num_actions)).expect("valid random policy")
}

pub fn random_deterministic_policy<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Policy {
    Policy::deterministic_from_fn(shape, |_, _, _| rng.gen_range(0..shape.num_actions)).expect("valid policy")
}

/// Random model and reward with first observation 0.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, horizon: usize, num_obs: usize, num_actions: usize) -> Instance {
    let shape = Shape::new(horizon, num_obs, num_actions).expect("positive dimensions");
    Instance { model: random_model(rng, shape), reward: random_reward(rng, shape) }
}

/// Mixes every transition row of `model` with a fresh random row: `(1 - w) T + w U`.
pub fn perturb<R: Rng + ?Sized>(rng: &mut R, model: &TabularModel, weight: f64) -> TabularModel {
    let shape = *model.shape();
    TabularModel::from_fn(shape, model.o1(), |h, o, a| {
        let r = shape.history_rank(o, a, h);
        let u = random_distribution(rng, shape.num_obs);
        let mut row: Vec<f64> = model.row(h, r).iter().zip(&u).map(|(t, u)| (1.0 - weight) * t + weight * u).collect();
        let fix = 1.0 - row.iter().sum::<f64>();
        row[0] += fix;
        if row[0] < 0.0 {
            row[0] = 0.0;
        }
        row
    })
    .expect("mixture rows are distributions")
}

/// Every deterministic history-dependent policy for a small shape.
pub fn all_deterministic_policies(shape: Shape, cap: usize) -> Result<Vec<Policy>> {
    let slots: usize = (1..=shape.horizon).map(|h| shape.prefix_count(h)).sum();
    let count = (shape.num_actions as f64).powi(slots as i32);
    if count > cap as f64 {
        return Err(Error::TooLarge { count: count as u128, cap: cap as u128 });
    }
    let count = count as usize;
    let mut out = Vec::with_capacity(count);
    for code in 0..count {
        let mut c = code;
        let choices: Vec<Vec<usize>> = (1..=shape.horizon)
            .map(|h| {
                (0..shape.prefix_count(h))
                    .map(|_| {
                        let a = c % shape.num_actions;
                        c /= shape.num_actions;
                        a
                    })
                    .collect()
            })
            .collect();
        out.push(Policy::deterministic_from_fn(shape, |h, o, a| choices[h - 1][shape.prefix_rank(o, a, h)])?);
    }
    Ok(out)
}
