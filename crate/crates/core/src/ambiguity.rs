//! Uncertainty sets around a nominal model.
//!
//! `T`-type sets bound the divergence of every transition row
//! `T_h(. | tau_h)` from the nominal row. `P`-type sets bound the divergence
//! of the joint observation law `P(o_{2:H} | a_{1:H-1})` for every action
//! sequence, the joint still being subject to the usual consistency across
//! later actions. Total variation is the half-`l1` distance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Shape, TabularModel};

/// Default cap on the number of grid models an enumeration may visit.
pub const DEFAULT_BALL_CAP: u128 = 10_000_000;

const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetKind {
    #[serde(rename = "T")]
    T,
    #[serde(rename = "P")]
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    #[serde(rename = "tv")]
    Tv,
    #[serde(rename = "kl")]
    Kl,
}

impl FromStr for SetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" => Ok(SetKind::T),
            "p" => Ok(SetKind::P),
            _ => Err(Error::InvalidArgument(format!("unknown set kind {s:?}"))),
        }
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tv" => Ok(Divergence::Tv),
            "kl" => Ok(Divergence::Kl),
            _ => Err(Error::InvalidArgument(format!("unknown divergence {s:?}"))),
        }
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetKind::T => "T",
            SetKind::P => "P",
        })
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Divergence::Tv => "tv",
            Divergence::Kl => "kl",
        })
    }
}

/// Set kind, divergence and radius. Serializes as `{"set":"T","div":"tv","xi":0.1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc")]
pub struct UncertaintySpec {
    pub set: SetKind,
    pub div: Divergence,
    pub xi: f64,
}

#[derive(Deserialize)]
struct SpecDoc {
    set: SetKind,
    div: Divergence,
    xi: f64,
}

impl TryFrom<SpecDoc> for UncertaintySpec {
    type Error = Error;

    fn try_from(d: SpecDoc) -> Result<Self> {
        UncertaintySpec::new(d.set, d.div, d.xi)
    }
}

impl UncertaintySpec {
    pub fn new(set: SetKind, div: Divergence, xi: f64) -> Result<Self> {
        if !xi.is_finite() || xi < 0.0 {
            return Err(Error::InvalidArgument(format!("radius must be finite and >= 0, got {xi}")));
        }
        Ok(UncertaintySpec { set, div, xi })
    }

    pub fn t_tv(xi: f64) -> Self {
        UncertaintySpec::new(SetKind::T, Divergence::Tv, xi).expect("valid radius")
    }

    pub fn t_kl(xi: f64) -> Self {
        UncertaintySpec::new(SetKind::T, Divergence::Kl, xi).expect("valid radius")
    }

    pub fn p_tv(xi: f64) -> Self {
        UncertaintySpec::new(SetKind::P, Divergence::Tv, xi).expect("valid radius")
    }

    pub fn p_kl(xi: f64) -> Self {
        UncertaintySpec::new(SetKind::P, Divergence::Kl, xi).expect("valid radius")
    }

    pub fn with_xi(&self, xi: f64) -> Self {
        UncertaintySpec { xi, ..*self }
    }
}

/// `D_f(p, q)`: half-`l1` for TV, `sum p log(p / q)` for KL (`+inf` off the support of `q`).
pub fn f_divergence(p: &[f64], q: &[f64], div: Divergence) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distribution lengths {} vs {}", p.len(), q.len())));
    }
    Ok(match div {
        Divergence::Tv => 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        Divergence::Kl => kl(p, q),
    })
}

pub(crate) fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s.max(0.0)
}

/// Joint law `P(o_{2:H} | a_{1:H-1})` for every action sequence, keyed by the
/// action-sequence index (big-endian over `a_1..a_{H-1}`), each a dense vector
/// over `o_{2:H}` (big-endian).
pub fn joint_laws(model: &TabularModel) -> Vec<Vec<f64>> {
    let s = model.shape();
    let h = s.horizon;
    let seqs = s.num_actions.pow(h as u32 - 1);
    let outs = s.num_obs.pow(h as u32 - 1);
    let px = model.prefix_probs(h);
    let mut laws = vec![vec![0.0; outs]; seqs];
    for (rank, &p) in px.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let (o, a) = s.decode_prefix(rank, h);
        if o[0] != model.o1() {
            continue;
        }
        let seq = a.iter().fold(0, |acc, &x| acc * s.num_actions + x);
        let obs = o[1..].iter().fold(0, |acc, &x| acc * s.num_obs + x);
        laws[seq][obs] = p;
    }
    laws
}

/// Marginals of the joint law over `o_{2:h+1}` must not depend on `a_{h+1:H-1}`.
pub fn is_consistent(model: &TabularModel, tol: f64) -> bool {
    let s = model.shape();
    let hz = s.horizon;
    if hz <= 2 {
        return true;
    }
    let laws = joint_laws(model);
    for keep in 1..hz - 1 {
        // keep = number of leading actions that may influence the first `keep` observations
        let tail_actions = s.num_actions.pow((hz - 1 - keep) as u32);
        let tail_obs = s.num_obs.pow((hz - 1 - keep) as u32);
        for (seq, law) in laws.iter().enumerate() {
            let head = seq / tail_actions;
            let reference = &laws[head * tail_actions];
            for block in 0..law.len() / tail_obs {
                let m: f64 = law[block * tail_obs..(block + 1) * tail_obs].iter().sum();
                let r: f64 = reference[block * tail_obs..(block + 1) * tail_obs].iter().sum();
                if (m - r).abs() > tol {
                    return false;
                }
            }
        }
    }
    true
}

/// Whether `candidate` lies in the ball of `spec` around `center`.
pub fn membership(candidate: &TabularModel, center: &TabularModel, spec: &UncertaintySpec) -> Result<bool> {
    candidate.check_compatible(center)?;
    if spec.xi == 0.0 {
        return Ok(candidate.approx_eq(center, MEMBERSHIP_TOL));
    }
    let limit = spec.xi + MEMBERSHIP_TOL;
    match spec.set {
        SetKind::T => {
            for (sc, ss) in candidate.transitions().iter().zip(center.transitions()) {
                for (rc, rs) in sc.iter().zip(ss) {
                    if f_divergence(rc, rs, spec.div)? > limit {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        }
        SetKind::P => {
            if !is_consistent(candidate, 1e-12) {
                return Ok(false);
            }
            let lc = joint_laws(candidate);
            let ls = joint_laws(center);
            for (a, b) in lc.iter().zip(&ls) {
                if f_divergence(a, b, spec.div)? > limit {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// Points of the simplex with mass quantum `1 / resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplexGrid {
    pub resolution: usize,
    pub dim: usize,
}

impl SimplexGrid {
    pub fn new(resolution: usize, dim: usize) -> Result<Self> {
        if resolution == 0 || dim == 0 {
            return Err(Error::InvalidArgument("grid resolution and dimension must be positive".into()));
        }
        Ok(SimplexGrid { resolution, dim })
    }

    /// `C(k + n - 1, n - 1)`.
    pub fn count(&self) -> u128 {
        let (k, n) = (self.resolution as u128, self.dim as u128);
        let mut c: u128 = 1;
        for i in 1..n {
            c = c * (k + i) / i;
        }
        c
    }

    pub fn points(&self) -> SimplexPoints {
        let mut counts = vec![0; self.dim];
        counts[self.dim - 1] = self.resolution;
        SimplexPoints { k: self.resolution, counts: Some(counts) }
    }

    /// Nearest grid point by largest-remainder rounding.
    pub fn round(&self, p: &[f64]) -> Vec<f64> {
        let k = self.resolution;
        let scaled: Vec<f64> = p.iter().map(|x| x * k as f64).collect();
        let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor().max(0.0) as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&i, &j| {
            let ri = scaled[i] - scaled[i].floor();
            let rj = scaled[j] - scaled[j].floor();
            rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
        });
        let mut left = k.saturating_sub(assigned);
        for &i in order.iter().cycle().take(p.len() * (left / p.len().max(1) + 1)) {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts.iter().map(|&c| c as f64 / k as f64).collect()
    }
}

/// Iterator over simplex grid points in lexicographic order of counts.
pub struct SimplexPoints {
    k: usize,
    counts: Option<Vec<usize>>,
}

impl Iterator for SimplexPoints {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        let cur = self.counts.take()?;
        let out = cur.iter().map(|&c| c as f64 / self.k as f64).collect();
        // advance: find the rightmost non-last position that can take one unit from the tail
        let n = cur.len();
        let mut next = cur;
        let mut advanced = false;
        for i in (0..n.saturating_sub(1)).rev() {
            let tail: usize = next[i + 1..].iter().sum();
            if tail > 0 {
                next[i] += 1;
                for c in next[i + 1..].iter_mut() {
                    *c = 0;
                }
                next[n - 1] = tail - 1;
                advanced = true;
                break;
            }
        }
        if advanced {
            self.counts = Some(next);
        }
        Some(out)
    }
}

/// Transition rows reachable from the model's first observation, as `(h, rank)`.
pub(crate) fn reachable_rows(model: &TabularModel) -> Vec<(usize, usize)> {
    let s = model.shape();
    let mut rows = Vec::new();
    for h in 1..s.horizon {
        let per_first = s.history_count(h) / s.num_obs;
        let start = model.o1() * s.num_actions * (per_first / s.num_actions);
        for r in start..start + per_first {
            rows.push((h, r));
        }
    }
    rows
}

/// Lazily enumerated grid models inside an uncertainty ball.
///
/// Only rows reachable from `o_1` vary; the others keep the nominal values.
pub struct BallStream {
    base: TabularModel,
    center: TabularModel,
    spec: UncertaintySpec,
    rows: Vec<(usize, usize)>,
    candidates: Vec<Vec<Vec<f64>>>,
    cursor: Option<Vec<usize>>,
    pub center_member: bool,
}

impl BallStream {
    /// Upper bound on the number of models visited.
    pub fn size_hint_total(&self) -> u128 {
        self.candidates.iter().map(|c| c.len() as u128).product()
    }

    fn current(&self, idx: &[usize]) -> TabularModel {
        let mut t: Vec<Vec<Vec<f64>>> = self.base.transitions().to_vec();
        for (k, &(h, r)) in self.rows.iter().enumerate() {
            t[h - 1][r] = self.candidates[k][idx[k]].clone();
        }
        TabularModel::new(*self.base.shape(), self.base.o1(), t).expect("grid rows are distributions")
    }
}

impl Iterator for BallStream {
    type Item = TabularModel;

    fn next(&mut self) -> Option<TabularModel> {
        loop {
            let idx = self.cursor.take()?;
            let m = self.current(&idx);
            let mut next = idx;
            let mut k = next.len();
            let mut advanced = false;
            while k > 0 {
                k -= 1;
                next[k] += 1;
                if next[k] < self.candidates[k].len() {
                    advanced = true;
                    break;
                }
                next[k] = 0;
            }
            if advanced {
                self.cursor = Some(next);
            }
            let keep = match self.spec.set {
                SetKind::T => true,
                SetKind::P => membership(&m, &self.center, &self.spec).unwrap_or(false),
            };
            if keep {
                return Some(m);
            }
        }
    }
}

/// Grid models within the ball of `spec` around `center`.
///
/// `T`-type balls are rectangular and are streamed as the Cartesian product of
/// the per-row grid points inside each row ball. `P`-type balls enumerate the
/// full product of grid rows and filter by joint membership, so they are only
/// feasible for tiny instances. If the grid-rounded center is not itself a
/// member (an off-grid center with a tight KL ball, say) a warning is logged
/// and the stream may be empty.
pub fn enumerate_ball(center: &TabularModel, spec: &UncertaintySpec, grid: &SimplexGrid) -> Result<BallStream> {
    enumerate_ball_capped(center, spec, grid, DEFAULT_BALL_CAP)
}

pub fn enumerate_ball_capped(
    center: &TabularModel,
    spec: &UncertaintySpec,
    grid: &SimplexGrid,
    cap: u128,
) -> Result<BallStream> {
    let s: &Shape = center.shape();
    if grid.dim != s.num_obs {
        return Err(Error::Shape(format!("grid dimension {} vs |O| = {}", grid.dim, s.num_obs)));
    }
    let rows = reachable_rows(center);
    let all: Vec<Vec<f64>> = grid.points().collect();
    let candidates: Vec<Vec<Vec<f64>>> = match spec.set {
        SetKind::T => rows
            .iter()
            .map(|&(h, r)| {
                let c = center.row(h, r);
                all.iter()
                    .filter(|p| {
                        if spec.xi == 0.0 {
                            p.iter().zip(c).all(|(a, b)| (a - b).abs() <= MEMBERSHIP_TOL)
                        } else {
                            f_divergence(p, c, spec.div).map(|d| d <= spec.xi + MEMBERSHIP_TOL).unwrap_or(false)
                        }
                    })
                    .cloned()
                    .collect()
            })
            .collect(),
        SetKind::P => rows.iter().map(|_| all.clone()).collect(),
    };
    let total: u128 = candidates.iter().map(|c| c.len() as u128).product();
    if total > cap {
        return Err(Error::TooLarge { count: total, cap });
    }
    let mut rounded = center.transitions().to_vec();
    for &(h, r) in &rows {
        rounded[h - 1][r] = grid.round(center.row(h, r));
    }
    let rounded = TabularModel::new(*s, center.o1(), rounded)?;
    let center_member = membership(&rounded, center, spec)?;
    if !center_member {
        log::warn!(
            "grid-rounded center is outside the {}-{} ball of radius {} at resolution {}; enumeration may be empty",
            spec.set,
            spec.div,
            spec.xi,
            grid.resolution
        );
    }
    let cursor = if candidates.iter().any(|c| c.is_empty()) { None } else { Some(vec![0; rows.len()]) };
    Ok(BallStream {
        base: center.clone(),
        center: center.clone(),
        spec: *spec,
        rows,
        candidates,
        cursor,
        center_member,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance, ring2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn divergence_examples() {
        let p = [1.0, 0.0];
        let q = [0.5, 0.5];
        assert_eq!(f_divergence(&q, &q, Divergence::Tv).unwrap(), 0.0);
        assert_eq!(f_divergence(&q, &q, Divergence::Kl).unwrap(), 0.0);
        assert!((f_divergence(&p, &q, Divergence::Tv).unwrap() - 0.5).abs() < 1e-15);
        assert!((f_divergence(&p, &q, Divergence::Kl).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(f_divergence(&q, &p, Divergence::Kl).unwrap(), f64::INFINITY);
    }

    #[test]
    fn spec_json_shape() {
        let s: UncertaintySpec = serde_json::from_str(r#"{"set":"T","div":"kl","xi":0.25}"#).unwrap();
        assert_eq!(s, UncertaintySpec::t_kl(0.25));
        assert_eq!(serde_json::to_string(&UncertaintySpec::p_tv(0.5)).unwrap(), r#"{"set":"P","div":"tv","xi":0.5}"#);
        assert!(serde_json::from_str::<UncertaintySpec>(r#"{"set":"T","div":"kl","xi":-1}"#).is_err());
    }

    #[test]
    fn ring2_t_tv_membership() {
        let c = ring2().model;
        let cand = c.with_row(1, 1, vec![0.3, 0.7]).unwrap();
        assert!(membership(&cand, &c, &UncertaintySpec::t_tv(0.1)).unwrap());
        assert!(!membership(&cand, &c, &UncertaintySpec::t_tv(0.05)).unwrap());
        assert!(!membership(&cand, &c, &UncertaintySpec::t_tv(0.0)).unwrap());
        assert!(membership(&c, &c, &UncertaintySpec::p_kl(0.0)).unwrap());
    }

    #[test]
    fn center_is_always_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 2, 2);
            for spec in [
                UncertaintySpec::t_tv(0.1),
                UncertaintySpec::t_kl(0.1),
                UncertaintySpec::p_tv(0.1),
                UncertaintySpec::p_kl(0.1),
            ] {
                assert!(membership(&inst.model, &inst.model, &spec).unwrap());
            }
            assert!(is_consistent(&inst.model, 1e-12));
        }
    }

    #[test]
    fn grid_counts_and_rounding() {
        let g = SimplexGrid::new(10, 3).unwrap();
        let pts: Vec<_> = g.points().collect();
        assert_eq!(pts.len() as u128, g.count());
        assert_eq!(g.count(), 66);
        assert!(pts.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let r = g.round(&[0.333, 0.333, 0.334]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(SimplexGrid::new(10, 2).unwrap().round(&[0.2, 0.8]), vec![0.2, 0.8]);
    }

    #[test]
    fn tv_ball_has_three_rows_per_history() {
        let c = ring2().model;
        let g = SimplexGrid::new(10, 2).unwrap();
        let stream = enumerate_ball(&c, &UncertaintySpec::t_tv(0.1), &g).unwrap();
        // two reachable rows, three grid points each
        assert_eq!(stream.candidates.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![3, 3]);
        assert_eq!(stream.count(), 9);
    }

    #[test]
    fn zero_radius_on_grid_yields_center() {
        let c = ring2().model;
        let g = SimplexGrid::new(10, 2).unwrap();
        let models: Vec<_> = enumerate_ball(&c, &UncertaintySpec::t_tv(0.0), &g).unwrap().collect();
        assert_eq!(models.len(), 1);
        assert!(models[0].approx_eq(&c, 1e-12));
        let models: Vec<_> = enumerate_ball(&c, &UncertaintySpec::p_tv(0.0), &g).unwrap().collect();
        assert_eq!(models.len(), 1);
    }

    #[test]
    fn off_grid_kl_zero_is_empty() {
        let c = crate::instances::ring(&[0.71, 0.83]).unwrap().model;
        let g = SimplexGrid::new(10, 2).unwrap();
        let s = enumerate_ball(&c, &UncertaintySpec::t_kl(0.0), &g).unwrap();
        assert!(!s.center_member);
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn yielded_models_are_members_and_balls_nest() {
        let c = ring2().model;
        let g = SimplexGrid::new(20, 2).unwrap();
        for spec in [UncertaintySpec::t_tv(0.1), UncertaintySpec::t_kl(0.05), UncertaintySpec::p_tv(0.1), UncertaintySpec::p_kl(0.05)] {
            let small: Vec<_> = enumerate_ball(&c, &spec, &g).unwrap().collect();
            assert!(!small.is_empty());
            for m in &small {
                assert!(membership(m, &c, &spec).unwrap());
                assert!(membership(m, &c, &spec.with_xi(spec.xi * 2.0)).unwrap());
            }
            let big = enumerate_ball(&c, &spec.with_xi(spec.xi * 2.0), &g).unwrap().count();
            assert!(big >= small.len());
        }
    }

    #[test]
    fn cap_is_enforced() {
        let c = ring2().model;
        let g = SimplexGrid::new(100, 2).unwrap();
        let err = enumerate_ball_capped(&c, &UncertaintySpec::p_tv(0.1), &g, 100).err().unwrap();
        assert_eq!(err.kind(), "too-large");
    }
}
