//! Predictive-state view of a tabular model.
//!
//! A test at step `h` is a future `(o_{h+1..h+L}, a_{h+1..h+L})`; its last
//! action never influences the observations but is kept so tests carry full
//! `(o, a)` pairs. The empty test has probability one. Features are indexed by
//! history rank at step `h` for `h = 0..H-1`, with `tau_0` the empty history.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Shape, TabularModel, DEFAULT_ENUMERATION_CAP};

const RANK_TOL: f64 = 1e-9;
const RESIDUAL_TOL: f64 = 1e-8;

/// One test `(q^o, q^a)`. Serializes as a pair `[[o...], [a...]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Test(pub Vec<usize>, pub Vec<usize>);

impl Test {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Tests `Q_h` for `h = 0..H-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoreTests {
    pub per_step: Vec<Vec<Test>>,
}

fn all_futures(shape: &Shape, len: usize) -> Vec<Test> {
    // last action fixed to 0: it never affects the observation law
    let no = shape.num_obs;
    let na = shape.num_actions;
    let mut out = Vec::new();
    let count_o = no.pow(len as u32);
    let count_a = if len == 0 { 1 } else { na.pow(len as u32 - 1) };
    for co in 0..count_o {
        for ca in 0..count_a {
            let mut o = vec![0; len];
            let mut a = vec![0; len];
            let (mut x, mut y) = (co, ca);
            for k in (0..len).rev() {
                o[k] = x % no;
                x /= no;
            }
            for k in (0..len.saturating_sub(1)).rev() {
                a[k] = y % na;
                y /= na;
            }
            out.push(Test(o, a));
        }
    }
    out
}

impl CoreTests {
    pub fn new(shape: &Shape, per_step: Vec<Vec<Test>>) -> Result<Self> {
        let t = CoreTests { per_step };
        t.check(shape)?;
        Ok(t)
    }

    /// All futures of length `min(H - h, 2)` at every step.
    pub fn default_for(shape: &Shape) -> Self {
        Self::of_length(shape, 2)
    }

    /// All futures of length `min(H - h, max_len)`.
    pub fn of_length(shape: &Shape, max_len: usize) -> Self {
        let h = shape.horizon;
        CoreTests { per_step: (0..h).map(|k| all_futures(shape, (h - k).min(max_len))).collect() }
    }

    /// All full-length futures at every step.
    pub fn complete(shape: &Shape) -> Self {
        Self::of_length(shape, shape.horizon)
    }

    /// Only the empty test at every step (feature dimension 1).
    pub fn trivial(shape: &Shape) -> Self {
        CoreTests { per_step: vec![vec![Test(vec![], vec![])]; shape.horizon] }
    }

    pub fn check(&self, shape: &Shape) -> Result<()> {
        if self.per_step.len() != shape.horizon {
            return Err(Error::Shape(format!("{} test lists for horizon {}", self.per_step.len(), shape.horizon)));
        }
        for (h, tests) in self.per_step.iter().enumerate() {
            if tests.is_empty() {
                return Err(Error::Shape(format!("no tests at step {h}")));
            }
            for t in tests {
                let ok = t.0.len() == t.1.len()
                    && h + t.len() <= shape.horizon
                    && t.0.iter().all(|&o| o < shape.num_obs)
                    && t.1.iter().all(|&a| a < shape.num_actions);
                if !ok {
                    return Err(Error::Shape(format!("invalid test {t:?} at step {h}")));
                }
            }
        }
        Ok(())
    }

    pub fn tests(&self, h: usize) -> &[Test] {
        &self.per_step[h]
    }

    /// Feature dimension `d = max_h |Q_h|`.
    pub fn dim(&self) -> usize {
        self.per_step.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Distinct action parts of `Q_h`, in first-occurrence order.
    pub fn core_actions(&self, h: usize) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for t in &self.per_step[h] {
            if !out.contains(&t.1) {
                out.push(t.1.clone());
            }
        }
        out
    }

    /// `Q_A = max_h |Q_h^A|`.
    pub fn max_core_actions(&self) -> usize {
        (0..self.per_step.len()).map(|h| self.core_actions(h).len()).max().unwrap_or(0)
    }
}

/// `P(q^o | tau_h, q^a)` for a history given as `(o_{1:h}, a_{1:h})`.
pub(crate) fn future_prob(model: &TabularModel, hist_o: &[usize], hist_a: &[usize], q_o: &[usize], q_a: &[usize]) -> f64 {
    let h = hist_o.len();
    let mut o: Vec<usize> = hist_o.iter().chain(q_o).copied().collect();
    let a: Vec<usize> = hist_a.iter().chain(q_a).copied().collect();
    let s = model.shape();
    let mut p = 1.0;
    for j in h..o.len() {
        if j == 0 {
            if o[0] != model.o1() {
                return 0.0;
            }
        } else {
            p *= model.row(j, s.history_rank(&o, &a, j))[o[j]];
            if p == 0.0 {
                return 0.0;
            }
        }
    }
    o.clear();
    p
}

/// Dynamics matrix at step `h` with its numerical rank.
#[derive(Debug, Clone)]
pub struct DynamicsMatrix {
    pub step: usize,
    /// Rows: history ranks `tau_h`; columns: full-length futures in test order.
    pub matrix: DMatrix<f64>,
    pub futures: Vec<Test>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

/// Numerical rank with singular values above `1e-9 sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> (usize, Vec<f64>) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, vec![]);
    }
    let sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = if top == 0.0 { 0 } else { sv.iter().filter(|s| **s > RANK_TOL * top).count() };
    (rank, sv)
}

fn joint_block(model: &TabularModel, h: usize, tests: &[Test]) -> DMatrix<f64> {
    let s = model.shape();
    let rows = if h == 0 { 1 } else { s.history_count(h) };
    let mut m = DMatrix::zeros(rows, tests.len());
    for r in 0..rows {
        let (o, a) = if h == 0 { (vec![], vec![]) } else { s.decode_history(r, h) };
        let base = if h == 0 { 1.0 } else { model.prefix_prob(&o, &a, h) };
        if base == 0.0 {
            continue;
        }
        for (j, t) in tests.iter().enumerate() {
            m[(r, j)] = base * future_prob(model, &o, &a, &t.0, &t.1);
        }
    }
    m
}

/// `P(omega^o, tau^o | tau^a, omega^a)` over histories `tau_h` and futures `omega_h`.
pub fn dynamics_matrix(model: &TabularModel, h: usize) -> Result<DynamicsMatrix> {
    let s = model.shape();
    if h == 0 || h >= s.horizon {
        return Err(Error::InvalidArgument(format!("dynamics matrix step {h} outside 1..{}", s.horizon - 1)));
    }
    let entries = s.history_count(h) as u128 * (s.pair_radix() as u128).pow((s.horizon - h) as u32);
    if entries > DEFAULT_ENUMERATION_CAP {
        return Err(Error::TooLarge { count: entries, cap: DEFAULT_ENUMERATION_CAP });
    }
    // every future including its last action, so action-suffix marginals are visible
    let no = s.num_obs;
    let na = s.num_actions;
    let len = s.horizon - h;
    let mut futures = Vec::new();
    for code in 0..(no * na).pow(len as u32) {
        let mut o = vec![0; len];
        let mut a = vec![0; len];
        let mut c = code;
        for k in (0..len).rev() {
            let d = c % (no * na);
            c /= no * na;
            o[k] = d / na;
            a[k] = d % na;
        }
        futures.push(Test(o, a));
    }
    let matrix = joint_block(model, h, &futures);
    let (rank, singular_values) = numerical_rank(&matrix);
    Ok(DynamicsMatrix { step: h, matrix, futures, singular_values, rank })
}

/// Normalized prediction feature `psi_bar(tau_h)` for a history `(o_{1:h}, a_{1:h})`.
pub fn prediction_feature(model: &TabularModel, tests: &CoreTests, o: &[usize], a: &[usize]) -> Result<Vec<f64>> {
    let h = o.len();
    if a.len() != h || h >= model.horizon() + 1 || h > tests.per_step.len().saturating_sub(1) {
        return Err(Error::Shape(format!("history of length {h} for horizon {}", model.horizon())));
    }
    if o.iter().any(|&x| x >= model.num_obs()) || a.iter().any(|&x| x >= model.num_actions()) {
        return Err(Error::Shape("history index out of range".into()));
    }
    let base = if h == 0 { 1.0 } else { model.prefix_prob(o, a, h) };
    if base <= 0.0 {
        return Err(Error::UnreachableHistory { step: h });
    }
    Ok(tests.tests(h).iter().map(|t| future_prob(model, o, a, &t.0, &t.1)).collect())
}

/// Normalized features for every history rank at step `h`; `None` where unreachable.
pub fn feature_table(model: &TabularModel, tests: &CoreTests, h: usize) -> Vec<Option<Vec<f64>>> {
    let s = model.shape();
    let rows = if h == 0 { 1 } else { s.history_count(h) };
    (0..rows)
        .map(|r| {
            let (o, a) = if h == 0 { (vec![], vec![]) } else { s.decode_history(r, h) };
            prediction_feature(model, tests, &o, &a).ok()
        })
        .collect()
}

/// Largest self-consistency residuals of an extracted representation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PsrResiduals {
    /// `|psi(tau_h) - M_h ... M_1 psi_0|`.
    pub reconstruction: f64,
    /// `|phi_h^T psi(tau_h) - P(tau_h^o | tau_h^a)|`.
    pub prediction: f64,
    /// `|sum_o phi_{h+1}^T M_{h+1}(o, a) psi(tau_h) - phi_h^T psi(tau_h)|`.
    pub normalization: f64,
}

impl PsrResiduals {
    pub fn max(&self) -> f64 {
        self.reconstruction.max(self.prediction).max(self.normalization)
    }
}

/// Operators, normalizers and features of a model under given tests.
#[derive(Debug, Clone)]
pub struct PsrView {
    pub tests: CoreTests,
    /// `psi(tau_h)` rows by history rank, `h = 0..H-1` (`psi[0]` holds `psi_0`).
    pub psi: Vec<DMatrix<f64>>,
    /// `M_h(o, a)` for `h = 1..H-1`, indexed `[h - 1][o * |A| + a]`.
    pub ops: Vec<Vec<DMatrix<f64>>>,
    /// `phi_h` for `h = 0..H-1`.
    pub phi: Vec<DVector<f64>>,
    pub residuals: PsrResiduals,
    shape: Shape,
}

impl PsrView {
    pub fn psi0(&self) -> DVector<f64> {
        self.psi[0].row(0).transpose()
    }

    pub fn op(&self, h: usize, o: usize, a: usize) -> &DMatrix<f64> {
        &self.ops[h - 1][o * self.shape.num_actions + a]
    }

    /// `psi_bar(tau_h) = psi / (phi_h^T psi)`, `None` for unreachable histories.
    pub fn psi_bar(&self, h: usize, rank: usize) -> Option<DVector<f64>> {
        let v = self.psi[h].row(rank).transpose();
        let z = self.phi[h].dot(&v);
        if z.abs() <= 1e-300 {
            None
        } else {
            Some(v / z)
        }
    }
}

fn lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().pseudo_inverse(1e-12).expect("pseudo-inverse of a finite matrix") * y
}

/// Operators `M_h`, normalizers `phi_h` and `psi_0` by least squares.
pub fn extract_psr(model: &TabularModel, tests: &CoreTests) -> Result<PsrView> {
    let s = *model.shape();
    tests.check(&s)?;
    let hz = s.horizon;
    let psi: Vec<DMatrix<f64>> = (0..hz).map(|h| joint_block(model, h, tests.tests(h))).collect();
    let marg: Vec<DVector<f64>> = (0..hz)
        .map(|h| {
            if h == 0 {
                DVector::from_element(1, 1.0)
            } else {
                let px = model.prefix_probs(h);
                DVector::from_fn(s.history_count(h), |r, _| px[r / s.num_actions])
            }
        })
        .collect();
    let phi: Vec<DVector<f64>> = (0..hz)
        .map(|h| lstsq(&psi[h], &DMatrix::from_column_slice(marg[h].len(), 1, marg[h].as_slice())).column(0).into_owned())
        .collect();
    let mut ops = Vec::with_capacity(hz.saturating_sub(1));
    for h in 1..hz {
        let prev = &psi[h - 1];
        let mut per = Vec::with_capacity(s.pair_radix());
        for o in 0..s.num_obs {
            for a in 0..s.num_actions {
                // next-step rows for tau_h = (tau_{h-1}, o, a)
                let y = DMatrix::from_fn(prev.nrows(), psi[h].ncols(), |r, j| {
                    let rank = if h == 1 { o * s.num_actions + a } else { r * s.pair_radix() + o * s.num_actions + a };
                    psi[h][(rank, j)]
                });
                per.push(lstsq(prev, &y).transpose());
            }
        }
        ops.push(per);
    }
    let mut res = PsrResiduals::default();
    let bump = |slot: &mut f64, v: f64, h: usize, worst: &mut usize| {
        if v > *slot {
            *slot = v;
            if v > RESIDUAL_TOL {
                *worst = h;
            }
        }
    };
    let mut worst = 0;
    for h in 0..hz {
        for r in 0..psi[h].nrows() {
            let v = psi[h].row(r).transpose();
            bump(&mut res.prediction, (phi[h].dot(&v) - marg[h][r]).abs(), h, &mut worst);
            if h >= 1 {
                let (o, a) = s.decode_history(r, h);
                let mut cur = psi[0].row(0).transpose();
                for k in 1..=h {
                    cur = &ops[k - 1][o[k - 1] * s.num_actions + a[k - 1]] * cur;
                }
                bump(&mut res.reconstruction, (cur - &v).amax(), h, &mut worst);
            }
            if h + 1 < hz {
                for a in 0..s.num_actions {
                    let mut acc = 0.0;
                    for o in 0..s.num_obs {
                        acc += phi[h + 1].dot(&(&ops[h][o * s.num_actions + a] * &v));
                    }
                    bump(&mut res.normalization, (acc - phi[h].dot(&v)).abs(), h + 1, &mut worst);
                }
            }
        }
    }
    if res.max() > RESIDUAL_TOL {
        return Err(Error::CoreTestsInsufficient { step: worst, residual: res.max() });
    }
    Ok(PsrView { tests: tests.clone(), psi, ops, phi, residuals: res, shape: s })
}

/// `m(omega)` for every full-length future at step `h`, as rows of a matrix
/// over futures in [`dynamics_matrix`] column order (`h = 0` included).
pub fn future_weights(model: &TabularModel, view: &PsrView, h: usize) -> (Vec<Test>, DMatrix<f64>) {
    let s = model.shape();
    let len = s.horizon - h;
    let (no, na) = (s.num_obs, s.num_actions);
    let mut futures = Vec::new();
    for code in 0..(no * na).pow(len as u32) {
        let mut o = vec![0; len];
        let mut a = vec![0; len];
        let mut c = code;
        for k in (0..len).rev() {
            let d = c % (no * na);
            c /= no * na;
            o[k] = d / na;
            a[k] = d % na;
        }
        futures.push(Test(o, a));
    }
    let cols = joint_block(model, h, &futures);
    let m = lstsq(&view.psi[h], &cols);
    (futures, m.transpose())
}

/// `1 / gamma`: the largest `sum_omega pi(omega) |m(omega)^T x|` over steps,
/// unit-`l1` directions and policies.
///
/// The maximum over the `l1` ball sits at a signed basis vector and the
/// policy maximum is a backward recursion over the future tree.
pub fn gamma_condition(model: &TabularModel, tests: &CoreTests) -> Result<f64> {
    let view = extract_psr(model, tests)?;
    let s = model.shape();
    let (no, na) = (s.num_obs, s.num_actions);
    let mut best: f64 = 0.0;
    for h in 0..s.horizon {
        let (_, m) = future_weights(model, &view, h);
        let len = s.horizon - h;
        for i in 0..m.ncols() {
            // leaves in future-code order; fold the deepest (o, a) digit first
            let mut layer: Vec<f64> = (0..m.nrows()).map(|r| m[(r, i)].abs()).collect();
            for _ in 0..len {
                layer = layer
                    .chunks(no * na)
                    .map(|c| (0..no).map(|o| (0..na).map(|a| c[o * na + a]).fold(f64::NEG_INFINITY, f64::max)).sum())
                    .collect();
            }
            best = best.max(layer[0]);
        }
    }
    Ok(best)
}
