//! Dual solvers for robust expectations and a dense simplex engine.
//!
//! Scalar duals give `inf_{P in ball} E_P[ell]` for a single row. The
//! `P`-type solvers work on the joint law over observation prefixes with the
//! first observation fixed; the primal TV problem is a linear program over
//! prefix masses `P(x_h)` with flow constraints and absolute-deviation slacks.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{check_triple, value, Policy, RewardSpec, TabularModel};

/// Nonzero cap for dense LPs.
pub const LP_NONZERO_CAP: usize = 50_000;
pub const DEFAULT_SUBGRADIENT_ITERS: usize = 50_000;
pub const DEFAULT_SUBGRADIENT_STEP: f64 = 0.5;
pub const KL_LAMBDA_MIN: f64 = 1e-8;
pub const KL_TOL: f64 = 1e-10;

const PIVOT_EPS: f64 = 1e-10;
const COST_EPS: f64 = 1e-11;
const MAX_PIVOTS: usize = 200_000;

/// Optimum of a dual problem with its multipliers.
///
/// Scalar row duals store their single `lambda` in `lambda[0]`. The `P`-TV
/// dual fills `gamma` (by `x_H`) and `lambda` (by `(a_{H-1}, x_{H-1})`); the
/// `P`-KL dual fills `eta` (by action sequence).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualSolution {
    pub value: f64,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// How the TV radius becomes an `l1` budget on the slacks of the `P`-TV program.
///
/// `HalfL1` matches the half-`l1` total variation used for membership, so the
/// slack budget is `2 xi`. `L1` uses `xi` directly as the slack budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetConvention {
    #[default]
    HalfL1,
    L1,
}

impl BudgetConvention {
    pub fn budget(self, xi: f64) -> f64 {
        match self {
            BudgetConvention::HalfL1 => 2.0 * xi,
            BudgetConvention::L1 => xi,
        }
    }
}

fn check_pair(p0: &[f64], ell: &[f64]) -> Result<()> {
    if p0.is_empty() || p0.len() != ell.len() {
        return Err(Error::Shape(format!("distribution of length {} vs values of length {}", p0.len(), ell.len())));
    }
    if ell.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    Ok(())
}

fn mean(p0: &[f64], ell: &[f64]) -> f64 {
    p0.iter().zip(ell).map(|(p, l)| p * l).sum()
}

/// `inf` of `E_P[ell]` over the TV ball of radius `xi` around `p0`.
///
/// Maximizes `lambda - E[(lambda - ell)_+] - xi (lambda - min ell)_+` exactly by
/// checking every breakpoint.
pub fn tv_dual_expectation(p0: &[f64], ell: &[f64], xi: f64) -> Result<DualSolution> {
    check_pair(p0, ell)?;
    let lo = ell.iter().cloned().fold(f64::INFINITY, f64::min);
    let objective = |lam: f64| {
        let hinge: f64 = p0.iter().zip(ell).map(|(p, l)| p * (lam - l).max(0.0)).sum();
        lam - hinge - xi * (lam - lo).max(0.0)
    };
    let mut best = (f64::NEG_INFINITY, lo);
    for &lam in ell {
        let v = objective(lam);
        if v > best.0 || (v == best.0 && lam < best.1) {
            best = (v, lam);
        }
    }
    let value = if xi == 0.0 { mean(p0, ell) } else { best.0 };
    Ok(DualSolution { value, lambda: vec![best.1], iterations: ell.len(), ..Default::default() })
}

/// Golden-section maximization of a concave function on `[lo, hi]`.
pub(crate) fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64, usize) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iters = 0;
    while hi - lo > tol && iters < 500 {
        iters += 1;
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (lo + hi);
    let fx = f(x);
    let (x, fx) = [(x, fx), (x1, f1), (x2, f2)].into_iter().fold((x, fx), |b, c| if c.1 > b.1 { c } else { b });
    (x, fx, iters)
}

/// `m - lambda log E_p[exp(-(ell - m) / lambda)]` with `m` the support minimum.
fn kl_smooth_min(p0: &[f64], ell: &[f64], m: f64, lam: f64) -> f64 {
    let e: f64 = p0.iter().zip(ell).filter(|(p, _)| **p > 0.0).map(|(p, l)| p * (-(l - m) / lam).exp()).sum();
    m - lam * e.ln()
}

/// `inf` of `E_P[ell]` over the KL ball `KL(P || p0) <= xi`.
pub fn kl_dual_expectation(p0: &[f64], ell: &[f64], xi: f64) -> Result<DualSolution> {
    kl_dual_expectation_tol(p0, ell, xi, KL_TOL)
}

/// As [`kl_dual_expectation`] with an explicit bracket tolerance on `lambda`.
pub fn kl_dual_expectation_tol(p0: &[f64], ell: &[f64], xi: f64, tol: f64) -> Result<DualSolution> {
    check_pair(p0, ell)?;
    if xi == 0.0 {
        return Ok(DualSolution { value: mean(p0, ell), lambda: vec![f64::INFINITY], ..Default::default() });
    }
    let support = || p0.iter().zip(ell).filter(|(p, _)| **p > 0.0).map(|(_, l)| *l);
    let m = support().fold(f64::INFINITY, f64::min);
    let top = support().fold(f64::NEG_INFINITY, f64::max);
    let hi = (top - m) / xi + 1.0;
    let g = |lam: f64| kl_smooth_min(p0, ell, m, lam) - lam * xi;
    let (lam, v, iters) = golden_max(g, KL_LAMBDA_MIN, hi, tol);
    // lambda -> 0 gives the support minimum
    let (lam, v) = if m >= v { (0.0, m) } else { (lam, v) };
    Ok(DualSolution { value: v, lambda: vec![lam], iterations: iters, ..Default::default() })
}

/// `min c.x` subject to `A_eq x = b_eq`, `A_le x <= b_le`, `x >= lower`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_le: Vec<Vec<f64>>,
    pub b_le: Vec<f64>,
    pub lower: Vec<f64>,
}

/// Optimal primal point with row duals and optimality residuals.
///
/// Duals follow `c - A^T y >= 0` with `y_le <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub value: f64,
    pub x: Vec<f64>,
    pub duals_eq: Vec<f64>,
    pub duals_le: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub primal_residual: f64,
    pub cs_residual: f64,
    pub pivots: usize,
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        LinearProgram { c: vec![0.0; n], a_eq: vec![], b_eq: vec![], a_le: vec![], b_le: vec![], lower: vec![0.0; n] }
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) {
        self.a_eq.push(row);
        self.b_eq.push(rhs);
    }

    pub fn add_le(&mut self, row: Vec<f64>, rhs: f64) {
        self.a_le.push(row);
        self.b_le.push(rhs);
    }

    pub fn nonzeros(&self) -> usize {
        self.a_eq.iter().chain(&self.a_le).map(|r| r.iter().filter(|v| **v != 0.0).count()).sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.c.len();
        let rows_ok = self.a_eq.iter().chain(&self.a_le).all(|r| r.len() == n);
        if !rows_ok || self.a_eq.len() != self.b_eq.len() || self.a_le.len() != self.b_le.len() || self.lower.len() != n
        {
            return Err(Error::Shape("inconsistent linear program dimensions".into()));
        }
        let finite = self
            .c
            .iter()
            .chain(&self.b_eq)
            .chain(&self.b_le)
            .chain(&self.lower)
            .chain(self.a_eq.iter().flatten())
            .chain(self.a_le.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("linear program has non-finite entries".into()));
        }
        Ok(())
    }

    /// Plain-text dense dump: one line per objective, row and bound vector.
    pub fn dump(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "vars {} eq {} le {}", self.c.len(), self.a_eq.len(), self.a_le.len());
        let _ = writeln!(s, "min {}", fmt(&self.c));
        for (r, b) in self.a_eq.iter().zip(&self.b_eq) {
            let _ = writeln!(s, "eq {} = {b}", fmt(r));
        }
        for (r, b) in self.a_le.iter().zip(&self.b_le) {
            let _ = writeln!(s, "le {} <= {b}", fmt(r));
        }
        let _ = writeln!(s, "lower {}", fmt(&self.lower));
        s
    }
}

struct Tableau {
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
    pivots: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let m = self.t.len();
        let piv = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= piv;
        }
        let prow = self.t[r].clone();
        for i in 0..m {
            if i != r {
                let f = self.t[i][c];
                if f != 0.0 {
                    for (v, p) in self.t[i].iter_mut().zip(&prow) {
                        *v -= f * p;
                    }
                    self.t[i][c] = 0.0;
                }
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    /// Bland's rule on the cost row `m` (last row) over columns `< allowed`.
    fn run(&mut self, allowed: usize) -> Result<()> {
        let m = self.t.len() - 1;
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(Error::InvalidArgument("simplex pivot limit reached".into()));
            }
            let enter = (0..allowed).find(|&j| self.t[m][j] < -COST_EPS);
            let Some(j) = enter else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.t[i][j];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-12 || (ratio <= br + 1e-12 && self.basis[i] < self.basis[bi]) {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Err(Error::Unbounded),
                Some((i, _)) => self.pivot(i, j),
            }
        }
    }
}

/// Two-phase dense simplex with Bland's anti-cycling rule.
pub fn simplex_lp_solve(lp: &LinearProgram) -> Result<LpSolution> {
    lp.validate()?;
    let nnz = lp.nonzeros();
    if nnz > LP_NONZERO_CAP {
        return Err(Error::TooLarge { count: nnz as u128, cap: LP_NONZERO_CAP as u128 });
    }
    let n = lp.c.len();
    let me = lp.a_eq.len();
    let ml = lp.a_le.len();
    let m = me + ml;
    // columns: shifted x (n) | slacks (ml) | artificials (m) | rhs
    let cols = n + ml + m;
    let mut sign = vec![1.0; m];
    let mut t = vec![vec![0.0; cols + 1]; m + 1];
    for i in 0..m {
        let (row, b) = if i < me { (&lp.a_eq[i], lp.b_eq[i]) } else { (&lp.a_le[i - me], lp.b_le[i - me]) };
        let shifted = b - row.iter().zip(&lp.lower).map(|(a, l)| a * l).sum::<f64>();
        sign[i] = if shifted < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign[i] * row[j];
        }
        if i >= me {
            t[i][n + i - me] = sign[i];
        }
        t[i][n + ml + i] = 1.0;
        t[i][cols] = sign[i] * shifted;
    }
    for j in 0..n + ml {
        t[m][j] = -(0..m).map(|i| t[i][j]).sum::<f64>();
    }
    t[m][cols] = -(0..m).map(|i| t[i][cols]).sum::<f64>();
    let mut tab = Tableau { t, basis: (n + ml..cols).collect(), cols, pivots: 0 };
    tab.run(n + ml)?;
    let scale = 1.0 + (0..m).map(|i| tab.t[i][cols].abs()).fold(0.0, f64::max);
    if -tab.t[m][cols] > 1e-9 * scale {
        return Err(Error::Infeasible);
    }
    // drive zero-level artificials out of the basis where possible
    for i in 0..m {
        if tab.basis[i] >= n + ml {
            if let Some(j) = (0..n + ml).find(|&j| tab.t[i][j].abs() > 1e-9) {
                tab.pivot(i, j);
            }
        }
    }
    // phase 2 cost row
    let cost = |j: usize| if j < n { lp.c[j] } else { 0.0 };
    for j in 0..=cols {
        let cj = if j < cols { cost(j) } else { 0.0 };
        tab.t[m][j] = cj - (0..m).map(|i| cost(tab.basis[i]) * tab.t[i][j]).sum::<f64>();
    }
    tab.run(n + ml)?;

    let mut xs = vec![0.0; n + ml];
    for i in 0..m {
        if tab.basis[i] < n + ml {
            xs[tab.basis[i]] = tab.rhs(i).max(0.0);
        }
    }
    let x: Vec<f64> = (0..n).map(|j| xs[j] + lp.lower[j]).collect();
    let value: f64 = lp.c.iter().zip(&x).map(|(c, v)| c * v).sum();
    // y_std_i = -(reduced cost of artificial i); undo the row sign flips
    let y: Vec<f64> = (0..m).map(|i| -tab.t[m][n + ml + i] * sign[i]).collect();
    let (duals_eq, duals_le) = (y[..me].to_vec(), y[me..].to_vec());
    let reduced_costs: Vec<f64> = (0..n)
        .map(|j| {
            lp.c[j]
                - lp.a_eq.iter().zip(&duals_eq).map(|(r, y)| r[j] * y).sum::<f64>()
                - lp.a_le.iter().zip(&duals_le).map(|(r, y)| r[j] * y).sum::<f64>()
        })
        .collect();
    let mut primal_residual: f64 = 0.0;
    for (r, b) in lp.a_eq.iter().zip(&lp.b_eq) {
        primal_residual = primal_residual.max((dot(r, &x) - b).abs());
    }
    let mut cs_residual: f64 = 0.0;
    for ((r, b), y) in lp.a_le.iter().zip(&lp.b_le).zip(&duals_le) {
        let slack = b - dot(r, &x);
        primal_residual = primal_residual.max((-slack).max(0.0));
        cs_residual = cs_residual.max((slack * y).abs()).max(y.max(0.0));
    }
    for j in 0..n {
        primal_residual = primal_residual.max((lp.lower[j] - x[j]).max(0.0));
        cs_residual = cs_residual.max(((x[j] - lp.lower[j]) * reduced_costs[j]).abs()).max((-reduced_costs[j]).max(0.0));
    }
    Ok(LpSolution { value, x, duals_eq, duals_le, reduced_costs, primal_residual, cs_residual, pivots: tab.pivots })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Prefix structure shared by the `P`-type solvers.
///
/// Prefixes `x_h` are restricted to the fixed first observation and indexed
/// locally: `x_{h+1} = (x_h * |A| + a_h) * |O| + o_{h+1}`.
pub(crate) struct PrefixLayout {
    pub horizon: usize,
    pub num_obs: usize,
    pub num_actions: usize,
    /// Local prefix counts for `h = 1..=H` (index `h - 1`).
    pub counts: Vec<usize>,
    /// `f(x_H)` by local terminal prefix.
    pub f: Vec<f64>,
    /// `P*(x_H)` by local terminal prefix.
    pub pstar: Vec<f64>,
    /// Action-sequence group of each terminal prefix.
    pub group: Vec<usize>,
    pub groups: usize,
}

impl PrefixLayout {
    pub fn new(model: &TabularModel, policy: &Policy, reward: &RewardSpec) -> Result<Self> {
        check_triple(model, policy, reward)?;
        let s = *model.shape();
        let h = s.horizon;
        let counts: Vec<usize> = (1..=h).map(|k| s.prefix_count(k) / s.num_obs).collect();
        let n = counts[h - 1];
        let start = model.o1() * n;
        let px = model.prefix_probs(h);
        let mut f = vec![0.0; n];
        let mut pstar = vec![0.0; n];
        let mut group = vec![0; n];
        for local in 0..n {
            let rank = start + local;
            let (o, a) = s.decode_prefix(rank, h);
            pstar[local] = px[rank];
            group[local] = a.iter().fold(0, |acc, &x| acc * s.num_actions + x);
            let mut full_a = a.clone();
            full_a.push(0);
            let head = policy.action_prob(&o, &full_a, h - 1);
            if head == 0.0 {
                continue;
            }
            let last = policy.row(h, rank);
            f[local] = head * (0..s.num_actions).map(|ah| last[ah] * reward.at(rank * s.num_actions + ah)).sum::<f64>();
        }
        Ok(PrefixLayout {
            horizon: h,
            num_obs: s.num_obs,
            num_actions: s.num_actions,
            counts,
            f,
            pstar,
            group,
            groups: s.num_actions.pow(h as u32 - 1),
        })
    }
}

/// Builds the `P`-TV linear program over prefix masses and terminal slacks.
pub fn p_tv_program(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    convention: BudgetConvention,
) -> Result<LinearProgram> {
    let lay = PrefixLayout::new(model, policy, reward)?;
    let h = lay.horizon;
    if h < 2 {
        return Err(Error::InvalidArgument("horizon 1 has no dynamics to perturb".into()));
    }
    let (no, na) = (lay.num_obs, lay.num_actions);
    // P(x_k) for k = 2..=H, then s(x_H)
    let mut offset = vec![0; h + 1];
    let mut total = 0;
    for k in 2..=h {
        offset[k] = total;
        total += lay.counts[k - 1];
    }
    let nterm = lay.counts[h - 1];
    let sbase = total;
    let nvars = total + nterm;
    let mut lp = LinearProgram::new(nvars);
    for x in 0..nterm {
        lp.c[offset[h] + x] = lay.f[x];
    }
    // sum_{o_2} P(x_2) = 1 per a_1
    for a1 in 0..na {
        let mut row = vec![0.0; nvars];
        for o in 0..no {
            row[offset[2] + a1 * no + o] = 1.0;
        }
        lp.add_eq(row, 1.0);
    }
    for k in 2..h {
        for x in 0..lay.counts[k - 1] {
            for a in 0..na {
                let mut row = vec![0.0; nvars];
                for o in 0..no {
                    row[offset[k + 1] + (x * na + a) * no + o] = 1.0;
                }
                row[offset[k] + x] = -1.0;
                lp.add_eq(row, 0.0);
            }
        }
    }
    for x in 0..nterm {
        let mut up = vec![0.0; nvars];
        up[offset[h] + x] = 1.0;
        up[sbase + x] = -1.0;
        lp.add_le(up, lay.pstar[x]);
        let mut down = vec![0.0; nvars];
        down[offset[h] + x] = -1.0;
        down[sbase + x] = -1.0;
        lp.add_le(down, -lay.pstar[x]);
    }
    let budget = convention.budget(xi);
    for g in 0..lay.groups {
        let mut row = vec![0.0; nvars];
        for x in 0..nterm {
            if lay.group[x] == g {
                row[sbase + x] = 1.0;
            }
        }
        lp.add_le(row, budget);
    }
    Ok(lp)
}

/// Worst-case value over the `P`-TV ball by solving the primal program.
pub fn p_tv_primal(model: &TabularModel, policy: &Policy, reward: &RewardSpec, xi: f64) -> Result<f64> {
    p_tv_primal_with(model, policy, reward, xi, BudgetConvention::default())
}

pub fn p_tv_primal_with(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    convention: BudgetConvention,
) -> Result<f64> {
    if model.horizon() == 1 || xi == 0.0 {
        return value(model, policy, reward);
    }
    let lp = p_tv_program(model, policy, reward, xi, convention)?;
    Ok(simplex_lp_solve(&lp)?.value)
}

/// Linear constraints tying the last-level multipliers together.
///
/// Every multiplier `lambda_{(a_{h-1}, x_{h-1})}` must equal
/// `sum_{a_h} lambda_{(a_h, x_h)}` for each child `x_h`; written in terms of
/// the last level this is a set of homogeneous rows `C lambda = 0`.
fn consistency_rows(lay: &PrefixLayout) -> Vec<Vec<f64>> {
    let h = lay.horizon;
    let (no, na) = (lay.num_obs, lay.num_actions);
    let dim = lay.counts[h - 2] * na;
    // functionals for level h-1 multipliers, indexed by local tau_{h-1}
    let mut level: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            v
        })
        .collect();
    let mut rows = Vec::new();
    for k in (2..h).rev() {
        // parents are tau_{k-1}; children x_k = tau_{k-1} * |O| + o
        let parents = lay.counts[k - 2] * na;
        let mut up = Vec::with_capacity(parents);
        for p in 0..parents {
            let sums: Vec<Vec<f64>> = (0..no)
                .map(|o| {
                    let x = p * no + o;
                    let mut acc = vec![0.0; dim];
                    for a in 0..na {
                        for (s, v) in acc.iter_mut().zip(&level[x * na + a]) {
                            *s += v;
                        }
                    }
                    acc
                })
                .collect();
            for o in 1..no {
                rows.push(sums[o].iter().zip(&sums[0]).map(|(a, b)| a - b).collect());
            }
            up.push(sums[0].clone());
        }
        level = up;
    }
    rows
}

fn projector(rows: &[Vec<f64>], dim: usize) -> Option<DMatrix<f64>> {
    if rows.is_empty() {
        return None;
    }
    let c = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let pinv = c.clone().pseudo_inverse(1e-12).expect("pseudo-inverse of a finite matrix");
    Some(DMatrix::identity(dim, dim) - pinv * c)
}

/// Exact value of the `P`-TV dual objective for fixed last-level multipliers,
/// with `gamma` and the group-wise `eta` eliminated in closed form. Returns the
/// value, a supergradient in `lambda`, and the maximizing `gamma`.
fn tv_dual_eval(lay: &PrefixLayout, budget: f64, lambda: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let no = lay.num_obs;
    let n = lay.f.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); lay.groups];
    for x in 0..n {
        members[lay.group[x]].push(x);
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; lambda.len()];
    let mut gamma = vec![0.0; n];
    for xs in &members {
        let lam = |x: usize| lambda[x / no];
        let lower = xs.iter().map(|&x| -(lay.f[x] + lam(x))).fold(0.0, f64::max);
        let h = |t: f64| xs.iter().map(|&x| lay.pstar[x] * lay.f[x].min(t - lam(x))).sum::<f64>() - budget * t;
        let mut best = (h(lower), lower);
        for &x in xs {
            let t = lay.f[x] + lam(x);
            if t > lower {
                let v = h(t);
                if v > best.0 {
                    best = (v, t);
                }
            }
        }
        let (v, t) = best;
        total += v;
        // supergradient of the partial maximum: split tied kinks so that the
        // t-component of the joint supergradient vanishes
        let tie = |x: usize| (t - lam(x) - lay.f[x]).abs() <= 1e-12;
        let below: f64 = xs.iter().filter(|&&x| !tie(x) && t - lam(x) < lay.f[x]).map(|&x| lay.pstar[x]).sum();
        let tied: f64 = xs.iter().filter(|&&x| tie(x)).map(|&x| lay.pstar[x]).sum();
        let theta = if tied > 0.0 { ((budget - below) / tied).clamp(0.0, 1.0) } else { 0.0 };
        for &x in xs {
            let w = if tie(x) {
                theta
            } else if t - lam(x) < lay.f[x] {
                1.0
            } else {
                0.0
            };
            grad[x / no] -= w * lay.pstar[x];
            gamma[x] = (lay.f[x] + lam(x) - t).max(0.0);
        }
        let slack = below + theta * tied - budget;
        if slack < 0.0 && t > 0.0 && t == lower {
            // binding lower bound t >= -(f + lambda): its multiplier enters lambda
            if let Some(&x) = xs.iter().find(|&&x| -(lay.f[x] + lam(x)) == lower) {
                grad[x / no] -= slack;
            }
        }
    }
    (total, grad, gamma)
}

fn subgradient(
    lay: &PrefixLayout,
    budget: f64,
    iters: usize,
    step: f64,
    project: impl Fn(&mut Vec<f64>),
) -> (f64, Vec<f64>, Vec<f64>, usize) {
    let dim = lay.counts[lay.horizon - 2] * lay.num_actions;
    let mut lambda = vec![0.0; dim];
    project(&mut lambda);
    let (v0, _, g0) = tv_dual_eval(lay, budget, &lambda);
    let mut best = (v0, lambda.clone(), g0);
    let mut used = 0;
    // warm-started phases with a shrinking base step, each from the best iterate so far
    let phases = [10.0, 1.0, 0.1, 0.01];
    let per_phase = (iters / phases.len()).max(1);
    'outer: for scale in phases {
        let mut lambda = best.1.clone();
        for k in 1..=per_phase {
            used += 1;
            let (v, grad, gamma) = tv_dual_eval(lay, budget, &lambda);
            if v > best.0 {
                best = (v, lambda.clone(), gamma);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break 'outer;
            }
            let eta = scale * step / (k as f64).sqrt();
            for (l, g) in lambda.iter_mut().zip(&grad) {
                *l += eta * g;
            }
            project(&mut lambda);
        }
    }
    (best.0, best.1, best.2, used)
}

/// Dual of the `P`-TV program by projected subgradient.
///
/// The multipliers `lambda_{(a_{H-1}, x_{H-1})}` are kept on the subspace
/// where the lower-level multipliers they induce are consistent across
/// sibling observations; `gamma` and the per-sequence `eta` are eliminated
/// exactly for every iterate, and the best iterate is returned. `residual`
/// is the largest violation of the consistency rows.
pub fn p_tv_dual(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    iters: usize,
    step: f64,
) -> Result<DualSolution> {
    p_tv_dual_with(model, policy, reward, xi, iters, step, BudgetConvention::default())
}

pub fn p_tv_dual_with(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    iters: usize,
    step: f64,
    convention: BudgetConvention,
) -> Result<DualSolution> {
    if model.horizon() == 1 {
        return Ok(DualSolution { value: value(model, policy, reward)?, ..Default::default() });
    }
    let lay = PrefixLayout::new(model, policy, reward)?;
    let rows = consistency_rows(&lay);
    let dim = lay.counts[lay.horizon - 2] * lay.num_actions;
    let proj = projector(&rows, dim);
    let project = |l: &mut Vec<f64>| {
        if let Some(p) = &proj {
            let v = p * nalgebra::DVector::from_column_slice(l);
            l.copy_from_slice(v.as_slice());
        }
    };
    let budget = convention.budget(xi);
    let (value, lambda, gamma, used) = subgradient(&lay, budget, iters, step, project);
    let residual = rows.iter().map(|r| dot(r, &lambda).abs()).fold(0.0, f64::max);
    Ok(DualSolution { value, gamma, lambda, eta: vec![], iterations: used, residual })
}

/// The dual with every last-level multiplier free inside the box
/// `[-max_{o_H} f, 0]`, ignoring the lower-level consistency rows.
///
/// This is the relaxed form whose value can exceed the primal optimum once
/// `H >= 3`; it coincides with [`p_tv_dual`] at `H = 2`.
pub fn p_tv_dual_relaxed(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    iters: usize,
    step: f64,
) -> Result<DualSolution> {
    if model.horizon() == 1 {
        return Ok(DualSolution { value: value(model, policy, reward)?, ..Default::default() });
    }
    let lay = PrefixLayout::new(model, policy, reward)?;
    let no = lay.num_obs;
    let dim = lay.counts[lay.horizon - 2] * lay.num_actions;
    let lo: Vec<f64> = (0..dim).map(|p| -(0..no).map(|o| lay.f[p * no + o]).fold(0.0, f64::max)).collect();
    let project = |l: &mut Vec<f64>| {
        for (v, b) in l.iter_mut().zip(&lo) {
            *v = v.clamp(*b, 0.0);
        }
    };
    let budget = BudgetConvention::default().budget(xi);
    let (value, lambda, gamma, used) = subgradient(&lay, budget, iters, step, project);
    Ok(DualSolution { value, gamma, lambda, eta: vec![], iterations: used, residual: 0.0 })
}

/// Per-sequence dual of the `P`-KL ball.
///
/// For every action sequence `a_{1:H-1}` maximizes
/// `-eta sum_{x_{H-1}} P*(x_{H-1}) log E_{o_H}[exp(-f / eta)] - eta xi`
/// by golden section and returns the sum. Exact for `H = 2`.
pub fn p_kl_dual(model: &TabularModel, policy: &Policy, reward: &RewardSpec, xi: f64) -> Result<DualSolution> {
    p_kl_dual_tol(model, policy, reward, xi, KL_TOL)
}

pub fn p_kl_dual_tol(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    xi: f64,
    tol: f64,
) -> Result<DualSolution> {
    if model.horizon() == 1 || xi == 0.0 {
        let groups = if model.horizon() == 1 { 0 } else { model.num_actions().pow(model.horizon() as u32 - 1) };
        return Ok(DualSolution {
            value: value(model, policy, reward)?,
            eta: vec![f64::INFINITY; groups],
            ..Default::default()
        });
    }
    let lay = PrefixLayout::new(model, policy, reward)?;
    let no = lay.num_obs;
    let n = lay.f.len();
    let mut total = 0.0;
    let mut etas = vec![0.0; lay.groups];
    let mut iters = 0;
    let mut residual: f64 = 0.0;
    for g in 0..lay.groups {
        // parents tau_{H-1} in this group, each with its conditional row over o_H
        let parents: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n / no)
            .filter(|p| lay.group[p * no] == g)
            .filter_map(|p| {
                let mass: f64 = (0..no).map(|o| lay.pstar[p * no + o]).sum();
                if mass <= 0.0 {
                    return None;
                }
                let row: Vec<f64> = (0..no).map(|o| lay.pstar[p * no + o] / mass).collect();
                let f: Vec<f64> = (0..no).map(|o| lay.f[p * no + o]).collect();
                Some((mass, row, f))
            })
            .collect();
        let mins: Vec<f64> = parents
            .iter()
            .map(|(_, row, f)| row.iter().zip(f).filter(|(q, _)| **q > 0.0).map(|(_, v)| *v).fold(f64::INFINITY, f64::min))
            .collect();
        let limit: f64 = parents.iter().zip(&mins).map(|((m, _, _), lo)| m * lo).sum();
        let (top, bottom) = parents.iter().flat_map(|(_, _, f)| f.iter()).fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), v| (a.max(*v), b.min(*v)));
        if parents.is_empty() || top <= bottom {
            total += limit;
            etas[g] = 0.0;
            continue;
        }
        let obj = |eta: f64| {
            parents.iter().zip(&mins).map(|((m, row, f), lo)| m * kl_smooth_min(row, f, *lo, eta)).sum::<f64>() - eta * xi
        };
        let hi = (top - bottom) / xi + 1.0;
        let (eta, v, it) = golden_max(&obj, KL_LAMBDA_MIN, hi, tol);
        iters += it;
        residual = residual.max((obj(eta) - v).abs());
        if limit >= v {
            total += limit;
            etas[g] = 0.0;
        } else {
            total += v;
            etas[g] = eta;
        }
    }
    Ok(DualSolution { value: total, gamma: vec![], lambda: vec![], eta: etas, iterations: iters, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::Divergence;
    use crate::instances::{random_distribution, random_instance, random_policy, ring2};
    use crate::oracle::{grid_min_expectation, lp_vertex_enumeration, p_ball_grid_h2};
    use crate::process::Policy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_scalar_examples() {
        let p = [0.2, 0.8];
        let l = [0.0, 1.0];
        assert!((tv_dual_expectation(&p, &l, 0.0).unwrap().value - 0.8).abs() < 1e-15);
        assert!((tv_dual_expectation(&p, &l, 1.0).unwrap().value - 0.0).abs() < 1e-15);
        assert!((tv_dual_expectation(&p, &l, 0.1).unwrap().value - 0.7).abs() < 1e-12);
        assert!(tv_dual_expectation(&p, &[0.0], 0.1).is_err());
    }

    #[test]
    fn kl_scalar_examples() {
        let p = [0.5, 0.5];
        assert!((kl_dual_expectation(&p, &[0.0, 1.0], 0.0).unwrap().value - 0.5).abs() < 1e-15);
        assert!((kl_dual_expectation(&p, &[0.3, 0.3], 0.4).unwrap().value - 0.3).abs() < 1e-12);
        assert!(kl_dual_expectation(&p, &[0.0, 1.0], 0.7).unwrap().value.abs() < 1e-3);
    }

    #[test]
    fn scalar_duals_match_grid_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let n = rng.gen_range(2..=3);
            let p0 = random_distribution(&mut rng, n);
            let ell: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let xi = rng.gen_range(0.0..0.6);
            let k = if n == 2 { 2000 } else { 200 };
            let tv = tv_dual_expectation(&p0, &ell, xi).unwrap().value;
            let g = grid_min_expectation(&p0, &ell, Divergence::Tv, xi, k).unwrap();
            assert!(tv <= g + 1e-12 && g - tv <= 2.0 / k as f64, "tv {tv} grid {g}");
            let kl = kl_dual_expectation(&p0, &ell, xi).unwrap().value;
            let g = grid_min_expectation(&p0, &ell, Divergence::Kl, xi, k).unwrap();
            assert!(kl <= g + 1e-9 && g - kl <= 2.0 / k as f64 + 1e-3, "kl {kl} grid {g}");
        }
    }

    #[test]
    fn lp_textbook_cases() {
        let mut lp = LinearProgram::new(1);
        lp.c = vec![1.0];
        lp.lower = vec![3.0];
        assert!((simplex_lp_solve(&lp).unwrap().value - 3.0).abs() < 1e-12);

        let mut lp = LinearProgram::new(3);
        lp.c = vec![0.4, -0.2, 0.7];
        lp.add_eq(vec![1.0, 1.0, 1.0], 1.0);
        let s = simplex_lp_solve(&lp).unwrap();
        assert!((s.value + 0.2).abs() < 1e-12);
        assert!(s.cs_residual < 1e-8);

        let mut lp = LinearProgram::new(1);
        lp.c = vec![-1.0];
        assert_eq!(simplex_lp_solve(&lp).unwrap_err().kind(), "unbounded");
        let mut lp = LinearProgram::new(1);
        lp.add_le(vec![1.0], -1.0);
        assert_eq!(simplex_lp_solve(&lp).unwrap_err().kind(), "infeasible");
    }

    #[test]
    fn transportation_matches_vertex_enumeration() {
        // two supplies (3, 2), two demands (2, 3), costs [[1, 4], [2, 1]]
        let mut lp = LinearProgram::new(4);
        lp.c = vec![1.0, 4.0, 2.0, 1.0];
        lp.add_le(vec![1.0, 1.0, 0.0, 0.0], 3.0);
        lp.add_le(vec![0.0, 0.0, 1.0, 1.0], 2.0);
        lp.add_eq(vec![1.0, 0.0, 1.0, 0.0], 2.0);
        lp.add_eq(vec![0.0, 1.0, 0.0, 1.0], 3.0);
        let s = simplex_lp_solve(&lp).unwrap();
        assert!((s.value - 8.0).abs() < 1e-12);
        assert!((lp_vertex_enumeration(&lp).unwrap() - s.value).abs() < 1e-9);
        assert!(s.cs_residual < 1e-8 && s.primal_residual < 1e-9);
    }

    #[test]
    fn random_small_lps_match_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..200 {
            let n = rng.gen_range(2..=5);
            let mut lp = LinearProgram::new(n);
            lp.c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for _ in 0..rng.gen_range(0..=1) {
                lp.add_eq((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), rng.gen_range(0.5..1.5));
            }
            for _ in 0..rng.gen_range(1..=3) {
                lp.add_le((0..n).map(|_| rng.gen_range(-0.2..1.0)).collect(), rng.gen_range(0.0..2.0));
            }
            let oracle = lp_vertex_enumeration(&lp);
            match simplex_lp_solve(&lp) {
                Ok(s) => {
                    let o = oracle.expect("simplex found a vertex the oracle missed");
                    assert!((s.value - o).abs() < 1e-8, "{} vs {}\n{}", s.value, o, lp.dump());
                    assert!(s.cs_residual < 1e-8);
                    checked += 1;
                }
                Err(Error::Infeasible) => assert!(oracle.is_none()),
                Err(Error::Unbounded) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn lp_nonzero_cap() {
        let mut lp = LinearProgram::new(300);
        for _ in 0..200 {
            lp.add_le(vec![1.0; 300], 1.0);
        }
        assert_eq!(simplex_lp_solve(&lp).unwrap_err().kind(), "too-large");
    }

    #[test]
    fn ring2_p_tv() {
        let inst = ring2();
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        let v = p_tv_primal(&inst.model, &pi, &inst.reward, 0.2).unwrap();
        assert!((v - 0.6).abs() < 1e-12, "{v}");
        let l1 = p_tv_primal_with(&inst.model, &pi, &inst.reward, 0.2, BudgetConvention::L1).unwrap();
        assert!((l1 - 0.7).abs() < 1e-12);
        let d = p_tv_dual(&inst.model, &pi, &inst.reward, 0.2, DEFAULT_SUBGRADIENT_ITERS, DEFAULT_SUBGRADIENT_STEP).unwrap();
        assert!((d.value - 0.6).abs() < 1e-3, "{}", d.value);
        assert!(d.gamma.iter().all(|g| *g >= 0.0));
        let nominal = value(&inst.model, &pi, &inst.reward).unwrap();
        assert!((p_tv_primal(&inst.model, &pi, &inst.reward, 0.0).unwrap() - nominal).abs() < 1e-12);
        // full budget: the adversary picks the worst observation path
        assert!(p_tv_primal(&inst.model, &pi, &inst.reward, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn p_tv_dual_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng, 2, 2, 2);
        let pi = random_policy(&mut rng, *inst.model.shape());
        let nominal = value(&inst.model, &pi, &inst.reward).unwrap();
        let d = p_tv_dual(&inst.model, &pi, &inst.reward, 0.0, 1000, 0.5).unwrap();
        assert!((d.value - nominal).abs() < 1e-9);
        let zero = RewardSpec::constant(*inst.model.shape(), 0.0).unwrap();
        assert_eq!(p_tv_dual(&inst.model, &pi, &zero, 0.3, 100, 0.5).unwrap().value, 0.0);
    }

    #[test]
    fn p_tv_strong_duality_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in [2, 3] {
            for _ in 0..10 {
                let inst = random_instance(&mut rng, h, 2, 2);
                let pi = random_policy(&mut rng, *inst.model.shape());
                let xi = rng.gen_range(0.0..0.5);
                let p = p_tv_primal(&inst.model, &pi, &inst.reward, xi).unwrap();
                let d = p_tv_dual(&inst.model, &pi, &inst.reward, xi, DEFAULT_SUBGRADIENT_ITERS, DEFAULT_SUBGRADIENT_STEP)
                    .unwrap();
                assert!(d.value <= p + 1e-9, "weak duality: dual {} primal {p}", d.value);
                assert!(p - d.value <= 1e-3, "H={h} dual {} primal {p}", d.value);
                assert!(d.residual < 1e-9);
            }
        }
    }

    #[test]
    fn relaxed_dual_is_an_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = random_instance(&mut rng, 2, 2, 2);
        let pi = random_policy(&mut rng, *inst.model.shape());
        let p = p_tv_primal(&inst.model, &pi, &inst.reward, 0.2).unwrap();
        let r = p_tv_dual_relaxed(&inst.model, &pi, &inst.reward, 0.2, 20_000, 0.5).unwrap();
        assert!((r.value - p).abs() < 1e-3);
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 3, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let p = p_tv_primal(&inst.model, &pi, &inst.reward, 0.2).unwrap();
            let r = p_tv_dual_relaxed(&inst.model, &pi, &inst.reward, 0.2, 20_000, 0.5).unwrap();
            assert!(r.value >= p - 1e-3);
        }
    }

    #[test]
    fn p_kl_matches_grid_at_horizon_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 2, 2, 2);
            let pi = random_policy(&mut rng, *inst.model.shape());
            let xi = rng.gen_range(0.01..0.5);
            let d = p_kl_dual(&inst.model, &pi, &inst.reward, xi).unwrap();
            let g = p_ball_grid_h2(&inst.model, &pi, &inst.reward, Divergence::Kl, xi, 1000).unwrap();
            assert!((d.value - g).abs() <= 2e-3 && d.value <= g + 1e-9, "dual {} grid {g}", d.value);
            assert!(d.residual <= 1e-9);
        }
    }

    #[test]
    fn p_kl_trivial_cases() {
        let inst = ring2();
        let pi = Policy::constant(*inst.model.shape(), 1).unwrap();
        let nominal = value(&inst.model, &pi, &inst.reward).unwrap();
        assert_eq!(p_kl_dual(&inst.model, &pi, &inst.reward, 0.0).unwrap().value, nominal);
        let c = RewardSpec::constant(*inst.model.shape(), 0.4).unwrap();
        assert!((p_kl_dual(&inst.model, &pi, &c, 0.3).unwrap().value - 0.4).abs() < 1e-12);
    }
}
