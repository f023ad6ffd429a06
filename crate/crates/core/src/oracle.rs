//! Slow, independent reference computations used to check the solvers.
//!
//! Everything here is brute force: simplex grids, exhaustive vertex
//! enumeration, explicit enumeration of policies. None of it shares code with
//! the dual solvers it is compared against.

use nalgebra::{DMatrix, DVector};

use crate::ambiguity::{f_divergence, Divergence, SimplexGrid};
use crate::duals::LinearProgram;
use crate::error::Result;
use crate::process::{Policy, RewardSpec, TabularModel};

/// `min E_P[ell]` over grid points `P` with `D(P, p0) <= xi`.
///
/// Returns `+inf` when no grid point lies in the ball.
pub fn grid_min_expectation(p0: &[f64], ell: &[f64], div: Divergence, xi: f64, resolution: usize) -> Result<f64> {
    let grid = SimplexGrid::new(resolution, p0.len())?;
    let mut best = f64::INFINITY;
    for p in grid.points() {
        if f_divergence(&p, p0, div)? <= xi + 1e-12 {
            let v: f64 = p.iter().zip(ell).map(|(a, b)| a * b).sum();
            best = best.min(v);
        }
    }
    Ok(best)
}

/// Optimal value of a small LP by enumerating every basic solution.
///
/// Returns `None` when no vertex is feasible. Only meant for a handful of
/// variables: the work is `C(rows + n, n)` linear solves.
pub fn lp_vertex_enumeration(lp: &LinearProgram) -> Option<f64> {
    let n = lp.c.len();
    // every constraint as a row `a . x (=|<=) b`; lower bounds become `-x_j <= -l_j`
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (a, &b) in lp.a_eq.iter().zip(&lp.b_eq) {
        rows.push((a.clone(), b, true));
    }
    for (a, &b) in lp.a_le.iter().zip(&lp.b_le) {
        rows.push((a.clone(), b, false));
    }
    for j in 0..n {
        let mut a = vec![0.0; n];
        a[j] = -1.0;
        rows.push((a, -lp.lower.get(j).copied().unwrap_or(0.0), false));
    }
    let feasible = |x: &DVector<f64>| {
        rows.iter().all(|(a, b, eq)| {
            let v: f64 = a.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
            if *eq {
                (v - b).abs() <= 1e-9
            } else {
                v <= b + 1e-9
            }
        })
    };
    let mut best: Option<f64> = None;
    let m = rows.len();
    let mut pick: Vec<usize> = (0..n).collect();
    if n > m {
        return None;
    }
    loop {
        let a = DMatrix::from_fn(n, n, |i, j| rows[pick[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| rows[pick[i]].1);
        if let Some(x) = a.lu().solve(&b) {
            if x.iter().all(|v| v.is_finite()) && feasible(&x) {
                let v: f64 = lp.c.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
        }
        // next n-combination of m
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] < m - n + i {
                pick[i] += 1;
                for k in i + 1..n {
                    pick[k] = pick[k - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Worst-case value over a horizon-2 `P`-type ball by per-action grid search.
///
/// At horizon 2 the joint law for action `a_1` is the single row
/// `T_1(. | o_1, a_1)`, so the ball factorizes across first actions.
pub fn p_ball_grid_h2(
    model: &TabularModel,
    policy: &Policy,
    reward: &RewardSpec,
    div: Divergence,
    xi: f64,
    resolution: usize,
) -> Result<f64> {
    let s = *model.shape();
    assert_eq!(s.horizon, 2, "grid oracle is horizon-2 only");
    let o1 = model.o1();
    let mut total = 0.0;
    for a1 in 0..s.num_actions {
        let pa = policy.action_prob(&[o1], &[a1], 1);
        if pa == 0.0 {
            continue;
        }
        let rank = s.history_rank(&[o1], &[a1], 1);
        let ell: Vec<f64> = (0..s.num_obs)
            .map(|o2| {
                (0..s.num_actions)
                    .map(|a2| {
                        let o = [o1, o2];
                        let a = [a1, a2];
                        policy.action_prob(&o, &a, 2) / pa * reward.at(s.history_rank(&o, &a, 2))
                    })
                    .sum::<f64>()
            })
            .collect();
        total += pa * grid_min_expectation(model.row(1, rank), &ell, div, xi, resolution)?;
    }
    Ok(total)
}
