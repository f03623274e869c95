//! Tau-leap stepping and the Chernoff step-size selection that bounds the
//! one-step probability of leaving the non-negative lattice.
//!
//! For each coordinate i with negative net exposure among the active
//! channels, the exponential-moment bound
//!   P(x_i + sum_j nu_ji Poisson(a_j tau) <= -1)
//!     <= exp(-s(x_i+1) + tau * sum_j a_j (e^{-s nu_ji} - 1))
//! is minimized over s > 0 (the exponent is convex in s) and the largest
//! tau keeping the bound below delta/d is found by bisection.

use crate::model::in_lattice;
use crate::rng::Stream;

/// Relative width target of the outer bisection on tau.
const TAU_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ChernoffQuery<'a> {
    pub state: &'a [i64],
    /// Propensities, full length J; only the active subset is read.
    pub propensities: &'a [f64],
    /// One-step exit probability bound, split as delta/d per coordinate.
    pub delta: f64,
    /// Largest admissible tau (time to the next decision point).
    pub horizon_gap: f64,
}

/// Log of the minimized Chernoff bound for coordinate terms (a_j, nu_ji),
/// at threshold x_i. Returns 0.0 (bound = 1) when no s > 0 helps.
fn min_log_bound(xi: f64, terms: &[(f64, i64)], tau: f64) -> f64 {
    let target = xi + 1.0;
    if target <= 0.0 {
        // already at or below the boundary; the bound cannot be < 1
        return 0.0;
    }
    let h = |s: f64| -> f64 {
        -s * target
            + tau
                * terms
                    .iter()
                    .map(|&(a, nu)| a * ((-s * nu as f64).exp() - 1.0))
                    .sum::<f64>()
    };
    let dh = |s: f64| -> f64 {
        -target
            - tau
                * terms
                    .iter()
                    .map(|&(a, nu)| a * nu as f64 * (-s * nu as f64).exp())
                    .sum::<f64>()
    };
    // h'(0) = -(x_i+1) - tau * drift; if non-negative the infimum is at s=0.
    if dh(0.0) >= 0.0 {
        return 0.0;
    }
    // bracket the root of the increasing derivative
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut iters = 0;
    while dh(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        iters += 1;
        if iters > 200 {
            return h(hi);
        }
    }
    // safeguarded Newton on dh
    let d2h = |s: f64| -> f64 {
        tau * terms
            .iter()
            .map(|&(a, nu)| a * (nu as f64).powi(2) * (-s * nu as f64).exp())
            .sum::<f64>()
    };
    let mut s = 0.5 * (lo + hi);
    for _ in 0..100 {
        let g = dh(s);
        if g < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let curv = d2h(s);
        let mut next = if curv > 0.0 { s - g / curv } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-12 * s.max(1.0) {
            s = next;
            break;
        }
        s = next;
    }
    h(s)
}

/// Largest tau (capped at `horizon_gap`) whose per-coordinate Chernoff bound
/// stays below delta/d. Coordinates with no negative exposure among the
/// active channels do not constrain tau.
pub fn chernoff_tau(query: &ChernoffQuery, nu: &[Vec<i64>], active: &[usize]) -> f64 {
    let d = query.state.len();
    let log_delta_i = (query.delta / d as f64).ln();
    let mut tau = query.horizon_gap;
    for i in 0..d {
        let terms: Vec<(f64, i64)> = active
            .iter()
            .filter_map(|&j| {
                let a = query.propensities[j];
                let n = nu[j][i];
                (a > 0.0 && n != 0).then_some((a, n))
            })
            .collect();
        if !terms.iter().any(|&(_, n)| n < 0) {
            continue; // exit impossible in this coordinate
        }
        let xi = query.state[i] as f64;
        if xi < 0.0 {
            return 0.0; // virtual state already outside the lattice
        }
        if min_log_bound(xi, &terms, tau) <= log_delta_i {
            continue; // current cap already feasible for this coordinate
        }
        // bisect for the largest feasible tau_i in [0, tau]
        let mut lo = 0.0;
        let mut hi = tau;
        while hi - lo > TAU_REL_TOL * hi {
            let mid = 0.5 * (lo + hi);
            if min_log_bound(xi, &terms, mid) <= log_delta_i {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        tau = lo;
        if tau == 0.0 {
            return 0.0;
        }
    }
    tau
}

/// One tau-leap update with propensities frozen at the entry state.
/// Returns the state increment, the exit flag, and the per-channel firing
/// counts (aligned with `active`).
pub fn tau_leap_update(
    nu: &[Vec<i64>],
    active: &[usize],
    propensities: &[f64],
    state: &[i64],
    tau: f64,
    stream: &mut Stream,
) -> (Vec<i64>, bool, Vec<u64>) {
    let d = state.len();
    let mut delta = vec![0i64; d];
    let mut counts = Vec::with_capacity(active.len());
    for &j in active {
        let k = stream.poisson(propensities[j] * tau);
        counts.push(k);
        if k > 0 {
            for (di, &nji) in delta.iter_mut().zip(&nu[j]) {
                *di += nji * k as i64;
            }
        }
    }
    let moved: Vec<i64> = state.iter().zip(&delta).map(|(&x, &dx)| x + dx).collect();
    let exited = !in_lattice(&moved);
    (delta, exited, counts)
}

/// Monte Carlo frequency of one-step exits at the Chernoff step size.
/// Validation oracle for the bound.
pub fn empirical_exit_rate(
    query: &ChernoffQuery,
    nu: &[Vec<i64>],
    active: &[usize],
    n_samples: usize,
    stream: &mut Stream,
) -> f64 {
    assert!(n_samples >= 1);
    let tau = chernoff_tau(query, nu, active);
    if tau == 0.0 {
        return 0.0;
    }
    let mut exits = 0usize;
    for _ in 0..n_samples {
        let (_, exited, _) =
            tau_leap_update(nu, active, query.propensities, query.state, tau, stream);
        if exited {
            exits += 1;
        }
    }
    exits as f64 / n_samples as f64
}
