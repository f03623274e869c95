//! Global-error machinery: dual weights along a path skeleton, the
//! leap-induced discretization-error estimator, the lattice-exit bound, and
//! the statistical half-width of the multilevel estimator.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::mixedpath::Path;
use crate::model::ReactionNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualMode {
    Forward,
    Backward,
}

/// Adjoint weights phi_n of the linearized dynamics, one d-vector per path
/// time point; phi at the final time is the observable gradient there.
#[derive(Debug, Clone)]
pub struct DualWeights {
    pub phi: Vec<Vec<f64>>,
    pub mode: DualMode,
}

#[derive(Debug, thiserror::Error)]
pub enum DualError {
    #[error("backward dual step {step}: linear system is singular")]
    Singular { step: usize },
    #[error("dual weights are undefined on a path that left the lattice")]
    ExitedPath,
}

/// d x d drift linearization B_ik = sum_j (da_j/dx_i) nu_jk at a state.
fn drift_jacobian_t(network: &ReactionNetwork, x: &[i64]) -> Vec<Vec<f64>> {
    let d = network.dim();
    let jac = network.propensity_jacobian(x); // J rows of length d
    let mut b = vec![vec![0.0; d]; d];
    for (j, r) in network.reactions.iter().enumerate() {
        for i in 0..d {
            let da = jac[j][i];
            if da == 0.0 {
                continue;
            }
            for (k, &njk) in r.nu.iter().enumerate() {
                b[i][k] += da * njk as f64;
            }
        }
    }
    b
}

fn mat_vec(b: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    b.iter().map(|row| row.iter().zip(v).map(|(a, x)| a * x).sum()).collect()
}

/// Solve (Id - dt B) y = rhs by Gaussian elimination with partial pivoting.
fn solve_backward(b: &[Vec<f64>], dt: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let d = rhs.len();
    let mut m: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|k| (if i == k { 1.0 } else { 0.0 }) - dt * b[i][k])
                .collect()
        })
        .collect();
    let mut y = rhs.to_vec();
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&a, &bb| m[a][col].abs().partial_cmp(&m[bb][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        y.swap(col, piv);
        for row in col + 1..d {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..d {
                m[row][k] -= f * m[col][k];
            }
            y[row] -= f * y[col];
        }
    }
    for col in (0..d).rev() {
        let mut s = y[col];
        for k in col + 1..d {
            s -= m[col][k] * y[k];
        }
        y[col] = s / m[col][col];
    }
    Some(y)
}

/// Dual weights along a path: phi_N = grad g at the terminal state, then
/// backwards in path index phi_n = (Id + dt_n B_n^T...) phi_{n+1} (forward
/// Euler linearization) or the backward-Euler solve, with the drift
/// linearization evaluated at the left state of each interval.
pub fn dual_weights(
    path: &Path,
    network: &ReactionNetwork,
    mode: DualMode,
) -> Result<DualWeights, DualError> {
    if path.exited {
        return Err(DualError::ExitedPath);
    }
    let n = path.times.len();
    let term: Vec<f64> = path.terminal().iter().map(|&v| v as f64).collect();
    let mut phi = vec![Vec::new(); n];
    phi[n - 1] = network.observable.gradient(&term);
    for n_idx in (0..n - 1).rev() {
        let dt = path.times[n_idx + 1] - path.times[n_idx];
        let b = drift_jacobian_t(network, &path.states[n_idx]);
        phi[n_idx] = match mode {
            DualMode::Forward => {
                let bv = mat_vec(&b, &phi[n_idx + 1]);
                phi[n_idx + 1]
                    .iter()
                    .zip(&bv)
                    .map(|(p, q)| p + dt * q)
                    .collect()
            }
            DualMode::Backward => solve_backward(&b, dt, &phi[n_idx + 1])
                .ok_or(DualError::Singular { step: n_idx })?,
        };
    }
    Ok(DualWeights { phi, mode })
}

/// Per-path leap-induced discretization error: over every interval whose
/// leaped channel set is nonempty, (dt_n/2) phi_{n+1}^T sum_j nu_j (a_j at
/// the right state - a_j at the left state). Exited paths contribute zero.
pub fn path_discretization_error(
    path: &Path,
    duals: &DualWeights,
    network: &ReactionNetwork,
) -> f64 {
    if path.exited {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 0..path.tags.len() {
        let r_tl = &path.tags[n].r_tl;
        if r_tl.is_empty() {
            continue;
        }
        let dt = path.times[n + 1] - path.times[n];
        let a_cur = network.propensities(&path.states[n]);
        let a_next = network.propensities(&path.states[n + 1]);
        let phi = &duals.phi[n + 1];
        let mut s = 0.0;
        for &j in r_tl {
            let da = a_next[j] - a_cur[j];
            if da == 0.0 {
                continue;
            }
            let nu_phi: f64 = network.reactions[j]
                .nu
                .iter()
                .zip(phi)
                .map(|(&nji, p)| nji as f64 * p)
                .sum();
            s += da * nu_phi;
        }
        total += 0.5 * dt * s;
    }
    total
}

/// Sample average and standard error of the per-path discretization error
/// over a batch of paths.
pub fn discretization_error_estimate(
    paths: &[Path],
    network: &ReactionNetwork,
    mode: DualMode,
) -> (f64, f64) {
    let vals: Vec<f64> = paths
        .iter()
        .map(|p| {
            if p.exited {
                0.0
            } else {
                let duals = dual_weights(p, network, mode).expect("non-exited path");
                path_discretization_error(p, &duals, network)
            }
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Bound on the lattice-exit contribution: g_scale times the second-order
/// expansion of 1 - (1-delta)^{N_TL} in its moments, clamped to [0, 1].
pub fn exit_error_bound(delta: f64, n_tl_mean: f64, n_tl_second_moment: f64, g_scale: f64) -> f64 {
    let first = delta * n_tl_mean;
    let correction = 0.5 * delta * delta * (n_tl_second_moment - n_tl_mean);
    // the expansion is only valid while the correction is subdominant; past
    // that point fall back to the first-order union bound
    let p = if correction < first {
        first - correction
    } else {
        first
    };
    g_scale * p.clamp(0.0, 1.0)
}

#[derive(Debug, thiserror::Error)]
#[error("level variance needs at least 2 samples, got {0}")]
pub struct TooFewSamples(pub usize);

/// Unbiased sample variance of a level's difference samples.
pub fn level_variance(samples: &[f64]) -> Result<f64, TooFewSamples> {
    if samples.len() < 2 {
        return Err(TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    Ok(samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Two-sided normal quantile for a confidence level.
pub fn normal_quantile(confidence: f64) -> f64 {
    assert!((0.0..1.0).contains(&confidence) && confidence > 0.0);
    Normal::new(0.0, 1.0)
        .unwrap()
        .inverse_cdf(0.5 * (1.0 + confidence))
}

/// C_A(confidence) * sqrt(sum_l V_l / M_l).
pub fn statistical_half_width(variances: &[f64], sample_counts: &[u64], confidence: f64) -> f64 {
    assert_eq!(variances.len(), sample_counts.len());
    let s: f64 = variances
        .iter()
        .zip(sample_counts)
        .map(|(v, &m)| v / m as f64)
        .sum();
    normal_quantile(confidence) * s.sqrt()
}

/// Error decomposition attached to an estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub e_exit: f64,
    pub e_disc: f64,
    pub e_disc_se: f64,
    pub e_stat: f64,
    pub total: f64,
}

impl ErrorReport {
    pub fn new(e_exit: f64, e_disc: f64, e_disc_se: f64, e_stat: f64) -> Self {
        ErrorReport {
            e_exit,
            e_disc,
            e_disc_se,
            e_stat,
            total: e_exit + e_disc.abs() + e_stat,
        }
    }
}
