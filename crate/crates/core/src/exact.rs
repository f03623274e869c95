//! Exact path simulation: Gillespie's SSA (benchmark baseline) and the
//! modified next reaction method, with reaction-subset and stop-at-horizon
//! support for the mixed algorithm.

use crate::model::ReactionNetwork;
use crate::rng::Stream;

/// Per-reaction internal Poisson clocks. `r` is the integrated internal
/// time, `p` the internal time of the next firing.
#[derive(Debug, Clone)]
pub struct MnrmClocks {
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MnrmClocks {
    pub fn new(n_reactions: usize) -> Self {
        MnrmClocks {
            r: vec![0.0; n_reactions],
            p: vec![0.0; n_reactions],
            valid: vec![false; n_reactions],
        }
    }

    pub fn invalidate(&mut self, j: usize) {
        self.valid[j] = false;
    }
}

/// Reset clocks for `subset`: R_j <- 0, P_j <- Exp(1). Memorylessness keeps
/// the marginal law exact after a reset.
pub fn reinit_clocks(clocks: &mut MnrmClocks, subset: &[usize], stream: &mut Stream) {
    for &j in subset {
        clocks.r[j] = 0.0;
        clocks.p[j] = stream.exp1();
        clocks.valid[j] = true;
    }
}

/// Advance the exact channels in `active` from `t` to `horizon`, firing
/// reactions at their current propensities. The residual internal-time draw
/// that would cross the horizon is retained in the clocks. Returns the
/// reached time (always the horizon) and the number of firings per channel.
pub fn mnrm_advance(
    network: &ReactionNetwork,
    state: &mut Vec<i64>,
    mut t: f64,
    horizon: f64,
    active: &[usize],
    clocks: &mut MnrmClocks,
    stream: &mut Stream,
) -> (f64, Vec<u64>) {
    let mut firings = vec![0u64; network.n_reactions()];
    if active.is_empty() {
        return (horizon, firings);
    }
    for &j in active {
        if !clocks.valid[j] {
            reinit_clocks(clocks, &[j], stream);
        }
    }
    loop {
        let a = network.propensities(state);
        // time until each active channel fires, in physical time
        let mut best: Option<(f64, usize)> = None;
        for &j in active {
            let dt = if a[j] > 0.0 {
                (clocks.p[j] - clocks.r[j]) / a[j]
            } else {
                f64::INFINITY
            };
            if best.map_or(true, |(bdt, _)| dt < bdt) {
                best = Some((dt, j));
            }
        }
        let (dt, jmin) = best.unwrap();
        if t + dt > horizon {
            let gap = horizon - t;
            for &j in active {
                clocks.r[j] += a[j] * gap;
            }
            return (horizon, firings);
        }
        for &j in active {
            clocks.r[j] += a[j] * dt;
        }
        for (xi, &nji) in state.iter_mut().zip(&network.reactions[jmin].nu) {
            *xi += nji;
        }
        clocks.p[jmin] += stream.exp1();
        firings[jmin] += 1;
        t += dt;
    }
}

#[derive(Debug, Clone)]
pub struct SsaPath {
    pub terminal: Vec<i64>,
    pub n_steps: u64,
}

/// Gillespie's direct method over [0, T]. Total propensity zero freezes the
/// state to the final time.
pub fn ssa_path(network: &ReactionNetwork, x0: &[i64], t_final: f64, stream: &mut Stream) -> SsaPath {
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut n_steps = 0u64;
    loop {
        let a = network.propensities(&x);
        let a0: f64 = a.iter().sum();
        if a0 <= 0.0 {
            break;
        }
        let dt = stream.exponential(a0);
        if t + dt > t_final {
            break;
        }
        t += dt;
        let mut u = stream.uniform() * a0;
        let mut fired = a.len() - 1;
        for (j, &aj) in a.iter().enumerate() {
            if u < aj {
                fired = j;
                break;
            }
            u -= aj;
        }
        for (xi, &nji) in x.iter_mut().zip(&network.reactions[fired].nu) {
            *xi += nji;
        }
        n_steps += 1;
    }
    SsaPath {
        terminal: x,
        n_steps,
    }
}
