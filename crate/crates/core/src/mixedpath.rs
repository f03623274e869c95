//! Single-level mixed-path simulation: each epoch picks a channel split,
//! fires the tau-leap subset with propensities frozen at the epoch start
//! while the exact subset evolves concurrently, and stops the path if the
//! leap drives any copy number negative. Epochs never straddle the level's
//! time grid, so coarse and fine paths share grid-aligned horizons.

use crate::exact::{mnrm_advance, reinit_clocks, MnrmClocks};
use crate::model::ReactionNetwork;
use crate::rng::Stream;
use crate::splitting::{one_step_mixing_rule, CostModel, SplitConfig, SplitForce};
use crate::tauleap::tau_leap_update;

/// Per-epoch record: which channels were leaped over [times[n], times[n+1]].
#[derive(Debug, Clone)]
pub struct StepTag {
    pub r_tl: Vec<usize>,
}

/// A simulated path skeleton: epoch boundary times and states, per-epoch
/// tau-leap membership, counters, and modeled work in cost-model units.
#[derive(Debug, Clone)]
pub struct Path {
    pub times: Vec<f64>,
    pub states: Vec<Vec<i64>>,
    pub tags: Vec<StepTag>,
    /// Completed (non-exiting) tau-leap epochs.
    pub n_tl: u64,
    /// Exact-channel firings.
    pub n_mnrm: u64,
    /// The path left the lattice during a leap and was stopped.
    pub exited: bool,
    pub work: f64,
}

impl Path {
    pub(crate) fn start(x0: Vec<i64>) -> Self {
        Path {
            times: vec![0.0],
            states: vec![x0],
            tags: Vec::new(),
            n_tl: 0,
            n_mnrm: 0,
            exited: false,
            work: 0.0,
        }
    }

    pub(crate) fn push(&mut self, t: f64, x: Vec<i64>, tag: StepTag) {
        self.times.push(t);
        self.states.push(x);
        self.tags.push(tag);
    }

    pub fn terminal(&self) -> &[i64] {
        self.states.last().unwrap()
    }

    /// g(X(T)) 1_A: zero when the path exited the lattice.
    pub fn observable_value(&self, network: &ReactionNetwork) -> f64 {
        if self.exited {
            0.0
        } else {
            network.observable.eval_state(self.terminal())
        }
    }
}

/// Frozen checkpoint pair bracketing a channel's target internal time.
#[derive(Debug, Clone, Copy)]
pub struct Bracket {
    pub lambda_lo: f64,
    pub count_lo: u64,
    pub lambda_hi: f64,
    pub count_hi: u64,
}

/// Running per-channel internal time Lambda_j (frozen-propensity recursion)
/// and firing count Y_j, with the checkpoint pair frozen as soon as Lambda_j
/// crosses its target. O(1) storage per channel regardless of path length.
#[derive(Debug, Clone)]
pub struct CvLedger {
    pub target: Vec<f64>,
    pub lambda: Vec<f64>,
    pub count: Vec<u64>,
    pub bracket: Vec<Option<Bracket>>,
}

impl CvLedger {
    pub fn new(target: Vec<f64>) -> Self {
        let n = target.len();
        CvLedger {
            target,
            lambda: vec![0.0; n],
            count: vec![0; n],
            bracket: vec![None; n],
        }
    }

    /// One epoch with per-channel internal-time increments `internal_dt` and
    /// firing counts `firings`. A leaped channel's increment is its frozen
    /// epoch-start propensity times the epoch length; an exact channel's is
    /// the integral of its true propensity over the epoch, as accumulated by
    /// its next-reaction clock.
    pub fn record_epoch(&mut self, internal_dt: &[f64], firings: &[u64]) {
        for j in 0..self.lambda.len() {
            let lambda_lo = self.lambda[j];
            let count_lo = self.count[j];
            self.lambda[j] += internal_dt[j];
            self.count[j] += firings[j];
            if self.bracket[j].is_none() && self.lambda[j] >= self.target[j] {
                self.bracket[j] = Some(Bracket {
                    lambda_lo,
                    count_lo,
                    lambda_hi: self.lambda[j],
                    count_hi: self.count[j],
                });
            }
        }
    }
}

/// Per-level simulation parameters.
#[derive(Debug, Clone)]
pub struct MixedConfig {
    /// Time-grid spacing Delta t of this level.
    pub dt: f64,
    /// One-step exit budget delta for the Chernoff step-size bound.
    pub delta: f64,
    pub cost: CostModel,
    pub split: SplitConfig,
}

/// Simulate one mixed path over [0, T].
pub fn simulate_mixed_path(
    network: &ReactionNetwork,
    cfg: &MixedConfig,
    stream: &mut Stream,
    ledger: Option<&mut CvLedger>,
) -> Path {
    let mut path = Path::start(network.x0.clone());
    run_mixed(network, cfg, 0.0, stream, ledger, &mut path);
    path
}

/// Continue a path from its current endpoint to the final time with fresh
/// clocks; used when one leg of a coupled pair stops and the other must run
/// on alone.
pub fn continue_mixed_path(
    network: &ReactionNetwork,
    cfg: &MixedConfig,
    path: &mut Path,
    stream: &mut Stream,
) {
    let t = *path.times.last().unwrap();
    run_mixed(network, cfg, t, stream, None, path);
}

fn run_mixed(
    network: &ReactionNetwork,
    cfg: &MixedConfig,
    t_start: f64,
    stream: &mut Stream,
    mut ledger: Option<&mut CvLedger>,
    path: &mut Path,
) {
    let t_final = network.final_time;
    let n_reactions = network.n_reactions();
    let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
    let all: Vec<usize> = (0..n_reactions).collect();
    let mut clocks = MnrmClocks::new(n_reactions);
    let mut prev_kappa: Option<usize> = None;
    let mut t = t_start;
    let mut x = path.terminal().to_vec();
    // index of the next grid point strictly ahead of t
    let mut idx = (t / cfg.dt).floor() as u64 + 1;
    let grid = |i: u64| (i as f64 * cfg.dt).min(t_final);
    while grid(idx) <= t {
        idx += 1;
    }
    while t < t_final {
        let next_grid = grid(idx);
        let gap = next_grid - t;
        let a = network.propensities(&x);
        let a0: f64 = a.iter().sum();
        if a0 <= 0.0 {
            // absorbing state: freeze to the final time
            if let Some(led) = ledger.as_deref_mut() {
                led.record_epoch(&vec![0.0; n_reactions], &vec![0; n_reactions]);
            }
            path.push(t_final, x, StepTag { r_tl: Vec::new() });
            return;
        }
        let split = one_step_mixing_rule(
            network, &x, t, cfg.delta, next_grid, prev_kappa, &cfg.cost, &cfg.split, stream,
        )
        .expect("nonzero activity checked above");
        prev_kappa = Some(split.kappa);
        let gate_closed =
            matches!(cfg.split.force, SplitForce::Auto) && cfg.cost.k1() / a0 >= gap;
        if !gate_closed && !matches!(cfg.split.force, SplitForce::AllExact) {
            path.work += cfg.cost.c_s;
        }
        // initialize stale clocks up front (same draw order as the lazy
        // re-init inside mnrm_advance) so the internal-time increment of each
        // exact channel can be read off as the change in its clock
        let active_exact: &[usize] = if split.r_tl.is_empty() {
            &all
        } else {
            &split.r_mnrm
        };
        for &j in active_exact {
            if !clocks.valid[j] {
                reinit_clocks(&mut clocks, &[j], stream);
            }
        }
        let r_before = clocks.r.clone();
        let (h, firings, exited) = if split.r_tl.is_empty() {
            // pure exact epoch; refresh the split after about one expected
            // firing, never past the grid point
            let h = (t + stream.exponential(a0)).min(next_grid);
            let (_, firings) = mnrm_advance(network, &mut x, t, h, &all, &mut clocks, stream);
            (h, firings, false)
        } else {
            let h = (t + split.tau_ch).min(next_grid);
            let tau = h - t;
            // exact channels run to the horizon; frozen tau-leap firings of
            // the leaped channels are applied there in one batch
            let (_, mut firings) =
                mnrm_advance(network, &mut x, t, h, &split.r_mnrm, &mut clocks, stream);
            let (delta_x, exited, counts) =
                tau_leap_update(&nus, &split.r_tl, &a, &x, tau, stream);
            path.work += cfg.cost.c_tl;
            for (&j, &k) in split.r_tl.iter().zip(&counts) {
                firings[j] = k;
                path.work += cfg.cost.poisson_cost(a[j] * tau);
                clocks.invalidate(j);
            }
            for (xi, dx) in x.iter_mut().zip(&delta_x) {
                *xi += dx;
            }
            (h, firings, exited)
        };
        let n_fired: u64 = split.r_mnrm.iter().map(|&j| firings[j]).sum();
        path.n_mnrm += n_fired;
        path.work += cfg.cost.c_mnrm * n_fired as f64;
        if let Some(led) = ledger.as_deref_mut() {
            // leaped channels spend frozen-propensity internal time; exact
            // channels spend the true integrated propensity from their clocks
            let mut internal: Vec<f64> = a.iter().map(|aj| aj * (h - t)).collect();
            for &j in active_exact {
                internal[j] = clocks.r[j] - r_before[j];
            }
            led.record_epoch(&internal, &firings);
        }
        if exited {
            path.exited = true;
            path.push(h, x, StepTag { r_tl: split.r_tl });
            return;
        }
        if !split.r_tl.is_empty() {
            path.n_tl += 1;
        }
        path.push(h, x.clone(), StepTag { r_tl: split.r_tl });
        t = h;
        if t >= next_grid {
            idx += 1;
        }
    }
}
