//! Adaptive partition of the reaction channels into a tau-leap subset and an
//! exact subset: exit penalties, penalized activity ordering, the per-step
//! work model, the cost-based local search, the Pareto rule, and the one-step
//! mixing rule that gates the whole machinery.

use statrs::function::gamma::gamma_lr;

use crate::model::ReactionNetwork;
use crate::rng::Stream;
use crate::tauleap::{chernoff_tau, ChernoffQuery};

/// Currently selected partition. `r_tl` is the first `kappa` channels of the
/// penalized-activity permutation sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub r_tl: Vec<usize>,
    pub r_mnrm: Vec<usize>,
    pub kappa: usize,
    /// Chernoff step size computed for `r_tl` (horizon gap if empty).
    pub tau_ch: f64,
}

impl Split {
    pub fn pure_exact(n_reactions: usize, kappa: usize, horizon_gap: f64) -> Self {
        Split {
            r_tl: Vec::new(),
            r_mnrm: (0..n_reactions).collect(),
            kappa,
            tau_ch: horizon_gap,
        }
    }
}

/// Calibrated work-model constants, in seconds (or any fixed unit).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostModel {
    /// Work of one exact (MNRM) step.
    pub c_mnrm: f64,
    /// Bookkeeping work of one tau-leap epoch.
    pub c_tl: f64,
    /// Work of computing a split.
    pub c_s: f64,
    /// Work of one SSA step.
    pub c_ssa: f64,
    /// Poisson-variate cost: b1 + b2 ln(lambda) above the regime switch,
    /// b3 + b4 lambda below it.
    pub b: [f64; 4],
}

pub const POISSON_REGIME_SWITCH: f64 = 15.0;

impl CostModel {
    pub fn k1(&self) -> f64 {
        self.c_s / self.c_mnrm
    }

    pub fn poisson_cost(&self, lambda: f64) -> f64 {
        if lambda > POISSON_REGIME_SWITCH {
            self.b[0] + self.b[1] * lambda.ln()
        } else {
            self.b[2] + self.b[3] * lambda
        }
    }

    /// Plausible relative costs for tests and dry runs; Phase I calibration
    /// replaces these with measured values.
    pub fn default_synthetic() -> Self {
        CostModel {
            c_mnrm: 1.0,
            c_tl: 0.3,
            c_s: 3.0,
            c_ssa: 0.8,
            b: [2.0, 0.3, 0.8, 0.12],
        }
    }
}

/// Behavioral knobs for the splitting rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitForce {
    Auto,
    AllExact,
    AllTauLeap,
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub force: SplitForce,
    /// Probability of re-running the full enumeration to escape local minima.
    pub reenum_prob: f64,
    /// Use the Pareto rule instead of the cost-based search.
    pub pareto: Option<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            force: SplitForce::Auto,
            reenum_prob: 0.01,
            pareto: None,
        }
    }
}

/// Exit penalties theta_j: the probability that channel j alone drives some
/// consumed species negative within dt, via the Poisson upper tail.
pub fn exit_penalties(network: &ReactionNetwork, state: &[i64], dt: f64) -> Vec<f64> {
    let a = network.propensities(state);
    network
        .reactions
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let threshold = r
                .nu
                .iter()
                .enumerate()
                .filter(|&(_, &nji)| nji < 0)
                .map(|(i, &nji)| -(state[i] as f64) / nji as f64)
                .fold(f64::INFINITY, f64::min);
            if threshold.is_infinite() {
                return 0.0; // no negative stoichiometry
            }
            let lambda = a[j] * dt;
            if lambda <= 0.0 {
                return 0.0;
            }
            // P(N > q) = P(N >= floor(q)+1) = gamma_lr(floor(q)+1, lambda)
            gamma_lr(threshold.floor() + 1.0, lambda)
        })
        .collect()
}

/// Permutation sorting penalized activities (1-theta_j) a_j descending,
/// ties broken by lower reaction index.
pub fn penalized_order(propensities: &[f64], theta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..propensities.len()).collect();
    idx.sort_by(|&i, &j| {
        let ai = (1.0 - theta[i]) * propensities[i];
        let aj = (1.0 - theta[j]) * propensities[j];
        aj.partial_cmp(&ai).unwrap().then(i.cmp(&j))
    });
    idx
}

/// Expected work of the tau-leap side of a split over [t, H].
pub fn work_tl(
    r_tl: &[usize],
    propensities: &[f64],
    t: f64,
    h: f64,
    tau_ch: f64,
    cost: &CostModel,
) -> f64 {
    let gap = h - t;
    let steps = gap / tau_ch.min(gap);
    let per_step: f64 = cost.c_s
        + r_tl
            .iter()
            .map(|&j| cost.poisson_cost(propensities[j] * tau_ch))
            .sum::<f64>();
    steps * per_step
}

/// Expected work of the exact side of a split over [t, H]; the expected exact
/// step is 1/(total subset propensity).
pub fn work_mnrm(r_mnrm: &[usize], propensities: &[f64], t: f64, h: f64, cost: &CostModel) -> f64 {
    let total: f64 = r_mnrm.iter().map(|&j| propensities[j]).sum();
    if total <= 0.0 {
        return cost.c_mnrm; // single idle traversal
    }
    let gap = h - t;
    let tau_mnrm = 1.0 / total;
    (gap / tau_mnrm.min(gap)) * cost.c_mnrm
}

#[derive(Debug, thiserror::Error)]
#[error("total propensity is zero; caller should freeze the path to the horizon")]
pub struct ZeroActivity;

/// Length of the next decision window: the all-channel Chernoff step, capped
/// at the remaining grid cell. Exit penalties are measured over this span.
pub fn penalty_window(
    nus: &[Vec<i64>],
    state: &[i64],
    propensities: &[f64],
    delta: f64,
    gap: f64,
) -> f64 {
    let all: Vec<usize> = (0..propensities.len()).collect();
    let q = ChernoffQuery {
        state,
        propensities,
        delta,
        horizon_gap: gap,
    };
    let tau = chernoff_tau(&q, nus, &all);
    if tau > 0.0 {
        tau.min(gap)
    } else {
        gap
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_prefix(
    nus: &[Vec<i64>],
    state: &[i64],
    propensities: &[f64],
    sigma: &[usize],
    kappa: usize,
    t: f64,
    h: f64,
    delta: f64,
    cost: &CostModel,
) -> (f64, Split) {
    let r_tl: Vec<usize> = sigma[..kappa].to_vec();
    let r_mnrm: Vec<usize> = sigma[kappa..].to_vec();
    let gap = h - t;
    let tau = if r_tl.is_empty() {
        gap
    } else {
        let q = ChernoffQuery {
            state,
            propensities,
            delta,
            horizon_gap: gap,
        };
        chernoff_tau(&q, nus, &r_tl)
    };
    let work = if tau <= 0.0 {
        f64::INFINITY // tau-leap infeasible at this state
    } else {
        work_tl(&r_tl, propensities, t, h, tau, cost)
            + work_mnrm(&r_mnrm, propensities, t, h, cost)
    };
    (
        work,
        Split {
            r_tl,
            r_mnrm,
            kappa,
            tau_ch: tau,
        },
    )
}

/// Cost-based split selection. On the first call (no previous kappa) all
/// J+1 prefixes of the penalized order are enumerated; afterwards a local
/// search over {kappa-1, kappa, kappa+1} is used, with an occasional full
/// re-enumeration to escape local minima.
#[allow(clippy::too_many_arguments)]
pub fn best_split(
    network: &ReactionNetwork,
    state: &[i64],
    t: f64,
    h: f64,
    delta: f64,
    cost: &CostModel,
    prev_kappa: Option<usize>,
    cfg: &SplitConfig,
    stream: &mut Stream,
) -> Result<Split, ZeroActivity> {
    let a = network.propensities(state);
    if a.iter().sum::<f64>() <= 0.0 {
        return Err(ZeroActivity);
    }
    let j = network.n_reactions();
    let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
    // the exit penalties are measured over the next decision window, which
    // is set by the global Chernoff step, not the full grid cell; a channel
    // that is perfectly safe over one leap step must not be demoted just
    // because the grid cell is long
    let theta = exit_penalties(network, state, penalty_window(&nus, state, &a, delta, h - t));
    let sigma = penalized_order(&a, &theta);
    let full = match prev_kappa {
        None => true,
        Some(_) => cfg.reenum_prob > 0.0 && stream.uniform() < cfg.reenum_prob,
    };
    let candidates: Vec<usize> = if full {
        (0..=j).collect()
    } else {
        // neighbors of the previous split plus the two endpoint anchors;
        // without the anchors the search can sit in a local minimum (e.g. a
        // stiff reversible pair whose stable all-leap split is far from the
        // previous kappa)
        let k = prev_kappa.unwrap();
        let mut c = vec![0, k, j];
        if k > 0 {
            c.push(k - 1);
        }
        if k < j {
            c.push(k + 1);
        }
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut best: Option<(f64, Split)> = None;
    for kappa in candidates {
        let (work, split) = evaluate_prefix(&nus, state, &a, &sigma, kappa, t, h, delta, cost);
        if best.as_ref().map_or(true, |(w, _)| work < *w) {
            best = Some((work, split));
        }
    }
    let (work, split) = best.unwrap();
    if work.is_infinite() {
        // local-search candidates all infeasible; the empty prefix always is
        return Ok(evaluate_prefix(&nus, state, &a, &sigma, 0, t, h, delta, cost).1);
    }
    Ok(split)
}

/// Pareto rule: tau-leap the shortest sigma-prefix covering at least a
/// `threshold` share of the penalized activity.
pub fn pareto_split(
    network: &ReactionNetwork,
    state: &[i64],
    dt: f64,
    threshold: f64,
) -> Split {
    assert!((0.0..=1.0).contains(&threshold));
    let a = network.propensities(state);
    let theta = exit_penalties(network, state, dt);
    let sigma = penalized_order(&a, &theta);
    let tilde: Vec<f64> = sigma.iter().map(|&j| (1.0 - theta[j]) * a[j]).collect();
    let total: f64 = tilde.iter().sum();
    let mut kappa = 0;
    if total > 0.0 && threshold > 0.0 {
        let mut acc = 0.0;
        for (k, &v) in tilde.iter().enumerate() {
            if v <= 0.0 {
                break; // never include zero-activity channels
            }
            acc += v;
            kappa = k + 1;
            if acc >= threshold * total * (1.0 - 1e-12) {
                break;
            }
        }
    }
    Split {
        r_tl: sigma[..kappa].to_vec(),
        r_mnrm: sigma[kappa..].to_vec(),
        kappa,
        tau_ch: dt,
    }
}

/// The one-step mixing rule: skip the split entirely when the expected exact
/// work to the next grid point is below the cost of computing a split.
#[allow(clippy::too_many_arguments)]
pub fn one_step_mixing_rule(
    network: &ReactionNetwork,
    state: &[i64],
    t: f64,
    delta: f64,
    next_grid_point: f64,
    prev_kappa: Option<usize>,
    cost: &CostModel,
    cfg: &SplitConfig,
    stream: &mut Stream,
) -> Result<Split, ZeroActivity> {
    let a = network.propensities(state);
    let a0: f64 = a.iter().sum();
    if a0 <= 0.0 {
        return Err(ZeroActivity);
    }
    let j = network.n_reactions();
    let gap = next_grid_point - t;
    match cfg.force {
        SplitForce::AllExact => {
            return Ok(Split::pure_exact(j, prev_kappa.unwrap_or(0), gap));
        }
        SplitForce::AllTauLeap => {
            let all: Vec<usize> = (0..j).collect();
            let q = ChernoffQuery {
                state,
                propensities: &a,
                delta,
                horizon_gap: gap,
            };
            let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
            let tau = chernoff_tau(&q, &nus, &all);
            return Ok(Split {
                r_tl: all,
                r_mnrm: Vec::new(),
                kappa: j,
                tau_ch: tau,
            });
        }
        SplitForce::Auto => {}
    }
    if cost.k1() / a0 >= gap {
        return Ok(Split::pure_exact(j, prev_kappa.unwrap_or(0), gap));
    }
    if let Some(threshold) = cfg.pareto {
        let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
        let window = penalty_window(&nus, state, &a, delta, gap);
        let mut s = pareto_split(network, state, window, threshold);
        if !s.r_tl.is_empty() {
            let q = ChernoffQuery {
                state,
                propensities: &a,
                delta,
                horizon_gap: gap,
            };
            s.tau_ch = chernoff_tau(&q, &nus, &s.r_tl);
            if s.tau_ch <= 0.0 {
                return Ok(Split::pure_exact(j, s.kappa, gap));
            }
        }
        return Ok(s);
    }
    best_split(network, state, t, next_grid_point, delta, cost, prev_kappa, cfg, stream)
}
