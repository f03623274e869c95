//! Coupled simulation of two mixed paths on nested time grids with shared
//! randomness, for multilevel difference estimators. Each reaction channel
//! is decomposed into three unit-Poisson streams with rates
//! A1 = min(coarse, fine), A2 = coarse - A1, A3 = fine - A1; stream 1 fires
//! both levels, stream 2 only the coarse one, stream 3 only the fine one.

use crate::mixedpath::{continue_mixed_path, MixedConfig, Path, StepTag};
use crate::model::{in_lattice, ReactionNetwork};
use crate::rng::Stream;
use crate::splitting::one_step_mixing_rule;
use crate::tauleap::{chernoff_tau, ChernoffQuery};

/// One level's current epoch: the horizon, the channel split chosen at the
/// epoch start, and the propensities frozen there for the leaped channels.
#[derive(Debug, Clone)]
pub struct Horizon {
    pub h: f64,
    pub r_tl: Vec<usize>,
    pub r_mnrm: Vec<usize>,
    pub frozen: Vec<f64>,
    pub kappa: usize,
}

/// Decide the next epoch horizon for one level (the split rule plus the
/// horizon arithmetic). With a nonempty leap set the horizon is capped at
/// the level's next grid point; a pure exact epoch runs for about one
/// expected firing and may straddle grid points. Zero total propensity
/// freezes the level to the grid point.
#[allow(clippy::too_many_arguments)]
pub fn next_time_horizon(
    network: &ReactionNetwork,
    state: &[i64],
    t: f64,
    next_grid: f64,
    cfg: &MixedConfig,
    prev_kappa: Option<usize>,
    stream: &mut Stream,
) -> Horizon {
    let t_final = network.final_time;
    let frozen = network.propensities(state);
    let a0: f64 = frozen.iter().sum();
    if a0 <= 0.0 {
        return Horizon {
            h: next_grid.min(t_final),
            r_tl: Vec::new(),
            r_mnrm: Vec::new(),
            frozen,
            kappa: prev_kappa.unwrap_or(0),
        };
    }
    let split = one_step_mixing_rule(
        network, state, t, cfg.delta, next_grid, prev_kappa, &cfg.cost, &cfg.split, stream,
    )
    .expect("nonzero activity checked above");
    let h = if split.r_tl.is_empty() {
        (t + stream.exponential(a0)).min(t_final)
    } else {
        (t + split.tau_ch).min(next_grid)
    };
    Horizon {
        h,
        r_tl: split.r_tl,
        r_mnrm: split.r_mnrm,
        frozen,
        kappa: split.kappa,
    }
}

/// Internal clocks of the three coupling streams of every channel.
#[derive(Debug, Clone)]
pub struct CoupledClocks {
    pub r: Vec<[f64; 3]>,
    pub p: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl CoupledClocks {
    pub fn new(n_reactions: usize) -> Self {
        CoupledClocks {
            r: vec![[0.0; 3]; n_reactions],
            p: vec![[0.0; 3]; n_reactions],
            valid: vec![false; n_reactions],
        }
    }

    pub fn reinit(&mut self, j: usize, stream: &mut Stream) {
        self.r[j] = [0.0; 3];
        self.p[j] = [stream.exp1(), stream.exp1(), stream.exp1()];
        self.valid[j] = true;
    }
}

/// Outcome of the both-levels-leap block over one epoch interval.
#[derive(Debug, Clone)]
pub struct B1Outcome {
    pub dx_coarse: Vec<i64>,
    pub dx_fine: Vec<i64>,
    pub substeps: u64,
    pub work: f64,
}

/// Both-levels-leap block: correlated Poisson increments over [0, gap] with
/// rates frozen per level. Sub-step lengths are re-derived from the running
/// virtual states so the one-step exit bound keeps holding along the way;
/// once a virtual state has left the lattice the remaining gap is taken in
/// one step (the exit is caught at the interval end).
#[allow(clippy::too_many_arguments)]
pub fn block_b1_update(
    network: &ReactionNetwork,
    b1: &[usize],
    coarse_state: &[i64],
    fine_state: &[i64],
    frozen_coarse: &[f64],
    frozen_fine: &[f64],
    gap: f64,
    cfg_coarse: &MixedConfig,
    cfg_fine: &MixedConfig,
    stream: &mut Stream,
) -> B1Outcome {
    let d = network.dim();
    let mut out = B1Outcome {
        dx_coarse: vec![0; d],
        dx_fine: vec![0; d],
        substeps: 0,
        work: 0.0,
    };
    if b1.is_empty() || gap <= 0.0 {
        return out;
    }
    let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
    let mut virt_c: Vec<i64> = coarse_state.to_vec();
    let mut virt_f: Vec<i64> = fine_state.to_vec();
    let mut remaining = gap;
    while remaining > 0.0 {
        let tau_c = chernoff_tau(
            &ChernoffQuery {
                state: &virt_c,
                propensities: frozen_coarse,
                delta: cfg_coarse.delta,
                horizon_gap: remaining,
            },
            &nus,
            b1,
        );
        let tau_f = chernoff_tau(
            &ChernoffQuery {
                state: &virt_f,
                propensities: frozen_fine,
                delta: cfg_fine.delta,
                horizon_gap: remaining,
            },
            &nus,
            b1,
        );
        let mut step = remaining.min(tau_c).min(tau_f);
        // step <= 0: a virtual state already left the lattice. A collapsed
        // step (a virtual state pinned at the boundary forces tau ~ delta/a)
        // would need ~remaining/step substeps to cross the gap while the
        // state exits almost surely under the frozen rates anyway; in both
        // cases take the rest of the gap at once and let the interval-end
        // check catch the exit.
        if step <= 0.0 || step < remaining / 16384.0 {
            step = remaining;
        }
        for &j in b1 {
            let a1 = frozen_coarse[j].min(frozen_fine[j]);
            let a2 = frozen_coarse[j] - a1;
            let a3 = frozen_fine[j] - a1;
            let l1 = stream.poisson(a1 * step);
            let l2 = stream.poisson(a2 * step);
            let l3 = stream.poisson(a3 * step);
            let kc = (l1 + l2) as i64;
            let kf = (l1 + l3) as i64;
            for (i, &nji) in nus[j].iter().enumerate() {
                out.dx_coarse[i] += nji * kc;
                out.dx_fine[i] += nji * kf;
                virt_c[i] += nji * kc;
                virt_f[i] += nji * kf;
            }
            out.work += cfg_coarse.cost.poisson_cost(a1 * step)
                + cfg_coarse.cost.poisson_cost(a2 * step)
                + cfg_coarse.cost.poisson_cost(a3 * step);
        }
        out.work += cfg_coarse.cost.c_tl;
        out.substeps += 1;
        remaining -= step;
    }
    out
}

/// One event of the coupled exact race over the channels in `channels` with
/// stream-rate triples `triples`. Returns the new time and the fired
/// (channel, stream) if a firing happened before the horizon; otherwise all
/// clocks are advanced to the horizon.
pub fn coupled_exact_update(
    t: f64,
    horizon: f64,
    channels: &[usize],
    triples: &[[f64; 3]],
    clocks: &mut CoupledClocks,
    stream: &mut Stream,
) -> (f64, Option<(usize, usize)>) {
    let mut best: Option<(f64, usize, usize)> = None;
    for (c, &j) in channels.iter().enumerate() {
        for i in 0..3 {
            let a = triples[c][i];
            let dt = if a > 0.0 {
                (clocks.p[j][i] - clocks.r[j][i]) / a
            } else {
                f64::INFINITY
            };
            if best.map_or(true, |(bdt, _, _)| dt < bdt) {
                best = Some((dt, j, i));
            }
        }
    }
    let cross = match best {
        Some((dt, j, i)) if t + dt <= horizon => Some((dt, j, i)),
        _ => None,
    };
    match cross {
        None => {
            let gap = horizon - t;
            for (c, &j) in channels.iter().enumerate() {
                for i in 0..3 {
                    clocks.r[j][i] += triples[c][i] * gap;
                }
            }
            (horizon, None)
        }
        Some((dt, jf, sf)) => {
            for (c, &j) in channels.iter().enumerate() {
                for i in 0..3 {
                    clocks.r[j][i] += triples[c][i] * dt;
                }
            }
            clocks.p[jf][sf] += stream.exp1();
            (t + dt, Some((jf, sf)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    BothLeap,
    CoarseLeapFineExact,
    FineLeapCoarseExact,
    BothExact,
}

/// A coupled pair of paths and the modeled work of producing both.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    pub coarse: Path,
    pub fine: Path,
    pub work: f64,
}

/// Simulate one coupled (coarse, fine) pair over [0, T]. The fine grid must
/// refine the coarse one. If one leg leaves the lattice it is stopped and
/// flagged while the other continues alone to the final time, so each leg
/// keeps the single-level marginal law.
pub fn simulate_coupled_paths(
    network: &ReactionNetwork,
    cfg_coarse: &MixedConfig,
    cfg_fine: &MixedConfig,
    stream: &mut Stream,
) -> CoupledPair {
    let ratio = cfg_coarse.dt / cfg_fine.dt;
    assert!(
        (ratio - ratio.round()).abs() < 1e-9 && ratio >= 1.0,
        "fine grid must refine the coarse grid"
    );
    let t_final = network.final_time;
    let n_reactions = network.n_reactions();
    let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
    let mut coarse = Path::start(network.x0.clone());
    let mut fine = Path::start(network.x0.clone());
    let mut work = 0.0;
    let mut xc = network.x0.clone();
    let mut xf = network.x0.clone();
    let mut clocks = CoupledClocks::new(n_reactions);
    let mut prev_block: Vec<Option<Block>> = vec![None; n_reactions];
    let mut t = 0.0;
    let mut idx_c: u64 = 1;
    let mut idx_f: u64 = 1;
    let grid_c = |i: u64| (i as f64 * cfg_coarse.dt).min(t_final);
    let grid_f = |i: u64| (i as f64 * cfg_fine.dt).min(t_final);
    let mut kappa_c: Option<usize> = None;
    let mut kappa_f: Option<usize> = None;
    let mut hor_c = next_time_horizon(network, &xc, t, grid_c(idx_c), cfg_coarse, kappa_c, stream);
    let mut hor_f = next_time_horizon(network, &xf, t, grid_f(idx_f), cfg_fine, kappa_f, stream);
    work += 2.0 * cfg_coarse.cost.c_s;
    while t < t_final {
        let h = hor_c.h.min(hor_f.h);
        // block membership of every channel over [t, h]
        let block: Vec<Block> = (0..n_reactions)
            .map(|j| {
                match (hor_c.r_tl.contains(&j), hor_f.r_tl.contains(&j)) {
                    (true, true) => Block::BothLeap,
                    (true, false) => Block::CoarseLeapFineExact,
                    (false, true) => Block::FineLeapCoarseExact,
                    (false, false) => Block::BothExact,
                }
            })
            .collect();
        for j in 0..n_reactions {
            if prev_block[j] != Some(block[j]) {
                clocks.reinit(j, stream);
                prev_block[j] = Some(block[j]);
            }
        }
        let b1: Vec<usize> = (0..n_reactions)
            .filter(|&j| block[j] == Block::BothLeap)
            .collect();
        let exact_channels: Vec<usize> = (0..n_reactions)
            .filter(|&j| block[j] != Block::BothLeap)
            .collect();
        let b1out = block_b1_update(
            network, &b1, &xc, &xf, &hor_c.frozen, &hor_f.frozen, h - t, cfg_coarse, cfg_fine,
            stream,
        );
        if !hor_c.r_tl.is_empty() {
            coarse.n_tl += b1out.substeps.max(1);
        }
        if !hor_f.r_tl.is_empty() {
            fine.n_tl += b1out.substeps.max(1);
        }
        work += b1out.work;
        // event-by-event race over the remaining blocks; leap-side firings
        // are buffered and applied at the interval end like any leap
        let mut buf_c = vec![0i64; network.dim()];
        let mut buf_f = vec![0i64; network.dim()];
        let mut t_loc = t;
        loop {
            let ac = network.propensities(&xc);
            let af = network.propensities(&xf);
            let triples: Vec<[f64; 3]> = exact_channels
                .iter()
                .map(|&j| {
                    let (dc, df) = match block[j] {
                        Block::CoarseLeapFineExact => (hor_c.frozen[j], af[j]),
                        Block::FineLeapCoarseExact => (ac[j], hor_f.frozen[j]),
                        Block::BothExact => (ac[j], af[j]),
                        Block::BothLeap => unreachable!(),
                    };
                    let a1 = dc.min(df);
                    [a1, dc - a1, df - a1]
                })
                .collect();
            let (t_new, fired) =
                coupled_exact_update(t_loc, h, &exact_channels, &triples, &mut clocks, stream);
            t_loc = t_new;
            let (j, s) = match fired {
                None => break,
                Some(f) => f,
            };
            // stream 0 fires both levels, 1 only coarse, 2 only fine
            if s == 0 || s == 1 {
                if block[j] == Block::CoarseLeapFineExact {
                    for (bi, &nji) in buf_c.iter_mut().zip(&nus[j]) {
                        *bi += nji;
                    }
                } else {
                    for (xi, &nji) in xc.iter_mut().zip(&nus[j]) {
                        *xi += nji;
                    }
                    coarse.n_mnrm += 1;
                    work += cfg_coarse.cost.c_mnrm;
                }
            }
            if s == 0 || s == 2 {
                if block[j] == Block::FineLeapCoarseExact {
                    for (bi, &nji) in buf_f.iter_mut().zip(&nus[j]) {
                        *bi += nji;
                    }
                } else {
                    for (xi, &nji) in xf.iter_mut().zip(&nus[j]) {
                        *xi += nji;
                    }
                    fine.n_mnrm += 1;
                    work += cfg_fine.cost.c_mnrm;
                }
            }
        }
        for i in 0..network.dim() {
            xc[i] += buf_c[i] + b1out.dx_coarse[i];
            xf[i] += buf_f[i] + b1out.dx_fine[i];
        }
        t = h;
        coarse.push(
            t,
            xc.clone(),
            StepTag {
                r_tl: hor_c.r_tl.clone(),
            },
        );
        fine.push(
            t,
            xf.clone(),
            StepTag {
                r_tl: hor_f.r_tl.clone(),
            },
        );
        coarse.exited = !in_lattice(&xc);
        fine.exited = !in_lattice(&xf);
        if coarse.exited || fine.exited {
            if !fine.exited && t < t_final {
                continue_mixed_path(network, cfg_fine, &mut fine, stream);
                work += fine.work;
            }
            if !coarse.exited && t < t_final {
                continue_mixed_path(network, cfg_coarse, &mut coarse, stream);
                work += coarse.work;
            }
            break;
        }
        if t >= t_final {
            break;
        }
        if t >= hor_c.h {
            while grid_c(idx_c) <= t {
                idx_c += 1;
            }
            kappa_c = Some(hor_c.kappa);
            hor_c =
                next_time_horizon(network, &xc, t, grid_c(idx_c), cfg_coarse, kappa_c, stream);
            work += cfg_coarse.cost.c_s;
        }
        if t >= hor_f.h {
            while grid_f(idx_f) <= t {
                idx_f += 1;
            }
            kappa_f = Some(hor_f.kappa);
            hor_f = next_time_horizon(network, &xf, t, grid_f(idx_f), cfg_fine, kappa_f, stream);
            work += cfg_fine.cost.c_s;
        }
    }
    CoupledPair { coarse, fine, work }
}
