//! Three-phase multilevel estimation pipeline: wall-clock cost calibration,
//! work-optimal planning from pilot runs, and the final estimator with its
//! error decomposition.

use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::coupling::simulate_coupled_paths;
use crate::cv::{cv_pair_sample, mean_field_solve, uniform_mesh, MeanFieldSolution};
use crate::error::{
    discretization_error_estimate, dual_weights, exit_error_bound, normal_quantile,
    path_discretization_error, statistical_half_width, DualMode, ErrorReport,
};
use crate::exact::{mnrm_advance, ssa_path, MnrmClocks};
use crate::mixedpath::{simulate_mixed_path, MixedConfig, Path};
use crate::model::ReactionNetwork;
use crate::rng::{Stream, StreamKey};
use crate::splitting::{one_step_mixing_rule, CostModel, SplitConfig, POISSON_REGIME_SWITCH};
use crate::tauleap::tau_leap_update;

// substream tags keep the pilot, estimation, and probe draws independent
const SUB_ESTIMATE: u64 = 0;
const SUB_PILOT: u64 = 1;
const SUB_PROBE: u64 = 2;

/// The resolved sampling plan: meshes, per-level exit budgets, and sample
/// counts.
#[derive(Debug, Clone, Serialize)]
pub struct MlmcPlan {
    pub dt0: f64,
    pub refinement: u32,
    pub levels: usize,
    pub delta: Vec<f64>,
    pub samples: Vec<u64>,
    pub theta_split: f64,
    pub confidence: f64,
    pub tol: f64,
    /// |pilot estimate| floored at 1; converts relative budgets to absolute.
    pub g_scale: f64,
    /// Modeled work of executing the plan, in cost-model units.
    pub predicted_work: f64,
}

impl MlmcPlan {
    pub fn dt(&self, level: usize) -> f64 {
        self.dt0 / (self.refinement as f64).powi(level as i32)
    }
}

/// Pilot measurements per level.
#[derive(Debug, Clone, Serialize, Default)]
pub struct LevelStats {
    pub variance: Vec<f64>,
    /// Mean modeled work of one path (level 0) or pair (deeper levels).
    pub work: Vec<f64>,
    /// Discretization-error estimate at each level's fine mesh.
    pub bias: Vec<f64>,
    pub n_tl_mean: Vec<f64>,
    pub n_tl_second: Vec<f64>,
    pub pilots: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("timer resolution too coarse for {what}; increase the probe batch size")]
    DegenerateTimer { what: &'static str },
}

/// Probe sizes for the cost calibration.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batch: 20_000,
            seed: 0xC057,
        }
    }
}

fn linfit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

/// Least-squares fit of the two-regime Poisson sampling cost model from
/// (lambda, seconds-per-draw) measurements: b1 + b2 ln(lambda) above the
/// regime switch, b3 + b4 lambda at or below it. Negative slopes (timing
/// noise) are clamped to zero to keep the fitted cost non-decreasing.
pub fn fit_poisson_cost(lambdas: &[f64], times: &[f64]) -> [f64; 4] {
    let (mut hi_x, mut hi_y, mut lo_x, mut lo_y) = (vec![], vec![], vec![], vec![]);
    for (&l, &t) in lambdas.iter().zip(times) {
        if l > POISSON_REGIME_SWITCH {
            hi_x.push(l.ln());
            hi_y.push(t);
        } else {
            lo_x.push(l);
            lo_y.push(t);
        }
    }
    let (b1, b2) = linfit(&hi_x, &hi_y);
    let (b3, b4) = linfit(&lo_x, &lo_y);
    [b1, b2.max(0.0), b3, b4.max(0.0)]
}

fn timed<F: FnMut()>(mut f: F) -> f64 {
    let t0 = Instant::now();
    f();
    t0.elapsed().as_secs_f64()
}

/// Measure machine-dependent step costs in seconds: exact steps, SSA steps,
/// leap bookkeeping, split computation, and the Poisson-draw cost curves.
pub fn calibrate_costs(
    network: &ReactionNetwork,
    probe: &ProbeConfig,
) -> Result<CostModel, CalibrationError> {
    let mut stream = Stream::new(StreamKey::new(probe.seed, 0, 0, SUB_PROBE));
    let nus: Vec<Vec<i64>> = network.reactions.iter().map(|r| r.nu.clone()).collect();
    let all: Vec<usize> = (0..network.n_reactions()).collect();

    // exact steps: advance from x0 over and over, divide by firings
    let mut fired = 0u64;
    let mut clocks = MnrmClocks::new(network.n_reactions());
    let horizon = network.final_time;
    let reps = (probe.batch / 100).max(10);
    let t_mnrm = timed(|| {
        for _ in 0..reps {
            let mut x = network.x0.clone();
            let (_, f) = mnrm_advance(network, &mut x, 0.0, horizon, &all, &mut clocks, &mut stream);
            fired += f.iter().sum::<u64>();
            for j in &all {
                clocks.invalidate(*j);
            }
        }
    });
    if t_mnrm <= 0.0 {
        return Err(CalibrationError::DegenerateTimer { what: "exact steps" });
    }
    let c_mnrm = t_mnrm / fired.max(reps as u64) as f64;

    // SSA steps
    let mut ssa_steps = 0u64;
    let t_ssa = timed(|| {
        for _ in 0..reps {
            ssa_steps += ssa_path(network, &network.x0, network.final_time, &mut stream).n_steps;
        }
    });
    let c_ssa = if ssa_steps > 0 && t_ssa > 0.0 {
        t_ssa / ssa_steps as f64
    } else {
        c_mnrm
    };

    // split computation at the initial state
    let cost_stub = CostModel {
        c_mnrm,
        c_tl: c_mnrm,
        c_s: c_mnrm,
        c_ssa,
        b: [0.0; 4],
    };
    let cfg = SplitConfig::default();
    let n_split = probe.batch.max(100);
    let t_split = timed(|| {
        for _ in 0..n_split {
            let _ = one_step_mixing_rule(
                network,
                &network.x0,
                0.0,
                0.05,
                network.final_time / 4.0,
                None,
                &cost_stub,
                &cfg,
                &mut stream,
            );
        }
    });
    if t_split <= 0.0 {
        return Err(CalibrationError::DegenerateTimer { what: "split computation" });
    }
    let c_s = t_split / n_split as f64;

    // leap bookkeeping: zero-rate updates skip the Poisson sampler entirely
    let zero = vec![0.0; network.n_reactions()];
    let t_tl = timed(|| {
        for _ in 0..probe.batch {
            let _ = tau_leap_update(&nus, &all, &zero, &network.x0, 0.1, &mut stream);
        }
    });
    if t_tl <= 0.0 {
        return Err(CalibrationError::DegenerateTimer { what: "leap bookkeeping" });
    }
    let c_tl = t_tl / probe.batch as f64;

    // Poisson-draw cost curves
    let lambdas = [0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 15.0, 20.0, 50.0, 200.0, 1e3, 1e4];
    let mut per_draw = Vec::with_capacity(lambdas.len());
    for &lam in &lambdas {
        let mut acc = 0u64;
        let t = timed(|| {
            for _ in 0..probe.batch {
                acc = acc.wrapping_add(stream.poisson(lam));
            }
        });
        if t <= 0.0 {
            return Err(CalibrationError::DegenerateTimer { what: "poisson draws" });
        }
        std::hint::black_box(acc);
        per_draw.push(t / probe.batch as f64);
    }
    let b = fit_poisson_cost(&lambdas, &per_draw);
    Ok(CostModel {
        c_mnrm,
        c_tl,
        c_s,
        c_ssa,
        b,
    })
}

/// Sample counts minimizing modeled work subject to the statistical budget:
/// M_l = ceil(c sqrt(V_l/psi_l) sum_k sqrt(V_k psi_k)) with
/// c = (C_A/eps_S)^2, floored at 1.
pub fn allocate_samples(variances: &[f64], works: &[f64], ca_over_eps_sq: f64) -> Vec<u64> {
    let cross: f64 = variances
        .iter()
        .zip(works)
        .map(|(v, w)| (v * w).sqrt())
        .sum();
    variances
        .iter()
        .zip(works)
        .map(|(v, w)| {
            let m = ca_over_eps_sq * (v / w).sqrt() * cross;
            (m.ceil() as u64).max(1)
        })
        .collect()
}

/// Pilot-phase knobs.
#[derive(Debug, Clone)]
pub struct PilotConfig {
    pub min_pairs: u64,
    pub max_pairs: u64,
    pub max_levels: usize,
    pub dt0: Option<f64>,
    pub refinement: u32,
    pub theta_split: f64,
    /// Stop doubling pilots once the variance estimate's relative SE is
    /// below this.
    pub rel_se_target: f64,
    /// One-step exit budget used while piloting (replaced by the plan's).
    pub delta_pilot: f64,
    pub split: SplitConfig,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            min_pairs: 64,
            max_pairs: 8192,
            max_levels: 10,
            dt0: None,
            refinement: 2,
            theta_split: 2.0 / 3.0,
            rel_se_target: 0.25,
            delta_pilot: 1e-3,
            split: SplitConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error(
        "bias budget {budget:.3e} unreachable: level {level} estimate {bias:.3e} \
         (deepest allowed level reached)"
    )]
    BiasBudgetUnreachable {
        level: usize,
        bias: f64,
        budget: f64,
    },
    #[error("tolerance must lie in (0,1), got {0}")]
    BadTolerance(f64),
}

/// Reduced per-sample pilot record.
#[derive(Debug, Clone, Copy)]
struct PilotSample {
    diff: f64,
    e_disc: f64,
    n_tl: u64,
    work: f64,
}

fn pilot_sample(
    network: &ReactionNetwork,
    level: usize,
    index: u64,
    seed: u64,
    dt0: f64,
    refinement: u32,
    delta: f64,
    cost: &CostModel,
    split: &SplitConfig,
) -> PilotSample {
    let mut stream = Stream::new(StreamKey::new(seed, level as u32, index, SUB_PILOT));
    let fine_dt = dt0 / (refinement as f64).powi(level as i32);
    let fine_cfg = MixedConfig {
        dt: fine_dt,
        delta,
        cost: cost.clone(),
        split: split.clone(),
    };
    let (fine, diff, n_tl, work) = if level == 0 {
        let p = simulate_mixed_path(network, &fine_cfg, &mut stream, None);
        let g = p.observable_value(network);
        let (n, w) = (p.n_tl, p.work);
        (p, g, n, w)
    } else {
        let coarse_cfg = MixedConfig {
            dt: fine_dt * refinement as f64,
            ..fine_cfg.clone()
        };
        let pair = simulate_coupled_paths(network, &coarse_cfg, &fine_cfg, &mut stream);
        let d = pair.fine.observable_value(network) - pair.coarse.observable_value(network);
        let n = pair.coarse.n_tl + pair.fine.n_tl;
        (pair.fine, d, n, pair.work)
    };
    // the implicit dual recursion stays stable on stiff drift Jacobians,
    // where the explicit variant overflows
    let e_disc = if fine.exited {
        0.0
    } else {
        dual_weights(&fine, network, DualMode::Backward)
            .map(|duals| path_discretization_error(&fine, &duals, network))
            .map(|e| if e.is_finite() { e } else { 0.0 })
            .unwrap_or(0.0)
    };
    PilotSample {
        diff,
        e_disc,
        n_tl,
        work,
    }
}

fn moments(samples: &[PilotSample]) -> (f64, f64, f64, f64) {
    // (mean diff, variance of diff, relative SE of the variance, mean bias)
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.diff).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.diff - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = samples.iter().map(|s| (s.diff - mean).powi(4)).sum::<f64>() / n;
    let se_var = ((m4 - var * var).max(0.0) / n).sqrt();
    let rel_se = if var > 0.0 { se_var / var } else { 0.0 };
    let bias = samples.iter().map(|s| s.e_disc).sum::<f64>() / n;
    (mean, var, rel_se, bias)
}

/// Phase II: pilot the level hierarchy, grow it until the discretization
/// budget is met, and allocate sample counts and per-level exit budgets.
pub fn optimize_plan(
    network: &ReactionNetwork,
    tol: f64,
    confidence: f64,
    pilot: &PilotConfig,
    cost: &CostModel,
    seed: u64,
) -> Result<(MlmcPlan, LevelStats), PlanError> {
    if !(0.0 < tol && tol < 1.0) {
        return Err(PlanError::BadTolerance(tol));
    }
    let dt0 = pilot.dt0.unwrap_or(network.final_time / 4.0);
    let mut stats = LevelStats::default();
    let mut level_samples: Vec<Vec<PilotSample>> = Vec::new();
    let mut level = 0usize;
    loop {
        // pilot this level, doubling until the variance estimate stabilizes;
        // streams are keyed by path index, so a doubled batch extends the
        // existing one instead of redrawing it
        let mut batch: Vec<PilotSample> = Vec::new();
        let samples = loop {
            let n = ((batch.len() as u64).max(pilot.min_pairs / 2) * 2).max(pilot.min_pairs);
            let mut ext: Vec<PilotSample> = (batch.len() as u64..n)
                .into_par_iter()
                .map(|i| {
                    pilot_sample(
                        network,
                        level,
                        i,
                        seed,
                        dt0,
                        pilot.refinement,
                        pilot.delta_pilot,
                        cost,
                        &pilot.split,
                    )
                })
                .collect();
            batch.append(&mut ext);
            let (_, var, rel_se, _) = moments(&batch);
            if var == 0.0 || rel_se <= pilot.rel_se_target || batch.len() as u64 >= pilot.max_pairs
            {
                break batch;
            }
        };
        let (mean, var, _, bias) = moments(&samples);
        let ns = samples.len() as f64;
        stats.variance.push(var);
        stats
            .work
            .push(samples.iter().map(|s| s.work).sum::<f64>() / ns);
        stats.bias.push(bias);
        stats
            .n_tl_mean
            .push(samples.iter().map(|s| s.n_tl as f64).sum::<f64>() / ns);
        stats
            .n_tl_second
            .push(samples.iter().map(|s| (s.n_tl as f64).powi(2)).sum::<f64>() / ns);
        stats.pilots.push(samples.len() as u64);
        level_samples.push(samples);
        let _ = mean;

        // current estimate of |E g| from the telescoped pilot means
        let g_hat: f64 = level_samples
            .iter()
            .map(|s| s.iter().map(|p| p.diff).sum::<f64>() / s.len() as f64)
            .sum();
        let g_scale = g_hat.abs().max(1.0);
        let bias_budget = (1.0 - pilot.theta_split) * (tol - tol * tol) * g_scale;
        if bias.abs() <= bias_budget {
            // budgets met: finish the plan
            let eps_s = pilot.theta_split * (tol - tol * tol) * g_scale;
            let ca = normal_quantile(confidence);
            let c = (ca / eps_s).powi(2);
            let samples = allocate_samples(&stats.variance, &stats.work, c);
            let l = level;
            let delta: Vec<f64> = (0..=l)
                .map(|k| {
                    let n_tl = stats.n_tl_mean[k].max(1.0);
                    (tol * tol / ((l + 1) as f64 * n_tl * g_scale)).clamp(1e-12, 0.1)
                })
                .collect();
            let predicted_work: f64 = c
                * stats
                    .variance
                    .iter()
                    .zip(&stats.work)
                    .map(|(v, w)| (v * w).sqrt())
                    .sum::<f64>()
                    .powi(2);
            return Ok((
                MlmcPlan {
                    dt0,
                    refinement: pilot.refinement,
                    levels: l,
                    delta,
                    samples,
                    theta_split: pilot.theta_split,
                    confidence,
                    tol,
                    g_scale,
                    predicted_work,
                },
                stats,
            ));
        }
        if level >= pilot.max_levels {
            return Err(PlanError::BiasBudgetUnreachable {
                level,
                bias,
                budget: bias_budget,
            });
        }
        level += 1;
    }
}

/// Per-level realized statistics attached to the final report.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub dt: f64,
    pub samples: u64,
    pub mean: f64,
    pub variance: f64,
    pub work_modeled: f64,
    pub wall_seconds: f64,
    pub exited: u64,
    pub n_tl_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub value: f64,
    pub tol: f64,
    pub confidence: f64,
    pub cv_enabled: bool,
    /// Mean-field prediction g(mu_K) backing the control variate, if used.
    pub g_mean_field: Option<f64>,
    pub levels: Vec<LevelReport>,
    pub error: ErrorReport,
    pub predicted_work: f64,
    pub modeled_work: f64,
    pub wall_seconds: f64,
}

/// Heuristic mean-field mesh: resolve the fastest linearized time scale at
/// the initial state a few times over.
pub fn mean_field_mesh(network: &ReactionNetwork, t_final: f64) -> Vec<f64> {
    let z0: Vec<f64> = network.x0.iter().map(|&v| v as f64).collect();
    let jac = network.propensity_jacobian_real(&z0);
    let d = network.dim();
    let mut rate: f64 = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for (j, r) in network.reactions.iter().enumerate() {
            for k in 0..d {
                row += (jac[j][i] * r.nu[k] as f64).abs();
            }
        }
        rate = rate.max(row);
    }
    let steps = ((t_final * rate * 4.0).ceil() as usize).clamp(256, 2_000_000);
    uniform_mesh(t_final, steps)
}

/// Phase III: execute a plan. Level 0 uses the control variate when
/// enabled; deeper levels sample coupled differences.
pub fn estimate(
    network: &ReactionNetwork,
    plan: &MlmcPlan,
    cost: &CostModel,
    split: &SplitConfig,
    cv_enabled: bool,
    seed: u64,
) -> EstimateReport {
    let t_total = Instant::now();
    let mean_field: Option<MeanFieldSolution> = if cv_enabled {
        Some(mean_field_solve(
            network,
            &mean_field_mesh(network, network.final_time),
        ))
    } else {
        None
    };
    let g_mu = mean_field
        .as_ref()
        .map(|mf| network.observable.eval(&mf.mu_k));
    let mut levels = Vec::with_capacity(plan.levels + 1);
    let mut value = 0.0;
    let mut variances = Vec::new();
    let mut counts = Vec::new();
    let mut modeled_work = 0.0;
    let mut e_exit_p = 0.0; // accumulated exit probability mass
    let mut deep_bias = (0.0, f64::INFINITY);
    for level in 0..=plan.levels {
        let m = plan.samples[level];
        let fine_cfg = MixedConfig {
            dt: plan.dt(level),
            delta: plan.delta[level],
            cost: cost.clone(),
            split: split.clone(),
        };
        let t_level = Instant::now();
        // (contribution, n_tl, exited, work, e_disc of the fine leg)
        let rows: Vec<(f64, u64, bool, f64, Option<f64>)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut stream =
                    Stream::new(StreamKey::new(seed, level as u32, i, SUB_ESTIMATE));
                if level == 0 {
                    if let Some(mf) = &mean_field {
                        let s = cv_pair_sample(network, &fine_cfg, mf, &mut stream);
                        return (s.g_path - s.g_cv, s.n_tl, s.exited, s.work, None);
                    }
                    let p = simulate_mixed_path(network, &fine_cfg, &mut stream, None);
                    let e = path_bias(&p, network, level == plan.levels);
                    (p.observable_value(network), p.n_tl, p.exited, p.work, e)
                } else {
                    let coarse_cfg = MixedConfig {
                        dt: plan.dt(level - 1),
                        ..fine_cfg.clone()
                    };
                    let pair =
                        simulate_coupled_paths(network, &coarse_cfg, &fine_cfg, &mut stream);
                    let d = pair.fine.observable_value(network)
                        - pair.coarse.observable_value(network);
                    let e = path_bias(&pair.fine, network, level == plan.levels);
                    (
                        d,
                        pair.coarse.n_tl + pair.fine.n_tl,
                        pair.coarse.exited || pair.fine.exited,
                        pair.work,
                        e,
                    )
                }
            })
            .collect();
        let wall = t_level.elapsed().as_secs_f64();
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let work: f64 = rows.iter().map(|r| r.3).sum();
        let n_tl_mean = rows.iter().map(|r| r.1 as f64).sum::<f64>() / n;
        let n_tl_second = rows.iter().map(|r| (r.1 as f64).powi(2)).sum::<f64>() / n;
        let exited = rows.iter().filter(|r| r.2).count() as u64;
        e_exit_p += exit_error_bound(plan.delta[level], n_tl_mean, n_tl_second, 1.0);
        if level == plan.levels {
            let biases: Vec<f64> = rows.iter().filter_map(|r| r.4).collect();
            if !biases.is_empty() {
                let bn = biases.len() as f64;
                let bm = biases.iter().sum::<f64>() / bn;
                let bv = if biases.len() > 1 {
                    biases.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (bn - 1.0)
                } else {
                    0.0
                };
                deep_bias = (bm, (bv / bn).sqrt());
            }
        }
        let contribution = mean + if level == 0 { g_mu.unwrap_or(0.0) } else { 0.0 };
        value += contribution;
        variances.push(var);
        counts.push(m);
        modeled_work += work;
        levels.push(LevelReport {
            level,
            dt: plan.dt(level),
            samples: m,
            mean: contribution,
            variance: var,
            work_modeled: work,
            wall_seconds: wall,
            exited,
            n_tl_mean,
        });
    }
    let g_scale = value.abs().max(1.0);
    let e_stat = statistical_half_width(&variances, &counts, plan.confidence);
    let error = ErrorReport::new(
        g_scale * e_exit_p.clamp(0.0, 1.0),
        deep_bias.0,
        if deep_bias.1.is_finite() { deep_bias.1 } else { 0.0 },
        e_stat,
    );
    EstimateReport {
        value,
        tol: plan.tol,
        confidence: plan.confidence,
        cv_enabled,
        g_mean_field: g_mu,
        levels,
        error,
        predicted_work: plan.predicted_work,
        modeled_work,
        wall_seconds: t_total.elapsed().as_secs_f64(),
    }
}

fn path_bias(path: &Path, network: &ReactionNetwork, deepest: bool) -> Option<f64> {
    if !deepest || path.exited {
        return if deepest { Some(0.0) } else { None };
    }
    let duals = dual_weights(path, network, DualMode::Backward).ok()?;
    let e = path_discretization_error(path, &duals, network);
    Some(if e.is_finite() { e } else { 0.0 })
}

/// One row of the work-versus-tolerance study.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub tol: f64,
    pub value: f64,
    pub levels: usize,
    pub predicted_work: f64,
    pub modeled_work: f64,
    pub wall_seconds: f64,
    pub ssa_work: Option<f64>,
}

/// Run the pipeline across a tolerance ladder, optionally with an SSA
/// baseline work model fitted from probe paths.
#[allow(clippy::too_many_arguments)]
pub fn complexity_study(
    network: &ReactionNetwork,
    tols: &[f64],
    confidence: f64,
    pilot: &PilotConfig,
    cost: &CostModel,
    with_ssa: bool,
    seed: u64,
) -> Result<Vec<StudyRow>, PlanError> {
    // SSA probe: variance, mean steps and value for the baseline work model
    let ssa_probe = if with_ssa {
        let n = 100u64;
        let rows: Vec<(f64, u64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut s = Stream::new(StreamKey::new(seed, 0, i, SUB_PROBE));
                let p = ssa_path(network, &network.x0, network.final_time, &mut s);
                (network.observable.eval_state(&p.terminal), p.n_steps)
            })
            .collect();
        let mean = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let steps = rows.iter().map(|r| r.1 as f64).sum::<f64>() / n as f64;
        Some((mean, var, steps))
    } else {
        None
    };
    let ca = normal_quantile(confidence);
    let mut out = Vec::with_capacity(tols.len());
    for (k, &tol) in tols.iter().enumerate() {
        let run_seed = seed.wrapping_add(1 + k as u64);
        let (plan, _) = optimize_plan(network, tol, confidence, pilot, cost, run_seed)?;
        let report = estimate(network, &plan, cost, &pilot.split, false, run_seed);
        let ssa_work = ssa_probe.map(|(mean, var, steps)| {
            let eps = tol * mean.abs().max(1.0);
            let m = ((ca / eps).powi(2) * var).ceil().max(1.0);
            m * cost.c_ssa * steps
        });
        out.push(StudyRow {
            tol,
            value: report.value,
            levels: plan.levels,
            predicted_work: plan.predicted_work,
            modeled_work: report.modeled_work,
            wall_seconds: report.wall_seconds,
            ssa_work,
        });
    }
    Ok(out)
}

/// Re-estimate the discretization error of a finished report's deepest
/// level from scratch (diagnostic helper).
pub fn recheck_bias(
    network: &ReactionNetwork,
    plan: &MlmcPlan,
    cost: &CostModel,
    split: &SplitConfig,
    n_paths: u64,
    seed: u64,
) -> (f64, f64) {
    let cfg = MixedConfig {
        dt: plan.dt(plan.levels),
        delta: plan.delta[plan.levels],
        cost: cost.clone(),
        split: split.clone(),
    };
    let paths: Vec<Path> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut s = Stream::new(StreamKey::new(seed, 99, i, SUB_PROBE));
            simulate_mixed_path(network, &cfg, &mut s, None)
        })
        .collect();
    discretization_error_estimate(&paths, network, DualMode::Forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decay_model, Observable, Reaction};
    use crate::splitting::SplitForce;

    #[test]
    fn poisson_fit_recovers_noiseless_coefficients() {
        let truth = [2.0e-8, 3.0e-9, 8.0e-9, 1.2e-9];
        let lambdas = [0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 15.0, 20.0, 50.0, 200.0, 1e3, 1e4];
        let times: Vec<f64> = lambdas
            .iter()
            .map(|&l| {
                if l > POISSON_REGIME_SWITCH {
                    truth[0] + truth[1] * l.ln()
                } else {
                    truth[2] + truth[3] * l
                }
            })
            .collect();
        let b = fit_poisson_cost(&lambdas, &times);
        for (f, t) in b.iter().zip(&truth) {
            assert!((f - t).abs() < 1e-9 * (1.0 + t.abs()), "{f} vs {t}");
        }
        // and the fitted curve is non-decreasing across the whole grid
        let c = CostModel {
            c_mnrm: 1.0,
            c_tl: 1.0,
            c_s: 1.0,
            c_ssa: 1.0,
            b,
        };
        let grid = [1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 100.0, 1e3, 1e4];
        for w in grid.windows(2) {
            assert!(c.poisson_cost(w[1]) >= 0.9 * c.poisson_cost(w[0]));
        }
    }

    #[test]
    fn calibration_produces_positive_costs() {
        let net = decay_model(1.0, 100, 1.0);
        let c = calibrate_costs(&net, &ProbeConfig { batch: 2000, seed: 7 }).unwrap();
        assert!(c.c_mnrm > 0.0 && c.c_tl > 0.0 && c.c_s > 0.0 && c.c_ssa > 0.0);
        assert!(c.poisson_cost(1.0) > 0.0 && c.poisson_cost(100.0) > 0.0);
    }

    #[test]
    fn allocation_example() {
        assert_eq!(allocate_samples(&[4.0, 1.0], &[1.0, 4.0], 1.0), vec![8, 2]);
        // zero variance floors at 1
        assert_eq!(allocate_samples(&[0.0, 1.0], &[1.0, 1.0], 10.0), vec![1, 10]);
    }

    #[test]
    fn allocation_is_stationary() {
        // perturbing one level's share and rescaling to hold the variance
        // constraint never beats the planner's work by more than 1%
        let v = [9.0f64, 3.0, 1.0];
        let w = [1.0f64, 4.0, 16.0];
        let c = 100.0;
        let cross: f64 = v.iter().zip(&w).map(|(a, b)| (a * b).sqrt()).sum();
        let m_star: Vec<f64> = v
            .iter()
            .zip(&w)
            .map(|(a, b)| c * (a / b).sqrt() * cross)
            .collect();
        let target: f64 = v.iter().zip(&m_star).map(|(a, m)| a / m).sum();
        let work_star: f64 = w.iter().zip(&m_star).map(|(b, m)| b * m).sum();
        for l in 0..3 {
            for f in [0.75, 1.25] {
                let mut m = m_star.clone();
                m[l] *= f;
                let achieved: f64 = v.iter().zip(&m).map(|(a, mm)| a / mm).sum();
                let scale = achieved / target;
                for mm in m.iter_mut() {
                    *mm *= scale;
                }
                let work: f64 = w.iter().zip(&m).map(|(b, mm)| b * mm).sum();
                assert!(work >= work_star * 0.99, "perturbed {work} vs {work_star}");
            }
        }
    }

    #[test]
    fn plan_mesh_hierarchy() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let (plan, stats) =
            optimize_plan(&net, 0.05, 0.95, &PilotConfig::default(), &cost, 11).unwrap();
        assert!(plan.levels <= PilotConfig::default().max_levels);
        for l in 0..=plan.levels {
            assert!((plan.dt(l) - plan.dt0 * 0.5f64.powi(l as i32)).abs() < 1e-12);
            assert!(plan.samples[l] >= 1);
            assert!(plan.delta[l] > 0.0 && plan.delta[l] < 1.0);
        }
        assert_eq!(stats.variance.len(), plan.levels + 1);
        assert!(stats.work.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn planner_predicted_work_close_to_realized() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let (plan, _) =
            optimize_plan(&net, 0.05, 0.95, &PilotConfig::default(), &cost, 12).unwrap();
        let report = estimate(&net, &plan, &cost, &SplitConfig::default(), false, 12);
        let ratio = report.modeled_work / plan.predicted_work;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "realized {} vs predicted {} (ratio {ratio})",
            report.modeled_work,
            plan.predicted_work
        );
    }

    #[test]
    fn pilot_exhaustion_reports_diagnostics() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let pilot = PilotConfig {
            max_levels: 0,
            delta_pilot: 0.5,
            split: SplitConfig {
                force: SplitForce::AllTauLeap,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = optimize_plan(&net, 1e-3, 0.95, &pilot, &cost, 13).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("level 0"), "{msg}");
    }

    #[test]
    fn frozen_network_estimates_exactly() {
        // no active dynamics: the estimator returns g(x0) with no spread
        let net = crate::model::ReactionNetwork {
            species_names: vec!["X".into()],
            reactions: vec![Reaction {
                nu: vec![-1],
                reactants: vec![(0, 1)],
                rate: 0.0,
            }],
            x0: vec![17],
            final_time: 1.0,
            observable: Observable::Coordinate(0),
        };
        let cost = CostModel::default_synthetic();
        let plan = MlmcPlan {
            dt0: 0.25,
            refinement: 2,
            levels: 0,
            delta: vec![0.01],
            samples: vec![8],
            theta_split: 2.0 / 3.0,
            confidence: 0.95,
            tol: 0.05,
            g_scale: 17.0,
            predicted_work: 1.0,
        };
        let r = estimate(&net, &plan, &cost, &SplitConfig::default(), false, 14);
        assert_eq!(r.value, 17.0);
        assert_eq!(r.error.e_stat, 0.0);
    }

    #[test]
    fn estimate_hits_decay_mean_within_tolerance() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let truth = 100.0 * (-1.0f64).exp();
        let mut hits = 0;
        for rep in 0..10u64 {
            let (plan, _) =
                optimize_plan(&net, 0.05, 0.95, &PilotConfig::default(), &cost, 20 + rep)
                    .unwrap();
            let r = estimate(&net, &plan, &cost, &SplitConfig::default(), false, 20 + rep);
            if (r.value - truth).abs() <= 0.05 * truth {
                hits += 1;
            }
        }
        assert!(hits >= 7, "only {hits}/10 within tolerance");
    }

    #[test]
    fn cv_estimate_agrees_with_plain_estimate() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let (plan, _) =
            optimize_plan(&net, 0.05, 0.95, &PilotConfig::default(), &cost, 30).unwrap();
        let plain = estimate(&net, &plan, &cost, &SplitConfig::default(), false, 30);
        let cv = estimate(&net, &plan, &cost, &SplitConfig::default(), true, 31);
        let truth = 100.0 * (-1.0f64).exp();
        assert!((plain.value - truth).abs() < 0.1 * truth);
        assert!((cv.value - truth).abs() < 0.1 * truth);
        assert!(cv.g_mean_field.is_some());
    }

    #[test]
    fn study_rows_track_tolerances() {
        let net = decay_model(1.0, 100, 1.0);
        let cost = CostModel::default_synthetic();
        let rows = complexity_study(
            &net,
            &[0.1, 0.05],
            0.95,
            &PilotConfig::default(),
            &cost,
            true,
            40,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        // predicted work grows as the tolerance shrinks
        assert!(rows[1].predicted_work > rows[0].predicted_work);
        assert!(rows.iter().all(|r| r.ssa_work.unwrap() > 0.0));
    }
}
