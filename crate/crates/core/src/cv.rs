//! Deterministic-time-change control variate: forward-Euler mean field,
//! per-reaction target internal times, Poissonian-bridge sampling of the
//! counting processes at those targets, and the variance-reduced level-0
//! estimator built from them.

use crate::mixedpath::{simulate_mixed_path, CvLedger, MixedConfig};
use crate::model::ReactionNetwork;
use crate::rng::Stream;

/// Forward-Euler mean field: real-valued trajectory Z_k, accumulated
/// internal times Lambda_hat_{j,k}, and the terminal mean mu_K.
#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    pub mesh: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// lambda_hat[k][j]: internal time of channel j at mesh point k.
    pub lambda_hat: Vec<Vec<f64>>,
    pub mu_k: Vec<f64>,
}

impl MeanFieldSolution {
    pub fn terminal_targets(&self) -> Vec<f64> {
        self.lambda_hat.last().unwrap().clone()
    }
}

/// Integrate the mean-field ODE on `mesh`. Negative propensity evaluations
/// of the real-valued relaxation are clamped to zero so every Lambda_hat is
/// non-decreasing.
pub fn mean_field_solve(network: &ReactionNetwork, mesh: &[f64]) -> MeanFieldSolution {
    assert!(!mesh.is_empty());
    let d = network.dim();
    let nj = network.n_reactions();
    let mut z: Vec<Vec<f64>> = vec![network.x0.iter().map(|&v| v as f64).collect()];
    let mut lambda: Vec<Vec<f64>> = vec![vec![0.0; nj]];
    for k in 0..mesh.len() - 1 {
        let dt = mesh[k + 1] - mesh[k];
        let a: Vec<f64> = network
            .propensities_real(&z[k])
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        let mut zn = z[k].clone();
        for (j, r) in network.reactions.iter().enumerate() {
            for i in 0..d {
                zn[i] += r.nu[i] as f64 * a[j] * dt;
            }
        }
        let ln: Vec<f64> = lambda[k].iter().zip(&a).map(|(l, aj)| l + aj * dt).collect();
        z.push(zn);
        lambda.push(ln);
    }
    // mu_K = x0 + sum_j nu_j Lambda_hat_{j,K}; telescoping makes this Z_K
    let mut mu: Vec<f64> = network.x0.iter().map(|&v| v as f64).collect();
    for (j, r) in network.reactions.iter().enumerate() {
        for i in 0..d {
            mu[i] += r.nu[i] as f64 * lambda.last().unwrap()[j];
        }
    }
    MeanFieldSolution {
        mesh: mesh.to_vec(),
        z,
        lambda_hat: lambda,
        mu_k: mu,
    }
}

/// Convenience: a uniform mesh of `steps` intervals over [0, T].
pub fn uniform_mesh(t_final: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| t_final * k as f64 / steps.max(1) as f64)
        .collect()
}

/// How to sample the count beyond the last observed internal time when the
/// target was never reached: by the internal-time gap itself (a unit-rate
/// process), or scaled by a terminal propensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExcessForm {
    InternalTime,
    RateScaled(f64),
}

/// Sample Y_j at the deterministic internal time `ledger.target[j]`: a
/// binomial bridge between the frozen checkpoints when they bracket the
/// target, or the recorded terminal count plus an independent Poisson excess
/// when the path's internal time never got there.
pub fn bridge_sample(
    ledger: &CvLedger,
    j: usize,
    excess: ExcessForm,
    stream: &mut Stream,
) -> u64 {
    let target = ledger.target[j];
    match ledger.bracket[j] {
        Some(b) => {
            if target <= b.lambda_lo || b.lambda_hi <= b.lambda_lo {
                b.count_lo
            } else if target >= b.lambda_hi {
                b.count_hi
            } else {
                let p = (target - b.lambda_lo) / (b.lambda_hi - b.lambda_lo);
                b.count_lo + stream.binomial(b.count_hi - b.count_lo, p)
            }
        }
        None => {
            let gap = (target - ledger.lambda[j]).max(0.0);
            let mean = match excess {
                ExcessForm::InternalTime => gap,
                ExcessForm::RateScaled(rate) => rate * gap,
            };
            ledger.count[j] + stream.poisson(mean)
        }
    }
}

/// One level-0 sample of the path observable and its control variate.
#[derive(Debug, Clone)]
pub struct CvSample {
    pub g_path: f64,
    pub g_cv: f64,
    pub exited: bool,
    pub n_tl: u64,
    pub work: f64,
}

/// Run one mixed level-0 path with a ledger targeting the mean-field
/// internal times, then reconstruct X_hat_K = x0 + sum_j nu_j Y_j(target)
/// and evaluate g on both endpoints. An exited path zeroes the whole sample
/// (the pair is excluded by the same indicator as the plain estimator).
pub fn cv_pair_sample(
    network: &ReactionNetwork,
    cfg: &MixedConfig,
    mean_field: &MeanFieldSolution,
    stream: &mut Stream,
) -> CvSample {
    let mut ledger = CvLedger::new(mean_field.terminal_targets());
    let path = simulate_mixed_path(network, cfg, stream, Some(&mut ledger));
    if path.exited {
        return CvSample {
            g_path: 0.0,
            g_cv: 0.0,
            exited: true,
            n_tl: path.n_tl,
            work: path.work,
        };
    }
    let mut x_hat: Vec<f64> = network.x0.iter().map(|&v| v as f64).collect();
    for (j, r) in network.reactions.iter().enumerate() {
        let y = bridge_sample(&ledger, j, ExcessForm::InternalTime, stream);
        for (xi, &nji) in x_hat.iter_mut().zip(&r.nu) {
            *xi += nji as f64 * y as f64;
        }
    }
    CvSample {
        g_path: path.observable_value(network),
        g_cv: network.observable.eval(&x_hat),
        exited: false,
        n_tl: path.n_tl,
        work: path.work,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    Fixed(f64),
    Regression,
}

/// Control-variate mean and the sample variance of the combined variate
/// g_path - beta g_cv. Regression mode estimates beta from the samples and
/// falls back to beta = 0 when the variate is degenerate.
pub fn cv_estimator(samples: &[(f64, f64)], mode: BetaMode, g_mu: f64) -> (f64, f64) {
    assert!(samples.len() >= 2);
    let n = samples.len() as f64;
    let mp = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mc = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let beta = match mode {
        BetaMode::Fixed(b) => b,
        BetaMode::Regression => {
            let var_c = samples.iter().map(|s| (s.1 - mc) * (s.1 - mc)).sum::<f64>() / (n - 1.0);
            if var_c == 0.0 {
                0.0
            } else {
                let cov = samples
                    .iter()
                    .map(|s| (s.0 - mp) * (s.1 - mc))
                    .sum::<f64>()
                    / (n - 1.0);
                cov / var_c
            }
        }
    };
    let mean = mp - beta * (mc - g_mu);
    let mz = mp - beta * mc;
    let var = samples
        .iter()
        .map(|s| {
            let v = s.0 - beta * s.1 - mz;
            v * v
        })
        .sum::<f64>()
        / (n - 1.0);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixedpath::Bracket;
    use crate::model::{birth_model, decay_model, stiff_model, virus_model};
    use crate::rng::StreamKey;
    use crate::splitting::{CostModel, SplitConfig, SplitForce};

    fn cfg(dt: f64, delta: f64) -> MixedConfig {
        MixedConfig {
            dt,
            delta,
            cost: CostModel::default_synthetic(),
            split: SplitConfig::default(),
        }
    }

    #[test]
    fn decay_one_euler_step() {
        let net = decay_model(1.0, 100, 0.1);
        let mf = mean_field_solve(&net, &[0.0, 0.1]);
        assert!((mf.z[1][0] - 90.0).abs() < 1e-12);
        assert!((mf.lambda_hat[1][0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_mesh_keeps_initial_state() {
        let net = decay_model(1.0, 100, 1.0);
        let mf = mean_field_solve(&net, &[0.0]);
        assert_eq!(mf.mu_k, vec![100.0]);
        assert_eq!(mf.terminal_targets(), vec![0.0]);
    }

    #[test]
    fn zero_rate_network_is_constant() {
        let net = decay_model(0.0, 42, 1.0);
        let mf = mean_field_solve(&net, &uniform_mesh(1.0, 10));
        assert_eq!(*mf.z.last().unwrap(), vec![42.0]);
        assert_eq!(mf.terminal_targets(), vec![0.0]);
    }

    #[test]
    fn mu_equals_terminal_z_exactly() {
        let net = virus_model();
        let mf = mean_field_solve(&net, &uniform_mesh(20.0, 400));
        for (m, z) in mf.mu_k.iter().zip(mf.z.last().unwrap()) {
            assert!((m - z).abs() <= 1e-9 * (1.0 + z.abs()), "{m} vs {z}");
        }
    }

    #[test]
    fn lambda_hat_monotone_even_past_overshoot() {
        // decay with a huge Euler step: Z goes negative, propensity clamps
        let net = decay_model(1.0, 100, 3.0);
        let mf = mean_field_solve(&net, &uniform_mesh(3.0, 2));
        for k in 1..mf.lambda_hat.len() {
            assert!(mf.lambda_hat[k][0] >= mf.lambda_hat[k - 1][0]);
        }
        assert!(mf.z.last().unwrap()[0] <= 0.0); // the overshoot happened
    }

    fn frozen_ledger(target: f64, b: Option<Bracket>, lambda: f64, count: u64) -> CvLedger {
        CvLedger {
            target: vec![target],
            lambda: vec![lambda],
            count: vec![count],
            bracket: vec![b],
        }
    }

    #[test]
    fn bridge_boundaries() {
        let b = Bracket {
            lambda_lo: 2.0,
            count_lo: 3,
            lambda_hi: 5.0,
            count_hi: 9,
        };
        let mut s = Stream::new(StreamKey::new(80, 0, 0, 0));
        let lo = frozen_ledger(2.0, Some(b), 5.0, 9);
        assert_eq!(bridge_sample(&lo, 0, ExcessForm::InternalTime, &mut s), 3);
        let hi = frozen_ledger(5.0, Some(b), 5.0, 9);
        assert_eq!(bridge_sample(&hi, 0, ExcessForm::InternalTime, &mut s), 9);
    }

    #[test]
    fn bridge_thinning_mean() {
        // target 3 in [2, 5]: p = 1/3, E[y] = 3 + 6/3 = 5
        let b = Bracket {
            lambda_lo: 2.0,
            count_lo: 3,
            lambda_hi: 5.0,
            count_hi: 9,
        };
        let led = frozen_ledger(3.0, Some(b), 5.0, 9);
        let mut s = Stream::new(StreamKey::new(81, 0, 0, 0));
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += bridge_sample(&led, 0, ExcessForm::InternalTime, &mut s) as f64;
        }
        let mean = sum / n as f64;
        // Var = 6 p (1-p) = 4/3, SE ~ 0.0037
        assert!((mean - 5.0).abs() < 4.0 * (4.0 / 3.0f64 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn bridge_excess_poisson_mean() {
        // never bracketed: terminal lambda 4, count 7, target 9 -> 7 + Poi(5)
        let led = frozen_ledger(9.0, None, 4.0, 7);
        let mut s = Stream::new(StreamKey::new(82, 0, 0, 0));
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += bridge_sample(&led, 0, ExcessForm::InternalTime, &mut s) as f64;
        }
        let mean = sum / n as f64;
        assert!((mean - 12.0).abs() < 4.0 * (5.0f64 / n as f64).sqrt(), "{mean}");
        // rate-scaled variant changes the excess mean
        let mut s2 = Stream::new(StreamKey::new(82, 1, 0, 0));
        let mut sum2 = 0.0;
        for _ in 0..n {
            sum2 += bridge_sample(&led, 0, ExcessForm::RateScaled(2.0), &mut s2) as f64;
        }
        let mean2 = sum2 / n as f64;
        assert!((mean2 - 17.0).abs() < 4.0 * (10.0f64 / n as f64).sqrt(), "{mean2}");
    }

    #[test]
    fn pipeline_constant_rate_marginal() {
        // constant-rate channel: Y(Lambda_hat) ~ Poisson(10) through the
        // whole ledger + bridge pipeline
        let net = birth_model(5.0, 0, 2.0);
        let mf = mean_field_solve(&net, &uniform_mesh(2.0, 8));
        assert!((mf.terminal_targets()[0] - 10.0).abs() < 1e-12);
        let c = MixedConfig {
            split: SplitConfig {
                force: SplitForce::AllTauLeap,
                ..Default::default()
            },
            ..cfg(0.25, 0.5)
        };
        let n = 20_000;
        let mut sum = 0.0;
        for i in 0..n {
            let mut s = Stream::new(StreamKey::new(83, 0, i, 0));
            let smp = cv_pair_sample(&net, &c, &mf, &mut s);
            assert!(!smp.exited);
            sum += smp.g_cv;
        }
        let mean = sum / n as f64;
        assert!(
            (mean - 10.0).abs() < 4.0 * (10.0f64 / n as f64).sqrt(),
            "{mean}"
        );
    }

    #[test]
    fn cv_mean_matches_mu_for_linear_g_on_decay() {
        let net = decay_model(1.0, 100, 1.0);
        let mf = mean_field_solve(&net, &uniform_mesh(1.0, 200));
        let c = cfg(0.25, 0.01);
        let n = 4000;
        let (mut sp, mut sc) = (0.0, 0.0);
        let mut corr_acc = Vec::with_capacity(n as usize);
        for i in 0..n {
            let mut s = Stream::new(StreamKey::new(84, 0, i, 0));
            let smp = cv_pair_sample(&net, &c, &mf, &mut s);
            sp += smp.g_path;
            sc += smp.g_cv;
            corr_acc.push((smp.g_path, smp.g_cv));
        }
        let (mp, mc) = (sp / n as f64, sc / n as f64);
        let g_mu = net.observable.eval(&mf.mu_k);
        // E[g_cv] = g(mu) for linear g; SE ~ sqrt(Var Poisson mixture)/sqrt(n)
        assert!((mc - g_mu).abs() < 4.0 * (40.0f64 / n as f64).sqrt(), "{mc} vs {g_mu}");
        // and the variate is positively correlated with the path value
        let cov: f64 = corr_acc
            .iter()
            .map(|(a, b)| (a - mp) * (b - mc))
            .sum::<f64>()
            / (n as f64 - 1.0);
        assert!(cov > 0.0, "cov {cov}");
    }

    #[test]
    fn estimator_modes() {
        let samples = [(1.0, 0.5), (2.0, 1.5), (3.0, 2.5)];
        // beta = 0: plain mean
        let (m0, _) = cv_estimator(&samples, BetaMode::Fixed(0.0), 7.0);
        assert!((m0 - 2.0).abs() < 1e-12);
        // perfect variate, beta = 1: mean collapses to g_mu shifted by the
        // constant offset, variance 0
        let perfect: Vec<(f64, f64)> = samples.iter().map(|&(a, _)| (a, a)).collect();
        let (m1, v1) = cv_estimator(&perfect, BetaMode::Fixed(1.0), 7.0);
        assert!((m1 - 7.0).abs() < 1e-12);
        assert!(v1.abs() < 1e-12);
        // regression on a degenerate variate falls back to beta = 0
        let degen = [(1.0, 4.0), (2.0, 4.0)];
        let (mr, _) = cv_estimator(&degen, BetaMode::Regression, 0.0);
        assert!((mr - 1.5).abs() < 1e-12);
    }

    #[test]
    fn regression_beta_minimizes_variance() {
        let samples = [(1.0, 0.9), (2.0, 2.2), (3.0, 2.9), (4.0, 4.1), (2.5, 2.4)];
        let (_, vr) = cv_estimator(&samples, BetaMode::Regression, 0.0);
        for b in [0.0, 0.5, 1.5, 2.0] {
            let (_, vb) = cv_estimator(&samples, BetaMode::Fixed(b), 0.0);
            assert!(vr <= vb + 1e-12);
        }
    }

    #[test]
    fn stiff_level0_variance_reduction() {
        let net = stiff_model();
        let mf = mean_field_solve(&net, &uniform_mesh(1.0, 100_000));
        let c = cfg(0.25, 0.01);
        let n = 1000;
        let mut diffs = Vec::with_capacity(n as usize);
        let mut paths = Vec::with_capacity(n as usize);
        for i in 0..n {
            let mut s = Stream::new(StreamKey::new(85, 0, i, 0));
            let smp = cv_pair_sample(&net, &c, &mf, &mut s);
            diffs.push(smp.g_path - smp.g_cv);
            paths.push(smp.g_path);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (vd, vp) = (var(&diffs), var(&paths));
        assert!(
            vd <= vp / 2.0,
            "cv difference variance {vd} vs path variance {vp}"
        );
    }
}
