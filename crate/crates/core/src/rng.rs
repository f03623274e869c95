//! Keyed, splittable random streams. Every path, level, and coupling block
//! owns a stream addressed by a `StreamKey`, so replays are independent of
//! worker layout and execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub level: u32,
    pub path_index: u64,
    pub substream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(master_seed: u64, level: u32, path_index: u64, substream: u64) -> Self {
        StreamKey {
            master_seed,
            level,
            path_index,
            substream,
        }
    }

    pub fn with_substream(self, substream: u64) -> Self {
        StreamKey { substream, ..self }
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut words = [0u64; 4];
        let mut acc = splitmix64(self.master_seed);
        acc = splitmix64(acc ^ self.level as u64);
        acc = splitmix64(acc ^ self.path_index);
        acc = splitmix64(acc ^ self.substream);
        for w in &mut words {
            acc = splitmix64(acc);
            *w = acc;
        }
        let mut bytes = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            bytes[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        bytes
    }
}

/// A deterministic random stream with the variate kinds the simulators need.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(key: StreamKey) -> Self {
        Stream {
            rng: ChaCha8Rng::from_seed(key.seed_bytes()),
        }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.gen();
            if u > 0.0 && u < 1.0 {
                return u;
            }
        }
    }

    /// Exponential with the given rate; rate 0 returns +inf.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        assert!(rate >= 0.0, "exponential rate must be non-negative: {rate}");
        if rate == 0.0 {
            return f64::INFINITY;
        }
        -self.uniform().ln() / rate
    }

    /// Unit-rate exponential.
    pub fn exp1(&mut self) -> f64 {
        -self.uniform().ln()
    }

    pub fn poisson(&mut self, lambda: f64) -> u64 {
        assert!(
            lambda >= 0.0 && lambda.is_finite(),
            "poisson rate must be finite and non-negative: {lambda}"
        );
        if lambda == 0.0 {
            return 0;
        }
        Poisson::new(lambda).unwrap().sample(&mut self.rng) as u64
    }

    pub fn binomial(&mut self, n: u64, p: f64) -> u64 {
        assert!((0.0..=1.0).contains(&p), "binomial p out of [0,1]: {p}");
        if n == 0 || p == 0.0 {
            return 0;
        }
        if p == 1.0 {
            return n;
        }
        Binomial::new(n, p).unwrap().sample(&mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn same_key_same_sequence() {
        let key = StreamKey::new(42, 3, 17, 5);
        let mut a = Stream::new(key);
        let mut b = Stream::new(key);
        for _ in 0..200 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut a = Stream::new(key);
        let mut b = Stream::new(key);
        for _ in 0..50 {
            assert_eq!(a.poisson(7.3), b.poisson(7.3));
            assert_eq!(a.binomial(20, 0.3), b.binomial(20, 0.3));
        }
    }

    #[test]
    fn distinct_keys_differ() {
        let base = StreamKey::new(42, 0, 0, 0);
        let mut a = Stream::new(base);
        let mut b = Stream::new(base.with_substream(1));
        let same = (0..100).filter(|_| a.uniform() == b.uniform()).count();
        assert!(same == 0);
    }

    #[test]
    fn degenerate_parameters() {
        let mut s = Stream::new(StreamKey::new(1, 0, 0, 0));
        assert_eq!(s.poisson(0.0), 0);
        assert_eq!(s.binomial(7, 1.0), 7);
        assert_eq!(s.binomial(7, 0.0), 0);
        assert!(s.exponential(0.0).is_infinite());
    }

    #[test]
    fn poisson_mean_clt_band() {
        let mut s = Stream::new(StreamKey::new(7, 0, 0, 0));
        let n = 1_000_000usize;
        let sum: u64 = (0..n).map(|_| s.poisson(4.0)).sum();
        let mean = sum as f64 / n as f64;
        // Var = 4, 3 sigma band of the sample mean = 3*2/1000
        assert!((mean - 4.0).abs() <= 3.0 * 2.0 / 1000.0, "mean {mean}");
    }

    #[test]
    fn binomial_moments_clt() {
        let mut s = Stream::new(StreamKey::new(8, 0, 0, 0));
        let (n_draws, n, p) = (200_000usize, 40u64, 0.35f64);
        let draws: Vec<f64> = (0..n_draws).map(|_| s.binomial(n, p) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n_draws as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
        let m = n as f64 * p;
        let v = m * (1.0 - p);
        assert!((mean - m).abs() <= 3.0 * v.sqrt() / (n_draws as f64).sqrt());
        // variance of sample variance approx 2 v^2 / n for near-normal draws
        assert!((var - v).abs() <= 4.0 * v * (2.0 / n_draws as f64).sqrt());
    }

    fn poisson_pmf(lambda: f64, k: u64) -> f64 {
        let mut logp = -lambda;
        for i in 1..=k {
            logp += (lambda / i as f64).ln();
        }
        logp.exp()
    }

    #[test]
    fn poisson_chi_squared_gof() {
        for (case, lambda) in [(0u64, 0.5f64), (1, 5.0), (2, 50.0)] {
            let mut s = Stream::new(StreamKey::new(100 + case, 0, 0, 0));
            let n = 100_000usize;
            // bins 0..=kmax with a tail bin
            let kmax = (lambda + 6.0 * lambda.sqrt()).ceil() as u64 + 2;
            let mut counts = vec![0u64; kmax as usize + 2];
            for _ in 0..n {
                let k = s.poisson(lambda).min(kmax + 1);
                counts[k as usize] += 1;
            }
            // merge bins with expected < 5
            let mut chi2 = 0.0;
            let mut dof: i64 = -1;
            let mut acc_obs = 0.0;
            let mut acc_exp = 0.0;
            let mut tail = 1.0;
            for k in 0..=kmax {
                let pk = poisson_pmf(lambda, k);
                tail -= pk;
                acc_obs += counts[k as usize] as f64;
                acc_exp += pk * n as f64;
                if acc_exp >= 5.0 {
                    chi2 += (acc_obs - acc_exp).powi(2) / acc_exp;
                    dof += 1;
                    acc_obs = 0.0;
                    acc_exp = 0.0;
                }
            }
            acc_obs += counts[kmax as usize + 1] as f64;
            acc_exp += tail.max(0.0) * n as f64;
            if acc_exp >= 5.0 {
                chi2 += (acc_obs - acc_exp).powi(2) / acc_exp;
                dof += 1;
            }
            assert!(dof >= 1, "degenerate binning for lambda={lambda}");
            let crit = ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - 1e-3);
            assert!(
                chi2 <= crit,
                "chi2 gof failed for lambda={lambda}: chi2={chi2:.2} > crit={crit:.2} (dof={dof})"
            );
        }
    }
}
