use serde::{Deserialize, Serialize};

use crate::error::{MmdError, Result};

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.9;

/// Exponentially spaced variance schedule. Index `k` runs `1..=K`; `beta(k)`
/// grows with `k`, so `alpha_bar(k)` strictly decreases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl VarianceSchedule {
    pub fn exponential(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(MmdError::InvalidInput("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(MmdError::InvalidInput(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_end]
        } else {
            let ratio = (beta_end / beta_start).ln() / (steps - 1) as f64;
            (0..steps).map(|i| beta_start * (ratio * i as f64).exp()).collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(VarianceSchedule {
            betas,
            alpha_bars,
            beta_start,
            beta_end,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(MmdError::InvalidInput(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// Cumulative product of alphas up to `k`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Coefficients `(c_x0, c_xk, variance)` of the Gaussian posterior
    /// `q(x_{k-1} | x_k, x_0)`. Variance is zero at `k = 1`.
    pub fn posterior(&self, k: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        let beta = self.beta(k);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = self.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ck, var)
    }

    /// `sqrt(alpha_bar_k) * x0 + sqrt(1 - alpha_bar_k) * noise`, element-wise.
    pub fn forward_noise(&self, x0: &[f64], k: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check(k)?;
        if x0.len() != noise.len() {
            return Err(MmdError::InvalidInput("noise and trajectory sizes differ".into()));
        }
        let ab = self.alpha_bar(k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
    }
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        VarianceSchedule::exponential(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = VarianceSchedule::default();
        assert_eq!(s.steps(), 25);
        for k in 1..=s.steps() {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(25) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_limits() {
        let s = VarianceSchedule::default();
        let x0 = vec![0.5, -1.0, 2.0];
        let zero = vec![0.0; 3];
        let out = s.forward_noise(&x0, 7, &zero).unwrap();
        let a = s.alpha_bar(7).sqrt();
        for (o, x) in out.iter().zip(&x0) {
            assert_eq!(*o, a * x);
        }
        // k = 1: noise floor sqrt(1e-4) = 0.01.
        let noise = vec![1.0, -2.0, 0.5];
        let out = s.forward_noise(&x0, 1, &noise).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert!((o - x).abs() <= 3.0 * 0.01 + 1e-4 * x.abs());
        }
        assert!(s.forward_noise(&x0, 0, &zero).is_err());
        assert!(s.forward_noise(&x0, 26, &zero).is_err());
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = VarianceSchedule::default();
        let k = 12;
        let n = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x0 = [0.7];
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = s.forward_noise(&x0, k, &[e]).unwrap()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let expected = 1.0 - s.alpha_bar(k);
        assert!((var - expected).abs() / expected < 0.01, "{var} vs {expected}");
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = VarianceSchedule::default();
        let (c0, ck, var) = s.posterior(1);
        assert!((c0 - 1.0).abs() < 1e-12);
        assert!(ck.abs() < 1e-12);
        assert_eq!(var, 0.0);
    }
}
