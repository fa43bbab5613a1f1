use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Linear β schedule with the quantities derived from it.
///
/// Per-step arrays are indexed by `t - 1` for `t ∈ [1, T]`; use the accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Reverse-step standard deviation σ_t.
    pub posterior_sigmas: Vec<f64>,
}

/// β_t interpolated linearly from `beta_min` (t = 1) to `beta_max` (t = T).
///
/// σ_t² is the DDPM posterior variance `(1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`. That is zero
/// at t = 1, which would make the last transition deterministic and its
/// log-density undefined, so σ_1 is set to σ_2.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!("need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let mut posterior_sigmas = vec![0.0; steps];
    for i in 1..steps {
        let var = (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i];
        posterior_sigmas[i] = var.sqrt();
    }
    posterior_sigmas[0] = posterior_sigmas[1];
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
        posterior_sigmas,
    })
}

impl NoiseSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_sigmas[t - 1]
    }

    /// `(a, b)` such that the reverse mean is `a·x_t − b·ε̂`.
    pub fn mean_coefficients(&self, t: usize) -> (f64, f64) {
        let a = 1.0 / self.alpha(t).sqrt();
        (a, a * self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt())
    }

    /// `(a, b)` such that the clean-image estimate is `a·x_t − b·ε̂`.
    pub fn x0_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (1.0 / ab.sqrt(), ((1.0 - ab) / ab).sqrt())
    }
}

/// Closed-form marginal `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse<S: Scalar>(x0: &[S], t: usize, eps: &[S], sched: &NoiseSchedule) -> Result<Vec<S>> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} values, noise {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    Ok(diffuse_with(x0, eps, ab))
}

pub(crate) fn diffuse_with<S: Scalar>(x0: &[S], eps: &[S], alpha_bar: f64) -> Vec<S> {
    let (a, b) = (S::lit(alpha_bar.sqrt()), S::lit((1.0 - alpha_bar).sqrt()));
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_step_products() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.81).abs() < 1e-15);
        assert!(s.betas.iter().all(|&b| b == 0.1));
        let var2: f64 = 0.1 * 0.1 / 0.19;
        assert!((s.sigma(2) - var2.sqrt()).abs() < 1e-15);
        assert_eq!(s.sigma(1), s.sigma(2));
    }

    #[test]
    fn fifty_step_alpha_bar_matches_product() {
        let s = build_schedule(50, 1e-4, 0.02).unwrap();
        let mut p = 1.0f64;
        for i in 0..50 {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 49.0);
        }
        assert!((s.alpha_bar(50) - p).abs() < 1e-10);
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        let min = s.posterior_sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0 && s.sigma(1) == min);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(build_schedule(1, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_trivial_cases() {
        let s = build_schedule(4, 0.1, 0.2).unwrap();
        let x0 = [0.5f64, -0.25];
        let out = forward_diffuse(&x0, 3, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar(3).sqrt();
        assert_eq!(out, vec![a * 0.5, a * -0.25]);
        assert_eq!(diffuse_with(&x0, &[1.0, 1.0], 1.0), x0.to_vec());
        assert!(forward_diffuse(&x0, 3, &[0.0], &s).is_err());
        assert!(forward_diffuse(&x0, 0, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn markov_chain_matches_marginal() {
        let s = build_schedule(10, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = 0.7;
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x: f64 = x0;
            for t in 1..=10 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = s.alpha(t).sqrt() * x + s.beta(t).sqrt() * e;
            }
            samples.push(x);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (m_true, v_true) = (s.alpha_bar(10).sqrt() * x0, 1.0 - s.alpha_bar(10));
        assert!((mean - m_true).abs() < 3.0 * (v_true / n as f64).sqrt());
        // standard error of the sample variance is ≈ v·√(2/(n−1))
        assert!((var - v_true).abs() < 3.0 * v_true * (2.0 / (n - 1) as f64).sqrt());
    }
}
