use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NoisePredictor, NoiseSchedule};
use crate::conditioner::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Models;
use crate::nn::Scalar;

/// Isotropic Gaussian over `x_{t−1}` given `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStepDistribution<S> {
    pub mean: Vec<S>,
    pub std: f64,
}

/// `log N(x; mean, std²·I)`, accumulated in f64.
pub fn gaussian_log_prob<S: Scalar>(x: &[S], mean: &[S], std: f64) -> Result<f64> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("standard deviation must be positive, got {std}")));
    }
    if x.len() != mean.len() {
        return Err(Error::shape(format!("x has {} values, mean {}", x.len(), mean.len())));
    }
    let d = x.len() as f64;
    let sq: f64 = x
        .iter()
        .zip(mean)
        .map(|(&a, &m)| {
            let r = a.as_f64() - m.as_f64();
            r * r
        })
        .sum();
    Ok(-sq / (2.0 * std * std) - d * std.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// `∂ log N / ∂mean`.
pub fn gaussian_log_prob_grad<S: Scalar>(x: &[S], mean: &[S], std: f64) -> Vec<S> {
    let inv = S::lit(1.0 / (std * std));
    x.iter().zip(mean).map(|(&a, &m)| (a - m) * inv).collect()
}

/// Noise prediction for a batch, with classifier-free guidance
/// `ε̂ = ε_u + g·(ε_c − ε_u)`. At `g = 1` only the conditional branch runs.
///
/// `cond` and `uncond` hold one pooled embedding per image.
pub fn guided_noise<S: Scalar, P: NoisePredictor<S> + ?Sized>(
    predictor: &P,
    x: &[S],
    ts: &[usize],
    cond: &[S],
    uncond: &[S],
    guidance: f64,
) -> Vec<S> {
    if guidance == 1.0 {
        return predictor.predict(x, ts, cond);
    }
    let (xx, tt, cc) = guided_batch(x, ts, cond, uncond);
    let out = predictor.predict(&xx, &tt, &cc);
    let (ec, eu) = out.split_at(x.len());
    combine_guidance(ec, eu, guidance)
}

/// Stack conditional and unconditional inputs into one batch (conditional first).
pub(crate) fn guided_batch<S: Scalar>(x: &[S], ts: &[usize], cond: &[S], uncond: &[S]) -> (Vec<S>, Vec<usize>, Vec<S>) {
    let mut xx = x.to_vec();
    xx.extend_from_slice(x);
    let mut tt = ts.to_vec();
    tt.extend_from_slice(ts);
    let mut cc = cond.to_vec();
    cc.extend_from_slice(uncond);
    (xx, tt, cc)
}

pub(crate) fn combine_guidance<S: Scalar>(ec: &[S], eu: &[S], guidance: f64) -> Vec<S> {
    let g = S::lit(guidance);
    ec.iter().zip(eu).map(|(&c, &u)| u + g * (c - u)).collect()
}

/// DDPM posterior mean `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn posterior_mean<S: Scalar>(x_t: &[S], eps: &[S], t: usize, sched: &NoiseSchedule) -> Vec<S> {
    let (a, b) = sched.mean_coefficients(t);
    let (a, b) = (S::lit(a), S::lit(b));
    x_t.iter().zip(eps).map(|(&x, &e)| a * x - b * e).collect()
}

/// One reverse transition for a single image.
pub fn reverse_step<S: Scalar, P: NoisePredictor<S> + ?Sized>(
    x_t: &[S],
    t: usize,
    cond: &[S],
    uncond: &[S],
    predictor: &P,
    sched: &NoiseSchedule,
    guidance: f64,
) -> Result<ReverseStepDistribution<S>> {
    sched.check_t(t)?;
    if x_t.len() != predictor.image_len() || cond.len() != predictor.cond_dim() || uncond.len() != cond.len() {
        return Err(Error::shape("reverse_step input sizes do not match the predictor"));
    }
    let eps = guided_noise(predictor, x_t, &[t], cond, uncond, guidance);
    Ok(ReverseStepDistribution {
        mean: posterior_mean(x_t, &eps, t, sched),
        std: sched.sigma(t),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep<S> {
    pub t: usize,
    pub mean: Vec<S>,
    pub std: f64,
    pub log_prob_old: f64,
}

/// A sampled denoising chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub prompt: String,
    pub z: ConditioningEmbedding<S>,
    pub seed: u64,
    pub guidance: f64,
    /// `x_T, x_{T−1}, …, x_0`.
    pub states: Vec<Vec<S>>,
    /// Ordered `t = T, …, 1`; step `k` maps `states[k]` to `states[k + 1]`.
    pub steps: Vec<TrajectoryStep<S>>,
    pub reward: Option<f64>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn x0(&self) -> &[S] {
        self.states.last().expect("trajectory has states")
    }

    /// Final sample as an image clamped to `[0, 1]`.
    pub fn image(&self, size: usize) -> Image {
        Image::from_model(self.x0(), size, size).clamped()
    }
}

/// States and per-step records of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain<S> {
    pub states: Vec<Vec<S>>,
    pub steps: Vec<TrajectoryStep<S>>,
}

pub(crate) fn normal_vec<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z)
        })
        .collect()
}

/// Run independent ancestral chains in lock-step, one RNG per chain.
///
/// `cond` holds one pooled embedding per seed; `uncond` is a single pooled
/// embedding shared by all chains. Each chain draws `x_T` and then one noise
/// vector per step from `ChaCha8Rng::seed_from_u64(seed)`, so its result does
/// not depend on which other chains run alongside it.
pub fn sample_chains<S: Scalar, P: NoisePredictor<S> + ?Sized>(
    predictor: &P,
    cond: &[S],
    uncond: &[S],
    sched: &NoiseSchedule,
    guidance: f64,
    seeds: &[u64],
) -> Result<Vec<Chain<S>>> {
    let (n, len, cd) = (seeds.len(), predictor.image_len(), predictor.cond_dim());
    if cond.len() != n * cd || uncond.len() != cd {
        return Err(Error::shape("conditioning does not match the number of chains"));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut chains: Vec<Chain<S>> = rngs
        .iter_mut()
        .map(|r| Chain {
            states: vec![normal_vec(r, len)],
            steps: Vec::with_capacity(sched.steps),
        })
        .collect();
    let unconds: Vec<S> = (0..n).flat_map(|_| uncond.iter().copied()).collect();
    for t in (1..=sched.steps).rev() {
        let x: Vec<S> = chains.iter().flat_map(|c| c.states.last().unwrap().iter().copied()).collect();
        let eps = guided_noise(predictor, &x, &vec![t; n], cond, &unconds, guidance);
        let std = sched.sigma(t);
        let sd = S::lit(std);
        for (i, (chain, rng)) in chains.iter_mut().zip(&mut rngs).enumerate() {
            let mean = posterior_mean(&x[i * len..(i + 1) * len], &eps[i * len..(i + 1) * len], t, sched);
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite reverse mean at t={t}")));
            }
            let noise: Vec<S> = normal_vec(rng, len);
            let next: Vec<S> = mean.iter().zip(&noise).map(|(&m, &z)| m + sd * z).collect();
            let log_prob_old = gaussian_log_prob(&next, &mean, std)?;
            chain.steps.push(TrajectoryStep {
                t,
                mean,
                std,
                log_prob_old,
            });
            chain.states.push(next);
        }
    }
    Ok(chains)
}

/// Sample one trajectory per `(prompt, seed)` pair.
pub fn sample_trajectories<S: Scalar>(
    prompts: &[String],
    seeds: &[u64],
    models: &Models<S>,
    sched: &NoiseSchedule,
    guidance: f64,
) -> Result<Vec<Trajectory<S>>> {
    if prompts.len() != seeds.len() {
        return Err(Error::invalid("one seed per prompt required"));
    }
    let uncond = models.encode("")?.pooled();
    let mut zs = Vec::with_capacity(prompts.len());
    let mut cond = Vec::new();
    for p in prompts {
        let z = models.encode(p)?;
        cond.extend(z.pooled());
        zs.push(z);
    }
    let chains = sample_chains(&models.denoiser, &cond, &uncond, sched, guidance, seeds)?;
    Ok(chains
        .into_iter()
        .zip(zs)
        .zip(prompts.iter().zip(seeds))
        .map(|((c, z), (p, &seed))| Trajectory {
            prompt: p.clone(),
            z,
            seed,
            guidance,
            states: c.states,
            steps: c.steps,
            reward: None,
        })
        .collect())
}

pub fn sample_trajectory<S: Scalar>(
    prompt: &str,
    models: &Models<S>,
    sched: &NoiseSchedule,
    guidance: f64,
    seed: u64,
) -> Result<Trajectory<S>> {
    Ok(sample_trajectories(&[prompt.to_string()], &[seed], models, sched, guidance)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;

    /// Predicts the same value everywhere.
    struct Constant(f64, usize);

    impl NoisePredictor<f64> for Constant {
        fn image_len(&self) -> usize {
            self.1
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &[f64], _: &[usize], cond: &[f64]) -> Vec<f64> {
            // conditioning shifts the prediction so guidance is observable
            let n = cond.len();
            (0..x.len()).map(|i| self.0 + cond[i * n / x.len()]).collect()
        }
    }

    #[test]
    fn log_prob_textbook_values() {
        let v = gaussian_log_prob(&[0.0f64; 4], &[0.0; 4], 1.0).unwrap();
        assert!((v + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let v = gaussian_log_prob(&[1.0f64], &[0.0], 1.0).unwrap();
        assert!((v + 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(gaussian_log_prob(&[1.0f64], &[0.0], 0.0).is_err());
        assert!(gaussian_log_prob(&[1.0f64], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn one_pixel_hand_computed_mean() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        let p = Constant(0.3, 1);
        let d = reverse_step(&[0.8], 2, &[0.0], &[0.0], &p, &s, 1.0).unwrap();
        // (x − β/√(1−ᾱ₂)·ε)/√α
        let want = (0.8 - 0.1 / (1.0f64 - 0.81).sqrt() * 0.3) / 0.9f64.sqrt();
        assert!((d.mean[0] - want).abs() < 1e-10);
        assert_eq!(d.std, s.sigma(2));
        assert!(reverse_step(&[0.8], 3, &[0.0], &[0.0], &p, &s, 1.0).is_err());
    }

    #[test]
    fn guidance_zero_and_one_collapse() {
        let s = build_schedule(3, 0.1, 0.2).unwrap();
        let p = Constant(0.1, 1);
        let (c, u) = ([0.5], [-0.2]);
        let g1 = reverse_step(&[0.4], 2, &c, &u, &p, &s, 1.0).unwrap();
        let cond_only = reverse_step(&[0.4], 2, &c, &c, &p, &s, 1.0).unwrap();
        assert_eq!(g1, cond_only);
        let g0 = reverse_step(&[0.4], 2, &c, &u, &p, &s, 0.0).unwrap();
        let uncond_only = reverse_step(&[0.4], 2, &u, &u, &p, &s, 1.0).unwrap();
        assert_eq!(g0, uncond_only);
        let g3 = reverse_step(&[0.4], 2, &c, &u, &p, &s, 3.0).unwrap();
        // ε_c = 0.6, ε_u = −0.1
        let want = posterior_mean(&[0.4], &[-0.1 + 3.0 * 0.7], 2, &s);
        assert!((g3.mean[0] - want[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_predictor_tiny_sigma_unrolls_mean_recursion() {
        let mut s = build_schedule(3, 0.1, 0.3).unwrap();
        s.posterior_sigmas.iter_mut().for_each(|v| *v = 1e-12);
        let p = Constant(0.0, 2);
        let chains = sample_chains(&p, &[0.0], &[0.0], &s, 1.0, &[17]).unwrap();
        let c = &chains[0];
        let scale = 1.0 / (s.alpha(1) * s.alpha(2) * s.alpha(3)).sqrt();
        for (x0, xt) in c.states[3].iter().zip(&c.states[0]) {
            assert!((x0 - scale * xt).abs() < 1e-9);
        }
    }

    #[test]
    fn stored_log_probs_recompute_and_chains_are_independent() {
        let s = build_schedule(4, 0.05, 0.2).unwrap();
        let p = Constant(0.2, 6);
        let together = sample_chains(&p, &[0.1, 0.3], &[0.0], &s, 2.0, &[1, 2]).unwrap();
        let alone = sample_chains(&p, &[0.3], &[0.0], &s, 2.0, &[2]).unwrap();
        assert_eq!(together[1], alone[0]);
        for c in &together {
            assert_eq!(c.steps.iter().map(|st| st.t).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
            for (k, st) in c.steps.iter().enumerate() {
                let lp = gaussian_log_prob(&c.states[k + 1], &st.mean, st.std).unwrap();
                assert!((lp - st.log_prob_old).abs() < 1e-5);
            }
        }
    }
}
