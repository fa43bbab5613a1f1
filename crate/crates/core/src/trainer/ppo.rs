use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::rollout::{mean_std, Baseline, RolloutBuffer};
use crate::diffusion::{combine_guidance, gaussian_log_prob, guided_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Models, PolicyTarget};
use crate::nn::{clip_grad_norm, Adam, Scalar};

/// Clipped-PPO settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs_per_buffer: usize,
    pub rollouts_per_buffer: usize,
    /// Minibatch size in `(trajectory, step)` samples.
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub policy_target: PolicyTarget,
    pub grad_clip_norm: f64,
    pub total_buffers: usize,
    pub baseline: Baseline,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.1,
            epochs_per_buffer: 2,
            rollouts_per_buffer: 64,
            minibatch_size: 128,
            learning_rate: 1e-4,
            policy_target: PolicyTarget::TextEncoder,
            grad_clip_norm: 1.0,
            total_buffers: 30,
            baseline: Baseline::Buffer,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if self.epochs_per_buffer == 0 || self.rollouts_per_buffer == 0 || self.minibatch_size == 0 || self.total_buffers == 0 {
            return Err(Error::Config("PPO counts must all be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("learning rate and grad clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Statistics of one pass over a buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    /// Mean pre-clipping gradient norm over minibatches.
    pub grad_norm: f64,
    /// Samples whose ratio was not finite.
    pub skipped: usize,
    pub first_minibatch_clip_fraction: f64,
    pub first_minibatch_max_ratio_deviation: f64,
}

pub fn ppo_ratio(log_prob_new: f64, log_prob_old: f64) -> f64 {
    (log_prob_new - log_prob_old).exp()
}

/// `min(r·A, clip(r, 1−λ, 1+λ)·A)`.
pub fn ppo_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`ppo_objective`] with respect to `log p_new`: `r·A` where the
/// unclipped term is active, otherwise 0.
pub fn ppo_objective_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// Recompute `log p(x_{t−1} | x_t, z)` for the given samples under the current
/// parameters, then backpropagate `coeff(log_probs)[j]·∂log p_j` into every
/// unfrozen parameter (gradients accumulate).
///
/// The text encoder is re-run for every distinct prompt so gradients reach it
/// through both the conditional and the empty-prompt branch of guidance.
pub fn log_probs_backward<S: Scalar, F>(
    models: &mut Models<S>,
    buffer: &RolloutBuffer<S>,
    samples: &[(usize, usize)],
    sched: &NoiseSchedule,
    coeff: F,
) -> Result<Vec<f64>>
where
    F: FnOnce(&[f64]) -> Vec<f64>,
{
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let guidance = buffer.trajectories[samples[0].0].guidance;
    if samples.iter().any(|&(i, _)| buffer.trajectories[i].guidance != guidance) {
        return Err(Error::invalid("minibatch mixes guidance scales"));
    }
    let len = models.denoiser.cfg.image_len();
    let cd = models.denoiser.cfg.cond_dim;
    let want_encoder = {
        use crate::nn::Module;
        models.encoder.any_trainable()
    };

    // distinct prompts, empty prompt last
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for &(i, _) in samples {
        let p = buffer.trajectories[i].prompt.as_str();
        let next = index.len();
        index.entry(p).or_insert(next);
    }
    let mut prompts: Vec<&str> = vec![""; index.len()];
    for (p, &k) in &index {
        prompts[k] = p;
    }
    let mut encoded = Vec::with_capacity(prompts.len() + 1);
    for p in prompts.iter().chain(std::iter::once(&"")) {
        encoded.push(models.encode_with_cache(p)?);
    }
    let pooled: Vec<Vec<S>> = encoded.iter().map(|(z, _)| z.pooled()).collect();
    let empty = prompts.len();

    let m = samples.len();
    let mut x = Vec::with_capacity(m * len);
    let mut ts = Vec::with_capacity(m);
    let mut cond = Vec::with_capacity(m * cd);
    let mut uncond = Vec::with_capacity(m * cd);
    let mut which = Vec::with_capacity(m);
    for &(i, k) in samples {
        let tr = &buffer.trajectories[i];
        x.extend_from_slice(&tr.states[k]);
        ts.push(tr.steps[k].t);
        let pi = index[tr.prompt.as_str()];
        cond.extend_from_slice(&pooled[pi]);
        uncond.extend_from_slice(&pooled[empty]);
        which.push(pi);
    }
    let guided = guidance != 1.0;
    let (out, cache) = if guided {
        let (xx, tt, cc) = guided_batch(&x, &ts, &cond, &uncond);
        models.denoiser.forward(&xx, &tt, &cc)?
    } else {
        models.denoiser.forward(&x, &ts, &cond)?
    };
    let eps = if guided {
        combine_guidance(&out[..m * len], &out[m * len..], guidance)
    } else {
        out
    };

    let mut log_probs = Vec::with_capacity(m);
    let mut means = Vec::with_capacity(m);
    for (j, &(i, k)) in samples.iter().enumerate() {
        let tr = &buffer.trajectories[i];
        let t = tr.steps[k].t;
        let mean = crate::diffusion::posterior_mean(&x[j * len..(j + 1) * len], &eps[j * len..(j + 1) * len], t, sched);
        log_probs.push(gaussian_log_prob(&tr.states[k + 1], &mean, tr.steps[k].std)?);
        means.push(mean);
    }

    let c = coeff(&log_probs);
    assert_eq!(c.len(), m, "one coefficient per sample");
    if c.iter().all(|&v| v == 0.0) {
        return Ok(log_probs);
    }
    // ∂/∂ε̂ of Σ c_j·log p_j
    let mut deps = vec![S::zero(); m * len];
    for (j, &(i, k)) in samples.iter().enumerate() {
        let tr = &buffer.trajectories[i];
        let step = &tr.steps[k];
        let (_, b) = sched.mean_coefficients(step.t);
        let scale = S::lit(-c[j] * b / (step.std * step.std));
        let next = &tr.states[k + 1];
        for ((d, &xn), &mu) in deps[j * len..(j + 1) * len].iter_mut().zip(next).zip(&means[j]) {
            *d = scale * (xn - mu);
        }
    }
    let dout = if guided {
        let (gc, gu) = (S::lit(guidance), S::lit(1.0 - guidance));
        let mut d: Vec<S> = deps.iter().map(|&v| gc * v).collect();
        d.extend(deps.iter().map(|&v| gu * v));
        d
    } else {
        deps
    };
    let grads = models.denoiser.backward(&cache, &dout, false);
    if want_encoder {
        let mut dpooled = vec![vec![S::zero(); cd]; prompts.len() + 1];
        for (j, &pi) in which.iter().enumerate() {
            crate::nn::add_assign(&mut dpooled[pi], &grads.dcond[j * cd..(j + 1) * cd]);
            if guided {
                crate::nn::add_assign(&mut dpooled[empty], &grads.dcond[(m + j) * cd..(m + j + 1) * cd]);
            }
        }
        for ((z, ecache), dp) in encoded.iter().zip(&dpooled) {
            if dp.iter().any(|v| *v != S::zero()) {
                let dz = z.pooled_backward(dp);
                models.encoder.backward(ecache, &dz);
            }
        }
    }
    Ok(log_probs)
}

/// Statistics of one minibatch gradient computation.
#[derive(Clone, Debug, PartialEq)]
pub struct MinibatchStats {
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
    /// Negated mean objective (the minimised quantity).
    pub loss: f64,
    pub skipped: usize,
}

/// Accumulate the gradient of `−mean_j ppo_objective(r_j, A_j, λ)` over `samples`.
pub fn ppo_gradient<S: Scalar>(
    models: &mut Models<S>,
    buffer: &RolloutBuffer<S>,
    samples: &[(usize, usize)],
    sched: &NoiseSchedule,
    clip: f64,
) -> Result<MinibatchStats> {
    let m = samples.len() as f64;
    let mut stats = MinibatchStats {
        ratios: Vec::new(),
        clip_fraction: 0.0,
        loss: 0.0,
        skipped: 0,
    };
    log_probs_backward(models, buffer, samples, sched, |lps| {
        let mut coeffs = Vec::with_capacity(lps.len());
        let mut clipped = 0usize;
        let mut obj = 0.0;
        for (&lp, &(i, k)) in lps.iter().zip(samples) {
            let r = ppo_ratio(lp, buffer.trajectories[i].steps[k].log_prob_old);
            let a = buffer.advantages[i];
            stats.ratios.push(r);
            if !r.is_finite() {
                stats.skipped += 1;
                coeffs.push(0.0);
                continue;
            }
            if (r - 1.0).abs() > clip {
                clipped += 1;
            }
            obj += ppo_objective(r, a, clip);
            coeffs.push(-ppo_objective_grad(r, a, clip) / m);
        }
        stats.clip_fraction = clipped as f64 / m;
        stats.loss = -obj / m;
        coeffs
    })?;
    if !stats.loss.is_finite() {
        return Err(Error::Numerical(format!("policy loss is {}", stats.loss)));
    }
    Ok(stats)
}

/// `epochs_per_buffer` shuffled passes of clipped-PPO minibatch updates.
pub fn ppo_update<S: Scalar, R: Rng + ?Sized>(
    buffer: &RolloutBuffer<S>,
    models: &mut Models<S>,
    sched: &NoiseSchedule,
    cfg: &PpoConfig,
    opt: &mut Adam<S>,
    rng: &mut R,
) -> Result<Vec<UpdateStats>> {
    let (mean_reward, _) = mean_std(&buffer.rewards());
    let mut out = Vec::with_capacity(cfg.epochs_per_buffer);
    for epoch in 0..cfg.epochs_per_buffer {
        let mut samples = buffer.samples();
        samples.shuffle(rng);
        let (mut ratio_sum, mut ratio_n, mut clip_sum, mut loss_sum, mut norm_sum) = (0.0, 0usize, 0.0, 0.0, 0.0);
        let mut skipped = 0;
        let mut first = (0.0, 0.0);
        let batches: Vec<&[(usize, usize)]> = samples.chunks(cfg.minibatch_size).collect();
        for (bi, mb) in batches.iter().enumerate() {
            models.zero_grad();
            let st = ppo_gradient(models, buffer, mb, sched, cfg.clip)?;
            let finite: Vec<f64> = st.ratios.iter().copied().filter(|r| r.is_finite()).collect();
            if bi == 0 {
                let dev = finite.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
                first = (st.clip_fraction, dev);
            }
            ratio_sum += finite.iter().sum::<f64>();
            ratio_n += finite.len();
            clip_sum += st.clip_fraction;
            loss_sum += st.loss;
            skipped += st.skipped;
            let norm = clip_grad_norm(&mut models.modules_mut(), cfg.grad_clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("gradient norm is {norm}")));
            }
            norm_sum += norm;
            opt.step(&mut models.modules_mut());
        }
        let nb = batches.len() as f64;
        out.push(UpdateStats {
            epoch,
            mean_reward,
            mean_ratio: if ratio_n > 0 { ratio_sum / ratio_n as f64 } else { f64::NAN },
            clip_fraction: clip_sum / nb,
            policy_loss: loss_sum / nb,
            grad_norm: norm_sum / nb,
            skipped,
            first_minibatch_clip_fraction: first.0,
            first_minibatch_max_ratio_deviation: first.1,
        });
    }
    models.zero_grad();
    Ok(out)
}
