use rand::Rng;

use super::sampling::normal_vec;
use super::schedule::diffuse_with;
use super::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::nn::Scalar;
use crate::toy_world::CaptionedImage;

/// Probability that a training example is shown with the empty prompt.
pub const EMPTY_PROMPT_PROB: f64 = 0.1;

/// A batch of noised training images.
#[derive(Clone, Debug)]
pub struct NoisedBatch<S> {
    pub prompts: Vec<String>,
    pub ts: Vec<usize>,
    pub eps: Vec<S>,
    pub x_t: Vec<S>,
}

/// Draw prompt dropout, timestep and noise for every example, in that order.
pub fn noise_batch<S: Scalar, R: Rng + ?Sized>(
    batch: &[CaptionedImage],
    sched: &NoiseSchedule,
    rng: &mut R,
    empty_prob: f64,
) -> Result<NoisedBatch<S>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut out = NoisedBatch {
        prompts: Vec::with_capacity(batch.len()),
        ts: Vec::with_capacity(batch.len()),
        eps: Vec::new(),
        x_t: Vec::new(),
    };
    for item in batch {
        let drop = rng.random::<f64>() < empty_prob;
        out.prompts.push(if drop { String::new() } else { item.caption.clone() });
        let t = rng.random_range(1..=sched.steps);
        out.ts.push(t);
        let x0 = item.image.to_model::<S>();
        let eps: Vec<S> = normal_vec(rng, x0.len());
        out.x_t.extend(diffuse_with(&x0, &eps, sched.alpha_bar(t)));
        out.eps.extend(eps);
    }
    Ok(out)
}

/// Mean over the batch of `‖ε − ε̂‖²`.
pub fn denoising_loss<S: Scalar, P: NoisePredictor<S> + ?Sized>(predictor: &P, nb: &NoisedBatch<S>, cond: &[S]) -> f64 {
    let pred = predictor.predict(&nb.x_t, &nb.ts, cond);
    squared_error(&pred, &nb.eps) / nb.ts.len() as f64
}

fn squared_error<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &e)| {
            let d = p.as_f64() - e.as_f64();
            d * d
        })
        .sum()
}

/// One denoising step on `batch`: accumulates denoiser gradients (the encoder
/// is only read) and returns the loss.
pub fn pretrain_step<S: Scalar, R: Rng + ?Sized>(
    batch: &[CaptionedImage],
    models: &mut Models<S>,
    sched: &NoiseSchedule,
    rng: &mut R,
    empty_prob: f64,
) -> Result<f64> {
    let nb = noise_batch::<S, R>(batch, sched, rng, empty_prob)?;
    let mut cond = Vec::with_capacity(batch.len() * models.denoiser.cfg.cond_dim);
    for p in &nb.prompts {
        cond.extend(models.encode(p)?.pooled());
    }
    let (pred, cache) = models.denoiser.forward(&nb.x_t, &nb.ts, &cond)?;
    let n = nb.ts.len() as f64;
    let loss = squared_error(&pred, &nb.eps) / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("pretraining loss is {loss}")));
    }
    let scale = S::lit(2.0 / n);
    let dout: Vec<S> = pred.iter().zip(&nb.eps).map(|(&p, &e)| scale * (p - e)).collect();
    models.denoiser.backward(&cache, &dout, false);
    Ok(loss)
}
