use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{combine_guidance, guided_batch, normal_vec, posterior_mean, DenoiserCache, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::nn::{add_assign, Module, Scalar};
use crate::rewards::RewardSpec;
use crate::seed::derive_labeled;

struct WindowStep<S> {
    t: usize,
    cache: DenoiserCache<S>,
}

/// Truncated direct reward backpropagation through the sampling chain.
///
/// For each prompt a chain is sampled (seeded from `seed` and the prompt index)
/// without gradients down to `x_n`. Steps `t = n, …, m` are then unrolled with
/// gradients; the reward is taken on the clean-image estimate
/// `x̂0 = (x_m − √(1−ᾱ_m)·ε̂_m)/√ᾱ_m`, mapped to `[0, 1]` and clamped. The loss is
/// `−mean R(x̂0)` and its gradient is accumulated into all unfrozen parameters.
///
/// The window is inclusive; `n < m` is an empty window: the full chain is
/// sampled, its final image scored, and no gradient is produced.
pub fn direct_backprop_step<S: Scalar>(
    prompts: &[String],
    models: &mut Models<S>,
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    window: (usize, usize),
    guidance: f64,
    seed: u64,
) -> Result<f64> {
    if !reward.differentiable {
        return Err(Error::reward(
            &reward.name,
            "reward is not differentiable; direct backpropagation needs a differentiable reward",
        ));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let (m, n) = window;
    let steps = sched.steps;
    if m == 0 || m > steps + 1 || n > steps {
        return Err(Error::invalid(format!("window ({m}, {n}) outside [1, {steps}]")));
    }
    let empty_window = n < m;
    let b = prompts.len();
    let len = models.denoiser.cfg.image_len();
    let cd = models.denoiser.cfg.cond_dim;
    let size = models.denoiser.cfg.image_size;

    let mut encoded = Vec::with_capacity(b + 1);
    for p in prompts.iter().map(String::as_str).chain(std::iter::once("")) {
        encoded.push(models.encode_with_cache(p)?);
    }
    let cond: Vec<S> = encoded[..b].iter().flat_map(|(z, _)| z.pooled()).collect();
    let un = encoded[b].0.pooled();
    let uncond: Vec<S> = (0..b).flat_map(|_| un.iter().copied()).collect();
    let guided = guidance != 1.0;

    let mut rngs: Vec<ChaCha8Rng> = (0..b as u64)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_labeled(seed, "direct", i)))
        .collect();
    let mut x: Vec<S> = rngs.iter_mut().flat_map(|r| normal_vec::<S, _>(r, len)).collect();

    let predict = |models: &Models<S>, x: &[S], t: usize| -> Result<(Vec<S>, DenoiserCache<S>)> {
        let ts = vec![t; b];
        let (out, cache) = if guided {
            let (xx, tt, cc) = guided_batch(x, &ts, &cond, &uncond);
            models.denoiser.forward(&xx, &tt, &cc)?
        } else {
            models.denoiser.forward(x, &ts, &cond)?
        };
        let eps = if guided {
            combine_guidance(&out[..b * len], &out[b * len..], guidance)
        } else {
            out
        };
        Ok((eps, cache))
    };
    let advance = |x: &[S], eps: &[S], t: usize, rngs: &mut [ChaCha8Rng]| -> Vec<S> {
        let sd = S::lit(sched.sigma(t));
        let mut next = Vec::with_capacity(x.len());
        for (i, rng) in rngs.iter_mut().enumerate() {
            let mean = posterior_mean(&x[i * len..(i + 1) * len], &eps[i * len..(i + 1) * len], t, sched);
            let z: Vec<S> = normal_vec(rng, len);
            next.extend(mean.iter().zip(&z).map(|(&mu, &e)| mu + sd * e));
        }
        next
    };

    let first_grad_step = if empty_window { 0 } else { n };
    for t in (first_grad_step + 1..=steps).rev() {
        let (eps, _) = predict(models, &x, t)?;
        x = advance(&x, &eps, t, &mut rngs);
    }
    if empty_window {
        let mut total = 0.0;
        for (i, p) in prompts.iter().enumerate() {
            let img = crate::image::Image::from_model(&x[i * len..(i + 1) * len], size, size).clamped();
            total += reward.evaluate(&img, p)?;
        }
        return Ok(-total / b as f64);
    }

    // differentiable unroll t = n … m
    let mut window_steps = Vec::with_capacity(n - m + 1);
    let mut x0_hat = Vec::new();
    for t in (m..=n).rev() {
        let (eps, cache) = predict(models, &x, t)?;
        window_steps.push(WindowStep { t, cache });
        if t == m {
            let (a, c) = sched.x0_coefficients(t);
            let (a, c) = (S::lit(a), S::lit(c));
            x0_hat = x.iter().zip(&eps).map(|(&xv, &e)| a * xv - c * e).collect();
        } else {
            x = advance(&x, &eps, t, &mut rngs);
        }
    }

    // reward on x̂0 in image space
    let hw = size * size;
    let mut loss = 0.0;
    let mut g = vec![S::zero(); b * len];
    for (i, p) in prompts.iter().enumerate() {
        let xi = &x0_hat[i * len..(i + 1) * len];
        let mut data = vec![0.0f64; len];
        for px in 0..hw {
            for ch in 0..3 {
                data[px * 3 + ch] = ((xi[ch * hw + px].as_f64() + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        let (r, dr) = reward.value_and_grad(&data, size, size, p)?;
        if !r.is_finite() {
            return Err(Error::Numerical(format!("reward is {r}")));
        }
        loss -= r / b as f64;
        for px in 0..hw {
            for ch in 0..3 {
                let v = (xi[ch * hw + px].as_f64() + 1.0) * 0.5;
                if (0.0..=1.0).contains(&v) {
                    g[i * len + ch * hw + px] = S::lit(-0.5 * dr[px * 3 + ch] / b as f64);
                }
            }
        }
    }

    // backward through the window, t = m … n
    let want_encoder = models.encoder.any_trainable();
    let mut dcond = vec![S::zero(); b * cd];
    let mut duncond = vec![S::zero(); cd];
    for ws in window_steps.iter().rev() {
        let (a, c) = if ws.t == m {
            sched.x0_coefficients(ws.t)
        } else {
            sched.mean_coefficients(ws.t)
        };
        let deps: Vec<S> = g.iter().map(|&v| S::lit(-c) * v).collect();
        let dout = if guided {
            let (gc, gu) = (S::lit(guidance), S::lit(1.0 - guidance));
            let mut d: Vec<S> = deps.iter().map(|&v| gc * v).collect();
            d.extend(deps.iter().map(|&v| gu * v));
            d
        } else {
            deps
        };
        let need_dx = ws.t < n;
        let grads = models.denoiser.backward(&ws.cache, &dout, need_dx);
        add_assign(&mut dcond, &grads.dcond[..b * cd]);
        if guided {
            for i in 0..b {
                add_assign(&mut duncond, &grads.dcond[(b + i) * cd..(b + i + 1) * cd]);
            }
        }
        if need_dx {
            let dx = grads.dx.expect("requested");
            let mut next: Vec<S> = g.iter().map(|&v| S::lit(a) * v).collect();
            add_assign(&mut next, &dx[..b * len]);
            if guided {
                add_assign(&mut next, &dx[b * len..]);
            }
            g = next;
        }
    }
    if want_encoder {
        for (i, (z, cache)) in encoded[..b].iter().enumerate() {
            let dz = z.pooled_backward(&dcond[i * cd..(i + 1) * cd]);
            models.encoder.backward(cache, &dz);
        }
        if guided {
            let (z, cache) = &encoded[b];
            let dz = z.pooled_backward(&duncond);
            models.encoder.backward(cache, &dz);
        }
    }
    Ok(loss)
}
