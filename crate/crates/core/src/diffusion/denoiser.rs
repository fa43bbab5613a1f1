use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::LoraHost;
use crate::nn::{
    add_assign, add_channel_bias, channel_bias_grad, concat_channels, join, nchw_to_rows, rows_to_nchw, silu,
    silu_backward, split_channels, upsample2, upsample2_backward, Conv2d, Linear, LinearCache, Module, Param, Scalar,
    Visit,
};

pub const ROOT: &str = "denoiser";
const CHANNELS: usize = 3;

/// Anything that predicts the noise in `x_t` for a batch of images.
pub trait NoisePredictor<S: Scalar> {
    /// Values per image (`3·H·W`).
    fn image_len(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// `x`: `batch × image_len`, `ts`: one timestep per image, `cond`: `batch × cond_dim`.
    fn predict(&self, x: &[S], ts: &[usize], cond: &[S]) -> Vec<S>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }
}

/// Three-level convolutional encoder–decoder with skip connections.
///
/// Each level adds `time_proj(t) + cond_proj(pooled z)` as a per-channel offset.
/// The quarter-resolution bottleneck carries a residual pointwise MLP
/// (`mid_lin1`, `mid_lin2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S> {
    pub cfg: DenoiserConfig,
    time_mlp: Linear<S>,
    time_proj: [Linear<S>; 3],
    cond_proj: [Linear<S>; 3],
    conv_in: Conv2d<S>,
    conv1: Conv2d<S>,
    down1: Conv2d<S>,
    conv2: Conv2d<S>,
    down2: Conv2d<S>,
    conv_mid: Conv2d<S>,
    mid_lin1: Linear<S>,
    mid_lin2: Linear<S>,
    up2: Conv2d<S>,
    up1: Conv2d<S>,
    conv_out: Conv2d<S>,
}

pub struct DenoiserCache<S> {
    batch: usize,
    x: Vec<S>,
    time_mlp: LinearCache<S>,
    th_pre: Vec<S>,
    time_proj: Vec<LinearCache<S>>,
    cond_proj: Vec<LinearCache<S>>,
    a: [Vec<S>; 9],
    h: [Vec<S>; 5],
    mid1: LinearCache<S>,
    mid2: LinearCache<S>,
    m1: Vec<S>,
    u2in: Vec<S>,
    u1in: Vec<S>,
    h8: Vec<S>,
}

/// Input gradients from [`Denoiser::backward`].
pub struct DenoiserGrads<S> {
    pub dx: Option<Vec<S>>,
    /// `batch × cond_dim`
    pub dcond: Vec<S>,
}

/// Sinusoidal embedding of integer timesteps, `batch × dim`.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i * dim + k] = S::lit(arg.sin());
            out[i * dim + half + k] = S::lit(arg.cos());
        }
    }
    out
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Self {
        assert!(cfg.image_size % 4 == 0, "image size must be divisible by 4");
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.time_dim;
        Self {
            cfg,
            time_mlp: Linear::new(td, td, rng),
            time_proj: [Linear::new(td, w0, rng), Linear::new(td, w1, rng), Linear::new(td, w2, rng)],
            cond_proj: [
                Linear::new(cfg.cond_dim, w0, rng),
                Linear::new(cfg.cond_dim, w1, rng),
                Linear::new(cfg.cond_dim, w2, rng),
            ],
            conv_in: Conv2d::new(CHANNELS, w0, 1, rng),
            conv1: Conv2d::new(w0, w0, 1, rng),
            down1: Conv2d::new(w0, w1, 2, rng),
            conv2: Conv2d::new(w1, w1, 1, rng),
            down2: Conv2d::new(w1, w2, 2, rng),
            conv_mid: Conv2d::new(w2, w2, 1, rng),
            mid_lin1: Linear::new(w2, w2, rng),
            mid_lin2: Linear::new(w2, w2, rng),
            up2: Conv2d::new(w2 + w1, w1, 1, rng),
            up1: Conv2d::new(w1 + w0, w0, 1, rng),
            conv_out: Conv2d::new(w0, CHANNELS, 1, rng),
        }
    }

    fn check_inputs(&self, x: &[S], ts: &[usize], cond: &[S]) -> Result<usize> {
        let n = ts.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.len() != n * self.cfg.image_len() || cond.len() != n * self.cfg.cond_dim {
            return Err(Error::shape(format!(
                "batch of {n}: {} image values, {} conditioning values",
                x.len(),
                cond.len()
            )));
        }
        Ok(n)
    }

    pub fn forward(&self, x: &[S], ts: &[usize], cond: &[S]) -> Result<(Vec<S>, DenoiserCache<S>)> {
        let n = self.check_inputs(x, ts, cond)?;
        let [w0, w1, w2] = self.cfg.widths;
        let s = self.cfg.image_size;
        let (hw0, hw1, hw2) = (s * s, s * s / 4, s * s / 16);

        let sin = timestep_embedding::<S>(ts, self.cfg.time_dim);
        let (th_pre, time_mlp) = self.time_mlp.forward(&sin, n);
        let th = silu(&th_pre);
        let mut emb = Vec::with_capacity(3);
        let mut time_proj = Vec::with_capacity(3);
        let mut cond_proj = Vec::with_capacity(3);
        for l in 0..3 {
            let (mut e, tc) = self.time_proj[l].forward(&th, n);
            let (ec, cc) = self.cond_proj[l].forward(cond, n);
            add_assign(&mut e, &ec);
            emb.push(e);
            time_proj.push(tc);
            cond_proj.push(cc);
        }

        let (mut a0, _, _) = self.conv_in.forward(x, n, s, s);
        add_channel_bias(&mut a0, &emb[0], n, w0, hw0);
        let h0 = silu(&a0);
        let (a1, _, _) = self.conv1.forward(&h0, n, s, s);
        let h1 = silu(&a1);
        let (mut a2, _, _) = self.down1.forward(&h1, n, s, s);
        add_channel_bias(&mut a2, &emb[1], n, w1, hw1);
        let h2 = silu(&a2);
        let (a3, _, _) = self.conv2.forward(&h2, n, s / 2, s / 2);
        let h3 = silu(&a3);
        let (mut a4, _, _) = self.down2.forward(&h3, n, s / 2, s / 2);
        add_channel_bias(&mut a4, &emb[2], n, w2, hw2);
        let h4 = silu(&a4);
        let (a5, _, _) = self.conv_mid.forward(&h4, n, s / 4, s / 4);
        let h5 = silu(&a5);

        let r5 = nchw_to_rows(&h5, n, w2, hw2);
        let (m1, mid1) = self.mid_lin1.forward(&r5, n * hw2);
        let (mut r6, mid2) = self.mid_lin2.forward(&silu(&m1), n * hw2);
        add_assign(&mut r6, &r5);
        let h6 = rows_to_nchw(&r6, n, w2, hw2);

        let u2in = concat_channels(&upsample2(&h6, n * w2, s / 4, s / 4), w2, &h3, w1, n, hw1);
        let (a7, _, _) = self.up2.forward(&u2in, n, s / 2, s / 2);
        let h7 = silu(&a7);
        let u1in = concat_channels(&upsample2(&h7, n * w1, s / 2, s / 2), w1, &h1, w0, n, hw0);
        let (a8, _, _) = self.up1.forward(&u1in, n, s, s);
        let h8 = silu(&a8);
        let (out, _, _) = self.conv_out.forward(&h8, n, s, s);

        Ok((
            out,
            DenoiserCache {
                batch: n,
                x: x.to_vec(),
                time_mlp,
                th_pre,
                time_proj,
                cond_proj,
                a: [a0, a1, a2, a3, a4, a5, Vec::new(), a7, a8],
                h: [h0, h1, h2, h3, h4],
                mid1,
                mid2,
                m1,
                u2in,
                u1in,
                h8,
            },
        ))
    }

    /// Backpropagate `dout` (gradient on the predicted noise), accumulating
    /// gradients of unfrozen parameters. Returns gradients for the inputs.
    pub fn backward(&mut self, c: &DenoiserCache<S>, dout: &[S], need_dx: bool) -> DenoiserGrads<S> {
        let n = c.batch;
        let [w0, w1, w2] = self.cfg.widths;
        let s = self.cfg.image_size;
        let (hw0, hw1, hw2) = (s * s, s * s / 4, s * s / 16);
        let [h0, h1, h2, h3, h4] = &c.h;

        let dh8 = self.conv_out.backward(&c.h8, n, s, s, dout, true).unwrap();
        let da8 = silu_backward(&c.a[8], &dh8);
        let du1 = self.up1.backward(&c.u1in, n, s, s, &da8, true).unwrap();
        let (dup7, mut dh1) = split_channels(&du1, w1, w0, n, hw0);
        let dh7 = upsample2_backward(&dup7, n * w1, s / 2, s / 2);
        let da7 = silu_backward(&c.a[7], &dh7);
        let du2 = self.up2.backward(&c.u2in, n, s / 2, s / 2, &da7, true).unwrap();
        let (dup6, mut dh3) = split_channels(&du2, w2, w1, n, hw1);
        let dh6 = upsample2_backward(&dup6, n * w2, s / 4, s / 4);

        let dr6 = nchw_to_rows(&dh6, n, w2, hw2);
        let dg = self.mid_lin2.backward(&c.mid2, &dr6, true).unwrap();
        let dm1 = silu_backward(&c.m1, &dg);
        let mut dr5 = self.mid_lin1.backward(&c.mid1, &dm1, true).unwrap();
        add_assign(&mut dr5, &dr6);
        let dh5 = rows_to_nchw(&dr5, n, w2, hw2);

        let da5 = silu_backward(&c.a[5], &dh5);
        let dh4 = self.conv_mid.backward(h4, n, s / 4, s / 4, &da5, true).unwrap();
        let da4 = silu_backward(&c.a[4], &dh4);
        let demb2 = channel_bias_grad(&da4, n, w2, hw2);
        add_assign(&mut dh3, &self.down2.backward(h3, n, s / 2, s / 2, &da4, true).unwrap());
        let da3 = silu_backward(&c.a[3], &dh3);
        let dh2 = self.conv2.backward(h2, n, s / 2, s / 2, &da3, true).unwrap();
        let da2 = silu_backward(&c.a[2], &dh2);
        let demb1 = channel_bias_grad(&da2, n, w1, hw1);
        add_assign(&mut dh1, &self.down1.backward(h1, n, s, s, &da2, true).unwrap());
        let da1 = silu_backward(&c.a[1], &dh1);
        let dh0 = self.conv1.backward(h0, n, s, s, &da1, true).unwrap();
        let da0 = silu_backward(&c.a[0], &dh0);
        let demb0 = channel_bias_grad(&da0, n, w0, hw0);
        let dx = self.conv_in.backward(&c.x, n, s, s, &da0, need_dx);

        let need_th = self.time_mlp.weight.trainable() || self.time_mlp.bias.trainable();
        let mut dth = vec![S::zero(); n * self.cfg.time_dim];
        let mut dcond = vec![S::zero(); n * self.cfg.cond_dim];
        for (l, demb) in [demb0, demb1, demb2].iter().enumerate() {
            if let Some(d) = self.time_proj[l].backward(&c.time_proj[l], demb, need_th) {
                add_assign(&mut dth, &d);
            }
            add_assign(&mut dcond, &self.cond_proj[l].backward(&c.cond_proj[l], demb, true).unwrap());
        }
        if need_th {
            let d = silu_backward(&c.th_pre, &dth);
            self.time_mlp.backward(&c.time_mlp, &d, false);
        }
        DenoiserGrads { dx, dcond }
    }

    fn convs(&self) -> [(&'static str, &Conv2d<S>); 9] {
        [
            ("conv_in", &self.conv_in),
            ("conv1", &self.conv1),
            ("down1", &self.down1),
            ("conv2", &self.conv2),
            ("down2", &self.down2),
            ("conv_mid", &self.conv_mid),
            ("up2", &self.up2),
            ("up1", &self.up1),
            ("conv_out", &self.conv_out),
        ]
    }

    fn convs_mut(&mut self) -> [(&'static str, &mut Conv2d<S>); 9] {
        [
            ("conv_in", &mut self.conv_in),
            ("conv1", &mut self.conv1),
            ("down1", &mut self.down1),
            ("conv2", &mut self.conv2),
            ("down2", &mut self.down2),
            ("conv_mid", &mut self.conv_mid),
            ("up2", &mut self.up2),
            ("up1", &mut self.up1),
            ("conv_out", &mut self.conv_out),
        ]
    }
}

impl<S: Scalar> NoisePredictor<S> for Denoiser<S> {
    fn image_len(&self) -> usize {
        self.cfg.image_len()
    }

    fn cond_dim(&self) -> usize {
        self.cfg.cond_dim
    }

    fn predict(&self, x: &[S], ts: &[usize], cond: &[S]) -> Vec<S> {
        self.forward(x, ts, cond).expect("denoiser input shapes").0
    }
}

impl<S: Scalar> Module<S> for Denoiser<S> {
    fn params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (name, l) in self.linear_layers() {
            l.visit(&name, f);
        }
        for (name, c) in self.convs() {
            c.visit(&join(ROOT, name), f);
        }
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (name, l) in self.linear_layers_mut() {
            l.visit_mut(&name, f);
        }
        for (name, c) in self.convs_mut() {
            c.visit_mut(&join(ROOT, name), f);
        }
    }
}

impl<S: Scalar> LoraHost<S> for Denoiser<S> {
    fn linear_layers(&self) -> Vec<(String, &Linear<S>)> {
        let mut out = vec![(join(ROOT, "time_mlp"), &self.time_mlp)];
        for (l, lin) in self.time_proj.iter().enumerate() {
            out.push((format!("{ROOT}.time_proj.{l}"), lin));
        }
        for (l, lin) in self.cond_proj.iter().enumerate() {
            out.push((format!("{ROOT}.cond_proj.{l}"), lin));
        }
        out.push((join(ROOT, "mid_lin1"), &self.mid_lin1));
        out.push((join(ROOT, "mid_lin2"), &self.mid_lin2));
        out
    }

    fn linear_layers_mut(&mut self) -> Vec<(String, &mut Linear<S>)> {
        let mut out = vec![(join(ROOT, "time_mlp"), &mut self.time_mlp)];
        for (l, lin) in self.time_proj.iter_mut().enumerate() {
            out.push((format!("{ROOT}.time_proj.{l}"), lin));
        }
        for (l, lin) in self.cond_proj.iter_mut().enumerate() {
            out.push((format!("{ROOT}.cond_proj.{l}"), lin));
        }
        out.push((join(ROOT, "mid_lin1"), &mut self.mid_lin1));
        out.push((join(ROOT, "mid_lin2"), &mut self.mid_lin2));
        out
    }

    /// Conditioning projections and the bottleneck MLP.
    fn default_lora_targets(&self) -> Vec<String> {
        let mut t: Vec<String> = (0..3).map(|l| format!("{ROOT}.cond_proj.{l}")).collect();
        t.push(join(ROOT, "mid_lin1"));
        t.push(join(ROOT, "mid_lin2"));
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{inject, AdapterSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Denoiser<f64> {
        let cfg = DenoiserConfig {
            image_size: 4,
            widths: [3, 4, 5],
            cond_dim: 6,
            time_dim: 4,
        };
        Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(2))
    }

    fn inputs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let x = (0..n * 48).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let c = (0..n * 6).map(|_| rng.random::<f64>() - 0.5).collect();
        (x, (0..n).map(|i| i + 1).collect(), c)
    }

    #[test]
    fn output_shape_and_batch_independence() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, ts, c) = inputs(&mut rng, 3);
        let all = d.predict(&x, &ts, &c);
        assert_eq!(all.len(), x.len());
        let one = d.predict(&x[48..96], &ts[1..2], &c[6..12]);
        assert_eq!(&all[48..96], &one[..]);
        assert!(d.forward(&x[..40], &ts[..1], &c[..6]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = AdapterSet::init(&d, &d.default_lora_targets(), 2, 1.0, &mut rng).unwrap();
        for ad in set.adapters.values_mut() {
            ad.b.iter_mut().for_each(|b| *b = rng.random::<f32>() - 0.5);
        }
        d = inject(&d, &set).unwrap();
        d.set_frozen(false);
        let (x, ts, c) = inputs(&mut rng, 2);
        let probe: Vec<f64> = (0..x.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let f = |d: &Denoiser<f64>, x: &[f64], c: &[f64]| -> f64 {
            d.predict(x, &ts, c).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = d.forward(&x, &ts, &c).unwrap();
        d.zero_grad();
        let g = d.backward(&cache, &probe, true);
        let h = 1e-6;
        let close = |fd: f64, an: f64, what: &str| {
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-5, "{what}: fd {fd} vs {an}");
        };
        let dx = g.dx.unwrap();
        for i in [0, 17, 60, 95] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            close((f(&d, &xp, &c) - f(&d, &xm, &c)) / (2.0 * h), dx[i], "dx");
        }
        for i in 0..c.len() {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[i] += h;
            cm[i] -= h;
            close((f(&d, &x, &cp) - f(&d, &x, &cm)) / (2.0 * h), g.dcond[i], "dcond");
        }
        let mut grads = Vec::new();
        d.params(&mut |n, p| grads.push((n.to_string(), p.grad.clone())));
        for (name, gr) in grads {
            for idx in [0, gr.len() / 2, gr.len() - 1] {
                let bump = |delta: f64| {
                    let mut e = d.clone();
                    e.params_mut(&mut |n, p| {
                        if n == name {
                            p.value[idx] += delta;
                        }
                    });
                    f(&e, &x, &c)
                };
                close((bump(h) - bump(-h)) / (2.0 * h), gr[idx], &format!("{name}[{idx}]"));
            }
        }
    }

    #[test]
    fn frozen_denoiser_accumulates_no_weight_gradients() {
        let mut d = tiny();
        d.set_frozen(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, ts, c) = inputs(&mut rng, 1);
        let (out, cache) = d.forward(&x, &ts, &c).unwrap();
        let g = d.backward(&cache, &out, false);
        assert!(g.dx.is_none());
        assert!(g.dcond.iter().any(|v| *v != 0.0));
        let mut total = 0.0;
        d.params(&mut |_, p| total += p.grad.iter().map(|v| v.abs()).sum::<f64>());
        assert_eq!(total, 0.0);
    }
}
