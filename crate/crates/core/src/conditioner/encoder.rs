use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::LoraHost;
use crate::nn::{gelu, gelu_backward, join, LayerNorm, LayerNormCache, Linear, LinearCache, Module, Param, Scalar, Visit};

use super::vocab::PAD;

pub const ROOT: &str = "encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
}

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_tokens: 12,
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            ff_dim: 128,
        }
    }
}

/// Output of the text encoder: one row per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningEmbedding<S> {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<S>,
    /// Non-padding positions.
    pub mask: Vec<bool>,
}

impl<S: Scalar> ConditioningEmbedding<S> {
    fn valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count().max(1)
    }

    /// Mean over non-padding rows; this vector is what the denoiser reads.
    pub fn pooled(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim];
        for (r, &m) in self.mask.iter().enumerate() {
            if m {
                for (o, &v) in out.iter_mut().zip(&self.data[r * self.dim..(r + 1) * self.dim]) {
                    *o += v;
                }
            }
        }
        let n = S::lit(self.valid() as f64);
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Gradient with respect to `data` given a gradient on [`Self::pooled`].
    pub fn pooled_backward(&self, dpooled: &[S]) -> Vec<S> {
        let n = S::lit(self.valid() as f64);
        let mut dz = vec![S::zero(); self.data.len()];
        for (r, &m) in self.mask.iter().enumerate() {
            if m {
                for (d, &g) in dz[r * self.dim..(r + 1) * self.dim].iter_mut().zip(dpooled) {
                    *d = g / n;
                }
            }
        }
        dz
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block<S> {
    ln1: LayerNorm<S>,
    q: Linear<S>,
    k: Linear<S>,
    v: Linear<S>,
    o: Linear<S>,
    ln2: LayerNorm<S>,
    fc1: Linear<S>,
    fc2: Linear<S>,
}

struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    q: LinearCache<S>,
    k: LinearCache<S>,
    v: LinearCache<S>,
    o: LinearCache<S>,
    ln2: LayerNormCache<S>,
    fc1: LinearCache<S>,
    fc2: LinearCache<S>,
    qv: Vec<S>,
    kv: Vec<S>,
    vv: Vec<S>,
    /// `heads × L × L` attention weights.
    probs: Vec<S>,
    f1: Vec<S>,
}

pub struct EncoderCache<S> {
    ids: Vec<u32>,
    blocks: Vec<BlockCache<S>>,
    ln_f: LayerNormCache<S>,
    proj: LinearCache<S>,
}

/// Token + position embeddings, pre-norm transformer blocks, final norm and projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<S> {
    pub cfg: EncoderConfig,
    pub tok_emb: Param<S>,
    pub pos_emb: Param<S>,
    blocks: Vec<Block<S>>,
    pub ln_f: LayerNorm<S>,
    pub proj: Linear<S>,
}

impl<S: Scalar> TextEncoder<S> {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Self {
        assert!(cfg.embed_dim % cfg.heads == 0, "embed_dim must divide into heads");
        let d = cfg.embed_dim;
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                q: Linear::new(d, d, rng),
                k: Linear::new(d, d, rng),
                v: Linear::new(d, d, rng),
                o: Linear::new(d, d, rng),
                ln2: LayerNorm::new(d),
                fc1: Linear::new(d, cfg.ff_dim, rng),
                fc2: Linear::new(cfg.ff_dim, d, rng),
            })
            .collect();
        Self {
            cfg,
            tok_emb: Param::randn(&[cfg.vocab_size, d], 1.0, rng),
            pos_emb: Param::randn(&[cfg.max_tokens, d], 0.5, rng),
            blocks,
            ln_f: LayerNorm::new(d),
            proj: Linear::new(d, d, rng),
        }
    }

    pub fn encode(&self, ids: &[u32]) -> Result<ConditioningEmbedding<S>> {
        self.forward(ids).map(|(z, _)| z)
    }

    pub fn forward(&self, ids: &[u32]) -> Result<(ConditioningEmbedding<S>, EncoderCache<S>)> {
        let (l, d) = (self.cfg.max_tokens, self.cfg.embed_dim);
        if ids.len() != l {
            return Err(Error::shape(format!("expected {l} token ids, got {}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mut x = vec![S::zero(); l * d];
        for (p, &id) in ids.iter().enumerate() {
            let tok = &self.tok_emb.value[id as usize * d..(id as usize + 1) * d];
            let pos = &self.pos_emb.value[p * d..(p + 1) * d];
            for j in 0..d {
                x[p * d + j] = tok[j] + pos[j];
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = self.block_forward(b, &x, &mask);
            x = y;
            caches.push(c);
        }
        let (h, ln_f) = self.ln_f.forward(&x);
        let (z, proj) = self.proj.forward(&h, l);
        Ok((
            ConditioningEmbedding {
                tokens: l,
                dim: d,
                data: z,
                mask,
            },
            EncoderCache {
                ids: ids.to_vec(),
                blocks: caches,
                ln_f,
                proj,
            },
        ))
    }

    fn block_forward(&self, b: &Block<S>, x: &[S], mask: &[bool]) -> (Vec<S>, BlockCache<S>) {
        let (l, d, heads) = (self.cfg.max_tokens, self.cfg.embed_dim, self.cfg.heads);
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let (h1, ln1) = b.ln1.forward(x);
        let (qv, q) = b.q.forward(&h1, l);
        let (kv, k) = b.k.forward(&h1, l);
        let (vv, v) = b.v.forward(&h1, l);
        let mut probs = vec![S::zero(); heads * l * l];
        let mut attn = vec![S::zero(); l * d];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..l {
                let row = &mut probs[(hd * l + i) * l..(hd * l + i + 1) * l];
                let mut max = S::neg_infinity();
                for j in 0..l {
                    if mask[j] {
                        let mut s = S::zero();
                        for c in 0..dh {
                            s += qv[i * d + off + c] * kv[j * d + off + c];
                        }
                        row[j] = s * scale;
                        max = max.max(row[j]);
                    }
                }
                let mut sum = S::zero();
                for j in 0..l {
                    row[j] = if mask[j] { (row[j] - max).exp() } else { S::zero() };
                    sum += row[j];
                }
                for j in 0..l {
                    row[j] /= sum;
                }
                for j in 0..l {
                    let p = row[j];
                    if p != S::zero() {
                        for c in 0..dh {
                            attn[i * d + off + c] += p * vv[j * d + off + c];
                        }
                    }
                }
            }
        }
        let (ov, o) = b.o.forward(&attn, l);
        let x1: Vec<S> = x.iter().zip(&ov).map(|(&a, &b)| a + b).collect();
        let (h2, ln2) = b.ln2.forward(&x1);
        let (f1, fc1) = b.fc1.forward(&h2, l);
        let g = gelu(&f1);
        let (f2, fc2) = b.fc2.forward(&g, l);
        let out = x1.iter().zip(&f2).map(|(&a, &b)| a + b).collect();
        (
            out,
            BlockCache {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                fc1,
                fc2,
                qv,
                kv,
                vv,
                probs,
                f1,
            },
        )
    }

    fn block_backward(cfg: &EncoderConfig, b: &mut Block<S>, c: &BlockCache<S>, dout: &[S]) -> Vec<S> {
        let (l, d, heads) = (cfg.max_tokens, cfg.embed_dim, cfg.heads);
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        // feed-forward branch
        let dg = b.fc2.backward(&c.fc2, dout, true).unwrap();
        let df1 = gelu_backward(&c.f1, &dg);
        let dh2 = b.fc1.backward(&c.fc1, &df1, true).unwrap();
        let mut dx1 = b.ln2.backward(&c.ln2, &dh2);
        crate::nn::add_assign(&mut dx1, dout);
        // attention branch
        let dattn = b.o.backward(&c.o, &dx1, true).unwrap();
        let mut dq = vec![S::zero(); l * d];
        let mut dk = vec![S::zero(); l * d];
        let mut dv = vec![S::zero(); l * d];
        let mut dp = vec![S::zero(); l];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..l {
                let p = &c.probs[(hd * l + i) * l..(hd * l + i + 1) * l];
                let mut dot = S::zero();
                for j in 0..l {
                    let mut s = S::zero();
                    for ch in 0..dh {
                        s += dattn[i * d + off + ch] * c.vv[j * d + off + ch];
                        dv[j * d + off + ch] += p[j] * dattn[i * d + off + ch];
                    }
                    dp[j] = s;
                    dot += p[j] * s;
                }
                for j in 0..l {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds != S::zero() {
                        for ch in 0..dh {
                            dq[i * d + off + ch] += ds * c.kv[j * d + off + ch];
                            dk[j * d + off + ch] += ds * c.qv[i * d + off + ch];
                        }
                    }
                }
            }
        }
        let mut dh1 = b.q.backward(&c.q, &dq, true).unwrap();
        crate::nn::add_assign(&mut dh1, &b.k.backward(&c.k, &dk, true).unwrap());
        crate::nn::add_assign(&mut dh1, &b.v.backward(&c.v, &dv, true).unwrap());
        let mut dx = b.ln1.backward(&c.ln1, &dh1);
        crate::nn::add_assign(&mut dx, &dx1);
        dx
    }

    /// Accumulates gradients of every unfrozen parameter given `dz` on the
    /// full embedding matrix.
    pub fn backward(&mut self, cache: &EncoderCache<S>, dz: &[S]) {
        let (l, d) = (self.cfg.max_tokens, self.cfg.embed_dim);
        assert_eq!(dz.len(), l * d);
        let dh = self.proj.backward(&cache.proj, dz, true).unwrap();
        let mut dx = self.ln_f.backward(&cache.ln_f, &dh);
        let cfg = self.cfg;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = Self::block_backward(&cfg, b, c, &dx);
        }
        if self.tok_emb.trainable() {
            for (p, &id) in cache.ids.iter().enumerate() {
                for j in 0..d {
                    self.tok_emb.grad[id as usize * d + j] += dx[p * d + j];
                }
            }
        }
        if self.pos_emb.trainable() {
            crate::nn::add_assign(&mut self.pos_emb.grad, &dx);
        }
    }

    fn linears(&self) -> Vec<(String, &Linear<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{ROOT}.blocks.{i}");
            out.push((format!("{p}.attn.q"), &b.q));
            out.push((format!("{p}.attn.k"), &b.k));
            out.push((format!("{p}.attn.v"), &b.v));
            out.push((format!("{p}.attn.o"), &b.o));
            out.push((format!("{p}.ff.fc1"), &b.fc1));
            out.push((format!("{p}.ff.fc2"), &b.fc2));
        }
        out.push((format!("{ROOT}.proj"), &self.proj));
        out
    }

    fn linears_mut(&mut self) -> Vec<(String, &mut Linear<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{ROOT}.blocks.{i}");
            out.push((format!("{p}.attn.q"), &mut b.q));
            out.push((format!("{p}.attn.k"), &mut b.k));
            out.push((format!("{p}.attn.v"), &mut b.v));
            out.push((format!("{p}.attn.o"), &mut b.o));
            out.push((format!("{p}.ff.fc1"), &mut b.fc1));
            out.push((format!("{p}.ff.fc2"), &mut b.fc2));
        }
        out.push((format!("{ROOT}.proj"), &mut self.proj));
        out
    }
}

impl<S: Scalar> Module<S> for TextEncoder<S> {
    fn params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(ROOT, "tok_emb"), &self.tok_emb);
        f(&join(ROOT, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{ROOT}.blocks.{i}");
            b.ln1.visit(&join(&p, "ln1"), f);
            b.q.visit(&join(&p, "attn.q"), f);
            b.k.visit(&join(&p, "attn.k"), f);
            b.v.visit(&join(&p, "attn.v"), f);
            b.o.visit(&join(&p, "attn.o"), f);
            b.ln2.visit(&join(&p, "ln2"), f);
            b.fc1.visit(&join(&p, "ff.fc1"), f);
            b.fc2.visit(&join(&p, "ff.fc2"), f);
        }
        self.ln_f.visit(&join(ROOT, "ln_f"), f);
        self.proj.visit(&join(ROOT, "proj"), f);
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(ROOT, "tok_emb"), &mut self.tok_emb);
        f(&join(ROOT, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{ROOT}.blocks.{i}");
            b.ln1.visit_mut(&join(&p, "ln1"), f);
            b.q.visit_mut(&join(&p, "attn.q"), f);
            b.k.visit_mut(&join(&p, "attn.k"), f);
            b.v.visit_mut(&join(&p, "attn.v"), f);
            b.o.visit_mut(&join(&p, "attn.o"), f);
            b.ln2.visit_mut(&join(&p, "ln2"), f);
            b.fc1.visit_mut(&join(&p, "ff.fc1"), f);
            b.fc2.visit_mut(&join(&p, "ff.fc2"), f);
        }
        self.ln_f.visit_mut(&join(ROOT, "ln_f"), f);
        self.proj.visit_mut(&join(ROOT, "proj"), f);
    }
}

impl<S: Scalar> LoraHost<S> for TextEncoder<S> {
    fn linear_layers(&self) -> Vec<(String, &Linear<S>)> {
        self.linears()
    }

    fn linear_layers_mut(&mut self) -> Vec<(String, &mut Linear<S>)> {
        self.linears_mut()
    }

    /// Attention projections and feed-forward layers of every block.
    fn default_lora_targets(&self) -> Vec<String> {
        self.linears()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.contains(".attn.") || n.contains(".ff."))
            .collect()
    }
}
