use rand::Rng;

use super::{join, matmul, Param, Scalar, Visit};

/// Low-rank delta attached to a [`Linear`]: `ΔW = B·A`, applied as `alpha·ΔW`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraWeights<S> {
    /// `rank × in_dim`
    pub a: Param<S>,
    /// `out_dim × rank`
    pub b: Param<S>,
    pub alpha: S,
}

impl<S: Scalar> LoraWeights<S> {
    pub fn rank(&self) -> usize {
        self.a.shape[0]
    }

    /// `alpha·B·A` as a dense `out × in` matrix.
    pub fn delta(&self) -> Vec<S> {
        let (r, out, inp) = (self.rank(), self.b.shape[0], self.a.shape[1]);
        let mut d = vec![S::zero(); out * inp];
        matmul(&self.b.value, false, &self.a.value, false, &mut d, out, r, inp, self.alpha, S::zero());
        d
    }
}

/// Affine layer `y = x·Wᵀ + b (+ alpha·x·Aᵀ·Bᵀ)` over row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `out_dim × in_dim`
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub lora: Option<LoraWeights<S>>,
}

#[derive(Clone, Debug)]
pub struct LinearCache<S> {
    x: Vec<S>,
    xa: Vec<S>,
    rows: usize,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            bias: Param::zeros(&[out_dim]),
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[S], rows: usize) -> (Vec<S>, LinearCache<S>) {
        let (inp, out) = (self.in_dim(), self.out_dim());
        assert_eq!(x.len(), rows * inp, "linear input shape");
        let mut y = vec![S::zero(); rows * out];
        matmul(x, false, &self.weight.value, true, &mut y, rows, inp, out, S::one(), S::zero());
        for r in 0..rows {
            y[r * out..(r + 1) * out]
                .iter_mut()
                .zip(&self.bias.value)
                .for_each(|(v, &b)| *v += b);
        }
        let mut xa = Vec::new();
        if let Some(l) = &self.lora {
            let rank = l.rank();
            xa = vec![S::zero(); rows * rank];
            matmul(x, false, &l.a.value, true, &mut xa, rows, inp, rank, S::one(), S::zero());
            matmul(&xa, false, &l.b.value, true, &mut y, rows, rank, out, l.alpha, S::one());
        }
        (
            y,
            LinearCache {
                x: x.to_vec(),
                xa,
                rows,
            },
        )
    }

    /// Accumulates parameter gradients (for unfrozen params) and returns `dx` on request.
    pub fn backward(&mut self, cache: &LinearCache<S>, dy: &[S], need_dx: bool) -> Option<Vec<S>> {
        let (inp, out, rows) = (self.in_dim(), self.out_dim(), cache.rows);
        assert_eq!(dy.len(), rows * out, "linear grad shape");
        if self.weight.trainable() {
            matmul(dy, true, &cache.x, false, &mut self.weight.grad, out, rows, inp, S::one(), S::one());
        }
        if self.bias.trainable() {
            for r in 0..rows {
                self.bias
                    .grad
                    .iter_mut()
                    .zip(&dy[r * out..(r + 1) * out])
                    .for_each(|(g, &d)| *g += d);
            }
        }
        let mut dx = if need_dx {
            let mut dx = vec![S::zero(); rows * inp];
            matmul(dy, false, &self.weight.value, false, &mut dx, rows, out, inp, S::one(), S::zero());
            Some(dx)
        } else {
            None
        };
        if let Some(l) = &mut self.lora {
            let rank = l.rank();
            let alpha = l.alpha;
            if l.b.trainable() {
                matmul(dy, true, &cache.xa, false, &mut l.b.grad, out, rows, rank, alpha, S::one());
            }
            if l.a.trainable() || need_dx {
                let mut dyb = vec![S::zero(); rows * rank];
                matmul(dy, false, &l.b.value, false, &mut dyb, rows, out, rank, S::one(), S::zero());
                if l.a.trainable() {
                    matmul(&dyb, true, &cache.x, false, &mut l.a.grad, rank, rows, inp, alpha, S::one());
                }
                if let Some(dx) = dx.as_mut() {
                    matmul(&dyb, false, &l.a.value, false, dx, rows, rank, inp, alpha, S::one());
                }
            }
        }
        dx
    }

    /// `W + alpha·B·A`.
    pub fn effective_weight(&self) -> Vec<S> {
        let mut w = self.weight.value.clone();
        if let Some(l) = &self.lora {
            w.iter_mut().zip(l.delta()).for_each(|(w, d)| *w += d);
        }
        w
    }
}

impl<S: Scalar> Visit<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), &l.a);
            f(&join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora_a"), &mut l.a);
            f(&join(prefix, "lora_b"), &mut l.b);
        }
    }
}
