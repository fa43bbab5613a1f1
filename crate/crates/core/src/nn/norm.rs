use super::{join, Param, Scalar, Visit};

/// Layer normalisation over the last dimension with affine output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::from_vec(&[dim], vec![S::one(); dim]),
            beta: Param::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &[S]) -> (Vec<S>, LayerNormCache<S>) {
        let d = self.dim();
        let rows = x.len() / d;
        let dn = S::lit(d as f64);
        let mut y = vec![S::zero(); x.len()];
        let mut xhat = vec![S::zero(); x.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + S::lit(self.eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &[S]) -> Vec<S> {
        let d = self.dim();
        let rows = dy.len() / d;
        let dn = S::lit(d as f64);
        let mut dx = vec![S::zero(); dy.len()];
        let mut dxhat = vec![S::zero(); d];
        for r in 0..rows {
            let g = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            if self.gamma.trainable() {
                for j in 0..d {
                    self.gamma.grad[j] += g[j] * xh[j];
                }
            }
            if self.beta.trainable() {
                for j in 0..d {
                    self.beta.grad[j] += g[j];
                }
            }
            let mut sum = S::zero();
            let mut sum_xh = S::zero();
            for j in 0..d {
                dxhat[j] = g[j] * self.gamma.value[j];
                sum += dxhat[j];
                sum_xh += dxhat[j] * xh[j];
            }
            let k = cache.rstd[r] / dn;
            for j in 0..d {
                dx[r * d + j] = k * (dn * dxhat[j] - sum - xh[j] * sum_xh);
            }
        }
        dx
    }
}

impl<S: Scalar> Visit<S> for LayerNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn input_gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma = Param::randn(&[6], 1.0, &mut rng);
        let x = Param::<f64>::randn(&[2, 6], 1.0, &mut rng).value;
        let probe = Param::<f64>::randn(&[2, 6], 1.0, &mut rng).value;
        let f = |x: &[f64]| -> f64 { ln.forward(x).0.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (_, cache) = ln.forward(&x);
        let mut ln2 = ln.clone();
        let dx = ln2.backward(&cache, &probe);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }
}
