use rand::Rng;

use super::{join, matmul, Param, Scalar, Visit};

/// 3×3 convolution with zero padding 1 and stride 1 or 2 over NCHW batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    /// `out_ch × (in_ch·9)`
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub stride: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        assert!(stride == 1 || stride == 2);
        let fan_in = (in_ch * 9) as f64;
        Self {
            weight: Param::randn(&[out_ch, in_ch * 9], (1.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape[1] / 9
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.stride == 1 {
            (h, w)
        } else {
            ((h + 1) / 2, (w + 1) / 2)
        }
    }

    fn im2col(&self, x: &[S], h: usize, w: usize, cols: &mut [S]) {
        let (ho, wo) = self.out_size(h, w);
        let s = self.stride;
        let plane = ho * wo;
        for ci in 0..self.in_ch() {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                    for oy in 0..ho {
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            let lo = if kx == 0 { 1 } else { 0 };
                            let hi = (w + 1 - kx).min(wo);
                            dst[..lo].iter_mut().for_each(|v| *v = S::zero());
                            dst[lo..hi].copy_from_slice(&line[lo + kx - 1..hi + kx - 1]);
                            dst[hi..].iter_mut().for_each(|v| *v = S::zero());
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - 1;
                                *d = if ix < 0 || ix >= w as isize { S::zero() } else { line[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[S], h: usize, w: usize, dx: &mut [S]) {
        let (ho, wo) = self.out_size(h, w);
        let s = self.stride;
        let plane = ho * wo;
        for ci in 0..self.in_ch() {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns the output batch and its spatial size.
    pub fn forward(&self, x: &[S], batch: usize, h: usize, w: usize) -> (Vec<S>, usize, usize) {
        let (cin, cout) = (self.in_ch(), self.out_ch());
        assert_eq!(x.len(), batch * cin * h * w, "conv input shape");
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        let mut cols = vec![S::zero(); cin * 9 * plane];
        let mut out = vec![S::zero(); batch * cout * plane];
        for i in 0..batch {
            self.im2col(&x[i * cin * h * w..(i + 1) * cin * h * w], h, w, &mut cols);
            let y = &mut out[i * cout * plane..(i + 1) * cout * plane];
            matmul(&self.weight.value, false, &cols, false, y, cout, cin * 9, plane, S::one(), S::zero());
            for c in 0..cout {
                let b = self.bias.value[c];
                y[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
        }
        (out, ho, wo)
    }

    /// `x` is the forward input. Accumulates unfrozen parameter gradients.
    pub fn backward(&mut self, x: &[S], batch: usize, h: usize, w: usize, dy: &[S], need_dx: bool) -> Option<Vec<S>> {
        let (cin, cout) = (self.in_ch(), self.out_ch());
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        assert_eq!(dy.len(), batch * cout * plane, "conv grad shape");
        let want_w = self.weight.trainable();
        let mut cols = vec![S::zero(); cin * 9 * plane];
        let mut dcols = vec![S::zero(); cin * 9 * plane];
        let mut dx = if need_dx { Some(vec![S::zero(); x.len()]) } else { None };
        for i in 0..batch {
            let g = &dy[i * cout * plane..(i + 1) * cout * plane];
            if want_w {
                self.im2col(&x[i * cin * h * w..(i + 1) * cin * h * w], h, w, &mut cols);
                matmul(g, false, &cols, true, &mut self.weight.grad, cout, plane, cin * 9, S::one(), S::one());
            }
            if self.bias.trainable() {
                for c in 0..cout {
                    self.bias.grad[c] += g[c * plane..(c + 1) * plane].iter().copied().sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                matmul(&self.weight.value, true, g, false, &mut dcols, cin * 9, cout, plane, S::one(), S::zero());
                self.col2im(&dcols, h, w, &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
            }
        }
        dx
    }
}

impl<S: Scalar> Visit<S> for Conv2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
