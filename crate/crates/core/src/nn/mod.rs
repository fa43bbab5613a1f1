//! Minimal dense-tensor machinery with hand-written backward passes.
//!
//! Every layer keeps its parameters in [`Param`] values and exposes a
//! `forward` that returns whatever the matching `backward` needs. Nothing here
//! builds a graph; models chain the layer calls themselves. Frozen parameters
//! never receive gradient writes, which lets callers skip weight gradients
//! for the whole denoiser when only the text encoder is being trained.

mod conv;
mod linear;
mod norm;
mod optim;

pub use conv::Conv2d;
pub use linear::{Linear, LinearCache, LoraWeights};
pub use norm::{LayerNorm, LayerNormCache};
pub use optim::{clip_grad_norm, grad_norm, Adam};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point element type usable by every layer.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn lit(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn lit(v: f64) -> f64 {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `c[m×n] = alpha * op(a)·op(b) + beta * c`.
///
/// `op(a)` is `m×k`; when `ta` is set, `a` is stored as `k×m`. Likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    beta: S,
) {
    assert!(a.len() >= m * k, "lhs too small");
    assert!(b.len() >= k * n, "rhs too small");
    assert!(c.len() >= m * n, "output too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes checked above; `c` is a distinct &mut borrow.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A trainable tensor: value, accumulated gradient and a freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

impl<S: Scalar> Param<S> {
    pub fn from_vec(shape: &[usize], value: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![S::zero(); value.len()];
        Self {
            value,
            grad,
            shape: shape.to_vec(),
            frozen: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![S::zero(); shape.iter().product()])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Self::from_vec(shape, value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }

    pub fn trainable(&self) -> bool {
        !self.frozen
    }
}

/// Stable-name enumeration of parameters.
pub trait Visit<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));
}

/// A top-level model that owns a fixed name prefix.
pub trait Module<S: Scalar> {
    fn params(&self, f: &mut dyn FnMut(&str, &Param<S>));
    fn params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn zero_grad(&mut self) {
        self.params_mut(&mut |_, p| p.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.params_mut(&mut |_, p| p.frozen = frozen);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.params(&mut |_, p| n += p.numel());
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.params(&mut |_, p| {
            if p.trainable() {
                n += p.numel()
            }
        });
        n
    }

    /// Any parameter currently trainable.
    fn any_trainable(&self) -> bool {
        self.num_trainable() > 0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<S: Scalar>(x: &[S], dy: &[S]) -> Vec<S> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (S::one() + v * (S::one() - s))
        })
        .collect()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu<S: Scalar>(x: &[S]) -> Vec<S> {
    let k = S::lit(GELU_K);
    let c = S::lit(GELU_C);
    let half = S::lit(0.5);
    x.iter()
        .map(|&v| half * v * (S::one() + (k * (v + c * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<S: Scalar>(x: &[S], dy: &[S]) -> Vec<S> {
    let k = S::lit(GELU_K);
    let c = S::lit(GELU_C);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let u = k * (v + c * v * v * v);
            let th = u.tanh();
            let du = k * (S::one() + three * c * v * v);
            g * (half * (S::one() + th) + half * v * (S::one() - th * th) * du)
        })
        .collect()
}

/// Nearest-neighbour 2× upsampling of an NCHW batch.
pub fn upsample2<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![S::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (h * 2, w * 2);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Concatenate two NCHW batches along channels.
pub fn concat_channels<S: Scalar>(a: &[S], ca: usize, b: &[S], cb: usize, batch: usize, hw: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
    for i in 0..batch {
        out.extend_from_slice(&a[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}

pub fn split_channels<S: Scalar>(d: &[S], ca: usize, cb: usize, batch: usize, hw: usize) -> (Vec<S>, Vec<S>) {
    let mut da = Vec::with_capacity(batch * ca * hw);
    let mut db = Vec::with_capacity(batch * cb * hw);
    let c = ca + cb;
    for i in 0..batch {
        let img = &d[i * c * hw..(i + 1) * c * hw];
        da.extend_from_slice(&img[..ca * hw]);
        db.extend_from_slice(&img[ca * hw..]);
    }
    (da, db)
}

/// Add a per-(sample, channel) offset to every pixel of an NCHW batch.
pub fn add_channel_bias<S: Scalar>(x: &mut [S], bias: &[S], batch: usize, ch: usize, hw: usize) {
    for i in 0..batch {
        for c in 0..ch {
            let b = bias[i * ch + c];
            x[(i * ch + c) * hw..(i * ch + c + 1) * hw]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the offsets.
pub fn channel_bias_grad<S: Scalar>(dy: &[S], batch: usize, ch: usize, hw: usize) -> Vec<S> {
    (0..batch * ch)
        .map(|p| dy[p * hw..(p + 1) * hw].iter().copied().sum())
        .collect()
}

/// NCHW → (N·H·W)×C rows.
pub fn nchw_to_rows<S: Scalar>(x: &[S], batch: usize, ch: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..batch {
        for c in 0..ch {
            for p in 0..hw {
                out[(i * hw + p) * ch + c] = x[(i * ch + c) * hw + p];
            }
        }
    }
    out
}

pub fn rows_to_nchw<S: Scalar>(x: &[S], batch: usize, ch: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..batch {
        for c in 0..ch {
            for p in 0..hw {
                out[(i * ch + c) * hw + p] = x[(i * hw + p) * ch + c];
            }
        }
    }
    out
}

pub fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
