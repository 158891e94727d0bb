//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Every operator works on a single `(C, H, W)` feature map; batching is done
//! by callers accumulating gradients over samples. Convolutions are lowered to
//! a GEMM through `im2col` with zero "same" padding.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{cst, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, pre: &Array3<T>) -> Array3<T> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu => {
                let a = cst::<T>(LEAKY_SLOPE);
                pre.mapv(|v| if v > T::zero() { v } else { a * v })
            }
            Activation::Tanh => pre.mapv(|v| v.tanh()),
        }
    }

    /// Multiplies `grad` in place by the activation derivative.
    pub fn backward<T: Real>(self, pre: &Array3<T>, out: &Array3<T>, grad: &mut Array3<T>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
                if p <= T::zero() {
                    *g = T::zero();
                }
            }),
            Activation::LeakyRelu => {
                let a = cst::<T>(LEAKY_SLOPE);
                ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
                    if p <= T::zero() {
                        *g *= a;
                    }
                })
            }
            Activation::Tanh => ndarray::Zip::from(grad)
                .and(out)
                .for_each(|g, &o| *g *= T::one() - o * o),
        }
    }
}

/// Lowers a `(C, H, W)` map to `(C*k*k, H*W)` columns for a `k×k` kernel
/// with stride 1 and zero padding `k/2`.
pub fn im2col<T: Real>(x: &Array3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous reshape");
    }
    let pad = (k / 2) as isize;
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out = &mut dst[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let orow = &mut out[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        orow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the map.
pub fn col2im<T: Real>(cols: &Array2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    if k == 1 {
        return cols
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .expect("contiguous reshape");
    }
    let pad = (k / 2) as isize;
    let mut x = Array3::<T>::zeros((c, h, w));
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col = &src[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let crow = &col[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        prow[(xx as isize + dx) as usize] += crow[xx];
                    }
                }
            }
        }
    }
    x
}

pub fn upsample_nearest<T: Real>(x: &Array3<T>, factor: usize) -> Array3<T> {
    if factor == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ch, y, xx)| {
        x[[ch, y / factor, xx / factor]]
    })
}

/// Adjoint of nearest upsampling: sums each `factor×factor` block.
pub fn upsample_nearest_backward<T: Real>(dy: &Array3<T>, factor: usize) -> Array3<T> {
    if factor == 1 {
        return dy.clone();
    }
    let (c, h, w) = dy.dim();
    let mut out = Array3::<T>::zeros((c, h / factor, w / factor));
    for ((ch, y, xx), &v) in dy.indexed_iter() {
        out[[ch, y / factor, xx / factor]] += v;
    }
    out
}

pub fn avg_pool2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let q = cst::<T>(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        let (y2, x2) = (2 * y, 2 * xx);
        (x[[ch, y2, x2]] + x[[ch, y2, x2 + 1]] + x[[ch, y2 + 1, x2]] + x[[ch, y2 + 1, x2 + 1]]) * q
    })
}

pub fn avg_pool2_backward<T: Real>(dy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let q = cst::<T>(0.25);
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| dy[[ch, y / 2, xx / 2]] * q)
}

/// A `k×k` stride-1 convolution with bias. Weights are stored as a
/// `(out, in*k*k)` matrix matching the [`im2col`] row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ConvGrads<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.dim()),
            bias: Array1::zeros(conv.bias.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: T) {
        self.weight.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// He-style normal initialization scaled by `gain`; zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
        conv.weight.mapv_inplace(|_| cst(normal.sample(rng)));
        conv
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.kernel);
        self.forward_cols(&cols, h, w)
    }

    pub fn forward_cols(&self, cols: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let mut out = self.weight.dot(cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((self.out_channels, h, w))
            .expect("gemm output is contiguous")
    }

    /// Backward through the affine part. `dpre` is the gradient w.r.t. the
    /// pre-activation output. Accumulates parameter gradients into `grads`
    /// when given and returns the input gradient when `need_input`.
    pub fn backward(
        &self,
        cols: &Array2<T>,
        dpre: &Array3<T>,
        grads: Option<&mut ConvGrads<T>>,
        need_input: bool,
    ) -> Option<Array3<T>> {
        let (_, h, w) = dpre.dim();
        let d2 = dpre
            .view()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("contiguous gradient");
        if let Some(g) = grads {
            g.weight += &d2.dot(&cols.t());
            g.bias += &d2.sum_axis(Axis(1));
        }
        if need_input {
            let dcols = self.weight.t().dot(&d2);
            Some(col2im(&dcols, self.in_channels, h, w, self.kernel))
        } else {
            None
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Adam over an ordered list of flat parameter slices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `params` and `grads` must be given in the same order on
    /// every call.
    pub fn step<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr);
    }

    pub fn step_with_lr<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), grads.len(), "parameter list changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= cst::<T>(upd);
            }
        }
    }
}

/// Cosine learning-rate schedule from `lr` down to `lr * floor` at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step as f64 / total as f64).min(1.0);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    lr * (floor + (1.0 - floor) * c)
}

/// Copies the top-left `h×w` window (used by tests and shape helpers).
pub fn crop<T: Real>(x: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    x.slice(s![.., ..h, ..w]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an oracle for the GEMM path.
    fn conv_direct(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel as isize;
        let pad = k / 2;
        Array3::from_shape_fn((conv.out_channels, h, w), |(o, y, xx)| {
            let mut acc = conv.bias[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky - pad;
                        let sx = xx as isize + kx - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let col = (ci * conv.kernel + ky as usize) * conv.kernel + kx as usize;
                        acc += conv.weight[[o, col]] * x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::init(3, 4, k, 1.0, &mut rng);
            conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
            let x = rand3(3, 5, 6, 9);
            let a = conv.forward(&x);
            let b = conv_direct(&conv, &x);
            assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = rand3(2, 4, 5, 1);
        let cols = im2col(&x, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let rhs: f64 = (&x * &col2im(&y, 2, 4, 5, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let x = rand3(2, 3, 3, 4);
        let y = rand3(2, 6, 6, 5);
        let lhs = (&upsample_nearest(&x, 2) * &y).sum();
        let rhs = (&x * &upsample_nearest_backward(&y, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let lhs = (&avg_pool2(&y) * &x).sum();
        let rhs = (&y * &avg_pool2_backward(&x)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::<f64>::init(2, 3, 3, 1.0, &mut rng);
        let x = rand3(2, 4, 4, 12);
        let probe = rand3(3, 4, 4, 13);
        let loss = |c: &Conv2d<f64>, x: &Array3<f64>| {
            let out = Activation::Tanh.apply(&c.forward(x));
            (&out * &probe).sum()
        };
        let cols = im2col(&x, 3);
        let pre = conv.forward_cols(&cols, 4, 4);
        let out = Activation::Tanh.apply(&pre);
        let mut d = probe.clone();
        Activation::Tanh.backward(&pre, &out, &mut d);
        let mut grads = ConvGrads::zeros_like(&conv);
        let dx = conv.backward(&cols, &d, Some(&mut grads), true).unwrap();
        let hstep = 1e-6;
        for &(o, j) in &[(0usize, 0usize), (1, 7), (2, 17)] {
            let mut cp = conv.clone();
            cp.weight[[o, j]] += hstep;
            let mut cm = conv.clone();
            cm.weight[[o, j]] -= hstep;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * hstep);
            assert!((fd - grads.weight[[o, j]]).abs() < 1e-7, "{fd} vs {}", grads.weight[[o, j]]);
        }
        for &idx in &[[0usize, 1usize, 2usize], [1, 3, 0]] {
            let mut xp = x.clone();
            xp[idx] += hstep;
            let mut xm = x.clone();
            xm[idx] -= hstep;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * hstep);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}
