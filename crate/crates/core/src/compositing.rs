//! Classical compositing baselines and the comparison harness.
//!
//! All blends work per channel in f64 and return images in the usual
//! `[-1, 1]` convention (values are not clamped). The mask marks pixels
//! taken from the source.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis, Zip};
use serde::Serialize;

use crate::image::{psnr, Image};

#[derive(Debug, thiserror::Error)]
pub enum CompositeError {
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("{height}x{width} is not divisible by 2^{levels}")]
    Levels { height: usize, width: usize, levels: usize },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("fixture `{fixture}` has no `{method}` render")]
    MissingRender { fixture: String, method: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_same(a: &Image, b: &Image, mask: Option<&Array2<f32>>) -> Result<(), CompositeError> {
    if a.pixels.dim() != b.pixels.dim() || mask.is_some_and(|m| m.dim() != a.dims()) {
        return Err(CompositeError::Dims(format!(
            "{:?} vs {:?}{}",
            a.pixels.dim(),
            b.pixels.dim(),
            mask.map_or(String::new(), |m| format!(", mask {:?}", m.dim()))
        )));
    }
    Ok(())
}

fn planes(img: &Image) -> Vec<Array2<f64>> {
    img.pixels.axis_iter(Axis(0)).map(|p| p.mapv(f64::from)).collect()
}

fn from_planes(p: &[Array2<f64>]) -> Image {
    let (h, w) = p[0].dim();
    Image { pixels: Array3::from_shape_fn((p.len(), h, w), |(c, y, x)| p[c][[y, x]] as f32), segmentation: None }
}

// ---------------------------------------------------------------- color transfer

/// RGB to LMS cone response.
pub const RGB_TO_LMS: [[f64; 3]; 3] = [[0.3811, 0.5783, 0.0402], [0.1967, 0.7244, 0.0782], [0.0241, 0.1288, 0.8444]];
/// Offset keeping the logarithm finite for black pixels (in `[0, 1]` units).
pub const LOG_EPS: f64 = 1e-3;

fn opponent() -> [[f64; 3]; 3] {
    let (a, b, c) = (1.0 / 3f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 2f64.sqrt());
    [[a, a, a], [b, b, -2.0 * b], [c, -c, 0.0]]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

/// Pixel in `[-1, 1]` RGB to the decorrelated log-opponent space.
pub fn to_opponent(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_vec(&RGB_TO_LMS, rgb.map(|p| (p + 1.0) / 2.0));
    mat_vec(&opponent(), lms.map(|v| (v + LOG_EPS).ln()))
}

pub fn from_opponent(lab: [f64; 3]) -> [f64; 3] {
    let log_lms = mat_vec(&inv3(&opponent()), lab);
    let rgb = mat_vec(&inv3(&RGB_TO_LMS), log_lms.map(|v| v.exp() - LOG_EPS));
    rgb.map(|v| 2.0 * v - 1.0)
}

fn opponent_pixels(img: &Image) -> Vec<[f64; 3]> {
    let (h, w) = img.dims();
    let p = &img.pixels;
    (0..h * w).map(|i| to_opponent([0, 1, 2].map(|c| p[[c, i / w, i % w]] as f64))).collect()
}

/// Per-channel mean and population standard deviation in opponent space.
pub fn opponent_moments(img: &Image) -> [(f64, f64); 3] {
    let px = opponent_pixels(img);
    let n = px.len() as f64;
    [0, 1, 2].map(|c| {
        let mean = px.iter().map(|p| p[c]).sum::<f64>() / n;
        let var = px.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    })
}

/// Matches the source's opponent-space channel statistics to the target's.
/// A constant source channel is shifted only.
pub fn color_transfer(source: &Image, target: &Image) -> Result<Image, CompositeError> {
    if source.pixels.dim().0 != 3 || target.pixels.dim().0 != 3 {
        return Err(CompositeError::Dims("color transfer needs RGB images".into()));
    }
    let s = opponent_moments(source);
    let t = opponent_moments(target);
    let (h, w) = source.dims();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (i, lab) in opponent_pixels(source).into_iter().enumerate() {
        let mapped = [0, 1, 2].map(|c| {
            let scale = if s[c].1 > 1e-12 { t[c].1 / s[c].1 } else { 1.0 };
            (lab[c] - s[c].0) * scale + t[c].0
        });
        let rgb = from_opponent(mapped);
        for c in 0..3 {
            out[[c, i / w, i % w]] = rgb[c] as f32;
        }
    }
    Ok(Image { pixels: out, segmentation: None })
}

// ---------------------------------------------------------------- pyramids

/// 5-tap binomial kernel.
pub const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index without repeating the edge sample (…, 2, 1 | 0, 1, 2, …).
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn filter_axis(x: &Array2<f64>, axis: usize, k: &[f64; 5]) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(y, xx)| {
        (0..5)
            .map(|t| {
                let off = t as isize - 2;
                let v = if axis == 0 { x[[reflect101(y as isize + off, h), xx]] } else { x[[y, reflect101(xx as isize + off, w)]] };
                k[t] * v
            })
            .sum()
    })
}

pub fn blur(x: &Array2<f64>) -> Array2<f64> {
    filter_axis(&filter_axis(x, 0, &BINOMIAL), 1, &BINOMIAL)
}

/// Blur then keep even rows and columns.
pub fn pyr_down(x: &Array2<f64>) -> Array2<f64> {
    blur(x).slice(ndarray::s![..;2, ..;2]).to_owned()
}

/// Zero-insertion upsampling to `dims` followed by a blur with gain 4.
pub fn pyr_up(x: &Array2<f64>, dims: (usize, usize)) -> Array2<f64> {
    let mut z = Array2::zeros(dims);
    z.slice_mut(ndarray::s![..;2, ..;2]).assign(x);
    blur(&z).mapv(|v| 4.0 * v)
}

/// Laplacian bands followed by the coarsest Gaussian level.
pub fn decompose(x: &Array2<f64>, levels: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(levels + 1);
    let mut cur = x.clone();
    for _ in 0..levels {
        let down = pyr_down(&cur);
        out.push(&cur - &pyr_up(&down, cur.dim()));
        cur = down;
    }
    out.push(cur);
    out
}

pub fn reconstruct(pyr: &[Array2<f64>]) -> Array2<f64> {
    let mut cur = pyr.last().expect("non-empty pyramid").clone();
    for band in pyr[..pyr.len() - 1].iter().rev() {
        cur = pyr_up(&cur, band.dim()) + band;
    }
    cur
}

fn check_levels(h: usize, w: usize, levels: usize) -> Result<(), CompositeError> {
    let f = 1usize << levels;
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(CompositeError::Levels { height: h, width: w, levels });
    }
    Ok(())
}

/// Multiband blend. Computed as `target + reconstruct(G(mask)·(L(s) − L(t)))`,
/// which equals the usual band-wise blend and leaves pixels whose blurred
/// mask is zero at every level exactly equal to the target.
pub fn laplacian_blend(source: &Image, target: &Image, mask: &Array2<f32>, levels: usize) -> Result<Image, CompositeError> {
    check_same(source, target, Some(mask))?;
    let (h, w) = target.dims();
    check_levels(h, w, levels)?;
    let mut gm = vec![mask.mapv(f64::from)];
    for _ in 0..levels {
        let next = pyr_down(gm.last().unwrap());
        gm.push(next);
    }
    let s = planes(source);
    let t = planes(target);
    let mut out = Vec::with_capacity(s.len());
    for (sp, tp) in s.iter().zip(&t) {
        let diff = sp - tp;
        let bands: Vec<Array2<f64>> = decompose(&diff, levels).into_iter().zip(&gm).map(|(b, m)| b * m).collect();
        out.push(reconstruct(&bands) + tp);
    }
    Ok(from_planes(&out))
}

// ---------------------------------------------------------------- Poisson

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoissonSolver {
    ConjugateGradient { tol: f64, max_iter: usize },
    /// Gauss-Seidel over the unknowns in reverse raster order.
    GaussSeidel { tol: f64, max_iter: usize },
}

impl Default for PoissonSolver {
    fn default() -> Self {
        PoissonSolver::ConjugateGradient { tol: 1e-12, max_iter: 10_000 }
    }
}

/// Unknown pixels: masked and not on the image border.
pub struct PoissonSystem {
    pub index: Array2<Option<usize>>,
    pub pixels: Vec<(usize, usize)>,
}

impl PoissonSystem {
    pub fn new(mask: &Array2<f32>) -> Self {
        let (h, w) = mask.dim();
        let mut index = Array2::from_elem((h, w), None);
        let mut pixels = Vec::new();
        for ((y, x), &m) in mask.indexed_iter() {
            if m > 0.5 && y > 0 && x > 0 && y + 1 < h && x + 1 < w {
                index[[y, x]] = Some(pixels.len());
                pixels.push((y, x));
            }
        }
        Self { index, pixels }
    }

    fn neighbours(y: usize, x: usize) -> [(usize, usize); 4] {
        [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
    }

    /// Right-hand side: source Laplacian guidance plus known boundary values.
    pub fn rhs(&self, s: &Array2<f64>, t: &Array2<f64>) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&(y, x)| {
                Self::neighbours(y, x)
                    .iter()
                    .map(|&(qy, qx)| {
                        let guide = s[[y, x]] - s[[qy, qx]];
                        let known = if self.index[[qy, qx]].is_none() { t[[qy, qx]] } else { 0.0 };
                        guide + known
                    })
                    .sum()
            })
            .collect()
    }

    /// `A v` for the 5-point operator restricted to the unknowns.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.pixels
            .iter()
            .enumerate()
            .map(|(i, &(y, x))| {
                4.0 * v[i] - Self::neighbours(y, x).iter().filter_map(|&(qy, qx)| self.index[[qy, qx]]).map(|j| v[j]).sum::<f64>()
            })
            .collect()
    }

    fn solve_cg(&self, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = b.len();
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let stop = tol * tol * dot(b, b).max(1e-300);
        for _ in 0..max_iter {
            if rr <= stop {
                break;
            }
            let ap = self.apply(&p);
            let alpha = rr / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let next = dot(&r, &r);
            let beta = next / rr;
            rr = next;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        x
    }

    fn solve_gs(&self, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        for _ in 0..max_iter {
            let mut change = 0.0f64;
            for (i, &(y, px)) in self.pixels.iter().enumerate().rev() {
                let nb: f64 = Self::neighbours(y, px).iter().filter_map(|&(qy, qx)| self.index[[qy, qx]]).map(|j| x[j]).sum();
                let v = (b[i] + nb) / 4.0;
                change = change.max((v - x[i]).abs());
                x[i] = v;
            }
            if change <= tol {
                break;
            }
        }
        x
    }
}

/// Seamless cloning with source gradients as guidance and the target as
/// Dirichlet boundary. An empty interior returns the target.
pub fn poisson_blend(source: &Image, target: &Image, mask: &Array2<f32>, solver: PoissonSolver) -> Result<Image, CompositeError> {
    check_same(source, target, Some(mask))?;
    let sys = PoissonSystem::new(mask);
    if sys.pixels.is_empty() {
        return Ok(Image { pixels: target.pixels.clone(), segmentation: None });
    }
    let s = planes(source);
    let mut t = planes(target);
    for (sp, tp) in s.iter().zip(t.iter_mut()) {
        let b = sys.rhs(sp, tp);
        let x = match solver {
            PoissonSolver::ConjugateGradient { tol, max_iter } => sys.solve_cg(&b, tol, max_iter),
            PoissonSolver::GaussSeidel { tol, max_iter } => sys.solve_gs(&b, tol, max_iter),
        };
        for (&(y, xx), v) in sys.pixels.iter().zip(x) {
            tp[[y, xx]] = v;
        }
    }
    Ok(from_planes(&t))
}

/// `mask ? source : target`.
pub fn naive_paste(source: &Image, target: &Image, mask: &Array2<f32>) -> Result<Image, CompositeError> {
    check_same(source, target, Some(mask))?;
    let mut out = target.pixels.clone();
    for (mut o, s) in out.axis_iter_mut(Axis(0)).zip(source.pixels.axis_iter(Axis(0))) {
        Zip::from(&mut o).and(&s).and(mask).for_each(|o, &s, &m| {
            if m > 0.5 {
                *o = s;
            }
        });
    }
    Ok(Image { pixels: out, segmentation: None })
}

// ---------------------------------------------------------------- evaluation

/// Mean over 4-neighbour pixel pairs straddling the mask boundary of the
/// squared colour difference summed over channels. Zero when no pair exists.
pub fn seam_energy(img: &Image, mask: &Array2<f32>) -> f64 {
    let (h, w) = img.dims();
    let p = &img.pixels;
    let inside = |y: usize, x: usize| mask[[y, x]] > 0.5;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut edge = |a: (usize, usize), b: (usize, usize)| {
        if inside(a.0, a.1) != inside(b.0, b.1) {
            sum += (0..p.dim().0).map(|c| ((p[[c, a.0, a.1]] - p[[c, b.0, b.1]]) as f64).powi(2)).sum::<f64>();
            n += 1;
        }
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                edge((y, x), (y, x + 1));
            }
            if y + 1 < h {
                edge((y, x), (y + 1, x));
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One comparison case. `source` is the edited render `G(z_e)`, `target`
/// the photo; `renders` holds precomputed generator outputs by method name.
#[derive(Clone, Debug)]
pub struct CompositeFixture {
    pub name: String,
    pub source: Image,
    pub target: Image,
    pub mask: Array2<f32>,
    pub renders: BTreeMap<String, Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub fixture: String,
    pub psnr_out: f64,
    pub seam_energy: f64,
    pub wall_ms: f64,
}

pub const CLASSICAL_METHODS: [&str; 5] = ["identity", "paste", "color_transfer", "laplacian", "poisson"];
pub const DEFAULT_LEVELS: usize = 4;

pub fn composite(method: &str, fx: &CompositeFixture) -> Result<Image, CompositeError> {
    match method {
        "identity" => Ok(fx.target.clone()),
        "paste" => naive_paste(&fx.source, &fx.target, &fx.mask),
        "color_transfer" => naive_paste(&color_transfer(&fx.source, &fx.target)?, &fx.target, &fx.mask),
        "laplacian" => {
            let (h, w) = fx.target.dims();
            let levels = (0..=DEFAULT_LEVELS).rev().find(|&l| check_levels(h, w, l).is_ok()).unwrap_or(0);
            laplacian_blend(&fx.source, &fx.target, &fx.mask, levels)
        }
        "poisson" => poisson_blend(&fx.source, &fx.target, &fx.mask, PoissonSolver::default()),
        other => fx
            .renders
            .get(other)
            .cloned()
            .ok_or_else(|| CompositeError::MissingRender { fixture: fx.name.clone(), method: other.to_string() }),
    }
}

/// Runs every method on every fixture. PSNR is measured against the target
/// outside the mask; an exact match reports `inf`.
pub fn evaluate(methods: &[String], fixtures: &[CompositeFixture]) -> Result<Vec<MetricRow>, CompositeError> {
    let mut rows = Vec::with_capacity(methods.len() * fixtures.len());
    for fx in fixtures {
        for m in methods {
            let t0 = Instant::now();
            let out = composite(m, fx)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            rows.push(MetricRow {
                method: m.clone(),
                fixture: fx.name.clone(),
                psnr_out: psnr(&out, &fx.target, Some(&fx.mask)),
                seam_energy: seam_energy(&out, &fx.mask),
                wall_ms,
            });
        }
    }
    Ok(rows)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<(), CompositeError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image { pixels: Array3::from_shape_fn((3, h, w), |_| rng.random_range(-0.9..0.9)), segmentation: None }
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn opponent_transform_round_trips() {
        for rgb in [[-1.0, -1.0, -1.0], [0.3, -0.2, 0.9], [1.0, 1.0, 1.0]] {
            let back = from_opponent(to_opponent(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn color_transfer_cases() {
        let a = rand_img(6, 5, 1);
        assert!(color_transfer(&a, &a).unwrap().max_abs_diff(&a) <= 1e-5);
        let b = rand_img(4, 4, 2);
        let out = color_transfer(&a, &b).unwrap();
        let (mo, mb) = (opponent_moments(&out), opponent_moments(&b));
        for c in 0..3 {
            assert!((mo[c].0 - mb[c].0).abs() <= 1e-4 && (mo[c].1 - mb[c].1).abs() <= 1e-4, "{c}: {:?} vs {:?}", mo[c], mb[c]);
        }
        // constant source takes the (constant) target colour
        let src = Image::filled(3, 3, 0.2);
        let tgt = Image::filled(2, 2, 0.6);
        let out = color_transfer(&src, &tgt).unwrap();
        assert!(out.pixels.iter().all(|&v| (v - 0.6).abs() < 1e-5));
    }

    #[test]
    fn pyramid_edge_cases() {
        let t = rand_img(8, 8, 3);
        let s = rand_img(8, 8, 4);
        let zero = Array2::zeros((8, 8));
        assert!(laplacian_blend(&s, &t, &zero, 3).unwrap().max_abs_diff(&t) <= 1e-6);
        let half = Array2::from_shape_fn((8, 8), |(_, x)| f32::from(u8::from(x < 4)));
        assert!(laplacian_blend(&t, &t, &half, 3).unwrap().max_abs_diff(&t) <= 1e-6);
        assert!(matches!(laplacian_blend(&s, &t, &half, 4), Err(CompositeError::Levels { .. })));
    }

    #[test]
    fn poisson_single_unknown_closed_form() {
        let s = rand_img(3, 3, 5);
        let t = rand_img(3, 3, 6);
        let mut mask = Array2::zeros((3, 3));
        mask[[1, 1]] = 1.0;
        let out = poisson_blend(&s, &t, &mask, PoissonSolver::default()).unwrap();
        for c in 0..3 {
            let nb = [(0, 1), (2, 1), (1, 0), (1, 2)];
            let tm: f64 = nb.iter().map(|&(y, x)| t.pixels[[c, y, x]] as f64).sum::<f64>() / 4.0;
            let div: f64 = nb.iter().map(|&(y, x)| s.pixels[[c, y, x]] as f64).sum::<f64>() - 4.0 * s.pixels[[c, 1, 1]] as f64;
            let expect = tm - 0.25 * div;
            assert!((out.pixels[[c, 1, 1]] as f64 - expect).abs() < 1e-6);
        }
        let empty = poisson_blend(&s, &t, &Array2::zeros((3, 3)), PoissonSolver::default()).unwrap();
        assert_eq!(empty.pixels, t.pixels);
    }

    #[test]
    fn poisson_reproduces_target_with_matching_gradients() {
        let t = rand_img(8, 8, 7);
        let s = Image { pixels: t.pixels.mapv(|v| v + 0.25), segmentation: None };
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| f32::from(u8::from((2..6).contains(&y) && (1..7).contains(&x))));
        let out = poisson_blend(&s, &t, &mask, PoissonSolver::default()).unwrap();
        assert!(out.max_abs_diff(&t) <= 1e-5);
    }

    #[test]
    fn seam_energy_counts_boundary_pairs() {
        let mut img = Image::filled(1, 2, 0.0);
        img.pixels[[0, 0, 1]] = 1.0;
        let mask = ndarray::array![[0.0, 1.0]];
        assert_eq!(seam_energy(&img, &mask), 1.0);
        assert_eq!(seam_energy(&img, &Array2::zeros((1, 2))), 0.0);
    }

    #[test]
    fn identity_method_is_infinite_psnr() {
        let fx = CompositeFixture {
            name: "f".into(),
            source: rand_img(8, 8, 1),
            target: rand_img(8, 8, 2),
            mask: Array2::from_shape_fn((8, 8), |(y, _)| f32::from(u8::from(y < 3))),
            renders: BTreeMap::new(),
        };
        let rows = evaluate(&["identity".into(), "paste".into()], std::slice::from_ref(&fx)).unwrap();
        assert!(rows[0].psnr_out.is_infinite());
        assert!(rows[1].psnr_out.is_infinite());
        assert!(matches!(evaluate(&["ours".into()], &[fx]), Err(CompositeError::MissingRender { .. })));
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,fixture,psnr_out,seam_energy,wall_ms\n"));
    }
}
