use latentpaint_core::compositing::{decompose, laplacian_blend, poisson_blend, reconstruct, PoissonSolver, PoissonSystem, BINOMIAL};
use latentpaint_core::image::Image;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_img(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image { pixels: Array3::from_shape_fn((3, h, w), |_| rng.random_range(-0.9..0.9)), segmentation: None }
}

fn blur_matrix(n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for t in 0..5 {
            let mut j = i as isize + t as isize - 2;
            if j < 0 {
                j = -j;
            }
            if j >= n as isize {
                j = 2 * (n as isize - 1) - j;
            }
            b[(i, j as usize)] += BINOMIAL[t];
        }
    }
    b
}

fn decimate(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n / 2, n, |i, j| f64::from(u8::from(j == 2 * i)))
}

#[test]
fn one_level_blend_matches_explicit_operators() {
    let n = 4;
    let b = blur_matrix(n);
    let d = decimate(n);
    let down = |x: &DMatrix<f64>| &d * &b * x * b.transpose() * d.transpose();
    let up = |y: &DMatrix<f64>| (&b * (d.transpose() * y * &d) * b.transpose()) * 4.0;
    let s = rand_img(n, n, 1);
    let t = rand_img(n, n, 2);
    let mask = Array2::from_shape_fn((n, n), |(_, x)| f32::from(u8::from(x < 2)));
    let out = laplacian_blend(&s, &t, &mask, 1).unwrap();
    let m = DMatrix::from_fn(n, n, |i, j| mask[[i, j]] as f64);
    let gm1 = down(&m);
    for c in 0..3 {
        let sm = DMatrix::from_fn(n, n, |i, j| s.pixels[[c, i, j]] as f64);
        let tm = DMatrix::from_fn(n, n, |i, j| t.pixels[[c, i, j]] as f64);
        let (sd, td) = (down(&sm), down(&tm));
        let ls = &sm - up(&sd);
        let lt = &tm - up(&td);
        let band = m.component_mul(&ls) + m.map(|v| 1.0 - v).component_mul(&lt);
        let coarse = gm1.component_mul(&sd) + gm1.map(|v| 1.0 - v).component_mul(&td);
        let expect = up(&coarse) + band;
        for i in 0..n {
            for j in 0..n {
                assert!((out.pixels[[c, i, j]] as f64 - expect[(i, j)]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn cg_matches_dense_solve_on_8x8() {
    let s = rand_img(8, 8, 3);
    let t = rand_img(8, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mask = Array2::from_shape_fn((8, 8), |_| f32::from(u8::from(rng.random_bool(0.6))));
    let out = poisson_blend(&s, &t, &mask, PoissonSolver::default()).unwrap();
    let sys = PoissonSystem::new(&mask);
    let n = sys.pixels.len();
    assert!(n > 10);
    let mut a = DMatrix::zeros(n, n);
    for (i, &(y, x)) in sys.pixels.iter().enumerate() {
        a[(i, i)] = 4.0;
        for (qy, qx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
            if let Some(j) = sys.index[[qy, qx]] {
                a[(i, j)] = -1.0;
            }
        }
    }
    let lu = a.lu();
    for c in 0..3 {
        let sp = s.pixels.index_axis(ndarray::Axis(0), c).mapv(f64::from);
        let tp = t.pixels.index_axis(ndarray::Axis(0), c).mapv(f64::from);
        let x = lu.solve(&DVector::from_vec(sys.rhs(&sp, &tp))).unwrap();
        for (i, &(y, xx)) in sys.pixels.iter().enumerate() {
            assert!((out.pixels[[c, y, xx]] as f64 - x[i]).abs() <= 1e-5);
        }
    }
}

#[test]
fn solvers_agree() {
    let s = rand_img(16, 16, 8);
    let t = rand_img(16, 16, 9);
    let mask = Array2::from_shape_fn((16, 16), |(y, x)| f32::from(u8::from((y as i32 - 8).pow(2) + (x as i32 - 7).pow(2) < 30)));
    let a = poisson_blend(&s, &t, &mask, PoissonSolver::default()).unwrap();
    let b = poisson_blend(&s, &t, &mask, PoissonSolver::GaussSeidel { tol: 1e-13, max_iter: 100_000 }).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5);
}

#[test]
fn far_pixels_are_bit_equal_to_target() {
    let s = rand_img(64, 64, 10);
    let t = rand_img(64, 64, 11);
    let mask = Array2::from_shape_fn((64, 64), |(y, x)| f32::from(u8::from((16..32).contains(&y) && (16..32).contains(&x))));
    // blur support grows by 2 px per level at full resolution, doubled per level
    let reach = 2 * ((1 << 4) - 1) * 2 + 2;
    let lap = laplacian_blend(&s, &t, &mask, 4).unwrap();
    let poi = poisson_blend(&s, &t, &mask, PoissonSolver::default()).unwrap();
    for y in 0usize..64 {
        for x in 0usize..64 {
            let dy = if y < 16 { 16 - y } else { y.saturating_sub(31) };
            let dx = if x < 16 { 16 - x } else { x.saturating_sub(31) };
            let far_lap = dy.max(dx) > reach;
            for c in 0..3 {
                if far_lap {
                    assert_eq!(lap.pixels[[c, y, x]].to_bits(), t.pixels[[c, y, x]].to_bits());
                }
                if mask[[y, x]] == 0.0 {
                    assert_eq!(poi.pixels[[c, y, x]].to_bits(), t.pixels[[c, y, x]].to_bits());
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pyramid_reconstructs_exactly(levels in 1usize..=4, hk in 1usize..3, wk in 1usize..3, seed in any::<u64>()) {
        let (h, w) = (hk << levels, wk << levels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
        let back = reconstruct(&decompose(&x, levels));
        let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err <= 1e-6, "error {}", err);
    }
}
