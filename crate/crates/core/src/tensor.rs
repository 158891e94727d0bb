//! Scalar abstraction and small array helpers shared by the numeric code.
//!
//! Feature maps are stored channel-major as `(channels, height, width)`.
//! Production models run in `f32`; gradient checks instantiate the same
//! code in `f64`.

use std::iter::Sum;

use ndarray::{Array1, Array2, Array3, NdFloat};
use num_traits::FromPrimitive;

/// Floating point type usable by the network code.
pub trait Real: NdFloat + FromPrimitive + Sum + Default {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn cst<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable")
}

pub fn cast3<A: Real, B: Real>(a: &Array3<A>) -> Array3<B> {
    a.mapv(|v| cst::<B>(v.to_f64().unwrap_or(0.0)))
}

pub fn cast2<A: Real, B: Real>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|v| cst::<B>(v.to_f64().unwrap_or(0.0)))
}

pub fn cast1<A: Real, B: Real>(a: &Array1<A>) -> Array1<B> {
    a.mapv(|v| cst::<B>(v.to_f64().unwrap_or(0.0)))
}

/// Elementwise `sign`, with `sign(0) = 0`.
#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn all_finite<T: Real>(a: &Array3<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Pearson correlation between two equally sized sequences, in `f64`.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = [1.0f32, 2.0, 3.0, 5.0];
        let b: Vec<f32> = a.iter().map(|v| 2.0 * v - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &c) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0f32), 0.0);
        assert_eq!(sign(-3.0f64), -1.0);
    }
}
