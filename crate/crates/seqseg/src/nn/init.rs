//! Weight initialization.
//!
//! All draws happen at f64 and are narrowed to the target scalar afterwards,
//! so a given RNG seed produces the same initialization (up to rounding) for
//! every precision, and exactly reproducible weights for a fixed type.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use crate::scalar::Scalar;

fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_vec<S: Scalar, R: Rng>(rng: &mut R, n: usize, limit: f64) -> Vec<S> {
    (0..n).map(|_| S::from_f(rng.gen_range(-limit..limit))).collect()
}

/// Xavier-uniform conv kernel (out_c, in_c, kh, kw) with
/// fan_in = in_c*kh*kw, fan_out = out_c*kh*kw.
pub fn xavier_conv<S: Scalar, R: Rng>(
    rng: &mut R,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> Array4<S> {
    let limit = xavier_limit(in_c * kh * kw, out_c * kh * kw);
    let data = uniform_vec(rng, out_c * in_c * kh * kw, limit);
    Array4::from_shape_vec((out_c, in_c, kh, kw), data).unwrap()
}

/// Xavier-uniform dense weight (out, in).
pub fn xavier_dense<S: Scalar, R: Rng>(rng: &mut R, out: usize, input: usize) -> Array2<S> {
    let limit = xavier_limit(input, out);
    let data = uniform_vec(rng, out * input, limit);
    Array2::from_shape_vec((out, input), data).unwrap()
}

pub fn zero_bias<S: Scalar>(n: usize) -> Array1<S> {
    Array1::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_stay_inside_the_xavier_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Array4<f64> = xavier_conv(&mut rng, 8, 4, 3, 3);
        let limit = (6.0 / ((4 * 9 + 8 * 9) as f64)).sqrt();
        assert!(w.iter().all(|v| v.abs() < limit));
        // Not degenerate: values actually vary.
        let spread = w.iter().cloned().fold(f64::MIN, f64::max)
            - w.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > limit * 0.5);
    }

    #[test]
    fn same_seed_reproduces_weights_across_scalar_types() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let wf32: Array2<f32> = xavier_dense(&mut a, 3, 5);
        let wf64: Array2<f64> = xavier_dense(&mut b, 3, 5);
        for (x, y) in wf32.iter().zip(wf64.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
