//! 2x2 max pooling and 2x nearest-neighbor upsampling.

use ndarray::Array3;

use crate::scalar::Scalar;

/// 2x2 stride-2 max pool. Requires even H and W. Returns the pooled map and
/// the argmax position (0..4, row-major within each window) for backward;
/// ties go to the first maximum in scan order, which keeps routing
/// deterministic.
pub fn maxpool2<S: Scalar>(x: &Array3<S>) -> (Array3<S>, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, ho, wo));
    let mut idx = Array3::<u8>::zeros((c, ho, wo));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = x[(ci, 2 * oy, 2 * ox)];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let v = x[(ci, 2 * oy + (k / 2) as usize, 2 * ox + (k % 2) as usize)];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                y[(ci, oy, ox)] = best;
                idx[(ci, oy, ox)] = best_k;
            }
        }
    }
    (y, idx)
}

/// Route pooled gradients back to the argmax positions.
pub fn maxpool2_backward<S: Scalar>(indices: &Array3<u8>, dy: &Array3<S>) -> Array3<S> {
    let (c, ho, wo) = dy.dim();
    assert_eq!(indices.dim(), (c, ho, wo));
    let mut dx = Array3::zeros((c, ho * 2, wo * 2));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let k = indices[(ci, oy, ox)] as usize;
                dx[(ci, 2 * oy + k / 2, 2 * ox + k % 2)] = dy[(ci, oy, ox)];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsample: each input pixel fills a 2x2 block.
pub fn upsample2<S: Scalar>(x: &Array3<S>) -> Array3<S> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(ci, iy, ix)];
                y[(ci, 2 * iy, 2 * ix)] = v;
                y[(ci, 2 * iy, 2 * ix + 1)] = v;
                y[(ci, 2 * iy + 1, 2 * ix)] = v;
                y[(ci, 2 * iy + 1, 2 * ix + 1)] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sum each 2x2 block.
pub fn upsample2_backward<S: Scalar>(dy: &Array3<S>) -> Array3<S> {
    let (c, h2, w2) = dy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                dx[(ci, iy, ix)] = dy[(ci, 2 * iy, 2 * ix)]
                    + dy[(ci, 2 * iy, 2 * ix + 1)]
                    + dy[(ci, 2 * iy + 1, 2 * ix)]
                    + dy[(ci, 2 * iy + 1, 2 * ix + 1)];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn maxpool_picks_window_maxima() {
        let x = array![[
            [1.0f64, 2.0, 5.0, 6.0],
            [3.0, 4.0, 8.0, 7.0],
            [9.0, 9.0, 0.0, -1.0],
            [9.0, 9.0, -2.0, 0.5],
        ]];
        let (y, idx) = maxpool2(&x);
        assert_eq!(y, array![[[4.0, 8.0], [9.0, 0.5]]]);
        // All-equal window routes to the first element.
        assert_eq!(idx[(0, 1, 0)], 0);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let x = array![[[1.0f64, 2.0], [3.0, 4.0]]];
        let (_, idx) = maxpool2(&x);
        let dy = array![[[10.0f64]]];
        let dx = maxpool2_backward(&idx, &dy);
        assert_eq!(dx, array![[[0.0, 0.0], [0.0, 10.0]]]);
    }

    #[test]
    fn upsample_fills_blocks_and_backward_sums_them() {
        let x = array![[[1.0f64, 2.0]]];
        let y = upsample2(&x);
        assert_eq!(y, array![[[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]]);
        // Adjoint identity: <up(x), d> == <x, up_backward(d)>.
        let d = array![[[1.0f64, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]];
        let lhs: f64 = (&y * &d).sum();
        let rhs: f64 = (&x * &upsample2_backward(&d)).sum();
        assert_eq!(lhs, rhs);
    }
}
