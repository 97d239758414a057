//! Neural-network primitives: convolutions, pooling, dense layers,
//! elementwise activations, softmax cross-entropy, and parameter traversal.
//!
//! Everything here is single-threaded and deterministic: outputs depend only
//! on inputs and parameter values, never on iteration order or thread count.
//! Backward passes are written by hand; each op's unit tests check them
//! against central finite differences at f64.

pub mod act;
pub mod conv;
pub mod dense;
pub mod init;
pub mod pool;
pub mod softmax;

pub use conv::Conv2d;
pub use dense::Dense;

use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension, IntoDimension};

use crate::scalar::Scalar;

/// Return `a` in standard (row-major) layout, copying only if needed.
///
/// `dot` may hand back column-major output (e.g. when the inner dimension
/// is 1), which in-place reshapes reject.
pub(crate) fn to_c<S: Scalar, D: Dimension>(a: Array<S, D>) -> Array<S, D> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array::from_shape_vec(dim, a.iter().copied().collect()).unwrap()
    }
}

/// Row-major reshape that tolerates non-contiguous input.
pub(crate) fn reshape_c<S: Scalar, D: Dimension, E: IntoDimension>(
    a: Array<S, D>,
    shape: E,
) -> Array<S, E::Dim> {
    to_c(a).into_shape_with_order(shape.into_dimension()).unwrap()
}

/// Fixed-order traversal over every learnable array in a parameter set.
///
/// The traversal order defines both the checkpoint serialization layout and
/// the slot order of optimizer state, so implementations must keep it stable
/// and identical between `for_each_param` and `for_each_param_mut`.
pub trait Parameterized<S: Scalar>: Clone {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>));
    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>));

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |v| n += v.len());
        n
    }

    /// Same-shaped parameter set with every value zeroed (gradient buffer).
    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.for_each_param_mut(&mut |mut v| v.fill(S::zero()));
        out
    }

    /// `self += alpha * other`, matching arrays positionally.
    fn add_scaled(&mut self, other: &Self, alpha: S) {
        let mut rhs = Vec::new();
        other.for_each_param(&mut |v| rhs.push(v));
        let mut i = 0;
        self.for_each_param_mut(&mut |mut v| {
            assert_eq!(v.shape(), rhs[i].shape(), "parameter sets disagree at slot {i}");
            v.zip_mut_with(&rhs[i], |a, b| *a = *a + alpha * *b);
            i += 1;
        });
        assert_eq!(i, rhs.len(), "parameter sets have different slot counts");
    }

    /// `self *= alpha` (e.g. gradient averaging over a batch).
    fn scale(&mut self, alpha: S) {
        self.for_each_param_mut(&mut |mut v| v.mapv_inplace(|x| x * alpha));
    }

    /// Flatten all parameters to f64 in traversal order.
    fn to_f64_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |v| out.extend(v.iter().map(|x| x.to_f())));
        out
    }

    /// Load all parameters from f64 values in traversal order.
    fn load_f64_slice(&mut self, data: &[f64]) {
        let mut i = 0;
        self.for_each_param_mut(&mut |mut v| {
            for x in v.iter_mut() {
                *x = S::from_f(data[i]);
                i += 1;
            }
        });
        assert_eq!(i, data.len(), "parameter data length mismatch");
    }
}
