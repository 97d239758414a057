//! Fully connected layer on flat vectors.

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// `y = W x + b` with W of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn forward(&self, x: &Array1<S>) -> Array1<S> {
        assert_eq!(x.len(), self.weight.dim().1, "dense input length mismatch");
        self.weight.dot(x) + &self.bias
    }

    /// Gradients w.r.t. input, weight, and bias.
    pub fn backward(&self, x: &Array1<S>, dy: &Array1<S>) -> (Array1<S>, Array2<S>, Array1<S>) {
        assert_eq!(dy.len(), self.weight.dim().0);
        let dx = self.weight.t().dot(dy);
        let mut dw = Array2::zeros(self.weight.dim());
        for (o, &g) in dy.iter().enumerate() {
            for (i, &xv) in x.iter().enumerate() {
                dw[(o, i)] = g * xv;
            }
        }
        (dx, dw, dy.clone())
    }
}

impl<S: Scalar> crate::nn::Parameterized<S> for Dense<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ndarray::ArrayViewD<'a, S>)) {
        f(self.weight.view().into_dyn());
        f(self.bias.view().into_dyn());
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ndarray::ArrayViewMutD<'a, S>)) {
        let Dense { weight, bias } = self;
        f(weight.view_mut().into_dyn());
        f(bias.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff, max_rel_err};
    use ndarray::{Array1, Array2};

    #[test]
    fn forward_matches_hand_computation() {
        let layer = Dense {
            weight: Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            bias: Array1::from_vec(vec![0.5, -0.5]),
        };
        let y = layer.forward(&Array1::from_vec(vec![1.0, 0.0, -1.0]));
        assert_eq!(y, Array1::from_vec(vec![1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]));
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let (nin, nout) = (4, 3);
        let x0: Vec<f64> = (0..nin).map(|i| 0.1 * i as f64 - 0.15).collect();
        let w0: Vec<f64> = (0..nin * nout).map(|i| 0.05 * i as f64 - 0.2).collect();
        let b0: Vec<f64> = (0..nout).map(|i| 0.3 - 0.1 * i as f64).collect();
        let probe: Vec<f64> = (0..nout).map(|i| 1.0 + i as f64).collect();

        let run = |theta: &[f64]| -> f64 {
            let x = Array1::from_vec(theta[..nin].to_vec());
            let weight =
                Array2::from_shape_vec((nout, nin), theta[nin..nin + nin * nout].to_vec()).unwrap();
            let bias = Array1::from_vec(theta[nin + nin * nout..].to_vec());
            let y = Dense { weight, bias }.forward(&x);
            y.iter().zip(&probe).map(|(y, p)| y * p).sum()
        };
        let mut theta = x0.clone();
        theta.extend_from_slice(&w0);
        theta.extend_from_slice(&b0);
        let numeric = finite_diff(run, &theta, 1e-6);

        let layer = Dense {
            weight: Array2::from_shape_vec((nout, nin), w0).unwrap(),
            bias: Array1::from_vec(b0),
        };
        let x = Array1::from_vec(x0);
        let (dx, dw, db) = layer.backward(&x, &Array1::from_vec(probe));
        let mut analytic: Vec<f64> = dx.iter().copied().collect();
        analytic.extend(dw.iter());
        analytic.extend(db.iter());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-8, "rel err {err}");
    }
}
