//! Additive attention gates on the skip connections.
//!
//! For a skip map `x` and a gating map `g` (the upsampled coarser decoder
//! features): `q = psi(ReLU(W_x x + W_g g + b_g)) + b_psi`, `alpha =
//! sigmoid(q)` with one coefficient per pixel, and the gate output is
//! `alpha (broadcast over channels) * x`.

use ndarray::{Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::nn::act;
use crate::nn::{Conv2d, Parameterized};
use crate::scalar::Scalar;

/// Gate parameters; all convolutions are 1x1. `w_x` carries no bias (the
/// additive term `b_g` lives on `w_g`), `psi` carries the scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate<S> {
    pub w_x: Conv2d<S>,
    pub w_g: Conv2d<S>,
    pub psi: Conv2d<S>,
}

/// Per-application intermediates needed by backward.
pub struct AttentionGateCache<S> {
    /// ReLU output, (F_int, H, W).
    pub r: Array3<S>,
    /// Attention coefficients, (1, H, W), all strictly in (0,1).
    pub alpha: Array3<S>,
}

impl<S: Scalar> AttentionGate<S> {
    /// Xavier-initialized gate with F_int equal to the skip channel count.
    pub fn init<R: Rng>(rng: &mut R, skip_channels: usize, gate_channels: usize) -> Self {
        let f_int = skip_channels;
        AttentionGate {
            w_x: Conv2d {
                weight: crate::nn::init::xavier_conv(rng, f_int, skip_channels, 1, 1),
                bias: None,
                stride: 1,
                pad: 0,
            },
            w_g: Conv2d {
                weight: crate::nn::init::xavier_conv(rng, f_int, gate_channels, 1, 1),
                bias: Some(crate::nn::init::zero_bias(f_int)),
                stride: 1,
                pad: 0,
            },
            psi: Conv2d {
                weight: crate::nn::init::xavier_conv(rng, 1, f_int, 1, 1),
                bias: Some(crate::nn::init::zero_bias(1)),
                stride: 1,
                pad: 0,
            },
        }
    }

    pub fn forward(&self, x: &Array3<S>, g: &Array3<S>) -> Array3<S> {
        self.forward_cached(x, g).0
    }

    pub fn forward_cached(&self, x: &Array3<S>, g: &Array3<S>) -> (Array3<S>, AttentionGateCache<S>) {
        assert_eq!(
            (x.dim().1, x.dim().2),
            (g.dim().1, g.dim().2),
            "attention gate inputs must be spatially aligned"
        );
        let sum = self.w_x.forward(x) + self.w_g.forward(g);
        let r = act::relu(&sum);
        let q = self.psi.forward(&r);
        let alpha = act::sigmoid(&q);
        let y = x * &alpha.broadcast(x.dim()).unwrap();
        (y, AttentionGateCache { r, alpha })
    }

    /// Gradients w.r.t. both inputs; parameter gradients accumulate into
    /// `grads` (same struct shape as `self`).
    pub fn backward(
        &self,
        x: &Array3<S>,
        g: &Array3<S>,
        cache: &AttentionGateCache<S>,
        dy: &Array3<S>,
        grads: &mut AttentionGate<S>,
    ) -> (Array3<S>, Array3<S>) {
        // y = alpha * x: split the product rule.
        let dx_mul = dy * &cache.alpha.broadcast(x.dim()).unwrap();
        let dalpha = (dy * x).sum_axis(Axis(0)).insert_axis(Axis(0));
        let dq = act::sigmoid_backward(&cache.alpha, &dalpha);

        let (dr, dw_psi, db_psi) = self.psi.backward(&cache.r, &dq);
        grads.psi.weight += &dw_psi;
        *grads.psi.bias.as_mut().unwrap() += &db_psi.unwrap();

        let dsum = act::relu_backward(&cache.r, &dr);
        let (dx_lin, dw_x, _) = self.w_x.backward(x, &dsum);
        grads.w_x.weight += &dw_x;
        let (dg, dw_g, db_g) = self.w_g.backward(g, &dsum);
        grads.w_g.weight += &dw_g;
        *grads.w_g.bias.as_mut().unwrap() += &db_g.unwrap();

        (dx_mul + dx_lin, dg)
    }
}

impl<S: Scalar> Parameterized<S> for AttentionGate<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        self.w_x.for_each_param(f);
        self.w_g.for_each_param(f);
        self.psi.for_each_param(f);
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        let AttentionGate { w_x, w_g, psi } = self;
        w_x.for_each_param_mut(f);
        w_g.for_each_param_mut(f);
        psi.for_each_param_mut(f);
    }
}

/// Gate a whole sequence: applies the gate independently per time step.
pub fn attention_gate<S: Scalar>(
    x: &ndarray::Array4<S>,
    g: &ndarray::Array4<S>,
    params: &AttentionGate<S>,
) -> ndarray::Array4<S> {
    assert_eq!(x.dim().0, g.dim().0, "sequence lengths must match");
    let mut out = ndarray::Array4::zeros(x.dim());
    for t in 0..x.dim().0 {
        let y = params.forward(
            &x.index_axis(Axis(0), t).to_owned(),
            &g.index_axis(Axis(0), t).to_owned(),
        );
        out.index_axis_mut(Axis(0), t).assign(&y);
    }
    out
}
