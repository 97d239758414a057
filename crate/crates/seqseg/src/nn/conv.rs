//! 2D convolution on (C, H, W) maps via im2col and matrix multiplication.
//!
//! One general kernel covers every convolution in the toolkit (3x3 pad 1,
//! 5x5 stride 2 pad 2, 1x1); 1x1 stride-1 convolutions skip the im2col copy
//! and multiply the channel matrix directly. Inputs must be in standard
//! row-major layout.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Output length along one spatial axis (floor semantics).
pub(crate) fn out_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {}", len + 2 * pad);
    (len + 2 * pad - k) / stride + 1
}

fn pad2d<S: Scalar>(x: &Array3<S>, pad: usize) -> Array3<S> {
    if pad == 0 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Unfold `x` into a (C*kh*kw, Hout*Wout) matrix; row r = (ci, ky, kx) in
/// row-major order, column j = output pixel (oy, ox) in row-major order.
pub(crate) fn im2col<S: Scalar>(
    x: &Array3<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let (c, h, w) = x.dim();
    let hout = out_size(h, kh, stride, pad);
    let wout = out_size(w, kw, stride, pad);
    let xp = pad2d(x, pad);
    let (_, hp, wp) = xp.dim();
    let xs = xp.as_slice().expect("padded input is standard layout");

    let mut cols = Array2::<S>::zeros((c * kh * kw, hout * wout));
    let cs = cols.as_slice_mut().expect("fresh array is standard layout");
    let mut r = 0;
    for ci in 0..c {
        let plane = &xs[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cs[r * hout * wout..(r + 1) * hout * wout];
                let mut j = 0;
                for oy in 0..hout {
                    let src = &plane[(oy * stride + ky) * wp + kx..];
                    if stride == 1 {
                        row[j..j + wout].copy_from_slice(&src[..wout]);
                    } else {
                        for ox in 0..wout {
                            row[j + ox] = src[ox * stride];
                        }
                    }
                    j += wout;
                }
                r += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back to input shape.
pub(crate) fn col2im<S: Scalar>(
    dcols: &ArrayView2<S>,
    in_shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let (c, h, w) = in_shape;
    let hout = out_size(h, kh, stride, pad);
    let wout = out_size(w, kw, stride, pad);
    assert_eq!(dcols.dim(), (c * kh * kw, hout * wout));

    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dxp = Array3::<S>::zeros((c, hp, wp));
    {
        let ds = dxp.as_slice_mut().unwrap();
        let mut r = 0;
        for ci in 0..c {
            let base = ci * hp * wp;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = dcols.row(r);
                    let row = row.as_slice().expect("dcols is standard layout");
                    let mut j = 0;
                    for oy in 0..hout {
                        let off = base + (oy * stride + ky) * wp + kx;
                        for ox in 0..wout {
                            ds[off + ox * stride] = ds[off + ox * stride] + row[j + ox];
                        }
                        j += wout;
                    }
                    r += 1;
                }
            }
        }
    }
    if pad == 0 {
        dxp
    } else {
        dxp.slice(s![.., pad..pad + h, pad..pad + w]).to_owned()
    }
}

/// A convolution layer: weight (out_c, in_c, kh, kw), optional per-channel
/// bias, uniform stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    pub weight: Array4<S>,
    pub bias: Option<Array1<S>>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn is_pointwise(&self) -> bool {
        let (_, _, kh, kw) = self.weight.dim();
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Array3<S>) -> Array3<S> {
        let (cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = self.weight.dim();
        assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
        let hout = out_size(h, kh, self.stride, self.pad);
        let wout = out_size(w, kw, self.stride, self.pad);

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((cout, wcin * kh * kw))
            .unwrap();
        let mut y_mat = if self.is_pointwise() {
            let x_mat = x.view().into_shape_with_order((cin, h * w)).unwrap();
            w_mat.dot(&x_mat)
        } else {
            w_mat.dot(&im2col(x, kh, kw, self.stride, self.pad))
        };
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y_mat.outer_iter_mut().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        crate::nn::reshape_c(y_mat, (cout, hout, wout))
    }

    /// Gradients w.r.t. input, weight, and bias given upstream `dy`.
    pub fn backward(
        &self,
        x: &Array3<S>,
        dy: &Array3<S>,
    ) -> (Array3<S>, Array4<S>, Option<Array1<S>>) {
        let (cin, h, w) = x.dim();
        let (cout, _, kh, kw) = self.weight.dim();
        let hout = out_size(h, kh, self.stride, self.pad);
        let wout = out_size(w, kw, self.stride, self.pad);
        assert_eq!(dy.dim(), (cout, hout, wout), "upstream gradient shape mismatch");

        let dy_mat = dy
            .view()
            .into_shape_with_order((cout, hout * wout))
            .unwrap();
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let db = self.bias.as_ref().map(|_| dy_mat.sum_axis(Axis(1)));

        let (dw_mat, dx) = if self.is_pointwise() {
            let x_mat = x.view().into_shape_with_order((cin, h * w)).unwrap();
            let dw = dy_mat.dot(&x_mat.t());
            let dx = crate::nn::reshape_c(w_mat.t().dot(&dy_mat), (cin, h, w));
            (dw, dx)
        } else {
            let cols = im2col(x, kh, kw, self.stride, self.pad);
            let dw = dy_mat.dot(&cols.t());
            let dcols = crate::nn::to_c(w_mat.t().dot(&dy_mat));
            let dx = col2im(&dcols.view(), (cin, h, w), kh, kw, self.stride, self.pad);
            (dw, dx)
        };
        let dw = crate::nn::reshape_c(dw_mat, (cout, cin, kh, kw));
        (dx, dw, db)
    }
}

impl<S: Scalar> crate::nn::Parameterized<S> for Conv2d<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ndarray::ArrayViewD<'a, S>)) {
        f(self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(b.view().into_dyn());
        }
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ndarray::ArrayViewMutD<'a, S>)) {
        let Conv2d { weight, bias, .. } = self;
        f(weight.view_mut().into_dyn());
        if let Some(b) = bias {
            f(b.view_mut().into_dyn());
        }
    }
}
