//! Domain discriminator on bottleneck feature maps.
//!
//! The sequence axis is collapsed by pixel summation, then three strided
//! 5x5 convolutions (LeakyReLU 0.2) reduce the map to a vector, followed by
//! FC->10 (ReLU) and FC->2. Logit 0 is the source domain, logit 1 the target.

use ndarray::{Array1, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::nn::conv::out_size;
use crate::nn::{act, init, Conv2d, Dense, Parameterized};
use crate::scalar::Scalar;

use super::ModelConfig;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<S> {
    pub convs: [Conv2d<S>; 3],
    pub fc1: Dense<S>,
    pub fc2: Dense<S>,
}

pub struct DiscriminatorCache<S> {
    t_len: usize,
    /// Input map of each conv (index 0 is the T-summed bottleneck).
    conv_inputs: Vec<Array3<S>>,
    /// Post-LeakyReLU output of each conv.
    act_outs: Vec<Array3<S>>,
    flat: Array1<S>,
    fc1_relu: Array1<S>,
}

impl<S: Scalar> DiscriminatorCache<S> {
    /// Spatial map right before flattening (the last conv's activation).
    pub fn final_map(&self) -> &Array3<S> {
        &self.act_outs[2]
    }

    /// Dimension report over the materialized intermediates, from the
    /// T-summed input map through the first fully connected layer. The
    /// logits come back from `forward_cached` itself.
    pub fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d3 = |x: &Array3<S>| vec![x.dim().0, x.dim().1, x.dim().2];
        vec![
            ("summed_input", d3(&self.conv_inputs[0])),
            ("conv1", d3(&self.act_outs[0])),
            ("conv2", d3(&self.act_outs[1])),
            ("conv3", d3(&self.act_outs[2])),
            ("flatten", vec![self.flat.len()]),
            ("fc1", vec![self.fc1_relu.len()]),
        ]
    }
}

impl<S: Scalar> DiscriminatorParams<S> {
    pub fn init<R: Rng>(rng: &mut R, config: &ModelConfig) -> Self {
        let in_ch = config.bottleneck_channels();
        let chans = config.discriminator_channels();
        let conv = |rng: &mut R, cin: usize, cout: usize| Conv2d {
            weight: init::xavier_conv(rng, cout, cin, 5, 5),
            bias: Some(init::zero_bias(cout)),
            stride: 2,
            pad: 2,
        };
        let convs = [
            conv(rng, in_ch, chans[0]),
            conv(rng, chans[0], chans[1]),
            conv(rng, chans[1], chans[2]),
        ];
        let (mut fh, mut fw) = config.bottleneck_hw();
        for _ in 0..3 {
            fh = out_size(fh, 5, 2, 2);
            fw = out_size(fw, 5, 2, 2);
        }
        let flat = chans[2] * fh * fw;
        DiscriminatorParams {
            convs,
            fc1: Dense {
                weight: init::xavier_dense(rng, 10, flat),
                bias: init::zero_bias(10),
            },
            fc2: Dense {
                weight: init::xavier_dense(rng, 2, 10),
                bias: init::zero_bias(2),
            },
        }
    }

    pub fn forward(&self, features: &Array4<S>) -> Array1<S> {
        self.forward_cached(features).0
    }

    pub fn forward_cached(&self, features: &Array4<S>) -> (Array1<S>, DiscriminatorCache<S>) {
        let (t_len, c, _, _) = features.dim();
        assert_eq!(
            c,
            self.convs[0].in_channels(),
            "feature channel count does not match the discriminator"
        );
        let slope = S::from_f(LEAKY_SLOPE);

        let mut a = features.sum_axis(Axis(0));
        let mut conv_inputs = Vec::with_capacity(3);
        let mut act_outs = Vec::with_capacity(3);
        for conv in &self.convs {
            let z = conv.forward(&a);
            let y = act::leaky_relu(&z, slope);
            conv_inputs.push(a);
            act_outs.push(y.clone());
            a = y;
        }
        let n = a.len();
        let flat = a.into_shape_with_order(n).unwrap();
        let fc1_relu = act::relu(&self.fc1.forward(&flat));
        let logits = self.fc2.forward(&fc1_relu);
        (
            logits,
            DiscriminatorCache { t_len, conv_inputs, act_outs, flat, fc1_relu },
        )
    }

    /// Gradient w.r.t. the input features (identical at every sequence step,
    /// since the forward pass sums over T); parameter gradients accumulate
    /// into `grads`.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<S>,
        dlogits: &Array1<S>,
        grads: &mut DiscriminatorParams<S>,
    ) -> Array4<S> {
        let slope = S::from_f(LEAKY_SLOPE);

        let (dfc1_relu, dw2, db2) = self.fc2.backward(&cache.fc1_relu, dlogits);
        grads.fc2.weight += &dw2;
        grads.fc2.bias += &db2;
        let dz1 = act::relu_backward(&cache.fc1_relu, &dfc1_relu);
        let (dflat, dw1, db1) = self.fc1.backward(&cache.flat, &dz1);
        grads.fc1.weight += &dw1;
        grads.fc1.bias += &db1;

        let mut da = dflat
            .into_shape_with_order(cache.act_outs[2].dim())
            .unwrap();
        for idx in (0..3).rev() {
            let dz = act::leaky_relu_backward(&cache.act_outs[idx], &da, slope);
            let (dprev, dw, db) = self.convs[idx].backward(&cache.conv_inputs[idx], &dz);
            grads.convs[idx].weight += &dw;
            *grads.convs[idx].bias.as_mut().unwrap() += &db.unwrap();
            da = dprev;
        }

        let (c, h, w) = da.dim();
        let mut dfeat = Array4::zeros((cache.t_len, c, h, w));
        for t in 0..cache.t_len {
            dfeat.index_axis_mut(Axis(0), t).assign(&da);
        }
        dfeat
    }
}

impl<S: Scalar> Parameterized<S> for DiscriminatorParams<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        for conv in &self.convs {
            conv.for_each_param(f);
        }
        self.fc1.for_each_param(f);
        self.fc2.for_each_param(f);
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        let DiscriminatorParams { convs, fc1, fc2 } = self;
        for conv in convs {
            conv.for_each_param_mut(f);
        }
        fc1.for_each_param_mut(f);
        fc2.for_each_param_mut(f);
    }
}

/// Free-function form of the forward pass.
pub fn discriminator_forward<S: Scalar>(
    features: &Array4<S>,
    params: &DiscriminatorParams<S>,
) -> Array1<S> {
    params.forward(features)
}
