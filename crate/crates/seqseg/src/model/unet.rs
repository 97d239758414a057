//! The sequence attention U-Net: encoder, bottleneck LSTM, attended decoder,
//! output LSTM, sigmoid head. Forward/backward over whole slice sequences.

use ndarray::{concatenate, s, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::Result;
use crate::nn::pool::{maxpool2, maxpool2_backward, upsample2, upsample2_backward};
use crate::nn::{act, init, Conv2d, Parameterized};
use crate::scalar::Scalar;

use super::attention::{AttentionGate, AttentionGateCache};
use super::clstm::{BiConvLstm, BiConvLstmCache, SeqMode};
use super::ModelConfig;

/// A run of 3x3 pad-1 convolutions, each followed by ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<S> {
    pub convs: Vec<Conv2d<S>>,
}

pub struct ConvBlockCache<S> {
    /// Input to each conv (index 0 is the block input).
    inputs: Vec<Array3<S>>,
    /// Post-ELU output of each conv (last one is the block output).
    outputs: Vec<Array3<S>>,
}

impl<S: Scalar> ConvBlockCache<S> {
    pub fn block_output(&self) -> &Array3<S> {
        self.outputs.last().unwrap()
    }

    pub fn block_input(&self) -> &Array3<S> {
        &self.inputs[0]
    }
}

impl<S: Scalar> ConvBlock<S> {
    pub fn init<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize, n_convs: usize) -> Self {
        assert!(n_convs >= 1);
        let mut convs = Vec::with_capacity(n_convs);
        let mut cin = in_channels;
        for _ in 0..n_convs {
            convs.push(Conv2d {
                weight: init::xavier_conv(rng, out_channels, cin, 3, 3),
                bias: Some(init::zero_bias(out_channels)),
                stride: 1,
                pad: 1,
            });
            cin = out_channels;
        }
        ConvBlock { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().unwrap().out_channels()
    }

    pub fn forward(&self, x: &Array3<S>) -> Array3<S> {
        let mut a = act::elu(&self.convs[0].forward(x));
        for conv in &self.convs[1..] {
            a = act::elu(&conv.forward(&a));
        }
        a
    }

    pub fn forward_cached(&self, x: &Array3<S>) -> (Array3<S>, ConvBlockCache<S>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut outputs = Vec::with_capacity(self.convs.len());
        let mut a = x.clone();
        for conv in &self.convs {
            let y = act::elu(&conv.forward(&a));
            inputs.push(a);
            outputs.push(y.clone());
            a = y;
        }
        let out = outputs.last().unwrap().clone();
        (out, ConvBlockCache { inputs, outputs })
    }

    /// Returns the gradient w.r.t. the block input; parameter gradients
    /// accumulate into `grads`.
    pub fn backward(
        &self,
        cache: &ConvBlockCache<S>,
        dy: &Array3<S>,
        grads: &mut ConvBlock<S>,
    ) -> Array3<S> {
        let mut da = dy.clone();
        for idx in (0..self.convs.len()).rev() {
            let dz = act::elu_backward(&cache.outputs[idx], &da);
            let (dx, dw, db) = self.convs[idx].backward(&cache.inputs[idx], &dz);
            grads.convs[idx].weight += &dw;
            *grads.convs[idx].bias.as_mut().unwrap() += &db.unwrap();
            da = dx;
        }
        da
    }
}

impl<S: Scalar> Parameterized<S> for ConvBlock<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        for conv in &self.convs {
            conv.for_each_param(f);
        }
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        for conv in &mut self.convs {
            conv.for_each_param_mut(f);
        }
    }
}

/// Every learnable parameter of the segmenter, plus its architecture config.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqUnetParams<S> {
    pub config: ModelConfig,
    pub enc1: ConvBlock<S>,
    pub enc2: ConvBlock<S>,
    pub enc3: ConvBlock<S>,
    pub bottleneck: BiConvLstm<S>,
    pub gate3: AttentionGate<S>,
    pub gate2: AttentionGate<S>,
    pub gate1: AttentionGate<S>,
    pub dec3: ConvBlock<S>,
    pub dec2: ConvBlock<S>,
    pub dec1: ConvBlock<S>,
    pub out_lstm: BiConvLstm<S>,
    pub head: Conv2d<S>,
}

/// All intermediates of one sequence forward pass.
pub struct SeqUnetCache<S> {
    enc1: Vec<ConvBlockCache<S>>,
    enc2: Vec<ConvBlockCache<S>>,
    enc3: Vec<ConvBlockCache<S>>,
    pool1_idx: Vec<Array3<u8>>,
    pool2_idx: Vec<Array3<u8>>,
    pool3_idx: Vec<Array3<u8>>,
    bottleneck_cache: BiConvLstmCache<S>,
    up3: Vec<Array3<S>>,
    gate3: Vec<AttentionGateCache<S>>,
    dec3: Vec<ConvBlockCache<S>>,
    up2: Vec<Array3<S>>,
    gate2: Vec<AttentionGateCache<S>>,
    dec2: Vec<ConvBlockCache<S>>,
    up1: Vec<Array3<S>>,
    gate1: Vec<AttentionGateCache<S>>,
    dec1: Vec<ConvBlockCache<S>>,
    out_lstm_cache: BiConvLstmCache<S>,
    /// Head input: center-step output of the output LSTM, (2*oh, H, W).
    lstm_center: Array3<S>,
    /// Final probability map (1, H, W), kept for the sigmoid backward.
    prob: Array3<S>,
}

impl<S: Scalar> SeqUnetCache<S> {
    /// Dimension report over every materialized intermediate, one row per
    /// named stage as `(name, [t, c, h, w])`. Per-step stages must agree
    /// across steps; sequence-collapsing stages report t = 1. The
    /// bottleneck features are not cached here; read them from the
    /// `forward_cached` return value.
    pub fn layer_shapes(&self) -> Vec<(&'static str, [usize; 4])> {
        fn stack(rows: &mut Vec<(&'static str, [usize; 4])>, name: &'static str, per_step: Vec<(usize, usize, usize)>) {
            let first = per_step[0];
            assert!(per_step.iter().all(|d| *d == first), "{name} shape varies across steps");
            rows.push((name, [per_step.len(), first.0, first.1, first.2]));
        }
        let dims3 = |xs: &[Array3<S>]| xs.iter().map(|x| x.dim()).collect::<Vec<_>>();
        let mut rows = Vec::new();
        stack(&mut rows, "input", self.enc1.iter().map(|c| c.block_input().dim()).collect());
        stack(&mut rows, "enc_block1", self.enc1.iter().map(|c| c.block_output().dim()).collect());
        stack(&mut rows, "pool1", self.pool1_idx.iter().map(|x| x.dim()).collect());
        stack(&mut rows, "enc_block2", self.enc2.iter().map(|c| c.block_output().dim()).collect());
        stack(&mut rows, "pool2", self.pool2_idx.iter().map(|x| x.dim()).collect());
        stack(&mut rows, "enc_block3", self.enc3.iter().map(|c| c.block_output().dim()).collect());
        stack(&mut rows, "pool3", self.pool3_idx.iter().map(|x| x.dim()).collect());
        stack(&mut rows, "upsample3", dims3(&self.up3));
        stack(&mut rows, "gate3_alpha", self.gate3.iter().map(|c| c.alpha.dim()).collect());
        stack(&mut rows, "concat3", self.dec3.iter().map(|c| c.block_input().dim()).collect());
        stack(&mut rows, "dec_block3", self.dec3.iter().map(|c| c.block_output().dim()).collect());
        stack(&mut rows, "upsample2", dims3(&self.up2));
        stack(&mut rows, "gate2_alpha", self.gate2.iter().map(|c| c.alpha.dim()).collect());
        stack(&mut rows, "concat2", self.dec2.iter().map(|c| c.block_input().dim()).collect());
        stack(&mut rows, "dec_block2", self.dec2.iter().map(|c| c.block_output().dim()).collect());
        stack(&mut rows, "upsample1", dims3(&self.up1));
        stack(&mut rows, "gate1_alpha", self.gate1.iter().map(|c| c.alpha.dim()).collect());
        stack(&mut rows, "concat1", self.dec1.iter().map(|c| c.block_input().dim()).collect());
        stack(&mut rows, "dec_block1", self.dec1.iter().map(|c| c.block_output().dim()).collect());
        let (lc, lh, lw) = self.lstm_center.dim();
        rows.push(("out_lstm_center", [1, lc, lh, lw]));
        let (pc, ph, pw) = self.prob.dim();
        rows.push(("prob", [1, pc, ph, pw]));
        rows
    }
}

impl<S: Scalar> SeqUnetParams<S> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [e1, e2, e3] = config.encoder_channels();
        let bh = config.bottleneck_hidden();
        let [d3, d2, d1] = config.decoder_channels();
        let oh = config.output_hidden();

        Ok(SeqUnetParams {
            enc1: ConvBlock::init(rng, config.in_channels, e1, 2),
            enc2: ConvBlock::init(rng, e1, e2, 2),
            enc3: ConvBlock::init(rng, e2, e3, 2),
            bottleneck: BiConvLstm::init(rng, e3, bh),
            gate3: AttentionGate::init(rng, e3, 2 * bh),
            gate2: AttentionGate::init(rng, e2, d3),
            gate1: AttentionGate::init(rng, e1, d2),
            dec3: ConvBlock::init(rng, e3 + 2 * bh, d3, 2),
            dec2: ConvBlock::init(rng, e2 + d3, d2, 2),
            dec1: ConvBlock::init(rng, e1 + d2, d1, 1),
            out_lstm: BiConvLstm::init(rng, d1, oh),
            head: Conv2d {
                weight: init::xavier_conv(rng, 1, 2 * oh, 1, 1),
                bias: Some(init::zero_bias(1)),
                stride: 1,
                pad: 0,
            },
            config,
        })
    }

    fn check_input(&self, seq: &Array4<S>) {
        let (t, c, h, w) = seq.dim();
        assert_eq!(
            (t, c, h, w),
            (self.config.seq_len, self.config.in_channels, self.config.height, self.config.width),
            "input sequence shape does not match the model config"
        );
    }

    /// Full forward pass: center-slice probability map (1, H, W) and the
    /// bottleneck feature maps (T, 2*bh, H/8, W/8) for the discriminator.
    pub fn forward(&self, seq: &Array4<S>) -> (Array3<S>, Array4<S>) {
        let (prob, bneck, _) = self.forward_cached(seq);
        (prob, bneck)
    }

    /// Encoder and bottleneck only (the feature extractor E).
    pub fn forward_features(&self, seq: &Array4<S>) -> Array4<S> {
        self.check_input(seq);
        let t_len = seq.dim().0;
        let (bh8, bw8) = self.config.bottleneck_hw();
        let e3c = self.enc3.out_channels();
        let mut pooled = Array4::zeros((t_len, e3c, bh8, bw8));
        for t in 0..t_len {
            let x0 = seq.index_axis(Axis(0), t).to_owned();
            let (p1, _) = maxpool2(&self.enc1.forward(&x0));
            let (p2, _) = maxpool2(&self.enc2.forward(&p1));
            let (p3, _) = maxpool2(&self.enc3.forward(&p2));
            pooled.index_axis_mut(Axis(0), t).assign(&p3);
        }
        self.bottleneck.forward(&pooled, SeqMode::PerStep)
    }

    pub fn forward_cached(&self, seq: &Array4<S>) -> (Array3<S>, Array4<S>, SeqUnetCache<S>) {
        self.check_input(seq);
        let t_len = seq.dim().0;

        // Encoder, per step.
        let mut enc1_c = Vec::new();
        let mut enc2_c = Vec::new();
        let mut enc3_c = Vec::new();
        let (mut i1s, mut i2s, mut i3s) = (Vec::new(), Vec::new(), Vec::new());
        let mut pooled3 = Vec::new();
        for t in 0..t_len {
            let x0 = seq.index_axis(Axis(0), t).to_owned();
            let (e1, c1) = self.enc1.forward_cached(&x0);
            let (p1, i1) = maxpool2(&e1);
            let (e2, c2) = self.enc2.forward_cached(&p1);
            let (p2, i2) = maxpool2(&e2);
            let (e3, c3) = self.enc3.forward_cached(&p2);
            let (p3, i3) = maxpool2(&e3);
            enc1_c.push(c1);
            enc2_c.push(c2);
            enc3_c.push(c3);
            i1s.push(i1);
            i2s.push(i2);
            i3s.push(i3);
            pooled3.push(p3);
        }

        let mut bneck_in = Array4::zeros((
            t_len,
            pooled3[0].dim().0,
            pooled3[0].dim().1,
            pooled3[0].dim().2,
        ));
        for (t, p3) in pooled3.iter().enumerate() {
            bneck_in.index_axis_mut(Axis(0), t).assign(p3);
        }
        let (bneck_out, bneck_cache) = self.bottleneck.forward_cached(&bneck_in, SeqMode::PerStep);

        // Decoder, per step.
        let mut up3s = Vec::new();
        let mut g3s = Vec::new();
        let mut dec3_c = Vec::new();
        let mut up2s = Vec::new();
        let mut g2s = Vec::new();
        let mut dec2_c = Vec::new();
        let mut up1s = Vec::new();
        let mut g1s = Vec::new();
        let mut dec1_c = Vec::new();
        let mut d1_seq: Option<Array4<S>> = None;
        for t in 0..t_len {
            let up3 = upsample2(&bneck_out.index_axis(Axis(0), t).to_owned());
            let (a3, g3) = self.gate3.forward_cached(enc3_c[t].block_output(), &up3);
            let cat3 = concatenate(Axis(0), &[a3.view(), up3.view()]).unwrap();
            let (d3, c_d3) = self.dec3.forward_cached(&cat3);

            let up2 = upsample2(&d3);
            let (a2, g2) = self.gate2.forward_cached(enc2_c[t].block_output(), &up2);
            let cat2 = concatenate(Axis(0), &[a2.view(), up2.view()]).unwrap();
            let (d2, c_d2) = self.dec2.forward_cached(&cat2);

            let up1 = upsample2(&d2);
            let (a1, g1) = self.gate1.forward_cached(enc1_c[t].block_output(), &up1);
            let cat1 = concatenate(Axis(0), &[a1.view(), up1.view()]).unwrap();
            let (d1, c_d1) = self.dec1.forward_cached(&cat1);

            let d1_dim = d1.dim();
            let seq_out = d1_seq.get_or_insert_with(|| {
                Array4::zeros((t_len, d1_dim.0, d1_dim.1, d1_dim.2))
            });
            seq_out.index_axis_mut(Axis(0), t).assign(&d1);

            up3s.push(up3);
            g3s.push(g3);
            dec3_c.push(c_d3);
            up2s.push(up2);
            g2s.push(g2);
            dec2_c.push(c_d2);
            up1s.push(up1);
            g1s.push(g1);
            dec1_c.push(c_d1);
        }

        let (lstm_out, out_lstm_cache) =
            self.out_lstm.forward_cached(d1_seq.as_ref().unwrap(), SeqMode::Center);
        let lstm_center = lstm_out.index_axis(Axis(0), 0).to_owned();
        let prob = act::sigmoid(&self.head.forward(&lstm_center));

        let cache = SeqUnetCache {
            enc1: enc1_c,
            enc2: enc2_c,
            enc3: enc3_c,
            pool1_idx: i1s,
            pool2_idx: i2s,
            pool3_idx: i3s,
            bottleneck_cache: bneck_cache,
            up3: up3s,
            gate3: g3s,
            dec3: dec3_c,
            up2: up2s,
            gate2: g2s,
            dec2: dec2_c,
            up1: up1s,
            gate1: g1s,
            dec1: dec1_c,
            out_lstm_cache,
            lstm_center,
            prob: prob.clone(),
        };
        (prob, bneck_out, cache)
    }

    /// Backward pass. `dprob` is the upstream gradient on the probability
    /// map; `dbottleneck` optionally injects an extra gradient on the
    /// bottleneck features (the discriminator path during adaptation).
    /// Parameter gradients accumulate into `grads`.
    pub fn backward(
        &self,
        cache: &SeqUnetCache<S>,
        dprob: &Array3<S>,
        dbottleneck: Option<&Array4<S>>,
        grads: &mut SeqUnetParams<S>,
    ) {
        let t_len = cache.enc1.len();
        let e1c = self.enc1.out_channels();
        let e2c = self.enc2.out_channels();
        let e3c = self.enc3.out_channels();

        // Head and output LSTM.
        let dlogits = act::sigmoid_backward(&cache.prob, dprob);
        let (dcenter, dw_head, db_head) = self.head.backward(&cache.lstm_center, &dlogits);
        grads.head.weight += &dw_head;
        *grads.head.bias.as_mut().unwrap() += &db_head.unwrap();
        let dout = dcenter.insert_axis(Axis(0));
        let d_d1_seq = self
            .out_lstm
            .backward(&cache.out_lstm_cache, &dout, &mut grads.out_lstm);

        // Decoder, per step; collect skip and bottleneck gradients.
        let (bh8, bw8) = self.config.bottleneck_hw();
        let mut d_bneck = Array4::zeros((t_len, self.config.bottleneck_channels(), bh8, bw8));
        if let Some(db) = dbottleneck {
            d_bneck += db;
        }
        let mut dskip1 = Vec::with_capacity(t_len);
        let mut dskip2 = Vec::with_capacity(t_len);
        let mut dskip3 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let dd1 = d_d1_seq.index_axis(Axis(0), t).to_owned();
            let dcat1 = self.dec1.backward(&cache.dec1[t], &dd1, &mut grads.dec1);
            let da1 = dcat1.slice(s![..e1c, .., ..]).to_owned();
            let dup1_cat = dcat1.slice(s![e1c.., .., ..]).to_owned();
            let (ds1, dg1) = self.gate1.backward(
                cache.enc1[t].block_output(),
                &cache.up1[t],
                &cache.gate1[t],
                &da1,
                &mut grads.gate1,
            );
            dskip1.push(ds1);
            let dd2 = upsample2_backward(&(dup1_cat + dg1));

            let dcat2 = self.dec2.backward(&cache.dec2[t], &dd2, &mut grads.dec2);
            let da2 = dcat2.slice(s![..e2c, .., ..]).to_owned();
            let dup2_cat = dcat2.slice(s![e2c.., .., ..]).to_owned();
            let (ds2, dg2) = self.gate2.backward(
                cache.enc2[t].block_output(),
                &cache.up2[t],
                &cache.gate2[t],
                &da2,
                &mut grads.gate2,
            );
            dskip2.push(ds2);
            let dd3 = upsample2_backward(&(dup2_cat + dg2));

            let dcat3 = self.dec3.backward(&cache.dec3[t], &dd3, &mut grads.dec3);
            let da3 = dcat3.slice(s![..e3c, .., ..]).to_owned();
            let dup3_cat = dcat3.slice(s![e3c.., .., ..]).to_owned();
            let (ds3, dg3) = self.gate3.backward(
                cache.enc3[t].block_output(),
                &cache.up3[t],
                &cache.gate3[t],
                &da3,
                &mut grads.gate3,
            );
            dskip3.push(ds3);
            let mut slot = d_bneck.index_axis_mut(Axis(0), t);
            slot += &upsample2_backward(&(dup3_cat + dg3));
        }

        // Bottleneck LSTM, then the encoder stack per step.
        let d_pool3 = self
            .bottleneck
            .backward(&cache.bottleneck_cache, &d_bneck, &mut grads.bottleneck);
        for t in 0..t_len {
            let d_e3 = maxpool2_backward(&cache.pool3_idx[t], &d_pool3.index_axis(Axis(0), t).to_owned())
                + &dskip3[t];
            let d_p2 = self.enc3.backward(&cache.enc3[t], &d_e3, &mut grads.enc3);
            let d_e2 = maxpool2_backward(&cache.pool2_idx[t], &d_p2) + &dskip2[t];
            let d_p1 = self.enc2.backward(&cache.enc2[t], &d_e2, &mut grads.enc2);
            let d_e1 = maxpool2_backward(&cache.pool1_idx[t], &d_p1) + &dskip1[t];
            let _ = self.enc1.backward(&cache.enc1[t], &d_e1, &mut grads.enc1);
        }
    }
}

impl<S: Scalar> Parameterized<S> for SeqUnetParams<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        self.enc1.for_each_param(f);
        self.enc2.for_each_param(f);
        self.enc3.for_each_param(f);
        self.bottleneck.for_each_param(f);
        self.gate3.for_each_param(f);
        self.gate2.for_each_param(f);
        self.gate1.for_each_param(f);
        self.dec3.for_each_param(f);
        self.dec2.for_each_param(f);
        self.dec1.for_each_param(f);
        self.out_lstm.for_each_param(f);
        self.head.for_each_param(f);
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        let SeqUnetParams {
            enc1,
            enc2,
            enc3,
            bottleneck,
            gate3,
            gate2,
            gate1,
            dec3,
            dec2,
            dec1,
            out_lstm,
            head,
            ..
        } = self;
        enc1.for_each_param_mut(f);
        enc2.for_each_param_mut(f);
        enc3.for_each_param_mut(f);
        bottleneck.for_each_param_mut(f);
        gate3.for_each_param_mut(f);
        gate2.for_each_param_mut(f);
        gate1.for_each_param_mut(f);
        dec3.for_each_param_mut(f);
        dec2.for_each_param_mut(f);
        dec1.for_each_param_mut(f);
        out_lstm.for_each_param_mut(f);
        head.for_each_param_mut(f);
    }
}

/// Free-function form of the forward pass.
pub fn seq_unet_forward<S: Scalar>(
    seq: &Array4<S>,
    params: &SeqUnetParams<S>,
) -> (Array3<S>, Array4<S>) {
    params.forward(seq)
}
