//! Convolutional LSTM cells and their bidirectional sequence wrapper.
//!
//! Gates are plain 3x3 convolutions over the channel-concatenated
//! [input, hidden] map; there are no cell-to-gate (peephole) connections:
//! `i,f,o = sigmoid(conv([x,h]) + b)`, `g = tanh(conv([x,h]) + b)`,
//! `c' = f*c + i*g`, `h' = o * tanh(c')`.

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::nn::conv::{col2im, im2col};
use crate::nn::{act, init, Conv2d, Parameterized};
use crate::scalar::Scalar;

/// One direction's cell. Each gate conv maps (in + hidden) channels to
/// `hidden` channels, 3x3, pad 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstm<S> {
    pub gate_i: Conv2d<S>,
    pub gate_f: Conv2d<S>,
    pub gate_o: Conv2d<S>,
    pub gate_g: Conv2d<S>,
    pub hidden: usize,
}

/// Intermediates of one step, enough to run backpropagation through time.
pub struct LstmStepCache<S> {
    /// im2col of the concatenated [x, h_prev] map (shared by all gates).
    cols: Array2<S>,
    i: Array3<S>,
    f: Array3<S>,
    o: Array3<S>,
    g: Array3<S>,
    c_prev: Array3<S>,
    tanh_c: Array3<S>,
}

impl<S: Scalar> ConvLstm<S> {
    pub fn init<R: Rng>(rng: &mut R, in_channels: usize, hidden: usize) -> Self {
        let conv = |rng: &mut R, forget: bool| Conv2d {
            weight: init::xavier_conv(rng, hidden, in_channels + hidden, 3, 3),
            // Forget-gate bias starts at 1 so early training does not wipe
            // the cell state; all other biases start at 0.
            bias: Some(if forget {
                ndarray::Array1::from_elem(hidden, S::one())
            } else {
                init::zero_bias(hidden)
            }),
            stride: 1,
            pad: 1,
        };
        ConvLstm {
            gate_i: conv(rng, false),
            gate_f: conv(rng, true),
            gate_o: conv(rng, false),
            gate_g: conv(rng, false),
            hidden,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.gate_i.in_channels() - self.hidden
    }

    fn gate_preact(&self, conv: &Conv2d<S>, cols: &Array2<S>, h: usize, w: usize) -> Array3<S> {
        let (co, ci, kh, kw) = conv.weight.dim();
        let w_mat = conv.weight.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
        let mut z = w_mat.dot(cols);
        if let Some(b) = &conv.bias {
            for (mut row, &bv) in z.outer_iter_mut().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        crate::nn::reshape_c(z, (co, h, w))
    }

    pub fn step(&self, x: &Array3<S>, h: &Array3<S>, c: &Array3<S>) -> (Array3<S>, Array3<S>) {
        let (h_new, c_new, _) = self.step_cached(x, h, c);
        (h_new, c_new)
    }

    pub fn step_cached(
        &self,
        x: &Array3<S>,
        h: &Array3<S>,
        c: &Array3<S>,
    ) -> (Array3<S>, Array3<S>, LstmStepCache<S>) {
        assert_eq!(x.dim().0, self.in_channels(), "input channel mismatch");
        assert_eq!(h.dim().0, self.hidden);
        assert_eq!(c.dim(), h.dim());
        let (hh, ww) = (x.dim().1, x.dim().2);

        let cat = concatenate(Axis(0), &[x.view(), h.view()]).unwrap();
        let cols = im2col(&cat, 3, 3, 1, 1);
        let i = act::sigmoid(&self.gate_preact(&self.gate_i, &cols, hh, ww));
        let f = act::sigmoid(&self.gate_preact(&self.gate_f, &cols, hh, ww));
        let o = act::sigmoid(&self.gate_preact(&self.gate_o, &cols, hh, ww));
        let g = act::tanh(&self.gate_preact(&self.gate_g, &cols, hh, ww));

        let c_new = &f * c + &i * &g;
        let tanh_c = act::tanh(&c_new);
        let h_new = &o * &tanh_c;
        let cache = LstmStepCache {
            cols,
            i,
            f,
            o,
            g,
            c_prev: c.clone(),
            tanh_c,
        };
        (h_new, c_new, cache)
    }

    /// BPTT through one step. `dh`/`dc` are the gradients flowing into this
    /// step's outputs; returns gradients for the step inputs and accumulates
    /// parameter gradients into `grads`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache<S>,
        dh: &Array3<S>,
        dc: &Array3<S>,
        grads: &mut ConvLstm<S>,
    ) -> (Array3<S>, Array3<S>, Array3<S>) {
        let LstmStepCache { cols, i, f, o, g, c_prev, tanh_c } = cache;
        let (hid, hh, ww) = i.dim();

        let d_o = dh * tanh_c;
        // dc gets two contributions: from the next step and through h' = o*tanh(c').
        let dc_total = dc + &act::tanh_backward(tanh_c, &(dh * o));
        let d_f = &dc_total * c_prev;
        let dc_prev = &dc_total * f;
        let d_i = &dc_total * g;
        let d_g = &dc_total * i;

        let dz_i = act::sigmoid_backward(i, &d_i);
        let dz_f = act::sigmoid_backward(f, &d_f);
        let dz_o = act::sigmoid_backward(o, &d_o);
        let dz_g = act::tanh_backward(g, &d_g);

        let cin_total = self.gate_i.in_channels();
        let mut dcols = Array2::<S>::zeros(cols.dim());
        for (conv, gconv, dz) in [
            (&self.gate_i, &mut grads.gate_i, dz_i),
            (&self.gate_f, &mut grads.gate_f, dz_f),
            (&self.gate_o, &mut grads.gate_o, dz_o),
            (&self.gate_g, &mut grads.gate_g, dz_g),
        ] {
            let dz_mat = dz.view().into_shape_with_order((hid, hh * ww)).unwrap();
            let w_mat = conv
                .weight
                .view()
                .into_shape_with_order((hid, cin_total * 9))
                .unwrap();
            let dw = dz_mat.dot(&cols.t());
            gconv.weight += &crate::nn::reshape_c(dw, (hid, cin_total, 3, 3));
            *gconv.bias.as_mut().unwrap() += &dz_mat.sum_axis(Axis(1));
            dcols += &w_mat.t().dot(&dz_mat);
        }

        let dcat = col2im(&dcols.view(), (cin_total, hh, ww), 3, 3, 1, 1);
        let dx = dcat.slice(s![..cin_total - hid, .., ..]).to_owned();
        let dh_prev = dcat.slice(s![cin_total - hid.., .., ..]).to_owned();
        (dx, dh_prev, dc_prev)
    }
}

impl<S: Scalar> Parameterized<S> for ConvLstm<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        self.gate_i.for_each_param(f);
        self.gate_f.for_each_param(f);
        self.gate_o.for_each_param(f);
        self.gate_g.for_each_param(f);
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        let ConvLstm { gate_i, gate_f, gate_o, gate_g, .. } = self;
        gate_i.for_each_param_mut(f);
        gate_f.for_each_param_mut(f);
        gate_o.for_each_param_mut(f);
        gate_g.for_each_param_mut(f);
    }
}

/// What a bidirectional pass returns: all time steps, or only the center
/// step ceil(T/2) (the slice being segmented).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqMode {
    PerStep,
    Center,
}

/// Index of the center step, 0-based (ceil(T/2) in 1-based counting).
pub fn center_step(t: usize) -> usize {
    (t - 1) / 2
}

/// Two cells run over the sequence in opposite directions; their hidden
/// states are concatenated along channels at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct BiConvLstm<S> {
    pub fwd: ConvLstm<S>,
    pub bwd: ConvLstm<S>,
}

pub struct BiConvLstmCache<S> {
    /// Forward-direction step caches, in time order.
    fwd_steps: Vec<LstmStepCache<S>>,
    /// Backward-direction step caches, in processing order (reversed time).
    bwd_steps: Vec<LstmStepCache<S>>,
    mode: SeqMode,
}

impl<S: Scalar> BiConvLstm<S> {
    pub fn init<R: Rng>(rng: &mut R, in_channels: usize, hidden: usize) -> Self {
        BiConvLstm {
            fwd: ConvLstm::init(rng, in_channels, hidden),
            bwd: ConvLstm::init(rng, in_channels, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward(&self, seq: &Array4<S>, mode: SeqMode) -> Array4<S> {
        self.forward_cached(seq, mode).0
    }

    /// Returns (T, 2*hidden, H, W) for `PerStep` or (1, 2*hidden, H, W)
    /// for `Center`. Initial states are zero in both directions.
    pub fn forward_cached(&self, seq: &Array4<S>, mode: SeqMode) -> (Array4<S>, BiConvLstmCache<S>) {
        let (t_len, _, hh, ww) = seq.dim();
        assert!(t_len >= 1, "empty sequence");
        let hid = self.hidden();

        let run = |cell: &ConvLstm<S>, reversed: bool| {
            let mut h = Array3::zeros((hid, hh, ww));
            let mut c = Array3::zeros((hid, hh, ww));
            let mut outs = Vec::with_capacity(t_len);
            let mut caches = Vec::with_capacity(t_len);
            for step in 0..t_len {
                let t = if reversed { t_len - 1 - step } else { step };
                let x = seq.index_axis(Axis(0), t).to_owned();
                let (h_new, c_new, cache) = cell.step_cached(&x, &h, &c);
                h = h_new;
                c = c_new;
                outs.push(h.clone());
                caches.push(cache);
            }
            (outs, caches)
        };

        let (fwd_h, fwd_steps) = run(&self.fwd, false);
        let (bwd_h, bwd_steps) = run(&self.bwd, true);

        let steps: Vec<usize> = match mode {
            SeqMode::PerStep => (0..t_len).collect(),
            SeqMode::Center => vec![center_step(t_len)],
        };
        let mut out = Array4::zeros((steps.len(), 2 * hid, hh, ww));
        for (row, &t) in steps.iter().enumerate() {
            out.slice_mut(s![row, ..hid, .., ..]).assign(&fwd_h[t]);
            // Backward cell processed time t at step index T-1-t.
            out.slice_mut(s![row, hid.., .., ..]).assign(&bwd_h[t_len - 1 - t]);
        }
        (out, BiConvLstmCache { fwd_steps, bwd_steps, mode })
    }

    /// Backpropagation through time in both directions. `dout` matches the
    /// forward output shape for the cached mode. Returns the gradient w.r.t.
    /// the input sequence; parameter gradients accumulate into `grads`.
    pub fn backward(
        &self,
        cache: &BiConvLstmCache<S>,
        dout: &Array4<S>,
        grads: &mut BiConvLstm<S>,
    ) -> Array4<S> {
        let t_len = cache.fwd_steps.len();
        let hid = self.hidden();
        let (_, _, hh, ww) = dout.dim();
        let cin = self.fwd.in_channels();

        // Spread dout over time: zero everywhere except the emitted steps.
        let mut dh_time: Vec<(Array3<S>, Array3<S>)> = (0..t_len)
            .map(|_| (Array3::zeros((hid, hh, ww)), Array3::zeros((hid, hh, ww))))
            .collect();
        match cache.mode {
            SeqMode::PerStep => {
                for t in 0..t_len {
                    let row = dout.index_axis(Axis(0), t);
                    dh_time[t].0.assign(&row.slice(s![..hid, .., ..]));
                    dh_time[t].1.assign(&row.slice(s![hid.., .., ..]));
                }
            }
            SeqMode::Center => {
                let t = center_step(t_len);
                let row = dout.index_axis(Axis(0), 0);
                dh_time[t].0.assign(&row.slice(s![..hid, .., ..]));
                dh_time[t].1.assign(&row.slice(s![hid.., .., ..]));
            }
        }

        let mut dseq = Array4::zeros((t_len, cin, hh, ww));

        // Forward direction: walk time backwards.
        let mut dh_carry = Array3::zeros((hid, hh, ww));
        let mut dc_carry = Array3::zeros((hid, hh, ww));
        for t in (0..t_len).rev() {
            let dh = &dh_time[t].0 + &dh_carry;
            let (dx, dh_prev, dc_prev) =
                self.fwd.step_backward(&cache.fwd_steps[t], &dh, &dc_carry, &mut grads.fwd);
            let mut slot = dseq.index_axis_mut(Axis(0), t);
            slot += &dx;
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }

        // Backward direction: its processing order is reversed time, so we
        // walk processing steps backwards (i.e. time forwards).
        let mut dh_carry = Array3::zeros((hid, hh, ww));
        let mut dc_carry = Array3::zeros((hid, hh, ww));
        for step in (0..t_len).rev() {
            let t = t_len - 1 - step;
            let dh = &dh_time[t].1 + &dh_carry;
            let (dx, dh_prev, dc_prev) =
                self.bwd.step_backward(&cache.bwd_steps[step], &dh, &dc_carry, &mut grads.bwd);
            let mut slot = dseq.index_axis_mut(Axis(0), t);
            slot += &dx;
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        dseq
    }
}

impl<S: Scalar> Parameterized<S> for BiConvLstm<S> {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, S>)) {
        self.fwd.for_each_param(f);
        self.bwd.for_each_param(f);
    }

    fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, S>)) {
        let BiConvLstm { fwd, bwd } = self;
        fwd.for_each_param_mut(f);
        bwd.for_each_param_mut(f);
    }
}

/// Single-cell step with explicit states (thin wrapper over [`ConvLstm::step`]).
pub fn conv_lstm_step<S: Scalar>(
    x: &Array3<S>,
    h: &Array3<S>,
    c: &Array3<S>,
    params: &ConvLstm<S>,
) -> (Array3<S>, Array3<S>) {
    params.step(x, h, c)
}

/// Bidirectional pass with explicit direction parameters.
pub fn bidirectional_clstm<S: Scalar>(
    seq: &Array4<S>,
    fwd: &ConvLstm<S>,
    bwd: &ConvLstm<S>,
    mode: SeqMode,
) -> Array4<S> {
    BiConvLstm { fwd: fwd.clone(), bwd: bwd.clone() }.forward(seq, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_seq(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_and_state_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell: ConvLstm<f64> = ConvLstm::init(&mut rng, 2, 3);
        for conv in [&mut cell.gate_i, &mut cell.gate_f, &mut cell.gate_o, &mut cell.gate_g] {
            conv.weight.fill(0.0);
            conv.bias.as_mut().unwrap().fill(0.0);
        }
        let x = Array3::from_elem((2, 4, 4), 0.7);
        let h = Array3::zeros((3, 4, 4));
        let c = Array3::zeros((3, 4, 4));
        let (h_new, c_new) = cell.step(&x, &h, &c);
        assert!(h_new.iter().all(|&v| v == 0.0));
        assert!(c_new.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_state_is_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell: ConvLstm<f64> = ConvLstm::init(&mut rng, 2, 3);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-10.0..10.0));
        let mut h = Array3::zeros((3, 5, 5));
        let mut c = Array3::zeros((3, 5, 5));
        for _ in 0..5 {
            let (hn, cn) = cell.step(&x, &h, &c);
            h = hn;
            c = cn;
            assert!(h.iter().all(|&v| v.abs() < 1.0), "|h| must stay below 1");
            assert!(c.iter().all(|&v| v.is_finite()));
        }
    }

    #[test]
    fn forget_gate_bias_initializes_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell: ConvLstm<f64> = ConvLstm::init(&mut rng, 1, 2);
        assert!(cell.gate_f.bias.as_ref().unwrap().iter().all(|&b| b == 1.0));
        assert!(cell.gate_i.bias.as_ref().unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bidirectional_shapes_match_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lstm: BiConvLstm<f64> = BiConvLstm::init(&mut rng, 4, 8);
        let seq = rand_seq(&mut rng, (3, 4, 4, 4));
        assert_eq!(lstm.forward(&seq, SeqMode::PerStep).dim(), (3, 16, 4, 4));
        assert_eq!(lstm.forward(&seq, SeqMode::Center).dim(), (1, 16, 4, 4));
    }

    #[test]
    fn single_step_sequence_makes_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lstm: BiConvLstm<f64> = BiConvLstm::init(&mut rng, 2, 3);
        let seq = rand_seq(&mut rng, (1, 2, 4, 4));
        let per_step = lstm.forward(&seq, SeqMode::PerStep);
        let center = lstm.forward(&seq, SeqMode::Center);
        assert_eq!(per_step, center);
    }

    #[test]
    fn center_step_is_ceil_of_half() {
        assert_eq!(center_step(1), 0);
        assert_eq!(center_step(3), 1);
        assert_eq!(center_step(5), 2);
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        // Loss probes h' and c' jointly; checks dx, dh, dc and all four
        // gate convs (the forget gate among them).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cell: ConvLstm<f64> = ConvLstm::init(&mut rng, 2, 2);
        let x = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let h = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let c = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let probe_h = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let probe_c = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let (nx, nh) = (x.len(), h.len());
        let run = |theta: &[f64]| -> f64 {
            let x = Array3::from_shape_vec((2, 3, 3), theta[..nx].to_vec()).unwrap();
            let h = Array3::from_shape_vec((2, 3, 3), theta[nx..nx + nh].to_vec()).unwrap();
            let c = Array3::from_shape_vec((2, 3, 3), theta[nx + nh..nx + 2 * nh].to_vec()).unwrap();
            let mut cell = cell.clone();
            cell.load_f64_slice(&theta[nx + 2 * nh..]);
            let (hn, cn) = cell.step(&x, &h, &c);
            (hn * &probe_h).sum() + (cn * &probe_c).sum()
        };
        let mut theta: Vec<f64> = x.iter().chain(h.iter()).chain(c.iter()).copied().collect();
        theta.extend(cell.to_f64_vec());
        let numeric = finite_diff(run, &theta, 1e-5);

        // Analytic: chain dc through both the explicit probe and h' = o*tanh(c').
        let (_, _, cache) = cell.step_cached(&x, &h, &c);
        let mut grads = cell.zeroed();
        let (dx, dh, dc) = cell.step_backward(&cache, &probe_h, &probe_c, &mut grads);
        let mut analytic: Vec<f64> = dx.iter().chain(dh.iter()).chain(dc.iter()).copied().collect();
        analytic.extend(grads.to_f64_vec());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn bidirectional_bptt_matches_finite_differences() {
        // Full sequence check in CENTER mode: gradients w.r.t. the input
        // sequence and every parameter of both directions.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lstm: BiConvLstm<f64> = BiConvLstm::init(&mut rng, 1, 2);
        let seq = rand_seq(&mut rng, (3, 1, 3, 3));
        let probe = rand_seq(&mut rng, (1, 4, 3, 3));

        let nseq = seq.len();
        let run = |theta: &[f64]| -> f64 {
            let seq = Array4::from_shape_vec((3, 1, 3, 3), theta[..nseq].to_vec()).unwrap();
            let mut lstm = lstm.clone();
            lstm.load_f64_slice(&theta[nseq..]);
            (lstm.forward(&seq, SeqMode::Center) * &probe).sum()
        };
        let mut theta: Vec<f64> = seq.iter().copied().collect();
        theta.extend(lstm.to_f64_vec());
        let numeric = finite_diff(run, &theta, 1e-5);

        let (_, cache) = lstm.forward_cached(&seq, SeqMode::Center);
        let mut grads = lstm.zeroed();
        let dseq = lstm.backward(&cache, &probe, &mut grads);
        let mut analytic: Vec<f64> = dseq.iter().copied().collect();
        analytic.extend(grads.to_f64_vec());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }
}
