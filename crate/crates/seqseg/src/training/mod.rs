//! Training harness: source pretraining, adversarial domain adaptation,
//! transfer fine-tuning, the from-scratch baseline, subject-level k-fold
//! splitting, and whole-volume prediction.
//!
//! Every loop is deterministic given (config, seed): data order, parameter
//! initialization, and optimizer arithmetic all flow from one `ChaCha8Rng`.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{pretrain_loss_grad, segmentation_da_loss_grad, LossConfig};
use crate::metrics::binarize;
use crate::model::{DiscriminatorParams, ModelConfig, SeqUnetParams};
use crate::nn::softmax::cross_entropy_logits;
use crate::nn::Parameterized;
use crate::preprocess::{bind_sequences, SliceSequence};
use crate::scalar::Scalar;
use crate::volume::{CtVolume, DatasetManifest, SegmentationMask, Stage};

/// Hyperparameters for every training mode. One file/struct drives a whole
/// run, so checkpoints can carry it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate for the segmentation network.
    pub lr_seg: f64,
    /// Learning rate for the discriminator.
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr_seg: 5e-5,
            lr_disc: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.9999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_seg > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// SHA-256 of the canonical JSON form; identifies a run's configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// One cross-validation fold: disjoint train/test subject lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Shuffled subject-level partition into `k` folds with sizes differing by
/// at most one; fold `i` tests on chunk `i` and trains on the rest.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    let mut subjects: Vec<String> = Vec::new();
    for s in manifest.subjects() {
        if !subjects.iter().any(|x| x == s) {
            subjects.push(s.to_string());
        }
    }
    if k == 0 || k > subjects.len() {
        return Err(Error::Config(format!(
            "fold count {k} must be in 1..={} (subject count)",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let n = subjects.len();
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let test: Vec<String> = subjects[start..start + size].to_vec();
        let train: Vec<String> = subjects[..start]
            .iter()
            .chain(&subjects[start + size..])
            .cloned()
            .collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(FoldSplit { folds })
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean segmentation objective over the epoch's sequences.
    pub seg_loss: f64,
    /// Mean discriminator objective over the epoch's batches (adaptation only).
    pub disc_loss: Option<f64>,
    pub lr_seg: f64,
    pub lr_disc: Option<f64>,
}

/// A finished training run: best checkpoint plus the full loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn convert_sequences<S: Scalar>(seqs: &[SliceSequence]) -> Vec<(Array4<S>, Array3<S>)> {
    seqs.iter()
        .map(|s| {
            (
                s.slices.mapv(|x| S::from_f(f64::from(x))),
                s.center_mask.mapv(|x| S::from_f(f64::from(x))),
            )
        })
        .collect()
}

fn check_sequences<S: Scalar>(seqs: &[SliceSequence], model: &ModelConfig, what: &str) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Data(format!("no {what} sequences to train on")));
    }
    let want = (model.seq_len, model.in_channels, model.height, model.width);
    for s in seqs {
        if s.slices.dim() != want {
            return Err(Error::Shape(format!(
                "{what} sequence for subject {} has shape {:?}, model expects {:?}",
                s.subject,
                s.slices.dim(),
                want
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Freeze {
    Nothing,
    /// Encoder blocks and the bottleneck LSTM stay fixed (transfer baseline).
    Extractor,
}

fn zero_extractor_grads<S: Scalar>(grads: &mut SeqUnetParams<S>) {
    grads.enc1.scale(S::zero());
    grads.enc2.scale(S::zero());
    grads.enc3.scale(S::zero());
    grads.bottleneck.scale(S::zero());
}

/// Extractor parameters flattened out, for freezing-contract checks.
pub fn extractor_f64_vec<S: Scalar>(params: &SeqUnetParams<S>) -> Vec<f64> {
    let mut out = params.enc1.to_f64_vec();
    out.extend(params.enc2.to_f64_vec());
    out.extend(params.enc3.to_f64_vec());
    out.extend(params.bottleneck.to_f64_vec());
    out
}

fn run_segmentation_loop<S: Scalar>(
    mut params: SeqUnetParams<S>,
    data: &[(Array4<S>, Array3<S>)],
    cfg: &TrainConfig,
    freeze: Freeze,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome<S>> {
    let mut adam = Adam::new(params.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut best_params = params.clone();
    let mut best_state = adam.state().clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = data.len();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeroed();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (seq, mask) = &data[i];
                let (prob, _, cache) = params.forward_cached(seq);
                let (loss, dy) = pretrain_loss_grad(&prob, mask, &cfg.loss);
                params.backward(&cache, &dy, None, &mut grads);
                batch_loss += loss.to_f();
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite segmentation loss at epoch {epoch}")));
            }
            grads.scale(S::from_f(1.0 / chunk.len() as f64));
            if freeze == Freeze::Extractor {
                zero_extractor_grads(&mut grads);
            }
            adam.step(cfg.lr_seg, &mut params, &grads);
            loss_sum += batch_loss;
        }
        let epoch_loss = loss_sum / n as f64;
        log.push(EpochRecord {
            epoch,
            seg_loss: epoch_loss,
            disc_loss: None,
            lr_seg: cfg.lr_seg,
            lr_disc: None,
        });
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
            best_params = params.clone();
            best_state = adam.state().clone();
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            epoch: best_epoch,
            params: best_params,
            discriminator: None,
            opt_seg: best_state,
            opt_disc: None,
        },
        log,
        best_epoch,
        best_loss,
    })
}

/// Train a fresh network on the (large) source dataset with the weighted
/// dice objective. The best-epoch checkpoint seeds every other mode.
pub fn pretrain_source<S: Scalar>(source: &[SliceSequence], cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    check_sequences::<S>(source, &cfg.model, "source")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = SeqUnetParams::init(cfg.model.clone(), &mut rng)?;
    let data = convert_sequences::<S>(source);
    run_segmentation_loop(params, &data, cfg, Freeze::Nothing, &mut rng)
}

/// From-scratch baseline: identical to pretraining, run on the target data.
pub fn train_scratch<S: Scalar>(target: &[SliceSequence], cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    pretrain_source(target, cfg)
}

/// Transfer baseline: start from the pretrained weights, freeze the feature
/// extractor (encoders + bottleneck LSTM), fine-tune the gates, decoder,
/// output LSTM, and head on target data.
pub fn finetune_transfer<S: Scalar>(
    pretrained: &Checkpoint<S>,
    target: &[SliceSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if pretrained.config.model != cfg.model {
        return Err(Error::Config(
            "model geometry differs from the pretrained checkpoint".into(),
        ));
    }
    check_sequences::<S>(target, &cfg.model, "target")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = convert_sequences::<S>(target);
    run_segmentation_loop(pretrained.params.clone(), &data, cfg, Freeze::Extractor, &mut rng)
}

/// Adversarial domain adaptation. Two copies of the pretrained network: the
/// source copy stays frozen and only feeds the discriminator; the target
/// copy trains. Each batch alternates (a) a discriminator step on frozen
/// source features vs current target features, then (b) a target-network
/// step on the dice objective plus the confusion term that pushes target
/// features toward the source class.
pub fn adapt_domain<S: Scalar>(
    pretrained: &Checkpoint<S>,
    source: &[SliceSequence],
    target: &[SliceSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if pretrained.config.model != cfg.model {
        return Err(Error::Config(
            "model geometry differs from the pretrained checkpoint".into(),
        ));
    }
    check_sequences::<S>(source, &cfg.model, "source")?;
    check_sequences::<S>(target, &cfg.model, "target")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source_net = &pretrained.params; // never updated
    let mut target_net = pretrained.params.clone();
    let mut disc = DiscriminatorParams::<S>::init(&mut rng, &cfg.model);
    let mut adam_seg = Adam::new(target_net.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut adam_disc = Adam::new(disc.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);

    let src_data = convert_sequences::<S>(source);
    let tgt_data = convert_sequences::<S>(target);
    // The frozen extractor's features are constants of the run.
    let src_feats: Vec<Array4<S>> = src_data.iter().map(|(s, _)| source_net.forward_features(s)).collect();

    // Source batches cycle independently of the target epoch structure.
    let mut src_order: Vec<usize> = (0..src_data.len()).collect();
    src_order.shuffle(&mut rng);
    let mut src_pos = 0usize;

    let mut best_params = target_net.clone();
    let mut best_disc = disc.clone();
    let mut best_seg_state = adam_seg.state().clone();
    let mut best_disc_state = adam_disc.state().clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let n_tgt = tgt_data.len();

    for epoch in 1..=cfg.epochs {
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        tgt_order.shuffle(&mut rng);
        let mut seg_sum = 0.0;
        let mut disc_sum = 0.0;
        let mut n_batches = 0usize;

        for chunk in tgt_order.chunks(cfg.batch_size) {
            let src_batch: Vec<usize> = (0..chunk.len())
                .map(|_| {
                    if src_pos == src_order.len() {
                        src_order.shuffle(&mut rng);
                        src_pos = 0;
                    }
                    let i = src_order[src_pos];
                    src_pos += 1;
                    i
                })
                .collect();

            // (a) Discriminator step: source features are class 0, target
            // features class 1; the feature extractors are spectators here.
            let mut g_src = disc.zeroed();
            let mut g_tgt = disc.zeroed();
            let mut l_src = 0.0;
            let mut l_tgt = 0.0;
            for &i in &src_batch {
                let (logits, dcache) = disc.forward_cached(&src_feats[i]);
                let (l, dl) = cross_entropy_logits(&logits, 0);
                disc.backward(&dcache, &dl, &mut g_src);
                l_src += l.to_f();
            }
            for &i in chunk {
                let feat = target_net.forward_features(&tgt_data[i].0);
                let (logits, dcache) = disc.forward_cached(&feat);
                let (l, dl) = cross_entropy_logits(&logits, 1);
                disc.backward(&dcache, &dl, &mut g_tgt);
                l_tgt += l.to_f();
            }
            let disc_loss = l_src / src_batch.len() as f64 + l_tgt / chunk.len() as f64;
            if !disc_loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite discriminator loss at epoch {epoch}")));
            }
            g_src.scale(S::from_f(1.0 / src_batch.len() as f64));
            g_src.add_scaled(&g_tgt, S::from_f(1.0 / chunk.len() as f64));
            adam_disc.step(cfg.lr_disc, &mut disc, &g_src);

            // (b) Target-network step against the updated discriminator.
            let mut grads = target_net.zeroed();
            let mut disc_scratch = disc.zeroed();
            let mut l_seg = 0.0;
            for &i in chunk {
                let (seq, mask) = &tgt_data[i];
                let (prob, bneck, cache) = target_net.forward_cached(seq);
                let (logits, dcache) = disc.forward_cached(&bneck);
                let (loss, dlogits, dy) = segmentation_da_loss_grad(&logits, &prob, mask, &cfg.loss);
                let dfeat = disc.backward(&dcache, &dlogits, &mut disc_scratch);
                target_net.backward(&cache, &dy, Some(&dfeat), &mut grads);
                l_seg += loss.to_f();
            }
            if !l_seg.is_finite() {
                return Err(Error::Diverged(format!("non-finite adaptation loss at epoch {epoch}")));
            }
            grads.scale(S::from_f(1.0 / chunk.len() as f64));
            adam_seg.step(cfg.lr_seg, &mut target_net, &grads);

            seg_sum += l_seg;
            disc_sum += disc_loss;
            n_batches += 1;
        }

        let seg_epoch = seg_sum / n_tgt as f64;
        log.push(EpochRecord {
            epoch,
            seg_loss: seg_epoch,
            disc_loss: Some(disc_sum / n_batches as f64),
            lr_seg: cfg.lr_seg,
            lr_disc: Some(cfg.lr_disc),
        });
        if seg_epoch < best_loss {
            best_loss = seg_epoch;
            best_epoch = epoch;
            best_params = target_net.clone();
            best_disc = disc.clone();
            best_seg_state = adam_seg.state().clone();
            best_disc_state = adam_disc.state().clone();
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            epoch: best_epoch,
            params: best_params,
            discriminator: Some(best_disc),
            opt_seg: best_seg_state,
            opt_disc: Some(best_disc_state),
        },
        log,
        best_epoch,
        best_loss,
    })
}

/// Segmentation of a whole preprocessed volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Per-voxel foreground probability, same shape as the input volume.
    pub probabilities: Array3<f32>,
    /// Probabilities thresholded at 0.5.
    pub mask: SegmentationMask,
}

/// Slide the model over every slice (as the center of its 3-slice window)
/// and assemble a probability volume.
pub fn predict_volume<S: Scalar>(ckpt: &Checkpoint<S>, volume: &CtVolume) -> Result<Prediction> {
    if volume.stage() != Stage::Normalized {
        return Err(Error::Data(format!(
            "prediction expects a NORMALIZED volume, got {}",
            volume.stage()
        )));
    }
    let (nz, ny, nx) = volume.shape();
    let model = &ckpt.config.model;
    if (ny, nx) != (model.height, model.width) {
        return Err(Error::Shape(format!(
            "volume slices are {ny}x{nx}, model expects {}x{}",
            model.height, model.width
        )));
    }
    let placeholder = SegmentationMask::new(Array3::zeros((nz, ny, nx)))?;
    let seqs = bind_sequences(volume, &placeholder, "predict")?;
    let mut prob = Array3::<f32>::zeros((nz, ny, nx));
    for s in &seqs {
        let input = s.slices.mapv(|x| S::from_f(f64::from(x)));
        let (p, _) = ckpt.params.forward(&input);
        prob.index_axis_mut(Axis(0), s.center_index)
            .assign(&p.index_axis(Axis(0), 0).mapv(|x| x.to_f() as f32));
    }
    let mask = SegmentationMask::new(binarize(&prob, 0.5))?;
    Ok(Prediction { probabilities: prob, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Domain, ManifestEntry};
    use ndarray::s;
    use rand::Rng;

    fn manifest_with(n: usize) -> DatasetManifest {
        DatasetManifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    subject: format!("s{i:02}"),
                    domain: Domain::Target,
                    volume_path: format!("s{i:02}.vox").into(),
                    mask_path: format!("s{i:02}_mask.vox").into(),
                })
                .collect(),
        }
    }

    #[test]
    fn folds_partition_subjects_with_balanced_sizes() {
        let split = make_folds(&manifest_with(48), 10, 7).unwrap();
        let mut sizes: Vec<usize> = split.folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 5, 5, 5, 5, 5, 5, 5, 5]);

        let mut all_test: Vec<String> = split.folds.iter().flat_map(|f| f.test.clone()).collect();
        all_test.sort();
        let mut want: Vec<String> = (0..48).map(|i| format!("s{i:02}")).collect();
        want.sort();
        assert_eq!(all_test, want, "test sets partition the subjects");
        for f in &split.folds {
            assert_eq!(f.train.len() + f.test.len(), 48);
            assert!(f.test.iter().all(|s| !f.train.contains(s)));
        }

        let split4 = make_folds(&manifest_with(19), 4, 0).unwrap();
        let mut sizes4: Vec<usize> = split4.folds.iter().map(|f| f.test.len()).collect();
        sizes4.sort_unstable();
        assert_eq!(sizes4, vec![4, 5, 5, 5]);
    }

    #[test]
    fn fold_splits_are_seed_deterministic() {
        let m = manifest_with(11);
        assert_eq!(make_folds(&m, 3, 5).unwrap(), make_folds(&m, 3, 5).unwrap());
        assert_ne!(make_folds(&m, 3, 5).unwrap(), make_folds(&m, 3, 6).unwrap());
        assert!(make_folds(&m, 12, 0).is_err(), "more folds than subjects");
        assert!(make_folds(&m, 0, 0).is_err());
    }

    fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            lr_seg: 1e-3,
            lr_disc: 1e-3,
            batch_size: 8,
            model: ModelConfig {
                in_channels: 1,
                seq_len: 3,
                height: 16,
                width: 16,
                width_scale: 1.0 / 16.0,
            },
            ..TrainConfig::default()
        }
    }

    /// Volumes whose foreground is a bright square on a dark noisy ground,
    /// so "bright = nodule" is learnable by a tiny net.
    fn toy_sequences(n_volumes: usize, slices: usize, seed: u64) -> Vec<SliceSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for v in 0..n_volumes {
            let mut vox = Array3::from_shape_fn((slices, 16, 16), |_| rng.gen_range(0.0f32..0.25));
            let mut msk = Array3::<u8>::zeros((slices, 16, 16));
            let (cy, cx) = (4 + (v * 3) % 8, 4 + (v * 5) % 8);
            vox.slice_mut(s![.., cy..cy + 4, cx..cx + 4]).fill(0.9);
            msk.slice_mut(s![.., cy..cy + 4, cx..cx + 4]).fill(1);
            let vol = CtVolume::new(vox, (1.0, 1.0, 1.0), Stage::Normalized).unwrap();
            let mask = SegmentationMask::new(msk).unwrap();
            out.extend(bind_sequences(&vol, &mask, &format!("t{v}")).unwrap());
        }
        out
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let cfg = tiny_cfg(0, 3);
        let seqs = toy_sequences(1, 2, 0);
        let out = pretrain_source::<f32>(&seqs, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = SeqUnetParams::<f32>::init(cfg.model.clone(), &mut rng).unwrap();
        assert_eq!(out.checkpoint.params.to_f64_vec(), fresh.to_f64_vec());
        assert_eq!(out.checkpoint.epoch, 0);
        assert!(out.log.is_empty());
    }

    #[test]
    fn identical_seeds_reproduce_the_loss_trace() {
        let cfg = tiny_cfg(3, 17);
        let seqs = toy_sequences(2, 3, 1);
        let a = pretrain_source::<f32>(&seqs, &cfg).unwrap();
        let b = pretrain_source::<f32>(&seqs, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.params.to_f64_vec(), b.checkpoint.params.to_f64_vec());

        let other = pretrain_source::<f32>(&seqs, &tiny_cfg(3, 18)).unwrap();
        assert_ne!(a.log, other.log, "different seed, different trajectory");
    }

    #[test]
    fn training_reduces_the_segmentation_loss() {
        let cfg = tiny_cfg(8, 5);
        let seqs = toy_sequences(2, 4, 2);
        let out = pretrain_source::<f32>(&seqs, &cfg).unwrap();
        assert!(out.log.iter().all(|r| r.seg_loss.is_finite()));
        let (first, last) = (out.log.first().unwrap().seg_loss, out.log.last().unwrap().seg_loss);
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(out.best_loss <= last);
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn finetuning_freezes_the_extractor_bit_for_bit() {
        let seqs = toy_sequences(2, 3, 4);
        let pre = pretrain_source::<f32>(&seqs, &tiny_cfg(2, 7)).unwrap().checkpoint;
        let tuned = finetune_transfer(&pre, &seqs, &tiny_cfg(3, 8)).unwrap().checkpoint;

        assert_eq!(
            extractor_f64_vec(&tuned.params),
            extractor_f64_vec(&pre.params),
            "frozen extractor moved"
        );
        assert_ne!(
            tuned.params.head.to_f64_vec(),
            pre.params.head.to_f64_vec(),
            "trainable head never moved"
        );

        // Geometry mismatches are rejected up front.
        let mut other = tiny_cfg(1, 0);
        other.model.width_scale = 1.0 / 8.0;
        assert!(finetune_transfer(&pre, &seqs, &other).is_err());
    }

    #[test]
    fn adaptation_logs_both_losses_and_starts_near_coin_flipping() {
        let src = toy_sequences(2, 3, 10);
        let tgt = toy_sequences(2, 3, 11);
        let pre = pretrain_source::<f32>(&src, &tiny_cfg(2, 12)).unwrap().checkpoint;
        let out = adapt_domain(&pre, &src, &tgt, &tiny_cfg(4, 13)).unwrap();

        assert!(out.checkpoint.discriminator.is_some());
        assert!(out.checkpoint.opt_disc.is_some());
        assert_eq!(out.log.len(), 4);
        for r in &out.log {
            assert!(r.seg_loss.is_finite());
            let d = r.disc_loss.expect("adaptation logs the discriminator");
            assert!(d.is_finite());
        }
        // A freshly initialized discriminator cannot tell the domains apart:
        // its first-epoch loss sits near CE(1/2) + CE(1/2) = 2 ln 2.
        let first = out.log[0].disc_loss.unwrap();
        let coin = 2.0 * std::f64::consts::LN_2;
        assert!(
            (first - coin).abs() < 0.35,
            "first discriminator loss {first} far from {coin}"
        );
    }

    #[test]
    fn adaptation_is_deterministic() {
        let src = toy_sequences(1, 3, 20);
        let tgt = toy_sequences(1, 3, 21);
        let pre = pretrain_source::<f32>(&src, &tiny_cfg(1, 22)).unwrap().checkpoint;
        let a = adapt_domain(&pre, &src, &tgt, &tiny_cfg(3, 23)).unwrap();
        let b = adapt_domain(&pre, &src, &tgt, &tiny_cfg(3, 23)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(
            a.checkpoint.params.to_f64_vec(),
            b.checkpoint.params.to_f64_vec()
        );
    }

    #[test]
    fn prediction_covers_every_slice_deterministically() {
        let seqs = toy_sequences(1, 2, 30);
        let ckpt = pretrain_source::<f32>(&seqs, &tiny_cfg(1, 31)).unwrap().checkpoint;

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let vol = CtVolume::new(
            Array3::from_shape_fn((5, 16, 16), |_| rng.gen_range(0.0f32..1.0)),
            (1.0, 1.0, 1.0),
            Stage::Normalized,
        )
        .unwrap();
        let p1 = predict_volume(&ckpt, &vol).unwrap();
        let p2 = predict_volume(&ckpt, &vol).unwrap();
        assert_eq!(p1.probabilities.dim(), (5, 16, 16));
        assert_eq!(p1.probabilities, p2.probabilities);
        assert!(p1.probabilities.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(p1.mask.shape(), (5, 16, 16));

        let wrong = CtVolume::new(Array3::zeros((2, 8, 8)), (1.0, 1.0, 1.0), Stage::Normalized).unwrap();
        assert!(predict_volume(&ckpt, &wrong).is_err());
        let unnormalized = CtVolume::new(Array3::zeros((2, 16, 16)), (1.0, 1.0, 1.0), Stage::RawHu).unwrap();
        assert!(predict_volume(&ckpt, &unnormalized).is_err());
    }

    #[test]
    fn config_validation_catches_bad_hyperparameters() {
        let mut cfg = tiny_cfg(1, 0);
        cfg.lr_seg = 0.0;
        assert!(cfg.validate().is_err());
        cfg = tiny_cfg(1, 0);
        cfg.adam_beta2 = 1.0;
        assert!(cfg.validate().is_err());
        cfg = tiny_cfg(1, 0);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg(1, 0).validate().is_ok());
    }

    #[test]
    fn config_fingerprint_tracks_every_field() {
        let a = tiny_cfg(1, 0);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.lr_disc *= 2.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
