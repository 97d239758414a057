//! Acceptance gate. One test per shipped claim, ordered from cheap
//! structural checks to the full desk-scale experiment; each prints its
//! measured numbers. The suite is single-threaded (shared lock) so the
//! wall-clock budgets mean something.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqseg::losses::{
    discriminator_loss, discriminator_loss_grad, foreground_ratio, pretrain_loss,
    pretrain_loss_grad, soft_dice, LossConfig,
};
use seqseg::metrics::{confusion, dice_score, sensitivity_specificity, volume_similarity};
use seqseg::model::{DiscriminatorParams, ModelConfig, SeqUnetParams};
use seqseg::nn::Parameterized;
use seqseg::preprocess::{bind_sequences, SliceSequence};
use seqseg::synth::{generate_benchmark, generate_volume, SynthSpec};
use seqseg::training::{
    adapt_domain, extractor_f64_vec, finetune_transfer, predict_volume, pretrain_source,
    train_scratch, Checkpoint, TrainConfig,
};
use seqseg::volume::{load_mask, load_volume, CtVolume, DatasetManifest, SegmentationMask};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct Subject {
    volume: CtVolume,
    mask: SegmentationMask,
    seqs: Vec<SliceSequence>,
}

fn load_subjects(manifest: &DatasetManifest) -> Vec<Subject> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let volume = load_volume(&e.volume_path).unwrap();
            let mask = load_mask(&e.mask_path).unwrap();
            let seqs = bind_sequences(&volume, &mask, &e.subject).unwrap();
            Subject { volume, mask, seqs }
        })
        .collect()
}

fn seqs_of(subjects: &[Subject]) -> Vec<SliceSequence> {
    subjects.iter().flat_map(|s| s.seqs.iter().cloned()).collect()
}

/// Mean DICE (%) of a checkpoint over whole volumes.
fn mean_dice(ckpt: &Checkpoint<f32>, subjects: &[Subject]) -> f64 {
    let mut acc = 0.0;
    for s in subjects {
        let p = predict_volume(ckpt, &s.volume).unwrap();
        acc += dice_score(&confusion(p.mask.voxels(), s.mask.voxels()));
    }
    acc / subjects.len() as f64
}

/// Desk-scale training config: 1/16-width model on 32x32 slices. The low
/// foreground-ratio cap keeps the many empty slices of a small synthetic
/// volume from drowning out the lesion-bearing ones.
fn desk_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.lr_seg = 2e-3;
    cfg.lr_disc = 2e-3;
    cfg.loss.foreground_ratio_cap = 16.0;
    cfg.model.width_scale = 1.0 / 16.0;
    cfg.model.height = 32;
    cfg.model.width = 32;
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Architecture shape conformance at full width

#[test]
fn architecture_shapes_conform_at_full_width() {
    let _guard = serial();
    let t0 = Instant::now();

    let cfg = ModelConfig::with_input(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SeqUnetParams::<f32>::init(cfg.clone(), &mut rng).unwrap();
    let x = Array4::from_shape_fn((3, 1, 64, 64), |_| rng.gen_range(0.0f32..1.0));
    let (prob, bneck, cache) = params.forward_cached(&x);

    let expected: &[(&str, [usize; 4])] = &[
        ("input", [3, 1, 64, 64]),
        ("enc_block1", [3, 64, 64, 64]),
        ("pool1", [3, 64, 32, 32]),
        ("enc_block2", [3, 128, 32, 32]),
        ("pool2", [3, 128, 16, 16]),
        ("enc_block3", [3, 256, 16, 16]),
        ("pool3", [3, 256, 8, 8]),
        ("upsample3", [3, 512, 16, 16]),
        ("gate3_alpha", [3, 1, 16, 16]),
        ("concat3", [3, 768, 16, 16]),
        ("dec_block3", [3, 256, 16, 16]),
        ("upsample2", [3, 256, 32, 32]),
        ("gate2_alpha", [3, 1, 32, 32]),
        ("concat2", [3, 384, 32, 32]),
        ("dec_block2", [3, 128, 32, 32]),
        ("upsample1", [3, 128, 64, 64]),
        ("gate1_alpha", [3, 1, 64, 64]),
        ("concat1", [3, 192, 64, 64]),
        ("dec_block1", [3, 64, 64, 64]),
        ("out_lstm_center", [1, 64, 64, 64]),
        ("prob", [1, 1, 64, 64]),
    ];
    let got = cache.layer_shapes();
    assert_eq!(got.len(), expected.len());
    for ((gn, gd), (en, ed)) in got.iter().zip(expected) {
        assert_eq!(gn, en, "stage order diverged");
        assert_eq!(gd, ed, "{gn} output dimension");
    }
    assert_eq!(bneck.dim(), (3, 512, 8, 8), "bottleneck features");
    assert_eq!(prob.dim(), (1, 64, 64), "probability map");

    let disc = DiscriminatorParams::<f32>::init(&mut rng, &cfg);
    let (logits, dcache) = disc.forward_cached(&bneck);
    let dexpected: &[(&str, &[usize])] = &[
        ("summed_input", &[512, 8, 8]),
        ("conv1", &[256, 4, 4]),
        ("conv2", &[128, 2, 2]),
        ("conv3", &[128, 1, 1]),
        ("flatten", &[128]),
        ("fc1", &[10]),
    ];
    let dgot = dcache.layer_shapes();
    assert_eq!(dgot.len(), dexpected.len());
    for ((gn, gd), (en, ed)) in dgot.iter().zip(dexpected) {
        assert_eq!(gn, en);
        assert_eq!(gd.as_slice(), *ed, "{gn} output dimension");
    }
    assert_eq!(logits.len(), 2, "class logits");

    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 5.0, "full-width forward took {dt:?}, budget 5 s");
    println!("PASS shape conformance: {} segmenter + {} discriminator stages in {dt:?}", got.len(), dgot.len());
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients vs central finite differences (f64, 1/8 width, 16x16)

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// The largest-|gradient| sample of `take` indices from `range`, so the
/// comparison is made where the gradient actually carries signal.
fn pick_indices(rng: &mut ChaCha8Rng, grads: &[f64], range: std::ops::Range<usize>, take: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..60).map(|_| rng.gen_range(range.clone())).collect();
    cand.sort_unstable();
    cand.dedup();
    cand.sort_by(|&a, &b| grads[b].abs().partial_cmp(&grads[a].abs()).unwrap());
    cand.truncate(take);
    cand
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let _guard = serial();
    let t0 = Instant::now();

    let mut cfg = ModelConfig::with_input(16, 16);
    cfg.width_scale = 1.0 / 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = SeqUnetParams::<f64>::init(cfg.clone(), &mut rng).unwrap();
    let x = Array4::from_shape_fn((3, 1, 16, 16), |_| rng.gen_range(0.0..1.0));
    let mut m = Array3::<f64>::zeros((1, 16, 16));
    for _ in 0..64 {
        m[(0, rng.gen_range(0..16), rng.gen_range(0..16))] = 1.0;
    }
    let loss_cfg = LossConfig::default();

    // Analytic segmenter gradients of the supervised objective.
    let (prob, _, cache) = params.forward_cached(&x);
    let (_, dy) = pretrain_loss_grad(&prob, &m, &loss_cfg);
    let mut grads = params.zeroed();
    params.backward(&cache, &dy, None, &mut grads);
    let g = grads.to_f64_vec();

    // Flat offsets of the modules named by the claim, in traversal order.
    let enc = params.enc1.param_count() + params.enc2.param_count() + params.enc3.param_count();
    let bneck_range = enc..enc + params.bottleneck.param_count();
    let gate_start = bneck_range.end;
    let gate_range = gate_start..gate_start + params.gate3.param_count();
    let total = params.param_count();
    let head_range = total - params.head.param_count()..total;

    let mut idx = pick_indices(&mut rng, &g, gate_range, 4);
    idx.extend(pick_indices(&mut rng, &g, bneck_range, 4));
    idx.extend(pick_indices(&mut rng, &g, 0..enc, 2));
    idx.extend(pick_indices(&mut rng, &g, head_range, 2));

    let base = params.to_f64_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in &idx {
        let mut probe = params.clone();
        let eval = |v: f64, probe: &mut SeqUnetParams<f64>| {
            let mut vs = base.clone();
            vs[i] = v;
            probe.load_f64_slice(&vs);
            pretrain_loss(&probe.forward(&x).0, &m, &loss_cfg)
        };
        let fd = (eval(base[i] + h, &mut probe) - eval(base[i] - h, &mut probe)) / (2.0 * h);
        let e = rel_err(g[i], fd);
        assert!(e < 1e-4, "segmenter param {i}: analytic {} vs fd {fd} (rel err {e:.2e})", g[i]);
        worst = worst.max(e);
    }

    // Discriminator conv gradients through the adversarial objective.
    let feats_src = params.forward_features(&x);
    let x2 = Array4::from_shape_fn((3, 1, 16, 16), |_| rng.gen_range(0.0..1.0));
    let feats_tgt = params.forward_features(&x2);
    let disc = DiscriminatorParams::<f64>::init(&mut rng, &cfg);
    let (ls, cs) = disc.forward_cached(&feats_src);
    let (lt, ct) = disc.forward_cached(&feats_tgt);
    let (_, d_src, d_tgt) = discriminator_loss_grad(&ls, &lt);
    let mut dgrads = disc.zeroed();
    disc.backward(&cs, &d_src, &mut dgrads);
    disc.backward(&ct, &d_tgt, &mut dgrads);
    let dg = dgrads.to_f64_vec();
    let conv_len: usize = disc.convs.iter().map(|c| c.param_count()).sum();

    let dbase = disc.to_f64_vec();
    for i in pick_indices(&mut rng, &dg, 0..conv_len, 4) {
        let mut probe = disc.clone();
        let eval = |v: f64, probe: &mut DiscriminatorParams<f64>| {
            let mut vs = dbase.clone();
            vs[i] = v;
            probe.load_f64_slice(&vs);
            discriminator_loss(&probe.forward(&feats_src), &probe.forward(&feats_tgt))
        };
        let fd = (eval(dbase[i] + h, &mut probe) - eval(dbase[i] - h, &mut probe)) / (2.0 * h);
        let e = rel_err(dg[i], fd);
        assert!(e < 1e-4, "discriminator param {i}: analytic {} vs fd {fd} (rel err {e:.2e})", dg[i]);
        worst = worst.max(e);
    }

    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 120.0, "gradient check took {dt:?}, budget 2 min");
    println!("PASS gradient check: {} params, worst rel err {worst:.2e}, {dt:?}", idx.len() + 4);
}

// ---------------------------------------------------------------------------
// 3. Loss identities

#[test]
fn loss_identities_hold() {
    let _guard = serial();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m = Array3::<f64>::zeros((1, 32, 32));
    for _ in 0..150 {
        m[(0, rng.gen_range(0..32), rng.gen_range(0..32))] = 1.0;
    }
    let dice = soft_dice(&m, &m, 1.0);
    assert!((dice - 1.0).abs() <= 1e-6, "perfect-overlap dice {dice}");

    let zeros = Array1::<f64>::zeros(2);
    let coin = discriminator_loss(&zeros, &zeros);
    let want = 2.0 * std::f64::consts::LN_2;
    assert!((coin - want).abs() <= 1e-9, "zero-logit loss {coin} vs {want}");

    let mut m64 = Array3::<f64>::zeros((1, 64, 64));
    for i in 0..64 {
        m64[(0, i / 8, i % 8)] = 1.0;
    }
    let r = foreground_ratio(&m64, 4096.0);
    assert_eq!(r, 64.0, "64 foreground pixels on a 64x64 plane");

    println!("PASS loss identities: dice(y=m)={dice}, zero-logit CE={coin}, r={r}");
}

// ---------------------------------------------------------------------------
// 4. Metrics vs a brute-force oracle

#[test]
fn metrics_match_bruteforce_oracle() {
    let _guard = serial();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        // Mix densities so empty and full masks both occur.
        let p_pred = rng.gen_range(0.0..1.0);
        let p_truth = rng.gen_range(0.0..1.0);
        let pred = Array3::from_shape_fn((1, 8, 8), |_| u8::from(rng.gen_bool(p_pred)));
        let truth = Array3::from_shape_fn((1, 8, 8), |_| u8::from(rng.gen_bool(p_truth)));

        let (mut tp, mut fp, mut fne, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            match (p, t) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fne += 1,
                (0, 0) => tn += 1,
                _ => unreachable!(),
            }
        }
        let denom = 2 * tp + fp + fne;
        let want_dice = if denom == 0 { 100.0 } else { 100.0 * (2 * tp) as f64 / denom as f64 };
        let want_vs = if denom == 0 {
            100.0
        } else {
            100.0 * (1.0 - (if fp > fne { fp - fne } else { fne - fp }) as f64 / denom as f64)
        };
        let want_sens = (tp + fne > 0).then(|| tp as f64 / (tp + fne) as f64);
        let want_spec = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);

        let c = confusion(&pred, &truth);
        assert_eq!(dice_score(&c), want_dice, "case {case} dice");
        assert_eq!(volume_similarity(&c), want_vs, "case {case} vs");
        assert_eq!(sensitivity_specificity(&c), (want_sens, want_spec), "case {case} sens/spec");
    }
    println!("PASS metric oracle: 1000 random 8x8 pairs, exact agreement");
}

// ---------------------------------------------------------------------------
// 5. Adaptation beats scratch on the synthetic cross-domain benchmark

#[test]
fn adaptation_beats_scratch_at_desk_scale() {
    let _guard = serial();
    let t0 = Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let (src_m, tgt_m) = generate_benchmark(dir.path(), 40, 7, (16, 32, 32), 7).unwrap();
    let source = load_subjects(&src_m);
    let target = load_subjects(&tgt_m);
    let (tgt_train, tgt_test) = target.split_at(4);
    let src_seqs = seqs_of(&source);
    let train_seqs = seqs_of(tgt_train);

    // One shared pretraining run; the seeds below vary the target phase.
    let mut pre_cfg = desk_config();
    pre_cfg.epochs = 40;
    pre_cfg.seed = 1;
    let pre = pretrain_source::<f32>(&src_seqs, &pre_cfg).unwrap();
    println!(
        "  pretrain: best epoch {} loss {:.2}, source dice {:.1}%, target-test dice {:.1}% ({:?})",
        pre.best_epoch,
        pre.best_loss,
        mean_dice(&pre.checkpoint, &source[..5]),
        mean_dice(&pre.checkpoint, tgt_test),
        t0.elapsed()
    );

    let (mut d_scratch, mut d_tr, mut d_da) = (Vec::new(), Vec::new(), Vec::new());
    for seed in [1u64, 2, 3] {
        let mut cfg = desk_config();
        cfg.epochs = 100;
        cfg.seed = seed;

        let sc = train_scratch::<f32>(&train_seqs, &cfg).unwrap();
        let tr = finetune_transfer(&pre.checkpoint, &train_seqs, &cfg).unwrap();
        let da = adapt_domain(&pre.checkpoint, &src_seqs, &train_seqs, &cfg).unwrap();
        d_scratch.push(mean_dice(&sc.checkpoint, tgt_test));
        d_tr.push(mean_dice(&tr.checkpoint, tgt_test));
        d_da.push(mean_dice(&da.checkpoint, tgt_test));
        println!(
            "  seed {seed}: scratch {:.1}% tr {:.1}% da {:.1}% ({:?})",
            d_scratch.last().unwrap(),
            d_tr.last().unwrap(),
            d_da.last().unwrap(),
            t0.elapsed()
        );
    }

    let (m_sc, m_tr, m_da) = (mean(&d_scratch), mean(&d_tr), mean(&d_da));
    let dt = t0.elapsed();
    println!(
        "PASS adaptation benefit: scratch {m_sc:.1}% tr {m_tr:.1}% da {m_da:.1}% over seeds {{1,2,3}} in {dt:?}"
    );
    assert!(
        m_da >= m_sc + 5.0,
        "adaptation must beat scratch by >= 5 DICE points: da {m_da:.2} vs scratch {m_sc:.2}"
    );
    assert!(
        m_da >= m_tr - 2.0,
        "adaptation must stay within 2 DICE points of transfer: da {m_da:.2} vs tr {m_tr:.2}"
    );
    assert!(dt.as_secs_f64() < 1800.0, "benchmark took {dt:?}, budget 30 min");
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity on a single volume

#[test]
fn single_volume_overfit_reaches_high_dice() {
    let _guard = serial();
    let t0 = Instant::now();

    let spec = SynthSpec::target(21).with_shape((16, 32, 32));
    let (volume, mask) = generate_volume(&spec).unwrap();
    let seqs = bind_sequences(&volume, &mask, "solo").unwrap();

    let mut cfg = desk_config();
    cfg.epochs = 200;
    cfg.seed = 2;
    cfg.lr_seg = 5e-3; // single-volume memorization tolerates a hotter step
    let out = train_scratch::<f32>(&seqs, &cfg).unwrap();

    let p = predict_volume(&out.checkpoint, &volume).unwrap();
    let dice = dice_score(&confusion(p.mask.voxels(), mask.voxels())) / 100.0;
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 300.0, "overfit run took {dt:?}, budget 5 min");
    assert!(dice > 0.95, "training dice {dice:.4} after {} epochs", cfg.epochs);
    println!("PASS overfit sanity: training dice {dice:.4} in {dt:?}");
}

// ---------------------------------------------------------------------------
// 7. Freezing and determinism

#[test]
fn frozen_params_stay_bit_identical_and_runs_repeat() {
    let _guard = serial();

    let dir = tempfile::tempdir().unwrap();
    let (src_m, tgt_m) = generate_benchmark(dir.path(), 3, 2, (8, 24, 24), 11).unwrap();
    let src_seqs = seqs_of(&load_subjects(&src_m));
    let tgt_seqs = seqs_of(&load_subjects(&tgt_m));

    let mut cfg = desk_config();
    cfg.model.height = 24;
    cfg.model.width = 24;
    cfg.epochs = 3;
    cfg.seed = 5;
    let pre = pretrain_source::<f32>(&src_seqs, &cfg).unwrap();
    let pre_vec = pre.checkpoint.params.to_f64_vec();

    let ft1 = finetune_transfer(&pre.checkpoint, &tgt_seqs, &cfg).unwrap();
    let ft2 = finetune_transfer(&pre.checkpoint, &tgt_seqs, &cfg).unwrap();
    assert_eq!(
        extractor_f64_vec(&ft1.checkpoint.params),
        extractor_f64_vec(&pre.checkpoint.params),
        "fine-tuning must not move the frozen extractor"
    );
    assert_ne!(
        ft1.checkpoint.params.to_f64_vec(),
        pre_vec,
        "fine-tuning must move the trainable head"
    );
    let trace1: Vec<f64> = ft1.log.iter().map(|r| r.seg_loss).collect();
    let trace2: Vec<f64> = ft2.log.iter().map(|r| r.seg_loss).collect();
    assert_eq!(trace1, trace2, "fine-tune traces must repeat bit-for-bit");
    assert_eq!(ft1.checkpoint.params.to_f64_vec(), ft2.checkpoint.params.to_f64_vec());

    let da1 = adapt_domain(&pre.checkpoint, &src_seqs, &tgt_seqs, &cfg).unwrap();
    let da2 = adapt_domain(&pre.checkpoint, &src_seqs, &tgt_seqs, &cfg).unwrap();
    assert_eq!(
        pre.checkpoint.params.to_f64_vec(),
        pre_vec,
        "adaptation must leave the frozen source network untouched"
    );
    let dtrace1: Vec<(f64, Option<f64>)> = da1.log.iter().map(|r| (r.seg_loss, r.disc_loss)).collect();
    let dtrace2: Vec<(f64, Option<f64>)> = da2.log.iter().map(|r| (r.seg_loss, r.disc_loss)).collect();
    assert_eq!(dtrace1, dtrace2, "adaptation traces must repeat bit-for-bit");
    assert_eq!(da1.checkpoint.params.to_f64_vec(), da2.checkpoint.params.to_f64_vec());

    println!("PASS freezing/determinism: extractor bits frozen, {} + {} epochs repeat exactly", ft1.log.len(), da1.log.len());
}

// ---------------------------------------------------------------------------
// 8. CLI pipeline end to end

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["seqseg"];
    argv.extend_from_slice(args);
    seqseg::cli::run_from(argv)
}

#[test]
fn cli_pipeline_runs_end_to_end() {
    let _guard = serial();
    let t0 = Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    assert_eq!(
        run_cli(&["synth", "--n-source", "3", "--n-target", "2", "--shape", "8x24x24", "--seed", "5", "--out", &d("raw")]),
        0,
        "synth"
    );
    assert_eq!(
        run_cli(&["preprocess", "--manifest", &d("raw/source_manifest.tsv"), "--recipe", "synth", "--out", &d("prep_src")]),
        0,
        "preprocess source"
    );
    assert_eq!(
        run_cli(&["preprocess", "--manifest", &d("raw/target_manifest.tsv"), "--recipe", "synth", "--out", &d("prep_tgt")]),
        0,
        "preprocess target"
    );
    let fast = ["--width-scale", "0.0625", "--lr-seg", "1e-3", "--batch", "8"];
    let src_man = d("prep_src/manifest.tsv");
    let tgt_man = d("prep_tgt/manifest.tsv");
    let pre_out = d("pre");
    let mut pre_args = vec!["pretrain", "--manifest", &src_man, "--out", &pre_out, "--epochs", "2", "--seed", "1"];
    pre_args.extend_from_slice(&fast);
    assert_eq!(run_cli(&pre_args), 0, "pretrain");

    let ckpt = d("pre/checkpoints/pretrain.ckpt");
    let adapt_out = d("ad");
    let adapt_args = vec![
        "adapt", "--checkpoint", &ckpt, "--source-manifest", &src_man, "--manifest", &tgt_man,
        "--out", &adapt_out, "--epochs", "2", "--seed", "1",
    ];
    assert_eq!(run_cli(&adapt_args), 0, "adapt");
    assert!(Path::new(&d("ad/checkpoints/adapt.ckpt")).exists());
    assert!(Path::new(&d("ad/runlog.txt")).exists());

    let eval_out = d("eval");
    let mut eval_args = vec![
        "evaluate", "--manifest", &tgt_man, "--mode", "da", "--source-manifest", &src_man,
        "--folds", "1", "--seed", "1", "--epochs", "1", "--pretrain-epochs", "1",
        "--out", &eval_out,
    ];
    eval_args.extend_from_slice(&fast);
    assert_eq!(run_cli(&eval_args), 0, "evaluate");

    let report = std::fs::read_to_string(d("eval/report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,dataset,dice_mean,dice_std,vs_mean,vs_std,sensitivity,specificity"
    );
    let row = lines.next().expect("one data row");
    assert!(row.starts_with("SEQ-UNET+DA,"), "row: {row}");
    let overlays: Vec<_> = std::fs::read_dir(d("eval/overlays")).unwrap().collect();
    assert!(!overlays.is_empty(), "overlay images must be written");

    // Idempotency: a rerun reproduces report.csv byte for byte.
    assert_eq!(run_cli(&eval_args), 0, "evaluate rerun");
    assert_eq!(std::fs::read_to_string(d("eval/report.csv")).unwrap(), report);

    // Direct scoring of a manifest against itself is a perfect score.
    let direct_out = d("direct");
    let direct_args = vec![
        "evaluate", "--manifest", &tgt_man, "--pred-manifest", &tgt_man, "--out", &direct_out,
    ];
    assert_eq!(run_cli(&direct_args), 0, "evaluate --pred-manifest");
    let direct = std::fs::read_to_string(d("direct/report.csv")).unwrap();
    let drow = direct.lines().nth(1).unwrap();
    assert!(drow.contains(",100.00,0.00,100.00,0.00,"), "self-comparison row: {drow}");

    let rep_out = d("rep");
    let folds_a = d("eval/folds.json");
    let folds_b = d("direct/folds.json");
    assert_eq!(
        run_cli(&["report", &folds_a, &folds_b, "--out", &rep_out]),
        0,
        "report"
    );
    let merged = std::fs::read_to_string(d("rep/report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 3, "header + two method rows");

    // Predict on one volume with overlays.
    let vol = first_volume_path(&tgt_man);
    let mask = vol.replace(".vox", "_mask.vox");
    let pd_out = d("pd");
    let predict_args = vec![
        "predict", "--checkpoint", &ckpt, "--volume", &vol, "--mask", &mask, "--out", &pd_out,
    ];
    assert_eq!(run_cli(&predict_args), 0, "predict");
    assert!(std::fs::read_dir(d("pd")).unwrap().count() >= 2);

    // Usage errors exit 2, runtime failures exit 1.
    assert_eq!(run_cli(&["no-such-command"]), 2);
    assert_eq!(run_cli(&["pretrain", "--manifest", "/nonexistent.tsv", "--out", &d("x")]), 1);

    println!("PASS cli pipeline: synth/preprocess/pretrain/adapt/evaluate/report/predict in {:?}", t0.elapsed());
}

fn first_volume_path(manifest: &str) -> String {
    let m = seqseg::volume::load_manifest(Path::new(manifest)).unwrap();
    m.entries[0].volume_path.to_str().unwrap().to_string()
}
