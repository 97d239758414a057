//! Command-line front end. Every subcommand reads/writes through volume-io
//! containers and manifests, so pipelines compose: `synth` -> `preprocess`
//! -> `pretrain` -> `adapt` -> `evaluate` -> `report`.

mod overlay;

pub use overlay::{densest_slice, emit_overlay};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    confusion, dice_score, sensitivity_specificity, volume_similarity, write_report_csv,
    ConfusionCounts, FoldReport, ReportRow,
};
use crate::preprocess::{apply_recipe, bind_sequences, Recipe, SliceSequence};
use crate::synth::generate_benchmark;
use crate::training::{
    adapt_domain, finetune_transfer, load_checkpoint, make_folds, pretrain_source,
    predict_volume, save_checkpoint, train_scratch, Checkpoint, EpochRecord, Fold, TrainConfig,
    TrainOutcome,
};
use crate::volume::{
    load_manifest, load_mask, load_volume, save_manifest, save_mask, save_volume, CtVolume,
    DatasetManifest, ManifestEntry, SegmentationMask, Stage,
};
use crate::DefaultScalar;

#[derive(Parser)]
#[command(
    name = "seqseg",
    version,
    about = "Sequence-attention segmentation of small CT datasets with adversarial domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected ZxYxX (e.g. 16x64x64), got `{s}`"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| format!("bad dimension `{p}` in `{s}`"))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn parse_recipe(s: &str) -> std::result::Result<Recipe, String> {
    s.parse::<Recipe>().map_err(|e| e.to_string())
}

/// Training hyperparameter overrides shared by every training command.
/// Values not given fall back to `--config` (a TOML file with `TrainConfig`
/// fields) and then to the built-in defaults.
#[derive(Args, Clone, Default)]
struct TrainOpts {
    /// TOML training config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_seg: Option<f64>,
    #[arg(long)]
    lr_disc: Option<f64>,
    /// Sequences per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Weight of the dice term in the adaptation objective.
    #[arg(long)]
    lambda_seg: Option<f64>,
    /// Cap on the inverse-foreground-fraction loss weight. Lower it (e.g. 16)
    /// when training on uncropped volumes where most slices are empty.
    #[arg(long)]
    fg_cap: Option<f64>,
    /// Channel width multiplier (1.0 = full reference widths).
    #[arg(long)]
    width_scale: Option<f64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Target-only baseline.
    Scratch,
    /// Transfer baseline: frozen extractor, fine-tuned decoder.
    Tr,
    /// Adversarial domain adaptation.
    Da,
}

impl Mode {
    fn method_name(self) -> &'static str {
        match self {
            Mode::Scratch => "SEQ-UNET",
            Mode::Tr => "SEQ-UNET+TR",
            Mode::Da => "SEQ-UNET+DA",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Tr => "tr",
            Mode::Da => "da",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark dataset.
    Synth {
        #[arg(long, default_value_t = 40)]
        n_source: usize,
        #[arg(long, default_value_t = 4)]
        n_target: usize,
        /// Volume shape as ZxYxX.
        #[arg(long, default_value = "16x64x64", value_parser = parse_shape)]
        shape: (usize, usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a dataset recipe over a raw manifest, writing model-ready pairs.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_recipe)]
        recipe: Recipe,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a (preprocessed) source manifest from random initialization.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Adversarial domain adaptation from a pretrained checkpoint.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preprocessed source-domain manifest.
        #[arg(long)]
        source_manifest: PathBuf,
        /// Preprocessed target-domain manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Transfer baseline: fine-tune a pretrained checkpoint on target data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// From-scratch baseline on a target manifest.
    Scratch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Score predictions: either cross-validate a training mode or compare
    /// a prediction manifest against ground truth directly.
    Evaluate {
        /// Ground-truth (target-domain) manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest whose mask column holds predictions; skips training.
        #[arg(long, conflicts_with = "mode")]
        pred_manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Source manifest for the tr/da modes' pretraining stage.
        #[arg(long)]
        source_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        folds: usize,
        /// Comma-separated seed list; each seed reruns the protocol.
        #[arg(long = "seed", value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Epochs for the pretraining stage (defaults to --epochs).
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Segment one preprocessed volume with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Optional ground truth; enables overlay rendering.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge fold records from earlier evaluate runs into one CSV table.
    Report {
        /// folds.json files written by `evaluate`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point for `main`: parse real argv, run, exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse and execute; returns the process exit code (0 success, 1 runtime
/// failure, 2 usage error).
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { n_source, n_target, shape, seed, out } => cmd_synth(n_source, n_target, shape, seed, &out),
        Command::Preprocess { manifest, recipe, out } => cmd_preprocess(&manifest, recipe, &out),
        Command::Pretrain { manifest, out, seed, train } => cmd_train_fresh(&manifest, &out, seed, &train, "pretrain"),
        Command::Scratch { manifest, out, seed, train } => cmd_train_fresh(&manifest, &out, seed, &train, "scratch"),
        Command::Adapt { checkpoint, source_manifest, manifest, out, seed, train } => {
            cmd_adapt(&checkpoint, &source_manifest, &manifest, &out, seed, &train)
        }
        Command::Finetune { checkpoint, manifest, out, seed, train } => {
            cmd_finetune(&checkpoint, &manifest, &out, seed, &train)
        }
        Command::Evaluate {
            manifest,
            pred_manifest,
            mode,
            source_manifest,
            folds,
            seeds,
            pretrain_epochs,
            method,
            dataset,
            out,
            train,
        } => cmd_evaluate(EvaluateJob {
            manifest,
            pred_manifest,
            mode,
            source_manifest,
            folds,
            seeds: seeds.unwrap_or_else(|| vec![0]),
            pretrain_epochs,
            method,
            dataset,
            out,
            train,
        }),
        Command::Predict { checkpoint, volume, mask, out } => cmd_predict(&checkpoint, &volume, mask.as_deref(), &out),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Data plumbing

/// One manifest entry, fully loaded and bound into model-ready sequences.
struct SubjectData {
    subject: String,
    volume: CtVolume,
    mask: SegmentationMask,
    sequences: Vec<SliceSequence>,
}

fn load_subjects(manifest: &DatasetManifest) -> Result<Vec<SubjectData>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let volume = load_volume(&e.volume_path)?;
            let mask = load_mask(&e.mask_path)?;
            let sequences = bind_sequences(&volume, &mask, &e.subject)?;
            Ok(SubjectData { subject: e.subject.clone(), volume, mask, sequences })
        })
        .collect()
}

fn sequences_of(subjects: &[SubjectData], names: &[String]) -> Vec<SliceSequence> {
    subjects
        .iter()
        .filter(|s| names.contains(&s.subject))
        .flat_map(|s| s.sequences.iter().cloned())
        .collect()
}

fn all_sequences(subjects: &[SubjectData]) -> Vec<SliceSequence> {
    subjects.iter().flat_map(|s| s.sequences.iter().cloned()).collect()
}

fn input_plane(subjects: &[SubjectData]) -> Result<(usize, usize)> {
    let first = subjects
        .first()
        .ok_or_else(|| Error::Data("manifest lists no subjects".into()))?;
    let (_, ny, nx) = first.volume.shape();
    Ok((ny, nx))
}

fn resolve_config(opts: &TrainOpts, seed: Option<u64>, plane: (usize, usize)) -> Result<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::format(path, format!("bad training config: {e}")))?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, opts)?;
    if let Some(w) = opts.width_scale {
        cfg.model.width_scale = w;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.model.height = plane.0;
    cfg.model.width = plane.1;
    cfg.validate()?;
    Ok(cfg)
}

/// Adapt/finetune continue from a checkpoint, so the architecture is not
/// negotiable; everything else may be overridden.
fn resolve_config_from_checkpoint(
    ckpt: &TrainConfig,
    opts: &TrainOpts,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    if opts.config.is_some() || opts.width_scale.is_some() {
        return Err(Error::Config(
            "--config/--width-scale cannot override a checkpoint's architecture; pass the hyperparameter flags instead".into(),
        ));
    }
    let mut cfg = ckpt.clone();
    apply_overrides(&mut cfg, opts)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, opts: &TrainOpts) -> Result<()> {
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = opts.lr_seg {
        cfg.lr_seg = lr;
    }
    if let Some(lr) = opts.lr_disc {
        cfg.lr_disc = lr;
    }
    if let Some(b) = opts.batch {
        cfg.batch_size = b;
    }
    if let Some(l) = opts.lambda_seg {
        cfg.loss.lambda_seg = l;
    }
    if let Some(c) = opts.fg_cap {
        cfg.loss.foreground_ratio_cap = c;
    }
    Ok(())
}

fn append_log(text: &mut String, heading: &str, records: &[EpochRecord]) {
    let _ = writeln!(text, "# {heading}");
    for r in records {
        let _ = write!(text, "epoch={} seg_loss={:.6} lr_seg={}", r.epoch, r.seg_loss, r.lr_seg);
        if let (Some(d), Some(lr)) = (r.disc_loss, r.lr_disc) {
            let _ = write!(text, " disc_loss={d:.6} lr_disc={lr}");
        }
        let _ = writeln!(text);
    }
}

fn write_outcome(
    out: &Path,
    name: &str,
    outcome: &TrainOutcome<DefaultScalar>,
    sequences: usize,
) -> Result<PathBuf> {
    ensure_dir(&out.join("checkpoints"))?;
    let ckpt_path = out.join("checkpoints").join(format!("{name}.ckpt"));
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let mut log = String::new();
    append_log(
        &mut log,
        &format!(
            "{name} sequences={sequences} fingerprint={} best_epoch={} best_loss={:.6}",
            outcome.checkpoint.config.fingerprint(),
            outcome.best_epoch,
            outcome.best_loss
        ),
        &outcome.log,
    );
    write_text(&out.join("runlog.txt"), &log)?;
    Ok(ckpt_path)
}

// ---------------------------------------------------------------------------
// Simple commands

fn cmd_synth(
    n_source: usize,
    n_target: usize,
    shape: (usize, usize, usize),
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (src, tgt) = generate_benchmark(out, n_source, n_target, shape, seed)?;
    println!(
        "wrote {} source + {} target volumes under {}",
        src.len(),
        tgt.len(),
        out.display()
    );
    println!("source manifest: {}", out.join("source_manifest.tsv").display());
    println!("target manifest: {}", out.join("target_manifest.tsv").display());
    Ok(())
}

fn cmd_preprocess(manifest_path: &Path, recipe: Recipe, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("{} lists no subjects", manifest_path.display())));
    }
    ensure_dir(out)?;
    let mut entries = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let volume = load_volume(&e.volume_path)?;
        let mask = load_mask(&e.mask_path)?;
        let (pv, pm) = apply_recipe(recipe, &volume, &mask)?;
        let vol_name = format!("{}.vox", e.subject);
        let mask_name = format!("{}_mask.vox", e.subject);
        save_volume(&pv, &out.join(&vol_name))?;
        save_mask(&pm, &out.join(&mask_name))?;
        entries.push(ManifestEntry {
            subject: e.subject.clone(),
            domain: e.domain,
            volume_path: vol_name.into(),
            mask_path: mask_name.into(),
        });
    }
    let out_manifest = out.join("manifest.tsv");
    save_manifest(&DatasetManifest { entries }, &out_manifest)?;
    println!(
        "preprocessed {} subjects with the {recipe} recipe -> {}",
        manifest.len(),
        out_manifest.display()
    );
    Ok(())
}

/// `pretrain` and `scratch` share everything except the checkpoint name.
fn cmd_train_fresh(
    manifest_path: &Path,
    out: &Path,
    seed: Option<u64>,
    opts: &TrainOpts,
    name: &str,
) -> Result<()> {
    let subjects = load_subjects(&load_manifest(manifest_path)?)?;
    let cfg = resolve_config(opts, seed, input_plane(&subjects)?)?;
    let seqs = all_sequences(&subjects);
    let outcome = pretrain_source::<DefaultScalar>(&seqs, &cfg)?;
    let ckpt = write_outcome(out, name, &outcome, seqs.len())?;
    println!(
        "{name}: {} sequences, best epoch {} (loss {:.6}) -> {}",
        seqs.len(),
        outcome.best_epoch,
        outcome.best_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_adapt(
    checkpoint: &Path,
    source_manifest: &Path,
    target_manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    opts: &TrainOpts,
) -> Result<()> {
    let pretrained: Checkpoint<DefaultScalar> = load_checkpoint(checkpoint)?;
    let source = load_subjects(&load_manifest(source_manifest)?)?;
    let target = load_subjects(&load_manifest(target_manifest)?)?;
    let cfg = resolve_config_from_checkpoint(&pretrained.config, opts, seed)?;
    let src_seqs = all_sequences(&source);
    let tgt_seqs = all_sequences(&target);
    let outcome = adapt_domain(&pretrained, &src_seqs, &tgt_seqs, &cfg)?;
    let ckpt = write_outcome(out, "adapt", &outcome, tgt_seqs.len())?;
    println!(
        "adapt: {} source / {} target sequences, best epoch {} (loss {:.6}) -> {}",
        src_seqs.len(),
        tgt_seqs.len(),
        outcome.best_epoch,
        outcome.best_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_finetune(
    checkpoint: &Path,
    target_manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    opts: &TrainOpts,
) -> Result<()> {
    let pretrained: Checkpoint<DefaultScalar> = load_checkpoint(checkpoint)?;
    let target = load_subjects(&load_manifest(target_manifest)?)?;
    let cfg = resolve_config_from_checkpoint(&pretrained.config, opts, seed)?;
    let tgt_seqs = all_sequences(&target);
    let outcome = finetune_transfer(&pretrained, &tgt_seqs, &cfg)?;
    let ckpt = write_outcome(out, "finetune", &outcome, tgt_seqs.len())?;
    println!(
        "finetune: {} sequences, best epoch {} (loss {:.6}) -> {}",
        tgt_seqs.len(),
        outcome.best_epoch,
        outcome.best_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_predict(checkpoint: &Path, volume_path: &Path, mask_path: Option<&Path>, out: &Path) -> Result<()> {
    let ckpt: Checkpoint<DefaultScalar> = load_checkpoint(checkpoint)?;
    let volume = load_volume(volume_path)?;
    let prediction = predict_volume(&ckpt, &volume)?;
    ensure_dir(out)?;
    let stem = volume_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    let mask_out = out.join(format!("{stem}_pred.vox"));
    save_mask(&prediction.mask, &mask_out)?;
    let prob_volume = CtVolume::new(prediction.probabilities.clone(), volume.spacing(), Stage::Normalized)?;
    save_volume(&prob_volume, &out.join(format!("{stem}_prob.vox")))?;
    println!(
        "predicted {} foreground voxels -> {}",
        prediction.mask.foreground_count(),
        mask_out.display()
    );
    if let Some(mp) = mask_path {
        let truth = load_mask(mp)?;
        let overlays = out.join("overlays");
        ensure_dir(&overlays)?;
        let z = densest_slice(&truth);
        let png = overlays.join(format!("{stem}_z{z:03}.png"));
        emit_overlay(&volume, &truth, &prediction.mask, z, &png)?;
        println!("overlay: {}", png.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvaluateJob {
    manifest: PathBuf,
    pred_manifest: Option<PathBuf>,
    mode: Option<Mode>,
    source_manifest: Option<PathBuf>,
    folds: usize,
    seeds: Vec<u64>,
    pretrain_epochs: Option<usize>,
    method: Option<String>,
    dataset: Option<String>,
    out: PathBuf,
    train: TrainOpts,
}

/// Fold-level records, serialized so `report` can merge runs.
#[derive(Serialize, Deserialize)]
struct StoredReport {
    method: String,
    dataset: String,
    dice: Vec<f64>,
    vs: Vec<f64>,
    sensitivity: Vec<Option<f64>>,
    specificity: Vec<Option<f64>>,
}

impl StoredReport {
    fn from_folds(method: String, dataset: String, folds: &FoldReport) -> Self {
        StoredReport {
            method,
            dataset,
            dice: folds.dice.clone(),
            vs: folds.vs.clone(),
            sensitivity: folds.sensitivity.clone(),
            specificity: folds.specificity.clone(),
        }
    }

    fn to_row(&self) -> Result<ReportRow> {
        let folds = FoldReport {
            dice: self.dice.clone(),
            vs: self.vs.clone(),
            sensitivity: self.sensitivity.clone(),
            specificity: self.specificity.clone(),
        };
        Ok(ReportRow {
            method: self.method.clone(),
            dataset: self.dataset.clone(),
            summary: folds.summarize()?,
        })
    }
}

fn dataset_label(job_dataset: &Option<String>, manifest: &Path) -> String {
    job_dataset.clone().unwrap_or_else(|| {
        manifest
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string()
    })
}

fn score_subject(pred: &SegmentationMask, truth: &SegmentationMask) -> (f64, f64, ConfusionCounts) {
    let c = confusion(pred.voxels(), truth.voxels());
    (dice_score(&c), volume_similarity(&c), c)
}

/// Mean over a nonempty slice.
fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn finish_report(
    out: &Path,
    method: String,
    dataset: String,
    folds: &FoldReport,
) -> Result<()> {
    let stored = StoredReport::from_folds(method, dataset, folds);
    let row = stored.to_row()?;
    let json = serde_json::to_string_pretty(&stored)
        .map_err(|e| Error::Data(format!("could not serialize fold records: {e}")))?;
    write_text(&out.join("folds.json"), &json)?;
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &[row.clone()]).map_err(|e| Error::io(out.join("report.csv"), e))?;
    fs::write(out.join("report.csv"), &csv).map_err(|e| Error::io(out.join("report.csv"), e))?;
    println!(
        "{} on {}: dice {:.2} +/- {:.2}, vs {:.2} +/- {:.2} ({} folds) -> {}",
        row.method,
        row.dataset,
        row.summary.dice.mean,
        row.summary.dice.std,
        row.summary.vs.mean,
        row.summary.vs.std,
        folds.fold_count(),
        out.join("report.csv").display()
    );
    Ok(())
}

fn cmd_evaluate(job: EvaluateJob) -> Result<()> {
    ensure_dir(&job.out)?;
    match (&job.pred_manifest, job.mode) {
        (Some(pred), None) => evaluate_direct(&job, pred.clone()),
        (None, Some(mode)) => evaluate_protocol(&job, mode),
        (None, None) => Err(Error::Config(
            "evaluate needs either --mode (train + test) or --pred-manifest (score existing predictions)".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with forbids this"),
    }
}

/// Score an existing prediction manifest against ground truth as one fold.
fn evaluate_direct(job: &EvaluateJob, pred_path: PathBuf) -> Result<()> {
    let truth = load_subjects(&load_manifest(&job.manifest)?)?;
    let pred_manifest = load_manifest(&pred_path)?;
    let overlays = job.out.join("overlays");
    ensure_dir(&overlays)?;

    let mut dices = Vec::new();
    let mut vss = Vec::new();
    let mut pooled = ConfusionCounts::default();
    for subject in &truth {
        let entry = pred_manifest
            .entries
            .iter()
            .find(|e| e.subject == subject.subject)
            .ok_or_else(|| {
                Error::Data(format!(
                    "prediction manifest is missing subject `{}`",
                    subject.subject
                ))
            })?;
        let pred = load_mask(&entry.mask_path)?;
        let (d, v, c) = score_subject(&pred, &subject.mask);
        dices.push(d);
        vss.push(v);
        pooled += c;
        let z = densest_slice(&subject.mask);
        emit_overlay(
            &subject.volume,
            &subject.mask,
            &pred,
            z,
            &overlays.join(format!("pred_{}_z{z:03}.png", subject.subject)),
        )?;
    }
    let (sens, spec) = sensitivity_specificity(&pooled);
    let mut folds = FoldReport::default();
    folds.push_fold(mean(&dices), mean(&vss), sens, spec);

    let method = job.method.clone().unwrap_or_else(|| "PRED".into());
    let dataset = dataset_label(&job.dataset, &job.manifest);
    finish_report(&job.out, method, dataset, &folds)
}

/// Full protocol: per seed, split subjects into folds, train the chosen
/// mode on each fold's training half, and score its test half.
fn evaluate_protocol(job: &EvaluateJob, mode: Mode) -> Result<()> {
    let manifest = load_manifest(&job.manifest)?;
    let subjects = load_subjects(&manifest)?;
    let plane = input_plane(&subjects)?;
    let needs_source = matches!(mode, Mode::Tr | Mode::Da);
    let source_subjects = match (&job.source_manifest, needs_source) {
        (Some(path), true) => load_subjects(&load_manifest(path)?)?,
        (None, true) => {
            return Err(Error::Config(format!(
                "--mode {} needs --source-manifest for its pretraining stage",
                mode.slug()
            )))
        }
        (_, false) => Vec::new(),
    };
    let source_seqs = all_sequences(&source_subjects);

    let checkpoints = job.out.join("checkpoints");
    let overlays = job.out.join("overlays");
    ensure_dir(&checkpoints)?;
    ensure_dir(&overlays)?;

    let mut folds_report = FoldReport::default();
    let mut runlog = String::new();

    for &seed in &job.seeds {
        let cfg = resolve_config(&job.train, Some(seed), plane)?;

        // tr/da pretrain once per seed; folds reuse the same checkpoint.
        let pretrained: Option<Checkpoint<DefaultScalar>> = if needs_source {
            let mut pre_cfg = cfg.clone();
            if let Some(pe) = job.pretrain_epochs {
                pre_cfg.epochs = pe;
            }
            let outcome = pretrain_source::<DefaultScalar>(&source_seqs, &pre_cfg)?;
            append_log(
                &mut runlog,
                &format!("pretrain seed={seed} best_epoch={}", outcome.best_epoch),
                &outcome.log,
            );
            save_checkpoint(&outcome.checkpoint, &checkpoints.join(format!("pretrain_seed{seed}.ckpt")))?;
            Some(outcome.checkpoint)
        } else {
            None
        };

        let folds: Vec<Fold> = if job.folds == 1 {
            // Quick-run escape hatch: train and test on everything.
            let everyone: Vec<String> = subjects.iter().map(|s| s.subject.clone()).collect();
            vec![Fold { train: everyone.clone(), test: everyone }]
        } else {
            make_folds(&manifest, job.folds, seed)?.folds
        };

        for (fold_idx, fold) in folds.iter().enumerate() {
            let train_seqs = sequences_of(&subjects, &fold.train);
            let outcome = match mode {
                Mode::Scratch => train_scratch::<DefaultScalar>(&train_seqs, &cfg)?,
                Mode::Tr => finetune_transfer(pretrained.as_ref().unwrap(), &train_seqs, &cfg)?,
                Mode::Da => adapt_domain(pretrained.as_ref().unwrap(), &source_seqs, &train_seqs, &cfg)?,
            };
            append_log(
                &mut runlog,
                &format!(
                    "{} seed={seed} fold={fold_idx} train_subjects={} best_epoch={}",
                    mode.slug(),
                    fold.train.len(),
                    outcome.best_epoch
                ),
                &outcome.log,
            );
            save_checkpoint(
                &outcome.checkpoint,
                &checkpoints.join(format!("{}_seed{seed}_fold{fold_idx}.ckpt", mode.slug())),
            )?;

            let mut dices = Vec::new();
            let mut vss = Vec::new();
            let mut pooled = ConfusionCounts::default();
            for name in &fold.test {
                let subject = subjects
                    .iter()
                    .find(|s| &s.subject == name)
                    .expect("fold subjects come from the manifest");
                let prediction = predict_volume(&outcome.checkpoint, &subject.volume)?;
                let (d, v, c) = score_subject(&prediction.mask, &subject.mask);
                dices.push(d);
                vss.push(v);
                pooled += c;
                let z = densest_slice(&subject.mask);
                emit_overlay(
                    &subject.volume,
                    &subject.mask,
                    &prediction.mask,
                    z,
                    &overlays.join(format!(
                        "{}_seed{seed}_fold{fold_idx}_{}_z{z:03}.png",
                        mode.slug(),
                        subject.subject
                    )),
                )?;
            }
            let (sens, spec) = sensitivity_specificity(&pooled);
            folds_report.push_fold(mean(&dices), mean(&vss), sens, spec);
        }
    }

    write_text(&job.out.join("runlog.txt"), &runlog)?;
    let method = job.method.clone().unwrap_or_else(|| mode.method_name().into());
    let dataset = dataset_label(&job.dataset, &job.manifest);
    finish_report(&job.out, method, dataset, &folds_report)
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: StoredReport = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("not a fold record file: {e}")))?;
        rows.push(stored.to_row()?);
    }
    let csv_path = out.join("report.csv");
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &rows).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    println!("merged {} fold records -> {}", rows.len(), csv_path.display());
    Ok(())
}
