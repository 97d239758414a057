//! Synthetic two-domain benchmark: noisy volumes with analytic ellipsoid
//! masks. The source style is high-contrast and near-spherical; the target
//! style is low-contrast, more eccentric, and textured. The styles share
//! geometry, so a model pretrained on source data has something to transfer,
//! while the intensity gap gives the discriminator a real job.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{
    save_manifest, save_mask, save_volume, CtVolume, DatasetManifest, Domain, ManifestEntry,
    SegmentationMask, Stage,
};

/// Background base intensity shared by both styles.
pub const BACKGROUND_INTENSITY: f64 = 0.3;
/// Foreground offset for the high-contrast source style.
pub const SOURCE_CONTRAST: f64 = 0.5;
/// Foreground offset for the low-contrast target style.
pub const TARGET_CONTRAST: f64 = 0.2;
const TEXTURE_AMPLITUDE: f64 = 0.06;
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainStyle {
    Source,
    Target,
}

/// Recipe for one synthetic volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub style: DomainStyle,
    /// `(nz, ny, nx)`.
    pub shape: (usize, usize, usize),
    /// Inclusive blob count range.
    pub blob_count: (usize, usize),
    /// Inclusive base radius range in voxels.
    pub blob_radius: (f64, f64),
    /// Inclusive per-axis stretch range; wider = more eccentric blobs.
    pub eccentricity: (f64, f64),
    /// Foreground intensity offset above the background.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Low-frequency background modulation (target style).
    pub texture: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn source(seed: u64) -> Self {
        SynthSpec {
            style: DomainStyle::Source,
            shape: (16, 64, 64),
            blob_count: (1, 3),
            blob_radius: (3.0, 6.5),
            eccentricity: (0.85, 1.15),
            contrast: SOURCE_CONTRAST,
            noise_sigma: 0.05,
            texture: false,
            seed,
        }
    }

    pub fn target(seed: u64) -> Self {
        SynthSpec {
            style: DomainStyle::Target,
            blob_radius: (3.0, 5.5),
            eccentricity: (0.6, 1.4),
            contrast: TARGET_CONTRAST,
            texture: true,
            ..SynthSpec::source(seed)
        }
    }

    pub fn styled(style: DomainStyle, seed: u64) -> Self {
        match style {
            DomainStyle::Source => SynthSpec::source(seed),
            DomainStyle::Target => SynthSpec::target(seed),
        }
    }

    /// Adopt a volume shape, shrinking the blob radius range proportionally
    /// when the volume is smaller than the default 16-slice design so blobs
    /// still fit.
    pub fn with_shape(mut self, shape: (usize, usize, usize)) -> Self {
        let min_dim = shape.0.min(shape.1).min(shape.2) as f64;
        let scale = (min_dim / 16.0).min(1.0);
        let hi = self.blob_radius.1 * scale;
        let lo = (self.blob_radius.0 * scale).max(1.0).min(hi);
        self.blob_radius = (lo, hi);
        self.shape = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (nz, ny, nx) = self.shape;
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::Config("volume shape must be nonzero".into()));
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 {
            return Err(Error::Config(format!(
                "blob count range {:?} must be an increasing range starting at >= 1",
                self.blob_count
            )));
        }
        if !(self.blob_radius.0 > 0.0) || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::Config(format!(
                "blob radius range {:?} must be positive and increasing",
                self.blob_radius
            )));
        }
        if !(self.eccentricity.0 > 0.0) || self.eccentricity.0 > self.eccentricity.1 {
            return Err(Error::Config(format!(
                "eccentricity range {:?} must be positive and increasing",
                self.eccentricity
            )));
        }
        let max_axis = self.blob_radius.1 * self.eccentricity.1;
        let min_dim = nz.min(ny).min(nx) as f64;
        if 2.0 * max_axis > min_dim {
            return Err(Error::Config(format!(
                "largest blob axis {max_axis:.1} does not fit in the volume (min dimension {min_dim})"
            )));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::Config("contrast must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exact lattice indicator of an axis-aligned ellipsoid.
pub fn ellipsoid_mask(
    shape: (usize, usize, usize),
    center: (f64, f64, f64),
    semi_axes: (f64, f64, f64),
) -> Array3<u8> {
    let (cz, cy, cx) = center;
    let (az, ay, ax) = semi_axes;
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let dz = (z as f64 - cz) / az;
        let dy = (y as f64 - cy) / ay;
        let dx = (x as f64 - cx) / ax;
        u8::from(dz * dz + dy * dy + dx * dx <= 1.0)
    })
}

fn draw_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let (nz, ny, nx) = spec.shape;
    let n_blobs = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let mut mask = Array3::<u8>::zeros(spec.shape);
    for _ in 0..n_blobs {
        let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
        let stretch = |rng: &mut ChaCha8Rng| rng.gen_range(spec.eccentricity.0..=spec.eccentricity.1);
        let axes = (r * stretch(rng), r * stretch(rng), r * stretch(rng));
        let place = |rng: &mut ChaCha8Rng, a: f64, n: usize| -> f64 {
            let lo = a.min(n as f64 / 2.0);
            rng.gen_range(lo..=(n as f64 - lo))
        };
        let center = (
            place(rng, axes.0, nz),
            place(rng, axes.1, ny),
            place(rng, axes.2, nx),
        );
        mask.zip_mut_with(&ellipsoid_mask(spec.shape, center, axes), |m, &e| *m |= e);
    }
    mask
}

/// Render one volume and its exact mask. Deterministic in `spec.seed`.
pub fn generate_volume(spec: &SynthSpec) -> Result<(CtVolume, SegmentationMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Analytic mask first; redraw the rare layout whose ellipsoids miss
    // every lattice point.
    let mut mask = draw_mask(spec, &mut rng);
    let mut redraws = 0;
    while mask.iter().all(|&m| m == 0) {
        redraws += 1;
        if redraws > MAX_REDRAWS {
            return Err(Error::Extraction(
                "could not draw a nonempty mask; blob radii are too small".into(),
            ));
        }
        mask = draw_mask(spec, &mut rng);
    }

    let (nz, ny, nx) = spec.shape;
    let mut vox = Array3::<f64>::from_elem(spec.shape, BACKGROUND_INTENSITY);
    if spec.texture {
        // Two low-frequency plane waves; amplitude stays below the contrast
        // so foreground always outshines its local background.
        let (fz, fy, fx) = (
            rng.gen_range(1..=2) as f64,
            rng.gen_range(1..=3) as f64,
            rng.gen_range(1..=3) as f64,
        );
        let (pz, py, px) = (
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        for ((z, y, x), v) in vox.indexed_iter_mut() {
            let t = (std::f64::consts::TAU * fz * z as f64 / nz as f64 + pz).sin()
                + (std::f64::consts::TAU * fy * y as f64 / ny as f64 + py).sin()
                + (std::f64::consts::TAU * fx * x as f64 / nx as f64 + px).sin();
            *v += TEXTURE_AMPLITUDE * t / 3.0;
        }
    }
    for (v, &m) in vox.iter_mut().zip(mask.iter()) {
        if m == 1 {
            *v += spec.contrast;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        for v in vox.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let clamped = vox.mapv(|v| v.clamp(0.0, 1.0) as f32);

    Ok((
        CtVolume::new(clamped, (1.0, 1.0, 1.0), Stage::Normalized)?,
        SegmentationMask::new(mask)?,
    ))
}

/// Write a complete two-domain benchmark into `dir`: volumes, masks, and a
/// manifest per domain (`source_manifest.tsv`, `target_manifest.tsv`).
/// Returns the reloaded manifests so entries carry resolved paths.
pub fn generate_benchmark(
    dir: &Path,
    n_source: usize,
    n_target: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::Config("benchmark needs at least one volume per domain".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    // Per-volume seeds come from one master stream so any (n_source,
    // n_target) prefix of the same seed regenerates identical files.
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut write_domain = |style: DomainStyle, count: usize, prefix: &str| -> Result<DatasetManifest> {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let spec = SynthSpec::styled(style, master.gen()).with_shape(shape);
            let (vol, mask) = generate_volume(&spec)?;
            let vol_name = format!("{prefix}{i:03}.vox");
            let mask_name = format!("{prefix}{i:03}_mask.vox");
            save_volume(&vol, &dir.join(&vol_name))?;
            save_mask(&mask, &dir.join(&mask_name))?;
            entries.push(ManifestEntry {
                subject: format!("{prefix}{i:03}"),
                domain: match style {
                    DomainStyle::Source => Domain::Source,
                    DomainStyle::Target => Domain::Target,
                },
                volume_path: vol_name.into(),
                mask_path: mask_name.into(),
            });
        }
        Ok(DatasetManifest { entries })
    };

    let source = write_domain(DomainStyle::Source, n_source, "src")?;
    let target = write_domain(DomainStyle::Target, n_target, "tgt")?;
    let source_path = dir.join("source_manifest.tsv");
    let target_path = dir.join("target_manifest.tsv");
    save_manifest(&source, &source_path)?;
    save_manifest(&target, &target_path)?;
    Ok((
        crate::volume::load_manifest(&source_path)?,
        crate::volume::load_manifest(&target_path)?,
    ))
}
