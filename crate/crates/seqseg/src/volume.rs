//! Volume container I/O.
//!
//! Scans and masks are stored as a raw little-endian float32 voxel stream
//! (`<name>.vox`, row-major z,y,x) next to a text sidecar
//! (`<name>.vox.meta`) carrying shape, voxel spacing and preprocessing
//! stage. Datasets are described by tab-separated manifests with one record
//! per subject: `subject<TAB>domain<TAB>volume<TAB>mask`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Preprocessing stage of a [`CtVolume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Raw Hounsfield units as ingested.
    RawHu,
    /// After histogram equalization, values in [0,1].
    Equalized,
    /// After window clipping, values in [0,1].
    Windowed,
    /// Model-ready, values in [0,1].
    Normalized,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::RawHu => "RAW_HU",
            Stage::Equalized => "EQUALIZED",
            Stage::Windowed => "WINDOWED",
            Stage::Normalized => "NORMALIZED",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "RAW_HU" => Ok(Stage::RawHu),
            "EQUALIZED" => Ok(Stage::Equalized),
            "WINDOWED" => Ok(Stage::Windowed),
            "NORMALIZED" => Ok(Stage::Normalized),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// A 3D scalar field with voxel spacing metadata.
///
/// Voxels are indexed `[z][y][x]` so `voxels[i]` is axial slice `i`.
/// Spacing is `(sx, sy, sz)` in mm/voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    voxels: Array3<f32>,
    spacing: (f64, f64, f64),
    stage: Stage,
}

impl CtVolume {
    /// Build a volume, enforcing the type invariants: finite voxels,
    /// positive spacing, and values in [0,1] when the stage says so.
    pub fn new(voxels: Array3<f32>, spacing: (f64, f64, f64), stage: Stage) -> Result<Self> {
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Data(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel value {bad}")));
        }
        if stage == Stage::Normalized {
            if let Some(bad) = voxels.iter().find(|v| **v < 0.0 || **v > 1.0) {
                return Err(Error::Data(format!(
                    "stage NORMALIZED requires values in [0,1], got {bad}"
                )));
            }
        }
        Ok(CtVolume {
            voxels,
            spacing,
            stage,
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    /// `(sx, sy, sz)` in mm/voxel.
    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// `(nz, ny, nx)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.voxels.dim();
        (d.0, d.1, d.2)
    }

    /// Spacing reordered to match the voxel axes: `[sz, sy, sx]`.
    pub fn spacing_zyx(&self) -> [f64; 3] {
        [self.spacing.2, self.spacing.1, self.spacing.0]
    }
}

/// A binary mask paired with a volume of the same shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    voxels: Array3<u8>,
}

impl SegmentationMask {
    /// Build a mask, rejecting any value other than 0 or 1.
    pub fn new(voxels: Array3<u8>) -> Result<Self> {
        if let Some(bad) = voxels.iter().find(|v| **v > 1) {
            return Err(Error::Data(format!(
                "mask values must be 0 or 1, got {bad}"
            )));
        }
        Ok(SegmentationMask { voxels })
    }

    pub fn voxels(&self) -> &Array3<u8> {
        &self.voxels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.voxels.dim();
        (d.0, d.1, d.2)
    }

    /// Number of foreground voxels.
    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|v| **v == 1).count()
    }
}

/// Domain tag of a manifest entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "SOURCE",
            Domain::Target => "TARGET",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "SOURCE" => Ok(Domain::Source),
            "TARGET" => Ok(Domain::Target),
            other => Err(format!("unknown domain tag `{other}`")),
        }
    }
}

/// One subject in a dataset manifest.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject: String,
    pub domain: Domain,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
}

/// A validated list of (volume, mask, domain, subject) records.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.subject.as_str())
    }
}

/// Sidecar metadata of a stored volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub shape: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub stage: Stage,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Read only the sidecar of a stored volume (cheap shape/stage probe).
pub fn read_sidecar(path: &Path) -> Result<VolumeMeta> {
    let meta_path = sidecar_path(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, format!("missing sidecar {}", meta_path.display()))
        } else {
            Error::io(&meta_path, e)
        }
    })?;

    let mut shape = None;
    let mut spacing = None;
    let mut stage = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(&meta_path, format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "shape" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format(&meta_path, format!("bad shape: {e}")))?;
                if dims.len() != 3 {
                    return Err(Error::format(&meta_path, "shape must have 3 dims (z y x)"));
                }
                shape = Some((dims[0], dims[1], dims[2]));
            }
            "spacing" => {
                let sp: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format(&meta_path, format!("bad spacing: {e}")))?;
                if sp.len() != 3 {
                    return Err(Error::format(&meta_path, "spacing must have 3 values (sx sy sz)"));
                }
                spacing = Some((sp[0], sp[1], sp[2]));
            }
            "stage" => {
                stage = Some(
                    value
                        .parse::<Stage>()
                        .map_err(|e| Error::format(&meta_path, e))?,
                );
            }
            other => {
                return Err(Error::format(&meta_path, format!("unknown key `{other}`")));
            }
        }
    }

    Ok(VolumeMeta {
        shape: shape.ok_or_else(|| Error::format(&meta_path, "missing `shape`"))?,
        spacing: spacing.ok_or_else(|| Error::format(&meta_path, "missing `spacing`"))?,
        stage: stage.ok_or_else(|| Error::format(&meta_path, "missing `stage`"))?,
    })
}

/// Write a volume as `<path>` (raw f32 LE) plus `<path>.meta`.
pub fn save_volume(volume: &CtVolume, path: &Path) -> Result<()> {
    let voxels = volume.voxels.as_standard_layout();
    let mut bytes = Vec::with_capacity(voxels.len() * 4);
    for v in voxels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let (nz, ny, nx) = volume.shape();
    let (sx, sy, sz) = volume.spacing;
    let meta = format!(
        "shape = {nz} {ny} {nx}\nspacing = {sx} {sy} {sz}\nstage = {}\n",
        volume.stage
    );
    let meta_path = sidecar_path(path);
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Load a volume stored by [`save_volume`].
pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let meta = read_sidecar(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (nz, ny, nx) = meta.shape;
    let expected = nz * ny * nx * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "voxel stream is {} bytes, sidecar shape implies {expected}",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(nz * ny * nx);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let voxels = Array3::from_shape_vec((nz, ny, nx), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    CtVolume::new(voxels, meta.spacing, meta.stage)
}

/// Store a mask in the same container (voxels 0.0/1.0, spacing 1 mm).
pub fn save_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    let voxels = mask.voxels.mapv(f32::from);
    let volume = CtVolume::new(voxels, (1.0, 1.0, 1.0), Stage::Normalized)?;
    save_volume(&volume, path)
}

/// Load a mask stored by [`save_mask`], requiring exactly 0/1 values.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let volume = load_volume(path)?;
    let mut voxels = Array3::<u8>::zeros(volume.voxels.dim());
    for (out, v) in voxels.iter_mut().zip(volume.voxels.iter()) {
        *out = if *v == 0.0 {
            0
        } else if *v == 1.0 {
            1
        } else {
            return Err(Error::Data(format!(
                "mask file {} contains non-binary value {v}",
                path.display()
            )));
        };
    }
    SegmentationMask::new(voxels)
}

/// Load and validate a dataset manifest.
///
/// Relative volume/mask paths are resolved against the manifest's directory.
/// Validation is eager: paths must resolve, subjects must be unique, and each
/// volume/mask pair must agree in shape (checked via sidecars only).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let subject = fields[0].trim().to_string();
        if subject.is_empty() {
            return Err(Error::format(path, format!("line {}: empty subject id", lineno + 1)));
        }
        if !seen.insert(subject.clone()) {
            return Err(Error::format(
                path,
                format!("duplicate subject id `{subject}`"),
            ));
        }
        let domain = fields[1]
            .trim()
            .parse::<Domain>()
            .map_err(|e| Error::format(path, format!("subject `{subject}`: {e}")))?;
        let volume_path = base.join(fields[2].trim());
        let mask_path = base.join(fields[3].trim());

        let vol_meta = read_sidecar(&volume_path)?;
        let mask_meta = read_sidecar(&mask_path)?;
        if vol_meta.shape != mask_meta.shape {
            return Err(Error::Shape(format!(
                "subject `{subject}`: volume shape {:?} != mask shape {:?}",
                vol_meta.shape, mask_meta.shape
            )));
        }

        entries.push(ManifestEntry {
            subject,
            domain,
            volume_path,
            mask_path,
        });
    }

    Ok(DatasetManifest { entries })
}

/// Write a manifest. Paths are written as given (synth and preprocess store
/// bare file names so the manifest stays relocatable with its directory).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in &manifest.entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.subject,
            e.domain,
            e.volume_path.display(),
            e.mask_path.display()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
