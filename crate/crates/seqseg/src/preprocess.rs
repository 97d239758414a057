//! Preprocessing chains that turn raw scans into model-ready 3-slice
//! sequences: isotropic resampling, histogram equalization, HU window
//! clipping, head/orbital VOI extraction, cropping, intensity
//! normalization, and sequence binding.
//!
//! Each supported dataset flavor has a [`Recipe`] composing these steps;
//! masks always undergo the same geometry as their volume (nearest-neighbor
//! where the volume is interpolated).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, SegmentationMask, Stage};

/// In-plane size every recipe ends at (the model's native input size).
pub const MODEL_HW: (usize, usize) = (64, 64);
/// Default HU window for contrast-limited datasets.
pub const WINDOW_LEVEL_HU: f32 = 48.0;
pub const WINDOW_WIDTH_HU: f32 = 400.0;

const EQ_BINS: usize = 256;

/// A half-open voxel box `(z0..z1, y0..y1, x0..x1)` inside a parent volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voi {
    pub z: (usize, usize),
    pub y: (usize, usize),
    pub x: (usize, usize),
    /// `(nz, ny, nx)` of the volume the box lives in.
    pub parent: (usize, usize, usize),
}

impl Voi {
    pub fn new(
        z: (usize, usize),
        y: (usize, usize),
        x: (usize, usize),
        parent: (usize, usize, usize),
    ) -> Result<Self> {
        for (name, (lo, hi), extent) in
            [("z", z, parent.0), ("y", y, parent.1), ("x", x, parent.2)]
        {
            if lo >= hi || hi > extent {
                return Err(Error::Extraction(format!(
                    "invalid {name} bounds {lo}..{hi} for extent {extent}"
                )));
            }
        }
        Ok(Voi { z, y, x, parent })
    }

    pub fn depth(&self) -> usize {
        self.z.1 - self.z.0
    }

    pub fn height(&self) -> usize {
        self.y.1 - self.y.0
    }

    pub fn width(&self) -> usize {
        self.x.1 - self.x.0
    }
}

/// One model input: three consecutive normalized slices and the mask of the
/// center slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    /// `(3, 1, H, W)`, values in [0,1].
    pub slices: Array4<f32>,
    /// `(1, H, W)`, binary.
    pub center_mask: Array3<u8>,
    pub subject: String,
    /// Index of the center slice in the source volume.
    pub center_index: usize,
}

fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Source coordinate of output sample `o` under center-aligned resampling.
fn src_coord(o: usize, out_spacing: f64, in_spacing: f64) -> f64 {
    ((o as f64 + 0.5) * out_spacing) / in_spacing - 0.5
}

fn lerp_ends(f: f64, n: usize) -> (usize, usize, f32) {
    let f = f.clamp(0.0, (n - 1) as f64);
    let lo = f.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, (f - lo as f64) as f32)
}

/// Resample to isotropic voxels of `target_spacing` mm with trilinear
/// interpolation at voxel centers; the new shape is
/// `round(old_shape * old_spacing / target)` per axis.
pub fn resample_isotropic(v: &CtVolume, target_spacing: f64) -> Result<CtVolume> {
    if !(target_spacing > 0.0) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    if !matches!(v.stage(), Stage::RawHu | Stage::Equalized) {
        return Err(Error::Data(format!(
            "resampling expects RAW_HU or EQUALIZED input, got {}",
            v.stage()
        )));
    }
    let (nz, ny, nx) = v.shape();
    let [sz, sy, sx] = v.spacing_zyx();
    let (oz, oy, ox) = (
        resampled_len(nz, sz, target_spacing),
        resampled_len(ny, sy, target_spacing),
        resampled_len(nx, sx, target_spacing),
    );
    let src = v.voxels();
    let out = Array3::from_shape_fn((oz, oy, ox), |(z, y, x)| {
        let (z0, z1, fz) = lerp_ends(src_coord(z, target_spacing, sz), nz);
        let (y0, y1, fy) = lerp_ends(src_coord(y, target_spacing, sy), ny);
        let (x0, x1, fx) = lerp_ends(src_coord(x, target_spacing, sx), nx);
        let mut acc = 0.0f32;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    acc += wz * wy * wx * src[(zi, yi, xi)];
                }
            }
        }
        acc
    });
    CtVolume::new(out, (target_spacing, target_spacing, target_spacing), v.stage())
}

/// Nearest-neighbor companion of [`resample_isotropic`] for binary masks.
pub fn resample_mask_isotropic(
    m: &SegmentationMask,
    spacing: (f64, f64, f64),
    target_spacing: f64,
) -> Result<SegmentationMask> {
    if !(target_spacing > 0.0) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let (nz, ny, nx) = m.shape();
    let (sx, sy, sz) = spacing;
    let (oz, oy, ox) = (
        resampled_len(nz, sz, target_spacing),
        resampled_len(ny, sy, target_spacing),
        resampled_len(nx, sx, target_spacing),
    );
    let nearest = |o: usize, out_sp: f64, in_sp: f64, n: usize| -> usize {
        (src_coord(o, out_sp, in_sp).round().max(0.0) as usize).min(n - 1)
    };
    let src = m.voxels();
    let out = Array3::from_shape_fn((oz, oy, ox), |(z, y, x)| {
        src[(
            nearest(z, target_spacing, sz, nz),
            nearest(y, target_spacing, sy, ny),
            nearest(x, target_spacing, sx, nx),
        )]
    });
    SegmentationMask::new(out)
}

/// Global histogram equalization over 256 bins; output in [0,1] via the
/// cumulative distribution. A constant volume maps to all zeros.
pub fn equalize_histogram(v: &CtVolume) -> Result<CtVolume> {
    let src = v.voxels();
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        return CtVolume::new(Array3::zeros(src.dim()), v.spacing(), Stage::Equalized);
    }
    let bin_of = |x: f32| -> usize {
        (((x - lo) / (hi - lo) * EQ_BINS as f32) as usize).min(EQ_BINS - 1)
    };
    let mut hist = [0u64; EQ_BINS];
    for &x in src.iter() {
        hist[bin_of(x)] += 1;
    }
    let mut cdf = [0f64; EQ_BINS];
    let mut running = 0u64;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        running += h;
        *c = running as f64 / src.len() as f64;
    }
    let out = src.mapv(|x| cdf[bin_of(x)] as f32);
    CtVolume::new(out, v.spacing(), Stage::Equalized)
}

/// Clamp Hounsfield units to `[level - width/2, level + width/2]` and map
/// that window to [0,1].
pub fn window_clip(v: &CtVolume, level: f32, width: f32) -> Result<CtVolume> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("window width must be positive, got {width}")));
    }
    if v.stage() != Stage::RawHu {
        return Err(Error::Data(format!(
            "window clipping expects RAW_HU input, got {}",
            v.stage()
        )));
    }
    let lo = level - width / 2.0;
    let out = v.voxels().mapv(|x| (x.clamp(lo, lo + width) - lo) / width);
    CtVolume::new(out, v.spacing(), Stage::Windowed)
}

/// Lloyd's algorithm for two clusters on a 1D sample, seeded at the sample
/// extremes. Returns the threshold separating the clusters (midpoint of the
/// final means); values >= threshold belong to the brighter cluster.
fn kmeans2_threshold(values: &Array3<f32>) -> Option<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        return None;
    }
    let (mut c0, mut c1) = (lo as f64, hi as f64);
    for _ in 0..100 {
        let t = ((c0 + c1) / 2.0) as f32;
        let (mut s0, mut n0, mut s1, mut n1) = (0.0f64, 0u64, 0.0f64, 0u64);
        for &x in values.iter() {
            if x >= t {
                s1 += x as f64;
                n1 += 1;
            } else {
                s0 += x as f64;
                n0 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            return None;
        }
        let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
        if m0 == c0 && m1 == c1 {
            break;
        }
        (c0, c1) = (m0, m1);
    }
    Some(((c0 + c1) / 2.0) as f32)
}

/// Largest 6-connected foreground component, in place: keeps only that
/// component's voxels set.
fn largest_component(fg: &mut Array3<bool>) -> usize {
    let (nz, ny, nx) = fg.dim();
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let flat = fg.as_slice_mut().unwrap();
    // 0 = background, 1 = unvisited foreground, labels start at 2.
    let mut labels = vec![0u32; flat.len()];
    for (l, &f) in labels.iter_mut().zip(flat.iter()) {
        *l = u32::from(f);
    }
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 2u32;
    let mut queue = VecDeque::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels[idx(z, y, x)] != 1 {
                    continue;
                }
                let label = next;
                next += 1;
                let mut size = 0usize;
                labels[idx(z, y, x)] = label;
                queue.push_back((z, y, x));
                while let Some((cz, cy, cx)) = queue.pop_front() {
                    size += 1;
                    let mut visit = |z: usize, y: usize, x: usize| {
                        if labels[idx(z, y, x)] == 1 {
                            labels[idx(z, y, x)] = label;
                            queue.push_back((z, y, x));
                        }
                    };
                    if cz > 0 { visit(cz - 1, cy, cx); }
                    if cz + 1 < nz { visit(cz + 1, cy, cx); }
                    if cy > 0 { visit(cz, cy - 1, cx); }
                    if cy + 1 < ny { visit(cz, cy + 1, cx); }
                    if cx > 0 { visit(cz, cy, cx - 1); }
                    if cx + 1 < nx { visit(cz, cy, cx + 1); }
                }
                if size > best_size {
                    best_size = size;
                    best_label = label;
                }
            }
        }
    }
    for (f, &l) in flat.iter_mut().zip(labels.iter()) {
        *f = l == best_label && best_label != 0;
    }
    best_size
}

/// Locate the head in a windowed/normalized scan: 2-means intensity
/// clustering (brighter cluster = tissue), largest 6-connected component,
/// tight y/x bounding box. The box spans every slice in z.
pub fn extract_head_voi(v: &CtVolume) -> Result<Voi> {
    if !matches!(v.stage(), Stage::Windowed | Stage::Normalized) {
        return Err(Error::Data(format!(
            "head extraction expects WINDOWED or NORMALIZED input, got {}",
            v.stage()
        )));
    }
    let threshold = kmeans2_threshold(v.voxels())
        .ok_or_else(|| Error::Extraction("constant volume has no foreground cluster".into()))?;
    let mut fg = v.voxels().mapv(|x| x >= threshold);
    if largest_component(&mut fg) == 0 {
        return Err(Error::Extraction("no foreground component found".into()));
    }
    let (nz, _, _) = v.shape();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for ((_, y, x), &f) in fg.indexed_iter() {
        if f {
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
            x0 = x0.min(x);
            x1 = x1.max(x + 1);
        }
    }
    Voi::new((0, nz), (y0, y1), (x0, x1), v.shape())
}

/// The two square orbital boxes inside a head box: side
/// `s = ceil(max(h, w) / 2)`, anchored at the head box's top-left and
/// top-right corners, spanning the head box's full z range.
pub fn orbital_boxes(head: &Voi) -> Result<(Voi, Voi)> {
    let (h, w) = (head.height(), head.width());
    if h < 2 || w < 2 {
        return Err(Error::Extraction(format!("head box {h}x{w} is degenerate")));
    }
    let s = h.max(w).div_ceil(2);
    if s > h || s > w {
        return Err(Error::Extraction(format!(
            "orbital square side {s} exceeds head box {h}x{w}"
        )));
    }
    let left = Voi::new(head.z, (head.y.0, head.y.0 + s), (head.x.0, head.x.0 + s), head.parent)?;
    let right = Voi::new(head.z, (head.y.0, head.y.0 + s), (head.x.1 - s, head.x.1), head.parent)?;
    Ok((left, right))
}

/// Extract a box from a volume (spacing and stage carried over).
pub fn crop_voi(v: &CtVolume, voi: &Voi) -> Result<CtVolume> {
    if voi.parent != v.shape() {
        return Err(Error::Shape(format!(
            "box parent {:?} does not match volume {:?}",
            voi.parent,
            v.shape()
        )));
    }
    let out = v
        .voxels()
        .slice(ndarray::s![voi.z.0..voi.z.1, voi.y.0..voi.y.1, voi.x.0..voi.x.1])
        .to_owned();
    CtVolume::new(out, v.spacing(), v.stage())
}

/// Mask companion of [`crop_voi`].
pub fn crop_voi_mask(m: &SegmentationMask, voi: &Voi) -> Result<SegmentationMask> {
    if voi.parent != m.shape() {
        return Err(Error::Shape(format!(
            "box parent {:?} does not match mask {:?}",
            voi.parent,
            m.shape()
        )));
    }
    let out = m
        .voxels()
        .slice(ndarray::s![voi.z.0..voi.z.1, voi.y.0..voi.y.1, voi.x.0..voi.x.1])
        .to_owned();
    SegmentationMask::new(out)
}

/// Both orbital crops (left, right) of a head box.
pub fn crop_orbital_vois(v: &CtVolume, head: &Voi) -> Result<(CtVolume, CtVolume)> {
    let (left, right) = orbital_boxes(head)?;
    Ok((crop_voi(v, &left)?, crop_voi(v, &right)?))
}

fn crop_axis(center: usize, size: usize) -> isize {
    center as isize - (size / 2) as isize
}

/// Axial crop of `size = (H, W)` centered at `(cy, cx)` on every slice,
/// zero-padded where the window leaves the volume.
pub fn crop_center(v: &CtVolume, center: (usize, usize), size: (usize, usize)) -> Result<CtVolume> {
    let (nz, ny, nx) = v.shape();
    let (cy, cx) = center;
    let (h, w) = size;
    if cy >= ny || cx >= nx {
        return Err(Error::Shape(format!(
            "center ({cy}, {cx}) outside volume {ny}x{nx}"
        )));
    }
    if h == 0 || w == 0 || h > 2 * ny || w > 2 * nx {
        return Err(Error::Config(format!(
            "crop size {h}x{w} unreasonable for volume {ny}x{nx}"
        )));
    }
    let ys = crop_axis(cy, h);
    let xs = crop_axis(cx, w);
    let src = v.voxels();
    let out = Array3::from_shape_fn((nz, h, w), |(z, y, x)| {
        let (sy, sx) = (ys + y as isize, xs + x as isize);
        if sy < 0 || sy >= ny as isize || sx < 0 || sx >= nx as isize {
            0.0
        } else {
            src[(z, sy as usize, sx as usize)]
        }
    });
    CtVolume::new(out, v.spacing(), v.stage())
}

/// Mask companion of [`crop_center`] (padding is background).
pub fn crop_center_mask(
    m: &SegmentationMask,
    center: (usize, usize),
    size: (usize, usize),
) -> Result<SegmentationMask> {
    let (nz, ny, nx) = m.shape();
    let (cy, cx) = center;
    let (h, w) = size;
    if cy >= ny || cx >= nx {
        return Err(Error::Shape(format!(
            "center ({cy}, {cx}) outside mask {ny}x{nx}"
        )));
    }
    let ys = crop_axis(cy, h);
    let xs = crop_axis(cx, w);
    let src = m.voxels();
    let out = Array3::from_shape_fn((nz, h, w), |(z, y, x)| {
        let (sy, sx) = (ys + y as isize, xs + x as isize);
        if sy < 0 || sy >= ny as isize || sx < 0 || sx >= nx as isize {
            0
        } else {
            src[(z, sy as usize, sx as usize)]
        }
    });
    SegmentationMask::new(out)
}

/// Per-volume min-max normalization to [0,1]; a constant volume maps to
/// zeros.
pub fn normalize_intensity(v: &CtVolume) -> Result<CtVolume> {
    let src = v.voxels();
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let out = if lo == hi {
        Array3::zeros(src.dim())
    } else {
        src.mapv(|x| (x - lo) / (hi - lo))
    };
    CtVolume::new(out, v.spacing(), Stage::Normalized)
}

/// Bilinear in-plane resize of every slice (z count unchanged).
pub fn resize_slices(v: &CtVolume, out_hw: (usize, usize)) -> Result<CtVolume> {
    let (nz, ny, nx) = v.shape();
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Config("resize target must be nonzero".into()));
    }
    let (ry, rx) = (ny as f64 / oh as f64, nx as f64 / ow as f64);
    let src = v.voxels();
    let out = Array3::from_shape_fn((nz, oh, ow), |(z, y, x)| {
        let (y0, y1, fy) = lerp_ends((y as f64 + 0.5) * ry - 0.5, ny);
        let (x0, x1, fx) = lerp_ends((x as f64 + 0.5) * rx - 0.5, nx);
        (1.0 - fy) * ((1.0 - fx) * src[(z, y0, x0)] + fx * src[(z, y0, x1)])
            + fy * ((1.0 - fx) * src[(z, y1, x0)] + fx * src[(z, y1, x1)])
    });
    CtVolume::new(out, v.spacing(), v.stage())
}

/// Nearest-neighbor in-plane resize for masks.
pub fn resize_mask(m: &SegmentationMask, out_hw: (usize, usize)) -> Result<SegmentationMask> {
    let (nz, ny, nx) = m.shape();
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Config("resize target must be nonzero".into()));
    }
    let (ry, rx) = (ny as f64 / oh as f64, nx as f64 / ow as f64);
    let nearest = |o: usize, r: f64, n: usize| -> usize {
        ((((o as f64 + 0.5) * r - 0.5).round()).max(0.0) as usize).min(n - 1)
    };
    let src = m.voxels();
    let out = Array3::from_shape_fn((nz, oh, ow), |(z, y, x)| {
        src[(z, nearest(y, ry, ny), nearest(x, rx, nx))]
    });
    SegmentationMask::new(out)
}

/// Tight bounding box of a mask's foreground.
pub fn mask_bbox(m: &SegmentationMask) -> Option<Voi> {
    let (mut z0, mut z1) = (usize::MAX, 0usize);
    let (mut y0, mut y1) = (usize::MAX, 0usize);
    let (mut x0, mut x1) = (usize::MAX, 0usize);
    for ((z, y, x), &v) in m.voxels().indexed_iter() {
        if v == 1 {
            z0 = z0.min(z);
            z1 = z1.max(z + 1);
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
            x0 = x0.min(x);
            x1 = x1.max(x + 1);
        }
    }
    (z0 != usize::MAX).then(|| Voi { z: (z0, z1), y: (y0, y1), x: (x0, x1), parent: m.shape() })
}

/// Keep the slice range `[z0, z1)`, full in-plane extent.
pub fn slab(v: &CtVolume, z0: usize, z1: usize) -> Result<CtVolume> {
    let (nz, ny, nx) = v.shape();
    let voi = Voi::new((z0, z1), (0, ny), (0, nx), (nz, ny, nx))?;
    crop_voi(v, &voi)
}

pub fn slab_mask(m: &SegmentationMask, z0: usize, z1: usize) -> Result<SegmentationMask> {
    let (nz, ny, nx) = m.shape();
    let voi = Voi::new((z0, z1), (0, ny), (0, nx), (nz, ny, nx))?;
    crop_voi_mask(m, &voi)
}

/// Sliding 3-slice windows over a normalized volume, one sequence per
/// slice; the first and last slice are edge-replicated so every slice gets
/// to be a center.
pub fn bind_sequences(
    v: &CtVolume,
    m: &SegmentationMask,
    subject: &str,
) -> Result<Vec<SliceSequence>> {
    if v.stage() != Stage::Normalized {
        return Err(Error::Data(format!(
            "sequence binding expects NORMALIZED input, got {}",
            v.stage()
        )));
    }
    if v.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} shapes differ",
            v.shape(),
            m.shape()
        )));
    }
    let (nz, ny, nx) = v.shape();
    if nz == 0 {
        return Err(Error::Data("cannot bind sequences from an empty volume".into()));
    }
    let vox = v.voxels();
    let mut out = Vec::with_capacity(nz);
    for center in 0..nz {
        let picks = [center.saturating_sub(1), center, (center + 1).min(nz - 1)];
        let mut slices = Array4::zeros((3, 1, ny, nx));
        for (t, &zi) in picks.iter().enumerate() {
            slices
                .index_axis_mut(Axis(0), t)
                .index_axis_mut(Axis(0), 0)
                .assign(&vox.index_axis(Axis(0), zi));
        }
        let center_mask = m
            .voxels()
            .index_axis(Axis(0), center)
            .to_owned()
            .insert_axis(Axis(0));
        out.push(SliceSequence {
            slices,
            center_mask,
            subject: subject.to_string(),
            center_index: center,
        });
    }
    Ok(out)
}

/// Dataset-flavor preprocessing chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Chest scans with nodule masks: 1 mm resampling, global histogram
    /// equalization, 64x64 crop around the lesion spanning its slices,
    /// normalization.
    Lidc,
    /// Head/neck scans with small-structure masks: 1 mm resampling,
    /// equalization, in-plane resize to 64x64 over the structure's slices,
    /// normalization.
    Pddca,
    /// Orbital scans: HU window (level 48, width 400), head localization,
    /// lateral square orbital crops, tumor-side selection, resize to 64x64,
    /// normalization.
    Orbit,
    /// Synthetic benchmark volumes: already model-sized; normalization only.
    Synth,
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recipe::Lidc => "lidc",
            Recipe::Pddca => "pddca",
            Recipe::Orbit => "orbit",
            Recipe::Synth => "synth",
        })
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lidc" => Ok(Recipe::Lidc),
            "pddca" => Ok(Recipe::Pddca),
            "orbit" => Ok(Recipe::Orbit),
            "synth" => Ok(Recipe::Synth),
            other => Err(Error::Config(format!(
                "unknown recipe `{other}` (expected lidc, pddca, orbit, or synth)"
            ))),
        }
    }
}

/// Run one subject through a recipe. The output pair is model-ready:
/// NORMALIZED stage, matching shapes, in-plane size 64x64 for the clinical
/// recipes.
pub fn apply_recipe(
    recipe: Recipe,
    v: &CtVolume,
    m: &SegmentationMask,
) -> Result<(CtVolume, SegmentationMask)> {
    if v.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} shapes differ",
            v.shape(),
            m.shape()
        )));
    }
    match recipe {
        Recipe::Lidc => {
            let vol = equalize_histogram(&resample_isotropic(v, 1.0)?)?;
            let mask = resample_mask_isotropic(m, v.spacing(), 1.0)?;
            let lesion = mask_bbox(&mask)
                .ok_or_else(|| Error::Extraction("mask has no foreground".into()))?;
            let (vol, mask) = (
                slab(&vol, lesion.z.0, lesion.z.1)?,
                slab_mask(&mask, lesion.z.0, lesion.z.1)?,
            );
            let cy = (lesion.y.0 + lesion.y.1) / 2;
            let cx = (lesion.x.0 + lesion.x.1) / 2;
            let vol = crop_center(&vol, (cy, cx), MODEL_HW)?;
            let mask = crop_center_mask(&mask, (cy, cx), MODEL_HW)?;
            Ok((normalize_intensity(&vol)?, mask))
        }
        Recipe::Pddca => {
            let vol = equalize_histogram(&resample_isotropic(v, 1.0)?)?;
            let mask = resample_mask_isotropic(m, v.spacing(), 1.0)?;
            let lesion = mask_bbox(&mask)
                .ok_or_else(|| Error::Extraction("mask has no foreground".into()))?;
            let vol = resize_slices(&slab(&vol, lesion.z.0, lesion.z.1)?, MODEL_HW)?;
            let mask = resize_mask(&slab_mask(&mask, lesion.z.0, lesion.z.1)?, MODEL_HW)?;
            Ok((normalize_intensity(&vol)?, mask))
        }
        Recipe::Orbit => {
            let vol = window_clip(v, WINDOW_LEVEL_HU, WINDOW_WIDTH_HU)?;
            let head = extract_head_voi(&vol)?;
            let (left, right) = orbital_boxes(&head)?;
            let (ml, mr) = (crop_voi_mask(m, &left)?, crop_voi_mask(m, &right)?);
            let (box_, mask) = if ml.foreground_count() >= mr.foreground_count() {
                (left, ml)
            } else {
                (right, mr)
            };
            if mask.foreground_count() == 0 {
                return Err(Error::Extraction(
                    "mask has no foreground inside either orbital crop".into(),
                ));
            }
            let vol = crop_voi(&vol, &box_)?;
            let lesion = mask_bbox(&mask).expect("foreground checked above");
            let vol = resize_slices(&slab(&vol, lesion.z.0, lesion.z.1)?, MODEL_HW)?;
            let mask = resize_mask(&slab_mask(&mask, lesion.z.0, lesion.z.1)?, MODEL_HW)?;
            Ok((normalize_intensity(&vol)?, mask))
        }
        Recipe::Synth => Ok((normalize_intensity(v)?, m.clone())),
    }
}
