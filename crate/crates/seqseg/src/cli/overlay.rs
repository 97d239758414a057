//! Slice overlays: grayscale anatomy, ground truth tinted blue, prediction
//! tinted red, agreement purple.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Axis;

use crate::error::{Error, Result};
use crate::volume::{CtVolume, SegmentationMask};

/// Render one axial slice as a PNG with both masks blended in.
pub fn emit_overlay(
    volume: &CtVolume,
    truth: &SegmentationMask,
    pred: &SegmentationMask,
    slice: usize,
    path: &Path,
) -> Result<()> {
    if volume.shape() != truth.shape() || volume.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "overlay needs aligned shapes, got volume {:?}, truth {:?}, prediction {:?}",
            volume.shape(),
            truth.shape(),
            pred.shape()
        )));
    }
    let (nz, ny, nx) = volume.shape();
    if slice >= nz {
        return Err(Error::Config(format!("slice {slice} out of range 0..{nz}")));
    }
    let img_slice = volume.voxels().index_axis(Axis(0), slice);
    let truth_slice = truth.voxels().index_axis(Axis(0), slice);
    let pred_slice = pred.voxels().index_axis(Axis(0), slice);

    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let g = (f64::from(img_slice[(y, x)]).clamp(0.0, 1.0) * 255.0).round() as u8;
            let boost = |c: u8| ((u16::from(c) + 255) / 2) as u8;
            let dim = g / 2;
            let (t, p) = (truth_slice[(y, x)] == 1, pred_slice[(y, x)] == 1);
            let px = match (t, p) {
                (false, false) => Rgb([g, g, g]),
                (true, false) => Rgb([dim, dim, boost(g)]),
                (false, true) => Rgb([boost(g), dim, dim]),
                (true, true) => Rgb([boost(g), dim, boost(g)]),
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("could not write overlay: {e}")))
}

/// Slice index with the most ground-truth foreground (middle slice when the
/// mask is empty), the most informative single frame for an overlay.
pub fn densest_slice(mask: &SegmentationMask) -> usize {
    let (nz, _, _) = mask.shape();
    let counts: Vec<usize> = mask
        .voxels()
        .axis_iter(Axis(0))
        .map(|s| s.iter().filter(|&&v| v == 1).count())
        .collect();
    let best = counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(i, &c)| (i, c))
        .unwrap_or((nz / 2, 0));
    if best.1 == 0 {
        nz / 2
    } else {
        best.0
    }
}
