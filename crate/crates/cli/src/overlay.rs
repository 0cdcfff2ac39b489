//! Axial-slice overlays: thresholded prediction contour drawn over the CT.

use std::path::Path;

use image::{Rgb, RgbImage};
use suseg::preprocess::NormalizationRange;
use suseg::{Error, Volume};

const MAX_SLICES: usize = 8;
const CONTOUR: Rgb<u8> = Rgb([255, 40, 40]);

/// Up to `MAX_SLICES` slices, evenly picked among those with predicted
/// foreground; the middle slice if there is none.
pub fn pick_slices(mask_counts: &[usize]) -> Vec<usize> {
    let hits: Vec<usize> = (0..mask_counts.len()).filter(|&k| mask_counts[k] > 0).collect();
    if hits.is_empty() {
        return vec![mask_counts.len() / 2];
    }
    if hits.len() <= MAX_SLICES {
        return hits;
    }
    (0..MAX_SLICES)
        .map(|i| hits[i * (hits.len() - 1) / (MAX_SLICES - 1)])
        .collect()
}

pub fn render_slice(ct: &Volume, pred: &Volume, threshold: f32, window: NormalizationRange, k: usize) -> RgbImage {
    let (c, p) = (ct.data(), pred.data());
    let [x, y, _] = ct.shape();
    let inside = |i: usize, j: usize| p[[i, j, k]] > threshold;
    let mut img = RgbImage::new(x as u32, y as u32);
    for j in 0..y {
        for i in 0..x {
            let edge = inside(i, j)
                && (i == 0
                    || j == 0
                    || i + 1 == x
                    || j + 1 == y
                    || !inside(i - 1, j)
                    || !inside(i + 1, j)
                    || !inside(i, j - 1)
                    || !inside(i, j + 1));
            let px = if edge {
                CONTOUR
            } else {
                let g = (window.apply(c[[i, j, k]]) * 255.0).round() as u8;
                Rgb([g, g, g])
            };
            img.put_pixel(i as u32, j as u32, px);
        }
    }
    img
}

/// Writes `<id>_z<k>.ppm` files into `dir`.
pub fn write_overlays(
    ct: &Volume,
    pred: &Volume,
    threshold: f32,
    window: NormalizationRange,
    dir: &Path,
    id: &str,
) -> suseg::Result<()> {
    if ct.shape() != pred.shape() {
        return Err(Error::Data(format!(
            "ct {:?} and prediction {:?} differ in shape",
            ct.shape(),
            pred.shape()
        )));
    }
    let z = ct.shape()[2];
    let counts: Vec<usize> = (0..z)
        .map(|k| {
            pred.data()
                .index_axis(ndarray::Axis(2), k)
                .iter()
                .filter(|&&v| v > threshold)
                .count()
        })
        .collect();
    for k in pick_slices(&counts) {
        let path = dir.join(format!("{id}_z{k:03}.ppm"));
        render_slice(ct, pred, threshold, window, k)
            .save(&path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: std::io::Error::other(e),
            })?;
    }
    Ok(())
}
