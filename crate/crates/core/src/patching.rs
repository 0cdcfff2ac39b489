//! Patch clipping for training, sliding-window tiling for prediction, and
//! reassembly of patch predictions into volumes.

use std::fmt;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::preprocess::{GridMapping, ScaledVolumePair};
use crate::{Error, Result, Volume, VolumeKind};

/// Receptive-field configuration: volumes are scaled to `v` voxels in-plane
/// and cut into cubic patches of edge `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaleSetting {
    pub v: usize,
    pub p: usize,
}

impl ScaleSetting {
    pub fn new(v: usize, p: usize) -> Result<Self> {
        let s = ScaleSetting { v, p };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 8 || !self.p.is_multiple_of(8) || self.p > self.v {
            return Err(Error::Config(format!(
                "invalid scale setting (v={}, p={}): need 8 <= p <= v and p divisible by 8",
                self.v, self.p
            )));
        }
        Ok(())
    }

    /// Canonical ensemble order: `v` descending, then `p` descending.
    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.v.cmp(&self.v).then(other.p.cmp(&self.p))
    }
}

impl fmt::Display for ScaleSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.v, self.p)
    }
}

/// Co-located WRange/NRange (and optional ground-truth) patches.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub wrange: Array3<f32>,
    pub nrange: Array3<f32>,
    pub gt: Option<Array3<f32>>,
    pub origin: [usize; 3],
    pub scale: ScaleSetting,
}

fn clip(arr: &Array3<f32>, o: [usize; 3], p: usize) -> Array3<f32> {
    arr.slice(s![o[0]..o[0] + p, o[1]..o[1] + p, o[2]..o[2] + p]).to_owned()
}

fn pad_centered(arr: &Array3<f32>, before: [usize; 3], shape: [usize; 3]) -> Array3<f32> {
    let sh = arr.shape();
    let mut out = Array3::zeros(shape);
    out.slice_mut(s![
        before[0]..before[0] + sh[0],
        before[1]..before[1] + sh[1],
        before[2]..before[2] + sh[2]
    ])
    .assign(arr);
    out
}

/// Symmetrically zero-pads any axis shorter than `p` (zero is air in both
/// windows and background in the mask), recording the padding in the mapping.
pub fn ensure_min_extent(
    mut pair: ScaledVolumePair,
    gt: Option<Array3<f32>>,
    p: usize,
) -> (ScaledVolumePair, Option<Array3<f32>>) {
    let shape = pair.shape();
    if shape.iter().all(|&n| n >= p) {
        return (pair, gt);
    }
    let target = shape.map(|n| n.max(p));
    let before = [0, 1, 2].map(|a| (target[a] - shape[a]) / 2);
    pair.wrange = pad_centered(&pair.wrange, before, target);
    pair.nrange = pad_centered(&pair.nrange, before, target);
    let gt = gt.map(|g| pad_centered(&g, before, target));
    let m = &mut pair.mapping;
    for a in 0..3 {
        m.patch_pad[a] += before[a];
    }
    m.final_shape = target;
    (pair, gt)
}

fn check_extent(shape: [usize; 3], p: usize) -> Result<()> {
    if shape.iter().any(|&n| n < p) {
        return Err(Error::Data(format!(
            "volume smaller than patch: shape {shape:?}, patch {p}"
        )));
    }
    Ok(())
}

/// Draws `n` patch origins uniformly over the valid range. With
/// `fg_ratio > 0`, that fraction of draws is instead centred on a random
/// foreground voxel from `fg` (clamped into range).
pub fn sample_origins(
    shape: [usize; 3],
    p: usize,
    n: usize,
    seed: u64,
    fg: &[[usize; 3]],
    fg_ratio: f64,
) -> Result<Vec<[usize; 3]>> {
    check_extent(shape, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = shape.map(|s| s - p);
    Ok((0..n)
        .map(|_| {
            if fg_ratio > 0.0 && !fg.is_empty() && rng.random::<f64>() < fg_ratio {
                let c = fg[rng.random_range(0..fg.len())];
                [0, 1, 2].map(|a| c[a].saturating_sub(p / 2).min(max[a]))
            } else {
                [0, 1, 2].map(|a| rng.random_range(0..=max[a]))
            }
        })
        .collect())
}

fn foreground_voxels(gt: &Array3<f32>) -> Vec<[usize; 3]> {
    gt.indexed_iter()
        .filter(|(_, &v)| v > 0.5)
        .map(|((x, y, z), _)| [x, y, z])
        .collect()
}

/// Clips `n` training patches at random positions; all three arrays share
/// each origin. Reproducible for a given seed.
pub fn sample_training_patches(
    pair: &ScaledVolumePair,
    gt: &Array3<f32>,
    scale: ScaleSetting,
    n: usize,
    seed: u64,
    fg_ratio: f64,
) -> Result<Vec<PatchSample>> {
    if n == 0 {
        return Err(Error::Config("patch count must be >= 1".into()));
    }
    let shape = pair.shape();
    if gt.shape() != shape {
        return Err(Error::Data(format!(
            "ground truth {:?} not aligned with scaled volume {shape:?}",
            gt.shape()
        )));
    }
    let fg = if fg_ratio > 0.0 {
        foreground_voxels(gt)
    } else {
        Vec::new()
    };
    let p = scale.p;
    let origins = sample_origins(shape, p, n, seed, &fg, fg_ratio)?;
    Ok(origins
        .into_iter()
        .map(|o| PatchSample {
            wrange: clip(&pair.wrange, o, p),
            nrange: clip(&pair.nrange, o, p),
            gt: Some(clip(gt, o, p)),
            origin: o,
            scale,
        })
        .collect())
}

/// Origins along one axis: every `stride`, with the last tile ending exactly
/// at the border.
pub fn axis_origins(n: usize, p: usize, stride: usize) -> Vec<usize> {
    let count = (n - p).div_ceil(stride) + 1;
    (0..count)
        .map(|k| if k + 1 == count { n - p } else { k * stride })
        .collect()
}

pub fn tile_origins(shape: [usize; 3], p: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    check_extent(shape, p)?;
    if stride == 0 || stride > p {
        return Err(Error::Config(format!("tile stride {stride} must be in [1, {p}]")));
    }
    let ax = shape.map(|n| axis_origins(n, p, stride));
    let mut out = Vec::with_capacity(ax[0].len() * ax[1].len() * ax[2].len());
    for &x in &ax[0] {
        for &y in &ax[1] {
            for &z in &ax[2] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Covers the scaled volume with (possibly overlapping) patches.
pub fn tile_volume(pair: &ScaledVolumePair, scale: ScaleSetting, stride: usize) -> Result<Vec<PatchSample>> {
    let p = scale.p;
    Ok(tile_origins(pair.shape(), p, stride)?
        .into_iter()
        .map(|o| PatchSample {
            wrange: clip(&pair.wrange, o, p),
            nrange: clip(&pair.nrange, o, p),
            gt: None,
            origin: o,
            scale,
        })
        .collect())
}

/// Overlap-averaging accumulator for patch predictions.
pub struct Reconstructor {
    sum: Array3<f64>,
    count: Array3<u32>,
}

impl Reconstructor {
    pub fn new(shape: [usize; 3]) -> Self {
        Reconstructor {
            sum: Array3::zeros(shape),
            count: Array3::zeros(shape),
        }
    }

    pub fn add(&mut self, origin: [usize; 3], pred: &Array3<f32>) -> Result<()> {
        let p = pred.shape();
        let sh = self.sum.shape();
        if (0..3).any(|a| origin[a] + p[a] > sh[a]) {
            return Err(Error::Data(format!(
                "patch at {origin:?} with shape {p:?} exceeds volume {sh:?}"
            )));
        }
        let win = s![
            origin[0]..origin[0] + p[0],
            origin[1]..origin[1] + p[1],
            origin[2]..origin[2] + p[2]
        ];
        ndarray::Zip::from(self.sum.slice_mut(win))
            .and(self.count.slice_mut(win))
            .and(pred)
            .for_each(|s, c, &v| {
                *s += v as f64;
                *c += 1;
            });
        Ok(())
    }

    /// Per-voxel mean of all contributions. Sums are kept in f64, which makes
    /// the mean of identical f32 contributions exact.
    pub fn finish(self) -> Result<Array3<f32>> {
        if let Some((idx, _)) = self.count.indexed_iter().find(|(_, &c)| c == 0) {
            return Err(Error::Data(format!("incomplete tiling: voxel {idx:?} not covered")));
        }
        Ok(ndarray::Zip::from(&self.sum)
            .and(&self.count)
            .map_collect(|&s, &c| ((s / c as f64) as f32).clamp(0.0, 1.0)))
    }
}

/// Reassembles patch predictions: each voxel is the mean of all patches
/// covering it.
pub fn reconstruct(patches: &[([usize; 3], Array3<f32>)], shape: [usize; 3]) -> Result<Array3<f32>> {
    let mut r = Reconstructor::new(shape);
    for (o, pred) in patches {
        r.add(*o, pred)?;
    }
    r.finish()
}

/// Maps a prediction on the scaled grid back to the original CT grid,
/// dropping all padding and clamping to `[0, 1]`.
pub fn to_original_grid(pred: &Array3<f32>, mapping: &GridMapping) -> Result<Volume> {
    let data = mapping.backward(pred)?.mapv(|v| v.clamp(0.0, 1.0));
    Volume::new(data, mapping.original_spacing, VolumeKind::Prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::preprocess_ct;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn pair_from(w: Array3<f32>) -> ScaledVolumePair {
        let sh = [w.shape()[0], w.shape()[1], w.shape()[2]];
        let mut mapping = GridMapping::new(sh, [1.0; 3], sh[0]).unwrap();
        mapping.scaled_shape = sh;
        mapping.final_shape = sh;
        ScaledVolumePair {
            nrange: w.mapv(|x| 1.0 - x),
            wrange: w,
            v: sh[0],
            z: sh[2],
            mapping,
        }
    }

    fn ramp(n: usize) -> Array3<f32> {
        Array3::from_shape_fn((n, n, n), |(x, y, z)| ((x * 31 + y * 17 + z * 7) % 97) as f32 / 97.0)
    }

    #[test]
    fn scale_setting_validation() {
        assert!(ScaleSetting::new(192, 32).is_ok());
        assert!(ScaleSetting::new(16, 32).is_err());
        assert!(ScaleSetting::new(64, 12).is_err());
        assert!(ScaleSetting::new(64, 0).is_err());
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_origins([64; 3], 32, 32).unwrap().len(), 8);
        assert_eq!(tile_origins([64; 3], 32, 16).unwrap().len(), 27);
        let t = tile_origins([70; 3], 32, 32).unwrap();
        assert_eq!(t.len(), 27);
        assert_eq!(axis_origins(70, 32, 32), vec![0, 32, 38]);
        assert!(tile_origins([20, 64, 64], 32, 16).is_err());
        assert!(tile_origins([64; 3], 32, 0).is_err());
    }

    #[test]
    fn disjoint_tiles_reconstruct_exactly() {
        let w = ramp(64);
        let pair = pair_from(w.clone());
        let scale = ScaleSetting::new(64, 32).unwrap();
        let tiles = tile_volume(&pair, scale, 32).unwrap();
        let preds: Vec<_> = tiles.iter().map(|t| (t.origin, t.wrange.clone())).collect();
        assert_eq!(reconstruct(&preds, [64; 3]).unwrap(), w);
    }

    #[test]
    fn overlapping_constant_predictions_average() {
        let preds = vec![
            ([0, 0, 0], Array3::from_elem((8, 8, 8), 0.2f32)),
            ([0, 0, 0], Array3::from_elem((8, 8, 8), 0.6f32)),
        ];
        let r = reconstruct(&preds, [8; 3]).unwrap();
        assert!(r.iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn uncovered_voxel_is_an_error() {
        let preds = vec![([0, 0, 0], Array3::from_elem((8, 8, 8), 0.5f32))];
        let err = reconstruct(&preds, [8, 8, 9]).unwrap_err();
        assert!(err.to_string().contains("incomplete tiling"));
    }

    #[test]
    fn half_stride_reconstruction_matches_brute_force() {
        let n = 40;
        let p = 16;
        let origins = tile_origins([n; 3], p, p / 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<_> = origins
            .iter()
            .map(|&o| (o, Array3::from_shape_fn((p, p, p), |_| rng.random::<f32>())))
            .collect();
        let got = reconstruct(&preds, [n; 3]).unwrap();
        // Oracle: per-voxel list of contributions, searched patch by patch.
        for x in (0..n).step_by(3) {
            for y in (0..n).step_by(5) {
                for z in 0..n {
                    let vals: Vec<f64> = preds
                        .iter()
                        .filter(|(o, _)| (0..3).all(|a| o[a] <= [x, y, z][a] && [x, y, z][a] < o[a] + p))
                        .map(|(o, a)| a[[x - o[0], y - o[1], z - o[2]]] as f64)
                        .collect();
                    assert!((1..=8).contains(&vals.len()));
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    assert!((got[[x, y, z]] as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_aligned() {
        let w = ramp(40);
        let pair = pair_from(w);
        let gt = Array3::zeros((40, 40, 40));
        let scale = ScaleSetting::new(40, 16).unwrap();
        let a = sample_training_patches(&pair, &gt, scale, 20, 9, 0.0).unwrap();
        let b = sample_training_patches(&pair, &gt, scale, 20, 9, 0.0).unwrap();
        assert_eq!(
            a.iter().map(|s| s.origin).collect::<Vec<_>>(),
            b.iter().map(|s| s.origin).collect::<Vec<_>>()
        );
        for s in &a {
            assert!(s.gt.as_ref().unwrap().iter().all(|&v| v == 0.0));
            let o = s.origin;
            assert_eq!(s.wrange[[1, 2, 3]], pair.wrange[[o[0] + 1, o[1] + 2, o[2] + 3]]);
            assert_eq!(s.nrange[[1, 2, 3]], pair.nrange[[o[0] + 1, o[1] + 2, o[2] + 3]]);
            assert!(o.iter().all(|&c| c + 16 <= 40));
        }
        assert!(sample_training_patches(&pair, &gt, scale, 0, 9, 0.0).is_err());
    }

    #[test]
    fn origins_are_uniform_chi_square() {
        let origins = sample_origins([192; 3], 32, 1000, 2024, &[], 0.0).unwrap();
        // 161 admissible origins per axis in 7 bins of 23.
        for a in 0..3 {
            let mut bins = [0usize; 7];
            for o in &origins {
                assert!(o[a] <= 160);
                bins[o[a] / 23] += 1;
            }
            let expected = 1000.0 / 7.0;
            let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            // chi-square critical value, 6 dof, p = 0.01
            assert!(chi2 < 16.812, "axis {a}: chi2 {chi2}");
        }
    }

    #[test]
    fn foreground_bias_hits_lesions() {
        let fg = vec![[30, 30, 30]];
        let o = sample_origins([64; 3], 16, 50, 1, &fg, 1.0).unwrap();
        assert!(o.iter().all(|&o| o == [22, 22, 22]));
    }

    #[test]
    fn thin_volumes_are_padded_to_patch() {
        let ct = Volume::new(Array3::from_elem((32, 32, 6), -900.0), [1.0; 3], VolumeKind::Ct).unwrap();
        let pair = preprocess_ct(&ct, 32).unwrap();
        assert_eq!(pair.shape(), [32, 32, 6]);
        let gt = Array3::ones((32, 32, 6));
        let (pair, gt) = ensure_min_extent(pair, Some(gt), 16);
        assert_eq!(pair.shape(), [32, 32, 16]);
        assert_eq!(pair.mapping.patch_pad, [0, 0, 5]);
        assert_eq!(gt.unwrap().sum(), (32 * 32 * 6) as f32);
        // Padding predicted as 1 never leaks back onto the original grid.
        let mut pred = Array3::from_elem((32, 32, 16), 1.0f32);
        pred.slice_mut(s![.., .., 5..11]).fill(0.25);
        let back = to_original_grid(&pred, &pair.mapping).unwrap();
        assert_eq!(back.shape(), [32, 32, 6]);
        assert!(back.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn to_original_grid_identity_and_constant() {
        let ct = Volume::new(Array3::zeros((24, 24, 16)), [1.0; 3], VolumeKind::Ct).unwrap();
        let pair = preprocess_ct(&ct, 24).unwrap();
        let pred = ramp(24).slice(s![.., .., ..16]).to_owned();
        assert_eq!(to_original_grid(&pred, &pair.mapping).unwrap().data(), &pred);

        let ct = Volume::new(Array3::zeros((30, 20, 12)), [0.8, 0.8, 2.0], VolumeKind::Ct).unwrap();
        let pair = preprocess_ct(&ct, 16).unwrap();
        let back = to_original_grid(&Array3::from_elem(pair.shape(), 0.7), &pair.mapping).unwrap();
        assert_eq!(back.shape(), [30, 20, 12]);
        assert_eq!(back.spacing(), [0.8, 0.8, 2.0]);
        assert!(back.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn down_up_round_trip_preserves_a_blob() {
        let n = 64;
        let blob = Array3::from_shape_fn((n, n, n), |(x, y, z)| {
            let r = ((x as f32 - 30.0).powi(2) / 144.0
                + (y as f32 - 34.0).powi(2) / 100.0
                + (z as f32 - 32.0).powi(2) / 196.0)
                .sqrt();
            (r < 1.0) as u8 as f32
        });
        let ct = Volume::new(blob.mapv(|b| -900.0 + 800.0 * b), [1.0; 3], VolumeKind::Ct).unwrap();
        let pair = preprocess_ct(&ct, 32).unwrap();
        let smooth = pair
            .mapping
            .forward(&blob, crate::preprocess::Interpolation::Trilinear, 0.0)
            .unwrap();
        let back = to_original_grid(&smooth, &pair.mapping).unwrap();
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&b, &p) in blob.iter().zip(back.data()) {
            let p = p > 0.5;
            match (b > 0.5, p) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let dice = 2.0 * tp / (2.0 * tp + fp + fneg);
        assert!(dice >= 0.95, "dice {dice}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tiles_cover_and_stay_in_bounds(
            nx in 16usize..50, ny in 16usize..50, nz in 16usize..50, stride in 1usize..=16,
        ) {
            let shape = [nx, ny, nz];
            let origins = tile_origins(shape, 16, stride).unwrap();
            let mut cover = Array3::<u8>::zeros(shape);
            for o in &origins {
                prop_assert!((0..3).all(|a| o[a] + 16 <= shape[a]));
                cover.slice_mut(s![o[0]..o[0] + 16, o[1]..o[1] + 16, o[2]..o[2] + 16]).fill(1);
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
        }
    }
}
