//! Isotropic resampling, uniform scaling to `v x v x z` voxels and the two
//! HU windowings that feed the dual-encoder network.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Volume, VolumeKind};

/// HU assigned to voxels created by padding a CT volume.
pub const AIR_HU: f32 = -1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeName {
    WRange,
    NRange,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRange {
    pub lo: f32,
    pub hi: f32,
    pub name: RangeName,
}

/// Wide window, covering consolidations and dense GGOs.
pub const WRANGE: NormalizationRange = NormalizationRange {
    lo: -1000.0,
    hi: 950.0,
    name: RangeName::WRange,
};

/// Narrow window, stretching faint GGOs.
pub const NRANGE: NormalizationRange = NormalizationRange {
    lo: -1000.0,
    hi: -400.0,
    name: RangeName::NRange,
};

impl NormalizationRange {
    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        ((hu - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Per-axis sampling table: output index -> (i0, i1, weight of i1).
pub(crate) type AxisTable = Vec<(usize, usize, f32)>;

/// Table for the affine map `src = (o + 0.5) * ratio - 0.5 + offset`,
/// clamped to `[lo, hi]`.
pub(crate) fn axis_table(
    out_len: usize,
    ratio: f64,
    offset: f64,
    lo: usize,
    hi: usize,
    interp: Interpolation,
) -> AxisTable {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5 + offset).clamp(lo as f64, hi as f64);
            match interp {
                Interpolation::Nearest => {
                    let i = (src + 0.5).floor().min(hi as f64) as usize;
                    (i, i, 0.0)
                }
                Interpolation::Trilinear => {
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(hi);
                    (i0, i1, (src - i0 as f64) as f32)
                }
            }
        })
        .collect()
}

pub(crate) fn resample_axis(arr: &Array3<f32>, axis: usize, table: &AxisTable) -> Array3<f32> {
    let mut shape = [arr.shape()[0], arr.shape()[1], arr.shape()[2]];
    shape[axis] = table.len();
    let mut out = Array3::<f32>::zeros(shape);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(arr.lanes(Axis(axis)))
        .for_each(|mut dst, src| {
            for (d, &(i0, i1, t)) in dst.iter_mut().zip(table) {
                *d = if t == 0.0 {
                    src[i0]
                } else {
                    (1.0 - t) * src[i0] + t * src[i1]
                };
            }
        });
    out
}

fn resample_axis_padded(
    arr: &Array3<f32>,
    axis: usize,
    table: &[Option<(usize, usize, f32)>],
    pad_value: f32,
) -> Array3<f32> {
    let mut shape = [arr.shape()[0], arr.shape()[1], arr.shape()[2]];
    shape[axis] = table.len();
    let mut out = Array3::<f32>::zeros(shape);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(arr.lanes(Axis(axis)))
        .for_each(|mut dst, src| {
            for (d, entry) in dst.iter_mut().zip(table) {
                *d = match *entry {
                    None => pad_value,
                    Some((i0, _, t)) if t == 0.0 => src[i0],
                    Some((i0, i1, t)) => (1.0 - t) * src[i0] + t * src[i1],
                };
            }
        });
    out
}

/// Resamples to `shape` by stretching each axis over the same extent.
pub fn resample_to_shape(arr: &Array3<f32>, shape: [usize; 3], interp: Interpolation) -> Array3<f32> {
    let mut cur = arr.clone();
    for axis in 0..3 {
        let n = cur.shape()[axis];
        if n == shape[axis] {
            continue;
        }
        let table = axis_table(shape[axis], n as f64 / shape[axis] as f64, 0.0, 0, n - 1, interp);
        cur = resample_axis(&cur, axis, &table);
    }
    cur
}

fn iso_shape(shape: [usize; 3], spacing: [f64; 3]) -> ([usize; 3], f64) {
    let s = spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let shape = [0, 1, 2].map(|a| ((shape[a] as f64 * spacing[a] / s).round() as usize).max(1));
    (shape, s)
}

/// Resamples to isotropic spacing equal to the finest input spacing.
pub fn resample_isotropic(vol: &Volume, interp: Interpolation) -> Result<Volume> {
    let (shape, s) = iso_shape(vol.shape(), vol.spacing());
    let data = resample_to_shape(vol.data(), shape, interp);
    Volume::new(data, [s; 3], vol.kind())
}

/// How a volume was carried from its original grid to the scaled patch grid.
/// Everything needed to map predictions back is recorded here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMapping {
    pub original_shape: [usize; 3],
    pub original_spacing: [f64; 3],
    pub iso_shape: [usize; 3],
    pub iso_spacing: f64,
    /// Symmetric in-plane padding applied on the isotropic grid.
    pub inplane_pad: [usize; 3],
    pub padded_shape: [usize; 3],
    pub scaled_shape: [usize; 3],
    /// Padding added on the scaled grid so every axis holds a full patch.
    pub patch_pad: [usize; 3],
    pub final_shape: [usize; 3],
}

impl GridMapping {
    pub fn new(original_shape: [usize; 3], original_spacing: [f64; 3], v: usize) -> Result<Self> {
        if v < 8 {
            return Err(Error::Data(format!("v = {v} is degenerate (must be >= 8)")));
        }
        let (iso, s) = iso_shape(original_shape, original_spacing);
        let m = iso[0].max(iso[1]);
        let inplane_pad = [(m - iso[0]) / 2, (m - iso[1]) / 2, 0];
        let padded = [m, m, iso[2]];
        let z = ((iso[2] as f64 * v as f64 / m as f64).round() as usize).max(1);
        let scaled = [v, v, z];
        Ok(GridMapping {
            original_shape,
            original_spacing,
            iso_shape: iso,
            iso_spacing: s,
            inplane_pad,
            padded_shape: padded,
            scaled_shape: scaled,
            patch_pad: [0; 3],
            final_shape: scaled,
        })
    }

    /// Isotropic voxels to scaled voxels.
    pub fn scale_factor(&self) -> f64 {
        self.scaled_shape[0] as f64 / self.padded_shape[0] as f64
    }

    pub fn scaled_spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.iso_spacing * self.padded_shape[a] as f64 / self.scaled_shape[a] as f64)
    }

    /// Carries an array on the original grid to the final scaled grid. The
    /// isotropic, padding and scaling steps are composed into one lookup per
    /// axis so that nearest-neighbour masks are rounded only once.
    pub fn forward(&self, data: &Array3<f32>, interp: Interpolation, pad_value: f32) -> Result<Array3<f32>> {
        let shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
        if shape != self.original_shape {
            return Err(Error::Data(format!(
                "volume shape {shape:?} does not match mapping {:?}",
                self.original_shape
            )));
        }
        let mut cur = data.clone();
        for a in 0..3 {
            let r_iso = self.iso_shape[a] as f64 / self.original_shape[a] as f64;
            let r_scale = self.scaled_shape[a] as f64 / self.padded_shape[a] as f64;
            let n = self.original_shape[a];
            let table: Vec<Option<(usize, usize, f32)>> = (0..self.final_shape[a])
                .map(|f| {
                    let s = f as f64 - self.patch_pad[a] as f64;
                    if s < 0.0 || s >= self.scaled_shape[a] as f64 {
                        return None;
                    }
                    let iso = (s + 0.5) / r_scale - 0.5 - self.inplane_pad[a] as f64;
                    if iso < -0.5 || iso >= self.iso_shape[a] as f64 - 0.5 {
                        return None;
                    }
                    let o = (iso + 0.5) / r_iso - 0.5;
                    Some(axis_table(1, 1.0, o, 0, n - 1, interp)[0])
                })
                .collect();
            cur = resample_axis_padded(&cur, a, &table, pad_value);
        }
        Ok(cur)
    }

    /// Samples an array on the final scaled grid back at the original voxel
    /// centres, with one trilinear lookup per voxel. Patch padding is never
    /// sampled.
    pub fn backward(&self, data: &Array3<f32>) -> Result<Array3<f32>> {
        let shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
        if shape != self.final_shape {
            return Err(Error::Data(format!(
                "prediction shape {shape:?} does not match scaled grid {:?}",
                self.final_shape
            )));
        }
        let mut cur = data.clone();
        for a in 0..3 {
            let r_iso = self.iso_shape[a] as f64 / self.original_shape[a] as f64;
            let r_scale = self.scaled_shape[a] as f64 / self.padded_shape[a] as f64;
            // orig -> iso -> padded -> scaled, composed into one affine map.
            let ratio = r_iso * r_scale;
            let offset = self.inplane_pad[a] as f64 * r_scale + self.patch_pad[a] as f64;
            let lo = self.patch_pad[a];
            let hi = self.patch_pad[a] + self.scaled_shape[a] - 1;
            let table = axis_table(self.original_shape[a], ratio, offset, lo, hi, Interpolation::Trilinear);
            cur = resample_axis(&cur, a, &table);
        }
        Ok(cur)
    }
}

fn pad_value(kind: VolumeKind) -> f32 {
    match kind {
        VolumeKind::Ct => AIR_HU,
        _ => 0.0,
    }
}

/// Scales an isotropic volume to `(v, v, round(Z * v / X))`, padding the
/// smaller in-plane axis symmetrically first (with air for CT).
pub fn scale_to_v(vol: &Volume, v: usize) -> Result<Volume> {
    let sp = vol.spacing();
    if (sp[0] - sp[1]).abs() > 1e-9 * sp[0] || (sp[0] - sp[2]).abs() > 1e-9 * sp[0] {
        return Err(Error::Data(format!(
            "scale_to_v needs an isotropic volume, got spacing {sp:?}"
        )));
    }
    let map = GridMapping::new(vol.shape(), sp, v)?;
    let interp = match vol.kind() {
        VolumeKind::Mask => Interpolation::Nearest,
        _ => Interpolation::Trilinear,
    };
    let data = map.forward(vol.data(), interp, pad_value(vol.kind()))?;
    Volume::new(data, map.scaled_spacing(), vol.kind())
}

/// Clamped linear windowing of a CT volume into `[0, 1]`.
pub fn normalize(vol: &Volume, range: NormalizationRange) -> Result<Volume> {
    if vol.kind() != VolumeKind::Ct {
        return Err(Error::Data(format!(
            "normalize expects a CT volume, got {:?}",
            vol.kind()
        )));
    }
    vol.with_data(vol.data().mapv(|hu| range.apply(hu)), VolumeKind::Prediction)
}

/// Both normalized views of a CT volume on the scaled patch grid.
#[derive(Clone, Debug)]
pub struct ScaledVolumePair {
    pub wrange: Array3<f32>,
    pub nrange: Array3<f32>,
    pub v: usize,
    pub z: usize,
    pub mapping: GridMapping,
}

impl ScaledVolumePair {
    pub fn shape(&self) -> [usize; 3] {
        self.mapping.final_shape
    }

    pub fn scale_factor(&self) -> f64 {
        self.mapping.scale_factor()
    }
}

/// Isotropic trilinear resampling, scaling to `v`, then WRange and NRange
/// normalization.
pub fn preprocess_ct(vol: &Volume, v: usize) -> Result<ScaledVolumePair> {
    if vol.kind() != VolumeKind::Ct {
        return Err(Error::Data(format!("preprocess_ct expects CT, got {:?}", vol.kind())));
    }
    let mapping = GridMapping::new(vol.shape(), vol.spacing(), v)?;
    let scaled = mapping.forward(vol.data(), Interpolation::Trilinear, AIR_HU)?;
    Ok(ScaledVolumePair {
        wrange: scaled.mapv(|hu| WRANGE.apply(hu)),
        nrange: scaled.mapv(|hu| NRANGE.apply(hu)),
        v,
        z: mapping.scaled_shape[2],
        mapping,
    })
}

/// Carries a ground-truth mask through the same geometry with nearest
/// neighbour sampling.
pub fn preprocess_mask(gt: &Volume, mapping: &GridMapping) -> Result<Array3<f32>> {
    if gt.kind() != VolumeKind::Mask {
        return Err(Error::Data(format!("expected a mask, got {:?}", gt.kind())));
    }
    mapping.forward(gt.data(), Interpolation::Nearest, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn ct(data: Array3<f32>, spacing: [f64; 3]) -> Volume {
        Volume::new(data, spacing, VolumeKind::Ct).unwrap()
    }

    #[test]
    fn normalization_endpoints_and_midpoints() {
        assert_eq!(WRANGE.apply(-1000.0), 0.0);
        assert_eq!(WRANGE.apply(950.0), 1.0);
        assert_eq!(WRANGE.apply(-25.0), 0.5);
        assert_eq!(NRANGE.apply(-700.0), 0.5);
        assert_eq!(NRANGE.apply(-200.0), 1.0);
        assert_eq!(NRANGE.apply(-1500.0), 0.0);
    }

    #[test]
    fn normalize_requires_ct() {
        let m = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3], VolumeKind::Mask).unwrap();
        assert!(normalize(&m, WRANGE).is_err());
        let c = ct(Array3::from_elem((2, 2, 2), -25.0), [1.0; 3]);
        let n = normalize(&c, WRANGE).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn anisotropic_volume_becomes_isotropic() {
        let v = ct(Array3::zeros((100, 100, 50)), [0.7, 0.7, 1.4]);
        let iso = resample_isotropic(&v, Interpolation::Trilinear).unwrap();
        assert_eq!(iso.shape(), [100, 100, 100]);
        assert_eq!(iso.spacing(), [0.7; 3]);
    }

    #[test]
    fn isotropic_input_is_unchanged() {
        let data = Array3::from_shape_fn((5, 6, 7), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        let v = ct(data.clone(), [1.2; 3]);
        let iso = resample_isotropic(&v, Interpolation::Trilinear).unwrap();
        assert_eq!(iso.data(), &data);
    }

    #[test]
    fn nearest_keeps_masks_binary() {
        let data = Array3::from_shape_fn((9, 9, 4), |(x, y, z)| ((x + y + z) % 3 == 0) as u8 as f32);
        let m = Volume::new(data, [0.5, 0.5, 1.3], VolumeKind::Mask).unwrap();
        let iso = resample_isotropic(&m, Interpolation::Nearest).unwrap();
        assert!(iso.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let scaled = scale_to_v(&iso, 16).unwrap();
        assert_eq!(scaled.kind(), VolumeKind::Mask);
    }

    #[test]
    fn scale_to_v_shapes() {
        let v = ct(Array3::zeros((100, 100, 100)), [1.0; 3]);
        assert_eq!(scale_to_v(&v, 192).unwrap().shape(), [192, 192, 192]);
        let data = Array3::from_shape_fn((128, 128, 64), |(x, y, z)| (x + 2 * y + 3 * z) as f32);
        let v = ct(data.clone(), [1.0; 3]);
        let s = scale_to_v(&v, 128).unwrap();
        assert_eq!(s.shape(), [128, 128, 64]);
        assert_eq!(s.data(), &data);
        assert!(scale_to_v(&v, 7).is_err());
    }

    #[test]
    fn non_square_input_is_padded_then_scaled_ramp_oracle() {
        // Ramp along x; the padded axis is y, so values only depend on x.
        let data = Array3::from_shape_fn((120, 100, 80), |(x, _, _)| x as f32);
        let v = ct(data, [1.0; 3]);
        let s = scale_to_v(&v, 96).unwrap();
        assert_eq!(s.shape(), [96, 96, 64]);
        // Independent oracle: half-pixel source coordinate of a uniform 0.8 scaling.
        for i in 0..96 {
            let want = ((i as f64 + 0.5) / 0.8 - 0.5).clamp(0.0, 119.0);
            let got = s.data()[[i, 48, 32]] as f64;
            assert!((got - want).abs() < 1e-3, "x={i}: {got} vs {want}");
        }
        // Padding along y is air.
        let border = s.data()[[10, 0, 10]];
        assert_eq!(border, AIR_HU);
    }

    #[test]
    fn constant_air_normalizes_to_zero() {
        let v = ct(Array3::from_elem((20, 20, 10), -1000.0), [1.0, 1.0, 2.0]);
        let p = preprocess_ct(&v, 16).unwrap();
        assert!(p.wrange.iter().all(|&x| x == 0.0));
        assert!(p.nrange.iter().all(|&x| x == 0.0));
        assert_eq!(p.shape(), [16, 16, 16]);
    }

    #[test]
    fn blob_values_in_both_windows() {
        let mut data = Array3::from_elem((32, 32, 32), -850.0f32);
        for x in 10..22 {
            for y in 10..22 {
                for z in 10..22 {
                    data[[x, y, z]] = -700.0;
                }
            }
        }
        let p = preprocess_ct(&ct(data, [1.0; 3]), 32).unwrap();
        let w = p.wrange[[16, 16, 16]];
        let n = p.nrange[[16, 16, 16]];
        assert!((w - 300.0 / 1950.0).abs() < 1e-6, "{w}");
        assert!((n - 0.5).abs() < 1e-6, "{n}");
    }

    #[test]
    fn coarse_and_fine_scales_commute() {
        let data = Array3::from_shape_fn((48, 48, 48), |(x, y, z)| {
            let r = ((x as f32 - 24.0).powi(2) + (y as f32 - 20.0).powi(2) + (z as f32 - 26.0).powi(2)).sqrt();
            -1000.0 + 500.0 * (-r / 10.0).exp()
        });
        let v = ct(data, [2.0; 3]);
        let fine = preprocess_ct(&v, 96).unwrap();
        let coarse = preprocess_ct(&v, 48).unwrap();
        let down = resample_to_shape(&fine.nrange, [48, 48, 48], Interpolation::Trilinear);
        let mad = (&down - &coarse.nrange).mapv(f32::abs).mean().unwrap();
        assert!(mad < 0.05, "mean abs diff {mad}");
    }

    #[test]
    fn mask_follows_ct_geometry() {
        let v = ct(Array3::zeros((30, 20, 10)), [1.0, 1.0, 2.0]);
        let p = preprocess_ct(&v, 16).unwrap();
        let gt = Volume::new(Array3::ones((30, 20, 10)), [1.0, 1.0, 2.0], VolumeKind::Mask).unwrap();
        let g = preprocess_mask(&gt, &p.mapping).unwrap();
        assert_eq!([g.shape()[0], g.shape()[1], g.shape()[2]], p.shape());
        assert!(g.iter().all(|&x| x == 0.0 || x == 1.0));
        let wrong = Volume::new(Array3::ones((3, 3, 3)), [1.0; 3], VolumeKind::Mask).unwrap();
        assert!(preprocess_mask(&wrong, &p.mapping).is_err());
    }

    #[test]
    fn backward_inverts_identity_mapping() {
        let data = Array3::from_shape_fn((16, 16, 12), |(x, y, z)| ((x * 7 + y * 3 + z) % 10) as f32 / 10.0);
        let m = GridMapping::new([16, 16, 12], [1.0; 3], 16).unwrap();
        assert_eq!(m.backward(&data).unwrap(), data);
    }

    proptest! {
        #[test]
        fn windows_are_clamped_and_monotone(mut hus in proptest::collection::vec(-3000.0f32..3000.0, 2..50)) {
            hus.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for r in [WRANGE, NRANGE] {
                let out: Vec<f32> = hus.iter().map(|&h| r.apply(h)).collect();
                for w in out.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
                prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
