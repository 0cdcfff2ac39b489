//! Canonical in-memory volume and NIfTI-1 reading/writing.
//!
//! Masks are stored as `uint8`, CT as `int16` HU and predictions as
//! `float32`. Data is indexed `[x, y, z]` with `z` the body axis.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Ct,
    Mask,
    Prediction,
}

/// Row-major 3x4 voxel-to-world transform (the NIfTI `srow_*` rows).
pub type Affine = [[f32; 4]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    kind: VolumeKind,
    affine: Option<Affine>,
}

impl Volume {
    /// Builds a volume after checking spacing and the value invariant of `kind`.
    pub fn new(data: Array3<f32>, spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        check_values(&data, kind)?;
        Ok(Volume {
            data,
            spacing,
            kind,
            affine: None,
        })
    }

    pub fn with_affine(mut self, affine: Option<Affine>) -> Self {
        self.affine = affine;
        self
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn affine(&self) -> Option<&Affine> {
        self.affine.as_ref()
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Same geometry, new contents and kind.
    pub fn with_data(&self, data: Array3<f32>, kind: VolumeKind) -> Result<Self> {
        Ok(Volume::new(data, self.spacing, kind)?.with_affine(self.affine))
    }

    /// Reinterprets the volume as `kind`, validating the value invariant.
    pub fn into_kind(self, kind: VolumeKind) -> Result<Self> {
        check_values(&self.data, kind)?;
        Ok(Volume { kind, ..self })
    }
}

fn check_values(data: &Array3<f32>, kind: VolumeKind) -> Result<()> {
    match kind {
        VolumeKind::Ct => {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("CT volume contains non-finite values".into()));
            }
        }
        VolumeKind::Mask => {
            if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("non-binary mask (found value {v})")));
            }
        }
        VolumeKind::Prediction => {
            if let Some(v) = data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!("prediction value {v} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

fn kind_for_datatype(t: NiftiType) -> VolumeKind {
    match t {
        NiftiType::Uint8 => VolumeKind::Mask,
        NiftiType::Float32 | NiftiType::Float64 => VolumeKind::Prediction,
        _ => VolumeKind::Ct,
    }
}

/// Reads a 3D NIfTI-1 file (`.nii` or `.nii.gz`). The kind follows the
/// stored datatype: `uint8` is a mask, floats are predictions, other integer
/// types are CT.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_impl(path.as_ref(), None)
}

/// Reads a volume and validates it as `kind` regardless of storage type.
pub fn read_volume_as(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume> {
    read_impl(path.as_ref(), Some(kind))
}

fn read_impl(path: &Path, kind: Option<VolumeKind>) -> Result<Volume> {
    let nerr = |e: nifti::NiftiError| match e {
        nifti::NiftiError::Io(source) => Error::io(path, source),
        other => Error::Nifti {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
        ));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(nerr)?;
    let header = obj.header().clone();
    let dim = header.dim().map_err(nerr)?.to_vec();
    if dim.len() != 3 {
        return Err(Error::Nifti {
            path: path.to_path_buf(),
            message: format!("non-3D image (dims {dim:?})"),
        });
    }
    let stored = header.data_type().map_err(nerr)?;
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(nerr)?;
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .as_standard_layout()
        .into_owned();
    let spacing = [1, 2, 3].map(|i| header.pixdim[i].abs() as f64);
    let affine = (header.sform_code > 0).then_some([header.srow_x, header.srow_y, header.srow_z]);
    let kind = kind.unwrap_or_else(|| kind_for_datatype(stored));
    Volume::new(arr, spacing, kind)
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
        .map(|v| v.with_affine(affine))
}

fn header_for(vol: &Volume) -> NiftiHeader {
    let [sx, sy, sz] = vol.spacing.map(|s| s as f32);
    let affine = vol
        .affine
        .unwrap_or([[sx, 0.0, 0.0, 0.0], [0.0, sy, 0.0, 0.0], [0.0, 0.0, sz, 0.0]]);
    NiftiHeader {
        pixdim: [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: 2, // millimetres
        sform_code: 1,
        srow_x: affine[0],
        srow_y: affine[1],
        srow_z: affine[2],
        ..NiftiHeader::default()
    }
}

/// Writes a volume as NIfTI-1; a `.gz` suffix selects gzip compression.
/// CT values are rounded to the nearest integer HU.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    let header = header_for(vol);
    let opts = WriterOptions::new(path).reference_header(&header);
    let res = match vol.kind {
        VolumeKind::Mask => opts.write_nifti(&vol.data.mapv(|v| v as u8)),
        VolumeKind::Ct => opts.write_nifti(
            &vol.data
                .mapv(|v| v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16),
        ),
        VolumeKind::Prediction => opts.write_nifti(&vol.data),
    };
    res.map_err(|e| match e {
        nifti::NiftiError::Io(source) => Error::io(path, source),
        other => Error::Nifti {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn rejects_invalid_spacing_and_values() {
        let data = Array3::<f32>::zeros((2, 2, 2));
        assert!(Volume::new(data.clone(), [1.0, 0.0, 1.0], VolumeKind::Ct).is_err());
        let mut m = data.clone();
        m[[0, 0, 0]] = 2.0;
        let err = Volume::new(m, [1.0; 3], VolumeKind::Mask).unwrap_err();
        assert!(err.to_string().contains("non-binary mask"));
        let mut p = data;
        p[[1, 1, 1]] = 1.5;
        assert!(Volume::new(p, [1.0; 3], VolumeKind::Prediction).is_err());
    }

    #[test]
    fn mask_and_prediction_round_trip() {
        let dir = tmp();
        let mut m = Array3::<f32>::zeros((5, 4, 3));
        m[[1, 2, 0]] = 1.0;
        m[[4, 3, 2]] = 1.0;
        let mask = Volume::new(m, [0.7, 0.8, 1.5], VolumeKind::Mask).unwrap();
        let path = dir.path().join("m.nii.gz");
        write_volume(&mask, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.kind(), VolumeKind::Mask);
        assert_eq!(back.data(), mask.data());
        for (a, b) in back.spacing().iter().zip(mask.spacing()) {
            assert!((a - b).abs() < 1e-6);
        }

        let p = Volume::new(Array3::from_elem((3, 3, 3), 0.5), [1.0; 3], VolumeKind::Prediction).unwrap();
        let path = dir.path().join("p.nii");
        write_volume(&p, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.kind(), VolumeKind::Prediction);
        assert!(back.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn reading_non_binary_as_mask_fails() {
        let dir = tmp();
        let mut d = Array3::<f32>::zeros((3, 3, 3));
        d[[0, 1, 2]] = 2.0;
        let ct = Volume::new(d, [1.0; 3], VolumeKind::Ct).unwrap();
        let path = dir.path().join("ct.nii.gz");
        write_volume(&ct, &path).unwrap();
        let err = read_volume_as(&path, VolumeKind::Mask).unwrap_err();
        assert!(err.to_string().contains("non-binary mask"), "{err}");
    }

    #[test]
    fn four_d_image_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("4d.nii");
        let header = NiftiHeader {
            pixdim: [1.0; 8],
            ..NiftiHeader::default()
        };
        WriterOptions::new(&path)
            .reference_header(&header)
            .write_nifti(&ndarray::Array4::<f32>::zeros((2, 2, 2, 2)))
            .unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("non-3D image"), "{err}");
    }

    #[test]
    fn missing_file_and_bad_parent() {
        assert!(matches!(read_volume("/nonexistent/x.nii"), Err(Error::Io { .. })));
        let v = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3], VolumeKind::Mask).unwrap();
        assert!(write_volume(&v, "/nonexistent/dir/x.nii").is_err());
    }

    #[test]
    fn affine_is_preserved() {
        let dir = tmp();
        let aff = [[-0.7, 0.0, 0.0, 10.0], [0.0, 0.7, 0.0, -5.0], [0.0, 0.0, 1.4, 3.0]];
        let v = Volume::new(Array3::zeros((2, 2, 2)), [0.7, 0.7, 1.4], VolumeKind::Ct)
            .unwrap()
            .with_affine(Some(aff));
        let path = dir.path().join("a.nii");
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap().affine(), Some(&aff));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn write_then_read_is_identity(
            dims in (1usize..6, 1usize..6, 1usize..6),
            spacing in (0.2f64..4.0, 0.2f64..4.0, 0.2f64..4.0),
            seed in any::<u64>(),
            kind in prop_oneof![Just(VolumeKind::Ct), Just(VolumeKind::Mask), Just(VolumeKind::Prediction)],
        ) {
            let n = dims.0 * dims.1 * dims.2;
            let vals: Vec<f32> = (0..n)
                .map(|i| {
                    let h = (seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_mul(0xBF58_476D_1CE4_E5B9) >> 40;
                    let u = h as f32 / (1u64 << 24) as f32;
                    match kind {
                        VolumeKind::Ct => (u * 3000.0 - 1024.0).round(),
                        VolumeKind::Mask => (u > 0.5) as u8 as f32,
                        VolumeKind::Prediction => u,
                    }
                })
                .collect();
            let data = Array3::from_shape_vec(dims, vals).unwrap();
            let v = Volume::new(data, [spacing.0, spacing.1, spacing.2], kind).unwrap();
            let dir = tmp();
            let path = dir.path().join("v.nii.gz");
            write_volume(&v, &path).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert_eq!(back.kind(), kind);
            prop_assert_eq!(back.shape(), v.shape());
            for (a, b) in back.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
            for (a, b) in back.spacing().iter().zip(v.spacing()) {
                prop_assert!((a - b).abs() <= 1e-6 * b);
            }
        }
    }
}
