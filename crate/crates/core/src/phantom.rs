//! Synthetic chest-like CT volumes with known infection masks.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preprocess::AIR_HU;
use crate::{write_volume, Error, Result, Volume, VolumeKind};

pub const BODY_HU: f32 = 40.0;
pub const LUNG_HU: f32 = -850.0;
pub const GGO_HU: (f32, f32) = (-800.0, 0.0);
pub const CONSOLIDATION_HU: (f32, f32) = (-300.0, 100.0);

const PLACEMENT_TRIES: usize = 500;
/// The soft edge is evaluated out to this many edge widths beyond the support.
const FALLOFF_WIDTHS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// mm per voxel
    pub spacing: [f64; 3],
    pub n_ggo: usize,
    pub n_consolidation: usize,
    /// Lesion semi-axis range in mm; sizes are drawn log-uniformly.
    pub lesion_radius_range: [f64; 2],
    pub seed: u64,
    pub noise_sd: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.shape.iter().any(|&n| n < 8) {
            return bad("each axis needs at least 8 voxels");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        let [lo, hi] = self.lesion_radius_range;
        let max_sp = self.spacing.iter().cloned().fold(0.0, f64::max);
        if !(lo >= max_sp && hi >= lo) {
            return bad("lesion radii must be >= 1 voxel and lo <= hi");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Ggo,
    Consolidation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in mm.
    pub radii: [f64; 3],
    pub hu: f32,
}

impl Lesion {
    fn rho(&self, p: [f64; 3], spacing: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) * spacing[a] / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Analytic volume in voxels.
    pub fn voxel_volume(&self, spacing: [f64; 3]) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>() / spacing.iter().product::<f64>()
    }
}

pub struct Phantom {
    pub ct: Volume,
    pub gt: Volume,
    pub lungs: Array3<bool>,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn voxel(idx: (usize, usize, usize)) -> [f64; 3] {
    [idx.0 as f64, idx.1 as f64, idx.2 as f64]
}

/// Index box covering `center ± reach` voxels, clipped to the grid.
fn bbox(center: [f64; 3], reach: [f64; 3], shape: [usize; 3]) -> [(usize, usize); 3] {
    [0, 1, 2].map(|a| {
        let lo = (center[a] - reach[a]).floor().max(0.0) as usize;
        let hi = ((center[a] + reach[a]).ceil() as usize + 1).min(shape[a]);
        (lo.min(hi), hi)
    })
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Builds one phantom. Lesions are placed so that their support plus soft
/// edge lies inside a lung and does not touch another lesion.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let shape = spec.shape;
    let sp = spec.spacing;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = [0, 1, 2].map(|a| shape[a] as f64);
    let mid = ext.map(|e| (e - 1.0) / 2.0);

    let body = Ellipsoid {
        center: mid,
        semi: [0.46 * ext[0], 0.36 * ext[1], 0.49 * ext[2]],
    };
    let lung_semi = [0.17 * ext[0], 0.26 * ext[1], 0.42 * ext[2]];
    let lung_ell = [-1.0, 1.0].map(|s| Ellipsoid {
        center: [mid[0] + s * 0.21 * ext[0], mid[1], mid[2]],
        semi: lung_semi,
    });

    let mut ct = Array3::from_elem(shape, AIR_HU);
    let mut lungs = Array3::from_elem(shape, false);
    for (idx, v) in ct.indexed_iter_mut() {
        let p = voxel(idx);
        if lung_ell.iter().any(|l| l.contains(p)) {
            *v = LUNG_HU;
            lungs[idx] = true;
        } else if body.contains(p) {
            *v = BODY_HU;
        }
    }

    let mut gt = Array3::<f32>::zeros(shape);
    // Voxels already claimed by a lesion's support or soft edge.
    let mut claimed = Array3::from_elem(shape, false);
    let kinds = std::iter::repeat_n(LesionKind::Ggo, spec.n_ggo)
        .chain(std::iter::repeat_n(LesionKind::Consolidation, spec.n_consolidation));
    let edge_mm = sp.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lesions = Vec::new();
    for kind in kinds {
        let (lo_hu, hi_hu) = match kind {
            LesionKind::Ggo => GGO_HU,
            LesionKind::Consolidation => CONSOLIDATION_HU,
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let base = log_uniform(&mut rng, spec.lesion_radius_range[0], spec.lesion_radius_range[1]);
            let radii =
                [0, 1, 2].map(|_| (base * rng.random_range(0.75..1.25)).max(sp.iter().cloned().fold(0.0, f64::max)));
            let l = &lung_ell[rng.random_range(0..2)];
            let center = [0, 1, 2].map(|a| l.center[a] + (rng.random::<f64>() * 2.0 - 1.0) * l.semi[a]);
            let cand = Lesion {
                kind,
                center,
                radii,
                hu: 0.0,
            };
            let reach = [0, 1, 2].map(|a| (radii[a] + FALLOFF_WIDTHS * edge_mm) / sp[a] + 1.0);
            let bb = bbox(center, reach, shape);
            let mut ok = bb.iter().all(|&(lo, hi)| lo < hi);
            let limit = 1.0 + FALLOFF_WIDTHS * edge_mm / radii.iter().cloned().fold(f64::INFINITY, f64::min);
            'scan: for x in bb[0].0..bb[0].1 {
                for y in bb[1].0..bb[1].1 {
                    for z in bb[2].0..bb[2].1 {
                        if !ok {
                            break 'scan;
                        }
                        if cand.rho([x as f64, y as f64, z as f64], sp) <= limit {
                            ok = lungs[[x, y, z]] && !claimed[[x, y, z]];
                        }
                    }
                }
            }
            // The bounding box must not be clipped by the grid either.
            ok &= (0..3).all(|a| center[a] - reach[a] >= 0.0 && center[a] + reach[a] < ext[a]);
            if ok {
                let hu = lo_hu + rng.random::<f32>() * (hi_hu - lo_hu);
                placed = Some((Lesion { hu, ..cand }, bb, limit));
                break;
            }
        }
        let (lesion, bb, limit) = placed.ok_or_else(|| {
            Error::Data(format!(
                "could not place {:?} lesion {} after {PLACEMENT_TRIES} tries; lungs too small",
                kind,
                lesions.len()
            ))
        })?;
        let rmin = lesion.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        for x in bb[0].0..bb[0].1 {
            for y in bb[1].0..bb[1].1 {
                for z in bb[2].0..bb[2].1 {
                    let rho = lesion.rho([x as f64, y as f64, z as f64], sp);
                    if rho > limit {
                        continue;
                    }
                    claimed[[x, y, z]] = true;
                    let w = if rho <= 1.0 {
                        gt[[x, y, z]] = 1.0;
                        1.0
                    } else {
                        // Approximate distance outside the support in edge widths.
                        let d = (rho - 1.0) * rmin / edge_mm;
                        2.0 / (1.0 + d.exp())
                    };
                    let v = &mut ct[[x, y, z]];
                    *v += (w as f32) * (lesion.hu - *v);
                }
            }
        }
        lesions.push(lesion);
    }

    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
        for v in ct.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    // Stored as integer HU.
    ct.mapv_inplace(|v| v.round().clamp(i16::MIN as f32, i16::MAX as f32));

    Ok(Phantom {
        ct: Volume::new(ct, sp, VolumeKind::Ct)?,
        gt: Volume::new(gt, sp, VolumeKind::Mask)?,
        lungs,
        lesions,
    })
}

/// Settings for a numbered set of phantoms; phantom `i` uses seed `seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub count: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_ggo: usize,
    pub n_consolidation: usize,
    pub lesion_radius_range: [f64; 2],
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        PhantomSetConfig {
            count: 12,
            shape: [96, 96, 96],
            spacing: [1.0, 1.0, 1.0],
            n_ggo: 3,
            n_consolidation: 2,
            lesion_radius_range: [2.0, 10.0],
            noise_sd: 20.0,
            seed: 1000,
        }
    }
}

impl PhantomSetConfig {
    pub fn spec(&self, i: usize) -> PhantomSpec {
        PhantomSpec {
            shape: self.shape,
            spacing: self.spacing,
            n_ggo: self.n_ggo,
            n_consolidation: self.n_consolidation,
            lesion_radius_range: self.lesion_radius_range,
            seed: self.seed + i as u64,
            noise_sd: self.noise_sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec(0).validate()
    }
}

/// One case of a data directory. Paths are relative to the manifest; the
/// phantom fields are absent for real scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ct: String,
    pub gt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lesions: Vec<Lesion>,
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Writes `<id>_ct.nii.gz`, `<id>_gt.nii.gz` for each phantom and a
/// `manifest.json` listing them.
pub fn write_phantom_set(cfg: &PhantomSetConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = phantom_id(i);
        let spec = cfg.spec(i);
        let ph = generate_phantom(&spec).map_err(|e| e.in_case(&id))?;
        let ct = format!("{id}_ct.nii.gz");
        let gt = format!("{id}_gt.nii.gz");
        write_volume(&ph.ct, dir.join(&ct))?;
        write_volume(&ph.gt, dir.join(&gt))?;
        entries.push(ManifestEntry {
            id,
            ct,
            gt,
            spec: Some(spec),
            lesions: ph.lesions,
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// CT/ground-truth file pairs listed in a manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(entries
        .into_iter()
        .map(|e| (e.id, dir.join(e.ct), dir.join(e.gt)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: [64, 64, 48],
            spacing: [1.0, 1.0, 1.0],
            n_ggo: 2,
            n_consolidation: 2,
            lesion_radius_range: [2.0, 6.0],
            seed,
            noise_sd: 15.0,
        }
    }

    #[test]
    fn no_lesions_means_empty_truth() {
        let ph = generate_phantom(&PhantomSpec {
            n_ggo: 0,
            n_consolidation: 0,
            ..small(1)
        })
        .unwrap();
        assert!(ph.gt.data().iter().all(|&v| v == 0.0));
        assert!(ph.lesions.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&small(3)).unwrap();
        let b = generate_phantom(&small(3)).unwrap();
        assert_eq!(a.ct.data(), b.ct.data());
        assert_eq!(a.gt.data(), b.gt.data());
        let c = generate_phantom(&small(4)).unwrap();
        assert_ne!(a.ct.data(), c.ct.data());
    }

    #[test]
    fn lesions_sit_in_lungs_with_expected_statistics() {
        for seed in 0..4 {
            let spec = small(seed);
            let ph = generate_phantom(&spec).unwrap();
            for (idx, &g) in ph.gt.data().indexed_iter() {
                if g > 0.0 {
                    assert!(ph.lungs[idx]);
                }
            }
            for l in &ph.lesions {
                let (lo, hi) = match l.kind {
                    LesionKind::Ggo => GGO_HU,
                    LesionKind::Consolidation => CONSOLIDATION_HU,
                };
                assert!(l.hu >= lo && l.hu <= hi);
                let vals: Vec<f64> = ph
                    .ct
                    .data()
                    .indexed_iter()
                    .filter(|(i, _)| l.rho(voxel(*i), spec.spacing) <= 1.0)
                    .map(|(_, &v)| v as f64)
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                // Allow for integer rounding on top of the noise term.
                let tol = 2.0 * spec.noise_sd / n.sqrt() + 0.5;
                assert!(
                    mean >= lo as f64 - tol && mean <= hi as f64 + tol,
                    "{mean} outside [{lo}, {hi}]"
                );
                assert!((mean - l.hu as f64).abs() < 4.0 * spec.noise_sd / n.sqrt() + 0.5);
                let analytic = l.voxel_volume(spec.spacing);
                assert!((n - analytic).abs() / analytic < 0.10, "{n} vs {analytic}");
            }
        }
    }

    #[test]
    fn overcrowded_lungs_fail_after_retries() {
        let spec = PhantomSpec {
            n_ggo: 200,
            lesion_radius_range: [8.0, 10.0],
            ..small(0)
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn writes_set_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomSetConfig {
            count: 2,
            shape: [48, 48, 32],
            lesion_radius_range: [1.5, 2.5],
            n_ggo: 1,
            n_consolidation: 1,
            ..PhantomSetConfig::default()
        };
        let entries = write_phantom_set(&cfg, dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        let listed = read_manifest(dir.path()).unwrap();
        assert_eq!(listed[1].0, "phantom_001");
        let ct = crate::read_volume(&listed[0].1).unwrap();
        assert_eq!(ct.kind(), VolumeKind::Ct);
        assert_eq!(ct.shape(), [48, 48, 32]);
        let gt = crate::read_volume(&listed[0].2).unwrap();
        assert_eq!(gt.kind(), VolumeKind::Mask);
    }

    #[test]
    fn manifest_without_phantom_fields() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"[{"id": "p1", "ct": "a.nii.gz", "gt": "b.nii.gz"}]"#,
        )
        .unwrap();
        let listed = read_manifest(dir.path()).unwrap();
        assert_eq!(
            listed,
            vec![(
                "p1".to_string(),
                dir.path().join("a.nii.gz"),
                dir.path().join("b.nii.gz")
            )]
        );
    }
}
