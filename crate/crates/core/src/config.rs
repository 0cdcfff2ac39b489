//! Experiment configuration: a TOML tree with two built-in profiles and
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::isnet::IsNetConfig;
use crate::patching::ScaleSetting;
use crate::phantom::PhantomSetConfig;
use crate::{Error, Result};

/// Architecture knobs shared by every scale; the patch size comes from the
/// scale setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsNetArch {
    pub levels: usize,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub use_multi_encoder: bool,
    pub use_deep_supervision: bool,
}

impl IsNetArch {
    pub fn for_scale(&self, scale: ScaleSetting, seed: u64) -> IsNetConfig {
        IsNetConfig {
            p: scale.p,
            levels: self.levels,
            base_channels: self.base_channels,
            dilation_rates: self.dilation_rates.clone(),
            use_multi_encoder: self.use_multi_encoder,
            use_deep_supervision: self.use_deep_supervision,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsNetTrain {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patches_per_volume: usize,
    /// Fraction of training patches centred on a lesion voxel; 0 is uniform.
    pub foreground_ratio: f64,
    /// Tiling stride at prediction time; 0 means p/2.
    pub predict_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorArch {
    pub levels: usize,
    pub base_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorTrain {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub folds: usize,
    /// Binarization threshold for final masks.
    pub threshold: f32,
    pub scale_settings: Vec<ScaleSetting>,
    pub isnet: IsNetArch,
    pub isnet_train: IsNetTrain,
    pub aggregator: AggregatorArch,
    pub aggregator_train: AggregatorTrain,
    pub phantoms: PhantomSetConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or paper)"
            ))),
        }
    }
}

fn scales(list: &[(usize, usize)]) -> Vec<ScaleSetting> {
    list.iter().map(|&(v, p)| ScaleSetting { v, p }).collect()
}

impl ExperimentConfig {
    /// CPU-sized defaults: three scales, small networks, tuned learning rate.
    pub fn desk() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seed: 0,
            folds: 3,
            threshold: 0.5,
            scale_settings: scales(&[(192, 32), (128, 32), (96, 16)]),
            isnet: IsNetArch {
                levels: 3,
                base_channels: 8,
                dilation_rates: vec![1, 2, 4],
                use_multi_encoder: true,
                use_deep_supervision: true,
            },
            isnet_train: IsNetTrain {
                batch_size: 4,
                learning_rate: 1e-3,
                epochs: 30,
                patches_per_volume: 16,
                foreground_ratio: 0.2,
                predict_stride: 0,
            },
            aggregator: AggregatorArch {
                levels: 3,
                base_channels: 8,
            },
            aggregator_train: AggregatorTrain {
                batch_size: 16,
                learning_rate: 1e-3,
                epochs: 5,
            },
            phantoms: PhantomSetConfig::default(),
        }
    }

    /// Full-size settings: eleven scales and the published training schedule.
    pub fn paper() -> Self {
        ExperimentConfig {
            name: "paper".into(),
            scale_settings: scales(&[
                (256, 32),
                (256, 64),
                (224, 32),
                (224, 64),
                (192, 32),
                (192, 64),
                (160, 32),
                (160, 64),
                (128, 32),
                (128, 64),
                (96, 32),
            ]),
            isnet: IsNetArch {
                base_channels: 16,
                ..Self::desk().isnet
            },
            isnet_train: IsNetTrain {
                batch_size: 16,
                learning_rate: 1e-5,
                epochs: 40,
                patches_per_volume: 32,
                foreground_ratio: 0.0,
                predict_stride: 0,
            },
            aggregator: AggregatorArch {
                levels: 3,
                base_channels: 16,
            },
            aggregator_train: AggregatorTrain {
                batch_size: 4,
                learning_rate: 1e-3,
                epochs: 5,
            },
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Profile defaults, then the file (if any), then `key=value` overrides.
    pub fn load(profile: Profile, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut tree, toml::Value::Table(file), "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.scale_settings.is_empty() {
            return Err(Error::Config("at least one scale setting is required".into()));
        }
        for (i, s) in self.scale_settings.iter().enumerate() {
            s.validate()?;
            if self.scale_settings[..i].contains(s) {
                return Err(Error::Config(format!("duplicate scale setting {s}")));
            }
            self.isnet.for_scale(*s, 0).validate()?;
        }
        let t = &self.isnet_train;
        if t.batch_size == 0 || t.patches_per_volume == 0 || t.learning_rate <= 0.0 {
            return Err(Error::Config(
                "isnet_train needs positive batch size, patch count and learning rate".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.foreground_ratio) {
            return Err(Error::Config("foreground_ratio must lie in [0, 1]".into()));
        }
        let a = &self.aggregator_train;
        if a.batch_size == 0 || a.learning_rate <= 0.0 {
            return Err(Error::Config(
                "aggregator_train needs positive batch size and learning rate".into(),
            ));
        }
        if self.aggregator.levels == 0 || self.aggregator.base_channels == 0 {
            return Err(Error::Config("aggregator needs >= 1 level and channel".into()));
        }
        self.phantoms.validate()?;
        Ok(())
    }

    /// Scale settings in canonical channel order.
    pub fn canonical_scales(&self) -> Vec<ScaleSetting> {
        let mut s = self.scale_settings.clone();
        s.sort_by(ScaleSetting::canonical_cmp);
        s
    }

    pub fn predict_stride(&self, scale: ScaleSetting) -> usize {
        match self.isnet_train.predict_stride {
            0 => (scale.p / 2).max(1),
            s => s,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlays `src` onto `dst`; every key in `src` must already exist in `dst`.
fn merge(dst: &mut toml::Value, src: toml::Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn apply_override(tree: &mut toml::Value, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Values use TOML syntax; a bare word falls back to a string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        ExperimentConfig::desk().validate().unwrap();
        let p = ExperimentConfig::paper();
        p.validate().unwrap();
        assert_eq!(p.scale_settings.len(), 11);
        assert_eq!(
            (
                p.isnet_train.batch_size,
                p.isnet_train.learning_rate,
                p.isnet_train.epochs
            ),
            (16, 1e-5, 40)
        );
        assert_eq!(
            (
                p.aggregator_train.batch_size,
                p.aggregator_train.learning_rate,
                p.aggregator_train.epochs
            ),
            (4, 1e-3, 5)
        );
        let c = p.canonical_scales();
        assert_eq!(c[0], ScaleSetting { v: 256, p: 64 });
        assert_eq!(c[10], ScaleSetting { v: 96, p: 32 });
    }

    #[test]
    fn overrides_and_files() {
        let cfg = ExperimentConfig::load(
            Profile::Desk,
            None,
            &[
                "isnet_train.epochs=3".into(),
                "name=run1".into(),
                "scale_settings=[{v=64,p=16}]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.isnet_train.epochs, 3);
        assert_eq!(cfg.name, "run1");
        assert_eq!(cfg.scale_settings, vec![ScaleSetting { v: 64, p: 16 }]);

        for bad in [
            "isnet_train.epoch=3",
            "nope=1",
            "folds",
            "folds=1",
            "isnet_train.epochs=\"x\"",
        ] {
            let e = ExperimentConfig::load(Profile::Desk, None, &[bad.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 9\n[isnet]\nbase_channels = 4\n").unwrap();
        let cfg = ExperimentConfig::load(Profile::Desk, Some(&path), &["seed=11".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.isnet.base_channels), (11, 4));
        std::fs::write(&path, "[isnet]\nwidth = 4\n").unwrap();
        assert!(ExperimentConfig::load(Profile::Desk, Some(&path), &[]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::paper();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn duplicate_scales_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.scale_settings.push(cfg.scale_settings[0]);
        assert!(cfg.validate().is_err());
    }
}
