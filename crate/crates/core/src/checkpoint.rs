//! JSON checkpoints carrying parameters plus the configuration they belong to.

use std::path::Path;

use serde::{Deserialize, Serialize};
use suseg_nn::ParamStore;

use crate::aggregator::{AggregatorConfig, AggregatorModel, AggregatorNet};
use crate::isnet::{IsNetConfig, IsNetModel, TrainingFingerprint};
use crate::patching::ScaleSetting;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Body {
    Isnet {
        config: IsNetConfig,
        scale: ScaleSetting,
        fingerprint: TrainingFingerprint,
        params: ParamStore<f32>,
    },
    Aggregator {
        config: AggregatorConfig,
        channel_order: Vec<ScaleSetting>,
        fingerprint: TrainingFingerprint,
        params: ParamStore<f32>,
    },
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    body: Body,
}

fn write(path: &Path, body: Body) -> Result<()> {
    let ck = Checkpoint {
        version: FORMAT_VERSION,
        body,
    };
    let json = serde_json::to_vec(&ck).expect("checkpoint serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Body> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Model(format!("{}: malformed checkpoint: {e}", path.display())))?;
    if ck.version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "{}: checkpoint version {} not supported",
            path.display(),
            ck.version
        )));
    }
    Ok(ck.body)
}

fn check_params(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    for p in params.iter() {
        if p.value.len() != p.value.shape().iter().product::<usize>() {
            return Err(Error::Model(format!(
                "{}: parameter {} is truncated",
                path.display(),
                p.name
            )));
        }
    }
    Ok(())
}

pub fn save_isnet(model: &IsNetModel, path: &Path) -> Result<()> {
    write(
        path,
        Body::Isnet {
            config: model.net.config().clone(),
            scale: model.scale,
            fingerprint: model.fingerprint,
            params: model.net.store().clone(),
        },
    )
}

/// Loads a network checkpoint. With `expected`, the stored configuration and
/// scale must match exactly.
pub fn load_isnet(path: &Path, expected: Option<(&IsNetConfig, ScaleSetting)>) -> Result<IsNetModel> {
    let Body::Isnet {
        config,
        scale,
        fingerprint,
        params,
    } = read(path)?
    else {
        return Err(Error::Model(format!(
            "{}: not a segmentation network checkpoint",
            path.display()
        )));
    };
    if let Some((cfg, sc)) = expected {
        if cfg != &config || sc != scale {
            return Err(Error::Model(format!(
                "{}: checkpoint is for {scale} with {config:?}, expected {sc} with {cfg:?}",
                path.display()
            )));
        }
    }
    check_params(path, &params)?;
    let mut model = IsNetModel::new(config, scale)?;
    model.fingerprint = fingerprint;
    model
        .net
        .store_mut()
        .load_from(&params)
        .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    Ok(model)
}

pub fn save_aggregator(model: &AggregatorModel, path: &Path) -> Result<()> {
    write(
        path,
        Body::Aggregator {
            config: model.net.config().clone(),
            channel_order: model.channel_order.clone(),
            fingerprint: model.fingerprint,
            params: model.net.store().clone(),
        },
    )
}

/// Loads an aggregator; with `expected_order`, the stored channel order must match.
pub fn load_aggregator(path: &Path, expected_order: Option<&[ScaleSetting]>) -> Result<AggregatorModel> {
    let Body::Aggregator {
        config,
        channel_order,
        fingerprint,
        params,
    } = read(path)?
    else {
        return Err(Error::Model(format!(
            "{}: not an aggregator checkpoint",
            path.display()
        )));
    };
    if let Some(order) = expected_order {
        if order != channel_order.as_slice() {
            return Err(Error::Model(format!(
                "{}: aggregator channel order {channel_order:?} differs from {order:?}",
                path.display()
            )));
        }
    }
    check_params(path, &params)?;
    let mut net = AggregatorNet::new(config)?;
    net.store_mut()
        .load_from(&params)
        .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let mut model = AggregatorModel::new(net.config().clone(), channel_order)?;
    model.net = net;
    model.fingerprint = fingerprint;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny() -> IsNetConfig {
        IsNetConfig {
            p: 16,
            base_channels: 2,
            ..IsNetConfig::default()
        }
    }

    #[test]
    fn isnet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let scale = ScaleSetting::new(64, 16).unwrap();
        let mut model = IsNetModel::new(IsNetConfig { seed: 5, ..tiny() }, scale).unwrap();
        model.fingerprint.epochs = 3;
        save_isnet(&model, &path).unwrap();
        let back = load_isnet(&path, Some((model.net.config(), scale))).unwrap();
        assert_eq!(back.fingerprint, model.fingerprint);
        for (a, b) in back.net.store().iter().zip(model.net.store().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        let w = Array3::from_shape_fn((16, 16, 16), |(x, y, z)| ((x + y + z) % 4) as f32 / 3.0);
        assert_eq!(back.net.infer(&w, &w).unwrap(), model.net.infer(&w, &w).unwrap());

        let other = ScaleSetting::new(96, 16).unwrap();
        assert!(load_isnet(&path, Some((model.net.config(), other))).is_err());
        let wider = IsNetConfig {
            base_channels: 4,
            ..tiny()
        };
        assert!(load_isnet(&path, Some((&wider, scale))).is_err());
        assert!(load_aggregator(&path, None).is_err());
    }

    #[test]
    fn aggregator_round_trip_and_order_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let order = vec![ScaleSetting::new(96, 16).unwrap(), ScaleSetting::new(64, 16).unwrap()];
        let cfg = AggregatorConfig {
            base_channels: 2,
            ..AggregatorConfig::new(2)
        };
        let model = AggregatorModel::new(cfg, order.clone()).unwrap();
        save_aggregator(&model, &path).unwrap();
        let back = load_aggregator(&path, Some(&order)).unwrap();
        assert_eq!(back.channel_order, order);
        let rev: Vec<_> = order.iter().rev().cloned().collect();
        assert!(load_aggregator(&path, Some(&rev)).is_err());
    }

    #[test]
    fn malformed_files_are_model_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{\"version\": 1, \"kind\": \"isnet\"}").unwrap();
        assert!(matches!(load_isnet(&path, None), Err(Error::Model(_))));
        assert!(matches!(
            load_isnet(&dir.path().join("none"), None),
            Err(Error::Io { .. })
        ));
    }
}
