//! Supervised training of scale-specific networks.

use std::path::Path;

use log::{debug, info};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use suseg_nn::{Adam, Float, Gradients, Graph, Tensor};

use crate::config::ExperimentConfig;
use crate::isnet::{patch_tensor, IsNet, IsNetModel, TrainingFingerprint};
use crate::losses::isnet_loss;
use crate::patching::{ensure_min_extent, sample_training_patches, PatchSample, ScaleSetting};
use crate::preprocess::{preprocess_ct, preprocess_mask, ScaledVolumePair};
use crate::{read_volume_as, Error, Result, Volume, VolumeKind};

/// A CT volume with its infection mask.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub ct: Volume,
    pub gt: Volume,
}

impl Case {
    pub fn load(id: &str, ct: &Path, gt: &Path) -> Result<Self> {
        let load = || -> Result<Case> {
            let ct = read_volume_as(ct, VolumeKind::Ct)?;
            let gt = read_volume_as(gt, VolumeKind::Mask)?;
            if ct.shape() != gt.shape() {
                return Err(Error::Data(format!(
                    "ct {:?} and mask {:?} differ in shape",
                    ct.shape(),
                    gt.shape()
                )));
            }
            Ok(Case {
                id: id.to_string(),
                ct,
                gt,
            })
        };
        load().map_err(|e| e.in_case(id))
    }
}

/// Mixes a base seed with a path of indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base;
    for &p in path {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// A case resampled onto one scale's grid.
pub struct ScaledCase {
    pub id: String,
    pub pair: ScaledVolumePair,
    pub gt: Array3<f32>,
}

pub fn scale_case(case: &Case, scale: ScaleSetting) -> Result<ScaledCase> {
    let go = || -> Result<ScaledCase> {
        let pair = preprocess_ct(&case.ct, scale.v)?;
        let gt = preprocess_mask(&case.gt, &pair.mapping)?;
        let (pair, gt) = ensure_min_extent(pair, Some(gt), scale.p);
        Ok(ScaledCase {
            id: case.id.clone(),
            pair,
            gt: gt.expect("mask passed through"),
        })
    };
    go().map_err(|e| e.in_case(&case.id))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// `(case id, origin)` of every training patch, in sampling order.
    pub patch_origins: Vec<(String, [usize; 3])>,
}

/// Joint loss of a minibatch and its gradient, applied to the parameters of
/// every per-sample graph. Returns the loss value.
pub fn isnet_batch_step<T: Float>(net: &IsNet<T>, batch: &[&PatchSample], grads: &mut Gradients<T>) -> Result<f64> {
    let me = net.config().use_multi_encoder;
    let mut runs = Vec::with_capacity(batch.len());
    for s in batch {
        let mut g = Graph::new(net.store());
        let w = g.input(patch_tensor(&s.wrange));
        let n = me.then(|| g.input(patch_tensor(&s.nrange)));
        let out = net.forward(&mut g, w, n)?;
        runs.push((g, out));
    }
    let n_sub = runs.first().map_or(0, |(_, o)| o.subs.len());
    let mut main = Vec::new();
    let mut subs = vec![Vec::new(); n_sub];
    let mut gt = Vec::new();
    for ((g, out), s) in runs.iter().zip(batch) {
        main.extend_from_slice(g.value(out.main).data());
        for (k, v) in out.subs.iter().enumerate() {
            subs[k].extend_from_slice(g.value(*v).data());
        }
        let truth =
            s.gt.as_ref()
                .ok_or_else(|| Error::Data("training patch without ground truth".into()))?;
        gt.extend(truth.iter().map(|&v| T::from_f64(v as f64)));
    }
    let sub_refs: Vec<&[T]> = subs.iter().map(|v| v.as_slice()).collect();
    let loss = isnet_loss(&main, &sub_refs, &gt)?;
    let (mut off, mut ok) = (0, true);
    for (g, out) in &runs {
        let shape = g.value(out.main).shape().to_vec();
        let len = g.value(out.main).len();
        let slice = |v: &[T]| Tensor::from_vec(&shape, v[off..off + len].to_vec());
        let mut seeds = vec![(out.main, slice(&loss.main_grad)?)];
        for (k, v) in out.subs.iter().enumerate() {
            seeds.push((*v, slice(&loss.sub_grads[k])?));
        }
        g.backward(seeds, grads)?;
        off += len;
        ok &= grads.is_finite();
    }
    if !ok {
        return Err(Error::Model("non-finite gradient".into()));
    }
    Ok(loss.value.as_f64())
}

/// Trains one network for `scale` on the given cases.
pub fn train_isnet(
    cases: &[Case],
    scale: ScaleSetting,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(IsNetModel, TrainLog)> {
    if cases.is_empty() {
        return Err(Error::Data("no training cases".into()));
    }
    let scaled = cases.iter().map(|c| scale_case(c, scale)).collect::<Result<Vec<_>>>()?;
    train_isnet_scaled(&scaled, scale, cfg, seed)
}

pub fn train_isnet_scaled(
    cases: &[ScaledCase],
    scale: ScaleSetting,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(IsNetModel, TrainLog)> {
    let t = &cfg.isnet_train;
    let mut model = IsNetModel::new(cfg.isnet.for_scale(scale, derive_seed(seed, &[0])), scale)?;
    let mut adam = Adam::new(model.net.store(), t.learning_rate);
    let mut grads = Gradients::zeros_like(model.net.store());
    let mut log = TrainLog::default();
    for epoch in 0..t.epochs {
        let mut patches = Vec::new();
        for (ci, c) in cases.iter().enumerate() {
            let s = derive_seed(seed, &[1, epoch as u64, ci as u64]);
            let ps = sample_training_patches(&c.pair, &c.gt, scale, t.patches_per_volume, s, t.foreground_ratio)
                .map_err(|e| e.in_case(&c.id))?;
            log.patch_origins.extend(ps.iter().map(|p| (c.id.clone(), p.origin)));
            patches.extend(ps);
        }
        let mut order: Vec<&PatchSample> = patches.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(t.batch_size) {
            grads.zero();
            total += isnet_batch_step(&model.net, batch, &mut grads)?;
            adam.step(model.net.store_mut(), &grads);
            batches += 1;
            log.steps += 1;
        }
        let mean = total / batches as f64;
        debug!("isnet {scale} epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    if let Some(l) = log.epoch_losses.last() {
        info!(
            "isnet {scale}: {} epochs, {} steps, final loss {l:.4}",
            t.epochs, log.steps
        );
    }
    model.fingerprint = TrainingFingerprint {
        seed,
        epochs: t.epochs,
        steps: log.steps,
    };
    Ok((model, log))
}
