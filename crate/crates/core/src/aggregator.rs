//! Slice-wise 2D network that fuses the per-scale prediction volumes.

use log::{debug, info};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use suseg_nn::layers::ConvBlock;
use suseg_nn::{Adam, Float, Gradients, Graph, ParamId, ParamStore, Tensor};

use crate::isnet::TrainingFingerprint;
use crate::losses::generalized_dice_loss_grad;
use crate::patching::{to_original_grid, ScaleSetting};
use crate::preprocess::GridMapping;
use crate::train::derive_seed;
use crate::{Error, Result, Volume, VolumeKind};

const K2: [usize; 3] = [1, 3, 3];
const POOL2: [usize; 3] = [1, 2, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub threshold: f32,
    pub seed: u64,
}

impl AggregatorConfig {
    pub fn new(in_channels: usize) -> Self {
        AggregatorConfig {
            in_channels,
            levels: 3,
            base_channels: 16,
            threshold: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "aggregator needs >= 1 input channel, level and base channel".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("aggregator threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Clamp applied to input probabilities before taking their logit.
const LOGIT_CLAMP: f64 = 1e-4;

fn logit<T: Float>(p: T) -> T {
    let lo = T::from_f64(LOGIT_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    (p / (T::one() - p)).ln()
}

/// 2D encoder-decoder with skip connections, run on `[K, 1, X, Y]` slice
/// tensors. The 1x1 sigmoid head sees the decoder features and the logits of
/// the K input channels; it starts as the mean input logit, with the feature
/// weights at zero.
#[derive(Clone, Debug)]
pub struct AggregatorNet<T: Float> {
    config: AggregatorConfig,
    store: ParamStore<T>,
    encoder: Vec<ConvBlock>,
    bottom: ConvBlock,
    decoder: Vec<ConvBlock>,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl<T: Float> AggregatorNet<T> {
    pub fn new(config: AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = (0..c.levels)
            .map(|l| {
                let cin = if l == 0 { c.in_channels } else { c.channels(l - 1) };
                ConvBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("enc.level{l}"),
                    cin,
                    c.channels(l),
                    K2,
                    false,
                )
            })
            .collect();
        let bottom = ConvBlock::new(
            &mut store,
            &mut rng,
            "bottom",
            c.channels(c.levels - 1),
            c.channels(c.levels),
            K2,
            false,
        );
        let decoder = (0..c.levels)
            .map(|l| {
                let cin = c.channels(l + 1) + c.channels(l);
                ConvBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("dec.level{l}"),
                    cin,
                    c.channels(l),
                    K2,
                    false,
                )
            })
            .collect();
        let (f, k) = (c.channels(0), c.in_channels);
        let w: Vec<T> = (0..f + k)
            .map(|i| if i < f { T::zero() } else { T::from_f64(1.0 / k as f64) })
            .collect();
        let head_weight = store.add("head.weight", Tensor::from_vec(&[1, f + k, 1, 1, 1], w)?);
        let head_bias = store.add("head.bias", Tensor::zeros(&[1]));
        Ok(AggregatorNet {
            config,
            store,
            encoder,
            bottom,
            decoder,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `x` is `[K, 1, X, Y]` with X and Y divisible by `2^levels`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: suseg_nn::Var) -> Result<suseg_nn::Var> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(g, h)?;
            skips.push(h);
            h = g.max_pool(h, POOL2)?;
        }
        h = self.bottom.forward(g, h)?;
        for (l, block) in self.decoder.iter().enumerate().rev() {
            let up = g.upsample(h, POOL2)?;
            let cat = g.concat(&[up, skips[l]])?;
            h = block.forward(g, cat)?;
        }
        let logits = g.value(x).map(logit);
        let lx = g.input(logits);
        let cat = g.concat(&[h, lx])?;
        let (w, b) = (g.param(self.head_weight), g.param(self.head_bias));
        let y = g.conv(cat, w, Some(b), [1, 1, 1])?;
        Ok(g.sigmoid(y))
    }

    fn multiple(&self) -> usize {
        1 << self.config.levels
    }
}

/// Per-scale prediction on its scaled grid, with the mapping back to the
/// original CT grid and the id of the CT it came from.
#[derive(Clone, Debug)]
pub struct PredictionVolume {
    pub source: String,
    pub scale: ScaleSetting,
    pub data: Array3<f32>,
    pub mapping: GridMapping,
}

/// K prediction channels on the original CT grid in canonical order.
#[derive(Clone, Debug)]
pub struct AggregatorInput {
    pub source: String,
    pub channels: Vec<Array3<f32>>,
    pub channel_order: Vec<ScaleSetting>,
    pub spacing: [f64; 3],
}

impl AggregatorInput {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.channels[0].shape();
        [s[0], s[1], s[2]]
    }

    /// `[K, 1, X', Y']` slice tensor, zero-padded up to multiples of `m`.
    fn slice_tensor<T: Float>(&self, z: usize, m: usize) -> Tensor<T> {
        let [x, y, _] = self.shape();
        let (px, py) = (x.div_ceil(m) * m, y.div_ceil(m) * m);
        let k = self.channels.len();
        let mut data = vec![T::zero(); k * px * py];
        for (c, ch) in self.channels.iter().enumerate() {
            for i in 0..x {
                for j in 0..y {
                    data[(c * px + i) * py + j] = T::from_f64(ch[[i, j, z]] as f64);
                }
            }
        }
        Tensor::from_vec(&[k, 1, px, py], data).expect("consistent shape")
    }
}

/// Maps every prediction back to the original grid and stacks them in
/// canonical channel order (`v` descending, then `p` descending).
pub fn stack_predictions(preds: &[PredictionVolume]) -> Result<AggregatorInput> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Data("no predictions to stack".into()))?;
    for p in preds {
        if p.source != first.source
            || p.mapping.original_shape != first.mapping.original_shape
            || p.mapping.original_spacing != first.mapping.original_spacing
        {
            return Err(Error::Data(format!(
                "predictions come from different volumes ({} vs {})",
                first.source, p.source
            )));
        }
    }
    let mut sorted: Vec<&PredictionVolume> = preds.iter().collect();
    sorted.sort_by(|a, b| a.scale.canonical_cmp(&b.scale));
    if sorted.windows(2).any(|w| w[0].scale == w[1].scale) {
        return Err(Error::Data("duplicate scale in prediction set".into()));
    }
    let channels = sorted
        .iter()
        .map(|p| to_original_grid(&p.data, &p.mapping).map(Volume::into_data))
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregatorInput {
        source: first.source.clone(),
        channels,
        channel_order: sorted.iter().map(|p| p.scale).collect(),
        spacing: first.mapping.original_spacing,
    })
}

#[derive(Clone, Debug)]
pub struct AggregatorModel {
    pub net: AggregatorNet<f32>,
    pub channel_order: Vec<ScaleSetting>,
    pub fingerprint: TrainingFingerprint,
}

impl AggregatorModel {
    pub fn new(config: AggregatorConfig, channel_order: Vec<ScaleSetting>) -> Result<Self> {
        if config.in_channels != channel_order.len() {
            return Err(Error::Config(format!(
                "aggregator has {} input channels but {} scales",
                config.in_channels,
                channel_order.len()
            )));
        }
        Ok(AggregatorModel {
            net: AggregatorNet::new(config)?,
            channel_order,
            fingerprint: TrainingFingerprint::default(),
        })
    }

    fn check(&self, input: &AggregatorInput) -> Result<()> {
        if input.channels.len() != self.net.config().in_channels {
            return Err(Error::Model(format!(
                "aggregator expects {} channels, got {}",
                self.net.config().in_channels,
                input.channels.len()
            )));
        }
        if input.channel_order != self.channel_order {
            return Err(Error::Model(
                "input channel order differs from the trained order".into(),
            ));
        }
        Ok(())
    }

    fn predict_slice(&self, input: &AggregatorInput, z: usize) -> Result<Array2<f32>> {
        let [x, y, _] = input.shape();
        let t = input.slice_tensor::<f32>(z, self.net.multiple());
        let py = t.shape()[3];
        let mut g = Graph::new(self.net.store());
        let v = g.input(t);
        let out = self.net.forward(&mut g, v)?;
        let d = g.value(out).data();
        Ok(Array2::from_shape_fn((x, y), |(i, j)| d[i * py + j]))
    }

    /// Slice-by-slice inference restacked into a probability volume on the
    /// original grid.
    pub fn aggregate(&self, input: &AggregatorInput) -> Result<Volume> {
        self.check(input)?;
        let [x, y, z] = input.shape();
        let mut out = Array3::zeros((x, y, z));
        for k in 0..z {
            let sl = self.predict_slice(input, k)?;
            out.slice_mut(s![.., .., k]).assign(&sl);
        }
        Volume::new(out, input.spacing, VolumeKind::Prediction)
    }

    /// Like [`aggregate`](Self::aggregate) but with no channel-order check,
    /// so callers can probe what the network does with permuted inputs.
    pub fn aggregate_unchecked(&self, input: &AggregatorInput) -> Result<Volume> {
        let AggregatorInput {
            channels,
            spacing,
            source,
            ..
        } = input.clone();
        let relabeled = AggregatorInput {
            source,
            channels,
            channel_order: self.channel_order.clone(),
            spacing,
        };
        self.aggregate(&relabeled)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatorLog {
    pub epoch_losses: Vec<f64>,
    pub slices_per_epoch: usize,
    pub steps: u64,
}

/// Fits the aggregator with a generalized dice loss over minibatches of
/// axial slices drawn from all training cases.
pub fn train_aggregator_on(
    inputs: &[(AggregatorInput, Array3<f32>)],
    config: AggregatorConfig,
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
) -> Result<(AggregatorModel, AggregatorLog)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Data("no aggregator training cases".into()))?;
    let order = first.0.channel_order.clone();
    let mut model = AggregatorModel::new(config, order)?;
    for (inp, gt) in inputs {
        model.check(inp)?;
        if gt.shape() != inp.channels[0].shape() {
            return Err(Error::Data(format!("{}: mask and prediction grids differ", inp.source)));
        }
    }
    if batch_size == 0 {
        return Err(Error::Config("aggregator batch size must be >= 1".into()));
    }
    let mut slices: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(c, (inp, _))| (0..inp.shape()[2]).map(move |z| (c, z)))
        .collect();
    let mut log = AggregatorLog {
        slices_per_epoch: slices.len(),
        ..AggregatorLog::default()
    };
    let m = model.net.multiple();
    let mut adam = Adam::new(model.net.store(), learning_rate);
    let mut grads = Gradients::zeros_like(model.net.store());
    for epoch in 0..epochs {
        slices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in slices.chunks(batch_size) {
            grads.zero();
            let mut runs = Vec::with_capacity(batch.len());
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for &(c, z) in batch {
                let (inp, gt) = &inputs[c];
                let t = inp.slice_tensor::<f32>(z, m);
                let py = t.shape()[3];
                let mut g = Graph::new(model.net.store());
                let v = g.input(t);
                let out = model.net.forward(&mut g, v)?;
                pred.extend_from_slice(g.value(out).data());
                let [x, y, _] = inp.shape();
                let px = g.value(out).shape()[2];
                // Padding voxels are background.
                let mut gts = vec![0.0f32; px * py];
                for i in 0..x {
                    for j in 0..y {
                        gts[i * py + j] = gt[[i, j, z]];
                    }
                }
                truth.extend(gts);
                runs.push((g, out));
            }
            let (loss, grad) = generalized_dice_loss_grad(&pred, &truth)?;
            let mut off = 0;
            for (g, out) in &runs {
                let shape = g.value(*out).shape().to_vec();
                let len = g.value(*out).len();
                g.backward(
                    vec![(*out, Tensor::from_vec(&shape, grad[off..off + len].to_vec())?)],
                    &mut grads,
                )?;
                off += len;
            }
            if !grads.is_finite() {
                return Err(Error::Model("non-finite aggregator gradient".into()));
            }
            adam.step(model.net.store_mut(), &grads);
            total += loss as f64;
            batches += 1;
            log.steps += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        debug!("aggregator epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    info!("aggregator: {epochs} epochs, {} slices per epoch", log.slices_per_epoch);
    model.fingerprint = TrainingFingerprint {
        seed,
        epochs,
        steps: log.steps,
    };
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> AggregatorConfig {
        AggregatorConfig {
            base_channels: 4,
            ..AggregatorConfig::new(k)
        }
    }

    fn input(channels: Vec<Array3<f32>>) -> AggregatorInput {
        let order = (0..channels.len())
            .map(|i| ScaleSetting { v: 200 - 8 * i, p: 16 })
            .collect();
        AggregatorInput {
            source: "c".into(),
            channels,
            channel_order: order,
            spacing: [1.0; 3],
        }
    }

    fn pred(source: &str, v: usize, p: usize, value: f32) -> PredictionVolume {
        let mapping = GridMapping::new([16, 16, 8], [1.0; 3], 16).unwrap();
        PredictionVolume {
            source: source.into(),
            scale: ScaleSetting { v, p },
            data: Array3::from_elem(mapping.final_shape, value),
            mapping,
        }
    }

    #[test]
    fn shapes_and_bounds() {
        for (k, shape) in [(11, (32, 32, 2)), (1, (24, 16, 3)), (3, (20, 12, 1))] {
            let model = AggregatorModel::new(tiny(k), input(vec![Array3::zeros(shape); k]).channel_order).unwrap();
            let chans = (0..k)
                .map(|c| Array3::from_shape_fn(shape, |(i, j, z)| ((i * 3 + j + z + c) % 5) as f32 / 4.0))
                .collect();
            let out = model.aggregate(&input(chans)).unwrap();
            assert_eq!(out.shape(), [shape.0, shape.1, shape.2]);
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn constant_channels_give_constant_interior() {
        let model = AggregatorModel::new(tiny(2), input(vec![Array3::zeros((1, 1, 1)); 2]).channel_order).unwrap();
        let out = model
            .aggregate(&input(vec![Array3::from_elem((128, 128, 2), 0.7); 2]))
            .unwrap();
        // Border effects stay within the receptive field; check the centre.
        let c = out.data()[[64, 64, 0]];
        for i in 58..70 {
            for j in 58..70 {
                assert!((out.data()[[i, j, 1]] - c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn slices_are_independent() {
        let k = 2;
        let model = AggregatorModel::new(tiny(k), input(vec![Array3::zeros((1, 1, 1)); k]).channel_order).unwrap();
        let chans: Vec<_> = (0..k)
            .map(|c| Array3::from_shape_fn((16, 16, 4), |(i, j, z)| ((i * j + z * 7 + c) % 9) as f32 / 8.0))
            .collect();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<_> = chans
            .iter()
            .map(|a| Array3::from_shape_fn(a.dim(), |(i, j, z)| a[[i, j, perm[z]]]))
            .collect();
        let a = model.aggregate(&input(chans)).unwrap();
        let b = model.aggregate(&input(permuted)).unwrap();
        for z in 0..4 {
            assert_eq!(b.data().slice(s![.., .., z]), a.data().slice(s![.., .., perm[z]]));
        }
    }

    #[test]
    fn channel_order_matters() {
        let mut model = AggregatorModel::new(tiny(2), input(vec![Array3::zeros((1, 1, 1)); 2]).channel_order).unwrap();
        // The initial head averages the input logits, which is symmetric in
        // the channels; move away from it as training would.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<_> = model.net.store().ids().collect();
        for id in ids {
            for v in model.net.store_mut().get_mut(id).data_mut() {
                *v += rand::Rng::random_range(&mut rng, -0.2..0.2);
            }
        }
        let a = Array3::from_shape_fn((16, 16, 1), |(i, j, _)| ((i + j) % 3) as f32 / 2.0);
        let b = a.mapv(|v| 1.0 - v);
        let x = model.aggregate(&input(vec![a.clone(), b.clone()])).unwrap();
        let y = model.aggregate_unchecked(&input(vec![b, a])).unwrap();
        assert_ne!(x.data(), y.data());
        let mut wrong = input(vec![Array3::zeros((16, 16, 1)); 2]);
        wrong.channel_order.reverse();
        assert!(model.aggregate(&wrong).is_err());
        assert!(model.aggregate(&input(vec![Array3::zeros((16, 16, 1)); 3])).is_err());
    }

    #[test]
    fn stacking_orders_and_validates() {
        let preds = vec![pred("a", 96, 32, 0.1), pred("a", 256, 32, 0.2), pred("a", 256, 64, 0.3)];
        let st = stack_predictions(&preds).unwrap();
        assert_eq!(
            st.channel_order,
            vec![
                ScaleSetting { v: 256, p: 64 },
                ScaleSetting { v: 256, p: 32 },
                ScaleSetting { v: 96, p: 32 }
            ]
        );
        assert!((st.channels[0][[0, 0, 0]] - 0.3).abs() < 1e-6);
        assert_eq!(st.shape(), [16, 16, 8]);
        let same = stack_predictions(&[pred("a", 96, 32, 0.4), pred("a", 64, 16, 0.4)]).unwrap();
        assert_eq!(same.channels[0], same.channels[1]);
        assert!(stack_predictions(&[pred("a", 96, 32, 0.1), pred("b", 64, 32, 0.1)]).is_err());
        assert!(stack_predictions(&[pred("a", 96, 32, 0.1), pred("a", 96, 32, 0.2)]).is_err());
        assert!(stack_predictions(&[]).is_err());
    }

    #[test]
    fn learns_to_copy_a_channel() {
        // Truth is channel 0; channel 1 is a distractor.
        let mut data = Vec::new();
        for case in 0..3 {
            let truth = Array3::from_shape_fn((16, 16, 6), |(i, j, z)| {
                let (ci, cj) = (4.0 + (case * 3 + z) as f32 % 8.0, 5.0 + (case + 2 * z) as f32 % 6.0);
                if ((i as f32 - ci).powi(2) + (j as f32 - cj).powi(2)) < 9.0 {
                    1.0
                } else {
                    0.0
                }
            });
            let noise = Array3::from_shape_fn((16, 16, 6), |(i, j, z)| ((i * 5 + j * 3 + z + case) % 7) as f32 / 6.0);
            data.push((input(vec![truth.clone(), noise]), truth));
        }
        let (model, log) = train_aggregator_on(&data, tiny(2), 4, 1e-2, 30, 3).unwrap();
        assert_eq!(log.slices_per_epoch, 18);
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (inp, gt) in &data {
            let out = model.aggregate(inp).unwrap();
            for (&p, &g) in out.data().iter().zip(gt) {
                match (p > 0.5, g > 0.5) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fneg += 1.0,
                    _ => {}
                }
            }
        }
        let dice = 2.0 * tp / (2.0 * tp + fp + fneg);
        assert!(dice > 0.9, "dice {dice}");
    }

    #[test]
    fn zero_epochs_returns_untrained() {
        let data = vec![(input(vec![Array3::zeros((8, 8, 2))]), Array3::zeros((8, 8, 2)))];
        let (model, log) = train_aggregator_on(&data, tiny(1), 4, 1e-3, 0, 0).unwrap();
        let fresh = AggregatorNet::<f32>::new(tiny(1)).unwrap();
        assert!(log.epoch_losses.is_empty());
        for (a, b) in model.net.store().iter().zip(fresh.store().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}
