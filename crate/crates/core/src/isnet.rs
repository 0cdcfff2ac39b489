//! Dual-encoder patch segmentation network.
//!
//! Two independent encoders read the wide- and narrow-range patches. Every
//! encoder level is also routed straight to the bottleneck through a chain of
//! mixed poolings. The bottleneck and the first decoder level carry parallel
//! dilated blocks; the decoder takes skips from the wide-range encoder and
//! emits a main output plus two deep-supervision heads at 1/2 and 1/4
//! resolution, upsampled back to the patch size.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use suseg_nn::layers::{Activation, ConvBlock, ConvSpec, ConvUnit, DilatedBlock, MixedPool};
use suseg_nn::{Float, Graph, ParamStore, Tensor, Var};

use crate::patching::{PatchSample, ScaleSetting};
use crate::{Error, Result};

const K3: [usize; 3] = [3, 3, 3];
const K1: [usize; 3] = [1, 1, 1];
const POOL: [usize; 3] = [2, 2, 2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsNetConfig {
    pub p: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub use_multi_encoder: bool,
    pub use_deep_supervision: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for IsNetConfig {
    fn default() -> Self {
        IsNetConfig {
            p: 32,
            levels: 3,
            base_channels: 16,
            dilation_rates: vec![1, 2, 4],
            use_multi_encoder: true,
            use_deep_supervision: true,
            seed: 0,
        }
    }
}

impl IsNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("isnet levels must be >= 1".into());
        }
        if self.p == 0 || !self.p.is_multiple_of(1 << self.levels) {
            return bad(format!("patch size {} not divisible by 2^{}", self.p, self.levels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "dilation rates {:?} must be non-empty and strictly increasing",
                self.dilation_rates
            ));
        }
        if self.dilation_rates[0] == 0 {
            return bad("dilation rates must be >= 1".into());
        }
        if self.use_deep_supervision && self.levels < 3 {
            return bad("deep supervision needs at least 3 levels".into());
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<ConvBlock>,
    // routes[l] pools level l down to the bottleneck resolution
    routes: Vec<Vec<MixedPool>>,
}

impl Encoder {
    fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &IsNetConfig) -> Self {
        let mut blocks = Vec::new();
        let mut routes = Vec::new();
        for l in 0..cfg.levels {
            let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
            blocks.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.level{l}"),
                cin,
                cfg.channels(l),
                K3,
                true,
            ));
            routes.push(
                (0..cfg.levels - l)
                    .map(|k| MixedPool::new(store, &format!("{name}.route{l}.pool{k}"), POOL))
                    .collect(),
            );
        }
        Encoder { blocks, routes }
    }

    fn route_channels(cfg: &IsNetConfig) -> usize {
        (0..cfg.levels).map(|l| cfg.channels(l)).sum()
    }

    /// Returns per-level features and the pooled routes.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = g.max_pool(h, POOL)?;
            }
            h = block.forward(g, h)?;
            feats.push(h);
        }
        let mut routed = Vec::with_capacity(feats.len());
        for (f, chain) in feats.iter().zip(&self.routes) {
            let mut r = *f;
            for pool in chain {
                r = pool.forward(g, r)?;
            }
            routed.push(r);
        }
        Ok((feats, routed))
    }
}

#[derive(Clone, Debug)]
struct Layers {
    wide: Encoder,
    narrow: Option<Encoder>,
    bottleneck: ConvUnit,
    bottleneck_dilated: DilatedBlock,
    // decoder[l] produces level-l features
    decoder: Vec<ConvBlock>,
    decoder_dilated: DilatedBlock,
    main_head: ConvUnit,
    sub_heads: Vec<ConvUnit>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct IsNetOutputs {
    pub main: Var,
    /// Deep-supervision outputs at patch size (empty when disabled).
    pub subs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct IsNet<T: Float> {
    config: IsNetConfig,
    store: ParamStore<T>,
    layers: Layers,
}

impl<T: Float> IsNet<T> {
    pub fn new(config: IsNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let wide = Encoder::new(&mut store, &mut rng, "enc_w", cfg);
        let narrow = cfg
            .use_multi_encoder
            .then(|| Encoder::new(&mut store, &mut rng, "enc_n", cfg));
        let encoders = if cfg.use_multi_encoder { 2 } else { 1 };
        let cb = cfg.channels(cfg.levels);
        let bottleneck = ConvUnit::new(
            &mut store,
            &mut rng,
            "bottleneck",
            ConvSpec::new(encoders * Encoder::route_channels(cfg), cb, K3).norm(true),
        );
        let bottleneck_dilated = DilatedBlock::new(
            &mut store,
            &mut rng,
            "bottleneck.dilated",
            cb,
            K3,
            &cfg.dilation_rates,
            true,
        );
        let decoder = (0..cfg.levels)
            .map(|l| {
                let cin = cfg.channels(l + 1) + cfg.channels(l);
                ConvBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("dec.level{l}"),
                    cin,
                    cfg.channels(l),
                    K3,
                    true,
                )
            })
            .collect();
        let top = cfg.levels - 1;
        let decoder_dilated = DilatedBlock::new(
            &mut store,
            &mut rng,
            &format!("dec.level{top}.dilated"),
            cfg.channels(top),
            K3,
            &cfg.dilation_rates,
            true,
        );
        let head = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize| {
            ConvUnit::new(
                store,
                rng,
                name,
                ConvSpec::new(cin, 1, K1).activation(Activation::Sigmoid),
            )
        };
        let main_head = head(&mut store, &mut rng, "head.main", cfg.channels(0));
        let sub_heads = if cfg.use_deep_supervision {
            (1..=2)
                .map(|l| head(&mut store, &mut rng, &format!("head.sub{l}"), cfg.channels(l)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(IsNet {
            config,
            store,
            layers: Layers {
                wide,
                narrow,
                bottleneck,
                bottleneck_dilated,
                decoder,
                decoder_dilated,
                main_head,
                sub_heads,
            },
        })
    }

    pub fn config(&self) -> &IsNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Inputs are `[1, p, p, p]` tensors; `narrow` is ignored unless the
    /// network has two encoders, and required if it does.
    pub fn forward(&self, g: &mut Graph<'_, T>, wide: Var, narrow: Option<Var>) -> Result<IsNetOutputs> {
        let cfg = &self.config;
        let l = &self.layers;
        let (skips, mut routes) = l.wide.forward(g, wide)?;
        if let Some(enc) = &l.narrow {
            let n = narrow.ok_or_else(|| Error::Model("network expects a narrow-range input".into()))?;
            let (_, r) = enc.forward(g, n)?;
            routes.extend(r);
        }
        let cat = g.concat(&routes)?;
        let mut h = l.bottleneck.forward(g, cat)?;
        h = l.bottleneck_dilated.forward(g, h)?;
        let mut dec = vec![None; cfg.levels];
        for lev in (0..cfg.levels).rev() {
            let up = g.upsample(h, POOL)?;
            let cat = g.concat(&[up, skips[lev]])?;
            h = l.decoder[lev].forward(g, cat)?;
            if lev == cfg.levels - 1 {
                h = l.decoder_dilated.forward(g, h)?;
            }
            dec[lev] = Some(h);
        }
        let main = l.main_head.forward(g, h)?;
        let mut subs = Vec::new();
        for (i, head) in l.sub_heads.iter().enumerate() {
            let lev = i + 1;
            let s = head.forward(g, dec[lev].expect("decoder level computed"))?;
            let f = 1 << lev;
            subs.push(g.upsample(s, [f, f, f])?);
        }
        Ok(IsNetOutputs { main, subs })
    }

    /// Main output for one patch pair.
    pub fn infer(&self, wide: &Array3<f32>, narrow: &Array3<f32>) -> Result<Array3<f32>> {
        let p = self.config.p;
        if wide.dim() != (p, p, p) || narrow.dim() != (p, p, p) {
            return Err(Error::Model(format!("expected {p}^3 patches, got {:?}", wide.dim())));
        }
        let mut g = Graph::new(&self.store);
        let w = g.input(patch_tensor(wide));
        let n = self.config.use_multi_encoder.then(|| g.input(patch_tensor(narrow)));
        let out = self.forward(&mut g, w, n)?;
        let data = g.value(out.main).data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(Array3::from_shape_vec((p, p, p), data).expect("patch-sized output"))
    }
}

/// `[x, y, z]` patch to a one-channel `[1, x, y, z]` tensor.
pub fn patch_tensor<T: Float>(a: &Array3<f32>) -> Tensor<T> {
    let (x, y, z) = a.dim();
    let data = a.iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::from_vec(&[1, x, y, z], data).expect("consistent shape")
}

/// Seed and length of the training run that produced a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
}

/// A network bound to the scale setting it was trained for.
#[derive(Clone, Debug)]
pub struct IsNetModel {
    pub net: IsNet<f32>,
    pub scale: ScaleSetting,
    pub fingerprint: TrainingFingerprint,
}

impl IsNetModel {
    pub fn new(config: IsNetConfig, scale: ScaleSetting) -> Result<Self> {
        if config.p != scale.p {
            return Err(Error::Config(format!(
                "config patch size {} does not match scale {scale}",
                config.p
            )));
        }
        Ok(IsNetModel {
            net: IsNet::new(config)?,
            scale,
            fingerprint: TrainingFingerprint::default(),
        })
    }

    pub fn predict_patch(&self, sample: &PatchSample) -> Result<Array3<f32>> {
        if sample.scale != self.scale {
            return Err(Error::Model(format!(
                "patch scale {} does not match model scale {}",
                sample.scale, self.scale
            )));
        }
        self.net.infer(&sample.wrange, &sample.nrange)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(me: bool, ds: bool) -> IsNetConfig {
        IsNetConfig {
            p: 16,
            base_channels: 4,
            use_multi_encoder: me,
            use_deep_supervision: ds,
            ..IsNetConfig::default()
        }
    }

    fn run(net: &IsNet<f32>, w: &Array3<f32>, n: &Array3<f32>) -> (Vec<f32>, Vec<Vec<usize>>) {
        let mut g = Graph::new(net.store());
        let wv = g.input(patch_tensor(w));
        let nv = g.input(patch_tensor(n));
        let out = net.forward(&mut g, wv, Some(nv)).unwrap();
        let mut shapes = vec![g.value(out.main).shape().to_vec()];
        shapes.extend(out.subs.iter().map(|s| g.value(*s).shape().to_vec()));
        (g.value(out.main).data().to_vec(), shapes)
    }

    #[test]
    fn config_validation() {
        assert!(IsNetConfig::default().validate().is_ok());
        let bad = [
            IsNetConfig {
                p: 20,
                ..IsNetConfig::default()
            },
            IsNetConfig {
                dilation_rates: vec![],
                ..IsNetConfig::default()
            },
            IsNetConfig {
                dilation_rates: vec![2, 2],
                ..IsNetConfig::default()
            },
            IsNetConfig {
                levels: 2,
                ..IsNetConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(IsNet::<f32>::new(c), Err(Error::Config(_))));
        }
        let two = IsNetConfig {
            levels: 2,
            use_deep_supervision: false,
            ..IsNetConfig::default()
        };
        assert!(two.validate().is_ok());
    }

    #[test]
    fn output_shapes_and_range() {
        let z = Array3::zeros((32, 32, 32));
        let net = IsNet::<f32>::new(IsNetConfig {
            base_channels: 4,
            ..IsNetConfig::default()
        })
        .unwrap();
        let (main, shapes) = run(&net, &z, &z);
        assert_eq!(shapes, vec![vec![1, 32, 32, 32]; 3]);
        assert!(main.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
    }

    #[test]
    fn disabling_supervision_drops_two_heads() {
        let z = Array3::zeros((16, 16, 16));
        let on = IsNet::<f32>::new(tiny(true, true)).unwrap();
        let off = IsNet::<f32>::new(tiny(true, false)).unwrap();
        let (_, a) = run(&on, &z, &z);
        let (_, b) = run(&off, &z, &z);
        assert_eq!(a.len(), 3);
        assert_eq!(b, vec![vec![1, 16, 16, 16]]);
        assert_eq!(on.store().len() - off.store().len(), 4);
    }

    #[test]
    fn single_encoder_accepts_one_input() {
        let net = IsNet::<f32>::new(tiny(false, false)).unwrap();
        let mut g = Graph::new(net.store());
        let w = g.input(patch_tensor(&Array3::from_elem((16, 16, 16), 0.3)));
        let out = net.forward(&mut g, w, None).unwrap();
        assert_eq!(g.value(out.main).shape(), &[1, 16, 16, 16]);
        assert!(!net.store().iter().any(|p| p.name.starts_with("enc_n")));

        let two = IsNet::<f32>::new(tiny(true, false)).unwrap();
        let mut g = Graph::new(two.store());
        let w = g.input(patch_tensor(&Array3::from_elem((16, 16, 16), 0.3)));
        assert!(two.forward(&mut g, w, None).is_err());
    }

    #[test]
    fn fresh_outputs_are_not_saturated_and_deterministic() {
        let net = IsNet::<f32>::new(tiny(true, true)).unwrap();
        let w = Array3::from_shape_fn((16, 16, 16), |(x, y, z)| ((x * 7 + y * 3 + z) % 11) as f32 / 10.0);
        let n = w.mapv(|v| 1.0 - v);
        let a = net.infer(&w, &n).unwrap();
        let b = net.infer(&w, &n).unwrap();
        assert_eq!(a, b);
        let mean = a.mean().unwrap();
        assert!(mean > 0.05 && mean < 0.95, "mean {mean}");
    }

    #[test]
    fn narrow_encoder_is_live() {
        let net = IsNet::<f32>::new(tiny(true, false)).unwrap();
        let w = Array3::from_shape_fn((16, 16, 16), |(x, y, z)| ((x + 2 * y + 3 * z) % 5) as f32 / 4.0);
        let n = w.mapv(|v| v * v);
        let a = net.infer(&w, &n).unwrap();
        let b = net.infer(&w, &Array3::zeros((16, 16, 16))).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn scale_mismatch_rejected() {
        let scale = ScaleSetting::new(64, 16).unwrap();
        assert!(IsNetModel::new(tiny(true, true), ScaleSetting::new(64, 32).unwrap()).is_err());
        let model = IsNetModel::new(tiny(true, true), scale).unwrap();
        let z = Array3::zeros((16, 16, 16));
        let mut s = PatchSample {
            wrange: z.clone(),
            nrange: z,
            gt: None,
            origin: [0; 3],
            scale: ScaleSetting::new(96, 16).unwrap(),
        };
        assert!(model.predict_patch(&s).is_err());
        s.scale = scale;
        assert!(model.predict_patch(&s).is_ok());
    }
}
