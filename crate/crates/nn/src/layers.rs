//! Reusable building blocks: convolution units, two-unit blocks, parallel
//! dilated blocks and mixed pooling. Each block registers its parameters in a
//! [`ParamStore`] at construction and replays them on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Float, Graph, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// Convolution, optional instance normalization, activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    dilation: [usize; 3],
    activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub norm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            dilation: [1, 1, 1],
            norm: false,
            activation: Activation::Relu,
        }
    }

    pub fn dilation(mut self, d: [usize; 3]) -> Self {
        self.dilation = d;
        self
    }

    pub fn norm(mut self, on: bool) -> Self {
        self.norm = on;
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

impl ConvUnit {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = spec.cin * kd * kh * kw;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            &[spec.cout, spec.cin, kd, kh, kw],
            fan_in,
            rng,
        );
        // A bias ahead of instance normalization is cancelled by the mean subtraction.
        let (bias, norm) = if spec.norm {
            let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[spec.cout], T::one()));
            let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[spec.cout]));
            (None, Some((gamma, beta)))
        } else {
            let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout]));
            (Some(bias), None)
        };
        ConvUnit {
            weight,
            bias,
            norm,
            dilation: spec.dilation,
            activation: spec.activation,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        let mut y = g.conv(x, w, b, self.dilation)?;
        if let Some((gamma, beta)) = self.norm {
            let gm = g.param(gamma);
            let bt = g.param(beta);
            y = g.instance_norm(y, gm, bt)?;
        }
        Ok(match self.activation {
            Activation::Relu => g.relu(y),
            Activation::Sigmoid => g.sigmoid(y),
            Activation::Identity => y,
        })
    }
}

/// Two consecutive 3x3(x3) convolution units.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    units: [ConvUnit; 2],
}

impl ConvBlock {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        norm: bool,
    ) -> Self {
        let a = ConvUnit::new(
            store,
            rng,
            &format!("{name}.0"),
            ConvSpec::new(cin, cout, kernel).norm(norm),
        );
        let b = ConvUnit::new(
            store,
            rng,
            &format!("{name}.1"),
            ConvSpec::new(cout, cout, kernel).norm(norm),
        );
        ConvBlock { units: [a, b] }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.units[0].forward(g, x)?;
        self.units[1].forward(g, h)
    }
}

/// Parallel dilated convolutions at several rates, concatenated and fused by
/// a pointwise convolution.
#[derive(Clone, Debug)]
pub struct DilatedBlock {
    branches: Vec<ConvUnit>,
    fuse: ConvUnit,
}

impl DilatedBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: [usize; 3],
        rates: &[usize],
        norm: bool,
    ) -> Self {
        let branches = rates
            .iter()
            .map(|&r| {
                // Axes with a unit kernel are not dilated.
                let dil = kernel.map(|k| if k == 1 { 1 } else { r });
                ConvUnit::new(
                    store,
                    rng,
                    &format!("{name}.rate{r}"),
                    ConvSpec::new(channels, channels, kernel).dilation(dil).norm(norm),
                )
            })
            .collect::<Vec<_>>();
        let fuse = ConvUnit::new(
            store,
            rng,
            &format!("{name}.fuse"),
            ConvSpec::new(channels * rates.len(), channels, [1, 1, 1]).norm(norm),
        );
        DilatedBlock { branches, fuse }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs)?;
        self.fuse.forward(g, cat)
    }
}

/// Learnable blend of max and average pooling.
#[derive(Clone, Debug)]
pub struct MixedPool {
    alpha_logit: ParamId,
    window: [usize; 3],
}

impl MixedPool {
    /// The blend starts at 0.5 (logit 0).
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, window: [usize; 3]) -> Self {
        let alpha_logit = store.add(format!("{name}.alpha"), Tensor::zeros(&[1]));
        MixedPool { alpha_logit, window }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = g.param(self.alpha_logit);
        g.mixed_pool(x, a, self.window)
    }

    pub fn alpha<T: Float>(&self, store: &ParamStore<T>) -> T {
        let l = store.get(self.alpha_logit).data()[0];
        T::one() / (T::one() + (-l).exp())
    }
}
