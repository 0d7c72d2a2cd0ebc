use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Builder, Conv, ParamStore};
use crate::autodiff::{Graph, PadMode, Scalar, Var};
use crate::error::{Error, Result};

const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// Number of stride-2 layers.
    pub n_layers: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub row_padding: PadMode,
    pub init_gain: f64,
    pub leaky_slope: f64,
    /// Instance normalization on the inner layers.
    pub norm: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            n_layers: 3,
            base_width: 16,
            in_channels: 2,
            row_padding: PadMode::Reflect,
            init_gain: 0.02,
            leaky_slope: 0.2,
            norm: true,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("discriminator needs positive n_layers, base_width and in_channels".into()));
        }
        if !(self.init_gain > 0.0) {
            return Err(Error::Config("init_gain must be positive".into()));
        }
        Ok(())
    }

    /// `(stride)` of every 4×4 layer, input to output.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.n_layers];
        s.extend([1, 1]);
        s
    }

    /// Side length of the input window seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.strides().iter().rev().fold(1, |rf, s| (rf - 1) * s + KERNEL)
    }

    /// Score map size for an `h × w` input, or `None` if the input is too small.
    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (h, w);
        for s in self.strides() {
            if hw.0 + 2 < KERNEL || hw.1 + 2 < KERNEL {
                return None;
            }
            hw = ((hw.0 + 2 - KERNEL) / s + 1, (hw.1 + 2 - KERNEL) / s + 1);
        }
        Some(hw)
    }
}

/// PatchGAN: a stack of 4×4 convolutions producing a map of patch scores.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    pub params: ParamStore<T>,
    layers: Vec<(Conv, bool)>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: &DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            gain: spec.init_gain,
            row_pad: spec.row_padding,
        };
        let mut layers = Vec::new();
        let width = |i: usize| spec.base_width << i.min(3);
        let mut cin = spec.in_channels;
        for (i, s) in spec.strides().iter().enumerate() {
            let last = i == spec.n_layers + 1;
            let cout = if last { 1 } else { width(i) };
            // no normalization on the first and last layers
            let norm = spec.norm && i > 0 && !last;
            layers.push((b.conv(&format!("layer{i}"), cin, cout, KERNEL, *s, 1, !norm), norm));
            cin = cout;
        }
        Ok(Self {
            spec: spec.clone(),
            params: store,
            layers,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// `[N, C, H, W] -> [N, 1, H', W']` patch scores.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let ok = matches!(shape.as_slice(), [_, c, h, w] if *c == self.spec.in_channels && self.spec.output_shape(*h, *w).is_some_and(|(a, b)| a > 0 && b > 0));
        if !ok {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, H, W] large enough for {} layers, got {shape:?}",
                self.spec.in_channels, self.spec.n_layers
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (conv, norm)) in self.layers.iter().enumerate() {
            h = conv.forward(g, p, h);
            if *norm {
                h = g.instance_norm(h, 1e-5);
            }
            if i != last {
                h = g.leaky_relu(h, self.spec.leaky_slope);
            }
        }
        Ok(h)
    }
}
