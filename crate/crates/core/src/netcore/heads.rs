use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Builder, Linear, ParamStore};
use crate::autodiff::{Graph, PadMode, Scalar, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: usize,
    pub out: usize,
    pub init_gain: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden: 256,
            out: 256,
            init_gain: 0.02,
        }
    }
}

/// Encoder activations at the tap layers plus the locations sampled from them.
pub struct FeatureStack {
    pub taps: Vec<Var>,
    /// Flat spatial indices per tap, shared by every image of the batch.
    pub locations: Vec<Vec<usize>>,
}

/// Draws `count` distinct locations per layer (all of them when a layer is
/// smaller), given each layer's spatial size.
pub fn sample_locations<R: Rng + ?Sized>(sizes: &[usize], count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    sizes
        .iter()
        .map(|&u| sample(rng, u, count.min(u)).into_vec())
        .collect()
}

/// One two-layer perceptron per tap followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHeads<T> {
    spec: HeadSpec,
    in_dims: Vec<usize>,
    pub params: ParamStore<T>,
    layers: Vec<(Linear, Linear)>,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn new(spec: &HeadSpec, in_dims: &[usize], seed: u64) -> Result<Self> {
        if spec.hidden == 0 || spec.out == 0 || in_dims.contains(&0) {
            return Err(Error::Config("projection heads need positive widths".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            gain: spec.init_gain,
            row_pad: PadMode::Zero,
        };
        let layers = in_dims
            .iter()
            .enumerate()
            .map(|(l, &d)| (b.linear(&format!("head{l}.fc0"), d, spec.hidden), b.linear(&format!("head{l}.fc1"), spec.hidden, spec.out)))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            in_dims: in_dims.to_vec(),
            params: store,
            layers,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    /// Unit-norm embeddings `[N * S_l, out]` per tap.
    pub fn project(&self, g: &mut Graph<T>, p: &[Var], stack: &FeatureStack) -> Result<Vec<Var>> {
        if stack.taps.len() != self.layers.len() || stack.locations.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} heads for {} taps and {} location lists",
                self.layers.len(),
                stack.taps.len(),
                stack.locations.len()
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for ((tap, locs), (fc0, fc1)) in stack.taps.iter().zip(&stack.locations).zip(&self.layers) {
            let (n, c, h, w) = g.value(*tap).dims4();
            if let Some(bad) = locs.iter().find(|&&u| u >= h * w) {
                return Err(Error::InvalidArgument(format!("location {bad} outside a {h}x{w} feature map")));
            }
            if c != g.value(p[fc0.w]).dims2().1 {
                return Err(Error::Shape(format!("tap has {c} channels, head expects {}", g.value(p[fc0.w]).dims2().1)));
            }
            let f = g.gather_locations(*tap, vec![locs.clone(); n]);
            let f = fc0.forward(g, p, f);
            let f = g.relu(f);
            let f = fc1.forward(g, p, f);
            out.push(g.l2_normalize_rows(f, 1e-12));
        }
        Ok(out)
    }
}
