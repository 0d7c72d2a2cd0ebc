use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::conv::conv2d_forward;
use crate::autodiff::{ConvGeom, PadMode, Tensor};
use crate::error::{Error, Result};
use crate::rangeview::{ChannelRole, RangeImage};

/// Deterministic map from a range image to a fixed-length vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn version(&self) -> u32;
    fn dim(&self) -> usize;
    fn extract(&self, image: &RangeImage) -> Result<Vec<f64>>;
}

/// Three strided 3×3 convolutions with fixed random weights, ReLU, then
/// per-channel mean and standard deviation pooling.
///
/// Inputs are depth / `depth_scale` and the validity mask. Version 1 draws
/// He-normal weights from ChaCha8 seeded with 1.
pub struct RandomConvFeatures {
    layers: Vec<Tensor<f64>>,
    depth_scale: f64,
}

const WIDTHS: [usize; 4] = [2, 16, 32, 64];

impl RandomConvFeatures {
    pub const VERSION: u32 = 1;

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = WIDTHS
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::new(vec![co, ci, 3, 3], (0..co * ci * 9).map(|_| dist.sample(&mut rng)).collect())
            })
            .collect();
        Self { layers, depth_scale: 80.0 }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn version(&self) -> u32 {
        Self::VERSION
    }

    fn dim(&self) -> usize {
        2 * WIDTHS[3]
    }

    fn extract(&self, image: &RangeImage) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        let depth = image.plane(ChannelRole::Depth)?;
        let mut data: Vec<f64> = depth.iter().map(|d| d / self.depth_scale).collect();
        data.extend(image.valid().iter().map(|&v| if v { 1.0 } else { 0.0 }));
        let mut x = Tensor::new(vec![1, 2, h, w], data);
        let geom = ConvGeom::square(3, 2, 1, PadMode::Reflect, PadMode::Circular);
        for wt in &self.layers {
            x = conv2d_forward(&x, wt, None, &geom).map(|v| v.max(0.0));
        }
        let (_, c, ho, wo) = x.dims4();
        let n = (ho * wo) as f64;
        let mut out = Vec::with_capacity(2 * c);
        let mut stds = Vec::with_capacity(c);
        for ch in 0..c {
            let p = &x.data()[ch * ho * wo..(ch + 1) * ho * wo];
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(mean);
            stds.push(var.sqrt());
        }
        out.extend(stds);
        Ok(out)
    }
}

/// `u32 count, u32 dim`, then `count × dim` little-endian f32.
pub fn encode_features(set: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = set.first().map_or(0, Vec::len);
    if set.iter().any(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "feature set",
            detail: "vectors differ in length".into(),
        });
    }
    let count = u32::try_from(set.len()).map_err(|_| Error::InvalidArgument("too many feature vectors".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * set.len() * dim);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in set {
        for x in v {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            what: "feature file header",
            needed: 8,
            available: bytes.len() as u64,
        });
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as u64;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as u64;
    let needed = 8 + 4 * count * dim;
    let have = bytes.len() as u64;
    if have < needed {
        return Err(Error::Truncated {
            what: "feature file",
            needed,
            available: have,
        });
    }
    if have > needed {
        return Err(Error::TrailingData {
            what: "feature file",
            extra: have - needed,
        });
    }
    let body = &bytes[8..];
    let vals: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    if dim == 0 {
        return Ok(vec![Vec::new(); count as usize]);
    }
    Ok(vals.chunks(dim as usize).map(<[f64]>::to_vec).collect())
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_features(path: &Path, set: &[Vec<f64>]) -> Result<()> {
    crate::dataio::write_file(path, &encode_features(set)?)
}
