//! Binary raydrop masks from per-cell logits.
//!
//! Training draws a Gumbel-Sigmoid relaxation and thresholds it at 0.5,
//! passing gradients straight through the threshold. Inference draws plain
//! Bernoulli samples with keep probability `sigmoid(logit)`.

use rand::Rng;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rangeview::{ChannelRole, RangeImage};

/// Uniform draws are clamped to `[EPS, 1 - EPS]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gumbel(0, 1) quantile function applied to a clamped uniform.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

pub fn gumbel_sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

fn check_alpha(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")))
    }
}

/// `sigmoid((l + gumbel_keep - gumbel_drop) / temperature)` for one cell.
pub fn relaxed_value(logit: f64, gumbel_keep: f64, gumbel_drop: f64, temperature: f64) -> f64 {
    sigmoid((logit + gumbel_keep - gumbel_drop) / temperature)
}

/// Derivative of [`relaxed_value`] with respect to the logit.
pub fn relaxed_derivative(logit: f64, gumbel_keep: f64, gumbel_drop: f64, temperature: f64) -> f64 {
    let s = relaxed_value(logit, gumbel_keep, gumbel_drop, temperature);
    s * (1.0 - s) / temperature
}

pub fn relaxed_mask(logits: &[f64], temperature: f64, gumbel_keep: &[f64], gumbel_drop: &[f64]) -> Result<Vec<f64>> {
    check_alpha(temperature)?;
    if gumbel_keep.len() != logits.len() || gumbel_drop.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            what: "gumbel noise",
            detail: format!("{} logits, {} and {} noise draws", logits.len(), gumbel_keep.len(), gumbel_drop.len()),
        });
    }
    Ok(logits
        .iter()
        .zip(gumbel_keep.iter().zip(gumbel_drop))
        .map(|(&l, (&a, &b))| relaxed_value(l, a, b, temperature))
        .collect())
}

/// Threshold at 0.5; ties keep the ray.
pub fn hard_mask(relaxed: &[f64]) -> Vec<bool> {
    relaxed.iter().map(|&v| v >= 0.5).collect()
}

/// One Gumbel-Sigmoid draw over a grid, with everything needed for the
/// straight-through backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RaydropSample {
    pub logits: Vec<f64>,
    pub gumbel_keep: Vec<f64>,
    pub gumbel_drop: Vec<f64>,
    pub temperature: f64,
    pub relaxed: Vec<f64>,
    pub hard: Vec<bool>,
}

impl RaydropSample {
    pub fn from_noise(logits: &[f64], temperature: f64, gumbel_keep: Vec<f64>, gumbel_drop: Vec<f64>) -> Result<Self> {
        let relaxed = relaxed_mask(logits, temperature, &gumbel_keep, &gumbel_drop)?;
        let hard = hard_mask(&relaxed);
        Ok(Self {
            logits: logits.to_vec(),
            gumbel_keep,
            gumbel_drop,
            temperature,
            relaxed,
            hard,
        })
    }

    /// Hard mask as 0/1 values.
    pub fn forward(&self) -> Vec<f64> {
        self.hard.iter().map(|&k| f64::from(u8::from(k))).collect()
    }

    /// Per-cell derivative of the mask with respect to its logit, with the
    /// threshold treated as identity.
    pub fn logit_gradient(&self) -> Vec<f64> {
        self.relaxed.iter().map(|&s| s * (1.0 - s) / self.temperature).collect()
    }

    /// Chains an upstream gradient on the mask back to the logits.
    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.relaxed.len(), "upstream gradient length");
        self.logit_gradient().iter().zip(upstream).map(|(a, b)| a * b).collect()
    }
}

/// Training-mode mask: fresh noise, hard forward, relaxed backward.
pub fn straight_through<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<RaydropSample> {
    check_alpha(temperature)?;
    let gumbel_keep = gumbel_sample(logits.len(), rng);
    let gumbel_drop = gumbel_sample(logits.len(), rng);
    RaydropSample::from_noise(logits, temperature, gumbel_keep, gumbel_drop)
}

/// Independent keep decisions with probabilities `p`.
pub fn bernoulli_mask<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<Vec<bool>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("keep probability {bad} outside [0, 1]")));
    }
    Ok(p.iter().map(|&pi| rng.random::<f64>() < pi).collect())
}

/// `gumbel_keep - gumbel_drop` noise difference for a grid, the only form the graph needs.
pub fn logistic_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let gumbel_keep = gumbel_sample(len, rng);
    let gumbel_drop = gumbel_sample(len, rng);
    gumbel_keep.iter().zip(&gumbel_drop).map(|(a, b)| a - b).collect()
}

fn masked(complete: &RangeImage, mask: &[bool], fill: f64) -> Result<RangeImage> {
    let cells = complete.height() * complete.width();
    if mask.len() != cells {
        return Err(Error::DimensionMismatch {
            what: "raydrop mask",
            detail: format!("image has {cells} cells, mask has {}", mask.len()),
        });
    }
    let keep: Vec<ChannelRole> = complete
        .roles()
        .iter()
        .copied()
        .filter(|r| *r != ChannelRole::RaydropLogit)
        .collect();
    let mut out = complete.select(&keep)?;
    let targets: Vec<usize> = [ChannelRole::Depth, ChannelRole::Reflectance]
        .iter()
        .filter_map(|r| out.channel_index(*r))
        .collect();
    for (cell, &k) in mask.iter().enumerate() {
        let v = k && complete.valid()[cell];
        out.set_valid(cell, v);
        if !v {
            let px = out.pixel_mut(cell);
            for &t in &targets {
                px[t] = fill;
            }
        }
    }
    Ok(out)
}

/// Masks a complete scan in physical units; dropped cells get zero depth and
/// reflectance and are invalid. The logit channel, if any, is removed.
pub fn apply_mask(complete: &RangeImage, mask: &[bool]) -> Result<RangeImage> {
    masked(complete, mask, 0.0)
}

/// Same as [`apply_mask`] for images in `[-1, 1]` units, where `-1` marks
/// an empty cell.
pub fn apply_mask_normalized(complete: &RangeImage, mask: &[bool]) -> Result<RangeImage> {
    masked(complete, mask, -1.0)
}

/// How the mask enters a differentiable forward pass.
#[derive(Clone, Debug)]
pub enum MaskMode<T> {
    /// Hard forward, relaxed backward.
    StraightThrough,
    /// Relaxed values in both directions.
    Relaxed,
    /// `relaxed + offset` with a frozen offset; with the offset taken as
    /// `hard - relaxed` at a reference point this reproduces the
    /// straight-through forward there and is smooth around it.
    Anchored(Tensor<T>),
}

/// Relaxed mask `sigmoid((logits + noise) / temperature)` inside a graph, where
/// `noise` holds `gumbel_keep - gumbel_drop`.
pub fn relaxed_in_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, noise: &Tensor<T>, temperature: f64) -> Var {
    let shifted = g.add_const(logits, noise);
    let scaled = g.scale(shifted, 1.0 / temperature);
    g.sigmoid(scaled)
}

pub fn mask_in_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, noise: &Tensor<T>, temperature: f64, mode: &MaskMode<T>) -> Var {
    let relaxed = relaxed_in_graph(g, logits, noise, temperature);
    match mode {
        MaskMode::StraightThrough => g.straight_through(relaxed),
        MaskMode::Relaxed => relaxed,
        MaskMode::Anchored(offset) => g.add_const(relaxed, offset),
    }
}

/// Offset that makes [`MaskMode::Anchored`] equal the hard mask at the given logits.
pub fn anchor_offset<T: Scalar>(logits: &Tensor<T>, noise: &Tensor<T>, temperature: f64) -> Tensor<T> {
    let data = logits
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&l, &n)| {
            let s = sigmoid((l.to_f64_lossy() + n.to_f64_lossy()) / temperature);
            let h = if s >= 0.5 { 1.0 } else { 0.0 };
            T::from_f64_lossy(h - s)
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gumbel_quantile_points() {
        assert_eq!(gumbel_from_uniform(std::f64::consts::E.recip()), 0.0);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = gumbel_sample(1_000_000, &mut rng);
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn gumbel_sample_is_seeded() {
        let a = gumbel_sample(100, &mut ChaCha8Rng::seed_from_u64(3));
        let b = gumbel_sample(100, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn relaxed_examples() {
        assert_eq!(relaxed_value(0.0, 0.4, 0.4, 1.0), 0.5);
        assert!((relaxed_value(0.3, 0.2, -0.1, 1.0) - 1.0 / (1.0 + (-0.6f64).exp())).abs() < 1e-15);
        assert!(relaxed_value(800.0, 1.0, -1.0, 1.0) == 1.0);
        assert!(relaxed_mask(&[0.0], 0.0, &[0.0], &[0.0]).is_err());
        assert!(relaxed_mask(&[0.0], -1.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn threshold_ties_keep() {
        assert_eq!(hard_mask(&[0.5, 0.4999, 0.1, 0.9]), vec![true, false, false, true]);
    }

    #[test]
    fn straight_through_derivative_at_zero() {
        let s = RaydropSample::from_noise(&[0.0], 1.0, vec![0.3], vec![0.3]).unwrap();
        assert_eq!(s.logit_gradient(), vec![0.25]);
        assert_eq!(s.forward(), vec![1.0]);
    }

    #[test]
    fn straight_through_forward_matches_hard_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..500).map(|i| (i as f64 - 250.0) / 40.0).collect();
        let s = straight_through(&logits, 0.7, &mut rng).unwrap();
        assert_eq!(s.hard, hard_mask(&relaxed_mask(&logits, 0.7, &s.gumbel_keep, &s.gumbel_drop).unwrap()));
        assert!(s.forward().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn low_temperature_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let logits = vec![0.7; n];
        let s = straight_through(&logits, 1e-3, &mut rng).unwrap();
        let near = s.relaxed.iter().filter(|&&v| !(0.01..=0.99).contains(&v)).count();
        assert!(near as f64 > 0.99 * n as f64);
    }

    #[test]
    fn bernoulli_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(bernoulli_mask(&[1.0; 1000], &mut rng).unwrap().iter().all(|&k| k));
        assert!(bernoulli_mask(&[0.0; 1000], &mut rng).unwrap().iter().all(|&k| !k));
        assert!(bernoulli_mask(&[1.5], &mut rng).is_err());
    }

    fn complete(h: usize, w: usize) -> RangeImage {
        let mut img = RangeImage::new(h, w, vec![ChannelRole::Depth, ChannelRole::Reflectance, ChannelRole::RaydropLogit]).unwrap();
        for cell in 0..h * w {
            img.set_valid(cell, true);
            img.set(ChannelRole::Depth, cell, 1.0 + cell as f64);
            img.set(ChannelRole::Reflectance, cell, 0.5);
        }
        img
    }

    #[test]
    fn apply_mask_examples() {
        let img = complete(4, 6);
        let all = apply_mask(&img, &[true; 24]).unwrap();
        assert_eq!(all, img.select(&[ChannelRole::Depth, ChannelRole::Reflectance]).unwrap());
        let none = apply_mask(&img, &[false; 24]).unwrap();
        assert_eq!(none.valid_count(), 0);
        assert!(none.plane(ChannelRole::Depth).unwrap().iter().all(|&d| d == 0.0));
        let checker: Vec<bool> = (0..24).map(|c| (c / 6 + c % 6) % 2 == 0).collect();
        let half = apply_mask_normalized(&img, &checker).unwrap();
        assert_eq!(half.valid_count(), 12);
        for cell in 0..24 {
            assert_eq!(half.valid()[cell], checker[cell]);
            if !checker[cell] {
                assert_eq!(half.get(ChannelRole::Depth, cell), Some(-1.0));
            }
        }
        assert!(apply_mask(&img, &[true; 5]).is_err());
    }

    #[test]
    fn graph_modes_agree_with_scalar_path() {
        let logits = [-1.2, 0.1, 0.8, 2.5];
        let noise = [0.3, -0.2, -1.5, 0.05];
        let lt = Tensor::<f64>::new(vec![1, 1, 2, 2], logits.to_vec());
        let nt = Tensor::<f64>::new(vec![1, 1, 2, 2], noise.to_vec());
        let mut g = Graph::new();
        let l = g.leaf(lt.clone(), true);
        let st = mask_in_graph(&mut g, l, &nt, 1.0, &MaskMode::StraightThrough);
        let anchored = mask_in_graph(&mut g, l, &nt, 1.0, &MaskMode::Anchored(anchor_offset(&lt, &nt, 1.0)));
        for i in 0..4 {
            let hard = if relaxed_value(logits[i], noise[i], 0.0, 1.0) >= 0.5 { 1.0 } else { 0.0 };
            assert_eq!(g.value(st).data()[i], hard);
            assert!((g.value(anchored).data()[i] - hard).abs() < 1e-15);
        }
        let loss = g.sum(st);
        let grads = g.backward(loss);
        for (i, d) in grads.get(l).unwrap().data().iter().enumerate() {
            assert!((d - relaxed_derivative(logits[i], noise[i], 0.0, 1.0)).abs() < 1e-15);
        }
    }
}
