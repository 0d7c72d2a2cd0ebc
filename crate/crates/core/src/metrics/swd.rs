use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::{ChannelRole, RangeImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwdConfig {
    pub patch_size: usize,
    pub pyramid_levels: usize,
    pub projections: usize,
    pub descriptors_per_image: usize,
    /// Include reflectance next to depth in each descriptor.
    pub use_reflectance: bool,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            patch_size: 7,
            pyramid_levels: 2,
            projections: 512,
            descriptors_per_image: 128,
            use_reflectance: false,
        }
    }
}

impl SwdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.pyramid_levels == 0 || self.projections == 0 || self.descriptors_per_image == 0 {
            return Err(Error::Config("SWD sizes must be positive".into()));
        }
        Ok(())
    }

    fn roles(&self) -> Vec<ChannelRole> {
        if self.use_reflectance {
            vec![ChannelRole::Depth, ChannelRole::Reflectance]
        } else {
            vec![ChannelRole::Depth]
        }
    }
}

/// Planes of one image at one pyramid level.
struct Level {
    h: usize,
    w: usize,
    planes: Vec<Vec<f64>>,
}

fn downsample(l: &Level) -> Level {
    let (h, w) = (l.h / 2, l.w / 2);
    let planes = l
        .planes
        .iter()
        .map(|p| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let s = p[2 * y * l.w + 2 * x] + p[2 * y * l.w + 2 * x + 1] + p[(2 * y + 1) * l.w + 2 * x] + p[(2 * y + 1) * l.w + 2 * x + 1];
                    out[y * w + x] = 0.25 * s;
                }
            }
            out
        })
        .collect();
    Level { h, w, planes }
}

fn pyramid(img: &RangeImage, cfg: &SwdConfig) -> Result<Vec<Level>> {
    let planes = cfg.roles().iter().map(|r| img.plane(*r)).collect::<Result<Vec<_>>>()?;
    let mut levels = vec![Level {
        h: img.height(),
        w: img.width(),
        planes,
    }];
    for _ in 1..cfg.pyramid_levels {
        let next = downsample(levels.last().expect("non-empty"));
        levels.push(next);
    }
    if let Some(l) = levels.iter().find(|l| l.h < cfg.patch_size || l.w < cfg.patch_size) {
        return Err(Error::Shape(format!(
            "pyramid level of {}x{} is smaller than the {} px patch",
            l.h, l.w, cfg.patch_size
        )));
    }
    Ok(levels)
}

/// Random patches of every image at `level`; positions come from `rng`.
fn descriptors<R: Rng + ?Sized>(pyrs: &[Vec<Level>], level: usize, cfg: &SwdConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let k = cfg.patch_size;
    let mut out = Vec::with_capacity(pyrs.len() * cfg.descriptors_per_image);
    for p in pyrs {
        let l = &p[level];
        for _ in 0..cfg.descriptors_per_image {
            let y0 = rng.random_range(0..=l.h - k);
            let x0 = rng.random_range(0..=l.w - k);
            let mut d = Vec::with_capacity(k * k * l.planes.len());
            for plane in &l.planes {
                for y in 0..k {
                    d.extend_from_slice(&plane[(y0 + y) * l.w + x0..(y0 + y) * l.w + x0 + k]);
                }
            }
            out.push(d);
        }
    }
    out
}

/// Zero mean and unit variance per channel over the whole set.
fn normalize_set(desc: &mut [Vec<f64>], channels: usize) {
    if desc.is_empty() {
        return;
    }
    let per = desc[0].len() / channels;
    for c in 0..channels {
        let vals = || desc.iter().flat_map(|d| d[c * per..(c + 1) * per].iter());
        let n = (desc.len() * per) as f64;
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for d in desc.iter_mut() {
            for v in &mut d[c * per..(c + 1) * per] {
                *v = (*v - mean) * inv;
            }
        }
    }
}

/// W1 between two sorted samples: the integral of |F_a - F_b|.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Sliced Wasserstein distance between depth patch statistics of two image
/// sets. Both sets draw patch positions from the same RNG state.
pub fn swd<R: Rng + ?Sized>(a: &[RangeImage], b: &[RangeImage], cfg: &SwdConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("SWD needs two non-empty image sets".into()));
    }
    let pa = a.iter().map(|i| pyramid(i, cfg)).collect::<Result<Vec<_>>>()?;
    let pb = b.iter().map(|i| pyramid(i, cfg)).collect::<Result<Vec<_>>>()?;
    let channels = cfg.roles().len();
    let mut total = 0.0;
    for level in 0..cfg.pyramid_levels {
        let seed: [u8; 32] = rng.random();
        let mut ra: rand_chacha::ChaCha8Rng = rand::SeedableRng::from_seed(seed);
        let mut rb: rand_chacha::ChaCha8Rng = rand::SeedableRng::from_seed(seed);
        let mut da = descriptors(&pa, level, cfg, &mut ra);
        let mut db = descriptors(&pb, level, cfg, &mut rb);
        normalize_set(&mut da, channels);
        normalize_set(&mut db, channels);
        let dim = da[0].len();
        let mut acc = 0.0;
        for _ in 0..cfg.projections {
            let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let project = |set: &[Vec<f64>]| {
                let mut p: Vec<f64> = set.iter().map(|d| d.iter().zip(&dir).map(|(x, y)| x * y).sum()).collect();
                p.sort_by(f64::total_cmp);
                p
            };
            acc += wasserstein_1d(&project(&da), &project(&db));
        }
        total += acc / cfg.projections as f64;
    }
    Ok(total / cfg.pyramid_levels as f64)
}
