//! Adversarial and patch-contrastive objectives.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::netcore::{Discriminator, FeatureStack, GenerateOutput, Generator, ProjectionHeads, RaydropMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Binary cross-entropy on logits; the generator uses the non-saturating form.
    Vanilla,
    #[default]
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanRole {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub nce_weight: f64,
    pub identity_weight: f64,
    pub gan_mode: GanMode,
    /// Locations sampled per tap layer (capped by the layer size).
    pub patches_per_layer: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            nce_weight: 1.0,
            identity_weight: 2.0,
            gan_mode: GanMode::LeastSquares,
            patches_per_layer: 256,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.nce_weight >= 0.0 && self.identity_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.patches_per_layer == 0 {
            return Err(Error::Config("patches_per_layer must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn mean(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
}

/// Adversarial loss over score maps. `real` is ignored for the generator role.
pub fn gan_loss(real: &[f64], fake: &[f64], role: GanRole, mode: GanMode) -> Result<f64> {
    if fake.is_empty() || (role == GanRole::Discriminator && real.is_empty()) {
        return Err(Error::Empty("score map".into()));
    }
    Ok(match (mode, role) {
        (GanMode::LeastSquares, GanRole::Discriminator) => mean(real, |r| (r - 1.0) * (r - 1.0)) + mean(fake, |f| f * f),
        (GanMode::LeastSquares, GanRole::Generator) => mean(fake, |f| (f - 1.0) * (f - 1.0)),
        // -log σ(r) - log(1 - σ(f))
        (GanMode::Vanilla, GanRole::Discriminator) => mean(real, |r| softplus(-r)) + mean(fake, softplus),
        (GanMode::Vanilla, GanRole::Generator) => mean(fake, |f| softplus(-f)),
    })
}

/// Differentiable counterpart of [`gan_loss`].
pub fn gan_loss_graph<T: Scalar>(g: &mut Graph<T>, real: Option<Var>, fake: Var, role: GanRole, mode: GanMode) -> Result<Var> {
    if g.value(fake).is_empty() {
        return Err(Error::Empty("score map".into()));
    }
    let fake_term = |g: &mut Graph<T>, target: f64| match mode {
        GanMode::LeastSquares => g.mean_squared_from(fake, target),
        GanMode::Vanilla => g.bce_with_logits(fake, target),
    };
    match role {
        GanRole::Generator => Ok(fake_term(g, 1.0)),
        GanRole::Discriminator => {
            let real = real.ok_or_else(|| Error::InvalidArgument("discriminator loss needs real scores".into()))?;
            if g.value(real).is_empty() {
                return Err(Error::Empty("score map".into()));
            }
            let r = match mode {
                GanMode::LeastSquares => g.mean_squared_from(real, 1.0),
                GanMode::Vanilla => g.bce_with_logits(real, 1.0),
            };
            let f = fake_term(g, 0.0);
            Ok(g.add(r, f))
        }
    }
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!("{what} has norm {n}, expected a unit vector")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of the softmax over `[positive, negatives...]` cosine
/// similarities divided by `temperature`, with the positive as target.
/// Returns 0 when there are no negatives.
pub fn patch_nce_single(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    check_unit(anchor, "anchor")?;
    check_unit(positive, "positive")?;
    for (i, n) in negatives.iter().enumerate() {
        if n.len() != anchor.len() {
            return Err(Error::DimensionMismatch {
                what: "patch embedding",
                detail: format!("negative {i} has {} dims, anchor {}", n.len(), anchor.len()),
            });
        }
        check_unit(n, "negative")?;
    }
    if positive.len() != anchor.len() {
        return Err(Error::DimensionMismatch {
            what: "patch embedding",
            detail: format!("positive has {} dims, anchor {}", positive.len(), anchor.len()),
        });
    }
    if negatives.is_empty() {
        return Ok(0.0);
    }
    let mut logits = vec![dot(anchor, positive) / temperature];
    logits.extend(negatives.iter().map(|n| dot(anchor, n) / temperature));
    Ok(cross_entropy_first(&logits))
}

/// `-log softmax(logits)[0]`, stable for large logits.
pub fn cross_entropy_first(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if logits[0] == m {
        // log(1 + Σ e^(l_i - l_0)) keeps precision when the target dominates
        return logits[1..].iter().map(|&l| (l - m).exp()).sum::<f64>().ln_1p();
    }
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Mean over tap layers of the per-layer contrastive loss between output
/// embeddings `q[l]` (anchors) and source embeddings `k[l]` (positives and
/// negatives). Each layer's loss is the mean over all sampled locations.
pub fn patch_nce_layers<T: Scalar>(g: &mut Graph<T>, q: &[Var], k: &[Var], images: usize, temperature: f64) -> Result<Var> {
    if q.is_empty() || q.len() != k.len() {
        return Err(Error::Shape(format!("{} anchor layers vs {} key layers", q.len(), k.len())));
    }
    let mut acc: Option<Var> = None;
    for (&ql, &kl) in q.iter().zip(k) {
        if g.value(ql).shape() != g.value(kl).shape() {
            return Err(Error::Shape(format!(
                "anchor {:?} vs key {:?}",
                g.value(ql).shape(),
                g.value(kl).shape()
            )));
        }
        let l = g.patch_nce(ql, kl, images, temperature);
        acc = Some(match acc {
            Some(a) => g.add(a, l),
            None => l,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / q.len() as f64))
}

/// Contrastive loss between a source batch (already encoded, `source_taps`)
/// and the generator `output` for it, using the same locations for both.
#[allow(clippy::too_many_arguments)]
pub fn patch_nce<T: Scalar>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    gp: &[Var],
    heads: &ProjectionHeads<T>,
    hp: &[Var],
    source_taps: &[Var],
    output: Var,
    locations: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    let images = g.value(output).dims4().0;
    let out_enc = gen.encode(g, gp, output)?;
    let q = heads.project(
        g,
        hp,
        &FeatureStack {
            taps: out_enc.taps,
            locations: locations.to_vec(),
        },
    )?;
    let k = heads.project(
        g,
        hp,
        &FeatureStack {
            taps: source_taps.to_vec(),
            locations: locations.to_vec(),
        },
    )?;
    patch_nce_layers(g, &q, &k, images, temperature)
}

/// Loss terms of one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub nce_x: f64,
    pub nce_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [("gan", self.gan), ("nce_x", self.nce_x), ("nce_y", self.nce_y), ("total", self.total)]
    }
}

/// `gan + nce_weight * nce_x + identity_weight * nce_y`.
pub fn total_loss(gan: f64, nce_x: f64, nce_y: f64, config: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        gan,
        nce_x,
        nce_y,
        total: gan + config.nce_weight * nce_x + config.identity_weight * nce_y,
    }
}

/// Bound parameters of the three networks in one graph.
pub struct BoundParams {
    pub gen: Vec<Var>,
    pub heads: Vec<Var>,
    pub disc: Vec<Var>,
}

/// Inputs of the generator objective.
pub struct GeneratorBatch<'a, T> {
    /// `[N, 2, H, W]` normalized simulated scans.
    pub x: &'a Tensor<T>,
    /// Class ids of `x`, `[N, H, W]` flattened.
    pub x_ids: &'a [usize],
    /// `[N, 2, H, W]` normalized real scans.
    pub y: &'a Tensor<T>,
    pub raydrop_x: &'a RaydropMode<T>,
    pub raydrop_y: &'a RaydropMode<T>,
    /// Locations per tap for the two contrastive terms.
    pub locations_x: &'a [Vec<usize>],
    pub locations_y: &'a [Vec<usize>],
}

pub struct ObjectiveVars {
    pub total: Var,
    pub gan: Var,
    pub nce_x: Var,
    pub nce_y: Var,
    /// Translated batch `[N, 2, H, W]`.
    pub fake: Var,
}

/// Builds the generator-side objective. The discriminator is evaluated with
/// whatever parameters `bound.disc` holds (normally frozen constants).
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    heads: &ProjectionHeads<T>,
    disc: &Discriminator<T>,
    bound: &BoundParams,
    batch: &GeneratorBatch<'_, T>,
    config: &LossConfig,
) -> Result<ObjectiveVars> {
    let x = g.constant(batch.x.clone());
    let out = gen.generate(g, &bound.gen, x, Some(batch.x_ids), batch.raydrop_x)?;
    objective_from_output(g, gen, heads, disc, bound, &out, batch, config)
}

/// Second half of [`generator_objective`], for callers that need the
/// translated batch before the discriminator parameters are bound.
#[allow(clippy::too_many_arguments)]
pub fn objective_from_output<T: Scalar>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    heads: &ProjectionHeads<T>,
    disc: &Discriminator<T>,
    bound: &BoundParams,
    out: &GenerateOutput,
    batch: &GeneratorBatch<'_, T>,
    config: &LossConfig,
) -> Result<ObjectiveVars> {
    let scores = disc.forward(g, &bound.disc, out.output)?;
    let gan = gan_loss_graph(g, None, scores, GanRole::Generator, config.gan_mode)?;
    let zero = || Tensor::scalar(T::zero());
    let nce_x = if config.nce_weight > 0.0 {
        patch_nce(g, gen, &bound.gen, heads, &bound.heads, &out.encoded.taps, out.output, batch.locations_x, config.temperature)?
    } else {
        g.constant(zero())
    };
    let nce_y = if config.identity_weight > 0.0 {
        let y = g.constant(batch.y.clone());
        let (n, _, h, w) = batch.y.dims4();
        // real scans carry no labels: the auxiliary encoder sees the unlabeled id
        let unlabeled = vec![0usize; n * h * w];
        let ids = gen.spec().aux.as_ref().map(|_| unlabeled.as_slice());
        let idt = gen.generate(g, &bound.gen, y, ids, batch.raydrop_y)?;
        patch_nce(g, gen, &bound.gen, heads, &bound.heads, &idt.encoded.taps, idt.output, batch.locations_y, config.temperature)?
    } else {
        g.constant(zero())
    };
    let a = g.scale(nce_x, config.nce_weight);
    let b = g.scale(nce_y, config.identity_weight);
    let t = g.add(gan, a);
    let total = g.add(t, b);
    Ok(ObjectiveVars {
        total,
        gan,
        nce_x,
        nce_y,
        fake: out.output,
    })
}

/// Discriminator objective on real scans and (detached) translated scans.
pub fn discriminator_objective<T: Scalar>(g: &mut Graph<T>, disc: &Discriminator<T>, dp: &[Var], real: &Tensor<T>, fake: &Tensor<T>, mode: GanMode) -> Result<Var> {
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let sr = disc.forward(g, dp, r)?;
    let sf = disc.forward(g, dp, f)?;
    gan_loss_graph(g, Some(sr), sf, GanRole::Discriminator, mode)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

/// Appends one JSON record per term.
pub fn write_records<W: Write + ?Sized>(out: &mut W, step: u64, terms: &[(&str, f64)]) -> std::io::Result<()> {
    for (term, value) in terms {
        let rec = LossRecord {
            step,
            term: (*term).to_string(),
            value: *value,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gan_examples() {
        let ones = [1.0; 6];
        let zeros = [0.0; 6];
        assert_eq!(gan_loss(&ones, &zeros, GanRole::Discriminator, GanMode::LeastSquares).unwrap(), 0.0);
        assert_eq!(gan_loss(&[], &ones, GanRole::Generator, GanMode::LeastSquares).unwrap(), 0.0);
        let v = gan_loss(&zeros, &zeros, GanRole::Discriminator, GanMode::Vanilla).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(gan_loss(&ones, &[], GanRole::Generator, GanMode::Vanilla).is_err());
    }

    #[test]
    fn graph_gan_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        for mode in [GanMode::Vanilla, GanMode::LeastSquares] {
            for role in [GanRole::Generator, GanRole::Discriminator] {
                let mut g = Graph::<f64>::new();
                let rv = g.constant(Tensor::new(vec![1, 1, 3, 4], r.clone()));
                let fv = g.constant(Tensor::new(vec![1, 1, 3, 4], f.clone()));
                let l = gan_loss_graph(&mut g, Some(rv), fv, role, mode).unwrap();
                let s = gan_loss(&r, &f, role, mode).unwrap();
                assert!((g.value(l).item() - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn nce_single_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let v = patch_nce_single(&e1, &e1, std::slice::from_ref(&e2), 0.07).unwrap();
        let oracle = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((v - oracle).abs() < 1e-20 && (v - 6.2e-7).abs() < 1e-8);
        let v = patch_nce_single(&e1, &e2, std::slice::from_ref(&e1), 0.07).unwrap();
        assert!((v - (1.0 / 0.07 + (-1.0f64 / 0.07).exp().ln_1p())).abs() < 1e-12);
        assert!((v - 14.286).abs() < 1e-3);
        assert_eq!(patch_nce_single(&e1, &e1, &[], 0.07).unwrap(), 0.0);
        assert!(patch_nce_single(&[2.0, 0.0, 0.0], &e1, &[], 0.07).is_err());
        assert!(patch_nce_single(&e1, &e1, &[e2], 0.0).is_err());
    }

    #[test]
    fn nce_single_decreases_with_positive_similarity() {
        let a = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0], vec![-0.6, 0.8]];
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let ang = std::f64::consts::PI * (1.0 - k as f64 / 10.0);
            let p = vec![ang.cos(), ang.sin()];
            let v = patch_nce_single(&a, &p, &neg, 0.07).unwrap();
            assert!(v >= 0.0 && v < prev, "{k}: {v} vs {prev}");
            prev = v;
        }
    }

    #[test]
    fn totals_and_records() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &cfg).total, 4.0);
        let zero = LossConfig {
            nce_weight: 0.0,
            identity_weight: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(0.3, 5.0, 7.0, &zero).total, 0.3);
        let mut buf = Vec::new();
        write_records(&mut buf, 7, &total_loss(0.5, 0.25, 0.125, &LossConfig::default()).terms()).unwrap();
        let lines: Vec<LossRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], LossRecord { step: 7, term: "total".into(), value: 1.0 });
    }

    fn random_unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::new();
        for _ in 0..rows {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / n));
        }
        out
    }

    #[test]
    fn layer_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (images, s, d) = (2, 5, 4);
        let q = random_unit_rows(images * s, d, &mut rng);
        let k = random_unit_rows(images * s, d, &mut rng);
        let mut g = Graph::<f64>::new();
        let qv = g.constant(Tensor::new(vec![images * s, d], q.clone()));
        let kv = g.constant(Tensor::new(vec![images * s, d], k.clone()));
        let l = patch_nce_layers(&mut g, &[qv, qv], &[kv, kv], images, 0.07).unwrap();
        let mut oracle = 0.0;
        for img in 0..images {
            for a in 0..s {
                let row = |m: &[f64], i: usize| m[(img * s + i) * d..(img * s + i + 1) * d].to_vec();
                let negs: Vec<Vec<f64>> = (0..s).filter(|&j| j != a).map(|j| row(&k, j)).collect();
                oracle += patch_nce_single(&row(&q, a), &row(&k, a), &negs, 0.07).unwrap();
            }
        }
        oracle /= (images * s) as f64;
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn random_stacks_concentrate_near_log_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, d) = (64, 256);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(vec![s, d], random_unit_rows(s, d, &mut rng)));
        let k = g.constant(Tensor::new(vec![s, d], random_unit_rows(s, d, &mut rng)));
        let l = patch_nce_layers(&mut g, &[q], &[k], 1, 0.07).unwrap();
        let v = g.value(l).item();
        assert!((v / 64f64.ln() - 1.0).abs() < 0.15, "{v}");
    }
}
