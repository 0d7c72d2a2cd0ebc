use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Builder, Conv, ParamStore};
use crate::autodiff::{Graph, PadMode, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::raydrop::{logistic_noise, mask_in_graph, MaskMode};

const NORM_EPS: f64 = 1e-5;
/// Inputs are clipped to this magnitude before `atanh` in the residual output path.
const SKIP_CLIP: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxEncoderSpec {
    /// Number of class ids including the reserved id 0 (unlabeled).
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Default for AuxEncoderSpec {
    fn default() -> Self {
        Self {
            num_classes: 17,
            embed_dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub n_resblocks: usize,
    pub n_downsample: usize,
    /// Encoder layers whose activations feed the contrastive loss. Layer 0
    /// is the input, 1 the stem, then one per downsample and residual block.
    /// `None` picks the input, the stem, every downsample and the last
    /// encoder residual block.
    pub tap_layers: Option<Vec<usize>>,
    /// Adds `atanh(input)` before the output `tanh`, so an untrained
    /// generator starts near the identity on depth and reflectance.
    pub input_skip: bool,
    pub row_padding: PadMode,
    pub init_gain: f64,
    /// Initial bias of the raydrop logit channel.
    pub logit_bias: f64,
    pub aux: Option<AuxEncoderSpec>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_width: 16,
            n_resblocks: 4,
            n_downsample: 2,
            tap_layers: None,
            input_skip: true,
            row_padding: PadMode::Reflect,
            init_gain: 0.02,
            logit_bias: 0.0,
            aux: Some(AuxEncoderSpec::default()),
        }
    }
}

impl GeneratorSpec {
    /// Residual blocks in the encoder; the rest belong to the decoder.
    pub fn encoder_resblocks(&self) -> usize {
        self.n_resblocks.div_ceil(2)
    }

    /// Number of encoder layers, counting the input as layer 0.
    pub fn encoder_layers(&self) -> usize {
        2 + self.n_downsample + self.encoder_resblocks()
    }

    pub fn taps(&self) -> Vec<usize> {
        match &self.tap_layers {
            Some(t) => t.clone(),
            None => {
                let mut t: Vec<usize> = (0..=self.n_downsample + 1).collect();
                t.push(self.encoder_layers() - 1);
                t
            }
        }
    }

    /// Spatial size must be a multiple of this.
    pub fn stride(&self) -> usize {
        1 << self.n_downsample
    }

    /// Channels of the encoder layer `layer`.
    pub fn layer_channels(&self, layer: usize) -> usize {
        match layer {
            0 => 2,
            l if l <= 1 + self.n_downsample => self.base_width << (l - 1),
            _ => self.base_width << self.n_downsample,
        }
    }

    /// Downsampling factor of the encoder layer `layer`.
    pub fn layer_scale(&self, layer: usize) -> usize {
        1 << layer.saturating_sub(1).min(self.n_downsample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("generator base_width must be positive".into()));
        }
        if self.n_downsample == 0 || self.n_downsample > 6 {
            return Err(Error::Config(format!("n_downsample {} outside 1..=6", self.n_downsample)));
        }
        if self.n_resblocks == 0 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        if !(self.init_gain > 0.0) {
            return Err(Error::Config("init_gain must be positive".into()));
        }
        let taps = self.taps();
        if taps.len() != 5 || taps.windows(2).any(|w| w[0] >= w[1]) || taps[4] >= self.encoder_layers() {
            return Err(Error::Config(format!(
                "tap_layers must be 5 strictly increasing indices below {}, got {taps:?}",
                self.encoder_layers()
            )));
        }
        if let Some(aux) = &self.aux {
            if aux.num_classes < 2 || aux.embed_dim == 0 {
                return Err(Error::Config("aux encoder needs >= 2 classes and a positive embedding size".into()));
            }
        }
        Ok(())
    }
}

/// How raydrop is applied at the end of [`Generator::generate`].
#[derive(Clone, Debug)]
pub enum RaydropMode<T> {
    /// Training: hard mask from `gumbel_keep - gumbel_drop` noise, relaxed gradient.
    StraightThrough(Tensor<T>),
    /// Relaxed mask in both passes.
    Relaxed(Tensor<T>),
    /// Relaxed mask plus a frozen offset (see [`MaskMode::Anchored`]).
    Anchored { noise: Tensor<T>, offset: Tensor<T> },
    /// Inference: keep where `u < sigmoid(logit)` for the given uniforms.
    Sample(Tensor<T>),
    /// No mask; the output is the complete decoded scan.
    Bypass,
}

impl<T: Scalar> RaydropMode<T> {
    pub fn draw_train<R: Rng + ?Sized>(n: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let noise = logistic_noise(n * h * w, rng);
        RaydropMode::StraightThrough(Tensor::from_f64(vec![n, 1, h, w], &noise))
    }

    pub fn draw_eval<R: Rng + ?Sized>(n: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let u: Vec<f64> = (0..n * h * w).map(|_| rng.random::<f64>()).collect();
        RaydropMode::Sample(Tensor::from_f64(vec![n, 1, h, w], &u))
    }
}

pub struct EncodeOutput {
    pub latent: Var,
    /// Activations at the configured tap layers, in layer order.
    pub taps: Vec<Var>,
}

pub struct GenerateOutput {
    /// `[N, 3, H, W]`: depth and reflectance in (-1, 1), raydrop logit.
    pub complete: Var,
    pub logits: Var,
    /// `[N, 1, H, W]`, absent in bypass mode.
    pub mask: Option<Var>,
    /// `[N, 2, H, W]` masked depth and reflectance; dropped cells are -1.
    pub output: Var,
    pub encoded: EncodeOutput,
}

#[derive(Clone, Debug)]
struct AuxLayers {
    table: usize,
    convs: Vec<Conv>,
}

/// Encoder, auxiliary encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    pub params: ParamStore<T>,
    stem: Conv,
    downs: Vec<Conv>,
    enc_res: Vec<(Conv, Conv)>,
    dec_res: Vec<(Conv, Conv)>,
    ups: Vec<Conv>,
    out: Conv,
    aux: Option<AuxLayers>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            gain: spec.init_gain,
            row_pad: spec.row_padding,
        };
        let w = spec.base_width;
        let stem = b.conv("enc.stem", 2, w, 7, 1, 3, false);
        let downs = (0..spec.n_downsample)
            .map(|i| b.conv(&format!("enc.down{i}"), w << i, w << (i + 1), 3, 2, 1, false))
            .collect();
        let wide = w << spec.n_downsample;
        let res = |b: &mut Builder<'_, T, ChaCha8Rng>, name: String| {
            (
                b.conv(&format!("{name}.conv0"), wide, wide, 3, 1, 1, false),
                b.conv(&format!("{name}.conv1"), wide, wide, 3, 1, 1, false),
            )
        };
        let n_enc = spec.encoder_resblocks();
        let enc_res = (0..n_enc).map(|i| res(&mut b, format!("enc.res{i}"))).collect();
        let dec_res = (n_enc..spec.n_resblocks).map(|i| res(&mut b, format!("dec.res{i}"))).collect();
        let ups = (0..spec.n_downsample)
            .rev()
            .map(|i| b.conv(&format!("dec.up{i}"), w << (i + 1), w << i, 3, 1, 1, false))
            .collect();
        let out = b.conv("dec.out", w, 3, 7, 1, 3, true);
        let aux = spec.aux.as_ref().map(|a| {
            let table = b.table("aux.embedding", a.num_classes, a.embed_dim);
            let mut convs = vec![b.conv("aux.conv0", a.embed_dim, w, 3, 1, 1, false)];
            for i in 0..spec.n_downsample {
                let last = i + 1 == spec.n_downsample;
                convs.push(b.conv(&format!("aux.down{i}"), w << i, w << (i + 1), 3, 2, 1, last));
            }
            AuxLayers { table, convs }
        });
        let bias = out.b.expect("output conv has a bias");
        store.tensors_mut()[bias].data_mut()[2] = T::from_f64_lossy(spec.logit_bias);
        Ok(Self {
            spec: spec.clone(),
            params: store,
            stem,
            downs,
            enc_res,
            dec_res,
            ups,
            out,
            aux,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.spec.stride();
        match shape {
            [_, 2, h, w] if *h > 0 && *w > 0 && h % s == 0 && w % s == 0 => Ok(()),
            _ => Err(Error::Shape(format!(
                "generator expects [N, 2, H, W] with H and W multiples of {s}, got {shape:?}"
            ))),
        }
    }

    fn norm_relu(g: &mut Graph<T>, x: Var) -> Var {
        let n = g.instance_norm(x, NORM_EPS);
        g.relu(n)
    }

    fn resblock(g: &mut Graph<T>, p: &[Var], (c0, c1): &(Conv, Conv), x: Var) -> Var {
        let h = c0.forward(g, p, x);
        let h = Self::norm_relu(g, h);
        let h = c1.forward(g, p, h);
        let h = g.instance_norm(h, NORM_EPS);
        g.add(x, h)
    }

    /// Depth/reflectance encoder. `p` are the bound parameters from [`ParamStore::bind`].
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<EncodeOutput> {
        self.check_input(g.value(x).shape())?;
        let taps = self.spec.taps();
        let mut captured = Vec::with_capacity(taps.len());
        let mut layer = 0;
        let mut capture = |layer: usize, v: Var| {
            if taps.contains(&layer) {
                captured.push(v);
            }
        };
        capture(layer, x);
        let h = self.stem.forward(g, p, x);
        let mut h = Self::norm_relu(g, h);
        layer += 1;
        capture(layer, h);
        for d in &self.downs {
            let y = d.forward(g, p, h);
            h = Self::norm_relu(g, y);
            layer += 1;
            capture(layer, h);
        }
        for r in &self.enc_res {
            h = Self::resblock(g, p, r, h);
            layer += 1;
            capture(layer, h);
        }
        Ok(EncodeOutput { latent: h, taps: captured })
    }

    /// Auxiliary encoder over class ids (`[N, H, W]` flattened).
    pub fn encode_aux(&self, g: &mut Graph<T>, p: &[Var], ids: &[usize], n: usize, h: usize, w: usize) -> Result<Var> {
        let aux = self
            .aux
            .as_ref()
            .ok_or_else(|| Error::Config("generator has no auxiliary encoder".into()))?;
        let k = self.spec.aux.as_ref().map_or(0, |a| a.num_classes);
        if ids.len() != n * h * w {
            return Err(Error::Shape(format!("{} class ids for {n}x{h}x{w}", ids.len())));
        }
        // unknown ids fall back to the reserved unlabeled row
        let ids: Vec<usize> = ids.iter().map(|&i| if i < k { i } else { 0 }).collect();
        let mut x = g.embedding(p[aux.table], ids, n, h, w);
        let last = aux.convs.len() - 1;
        for (i, c) in aux.convs.iter().enumerate() {
            x = c.forward(g, p, x);
            if i != last {
                x = Self::norm_relu(g, x);
            }
        }
        Ok(x)
    }

    /// Decoder to `[N, 3, H, W]`. With `input_skip`, `skip` must be the
    /// normalized input the latent was computed from.
    pub fn decode(&self, g: &mut Graph<T>, p: &[Var], z: Var, skip: Option<&Tensor<T>>) -> Result<Var> {
        let mut h = z;
        for r in &self.dec_res {
            h = Self::resblock(g, p, r, h);
        }
        for u in &self.ups {
            let up = g.upsample2x(h);
            let y = u.forward(g, p, up);
            h = Self::norm_relu(g, y);
        }
        let raw = self.out.forward(g, p, h);
        let dr = g.slice_channels(raw, 0, 2);
        let logit = g.slice_channels(raw, 2, 1);
        let dr = match (self.spec.input_skip, skip) {
            (true, Some(x)) => {
                if x.shape() != g.value(dr).shape() {
                    return Err(Error::Shape(format!(
                        "skip input {:?} does not match decoder output {:?}",
                        x.shape(),
                        g.value(dr).shape()
                    )));
                }
                let c = T::from_f64_lossy(SKIP_CLIP);
                let pre = x.map(|v| v.max(-c).min(c).atanh());
                g.add_const(dr, &pre)
            }
            (true, None) => return Err(Error::InvalidArgument("decoder with input skip needs the input".into())),
            (false, _) => dr,
        };
        let dr = g.tanh(dr);
        Ok(g.concat_channels(dr, logit))
    }

    /// Full mapping: encode, add the auxiliary latent, decode, apply raydrop.
    /// The input `x` is treated as data (no gradient flows into it through
    /// the skip path).
    pub fn generate(&self, g: &mut Graph<T>, p: &[Var], x: Var, class_ids: Option<&[usize]>, rs: &RaydropMode<T>) -> Result<GenerateOutput> {
        let (n, _, h, w) = {
            self.check_input(g.value(x).shape())?;
            g.value(x).dims4()
        };
        let encoded = self.encode(g, p, x)?;
        let z = match (&self.aux, class_ids) {
            (Some(_), Some(ids)) => {
                let zc = self.encode_aux(g, p, ids, n, h, w)?;
                g.add(encoded.latent, zc)
            }
            (Some(_), None) => {
                return Err(Error::MissingChannel("semantic (required by the auxiliary encoder)".into()))
            }
            (None, _) => encoded.latent,
        };
        let skip = self.spec.input_skip.then(|| g.value(x).clone());
        let complete = self.decode(g, p, z, skip.as_ref())?;
        let dr = g.slice_channels(complete, 0, 2);
        let logits = g.slice_channels(complete, 2, 1);
        let mask = match rs {
            RaydropMode::StraightThrough(noise) => Some(mask_in_graph(g, logits, noise, 1.0, &MaskMode::StraightThrough)),
            RaydropMode::Relaxed(noise) => Some(mask_in_graph(g, logits, noise, 1.0, &MaskMode::Relaxed)),
            RaydropMode::Anchored { noise, offset } => {
                Some(mask_in_graph(g, logits, noise, 1.0, &MaskMode::Anchored(offset.clone())))
            }
            RaydropMode::Sample(u) => {
                let lv = g.value(logits);
                if u.shape() != lv.shape() {
                    return Err(Error::Shape(format!("uniforms {:?} vs logits {:?}", u.shape(), lv.shape())));
                }
                let keep: Vec<f64> = lv
                    .data()
                    .iter()
                    .zip(u.data())
                    .map(|(&l, &u)| f64::from(u8::from(u.to_f64_lossy() < crate::raydrop::sigmoid(l.to_f64_lossy()))))
                    .collect();
                Some(g.constant(Tensor::from_f64(lv.shape().to_vec(), &keep)))
            }
            RaydropMode::Bypass => None,
        };
        let output = match mask {
            Some(m) => {
                let shifted = g.add_scalar(dr, 1.0);
                let kept = g.mul_channels(shifted, m);
                g.add_scalar(kept, -1.0)
            }
            None => dr,
        };
        Ok(GenerateOutput {
            complete,
            logits,
            mask,
            output,
            encoded,
        })
    }
}
