//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a leaf created with `requires_grad = true`.

use super::conv::{conv2d_backward, conv2d_forward, upsample2x_backward, upsample2x_forward, ConvGeom};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    InstanceNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    AddScalar(Var),
    MulChannels { x: Var, m: Var },
    SliceChannels { x: Var, start: usize },
    ConcatChannels(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    Gather { x: Var, locs: Vec<Vec<usize>> },
    Linear { x: Var, w: Var, b: Var },
    L2NormRows { x: Var, norms: Vec<T> },
    PatchNce { q: Var, k: Var, images: usize, per_image: usize, temperature: T, probs: Vec<T> },
    MeanSquaredFrom { x: Var, target: T },
    BceWithLogits { x: Var, target: T },
    Mean(Var),
    Sum(Var),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = upsample2x_forward(self.value(x));
        self.push(value, Op::Upsample2x(x), &[x])
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let eps = T::from_f64_lossy(eps);
        let inv_hw = T::from_usize(hw).unwrap().recip();
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let xs = &src[plane * hw..(plane + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() * inv_hw;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = (var + eps).sqrt().recip();
            inv_std[plane] = is;
            for (o, &v) in xhat[plane * hw..(plane + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], xhat.clone());
        self.push(value, Op::InstanceNorm { x, xhat, inv_std }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a tensor that takes no gradient (noise, skip inputs, offsets).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let mut value = self.value(x).clone();
        value.add_assign(c);
        self.push(value, Op::AddConst(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// `x: [N, C, H, W] * m: [N, 1, H, W]`, broadcasting over channels.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(m).shape(), &[n, 1, h, w], "mul_channels: mask shape");
        let hw = h * w;
        let xs = self.value(x).data();
        let ms = self.value(m).data();
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            let mm = &ms[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = xs[base + i] * mm[i];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::MulChannels { x, m }, &[x, m])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&xs[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        self.push(Tensor::new(vec![n, len, h, w], out), Op::SliceChannels { x, start }, &[x])
    }

    /// `[N, Ca, H, W] ++ [N, Cb, H, W] -> [N, Ca + Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: shape mismatch");
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&xa[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&xb[s * cb * hw..(s + 1) * cb * hw]);
        }
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::ConcatChannels(a, b), &[a, b])
    }

    /// Looks up `table: [K, E]` rows for integer ids laid out as `[N, H, W]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>, n: usize, h: usize, w: usize) -> Var {
        let (k, e) = self.value(table).dims2();
        assert_eq!(ids.len(), n * h * w, "embedding: id count");
        let hw = h * w;
        let tab = self.value(table).data();
        let mut out = vec![T::zero(); n * e * hw];
        for s in 0..n {
            for i in 0..hw {
                let id = ids[s * hw + i];
                assert!(id < k, "embedding id {id} out of range {k}");
                for j in 0..e {
                    out[(s * e + j) * hw + i] = tab[id * e + j];
                }
            }
        }
        self.push(Tensor::new(vec![n, e, h, w], out), Op::Embedding { table, ids }, &[table])
    }

    /// Picks feature vectors at flat spatial locations: `[N, C, H, W] -> [N*S, C]`.
    pub fn gather_locations(&mut self, x: Var, locs: Vec<Vec<usize>>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(locs.len(), n, "gather: one location list per sample");
        let s_count = locs.first().map_or(0, Vec::len);
        assert!(locs.iter().all(|l| l.len() == s_count), "gather: ragged location lists");
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * s_count * c);
        for (s, l) in locs.iter().enumerate() {
            for &u in l {
                assert!(u < hw, "gather: location {u} out of bounds {hw}");
                for ch in 0..c {
                    out.push(xs[(s * c + ch) * hw + u]);
                }
            }
        }
        self.push(Tensor::new(vec![n * s_count, c], out), Op::Gather { x, locs }, &[x])
    }

    /// `x: [R, In]`, `w: [Out, In]`, `b: [Out]` -> `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (r, inp) = self.value(x).dims2();
        let (out, win) = self.value(w).dims2();
        assert_eq!(inp, win, "linear: input width");
        let mut y = Vec::with_capacity(r * out);
        for _ in 0..r {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            r,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            1,
            inp as isize,
            T::one(),
            &mut y,
            out as isize,
            1,
        );
        self.push(Tensor::new(vec![r, out], y), Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.value(x).dims2();
        let eps = T::from_f64_lossy(eps);
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(nrm);
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        self.push(Tensor::new(vec![r, c], out), Op::L2NormRows { x, norms }, &[x])
    }

    /// Contrastive patch loss: for each image, row `i` of `q` is the anchor,
    /// row `i` of `k` its positive and the other rows of `k` its negatives.
    /// Returns the mean cross-entropy over all anchors of all images.
    pub fn patch_nce(&mut self, q: Var, k: Var, images: usize, temperature: f64) -> Var {
        let (rows, d) = self.value(q).dims2();
        assert_eq!(self.value(k).dims2(), (rows, d), "patch_nce: q/k shape");
        assert!(images > 0 && rows % images == 0, "patch_nce: rows not divisible by images");
        let s = rows / images;
        let temperature_t = T::from_f64_lossy(temperature);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut probs = vec![T::zero(); images * s * s];
        let mut total = T::zero();
        if s > 1 {
            let mut logits = vec![T::zero(); s * s];
            for img in 0..images {
                let qi = &qd[img * s * d..(img + 1) * s * d];
                let ki = &kd[img * s * d..(img + 1) * s * d];
                T::gemm(s, d, s, temperature_t.recip(), qi, d as isize, 1, ki, 1, d as isize, T::zero(), &mut logits, s as isize, 1);
                for a in 0..s {
                    let row = &logits[a * s..(a + 1) * s];
                    let lse = log_sum_exp(row);
                    total = total + lse - row[a];
                    for (j, &l) in row.iter().enumerate() {
                        probs[(img * s + a) * s + j] = (l - lse).exp();
                    }
                }
            }
            total = total / T::from_usize(images * s).unwrap();
        }
        self.push(
            Tensor::scalar(total),
            Op::PatchNce {
                q,
                k,
                images,
                per_image: s,
                temperature: temperature_t,
                probs,
            },
            &[q, k],
        )
    }

    pub fn mean_squared_from(&mut self, x: Var, target: f64) -> Var {
        let t = T::from_f64_lossy(target);
        let xs = self.value(x);
        assert!(!xs.is_empty(), "mean_squared_from on empty tensor");
        let m = xs.data().iter().map(|&v| (v - t) * (v - t)).sum::<T>() / T::from_usize(xs.len()).unwrap();
        self.push(Tensor::scalar(m), Op::MeanSquaredFrom { x, target: t }, &[x])
    }

    /// Mean binary cross-entropy of sigmoid(x) against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let t = T::from_f64_lossy(target);
        let xs = self.value(x);
        assert!(!xs.is_empty(), "bce_with_logits on empty tensor");
        let m = xs
            .data()
            .iter()
            .map(|&v| t * softplus(-v) + (T::one() - t) * softplus(v))
            .sum::<T>()
            / T::from_usize(xs.len()).unwrap();
        self.push(Tensor::scalar(m), Op::BceWithLogits { x, target: t }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.sum() / T::from_usize(xs.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Forward: `1` where `x >= 0.5`, else `0`. Backward: identity.
    pub fn straight_through(&mut self, x: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let value = self.value(x).map(|v| if v >= half { T::one() } else { T::zero() });
        self.push(value, Op::StraightThrough(x), &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // intermediate gradients are released once propagated
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), g, geom, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Upsample2x(x) => accumulate(grads, *x, upsample2x_backward(g)),
            Op::InstanceNorm { x, xhat, inv_std } => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let inv_hw = T::from_usize(hw).unwrap().recip();
                let gd = g.data();
                let mut dx = vec![T::zero(); gd.len()];
                for plane in 0..n * c {
                    let r = plane * hw..(plane + 1) * hw;
                    let gp = &gd[r.clone()];
                    let xh = &xhat[r.clone()];
                    let mean_g = gp.iter().copied().sum::<T>() * inv_hw;
                    let mean_gx = gp.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    let is = inv_std[plane];
                    for ((d, &gv), &xv) in dx[r].iter_mut().zip(gp).zip(xh) {
                        *d = is * (gv - mean_g - xv * mean_gx);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = g.data().iter().zip(xs).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() });
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d.collect()));
            }
            Op::LeakyRelu(x, s) => {
                let xs = self.value(*x).data();
                let d = g.data().iter().zip(xs).map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *s });
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d.collect()));
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (T::one() - yv * yv));
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d.collect()));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (T::one() - yv));
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d.collect()));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddConst(x) | Op::AddScalar(x) | Op::StraightThrough(x) => accumulate(grads, *x, g.clone()),
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * *c)),
            Op::MulChannels { x, m } => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let xs = self.value(*x).data();
                let ms = self.value(*m).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                dx[base + i] = gd[base + i] * ms[s * hw + i];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                if self.needs(*m) {
                    let mut dm = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                dm[s * hw + i] = dm[s * hw + i] + gd[base + i] * xs[base + i];
                            }
                        }
                    }
                    accumulate(grads, *m, Tensor::new(vec![n, 1, h, w], dm));
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = y.dims4().1;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    dx[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db));
                }
            }
            Op::Embedding { table, ids } => {
                let (k, e) = self.value(*table).dims2();
                let (n, _, h, w) = y.dims4();
                let hw = h * w;
                let mut dt = vec![T::zero(); k * e];
                for s in 0..n {
                    for i in 0..hw {
                        let id = ids[s * hw + i];
                        for j in 0..e {
                            dt[id * e + j] = dt[id * e + j] + g.data()[(s * e + j) * hw + i];
                        }
                    }
                }
                accumulate(grads, *table, Tensor::new(vec![k, e], dt));
            }
            Op::Gather { x, locs } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                let mut row = 0;
                for (s, l) in locs.iter().enumerate() {
                    for &u in l {
                        for ch in 0..c {
                            let idx = (s * c + ch) * hw + u;
                            dx[idx] = dx[idx] + g.data()[row * c + ch];
                        }
                        row += 1;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx));
            }
            Op::Linear { x, w, b } => {
                let (r, inp) = self.value(*x).dims2();
                let (out, _) = self.value(*w).dims2();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); r * inp];
                    T::gemm(r, out, inp, T::one(), gd, out as isize, 1, self.value(*w).data(), inp as isize, 1, T::zero(), &mut dx, inp as isize, 1);
                    accumulate(grads, *x, Tensor::new(vec![r, inp], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    T::gemm(out, r, inp, T::one(), gd, 1, out as isize, self.value(*x).data(), inp as isize, 1, T::zero(), &mut dw, inp as isize, 1);
                    accumulate(grads, *w, Tensor::new(vec![out, inp], dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); out];
                    for row in gd.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![out], db));
                }
            }
            Op::L2NormRows { x, norms } => {
                let (r, c) = y.dims2();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gv), &yv) in dx[i * c..(i + 1) * c].iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::PatchNce {
                q,
                k,
                images,
                per_image: s,
                temperature,
                probs,
            } => {
                let (rows, d) = self.value(*q).dims2();
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                if *s > 1 {
                    // dL/dlogit_ij = (p_ij - δ_ij) / (images * s); logits = q kᵀ / temperature
                    let scale = g.item() / (T::from_usize(images * s).unwrap() * *temperature);
                    let mut dl = vec![T::zero(); s * s];
                    for img in 0..*images {
                        for a in 0..*s {
                            for j in 0..*s {
                                let delta = if a == j { T::one() } else { T::zero() };
                                dl[a * s + j] = (probs[(img * s + a) * s + j] - delta) * scale;
                            }
                        }
                        let qi = &self.value(*q).data()[img * s * d..(img + 1) * s * d];
                        let ki = &self.value(*k).data()[img * s * d..(img + 1) * s * d];
                        T::gemm(*s, *s, d, T::one(), &dl, *s as isize, 1, ki, d as isize, 1, T::zero(), &mut dq[img * s * d..(img + 1) * s * d], d as isize, 1);
                        T::gemm(*s, *s, d, T::one(), &dl, 1, *s as isize, qi, d as isize, 1, T::zero(), &mut dk[img * s * d..(img + 1) * s * d], d as isize, 1);
                    }
                }
                if self.needs(*q) {
                    accumulate(grads, *q, Tensor::new(vec![rows, d], dq));
                }
                if self.needs(*k) {
                    accumulate(grads, *k, Tensor::new(vec![rows, d], dk));
                }
            }
            Op::MeanSquaredFrom { x, target } => {
                let xs = self.value(*x);
                let c = g.item() * T::from_f64_lossy(2.0) / T::from_usize(xs.len()).unwrap();
                accumulate(grads, *x, xs.map(|v| (v - *target) * c));
            }
            Op::BceWithLogits { x, target } => {
                let xs = self.value(*x);
                let c = g.item() / T::from_usize(xs.len()).unwrap();
                accumulate(grads, *x, xs.map(|v| (sigmoid(v) - *target) * c));
            }
            Op::Mean(x) => {
                let xs = self.value(*x);
                let c = g.item() / T::from_usize(xs.len()).unwrap();
                accumulate(grads, *x, Tensor::full(xs.shape().to_vec(), c));
            }
            Op::Sum(x) => {
                let xs = self.value(*x);
                accumulate(grads, *x, Tensor::full(xs.shape().to_vec(), g.item()));
            }
        }
    }
}
