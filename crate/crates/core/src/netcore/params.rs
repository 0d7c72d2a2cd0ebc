use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvGeom, Graph, PadMode, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; layouts are fixed by the network spec.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a leaf of `g`, in store order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// `(prefix + name, tensor)` pairs in f64.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<f64>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.cast()))
            .collect()
    }

    /// Overwrites every parameter from `(prefix + name)` entries; missing
    /// names and shape differences are errors.
    pub fn import(&mut self, prefix: &str, entries: &[(String, Tensor<f64>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<f64>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {key}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {key} has shape {:?} in checkpoint, model expects {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.cast();
        }
        Ok(())
    }
}

/// Convolution with parameter slots in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: Option<usize>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], self.b.map(|b| p[b]), self.geom)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }
}

/// Registers layers with Xavier-normal weights (scaled by `gain`) and zero biases.
pub(crate) struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub gain: f64,
    pub row_pad: PadMode,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn xavier(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let std = self.gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(self.rng)).collect();
        Tensor::from_f64(shape, &data)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Conv {
        let rf = k * k;
        let w = self.xavier(vec![cout, cin, k, k], cin * rf, cout * rf);
        let w = self.store.add(format!("{name}.weight"), w);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Conv {
            w,
            b,
            geom: ConvGeom::square(k, stride, pad, self.row_pad, PadMode::Circular),
        }
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let w = self.xavier(vec![out, inp], inp, out);
        Linear {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    pub fn table(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let t = self.xavier(vec![rows, cols], rows, cols);
        self.store.add(name.to_string(), t)
    }
}
