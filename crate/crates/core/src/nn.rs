//! Named parameter storage, the layers built on the autodiff tape, and the
//! Adam optimizer used by both training procedures.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::RngCore;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered, name-addressed parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
    Normal(f64),
}

/// Creates parameters (fresh mode) or resolves them by name against an
/// existing store (load mode), so one architecture description serves both.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut dyn RngCore>,
    prefix: Vec<String>,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn fresh(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            store,
            rng: Some(rng),
            prefix: Vec::new(),
        }
    }

    pub fn existing(store: &'a mut ParamStore<T>) -> Self {
        Self {
            store,
            rng: None,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full_name(name);
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    Init::FanIn { fan_in, gain } => {
                        Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
                    }
                    Init::Normal(std) => Tensor::randn(shape, std, rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, T::one()),
                };
                self.store.insert(&full, t)
            }
            None => {
                let id = self
                    .store
                    .id(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full} has shape {:?}, expected {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                w: pb.tensor(
                    "w",
                    &[cout, cin, k, k],
                    Init::FanIn {
                        fan_in: cin * k * k,
                        gain,
                    },
                )?,
                b: pb.tensor("b", &[cout], Init::Zeros)?,
                stride,
                pad: k / 2,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                w: pb.tensor(
                    "w",
                    &[din, dout],
                    Init::FanIn {
                        fan_in: din,
                        gain: 1.0,
                    },
                )?,
                b: if bias {
                    Some(pb.tensor("b", &[dout], Init::Zeros)?)
                } else {
                    None
                },
            })
        })
    }

    /// Applies to `[M, din]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.tensor("gamma", &[channels], Init::Ones)?,
                beta: pb.tensor("beta", &[channels], Init::Zeros)?,
                groups: default_groups(channels),
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Which parameters an optimizer step may change. Row restrictions apply to
/// the leading axis (e.g. single rows of an embedding table).
#[derive(Clone, Debug, Default)]
pub struct Trainable {
    pub full: BTreeSet<ParamId>,
    pub rows: BTreeMap<ParamId, Vec<usize>>,
}

impl Trainable {
    pub fn all<T: Real>(store: &ParamStore<T>) -> Self {
        Self {
            full: store.ids().collect(),
            rows: BTreeMap::new(),
        }
    }

    pub fn with_prefix<T: Real>(store: &ParamStore<T>, prefix: &str) -> Self {
        Self {
            full: store
                .ids()
                .filter(|&id| store.name(id).starts_with(prefix))
                .collect(),
            rows: BTreeMap::new(),
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.full.contains(&id) || self.rows.contains_key(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, trainable: &Trainable) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = T::of(c.learning_rate * bc2.sqrt() / bc1);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps * bc2.sqrt()));
        for (&id, g) in &grads.by_param {
            let rows: Option<&Vec<usize>> = if trainable.full.contains(&id) {
                None
            } else if let Some(r) = trainable.rows.get(&id) {
                Some(r)
            } else {
                continue;
            };
            let p = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let row_len = p.numel() / p.shape()[0].max(1);
            let ranges: Vec<(usize, usize)> = match rows {
                None => vec![(0, p.numel())],
                Some(rs) => rs.iter().map(|&r| (r * row_len, (r + 1) * row_len)).collect(),
            };
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for (lo, hi) in ranges {
                for j in lo..hi {
                    md[j] = b1 * md[j] + (T::one() - b1) * gd[j];
                    vd[j] = b2 * vd[j] + (T::one() - b2) * gd[j] * gd[j];
                    pd[j] -= lr * md[j] / (vd[j].sqrt() + eps);
                }
            }
        }
    }
}
