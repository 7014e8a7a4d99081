//! Named parameter storage and the layer helpers shared by both networks.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Conv2d, Graph, Real, Tensor, Var};
use crate::error::{NslError, Result};
use crate::rng;

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Replace every tensor whose name starts with `prefix` by zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                *v = Tensor::zeros(v.shape().to_vec());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names and shapes as `layout`.
    pub fn check_layout(&self, layout: &ParamStore<T>) -> Result<()> {
        if self.len() != layout.len() {
            return Err(NslError::Config(format!(
                "parameter set has {} tensors, expected {}",
                self.len(),
                layout.len()
            )));
        }
        for (k, v) in &layout.tensors {
            match self.tensors.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                Some(t) => {
                    return Err(NslError::Config(format!(
                        "parameter {k} has shape {:?}, expected {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => return Err(NslError::Config(format!("parameter {k} missing"))),
            }
        }
        Ok(())
    }

    /// Record every tensor on `g`, as a differentiable leaf when `trainable`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Builds a parameter layout with deterministic initialization.
pub struct Initializer {
    rng: rng::StreamRng,
    store: ParamStore<f32>,
}

impl Initializer {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            rng: rng::stream(seed, label),
            store: ParamStore::new(),
        }
    }

    /// Conv weight `[co, ci, k, k]` (uniform, fan-in scaled) and zero bias.
    pub fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) {
        self.conv_scaled(name, co, ci, k, 1.0);
    }

    pub fn conv_scaled(&mut self, name: &str, co: usize, ci: usize, k: usize, gain: f64) {
        let fan_in = (ci * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let n = co * ci * k * k;
        let w: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.store
            .insert(format!("{name}.w"), Tensor::new(vec![co, ci, k, k], w));
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(vec![co]));
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}

/// A graph paired with bound parameters.
pub struct Net<'a, T: Real> {
    pub g: &'a Graph<T>,
    pub p: &'a Binding,
}

impl<T: Real> Net<'_, T> {
    pub fn conv(&self, name: &str, x: Var, geom: Conv2d) -> Var {
        let w = self.p.var(&format!("{name}.w"));
        let b = self.p.try_var(&format!("{name}.b"));
        self.g.conv2d(x, w, b, geom)
    }

    /// 3×3 same-size conv; stride 2 when `down`.
    pub fn conv3(&self, name: &str, x: Var, down: bool) -> Var {
        self.conv(name, x, if down { Conv2d::DOWN3 } else { Conv2d::SAME3 })
    }

    pub fn conv1(&self, name: &str, x: Var) -> Var {
        self.conv(name, x, Conv2d::POINT)
    }

    pub fn conv3_relu(&self, name: &str, x: Var, down: bool) -> Var {
        let y = self.conv3(name, x, down);
        self.g.relu(y)
    }

    pub fn conv3_norm_relu(&self, name: &str, x: Var, down: bool) -> Var {
        let y = self.conv3(name, x, down);
        let y = self.g.instance_norm(y, T::from_f64(1e-5));
        self.g.relu(y)
    }

    /// Upsample/downsample `x` to the spatial size of `like`.
    pub fn resize_like(&self, x: Var, like: Var) -> Var {
        let s = self.g.shape(like);
        let xs = self.g.shape(x);
        if xs[2] == s[2] && xs[3] == s[3] {
            return x;
        }
        if xs[2] == 2 * s[2] && xs[3] == 2 * s[3] {
            return self.g.avg_pool2(x);
        }
        self.g.resize_bilinear(x, s[2], s[3])
    }
}
