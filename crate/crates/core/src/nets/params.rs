use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{rng_for, Graph, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy every tensor of `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamSet, prefix: &str) {
        for (n, t) in other.iter() {
            if n.starts_with(prefix) {
                self.insert(n, t.clone());
            }
        }
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Parameters placed on a graph; frozen ones enter as constants.
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(usize, Var)>,
}

impl Bound {
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::new();
        for (i, (name, t)) in params.iter().enumerate() {
            let v = if trainable(name) { g.param(t.clone()) } else { g.constant(t.clone()) };
            if trainable(name) {
                order.push((i, v));
            }
            vars.insert(name.to_string(), v);
        }
        Bound { vars, order }
    }

    pub fn all_trainable(g: &mut Graph, params: &ParamSet) -> Bound {
        Self::bind(g, params, |_| true)
    }

    pub fn frozen(g: &mut Graph, params: &ParamSet) -> Bound {
        Self::bind(g, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }

    /// `(parameter index, var)` for every trainable parameter.
    pub fn trainable(&self) -> &[(usize, Var)] {
        &self.order
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic initializer keyed by `(seed, parameter name)`.
pub struct Init<'a> {
    pub seed: u64,
    pub params: &'a mut ParamSet,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = rng_for(self.seed, name_stream(name));
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt());
        self.constant(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.g"), &[dim], 1.0);
        self.constant(&format!("{prefix}.b"), &[dim], 0.0);
    }
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.g"))?;
    let beta = p.var(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}
