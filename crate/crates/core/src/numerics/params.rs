//! Named parameter storage shared by the model, the optimizer and the
//! gradient checker. Insertion order is fixed and drives every iteration,
//! so runs are reproducible.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{GradStore, Graph, Var};
use crate::numerics::tensor::RawTensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: RawTensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = RawTensor::new(dims, data).expect("parameter shape");
        let idx = self.params.len();
        self.params.push(Param { name: name.to_string(), value });
        self.index.insert(name.to_string(), idx);
        idx
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: &str,
        dims: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let numel = dims.iter().product();
        let data = (0..numel).map(|_| normal_sample(rng) * std).collect();
        self.add(name, dims, data)
    }

    pub fn add_zeros(&mut self, name: &str, dims: Vec<usize>) -> usize {
        let numel = dims.iter().product();
        self.add(name, dims, vec![0.0; numel])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }
}

/// Box–Muller standard normal draw; two uniforms per sample, deterministic
/// for a given rng state.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tape bindings for every parameter of a set, in set order.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, ps: &ParamSet) -> Self {
        let vars = ps.iter().map(|p| g.leaf_tensor(&p.value)).collect();
        BoundParams { vars, index: ps.index.clone() }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    /// Collect gradients back into set order; missing entries are zero.
    pub fn grads(&self, ps: &ParamSet, gs: &GradStore) -> ParamGrads {
        let bufs = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, &v)| match gs.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; ps.by_index(i).value.numel()],
            })
            .collect();
        ParamGrads { bufs }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub bufs: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        ParamGrads { bufs: ps.iter().map(|p| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.bufs.iter_mut() {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}
