//! Named trainable parameters, Adam, and the central-difference gradient oracle.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Adds a `[out×in]` weight drawn uniformly from `±sqrt(1/in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("weight extents must be positive"));
        }
        let bound = (1.0 / in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::from_parts(vec![out_dim, in_dim], data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.values[id.0].clone())
    }

    /// One gradient tensor per parameter, zero where the sweep never reached it.
    pub fn dense_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.ids()
            .map(|id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
            })
            .collect()
    }

    /// Replaces every value from `(name, tensor)` records. Names and shapes
    /// must match this store exactly.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = vec![false; self.len()];
        let mut staged = Vec::new();
        for (name, t) in records {
            match self.id(&name) {
                None => problems.push(format!("unexpected parameter {name}")),
                Some(id) => {
                    seen[id.0] = true;
                    if self.get(id).shape() != t.shape() {
                        problems.push(format!(
                            "width mismatch for {name}: model expects {:?}, checkpoint has {:?}",
                            self.get(id).shape(),
                            t.shape()
                        ));
                    } else {
                        staged.push((id, t));
                    }
                }
            }
        }
        for (i, s) in seen.iter().enumerate() {
            if !s {
                problems.push(format!("missing parameter {}", self.names[i]));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (id, t) in staged {
            self.values[id.0] = t;
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m.get(id.0).map(Vec::as_slice)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.v.get(id.0).map(Vec::as_slice)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if store.get(id).shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: {:?} vs {:?}", store.name(id), store.get(id).shape(), g.shape()),
                ));
            }
        }
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.values[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Elementwise sum of gradient sets, in order.
pub fn sum_grads(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Central differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` for every element of `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.clone();
    let mut out = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(theta.shape().to_vec(), out)
}

/// `|a − n| / max(|a|, |n|, floor)`, maximised over elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
