//! Forward-pass context and the linear map building block shared by every layer.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Default slope of the leaky-ReLU non-linearity.
pub const DEFAULT_SLOPE: f64 = 0.2;

/// One forward (and later backward) pass: the tape plus parameter bindings.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Evaluation context: dropout disabled.
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training context: dropout masks are drawn from `seed`.
    pub fn training(store: &'a ParamStore, seed: u64) -> Self {
        Ctx {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Ctx::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Binds a parameter to the tape once per context.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.store.bind(&mut self.tape, id);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::from_parts(shape, mask));
        self.tape.mul(x, m)
    }
}

/// Weight matrix `[out×in]` applied to rows, with an optional bias row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(name, out_dim, in_dim, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// `σ(W·x)` with leaky-ReLU σ.
    pub fn forward_act(&self, ctx: &mut Ctx, x: Var, slope: f64) -> Result<Var> {
        let y = self.forward(ctx, x)?;
        ctx.tape.leaky_relu(y, slope)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
