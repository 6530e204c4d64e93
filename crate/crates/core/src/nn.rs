//! Parameterised layers shared by the encoder and the decoder.
//!
//! Layers only hold [`ParamId`]s, so the same layer object drives a 32-bit
//! store for training and a 64-bit cast of it for gradient checks.

use crate::error::Result;
use promptstream_nd::{Mask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("sized by shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: init.normal(&format!("{name}.weight"), &[inputs, outputs], 1.0 / (inputs as f64).sqrt()),
            bias: init.constant(&format!("{name}.bias"), &[outputs], 0.0),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.weight))?;
        Ok(tape.add_bias(y, tape.param(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, tape.param(self.gamma), tape.param(self.beta))?)
    }
}

/// Two linear maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let h = tape.relu(self.up.forward(tape, x)?);
        self.down.forward(tape, h)
    }
}

/// Multi-head self-attention split into projection and attend phases so
/// that callers can splice cached keys and values between them.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        SelfAttention {
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            output: Linear::new(init, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    pub fn project<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.query.forward(tape, x)?,
            self.key.forward(tape, x)?,
            self.value.forward(tape, x)?,
        ))
    }

    pub fn attend<T: Real>(&self, tape: &Tape<T>, q: Var, k: Var, v: Var, mask: &Mask) -> Result<Var> {
        let a = tape.masked_attention(q, k, v, mask, self.heads)?;
        self.output.forward(tape, a)
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var, mask: &Mask) -> Result<Var> {
        let (q, k, v) = self.project(tape, x)?;
        self.attend(tape, q, k, v, mask)
    }
}
