//! Parameterized layers: Conv1D projection, GRU encoder, sinusoidal
//! positions, multi-head attention and pre-norm transformer stacks.
//!
//! Sequence tensors are batched as `[batch × len × features]`.

mod attention;
mod conv;
mod gru;
mod positions;
mod transformer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use attention::Mha;
pub use conv::Conv1d;
pub use gru::Gru;
pub use positions::sinusoidal_positions;
pub use transformer::{AttentionTrace, FeedForward, StackTrace, TransformerBlock, TransformerStack};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_broadcast(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Inverted dropout. Without an RNG (evaluation) it is the identity.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let mask = Tensor::from_fn(g.shape(x), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = g.constant(mask)?;
        g.mul(x, m)
    }
}
