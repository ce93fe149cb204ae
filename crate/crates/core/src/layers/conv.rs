use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Temporal convolution with 'same' padding. The kernel is stored
/// `[d_out × d_in × k]`; output step `t` reads input steps
/// `t - (k-1)/2 ..= t + k/2`, with zeros outside the sequence.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(format!("{name}: conv kernel width must be >= 1")));
        }
        let kernel = store.add_xavier(format!("{name}.kernel"), &[d_out, d_in, k], d_in * k, d_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Ok(Conv1d { kernel, bias, d_in, d_out, k })
    }

    /// `x: [b × L × d_in]` -> `[b × L × d_out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(Error::dim(
                "conv1d_project",
                format!("expected [b × L × {}], got {shape:?}", self.d_in),
            ));
        }
        let (b, len) = (shape[0], shape[1]);
        // [d_out, d_in, k] -> [k, d_in, d_out] -> [(k·d_in) × d_out]
        let w = g.permute(p[self.kernel], &[2, 1, 0])?;
        let w = g.reshape(w, &[self.k * self.d_in, self.d_out])?;
        let windows = if self.k == 1 {
            x
        } else {
            let left = (self.k - 1) / 2;
            let right = self.k - 1 - left;
            let mut parts = Vec::with_capacity(3);
            if left > 0 {
                parts.push(g.constant(Tensor::zeros(&[b, left, self.d_in]))?);
            }
            parts.push(x);
            if right > 0 {
                parts.push(g.constant(Tensor::zeros(&[b, right, self.d_in]))?);
            }
            let padded = g.concat(&parts, 1)?;
            let taps = (0..self.k)
                .map(|j| g.slice(padded, 1, j, len))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&taps, 2)?
        };
        let y = g.matmul(windows, w)?;
        g.add_broadcast(y, p[self.bias])
    }
}
