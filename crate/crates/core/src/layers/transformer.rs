use rand_chacha::ChaCha8Rng;

use super::{sinusoidal_positions, Dropout, LayerNorm, Linear, Mha};
use crate::autodiff::{Graph, Mask, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Position-wise `d → 4d → d` perceptron with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            expand: Linear::new(store, &format!("{name}.expand"), d, 4 * d, true, rng),
            contract: Linear::new(store, &format!("{name}.contract"), 4 * d, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.contract.forward(g, p, h)
    }
}

/// Pre-norm residual block:
/// `x ← x + MHA(LN₁(x), LN₁(source))`, then `x ← x + FF(LN₂(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub mha: Mha,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            mha: Mha::new(store, &format!("{name}.mha"), d, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
        })
    }

    /// `source = None` means self-attention over the (normalized) block input.
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        source: Option<(Var, &Mask)>,
        self_mask: &Mask,
        dropout: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let xn = self.ln_attn.forward(g, p, x)?;
        let (kv, mask) = match source {
            Some((s, m)) => (self.ln_attn.forward(g, p, s)?, m),
            None => (xn, self_mask),
        };
        let (a, attn) = self.mha.forward(g, p, xn, kv, mask, dropout)?;
        let a = dropout.apply(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, p, x)?;
        let h = self.ff.forward(g, p, h)?;
        let h = dropout.apply(g, h)?;
        Ok((g.add(x, h)?, attn))
    }
}

/// A stack of [`TransformerBlock`]s. Sinusoidal positions are added to both
/// streams once, at entry.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub d: usize,
    pub use_positions: bool,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, layers: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config(format!("{name}: a transformer stack needs at least one block")));
        }
        let blocks = (0..layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerStack {
            blocks,
            d,
            use_positions: true,
        })
    }

    fn with_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.use_positions {
            return Ok(x);
        }
        let len = g.shape(x)[1];
        let pe = g.constant(sinusoidal_positions(len, self.d)?)?;
        g.add_broadcast(x, pe)
    }

    fn check(&self, g: &Graph, x: Var, mask: &Mask, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.d || mask.shape() != [s[0], s[1]] {
            return Err(Error::dim(
                "transformer_stack",
                format!("{what} {s:?} with mask {:?}, width {}", mask.shape(), self.d),
            ));
        }
        Ok(())
    }

    /// Crossmodal stack: queries from `target`, keys/values from `source`.
    /// Output has the target's length whatever the source length is. Returns
    /// the output and one `[b × heads × L_t × L_s]` attention per layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_cross(
        &self,
        g: &mut Graph,
        p: &Bound,
        target: Var,
        target_mask: &Mask,
        source: Var,
        source_mask: &Mask,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        self.check(g, target, target_mask, "target")?;
        self.check(g, source, source_mask, "source")?;
        let mut x = self.with_positions(g, target)?;
        let src = self.with_positions(g, source)?;
        let mut attns = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(g, p, x, Some((src, source_mask)), target_mask, dropout)?;
            x = y;
            attns.push(a);
        }
        Ok((x, attns))
    }

    /// Self-attention stack over `x`.
    pub fn forward_self(&self, g: &mut Graph, p: &Bound, x: Var, mask: &Mask, dropout: &mut Dropout) -> Result<(Var, Vec<Var>)> {
        self.check(g, x, mask, "input")?;
        let mut x = self.with_positions(g, x)?;
        let mut attns = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(g, p, x, None, mask, dropout)?;
            x = y;
            attns.push(a);
        }
        Ok((x, attns))
    }
}

/// Recorded attention of one stack: a `[b × heads × L_t × L_s]` tensor per
/// layer, plus the masks needed to interpret rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StackTrace {
    pub role: String,
    pub layers: Vec<Tensor>,
    pub query_mask: Mask,
    pub key_mask: Mask,
}

impl StackTrace {
    pub fn heads(&self) -> usize {
        self.layers[0].shape()[1]
    }

    /// `[L_t × L_s]` matrix for one sample, layer and head.
    pub fn matrix(&self, sample: usize, layer: usize, head: usize) -> Tensor {
        let t = &self.layers[layer];
        let s = t.shape();
        let (h, lq, lk) = (s[1], s[2], s[3]);
        let start = ((sample * h) + head) * lq * lk;
        Tensor::new(&[lq, lk], t.data()[start..start + lq * lk].to_vec()).expect("valid slice")
    }

    /// Arithmetic mean of the per-head matrices.
    pub fn head_average(&self, sample: usize, layer: usize) -> Tensor {
        let h = self.heads();
        let mut acc = self.matrix(sample, layer, 0);
        for head in 1..h {
            let m = self.matrix(sample, layer, head);
            for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
                *a += b;
            }
        }
        for a in acc.data_mut() {
            *a /= h as f64;
        }
        acc
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub stacks: Vec<StackTrace>,
}

impl AttentionTrace {
    pub fn get(&self, role: &str) -> Option<&StackTrace> {
        self.stacks.iter().find(|s| s.role == role)
    }

    pub fn record(&mut self, g: &Graph, role: impl Into<String>, attns: &[Var], query_mask: &Mask, key_mask: &Mask) {
        self.stacks.push(StackTrace {
            role: role.into(),
            layers: attns.iter().map(|&a| g.value(a).clone()).collect(),
            query_mask: query_mask.clone(),
            key_mask: key_mask.clone(),
        });
    }
}
