use rand_chacha::ChaCha8Rng;

use super::{Dropout, Linear};
use crate::autodiff::{Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Multi-head scaled dot-product attention with fused `[d × d]` projections.
/// Queries come from the target stream, keys and values from the source.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {d} not divisible by {heads} heads")));
        }
        Ok(Mha {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, true, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng),
            heads,
            d,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, self.d / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `query: [b × L_q × d]`, `key_value: [b × L_kv × d]`, `kv_mask: [b × L_kv]`.
    /// Returns the output `[b × L_q × d]` and the attention weights
    /// `[b × heads × L_q × L_kv]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        key_value: Var,
        kv_mask: &Mask,
        dropout: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let (qs, ks) = (g.shape(query).to_vec(), g.shape(key_value).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d || ks[2] != self.d {
            return Err(Error::dim("mha", format!("query {qs:?}, key/value {ks:?}, width {}", self.d)));
        }
        if kv_mask.shape() != [ks[0], ks[1]] {
            return Err(Error::dim("mha", format!("mask {:?} for key/value {ks:?}", kv_mask.shape())));
        }
        let (b, lq) = (qs[0], qs[1]);
        let q = self.wq.forward(g, p, query)?;
        let k = self.wk.forward(g, p, key_value)?;
        let v = self.wv.forward(g, p, key_value)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / ((self.d / self.heads) as f64).sqrt())?;
        let attn = g.softmax_masked(scores, &kv_mask.expand_keys(self.heads, lq))?;
        let weights = dropout.apply(g, attn)?;
        let ctx = g.batch_matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, self.d])?;
        let out = self.wo.forward(g, p, ctx)?;
        Ok((out, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Precision, Tensor};
    use crate::rng;
    use rand::Rng;

    fn setup(d: usize, heads: usize) -> (ParamStore, Mha) {
        let mut store = ParamStore::new();
        let mha = Mha::new(&mut store, "mha", d, heads, &mut rng::stream(2, 0)).unwrap();
        let mut r = rng::stream(4, 1);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
        (store, mha)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 3);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn singleton_source_gets_all_weight() {
        let (store, mha) = setup(4, 2);
        let mut g = Graph::new(Precision::Double);
        let p = store.bind(&mut g).unwrap();
        let q = g.constant(random(&[1, 3, 4], 1)).unwrap();
        let kv_t = random(&[1, 1, 4], 2);
        let kv = g.constant(kv_t.clone()).unwrap();
        let (out, attn) = mha
            .forward(&mut g, &p, q, kv, &Mask::all_valid(&[1, 1]), &mut Dropout::disabled())
            .unwrap();
        assert!(g.value(attn).data().iter().all(|&w| w == 1.0));
        // output = (x·W_V + b_V)·W_O + b_O at every query position
        let v = |id| store.get(id).clone();
        let (wv, bv, wo, bo) = (v(mha.wv.weight), v(mha.wv.bias.unwrap()), v(mha.wo.weight), v(mha.wo.bias.unwrap()));
        let vp: Vec<f64> = (0..4)
            .map(|j| bv.data()[j] + (0..4).map(|i| kv_t.data()[i] * wv.at(&[i, j])).sum::<f64>())
            .collect();
        let expect: Vec<f64> = (0..4)
            .map(|j| bo.data()[j] + (0..4).map(|i| vp[i] * wo.at(&[i, j])).sum::<f64>())
            .collect();
        for row in g.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention_over_valid_positions() {
        let (store, mha) = setup(4, 2);
        let mut g = Graph::new(Precision::Double);
        let p = store.bind(&mut g).unwrap();
        let q = g.constant(random(&[1, 2, 4], 1)).unwrap();
        let row = random(&[4], 5);
        let kv = Tensor::from_fn(&[1, 5, 4], |i| row.data()[i % 4]);
        let kv = g.constant(kv).unwrap();
        let mask = Mask::from_lengths(&[3], 5);
        let (_, attn) = mha.forward(&mut g, &p, q, kv, &mask, &mut Dropout::disabled()).unwrap();
        for r in g.value(attn).data().chunks(5) {
            for w in &r[..3] {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
            assert_eq!(&r[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let (store, mha) = setup(6, 3);
        let mut g = Graph::new(Precision::Double);
        let p = store.bind(&mut g).unwrap();
        let q = g.constant(random(&[2, 4, 6], 1)).unwrap();
        let kv = g.constant(random(&[2, 7, 6], 2)).unwrap();
        let mask = Mask::from_lengths(&[7, 4], 7);
        let (_, attn) = mha.forward(&mut g, &p, q, kv, &mask, &mut Dropout::disabled()).unwrap();
        assert_eq!(g.shape(attn), &[2, 3, 4, 7]);
        for (i, r) in g.value(attn).data().chunks(7).enumerate() {
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|&w| w >= 0.0));
            if i >= 12 {
                assert_eq!(&r[4..], &[0.0; 3]);
            }
        }
    }

    #[test]
    fn fully_masked_source_is_degenerate() {
        let (store, mha) = setup(4, 2);
        let mut g = Graph::new(Precision::Double);
        let p = store.bind(&mut g).unwrap();
        let q = g.constant(random(&[1, 2, 4], 1)).unwrap();
        let kv = g.constant(random(&[1, 3, 4], 2)).unwrap();
        let mask = Mask::from_lengths(&[0], 3);
        let err = mha.forward(&mut g, &p, q, kv, &mask, &mut Dropout::disabled()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
    }

    #[test]
    fn width_not_divisible_by_heads_is_config_error() {
        let mut store = ParamStore::new();
        let err = Mha::new(&mut store, "mha", 10, 3, &mut rng::stream(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
