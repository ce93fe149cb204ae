use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h~ = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h~
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut input = |gate: &str, rng: &mut ChaCha8Rng| store.add_xavier(format!("{name}.w_{gate}"), &[d_in, d], d_in, d, rng);
        let (w_z, w_r, w_h) = (input("z", rng), input("r", rng), input("h", rng));
        let mut recurrent = |gate: &str, rng: &mut ChaCha8Rng| store.add_xavier(format!("{name}.u_{gate}"), &[d, d], d, d, rng);
        let (u_z, u_r, u_h) = (recurrent("z", rng), recurrent("r", rng), recurrent("h", rng));
        let mut bias = |gate: &str| store.add(format!("{name}.b_{gate}"), Tensor::zeros(&[d]));
        let (b_z, b_r, b_h) = (bias("z"), bias("r"), bias("h"));
        Gru {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            d_in,
            d,
        }
    }

    /// `x: [b × L × d_in]` -> full hidden sequence `[b × L × d]`.
    /// `h0` defaults to zeros.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h0: Option<Var>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(Error::dim(
                "gru_encode",
                format!("expected [b × L × {}], got {shape:?}", self.d_in),
            ));
        }
        let (b, len) = (shape[0], shape[1]);
        let mut h = match h0 {
            Some(h) if g.shape(h) == [b, self.d] => h,
            Some(h) => {
                return Err(Error::dim(
                    "gru_encode",
                    format!("h0 {:?}, expected [{b}, {}]", g.shape(h), self.d),
                ))
            }
            None => g.constant(Tensor::zeros(&[b, self.d]))?,
        };
        let project = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<Var> {
            let y = g.matmul(x, p[w])?;
            g.add_broadcast(y, p[bias])
        };
        let xz = project(g, self.w_z, self.b_z)?;
        let xr = project(g, self.w_r, self.b_r)?;
        let xh = project(g, self.w_h, self.b_h)?;
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let gate = |g: &mut Graph, xs: Var, u: ParamId, h: Var| -> Result<Var> {
                let a = g.select(xs, 1, t)?;
                let b = g.matmul(h, p[u])?;
                let s = g.add(a, b)?;
                g.sigmoid(s)
            };
            let z = gate(g, xz, self.u_z, h)?;
            let r = gate(g, xr, self.u_r, h)?;
            let rh = g.mul(r, h)?;
            let cand_in = g.select(xh, 1, t)?;
            let cand_rec = g.matmul(rh, p[self.u_h])?;
            let cand = g.add(cand_in, cand_rec)?;
            let cand = g.tanh(cand)?;
            // h + z ⊙ (h~ − h)
            let delta = g.sub(cand, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            outputs.push(h);
        }
        g.stack(&outputs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::rng;
    use rand::Rng;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Scalar-loop reference for one sample.
    fn loop_oracle(store: &ParamStore, gru: &Gru, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = gru.d;
        let w = |id: ParamId| store.get(id).clone();
        let (wz, wr, wh, uz, ur, uh, bz, br, bh) = (
            w(gru.w_z),
            w(gru.w_r),
            w(gru.w_h),
            w(gru.u_z),
            w(gru.u_r),
            w(gru.u_h),
            w(gru.b_z),
            w(gru.b_r),
            w(gru.b_h),
        );
        let mut h = vec![0.0; d];
        let mut out = Vec::new();
        for x in xs {
            let mut z = vec![0.0; d];
            let mut r = vec![0.0; d];
            for j in 0..d {
                let mut sz = bz.data()[j];
                let mut sr = br.data()[j];
                for (i, xi) in x.iter().enumerate() {
                    sz += xi * wz.at(&[i, j]);
                    sr += xi * wr.at(&[i, j]);
                }
                for (i, hi) in h.iter().enumerate() {
                    sz += hi * uz.at(&[i, j]);
                    sr += hi * ur.at(&[i, j]);
                }
                z[j] = sig(sz);
                r[j] = sig(sr);
            }
            let mut next = vec![0.0; d];
            for j in 0..d {
                let mut s = bh.data()[j];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * wh.at(&[i, j]);
                }
                for i in 0..d {
                    s += r[i] * h[i] * uh.at(&[i, j]);
                }
                next[j] = (1.0 - z[j]) * h[j] + z[j] * s.tanh();
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    fn setup(d_in: usize, d: usize) -> (ParamStore, Gru) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, 0);
        let gru = Gru::new(&mut store, "gru", d_in, d, &mut r);
        let mut r = rng::stream(5, 1);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = r.gen_range(-0.8..0.8);
            }
        }
        (store, gru)
    }

    fn run(store: &ParamStore, gru: &Gru, xs: &[Vec<f64>]) -> Tensor {
        let d_in = xs[0].len();
        let x = Tensor::new(&[1, xs.len(), d_in], xs.concat()).unwrap();
        let mut g = Graph::new(Precision::Double);
        let p = store.bind(&mut g).unwrap();
        let xv = g.constant(x).unwrap();
        let y = gru.forward(&mut g, &p, xv, None).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_params_zero_state_stay_zero() {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 2, 3, &mut rng::stream(1, 0));
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let y = run(&store, &gru, &[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_oracle() {
        let (store, gru) = setup(2, 3);
        let xs = vec![vec![0.3, -0.7]];
        let y = run(&store, &gru, &xs);
        let expect = loop_oracle(&store, &gru, &xs);
        for (a, b) in y.data().iter().zip(&expect[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn length_four_matches_loop_oracle() {
        let (store, gru) = setup(3, 4);
        let mut r = rng::stream(17, 2);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let y = run(&store, &gru, &xs);
        let expect = loop_oracle(&store, &gru, &xs).concat();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
