//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in insertion order; [`Graph::backward`] walks
//! the tape in exact reverse order. Leaf gradients accumulate across repeated
//! `backward` calls until [`Graph::zero_grad`] is called.

use super::kernels;
use super::tensor::{Mask, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    AddBroadcast(Var, Var),
    /// `x * s` for a one-element `s`.
    MulScalar(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherSteps {
        x: Var,
        steps: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulScalar(..) => "mul_scalar",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax_masked",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Select { .. } => "select",
            Op::Stack { .. } => "stack",
            Op::GatherSteps { .. } => "gather_steps",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone(), true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Result<Var> {
        t.round_to(self.precision);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        value.round_to(self.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulScalar(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } | Op::Stack { inputs, .. } => inputs.clone(),
            Op::Affine { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Select { x, .. }
            | Op::GatherSteps { x, .. }
            | Op::BceWithLogits { x, .. } => vec![*x],
            Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_map(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_map(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_map(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Mul(a, b))
    }

    /// `x + b`, broadcasting `b` over the leading axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::dim(
                "add_broadcast",
                format!("{bs:?} is not a suffix of {xs:?}"),
            ));
        }
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(u, v)| u + v))
            .collect();
        let shape = xs.to_vec();
        self.push(&shape, data, Op::AddBroadcast(x, b))
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(
                "mul_scalar",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::MulScalar(x, s))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `a[... × k] · b[k × n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(Error::dim("matmul", format!("{ash:?} · {bsh:?}")));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(&shape, out, Op::MatMul(a, b))
    }

    /// `a[B.. × m × k] · b[B.. × k × n]` with identical batch axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let r = ash.len();
        if r < 3 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] || ash[r - 1] != bsh[r - 2] {
            return Err(Error::dim("batch_matmul", format!("{ash:?} · {bsh:?}")));
        }
        let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
        let batch: usize = ash[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = ash.to_vec();
        shape[r - 1] = n;
        self.push(&shape, out, Op::BatchMatMul(a, b))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let (out_shape, data) = kernels::permute(&shape, self.value(x).data(), axes);
        self.push(&out_shape, data, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape, data, Op::Reshape(x))
    }

    /// Softmax over the last axis, restricted to positions where `mask` is true.
    /// Masked positions come out exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::dim(
                "softmax_masked",
                format!("mask {:?} vs input {:?}", mask.shape(), self.shape(x)),
            ));
        }
        let n = self.value(x).cols();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (row, ((xr, mr), or)) in xd
            .chunks(n)
            .zip(mask.data().chunks(n))
            .zip(out.chunks_mut(n))
            .enumerate()
        {
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { op: "softmax_masked", row });
            }
            let mut total = 0.0;
            for ((o, &v), &m) in or.iter_mut().zip(xr).zip(mr) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Softmax(x))
    }

    /// Unmasked softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mask = Mask::all_valid(self.shape(x));
        self.softmax_masked(x, &mask)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?}, beta {:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            &shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(&out_shape, out, Op::Slice { x, axis, start })
    }

    /// Take `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] || shape.len() < 2 {
            return Err(Error::dim(
                "select",
                format!("index {index} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(&out_shape, out, Op::Select { x, axis, index })
    }

    /// Stack same-shaped inputs along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::dim("stack", format!("axis {axis} for {base:?}")));
        }
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(Error::dim("stack", format!("{:?} vs {base:?}", self.shape(v))));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, inputs.len());
        self.push(
            &shape,
            out,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `x[b × L × d]`, one step per batch row -> `[b × d]`.
    pub fn gather_steps(&mut self, x: Var, steps: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != steps.len() || steps.iter().any(|&t| t >= shape[1]) {
            return Err(Error::dim(
                "gather_steps",
                format!("steps {steps:?} for {shape:?}"),
            ));
        }
        let (l, d) = (shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(steps.len() * d);
        for (b, &t) in steps.iter().enumerate() {
            let base = (b * l + t) * d;
            out.extend_from_slice(&src[base..base + d]);
        }
        self.push(
            &[steps.len(), d],
            out,
            Op::GatherSteps {
                x,
                steps: steps.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(&[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(&[1], vec![s], Op::Mean(x))
    }

    /// Mean binary cross-entropy of logits `x` against constant targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &Tensor) -> Result<Var> {
        if targets.shape() != self.shape(x) {
            return Err(Error::dim(
                "bce_with_logits",
                format!("targets {:?} vs logits {:?}", targets.shape(), self.shape(x)),
            ));
        }
        let xd = self.value(x).data();
        let n = xd.len() as f64;
        let total: f64 = xd
            .iter()
            .zip(targets.data())
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        self.push(
            &[1],
            vec![total / n],
            Op::BceWithLogits {
                x,
                targets: targets.data().to_vec(),
            },
        )
    }

    /// Reverse pass from a one-element root. Leaf gradients accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let precision = self.precision;
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a = precision.round(*a + v);
                        }
                    }
                    None => {
                        let mut t = Tensor::new(node.value.shape(), g)?;
                        t.round_to(precision);
                        node.grad = Some(t);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut emit = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    emit(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    emit(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddBroadcast(x, b) => {
                emit(*x, g.to_vec());
                if needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::MulScalar(x, s) => {
                let k = val(*s)[0];
                if needs(*x) {
                    emit(*x, g.iter().map(|v| v * k).collect());
                }
                if needs(*s) {
                    let ds = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                    emit(*s, vec![ds]);
                }
            }
            Op::Affine { x, scale } => emit(*x, g.iter().map(|v| v * scale).collect()),
            Op::MatMul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let bshape = self.nodes[b.0].value.shape();
                let (k, n) = (bshape[0], bshape[1]);
                let m = ad.len() / k;
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g, bd, &mut da);
                    emit(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, ad, g, &mut db);
                    emit(*b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let ash = self.nodes[a.0].value.shape();
                let bsh = self.nodes[b.0].value.shape();
                let r = ash.len();
                let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
                let batch = ash[..r - 2].iter().product::<usize>();
                let (ad, bd) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    emit(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    emit(*b, db);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, dx) = kernels::permute(node.value.shape(), g, &inverse);
                emit(*x, dx);
            }
            Op::Reshape(x) => emit(*x, g.to_vec()),
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                emit(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gd = val(*gamma);
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    emit(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    emit(*beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let s = inv_std[r] / df;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dr[j] = s * (df * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    emit(*x, dx);
                }
            }
            Op::Tanh(x) => emit(*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(x) => emit(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Relu(x) => emit(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(x) => emit(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if needs(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        emit(v, dv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(xshape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                emit(*x, dx);
            }
            Op::Select { x, axis, index } => {
                let xshape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(xshape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + index) * inner;
                    dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                emit(*x, dx);
            }
            Op::Stack { inputs, axis } => {
                let base = self.nodes[inputs[0].0].value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let count = inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if !needs(v) {
                        continue;
                    }
                    let mut dv = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let start = (o * count + j) * inner;
                        dv.extend_from_slice(&g[start..start + inner]);
                    }
                    emit(v, dv);
                }
            }
            Op::GatherSteps { x, steps } => {
                let xshape = self.nodes[x.0].value.shape();
                let (l, d) = (xshape[1], xshape[2]);
                let mut dx = vec![0.0; xshape[0] * l * d];
                for (b, &t) in steps.iter().enumerate() {
                    let base = (b * l + t) * d;
                    dx[base..base + d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                emit(*x, dx);
            }
            Op::Sum(x) => emit(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                emit(*x, vec![g[0] / n as f64; n]);
            }
            Op::BceWithLogits { x, targets } => {
                let n = targets.len() as f64;
                emit(
                    *x,
                    val(*x)
                        .iter()
                        .zip(targets)
                        .map(|(&v, &t)| g[0] * (kernels::sigmoid(v) - t) / n)
                        .collect(),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 1);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            acc
        })
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
        let mut g = Graph::new(Precision::Double);
        let v = f(&mut g).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn matmul_identity_zero_and_oracle() {
        let b = random(&[3, 2], 1);
        let out = eval(|g| {
            let i = g.constant(Tensor::identity(3))?;
            let bv = g.constant(b.clone())?;
            g.matmul(i, bv)
        });
        assert_eq!(out, b);

        let out = eval(|g| {
            let z = g.constant(Tensor::zeros(&[2, 3]))?;
            let bv = g.constant(b.clone())?;
            g.matmul(z, bv)
        });
        assert!(out.data().iter().all(|&v| v == 0.0));

        let a = random(&[2, 3], 2);
        let out = eval(|g| {
            let av = g.constant(a.clone())?;
            let bv = g.constant(b.clone())?;
            g.matmul(av, bv)
        });
        let expect = triple_loop(&a, &b);
        for (x, y) in out.data().iter().zip(expect.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new(Precision::Double);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn matmul_is_exact_on_small_integers(
            m in 1usize..5, k in 1usize..5, n in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut r = rng::stream(seed, 0);
            let a = Tensor::from_fn(&[m, k], |_| r.gen_range(-(1i64 << 20)..=(1 << 20)) as f64);
            let b = Tensor::from_fn(&[k, n], |_| r.gen_range(-(1i64 << 20)..=(1 << 20)) as f64);
            let out = eval(|g| {
                let av = g.constant(a.clone())?;
                let bv = g.constant(b.clone())?;
                g.matmul(av, bv)
            });
            prop_assert_eq!(out, triple_loop(&a, &b));
        }

        #[test]
        fn softmax_rows_are_masked_distributions(
            rows in 1usize..4, cols in 1usize..7, seed in any::<u64>(),
        ) {
            let mut r = rng::stream(seed, 0);
            let x = Tensor::from_fn(&[rows, cols], |_| r.gen_range(-20.0..20.0));
            let mut flags: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.6)).collect();
            for row in 0..rows {
                flags[row * cols + r.gen_range(0..cols)] = true;
            }
            let mask = Mask::new(&[rows, cols], flags.clone()).unwrap();
            let y = eval(|g| {
                let v = g.constant(x.clone())?;
                g.softmax_masked(v, &mask)
            });
            for (yr, mr) in y.data().chunks(cols).zip(flags.chunks(cols)) {
                let sum: f64 = yr.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for (&v, &m) in yr.iter().zip(mr) {
                    if !m {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let run = |row: Vec<f64>, mask: Vec<bool>| {
            let n = row.len();
            let mask = Mask::new(&[1, n], mask).unwrap();
            eval(|g| {
                let v = g.constant(Tensor::new(&[1, n], row)?)?;
                g.softmax_masked(v, &mask)
            })
        };
        for v in run(vec![0.0; 3], vec![true; 3]).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = run(vec![2f64.ln(), 0.0, 0.0], vec![true; 3]);
        for (a, b) in y.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(run(vec![5.0, 5.0], vec![true, false]).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut g = Graph::new(Precision::Double);
        let v = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let mask = Mask::new(&[2, 2], vec![true, false, false, false]).unwrap();
        assert!(matches!(
            g.softmax_masked(v, &mask),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    fn layer_norm_row(row: Vec<f64>, eps: f64) -> Tensor {
        let d = row.len();
        eval(|g| {
            let x = g.constant(Tensor::new(&[1, d], row)?)?;
            let gamma = g.constant(Tensor::ones(&[d]))?;
            let beta = g.constant(Tensor::zeros(&[d]))?;
            g.layer_norm(x, gamma, beta, eps)
        })
    }

    #[test]
    fn layer_norm_cases() {
        assert!(layer_norm_row(vec![4.0; 5], 1e-5).data().iter().all(|&v| v == 0.0));
        let y = layer_norm_row(vec![1.0, -1.0], 1e-300);
        assert_eq!(y.data(), &[1.0, -1.0]);
        let mut r = rng::stream(3, 0);
        let row: Vec<f64> = (0..16).map(|_| r.gen_range(-10.0..10.0)).collect();
        let y = layer_norm_row(row, 1e-5);
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn elementwise_closed_forms() {
        let y = eval(|g| {
            let x = g.constant(Tensor::scalar(0.0))?;
            g.sigmoid(x)
        });
        assert_eq!(y.item(), 0.5);
        let y = eval(|g| {
            let a = g.constant(Tensor::zeros(&[2, 3]))?;
            let b = g.constant(Tensor::zeros(&[2, 5]))?;
            g.concat(&[a, b], 1)
        });
        assert_eq!(y.shape(), &[2, 8]);

        let mut g = Graph::new(Precision::Double);
        let x = g.param(&Tensor::scalar(0.0)).unwrap();
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn concat_mismatch_is_dimension_error() {
        let mut g = Graph::new(Precision::Double);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 5])).unwrap();
        assert!(matches!(g.concat(&[a, b], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new(Precision::Double);
        let x = g.param(&random(&[2, 3], 1)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new(Precision::Double);
        let x = g.param(&Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let mut g = Graph::new(Precision::Double);
        let x = g.param(&Tensor::scalar(1.5)).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
        // repeated calls accumulate until reset
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new(Precision::Double);
        let x = g.param(&Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new(Precision::Double);
        assert!(matches!(
            g.constant(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn single_precision_rounds_outputs() {
        let mut g = Graph::new(Precision::Single);
        let x = g.constant(Tensor::scalar(0.1)).unwrap();
        assert_eq!(g.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn finite_difference_on_sum_is_exact() {
        let err = finite_diff_check(|g, x| g.sum(x), &random(&[3, 4], 5), 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn finite_difference_on_softmax_weighted_sum() {
        let w = random(&[2, 5], 6);
        let err = finite_diff_check(
            |g, x| {
                let s = g.softmax(x)?;
                let wv = g.constant(w.clone())?;
                let y = g.mul(s, wv)?;
                g.sum(y)
            },
            &random(&[2, 5], 7),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Exercises every differentiable op in one composite.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let inputs = vec![
            random(&[2, 3, 4], 1),
            random(&[4, 4], 2),
            random(&[4], 3),
            random(&[4], 4),
            random(&[1], 5),
            random(&[2, 3, 4], 6),
        ];
        let mask = Mask::from_lengths(&[3, 2], 3).expand_keys(1, 3);
        let report = crate::autodiff::finite_diff_check_many(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_broadcast(h, v[2])?;
                let h = g.layer_norm(h, v[3], v[2], 1e-5)?;
                let t = g.tanh(h)?;
                let s = g.sigmoid(v[5])?;
                let m = g.mul(t, s)?;
                let r = g.relu(m)?;
                let a = g.abs(h)?;
                let x = g.add(r, a)?;
                let x = g.mul_scalar(x, v[4])?;
                let x = g.affine(x, 0.7, 0.2)?;
                let q = g.reshape(x, &[2, 1, 3, 4])?;
                let k = g.transpose(q)?;
                let sc = g.batch_matmul(q, k)?;
                let att = g.softmax_masked(sc, &mask)?;
                let ctx = g.batch_matmul(att, q)?;
                let ctx = g.permute(ctx, &[1, 0, 3, 2])?;
                let ctx = g.reshape(ctx, &[2, 3, 4])?;
                let parts = [g.slice(ctx, 1, 0, 2)?, g.slice(ctx, 1, 1, 2)?];
                let cat = g.concat(&parts, 2)?;
                let steps = [g.select(cat, 1, 0)?, g.select(cat, 1, 1)?];
                let st = g.stack(&steps, 1)?;
                let pooled = g.gather_steps(st, &[1, 0])?;
                let d = g.sub(pooled, pooled)?;
                let e = g.add(pooled, d)?;
                let l1 = g.mean(e)?;
                let targets = Tensor::from_fn(&[2, 8], |i| (i % 2) as f64);
                let l2 = g.bce_with_logits(e, &targets)?;
                let l = g.add(l1, l2)?;
                let total = g.sum(l)?;
                Ok(total)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.passes(1e-4, 1e-9), "worst: {:?}", report.worst(1e-9));
    }
}
