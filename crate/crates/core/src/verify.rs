//! Finite-difference verification of every trainable layer and of the full
//! training loss, in double precision.

use rand::Rng;

use crate::autodiff::{finite_diff_check_many, GradCheckReport, Graph, Mask, Tensor, Var};
use crate::data::ModalityBatch;
use crate::error::Result;
use crate::gating::{apply_gate_scaling, gate_weights, RoleAssignment};
use crate::layers::{Conv1d, Dropout, FeedForward, Gru, LayerNorm, Linear, Mha, TransformerStack};
use crate::model::{GateInput, HctConfig, Model};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::train::{task_loss, RegressionLoss};
use crate::Modality;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Absolute discrepancy below which a coordinate counts as agreeing: the
/// round-off level of a central difference for gradients that are zero.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl LayerCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(REL_TOL, ABS_FLOOR)
    }

    /// Largest relative error among coordinates whose gradient is at least
    /// 1e-6 in magnitude, where the relative error is meaningful.
    pub fn worst_rel(&self) -> f64 {
        self.report.coords.iter().filter(|c| c.central.abs() >= 1e-6).map(|c| c.rel()).fold(0.0, f64::max)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 11);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Check `f(params ++ extra)` against central differences, reading out a
/// non-trivial scalar as `Σ y ⊙ R` for a fixed random `R`.
fn check(
    name: &'static str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    coords: Option<usize>,
    f: impl Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
) -> Result<LayerCheck> {
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend(extra);
    let report = finite_diff_check_many(
        |g, vars| {
            let p = Bound::from_vars(vars[..n].to_vec());
            let y = f(g, &p, &vars[n..])?;
            let r = g.constant(random(g.shape(y), 99))?;
            let y = g.mul(y, r)?;
            g.sum(y)
        },
        &inputs,
        STEP,
        coords,
    )?;
    Ok(LayerCheck { name, report })
}

/// Micro-sized hierarchical config: d = 4, one layer, two heads, mixed
/// kernel widths, inputs of 3/2/3 features over 4/5/3 steps.
pub fn micro_config() -> HctConfig {
    use crate::autodiff::Precision;
    use crate::model::{Architecture, InputSpec};
    HctConfig {
        architecture: Architecture::Hct,
        hidden: 4,
        layers: 1,
        heads: 2,
        kernels: [1, 3, 2],
        inputs: [
            InputSpec { dim: 3, max_len: 4 },
            InputSpec { dim: 2, max_len: 5 },
            InputSpec { dim: 3, max_len: 3 },
        ],
        task: crate::Task::Regression,
        dropout: 0.0,
        precision: Precision::Double,
        positions: true,
    }
}

/// `n` synthetic samples shaped for `config`, with variable lengths.
pub fn micro_batch(config: &HctConfig, n: usize, seed: u64) -> Result<ModalityBatch> {
    use crate::data::{generate_synthetic, SyntheticSpec};
    let mut spec = SyntheticSpec::new(
        n,
        config.inputs.map(|s| s.max_len),
        config.inputs.map(|s| s.dim),
        Modality::Text,
        seed,
    );
    spec.noise_sigma = 0.5;
    spec.variable_lengths = true;
    let ds = generate_synthetic(&spec)?.dataset;
    Ok(ModalityBatch::from_dataset(&ds, &(0..n).collect::<Vec<_>>()))
}

/// Full training loss (L2) of `model` on a 2-sample micro-batch, with
/// off-uniform gate logits so every logit carries gradient.
pub fn full_loss_check(model: &Model, name: &'static str) -> Result<LayerCheck> {
    let batch = micro_batch(model.config(), 2, 8)?;
    let gate = GateInput {
        roles: RoleAssignment::pinned(Modality::Audio),
        scale: true,
    };
    let mut inputs = model.store().tensors().to_vec();
    if let Some(h) = model.as_hct() {
        inputs[h.gate_logits.index()] = Tensor::new(&[3], vec![0.3, -0.2, 0.1])?;
    }
    let task = model.config().task;
    let report = finite_diff_check_many(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let out = model.forward(g, &p, &batch, gate, &mut Dropout::disabled(), false)?;
            task_loss(g, out.prediction, &batch.labels, task, RegressionLoss::L2)
        },
        &inputs,
        STEP,
        Some(6),
    )?;
    Ok(LayerCheck { name, report })
}

/// One check per layer kind, then the full hierarchical and flat losses.
pub fn gradient_checks() -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    let r = &mut rng::stream(5, 0);

    let mut s = ParamStore::new();
    let conv = Conv1d::new(&mut s, "conv", 3, 4, 3, r)?;
    out.push(check("conv1d", &s, vec![random(&[2, 5, 3], 1)], None, |g, p, x| conv.forward(g, p, x[0]))?);

    let mut s = ParamStore::new();
    let gru = Gru::new(&mut s, "gru", 3, 4, r);
    out.push(check("gru", &s, vec![random(&[2, 4, 3], 2)], None, |g, p, x| gru.forward(g, p, x[0], None))?);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 3, 4, true, r);
    out.push(check("linear", &s, vec![random(&[2, 3], 3)], None, |g, p, x| lin.forward(g, p, x[0]))?);

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 4);
    // move gamma/beta off their 1/0 init
    s.tensors_mut()[0] = random(&[4], 4);
    out.push(check("layer_norm", &s, vec![random(&[2, 3, 4], 5)], None, |g, p, x| ln.forward(g, p, x[0]))?);

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "ff", 4, r);
    out.push(check("feed_forward", &s, vec![random(&[2, 3, 4], 6)], None, |g, p, x| ff.forward(g, p, x[0]))?);

    let mut s = ParamStore::new();
    let mha = Mha::new(&mut s, "mha", 4, 2, r)?;
    let kv_mask = Mask::from_lengths(&[5, 3], 5);
    out.push(check("mha", &s, vec![random(&[2, 3, 4], 7), random(&[2, 5, 4], 8)], None, |g, p, x| {
        Ok(mha.forward(g, p, x[0], x[1], &kv_mask, &mut Dropout::disabled())?.0)
    })?);

    let mut s = ParamStore::new();
    let cross = TransformerStack::new(&mut s, "cross", 4, 2, 1, r)?;
    let (tm, sm) = (Mask::from_lengths(&[3, 2], 3), Mask::from_lengths(&[5, 4], 5));
    out.push(check("transformer_block_cross", &s, vec![random(&[2, 3, 4], 9), random(&[2, 5, 4], 10)], None, |g, p, x| {
        Ok(cross.forward_cross(g, p, x[0], &tm, x[1], &sm, &mut Dropout::disabled())?.0)
    })?);

    let mut s = ParamStore::new();
    let selfs = TransformerStack::new(&mut s, "self", 4, 2, 2, r)?;
    let m = Mask::from_lengths(&[4, 2], 4);
    out.push(check("transformer_stack_self", &s, vec![random(&[2, 4, 4], 11)], None, |g, p, x| {
        Ok(selfs.forward_self(g, p, x[0], &m, &mut Dropout::disabled())?.0)
    })?);

    let s = ParamStore::new();
    let streams = vec![random(&[3], 12), random(&[2, 3, 4], 13), random(&[2, 5, 4], 14), random(&[2, 2, 4], 15)];
    out.push(check("gate_scaling", &s, streams, None, |g, _, x| {
        let w = gate_weights(g, x[0])?;
        let [t, a, v] = apply_gate_scaling(g, [x[1], x[2], x[3]], w)?;
        let flat: Vec<Var> = [t, a, v].into_iter().map(|y| g.reshape(y, &[g.shape(y).iter().product()])).collect::<Result<_>>()?;
        g.concat(&flat, 0)
    })?);

    let s = ParamStore::new();
    let mixing = vec![random(&[2, 4], 16), random(&[2, 4], 17), random(&[2, 8], 18), random(&[4, 4], 19), random(&[4, 4], 20)];
    out.push(check("mixing_w1_w2", &s, mixing, None, |g, _, x| {
        let a1 = g.matmul(x[0], x[3])?;
        let a2 = g.matmul(x[1], x[4])?;
        g.concat(&[a1, a2, x[2]], 1)
    })?);

    let mut s = ParamStore::new();
    let (hidden, head_out) = (Linear::new(&mut s, "head.hidden", 8, 8, true, r), Linear::new(&mut s, "head.out", 8, 2, true, r));
    out.push(check("head", &s, vec![random(&[3, 8], 21)], None, |g, p, x| {
        let h = hidden.forward(g, p, x[0])?;
        let h = g.relu(h)?;
        head_out.forward(g, p, h)
    })?);

    let config = micro_config();
    out.push(full_loss_check(&Model::new(&config, 7)?, "full_loss_hct")?);
    let flat = HctConfig {
        architecture: crate::model::Architecture::FlatFusion,
        ..config
    };
    out.push(full_loss_check(&Model::new(&flat, 7)?, "full_loss_flat")?);
    Ok(out)
}
