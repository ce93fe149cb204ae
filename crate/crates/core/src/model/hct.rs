use super::{check_batch, init_rng, pool_last, Encoder, GateInput, HctConfig, Head, ParamReport};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::ModalityBatch;
use crate::domain::Modality;
use crate::error::Result;
use crate::gating::{apply_gate_scaling, gate_weights, weights_from_logits, RoleAssignment};
use crate::layers::{AttentionTrace, Dropout, TransformerStack};
use crate::params::{Bound, ParamId, ParamStore};

/// Hierarchical crossmodal transformer with modality gating.
///
/// The four crossmodal stacks belong to hierarchy roles, not modalities;
/// each batch routes modalities into roles through a [`RoleAssignment`].
#[derive(Debug, Clone)]
pub struct HctModel {
    pub config: HctConfig,
    pub store: ParamStore,
    /// Indexed by [`Modality::index`].
    pub encoders: [Encoder; 3],
    /// Â1 = CMT(A2 → A1)
    pub aux2_to_aux1: TransformerStack,
    /// Â2 = CMT(A1 → A2)
    pub aux1_to_aux2: TransformerStack,
    /// P̂_Â1 = CMT(Â1 → P)
    pub aux1_to_primary: TransformerStack,
    /// P̂_Â2 = CMT(Â2 → P)
    pub aux2_to_primary: TransformerStack,
    /// Self-attention over `[P̂_Â1 ; P̂_Â2]`, width 2d.
    pub self_attention: TransformerStack,
    pub w1: ParamId,
    pub w2: ParamId,
    pub head: Head,
    pub gate_logits: ParamId,
}

/// Every intermediate of one hierarchical forward pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub roles: RoleAssignment,
    /// `[b × L_A1 × d]`
    pub a_hat1: Var,
    /// `[b × L_A2 × d]`
    pub a_hat2: Var,
    /// `[b × L_P × d]`
    pub p_hat_a1: Var,
    /// `[b × L_P × d]`
    pub p_hat_a2: Var,
    /// `[b × L_P × 2d]`
    pub p_hat: Var,
    /// `[b × 4d]`
    pub z: Var,
    pub prediction: Var,
    pub trace: AttentionTrace,
}

impl HctModel {
    pub fn new(config: &HctConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, heads, layers) = (config.hidden, config.heads, config.layers);
        let encoders = [
            Encoder::new(s, config, Modality::Text, r)?,
            Encoder::new(s, config, Modality::Audio, r)?,
            Encoder::new(s, config, Modality::Vision, r)?,
        ];
        let stack = |s: &mut ParamStore, name: &str, width: usize, r: &mut _| -> Result<TransformerStack> {
            let mut t = TransformerStack::new(s, name, width, heads, layers, r)?;
            t.use_positions = config.positions;
            Ok(t)
        };
        let aux2_to_aux1 = stack(s, "cmt.aux2_to_aux1", d, r)?;
        let aux1_to_aux2 = stack(s, "cmt.aux1_to_aux2", d, r)?;
        let aux1_to_primary = stack(s, "cmt.aux1_to_primary", d, r)?;
        let aux2_to_primary = stack(s, "cmt.aux2_to_primary", d, r)?;
        let self_attention = stack(s, "self_attention", 2 * d, r)?;
        let w1 = s.add_xavier("mixing.w1", &[d, d], d, d, r);
        let w2 = s.add_xavier("mixing.w2", &[d, d], d, d, r);
        let head = Head::new(s, 4 * d, config.task.outputs(), r);
        let gate_logits = s.add("gate.logits", Tensor::zeros(&[3]));
        Ok(HctModel {
            config: config.clone(),
            store,
            encoders,
            aux2_to_aux1,
            aux1_to_aux2,
            aux1_to_primary,
            aux2_to_primary,
            self_attention,
            w1,
            w2,
            head,
            gate_logits,
        })
    }

    pub fn gate_weights(&self) -> [f64; 3] {
        weights_from_logits(self.store.get(self.gate_logits).data())
    }

    /// Encode all three modalities, indexed by [`Modality::index`].
    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &ModalityBatch) -> Result<[Var; 3]> {
        check_batch(&self.config, batch)?;
        let mut out = Vec::with_capacity(3);
        for e in &self.encoders {
            out.push(e.forward(g, p, batch.input(e.modality), batch.mask(e.modality))?);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &ModalityBatch,
        gate: GateInput,
        dropout: &mut Dropout,
        record: bool,
    ) -> Result<FusionOutput> {
        let mut encoded = self.encode(g, p, batch)?;
        if gate.scale {
            let w = gate_weights(g, p[self.gate_logits])?;
            encoded = apply_gate_scaling(g, encoded, w)?;
        }
        self.fuse(g, p, batch, encoded, gate.roles, dropout, record)
    }

    /// Everything after encoding and gate scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &ModalityBatch,
        encoded: [Var; 3],
        roles: RoleAssignment,
        dropout: &mut Dropout,
        record: bool,
    ) -> Result<FusionOutput> {
        let (pm, m1, m2) = (roles.primary, roles.aux1, roles.aux2);
        let (xp, x1, x2) = (encoded[pm.index()], encoded[m1.index()], encoded[m2.index()]);
        let (mp, k1, k2) = (batch.mask(pm), batch.mask(m1), batch.mask(m2));
        let mut trace = AttentionTrace::default();
        let route = |src: Modality, dst: Modality| format!("{}->{}", src.short(), dst.short());

        let (a_hat1, att) = self.aux2_to_aux1.forward_cross(g, p, x1, k1, x2, k2, dropout)?;
        if record {
            trace.record(g, route(m2, m1), &att, k1, k2);
        }
        let (a_hat2, att) = self.aux1_to_aux2.forward_cross(g, p, x2, k2, x1, k1, dropout)?;
        if record {
            trace.record(g, route(m1, m2), &att, k2, k1);
        }
        let (p_hat_a1, att) = self.aux1_to_primary.forward_cross(g, p, xp, mp, a_hat1, k1, dropout)?;
        if record {
            trace.record(g, route(m1, pm), &att, mp, k1);
        }
        let (p_hat_a2, att) = self.aux2_to_primary.forward_cross(g, p, xp, mp, a_hat2, k2, dropout)?;
        if record {
            trace.record(g, route(m2, pm), &att, mp, k2);
        }
        let joined = g.concat(&[p_hat_a1, p_hat_a2], 2)?;
        let (p_hat, att) = self.self_attention.forward_self(g, p, joined, mp, dropout)?;
        if record {
            trace.record(g, format!("self:{}", pm.short()), &att, mp, mp);
        }

        let pooled1 = pool_last(g, a_hat1, k1)?;
        let pooled2 = pool_last(g, a_hat2, k2)?;
        let pooled_p = pool_last(g, p_hat, mp)?;
        let z1 = g.matmul(pooled1, p[self.w1])?;
        let z2 = g.matmul(pooled2, p[self.w2])?;
        let z = g.concat(&[z1, z2, pooled_p], 1)?;
        let prediction = self.head.forward(g, p, z)?;
        Ok(FusionOutput {
            roles,
            a_hat1,
            a_hat2,
            p_hat_a1,
            p_hat_a2,
            p_hat,
            z,
            prediction,
            trace,
        })
    }

    pub fn report(&self) -> ParamReport {
        ParamReport::from_prefixes(
            &self.store,
            &[
                "encoder.text",
                "encoder.audio",
                "encoder.vision",
                "cmt.aux2_to_aux1",
                "cmt.aux1_to_aux2",
                "cmt.aux1_to_primary",
                "cmt.aux2_to_primary",
                "self_attention",
                "mixing",
                "head",
                "gate",
            ],
        )
    }
}
