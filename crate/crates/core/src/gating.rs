//! Modality gating: one trainable logit per modality, softmax-normalized
//! into weights that rank the modalities, route them into hierarchy roles
//! for each batch, and scale the encoded streams. The gate freezes once the
//! per-batch winner stops changing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::domain::Modality;
use crate::error::{Error, Result};

/// Which modality plays which role in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub primary: Modality,
    pub aux1: Modality,
    pub aux2: Modality,
}

impl RoleAssignment {
    /// `primary` plus the remaining two in declared order.
    pub fn pinned(primary: Modality) -> Self {
        let mut rest = Modality::ALL.into_iter().filter(|&m| m != primary);
        RoleAssignment {
            primary,
            aux1: rest.next().unwrap(),
            aux2: rest.next().unwrap(),
        }
    }

    pub fn is_permutation(&self) -> bool {
        self.primary != self.aux1 && self.primary != self.aux2 && self.aux1 != self.aux2
    }
}

/// Softmax of gate logits, on the graph.
pub fn gate_weights(g: &mut Graph, logits: Var) -> Result<Var> {
    if g.shape(logits) != [3] {
        return Err(Error::dim("gate_weights", format!("expected [3], got {:?}", g.shape(logits))));
    }
    g.softmax(logits)
}

/// Softmax of gate logits as plain numbers.
pub fn weights_from_logits(logits: &[f64]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    [e[0] / total, e[1] / total, e[2] / total]
}

/// Rank modalities by weight, highest first. Ties go to the modality that
/// comes first in `declared_order`. `weights` is indexed by [`Modality::index`].
pub fn assign_roles(weights: &[f64; 3], declared_order: &[Modality; 3]) -> RoleAssignment {
    let mut ranked = *declared_order;
    // stable sort keeps declared order among equal weights
    ranked.sort_by(|a, b| weights[b.index()].total_cmp(&weights[a.index()]));
    RoleAssignment {
        primary: ranked[0],
        aux1: ranked[1],
        aux2: ranked[2],
    }
}

/// Multiply each modality's encoded sequence by `3 × weight`, so uniform
/// weights leave the streams unchanged. `encoded` is indexed by modality.
pub fn apply_gate_scaling(g: &mut Graph, encoded: [Var; 3], weights: Var) -> Result<[Var; 3]> {
    let mut out = encoded;
    for (m, slot) in out.iter_mut().enumerate() {
        let w = g.slice(weights, 0, m, 1)?;
        let factor = g.scale(w, 3.0)?;
        *slot = g.mul_scalar(*slot, factor)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Consecutive stable epochs required before freezing.
    pub patience: usize,
    /// Share of an epoch's batches one modality must win to count as stable.
    pub agreement: f64,
    pub declared_order: [Modality; 3],
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            patience: 5,
            agreement: 0.95,
            declared_order: Modality::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub epoch: usize,
    pub batch: usize,
    pub weights: [f64; 3],
    pub primary: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "primary", rename_all = "snake_case")]
pub enum GateMode {
    /// Weights are learned and roles follow the current argmax.
    Learned,
    /// Gating disabled; roles fixed by hand.
    Pinned(Modality),
}

/// Bookkeeping for the gate. The logits themselves live in the model's
/// parameter store under `gate.logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub config: GateConfig,
    pub mode: GateMode,
    pub frozen: bool,
    pub stable_epochs: usize,
    pub frozen_roles: Option<RoleAssignment>,
    pub frozen_at_epoch: Option<usize>,
    pub previous_winner: Option<Modality>,
    #[serde(skip)]
    pub history: Vec<GateRecord>,
}

impl GateState {
    pub fn learned(config: GateConfig) -> Self {
        GateState {
            config,
            mode: GateMode::Learned,
            frozen: false,
            stable_epochs: 0,
            frozen_roles: None,
            frozen_at_epoch: None,
            previous_winner: None,
            history: Vec::new(),
        }
    }

    /// Gating disabled from the start with a hand-picked primary.
    pub fn pinned(config: GateConfig, primary: Modality) -> Self {
        GateState {
            mode: GateMode::Pinned(primary),
            frozen: true,
            frozen_roles: Some(RoleAssignment::pinned(primary)),
            ..Self::learned(config)
        }
    }

    /// Whether encoded streams are scaled by the gate weights.
    pub fn scales_streams(&self) -> bool {
        self.mode == GateMode::Learned
    }

    /// Whether the logits still receive optimizer updates.
    pub fn trainable(&self) -> bool {
        self.mode == GateMode::Learned && !self.frozen
    }

    pub fn roles(&self, weights: &[f64; 3]) -> RoleAssignment {
        match self.frozen_roles {
            Some(r) => r,
            None => assign_roles(weights, &self.config.declared_order),
        }
    }

    pub fn record(&mut self, epoch: usize, batch: usize, weights: [f64; 3], primary: Modality) {
        self.history.push(GateRecord {
            epoch,
            batch,
            weights,
            primary,
        });
    }

    /// End-of-epoch update from that epoch's per-batch winners. Returns true
    /// when this call froze the gate.
    ///
    /// An epoch is stable when one modality won at least `agreement` of its
    /// batches and (if the previous epoch was stable) it is the same
    /// modality as before; otherwise the counter resets to zero.
    pub fn update_freeze(&mut self, epoch: usize, winners: &[Modality], weights: &[f64; 3]) -> bool {
        if self.frozen || winners.is_empty() {
            return false;
        }
        let mut counts = [0usize; 3];
        for m in winners {
            counts[m.index()] += 1;
        }
        let (best, &count) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let winner = Modality::from_index(best);
        let dominant = count as f64 >= self.config.agreement * winners.len() as f64;
        if dominant && self.previous_winner.is_none_or(|p| p == winner) {
            self.stable_epochs += 1;
        } else {
            self.stable_epochs = 0;
        }
        self.previous_winner = dominant.then_some(winner);
        if self.stable_epochs >= self.config.patience {
            let mut roles = assign_roles(weights, &self.config.declared_order);
            if roles.primary != winner {
                let rest: Vec<Modality> = [roles.primary, roles.aux1, roles.aux2]
                    .into_iter()
                    .filter(|&m| m != winner)
                    .collect();
                roles = RoleAssignment {
                    primary: winner,
                    aux1: rest[0],
                    aux2: rest[1],
                };
            }
            self.frozen = true;
            self.frozen_roles = Some(roles);
            self.frozen_at_epoch = Some(epoch);
            return true;
        }
        false
    }

    /// CSV with header `epoch,batch,w_T,w_A,w_V,primary`.
    pub fn write_history_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,batch,w_T,w_A,w_V,primary")?;
        for r in &self.history {
            writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{}",
                r.epoch, r.batch, r.weights[0], r.weights[1], r.weights[2], r.primary
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Precision, Tensor};
    use proptest::prelude::*;
    use Modality::*;

    fn weights(logits: [f64; 3]) -> [f64; 3] {
        let mut g = Graph::new(Precision::Double);
        let l = g.constant(Tensor::new(&[3], logits.to_vec()).unwrap()).unwrap();
        let w = gate_weights(&mut g, l).unwrap();
        let d = g.value(w).data();
        [d[0], d[1], d[2]]
    }

    #[test]
    fn weight_closed_forms() {
        for w in weights([0.0; 3]) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = weights([2f64.ln(), 0.0, 0.0]);
        for (a, b) in w.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn role_ordering_and_ties() {
        let order = Modality::ALL;
        assert_eq!(
            assign_roles(&[0.5, 0.3, 0.2], &order),
            RoleAssignment { primary: Text, aux1: Audio, aux2: Vision }
        );
        let third = 1.0 / 3.0;
        assert_eq!(
            assign_roles(&[third; 3], &order),
            RoleAssignment { primary: Text, aux1: Audio, aux2: Vision }
        );
        assert_eq!(
            assign_roles(&[0.2, 0.2, 0.6], &order),
            RoleAssignment { primary: Vision, aux1: Text, aux2: Audio }
        );
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution_and_are_shift_invariant(
            a in -8.0f64..8.0, b in -8.0f64..8.0, c in -8.0f64..8.0, shift in -50.0f64..50.0,
        ) {
            let w = weights([a, b, c]);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
            let ws = weights([a + shift, b + shift, c + shift]);
            for (x, y) in w.iter().zip(&ws) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(
                assign_roles(&weights_from_logits(&[a, b, c]), &Modality::ALL),
                assign_roles(&weights_from_logits(&[a + shift, b + shift, c + shift]), &Modality::ALL)
            );
        }
    }

    #[test]
    fn scaling_is_neutral_at_uniform_weights() {
        let mut g = Graph::new(Precision::Double);
        let x = Tensor::from_fn(&[1, 2, 3], |i| i as f64 - 2.5);
        let vars = [0, 1, 2].map(|_| g.constant(x.clone()).unwrap());
        let l = g.constant(Tensor::zeros(&[3])).unwrap();
        let w = gate_weights(&mut g, l).unwrap();
        let out = apply_gate_scaling(&mut g, vars, w).unwrap();
        for v in out {
            assert_eq!(g.value(v), &x);
        }
    }

    #[test]
    fn weight_half_scales_by_one_and_a_half() {
        let mut g = Graph::new(Precision::Double);
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let vars = [0, 1, 2].map(|_| g.constant(x.clone()).unwrap());
        let w = g.constant(Tensor::new(&[3], vec![0.5, 0.25, 0.25]).unwrap()).unwrap();
        let out = apply_gate_scaling(&mut g, vars, w).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| v * 1.5).collect();
        assert_eq!(g.value(out[0]).data(), expect.as_slice());
    }

    fn state() -> GateState {
        GateState::learned(GateConfig::default())
    }

    #[test]
    fn freezes_after_patience_stable_epochs() {
        let mut s = state();
        for e in 0..4 {
            assert!(!s.update_freeze(e, &[Text; 10], &[0.5, 0.3, 0.2]));
        }
        assert!(s.update_freeze(4, &[Text; 10], &[0.5, 0.3, 0.2]));
        assert!(s.frozen);
        assert_eq!(s.frozen_roles.unwrap().primary, Text);
    }

    #[test]
    fn alternating_winners_never_freeze() {
        let mut s = state();
        for e in 0..40 {
            let w = if e % 2 == 0 { Text } else { Audio };
            s.update_freeze(e, &[w; 10], &[0.4, 0.4, 0.2]);
        }
        assert!(!s.frozen);
    }

    #[test]
    fn flip_resets_counter() {
        let mut s = state();
        for e in 0..4 {
            s.update_freeze(e, &[Text; 10], &[0.5, 0.3, 0.2]);
        }
        assert_eq!(s.stable_epochs, 4);
        s.update_freeze(4, &[Vision; 10], &[0.3, 0.2, 0.5]);
        assert_eq!(s.stable_epochs, 0);
        assert!(!s.frozen);
    }

    #[test]
    fn below_agreement_is_not_stable() {
        let mut s = state();
        let mut winners = vec![Text; 18];
        winners.extend([Audio, Audio]);
        s.update_freeze(0, &winners, &[0.5, 0.3, 0.2]);
        assert_eq!(s.stable_epochs, 0);
    }

    #[test]
    fn pinned_state_is_frozen_without_scaling() {
        let s = GateState::pinned(GateConfig::default(), Audio);
        assert!(s.frozen && !s.scales_streams() && !s.trainable());
        assert_eq!(
            s.roles(&[0.9, 0.05, 0.05]),
            RoleAssignment { primary: Audio, aux1: Text, aux2: Vision }
        );
    }

    #[test]
    fn history_csv_layout() {
        let mut s = state();
        s.record(0, 0, [0.25, 0.25, 0.5], Vision);
        let mut buf = Vec::new();
        s.write_history_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,batch,w_T,w_A,w_V,primary\n0,0,0.250000000,0.250000000,0.500000000,V\n");
    }
}
