//! The fusion networks: the hierarchical model with modality gating, a flat
//! pairwise-fusion reference, their shared front end and head, parameter
//! reports and the checkpoint format.

mod checkpoint;
mod config;
mod flat;
mod hct;
mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Architecture, HctConfig, InputSpec};
pub use flat::{FlatFusion, FlatOutput};
pub use hct::{FusionOutput, HctModel};
pub use report::{ParamReport, ReportLine};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mask, Tensor, Var};
use crate::data::ModalityBatch;
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::gating::RoleAssignment;
use crate::layers::{sinusoidal_positions, AttentionTrace, Conv1d, Dropout, Gru, Linear};
use crate::params::{Bound, ParamStore};
use crate::rng;

/// Conv1D projection to the hidden width, sinusoidal positions, then a GRU.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub modality: Modality,
    pub conv: Conv1d,
    pub gru: Gru,
    pub positions: bool,
}

impl Encoder {
    fn new(store: &mut ParamStore, config: &HctConfig, m: Modality, rng: &mut ChaCha8Rng) -> Result<Self> {
        let name = format!("encoder.{}", m.name());
        let (d, input) = (config.hidden, config.input(m));
        Ok(Encoder {
            modality: m,
            conv: Conv1d::new(store, &format!("{name}.conv"), input.dim, d, config.kernels[m.index()], rng)?,
            gru: Gru::new(store, &format!("{name}.gru"), d, d, rng),
            positions: config.positions,
        })
    }

    /// Encode `[b × L × dim]` inputs to `[b × L × d]`. Padded positions are
    /// zeroed before anything else touches them.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &Tensor, mask: &Mask) -> Result<Var> {
        let s = input.shape();
        if s.len() != 3 || mask.shape() != [s[0], s[1]] {
            return Err(Error::dim("encoder", format!("input {s:?} with mask {:?}", mask.shape())));
        }
        if mask.lengths().contains(&0) {
            return Err(Error::Data(format!("empty {} sequence in batch", self.modality.name())));
        }
        let dim = s[2];
        let mut x = input.clone();
        for (row, &valid) in x.data_mut().chunks_mut(dim).zip(mask.data()) {
            if !valid {
                row.fill(0.0);
            }
        }
        let x = g.constant(x)?;
        let mut h = self.conv.forward(g, p, x)?;
        if self.positions {
            let d = self.conv.d_out;
            let pe = g.constant(sinusoidal_positions(s[1], d)?)?;
            h = g.add_broadcast(h, pe)?;
        }
        self.gru.forward(g, p, h, None)
    }
}

/// Two-layer perceptron `Z → ReLU(Z·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, width: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            hidden: Linear::new(store, "head.hidden", width, width, true, rng),
            out: Linear::new(store, "head.out", width, outputs, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, z)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }
}

/// Last valid timestep of each sequence: `[b × L × d] → [b × d]`.
pub fn pool_last(g: &mut Graph, x: Var, mask: &Mask) -> Result<Var> {
    let steps = mask.last_valid()?;
    g.gather_steps(x, &steps)
}

/// How the gate drives one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateInput {
    pub roles: RoleAssignment,
    /// Scale encoded streams by `3 × softmax(gate.logits)`.
    pub scale: bool,
}

impl GateInput {
    pub fn pinned(primary: Modality) -> Self {
        GateInput {
            roles: RoleAssignment::pinned(primary),
            scale: false,
        }
    }
}

/// Prediction and trace common to both architectures.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub z: Var,
    /// `[b × outputs]`
    pub prediction: Var,
    pub trace: AttentionTrace,
}

/// Either architecture behind one interface, for training, checkpoints and probes.
#[derive(Debug, Clone)]
pub enum Model {
    Hct(HctModel),
    Flat(FlatFusion),
}

impl Model {
    /// Build the architecture named in `config`, initialized from `seed`.
    pub fn new(config: &HctConfig, seed: u64) -> Result<Self> {
        match config.architecture {
            Architecture::Hct => HctModel::new(config, seed).map(Model::Hct),
            Architecture::FlatFusion => FlatFusion::new(config, seed).map(Model::Flat),
        }
    }

    pub fn config(&self) -> &HctConfig {
        match self {
            Model::Hct(m) => &m.config,
            Model::Flat(m) => &m.config,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Hct(m) => &m.store,
            Model::Flat(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Hct(m) => &mut m.store,
            Model::Flat(m) => &mut m.store,
        }
    }

    pub fn as_hct(&self) -> Option<&HctModel> {
        match self {
            Model::Hct(m) => Some(m),
            Model::Flat(_) => None,
        }
    }

    /// Current gate weights, or `None` for the flat baseline.
    pub fn gate_weights(&self) -> Option<[f64; 3]> {
        self.as_hct().map(HctModel::gate_weights)
    }

    pub fn report(&self) -> ParamReport {
        match self {
            Model::Hct(m) => m.report(),
            Model::Flat(m) => m.report(),
        }
    }

    /// Forward pass. `gate` is ignored by the flat baseline.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &ModalityBatch,
        gate: GateInput,
        dropout: &mut Dropout,
        record: bool,
    ) -> Result<ModelOutput> {
        match self {
            Model::Hct(m) => m.forward(g, p, batch, gate, dropout, record).map(|o| ModelOutput {
                z: o.z,
                prediction: o.prediction,
                trace: o.trace,
            }),
            Model::Flat(m) => m.forward(g, p, batch, dropout, record).map(|o| ModelOutput {
                z: o.z,
                prediction: o.prediction,
                trace: o.trace,
            }),
        }
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, rng::STREAM_INIT)
}

fn check_batch(config: &HctConfig, batch: &ModalityBatch) -> Result<()> {
    for m in Modality::ALL {
        let s = batch.input(m).shape();
        let spec = config.input(m);
        if s[2] != spec.dim {
            return Err(Error::Config(format!(
                "{} features have dim {}, model expects {}",
                m.name(),
                s[2],
                spec.dim
            )));
        }
    }
    Ok(())
}
