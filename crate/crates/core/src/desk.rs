//! Desk-scale experiment recipes on planted-signal synthetic data. The
//! acceptance target, the examples and the CLI docs all use these settings.

use crate::autodiff::Precision;
use crate::data::{generate_synthetic, Dataset, PlantedInfo, SyntheticSpec};
use crate::domain::{Modality, Task};
use crate::error::Result;
use crate::model::{Architecture, HctConfig, InputSpec, Model};
use crate::probe::Heatmap;
use crate::train::{median_baseline_mae, EvalReport, TrainConfig, Trainer};

pub const SEQ_LENS: [usize; 3] = [8, 12, 10];
pub const DIM: usize = 16;

/// d = 16, one layer, two heads, 16-dim inputs of lengths 8/12/10.
pub fn model_config(architecture: Architecture, positions: bool) -> HctConfig {
    HctConfig {
        architecture,
        hidden: DIM,
        layers: 1,
        heads: 2,
        kernels: [1, 1, 1],
        inputs: SEQ_LENS.map(|max_len| InputSpec { dim: DIM, max_len }),
        task: Task::Regression,
        dropout: 0.0,
        precision: Precision::Single,
        positions,
    }
}

/// MOSI optimizer settings with batch 32.
pub fn train_config(seed: u64, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::mosi();
    c.seed = seed;
    c.batch_size = 32;
    c.epochs = epochs;
    c
}

/// 600 samples, signal fraction 0.9, ρ = 0.2, label noise 0.3.
pub fn gating_spec(planted: Modality, seed: u64) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(600, SEQ_LENS, [DIM; 3], planted, 100 + seed);
    s.incongruity_rate = 0.2;
    s.noise_sigma = 0.3;
    s
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Split {
    pub fn of(dataset: &Dataset) -> Self {
        let (train, val, test) = dataset.split(0.7, 0.15);
        Split { train, val, test }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub trainer: Trainer,
    /// Frozen primary for a learned gate, the pinned one otherwise.
    pub primary: Option<Modality>,
    pub frozen_at: Option<usize>,
    pub test_mae: f64,
    pub median_mae: f64,
}

impl Trial {
    /// Test MAE relative to the constant-median predictor.
    pub fn mae_ratio(&self) -> f64 {
        self.test_mae / self.median_mae
    }
}

fn finish(mut trainer: Trainer, split: &Split) -> Result<Trial> {
    trainer.fit(&split.train, Some(&split.val))?;
    let test_mae = match trainer.evaluate(&split.test)? {
        EvalReport::Regression(r) => r.mae,
        EvalReport::Multilabel { .. } => unreachable!("desk recipes are regression"),
    };
    let labels = |d: &Dataset| d.labels.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let median_mae = median_baseline_mae(&labels(&split.train), &labels(&split.test));
    let gate = trainer.gate.as_ref();
    let primary = gate.and_then(|g| g.frozen_roles).map(|r| r.primary).or_else(|| match gate.map(|g| g.mode) {
        Some(crate::gating::GateMode::Pinned(p)) => Some(p),
        _ => None,
    });
    let frozen_at = gate.and_then(|g| g.frozen_at_epoch);
    Ok(Trial { trainer, primary, frozen_at, test_mae, median_mae })
}

/// Learned gating on `gating_spec(planted, seed)` for 30 epochs.
pub fn gating_trial(planted: Modality, seed: u64) -> Result<Trial> {
    let split = Split::of(&generate_synthetic(&gating_spec(planted, seed))?.dataset);
    let model = Model::new(&model_config(Architecture::Hct, true), seed)?;
    finish(Trainer::new(model, None, train_config(seed, 30))?, &split)
}

/// Gating pinned to `pin` on the planted-text set for 30 epochs.
pub fn pinned_trial(pin: Modality, seed: u64) -> Result<Trial> {
    let split = Split::of(&generate_synthetic(&gating_spec(Modality::Text, seed))?.dataset);
    let model = Model::new(&model_config(Architecture::Hct, true), seed)?;
    finish(Trainer::pinned(model, pin, train_config(seed, 30))?, &split)
}

/// Probe data: 2000 congruent samples whose cue sits only in audio and
/// vision, so text must fetch it through crossmodal attention. Feature
/// noise is low so the cue step stands out from its neighbours.
pub fn probe_spec(seed: u64) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(2000, SEQ_LENS, [DIM; 3], Modality::Text, 200 + seed);
    s.signal_fraction = 0.0;
    s.noise_sigma = 0.3;
    s.feature_sigma = Some(0.1);
    s
}

#[derive(Debug, Clone)]
pub struct ProbeTrial {
    pub trainer: Trainer,
    pub dataset: Dataset,
    pub planted: PlantedInfo,
    /// Dataset indices of the held-out test split.
    pub test_indices: Vec<usize>,
}

/// Train `architecture` without positional encodings on `probe_spec(seed)`
/// with text pinned as primary: 60 epochs at lr 3e-3, decayed at epoch 40.
pub fn probe_trial(architecture: Architecture, seed: u64) -> Result<ProbeTrial> {
    let synth = generate_synthetic(&probe_spec(seed))?;
    let split = Split::of(&synth.dataset);
    let model = Model::new(&model_config(architecture, false), seed)?;
    let mut config = train_config(seed, 60);
    config.lr = 3e-3;
    config.decay_epoch = 40;
    let mut trainer = match architecture {
        Architecture::Hct => Trainer::pinned(model, Modality::Text, config)?,
        Architecture::FlatFusion => Trainer::new(model, None, config)?,
    };
    trainer.fit(&split.train, Some(&split.val))?;
    let n = synth.dataset.len();
    let test_indices = (n - split.test.len()..n).collect();
    Ok(ProbeTrial { trainer, dataset: synth.dataset, planted: synth.planted, test_indices })
}

/// Mean over heatmaps of (mass in the planted-cue source column) × (source
/// length): 1 is uniform attention.
pub fn cue_saliency(heatmaps: &[Heatmap], planted: &PlantedInfo) -> f64 {
    let ratios: Vec<f64> = heatmaps
        .iter()
        .map(|h| {
            let cue = planted.cue_steps[h.source.index()][h.sample];
            h.column_mass(cue) * h.matrix.shape()[1] as f64
        })
        .collect();
    ratios.iter().sum::<f64>() / ratios.len().max(1) as f64
}
