use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::domain::{Modality, Task};
use crate::error::{Error, Result};

/// Which fusion network to build from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Hierarchical crossmodal transformer with modality gating.
    #[default]
    Hct,
    /// Six pairwise crossmodal stacks fused at one level.
    FlatFusion,
}

/// Shape of one input modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub dim: usize,
    pub max_len: usize,
}

/// Network hyperparameters. Inputs are listed in text/audio/vision order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HctConfig {
    #[serde(default)]
    pub architecture: Architecture,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_kernels")]
    pub kernels: [usize; 3],
    pub inputs: [InputSpec; 3],
    pub task: Task,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub precision: Precision,
    /// Add sinusoidal positions after projection and at each stack entry.
    #[serde(default = "default_true")]
    pub positions: bool,
}

fn default_kernels() -> [usize; 3] {
    [1, 1, 1]
}

fn default_true() -> bool {
    true
}

impl HctConfig {
    /// Shared defaults: hidden 40, 5 heads, kernel 1 everywhere.
    fn published(layers: usize, dims: [usize; 3], lens: [usize; 3], task: Task) -> Self {
        HctConfig {
            architecture: Architecture::Hct,
            hidden: 40,
            layers,
            heads: 5,
            kernels: default_kernels(),
            inputs: [0, 1, 2].map(|k| InputSpec {
                dim: dims[k],
                max_len: lens[k],
            }),
            task,
            dropout: 0.0,
            precision: Precision::Single,
            positions: true,
        }
    }

    pub fn mosi() -> Self {
        Self::published(2, [300, 5, 20], [50, 375, 500], Task::Regression)
    }

    pub fn mosei() -> Self {
        Self::published(4, [300, 74, 35], [50, 500, 500], Task::Regression)
    }

    pub fn iemocap() -> Self {
        Self::published(2, [300, 74, 35], [20, 400, 500], Task::Multilabel { classes: 4 })
    }

    pub fn input(&self, m: Modality) -> InputSpec {
        self.inputs[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return fail("hidden, layers and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden {} must be even for sinusoidal positions", self.hidden));
        }
        if self.kernels.contains(&0) {
            return fail("conv kernels must be >= 1".into());
        }
        if self.inputs.iter().any(|s| s.dim == 0 || s.max_len == 0) {
            return fail("input dims and lengths must be positive".into());
        }
        if self.task.outputs() == 0 {
            return fail("multilabel task needs at least one class".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
