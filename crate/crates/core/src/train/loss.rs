use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::domain::Task;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

/// Training objective: L1 or L2 for regression, mean binary cross-entropy
/// with logits for multilabel tasks.
pub fn task_loss(g: &mut Graph, pred: Var, labels: &Tensor, task: Task, kind: RegressionLoss) -> Result<Var> {
    if g.shape(pred) != labels.shape() {
        return Err(Error::dim("loss", format!("prediction {:?} vs labels {:?}", g.shape(pred), labels.shape())));
    }
    match task {
        Task::Multilabel { .. } => g.bce_with_logits(pred, labels),
        Task::Regression => {
            let y = g.constant(labels.clone())?;
            let diff = g.sub(pred, y)?;
            let per = match kind {
                RegressionLoss::L1 => g.abs(diff)?,
                RegressionLoss::L2 => g.mul(diff, diff)?,
            };
            g.mean(per)
        }
    }
}
