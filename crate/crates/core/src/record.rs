use serde::{Deserialize, Serialize};

use crate::batching::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Running,
    Final,
    Diverged,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, RunStatus::Running)
    }
}

/// One ledger row, emitted at every epoch boundary and when a run ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub fingerprint: String,
    pub scheme: Scheme,
    pub n: usize,
    pub batch_size: usize,
    pub unique_per_batch: usize,
    /// Base learning rate of the run.
    pub lr: f64,
    pub temperature: f64,
    pub epoch_budget: u32,
    pub seed: u64,
    pub step: u64,
    /// Completed epoch plans.
    pub epoch: u32,
    /// Times each unique image has been served, counting every
    /// neighbouring-scheme repeat as a separate pass.
    pub dataset_passes: f64,
    pub train_loss_raw: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_ms: u64,
    pub status: RunStatus,
}

impl RunRecord {
    /// Accuracy used for ranking runs; a diverged run counts as zero.
    pub fn ranking_accuracy(&self) -> f64 {
        match self.status {
            RunStatus::Diverged => 0.0,
            _ => self.test_acc.unwrap_or(0.0),
        }
    }
}
