//! Sweeps, the run ledger, best-k-of-m aggregation and plot data.

pub mod aggregate;
pub mod ledger;
pub mod report;
pub mod sweep;

pub use aggregate::{best_k_of_m, best_over_lr, Aggregation, CellStats};
pub use ledger::{LedgerScan, LedgerWriter};
pub use report::{Point, View};
pub use sweep::{run_config, run_sweep, Shard, SweepOutcome, SweepSpec};
