use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::RunRecord;

/// Keep the best `keep` of `of` repeats of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    pub keep: usize,
    pub of: usize,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation { keep: 5, of: 7 }
    }
}

impl Aggregation {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 || self.keep > self.of {
            return Err(Error::config(format!(
                "cannot keep {} of {} runs",
                self.keep, self.of
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

/// Mean and standard error of the best `keep` final accuracies among
/// exactly `of` finished runs. Diverged runs rank with accuracy zero.
pub fn best_k_of_m(accuracies: &[f64], agg: Aggregation) -> Result<CellStats> {
    agg.validate()?;
    if accuracies.len() != agg.of {
        return Err(Error::Incomplete(format!(
            "{} finished runs, need {}",
            accuracies.len(),
            agg.of
        )));
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..agg.keep];
    let k = top.len() as f64;
    let mean = top.iter().sum::<f64>() / k;
    let stderr = if top.len() > 1 {
        (top.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(CellStats {
        mean,
        stderr,
        runs: accuracies.len(),
    })
}

/// Aggregates the terminal record of every run in one cell.
pub fn aggregate_cell(records: &[RunRecord], agg: Aggregation) -> Result<CellStats> {
    let mut last: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status.is_terminal()) {
        last.insert(&r.fingerprint, r);
    }
    let accs: Vec<f64> = last.values().map(|r| r.ranking_accuracy()).collect();
    best_k_of_m(&accs, agg)
}

/// Index of the cell with the highest mean; ties go to the smaller lr.
pub fn best_over_lr(cells: &[(f64, CellStats)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (lr, stats)) in cells.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (blr, bs) = &cells[b];
                let better = stats.mean > bs.mean || (stats.mean == bs.mean && lr < blr);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: f64) -> CellStats {
        CellStats {
            mean,
            stderr: 0.0,
            runs: 7,
        }
    }

    #[test]
    fn best_five_of_seven() {
        let s = best_k_of_m(
            &[70.0, 71.0, 72.0, 73.0, 74.0, 75.0, 76.0],
            Aggregation::default(),
        )
        .unwrap();
        assert_eq!(s.mean, 74.0);
        let expected = (2.5f64 / 5.0).sqrt();
        assert!((s.stderr - expected).abs() < 1e-12);
    }

    #[test]
    fn all_equal_has_zero_error() {
        let s = best_k_of_m(&[0.61; 7], Aggregation::default()).unwrap();
        assert_eq!((s.mean, s.stderr), (0.61, 0.0));
    }

    #[test]
    fn diverged_runs_drop_out() {
        let s = best_k_of_m(&[0.0, 0.5, 0.0, 0.6, 0.7, 0.8, 0.9], Aggregation::default()).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn too_few_runs_refused() {
        assert!(matches!(
            best_k_of_m(&[0.5; 6], Aggregation::default()),
            Err(Error::Incomplete(_))
        ));
    }

    #[test]
    fn lr_selection() {
        assert_eq!(best_over_lr(&[(0.1, stats(0.5))]), Some(0));
        let unimodal = [
            (0.05, stats(0.4)),
            (0.1, stats(0.6)),
            (0.2, stats(0.7)),
            (0.4, stats(0.3)),
        ];
        assert_eq!(best_over_lr(&unimodal), Some(2));
        assert_eq!(best_over_lr(&[(0.2, stats(0.6)), (0.1, stats(0.6))]), Some(1));
        assert_eq!(best_over_lr(&[]), None);
    }
}
