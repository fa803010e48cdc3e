//! Plot data as tidy CSV: `series_key,x,y,yerr`, one row per point, rows
//! sorted by series key and then by x.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::aggregate::{self, Aggregation, CellStats};
use super::sweep::{self, CellKey};
use crate::analysis::{self, VarianceReport};
use crate::error::{Error, Result};
use crate::record::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Accuracy at the best learning rate against epoch budget.
    AccVsEpochs,
    /// Accuracy at the best learning rate against total updates.
    AccVsUpdates,
    AccVsLr,
    AccVsTemperature,
    /// Raw training loss at every recorded step of every run.
    LossVsUpdates,
    /// Mean overall gradient variance against multiplicity.
    VarianceVsN,
}

impl View {
    pub const ALL: [View; 6] = [
        View::AccVsEpochs,
        View::AccVsUpdates,
        View::AccVsLr,
        View::AccVsTemperature,
        View::LossVsUpdates,
        View::VarianceVsN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            View::AccVsEpochs => "acc_vs_epochs",
            View::AccVsUpdates => "acc_vs_updates",
            View::AccVsLr => "acc_vs_lr",
            View::AccVsTemperature => "acc_vs_temperature",
            View::LossVsUpdates => "loss_vs_updates",
            View::VarianceVsN => "variance_vs_n",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown view '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub yerr: f64,
}

pub const HEADER: &str = "series_key,x,y,yerr";

pub fn to_csv(points: &[Point]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.series, p.x, p.y, p.yerr));
    }
    out
}

fn sort_points(points: &mut [Point]) {
    points.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
}

fn series(key: &CellKey, with_budget: bool) -> String {
    let size = match key.scheme.size_mode() {
        crate::batching::SizeMode::Growing => format!("U={}", key.unique_per_batch),
        crate::batching::SizeMode::Fixed => format!("B={}", key.batch_size),
    };
    let mut s = format!("{} {size} n={}", key.scheme, key.n);
    if with_budget {
        s.push_str(&format!(" m={}", key.epoch_budget));
    }
    s
}

/// Aggregated complete cells; incomplete cells are left out.
fn complete_cells(
    records: &[RunRecord],
    agg: Aggregation,
) -> Result<Vec<(CellKey, CellStats, Vec<RunRecord>)>> {
    let mut out = Vec::new();
    for (key, runs) in sweep::cells(records) {
        match aggregate::aggregate_cell(&runs, agg) {
            Ok(stats) => out.push((key, stats, runs)),
            Err(Error::Incomplete(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn best_lr_points(records: &[RunRecord], agg: Aggregation, updates: bool) -> Result<Vec<Point>> {
    let mut groups: BTreeMap<(String, u32), Vec<(f64, CellStats, u64)>> = BTreeMap::new();
    for (key, stats, runs) in complete_cells(records, agg)? {
        let steps = runs.iter().map(|r| r.step).max().unwrap_or(0);
        groups
            .entry((series(&key, false), key.epoch_budget))
            .or_default()
            .push((key.lr(), stats, steps));
    }
    let mut points = Vec::new();
    for ((s, budget), cells) in groups {
        let pairs: Vec<(f64, CellStats)> = cells.iter().map(|c| (c.0, c.1)).collect();
        if let Some(best) = aggregate::best_over_lr(&pairs) {
            let (_, stats, steps) = cells[best];
            points.push(Point {
                series: s,
                x: if updates { steps as f64 } else { budget as f64 },
                y: stats.mean,
                yerr: stats.stderr,
            });
        }
    }
    Ok(points)
}

/// Builds the points of a run-ledger view.
pub fn run_view(view: View, records: &[RunRecord], agg: Aggregation) -> Result<Vec<Point>> {
    let mut points = match view {
        View::AccVsEpochs => best_lr_points(records, agg, false)?,
        View::AccVsUpdates => best_lr_points(records, agg, true)?,
        View::AccVsLr | View::AccVsTemperature => complete_cells(records, agg)?
            .into_iter()
            .map(|(key, stats, runs)| Point {
                series: series(&key, true),
                x: if view == View::AccVsLr {
                    key.lr()
                } else {
                    runs[0].temperature
                },
                y: stats.mean,
                yerr: stats.stderr,
            })
            .collect(),
        View::LossVsUpdates => records
            .iter()
            .filter_map(|r| {
                let loss = r.train_loss_raw?;
                let key = CellKey::of(r);
                Some(Point {
                    series: format!("{} lr={} seed={}", series(&key, true), r.lr, r.seed),
                    x: r.step as f64,
                    y: loss,
                    yerr: 0.0,
                })
            })
            .collect(),
        View::VarianceVsN => {
            return Err(Error::config("variance_vs_n reads variance ledgers"));
        }
    };
    sort_points(&mut points);
    Ok(points)
}

/// Mean and standard error of the overall variance over repeated reports.
pub fn variance_view(reports: &[VarianceReport]) -> Vec<Point> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let size = match r.scheme.size_mode() {
            crate::batching::SizeMode::Growing => format!("U={}", r.unique_per_batch),
            crate::batching::SizeMode::Fixed => format!("B={}", r.batch_size),
        };
        groups
            .entry((format!("{} {size}", r.scheme), r.n))
            .or_default()
            .push(r.overall);
    }
    let mut points: Vec<Point> = groups
        .into_iter()
        .map(|((s, n), values)| {
            let (mean, stderr) = analysis::mean_stderr(&values);
            Point {
                series: s,
                x: n as f64,
                y: mean,
                yerr: stderr,
            }
        })
        .collect();
    sort_points(&mut points);
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::Scheme;
    use crate::record::RunStatus;

    fn record(n: usize, lr: f64, seed: u64, acc: f64) -> RunRecord {
        RunRecord {
            fingerprint: format!("{n}-{lr}-{seed}"),
            scheme: Scheme::GROWING,
            n,
            batch_size: 4 * n,
            unique_per_batch: 4,
            lr,
            temperature: lr * n as f64,
            epoch_budget: 20,
            seed,
            step: 100,
            epoch: 20,
            dataset_passes: 20.0,
            train_loss_raw: Some(1.0 - acc),
            test_acc: Some(acc),
            wall_ms: 0,
            status: RunStatus::Final,
        }
    }

    #[test]
    fn view_names_round_trip() {
        for v in View::ALL {
            assert_eq!(v.name().parse::<View>().unwrap(), v);
        }
        assert!("acc_vs_nothing".parse::<View>().is_err());
    }

    #[test]
    fn temperature_view_uses_stored_field() {
        let agg = Aggregation { keep: 1, of: 1 };
        let recs = [record(2, 0.1, 0, 0.5), record(4, 0.05, 0, 0.6)];
        let pts = run_view(View::AccVsTemperature, &recs, agg).unwrap();
        assert_eq!(pts.len(), 2);
        for p in &pts {
            let r = recs.iter().find(|r| r.test_acc == Some(p.y)).unwrap();
            assert_eq!(p.x, r.lr * r.n as f64);
        }
    }

    #[test]
    fn best_lr_view_picks_peak() {
        let agg = Aggregation { keep: 1, of: 1 };
        let recs = [
            record(1, 0.1, 0, 0.5),
            record(1, 0.2, 0, 0.7),
            record(1, 0.4, 0, 0.6),
        ];
        let pts = run_view(View::AccVsEpochs, &recs, agg).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].x, pts[0].y), (20.0, 0.7));
    }

    #[test]
    fn empty_input_gives_header_only() {
        let pts = run_view(View::AccVsLr, &[], Aggregation::default()).unwrap();
        assert_eq!(to_csv(&pts), "series_key,x,y,yerr\n");
    }
}
