use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aggregate::Aggregation;
use super::ledger::{self, LedgerWriter};
use crate::batching::Scheme;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::SmallResNet;
use crate::record::RunRecord;
use crate::training::{self, TrainConfig, TrainSummary};

/// Values swept over. An empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub n: Vec<usize>,
    pub scheme: Vec<Scheme>,
    pub base_lr: Vec<f64>,
    pub epoch_budget: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: TrainConfig,
    #[serde(default)]
    pub axes: Axes,
    /// Runs per cell; repeat `r` uses seed `base.run_seed + r`.
    pub repeats: usize,
    #[serde(default)]
    pub aggregate: Aggregation,
}

fn check_lr_grid(grid: &[f64]) -> Result<()> {
    for w in grid.windows(2) {
        if w[1] != 2.0 * w[0] {
            return Err(Error::config(format!(
                "learning-rate grid must double at every step, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::config(format!("sweep spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        self.aggregate.validate()?;
        check_lr_grid(&self.axes.base_lr)?;
        if let Some(lr) = self.axes.base_lr.iter().find(|lr| !(**lr > 0.0)) {
            return Err(Error::config(format!("grid learning rate {lr} must be positive")));
        }
        let runs = self.expand()?;
        let mut seen = BTreeSet::new();
        for run in &runs {
            if !seen.insert(run.fingerprint()) {
                return Err(Error::config(format!(
                    "duplicate run in sweep (fingerprint {})",
                    run.fingerprint()
                )));
            }
        }
        Ok(())
    }

    /// Every cell and repeat, cells in axis order with repeats innermost.
    pub fn expand(&self) -> Result<Vec<TrainConfig>> {
        fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let mut runs = Vec::new();
        for scheme in axis(&self.axes.scheme, self.base.scheme) {
            for n in axis(&self.axes.n, self.base.n) {
                for budget in axis(&self.axes.epoch_budget, self.base.epoch_budget) {
                    for lr in axis(&self.axes.base_lr, self.base.base_lr) {
                        for r in 0..self.repeats as u64 {
                            let mut cfg = self.base.clone();
                            cfg.scheme = scheme;
                            cfg.n = n;
                            cfg.epoch_budget = budget;
                            cfg.base_lr = lr;
                            cfg.run_seed = self.base.run_seed.wrapping_add(r);
                            cfg.validate()?;
                            runs.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(runs)
    }
}

/// Worker `index` of `count` runs every run whose position is congruent to
/// `index`; each worker writes its own ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shard {
    pub index: usize,
    pub count: usize,
}

impl Shard {
    pub const ALL: Shard = Shard { index: 0, count: 1 };

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("shard '{s}' is not of the form i/k"));
        let (i, k) = s.split_once('/').ok_or_else(bad)?;
        let shard = Shard {
            index: i.trim().parse().map_err(|_| bad())?,
            count: k.trim().parse().map_err(|_| bad())?,
        };
        if shard.count == 0 || shard.index >= shard.count {
            return Err(bad());
        }
        Ok(shard)
    }
}

/// Trains one configuration from its seed, feeding records to `sink`.
pub fn run_config(
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    exec: Exec,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    let mut net = SmallResNet::init(config.resnet_config(train_set), config.run_seed)?;
    training::train(config, &mut net, train_set, test_set, exec, sink)
}

/// Reopens a ledger for appending: drops a torn final line and the records
/// of runs that never reached a terminal record. Returns the fingerprints
/// already finished.
pub fn prepare_resume(out: &Path) -> Result<BTreeSet<String>> {
    if !out.exists() {
        return Ok(BTreeSet::new());
    }
    let text = fs::read_to_string(out)?;
    let scan = ledger::scan::<RunRecord>(&text)?;
    let done: BTreeSet<String> = scan
        .records
        .iter()
        .filter(|r| r.status.is_terminal())
        .map(|r| r.fingerprint.clone())
        .collect();
    let kept: Vec<&RunRecord> = scan
        .records
        .iter()
        .filter(|r| done.contains(&r.fingerprint))
        .collect();
    if scan.torn_tail || kept.len() != scan.records.len() {
        let tmp = out.with_extension("resume.tmp");
        fs::write(&tmp, ledger::emit(&kept)?)?;
        fs::rename(&tmp, out)?;
    }
    Ok(done)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub ran: usize,
    pub skipped: usize,
    pub diverged: usize,
}

/// Runs every configuration of `spec` assigned to `shard`, appending to
/// `out`. Runs already finished in `out` are skipped.
pub fn run_sweep(spec: &SweepSpec, out: &Path, shard: Shard, exec: Exec) -> Result<SweepOutcome> {
    spec.validate()?;
    let runs = spec.expand()?;
    let done = prepare_resume(out)?;
    let mut writer = LedgerWriter::append_to(out)?;
    let mut cache: HashMap<String, (Dataset, Dataset)> = HashMap::new();
    let mut outcome = SweepOutcome::default();
    for (i, cfg) in runs.iter().enumerate() {
        if i % shard.count != shard.index {
            continue;
        }
        if done.contains(&cfg.fingerprint()) {
            outcome.skipped += 1;
            continue;
        }
        let key = serde_json::to_string(&cfg.data)?;
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), cfg.data.load()?);
        }
        let (train_set, test_set) = &cache[&key];
        let summary = run_config(cfg, train_set, test_set, exec, &mut |r| writer.write(r))?;
        outcome.ran += 1;
        if summary.status == crate::record::RunStatus::Diverged {
            outcome.diverged += 1;
        }
    }
    Ok(outcome)
}

/// Terminal records grouped by `(scheme, n, epoch_budget, lr)` cell.
pub fn cells(records: &[RunRecord]) -> BTreeMap<CellKey, Vec<RunRecord>> {
    let mut out: BTreeMap<CellKey, BTreeMap<String, RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status.is_terminal()) {
        out.entry(CellKey::of(r))
            .or_default()
            .insert(r.fingerprint.clone(), r.clone());
    }
    out.into_iter()
        .map(|(k, v)| (k, v.into_values().collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub scheme: Scheme,
    pub n: usize,
    pub batch_size: usize,
    pub unique_per_batch: usize,
    pub epoch_budget: u32,
    /// `lr.to_bits()`; positive floats order the same way as their bits.
    pub lr_bits: u64,
}

impl CellKey {
    pub fn of(r: &RunRecord) -> Self {
        CellKey {
            scheme: r.scheme,
            n: r.n,
            batch_size: r.batch_size,
            unique_per_batch: r.unique_per_batch,
            epoch_budget: r.epoch_budget,
            lr_bits: r.lr.to_bits(),
        }
    }

    pub fn lr(&self) -> f64 {
        f64::from_bits(self.lr_bits)
    }
}
