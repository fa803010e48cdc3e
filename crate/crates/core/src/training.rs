//! Multi-sample loss averaging, SGD with momentum and coupled L2 decay,
//! learning-rate schedules and the training loop.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::augment::{self, AugPolicy};
use crate::batching::{self, Scheme, SizeMode, Slot};
use crate::data::{self, CifarFormat, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{self, DropoutMask, Mode, Network, ParamSet, ResNetConfig};
use crate::record::{RunRecord, RunStatus};
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Constant for the first half of the budget, then halved every
    /// `budget / 20` epochs, ten halvings in total.
    StepHalving,
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: usize,
    pub width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { blocks: 2, width: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        config: SynthConfig,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
    Cifar100 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 0,
            config: SynthConfig::default(),
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let cifar = |train: &[PathBuf], test: &PathBuf, fmt: CifarFormat| {
            let tr = data::load_cifar(train, fmt, Split::Train, None)?;
            let te = data::load_cifar(&[test], fmt, Split::Test, Some(tr.stats()))?;
            Ok((tr, te))
        };
        match self {
            DataSource::Synthetic { seed, config } => data::synth_dataset(config, *seed),
            DataSource::Cifar10 { train, test } => cifar(train, test, CifarFormat::CIFAR10),
            DataSource::Cifar100 { train, test } => cifar(train, test, CifarFormat::CIFAR100),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_schedule() -> Schedule {
    Schedule::StepHalving
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub n: usize,
    /// Total batch size `B`; required by fixed schemes.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Unique images per batch `U`; required by the growing scheme.
    #[serde(default)]
    pub unique_per_batch: Option<usize>,
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub epoch_budget: u32,
    /// Stop early after this many updates.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default)]
    pub augment: AugPolicy,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSource,
    /// Off by default so that ledgers are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The size parameter the scheme consumes: `U` when growing, `B` when fixed.
    pub fn size(&self) -> Result<usize> {
        let (value, name) = match self.scheme.size_mode() {
            SizeMode::Growing => (self.unique_per_batch, "unique_per_batch"),
            SizeMode::Fixed => (self.batch_size, "batch_size"),
        };
        value.ok_or_else(|| Error::config(format!("scheme {} requires {name}", self.scheme)))
    }

    /// `(batch_size, unique_per_batch)`.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        self.scheme.geometry(self.n, self.size()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "base_lr {} must be finite and >= 0",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if self.epoch_budget == 0 {
            return Err(Error::config("epoch_budget must be at least 1"));
        }
        if self.schedule == Schedule::StepHalving && !self.epoch_budget.is_multiple_of(20) {
            return Err(Error::config(format!(
                "step_halving needs an epoch budget divisible by 20, got {}",
                self.epoch_budget
            )));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing outside [0, 1]"));
        }
        models::check_drop_prob(self.dropout_p)?;
        self.augment.validate()?;
        if self.model.blocks == 0 || self.model.width == 0 {
            return Err(Error::config("model blocks and width must be at least 1"));
        }
        Ok(())
    }

    /// Stable hash of the full configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..12].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn temperature(&self) -> Temperature {
        temperature(self.base_lr, self.n)
    }

    pub fn resnet_config(&self, data: &Dataset) -> ResNetConfig {
        ResNetConfig::new(self.model.blocks, self.model.width, data.classes(), data.dims())
    }
}

/// Learning rate times augmentation multiplicity.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature(pub f64);

pub fn temperature(lr: f64, n: usize) -> Temperature {
    Temperature(lr * n as f64)
}

pub fn lr_at(schedule: Schedule, base_lr: f64, epoch: u32, budget: u32) -> Result<f64> {
    if epoch >= budget {
        return Err(Error::config(format!("epoch {epoch} outside budget {budget}")));
    }
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => {
            base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / budget as f64).cos()) / 2.0
        }
        Schedule::StepHalving => {
            if !budget.is_multiple_of(20) {
                return Err(Error::config(format!(
                    "step_halving needs an epoch budget divisible by 20, got {budget}"
                )));
            }
            let half = budget / 2;
            if epoch < half {
                base_lr
            } else {
                let halvings = (1 + (epoch - half) / (budget / 20)).min(10);
                base_lr / f64::powi(2.0, halvings as i32)
            }
        }
    })
}

/// `v <- momentum * v + (g + decay * theta)`, then `theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grad: &ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            "parameter, gradient and velocity layouts differ",
        ));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grad.tensors())
        .zip(velocity.tensors_mut())
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *theta);
            *theta -= lr * *vi;
        }
    }
    if !params.is_finite() || !velocity.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    Ok(())
}

/// How dropout is applied to a slot; masks are keyed by the slot's
/// augmentation seed so a slot can be replayed exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotOptions {
    pub dropout_p: f64,
    pub label_smoothing: f64,
}

impl Default for SlotOptions {
    fn default() -> Self {
        SlotOptions {
            dropout_p: 0.0,
            label_smoothing: 0.0,
        }
    }
}

/// Loss and gradient of a single augmented copy of one image.
pub fn slot_gradient<N: Network + ?Sized>(
    net: &N,
    data: &Dataset,
    slot: &Slot,
    policy: &AugPolicy,
    opts: SlotOptions,
) -> Result<(f64, ParamSet)> {
    let sample = augment::draw_sample(policy, slot.aug_seed);
    let image = data.augmented(slot.image_id, &sample, policy)?;
    let labels = [data.label(slot.image_id)];
    if opts.dropout_p > 0.0 {
        let mask_seed = seed::derive(&[Stream::Dropout as u64, slot.aug_seed]);
        let mask = [DropoutMask::draw(net.feature_width(), opts.dropout_p, mask_seed)?];
        models::loss_and_grad(net, &image, &labels, Mode::Train(&mask), opts.label_smoothing)
    } else {
        models::loss_and_grad(net, &image, &labels, Mode::Eval, opts.label_smoothing)
    }
}

/// Pairwise sum in a fixed tree order, so `2^k` equal terms sum exactly.
fn pairwise_sum(parts: &[&(f64, ParamSet)]) -> Result<(f64, ParamSet)> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let (left, right) = parts.split_at(parts.len() / 2);
    let (mut loss, mut grad) = pairwise_sum(left)?;
    let (l, g) = pairwise_sum(right)?;
    loss += l;
    grad.axpy(1.0, &g)?;
    Ok((loss, grad))
}

/// Mean over the unique images of a minibatch of the mean loss and gradient
/// over each image's augmented copies. Slots may be evaluated concurrently;
/// the reduction order is fixed by the slot order.
pub fn batch_gradient<N: Network + ?Sized>(
    net: &N,
    data: &Dataset,
    batch: &[Slot],
    policy: &AugPolicy,
    opts: SlotOptions,
    exec: Exec,
) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::config("empty minibatch"));
    }
    let parts = exec.try_map(batch, |slot| slot_gradient(net, data, slot, policy, opts))?;

    let mut order: Vec<usize> = Vec::new();
    let mut copies: HashMap<usize, Vec<&(f64, ParamSet)>> = HashMap::new();
    for (slot, part) in batch.iter().zip(&parts) {
        copies
            .entry(slot.image_id)
            .or_insert_with(|| {
                order.push(slot.image_id);
                Vec::new()
            })
            .push(part);
    }
    let mut loss = 0.0;
    let mut grad = parts[0].1.zeros_like();
    for id in &order {
        let group = &copies[id];
        let (l, mut g) = pairwise_sum(group)?;
        let inv = 1.0 / group.len() as f64;
        g.scale(inv);
        loss += l * inv;
        grad.axpy(1.0, &g)?;
    }
    let inv = 1.0 / order.len() as f64;
    grad.scale(inv);
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "batch_gradient" });
    }
    Ok((loss, grad))
}

/// Loss averaged over the augmented copies of one image, one copy per seed.
pub fn averaged_loss<N: Network + ?Sized>(
    net: &N,
    data: &Dataset,
    image_id: usize,
    aug_seeds: &[u64],
    policy: &AugPolicy,
    opts: SlotOptions,
    exec: Exec,
) -> Result<(f64, ParamSet)> {
    if aug_seeds.is_empty() {
        return Err(Error::config(
            "averaged_loss needs at least one augmentation seed",
        ));
    }
    let slots: Vec<Slot> = aug_seeds
        .iter()
        .map(|&aug_seed| Slot { image_id, aug_seed })
        .collect();
    batch_gradient(net, data, &slots, policy, opts, exec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub status: RunStatus,
    pub steps: u64,
    pub last: RunRecord,
}

/// Runs one training configuration, passing each ledger record to `sink`.
pub fn train<N: Network>(
    config: &TrainConfig,
    net: &mut N,
    train_set: &Dataset,
    test_set: &Dataset,
    exec: Exec,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    let started = Instant::now();
    let size = config.size()?;
    let (batch_size, unique) = config.geometry()?;
    let per_epoch = batching::updates_per_epoch(config.scheme, config.n, size, train_set.len())?;
    let passes = config.scheme.passes_per_epoch(config.n) as f64;
    let opts = SlotOptions {
        dropout_p: config.dropout_p,
        label_smoothing: config.label_smoothing,
    };
    let fingerprint = config.fingerprint();
    let make_record =
        |step: u64, epoch: u32, status: RunStatus, loss: Option<f64>, acc: Option<f64>| RunRecord {
            fingerprint: fingerprint.clone(),
            scheme: config.scheme,
            n: config.n,
            batch_size,
            unique_per_batch: unique,
            lr: config.base_lr,
            temperature: config.temperature().0,
            epoch_budget: config.epoch_budget,
            seed: config.run_seed,
            step,
            epoch,
            dataset_passes: step as f64 / per_epoch as f64 * passes,
            train_loss_raw: loss,
            test_acc: acc,
            wall_ms: if config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            status,
        };

    let mut velocity = net.params().zeros_like();
    let mut step = 0u64;
    for epoch in 0..config.epoch_budget {
        let lr = lr_at(config.schedule, config.base_lr, epoch, config.epoch_budget)?;
        let plan = batching::plan_epoch(
            config.scheme,
            config.n,
            size,
            train_set.len(),
            epoch as u64,
            config.run_seed,
        )?;
        let mut stopped = false;
        for batch in &plan.batches {
            if config.max_steps.is_some_and(|m| step >= m) {
                stopped = true;
                break;
            }
            let update =
                batch_gradient(&*net, train_set, batch, &config.augment, opts, exec).and_then(|(_, g)| {
                    sgd_step(
                        net.params_mut(),
                        &g,
                        &mut velocity,
                        lr,
                        config.momentum,
                        config.weight_decay,
                    )
                });
            match update {
                Ok(()) => step += 1,
                Err(Error::NonFinite { .. }) => {
                    let rec = make_record(step, epoch, RunStatus::Diverged, None, None);
                    sink(&rec)?;
                    return Ok(TrainSummary {
                        status: RunStatus::Diverged,
                        steps: step,
                        last: rec,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let completed = if stopped { epoch } else { epoch + 1 };
        let last = stopped || completed == config.epoch_budget || config.max_steps.is_some_and(|m| step >= m);
        let evaluated = analysis::eval_raw(&*net, train_set, exec)
            .and_then(|tr| Ok((tr, analysis::eval_raw(&*net, test_set, exec)?)));
        let rec = match evaluated {
            Ok((tr, te)) => {
                let status = if last {
                    RunStatus::Final
                } else {
                    RunStatus::Running
                };
                make_record(step, completed, status, Some(tr.loss), Some(te.accuracy))
            }
            Err(Error::NonFinite { .. }) => make_record(step, completed, RunStatus::Diverged, None, None),
            Err(e) => return Err(e),
        };
        sink(&rec)?;
        if last || rec.status == RunStatus::Diverged {
            return Ok(TrainSummary {
                status: rec.status,
                steps: step,
                last: rec,
            });
        }
    }
    unreachable!("the final epoch always returns")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_halving_table() {
        let lr = |e| lr_at(Schedule::StepHalving, 0.4, e, 20).unwrap();
        assert_eq!(lr(0), 0.4);
        assert_eq!(lr(9), 0.4);
        assert_eq!(lr(10), 0.2);
        assert_eq!(lr(11), 0.1);
        assert_eq!(lr(19), 0.4 / 1024.0);
        assert!(lr_at(Schedule::StepHalving, 0.4, 0, 30).is_err());
        assert!(lr_at(Schedule::StepHalving, 0.4, 20, 20).is_err());
    }

    #[test]
    fn step_halving_spacing_scales_with_budget() {
        // m = 40: halve every two epochs after epoch 20
        let lr = |e| lr_at(Schedule::StepHalving, 1.0, e, 40).unwrap();
        assert_eq!(
            (lr(19), lr(20), lr(21), lr(22), lr(39)),
            (1.0, 0.5, 0.5, 0.25, 1.0 / 1024.0)
        );
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(lr_at(Schedule::Cosine, 0.3, 0, 10).unwrap(), 0.3);
        let near_end = lr_at(Schedule::Cosine, 0.3, 999_999, 1_000_000).unwrap();
        assert!(near_end > 0.0 && near_end < 1e-11);
        assert!((lr_at(Schedule::Cosine, 0.3, 5, 10).unwrap() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule() {
        for e in 0..7 {
            assert_eq!(lr_at(Schedule::Constant, 0.05, e, 7).unwrap(), 0.05);
        }
    }

    #[test]
    fn temperature_products() {
        assert!((temperature(0.1, 8).0 - 0.8).abs() < 1e-15);
        assert_eq!(temperature(0.37, 1).0, 0.37);
        assert_eq!(temperature(0.2, 4), temperature(0.1, 8));
    }

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", crate::tensor::Tensor::from_vec(vec![v]));
        p
    }

    #[test]
    fn vanilla_sgd_and_fixed_point() {
        let mut theta = single(1.5);
        let mut v = single(0.0);
        sgd_step(&mut theta, &single(2.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(theta.tensors()[0].data()[0], 1.5 - 0.1 * 2.0);

        let mut theta = single(-0.7);
        let mut v = single(0.0);
        sgd_step(&mut theta, &single(0.0), &mut v, 0.3, 0.9, 0.0).unwrap();
        assert_eq!(theta, single(-0.7));
    }

    #[test]
    fn divergent_update_is_reported() {
        let mut theta = single(1.0);
        let mut v = single(0.0);
        let err = sgd_step(&mut theta, &single(f64::MAX), &mut v, 1e10, 0.0, 0.0);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = TrainConfig::from_toml(
            r#"
            scheme = "fixed-within"
            n = 4
            batch_size = 32
            base_lr = 0.1
            epoch_budget = 20
            "#,
        )
        .unwrap();
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.geometry().unwrap(), (32, 8));
        assert_eq!(cfg.fingerprint(), cfg.clone().fingerprint());

        let missing = TrainConfig::from_toml(
            "scheme = \"growing\"\nn = 2\nbatch_size = 8\nbase_lr = 0.1\nepoch_budget = 20\n",
        );
        assert!(missing.is_err());
        let bad_budget = TrainConfig::from_toml(
            "scheme = \"fixed\"\nn = 1\nbatch_size = 8\nbase_lr = 0.1\nepoch_budget = 16\n",
        );
        assert!(bad_budget.is_err());
    }
}
