//! Measurements: minibatch gradient variance at a fixed parameter point,
//! gradients averaged over several dropout masks, and raw-image evaluation.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::batching::{Placement, Scheme, Slot};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{self, DropoutMask, Mode, Network, ParamSet};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;
use crate::training::{self, SlotOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 64;

/// Mean cross-entropy and top-1 accuracy over every image of `data`, without
/// augmentation or dropout. Ties in the arg-max go to the lowest class index.
pub fn eval_raw<N: Network + ?Sized>(net: &N, data: &Dataset, exec: Exec) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("cannot evaluate an empty dataset".into()));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = ids.chunks(EVAL_CHUNK).collect();
    let parts = exec.try_map(&chunks, |chunk| -> Result<(f64, usize)> {
        let logits = models::forward(net, &data.batch(chunk)?, Mode::Eval)?;
        let k = logits.shape()[1];
        let mut loss = 0.0;
        let mut correct = 0;
        for (row, &id) in logits.data().chunks_exact(k).zip(*chunk) {
            let label = data.label(id);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(argmax == label);
        }
        Ok((loss, correct))
    })?;
    let (loss, correct) = parts.iter().fold((0.0, 0), |(l, c), &(pl, pc)| (l + pl, c + pc));
    let n = data.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "eval_raw" });
    }
    Ok(EvalMetrics {
        loss,
        accuracy: correct as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Mean per-parameter variance within each layer, keyed by layer name.
    pub layers: BTreeMap<String, f64>,
    /// Arithmetic mean of the per-layer values.
    pub overall: f64,
    pub samples: usize,
    pub scheme: Scheme,
    pub n: usize,
    pub batch_size: usize,
    pub unique_per_batch: usize,
}

/// Streaming per-coordinate mean and unbiased variance (Welford).
#[derive(Clone, Debug)]
pub struct VarianceAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        VarianceAccumulator {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.mean.len());
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let d = x - *m;
            *m += d / k;
            *s += d * (x - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased (divide by `count - 1`) variance of every coordinate.
    pub fn variance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::config("variance needs at least two samples"));
        }
        let denom = (self.count - 1) as f64;
        Ok(self.m2.iter().map(|s| (s / denom).max(0.0)).collect())
    }
}

/// Averages per-parameter variances within each layer, then across layers.
pub fn layer_means(layout: &ParamSet, per_param: &[f64]) -> (BTreeMap<String, f64>, f64) {
    let offsets: Vec<usize> = layout
        .tensors()
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let mut layers = BTreeMap::new();
    for (layer, idx) in layout.layers() {
        let (sum, count) = idx.iter().fold((0.0, 0usize), |(s, c), &i| {
            let len = layout.tensors()[i].len();
            let slice = &per_param[offsets[i]..offsets[i] + len];
            (s + slice.iter().sum::<f64>(), c + len)
        });
        layers.insert(layer, sum / count as f64);
    }
    let overall = layers.values().sum::<f64>() / layers.len() as f64;
    (layers, overall)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceSpec {
    pub scheme: Scheme,
    pub n: usize,
    /// `U` for the growing scheme, `B` otherwise.
    pub size: usize,
    pub num_batches: usize,
    pub seed: u64,
}

/// The slots of minibatch number `draw`: `U` distinct ids drawn uniformly
/// afresh for every minibatch, each with its own augmentation seeds.
pub fn sample_minibatch(spec: &VarianceSpec, dataset_size: usize, draw: u64) -> Result<Vec<Slot>> {
    let (_, unique) = spec.scheme.geometry(spec.n, spec.size)?;
    if unique > dataset_size {
        return Err(Error::config(format!(
            "{unique} unique images per batch exceed the dataset of {dataset_size}"
        )));
    }
    let mut rng = seed::stream_rng(Stream::Variance, &[spec.seed, draw]);
    let ids = index::sample(&mut rng, dataset_size, unique).into_vec();
    // A neighbouring-scheme minibatch carries one copy of each id.
    let copies = match spec.scheme.placement() {
        Placement::Within => spec.n,
        Placement::Neighbouring => 1,
    };
    Ok(ids
        .into_iter()
        .flat_map(|id| {
            (0..copies).map(move |c| Slot {
                image_id: id,
                aug_seed: seed::derive(&[Stream::Augment as u64, spec.seed, draw, id as u64, c as u64]),
            })
        })
        .collect())
}

const VARIANCE_CHUNK: usize = 32;

/// Variance of the minibatch gradient across `num_batches` independently
/// sampled minibatches, evaluated at the network's current parameters with
/// no weight decay. Per-parameter variances are averaged within each
/// layer and then across layers.
pub fn grad_variance<N: Network + ?Sized>(
    net: &N,
    data: &Dataset,
    policy: &AugPolicy,
    spec: &VarianceSpec,
    exec: Exec,
) -> Result<VarianceReport> {
    if spec.num_batches < 2 {
        return Err(Error::config("grad_variance needs at least two minibatches"));
    }
    let (batch_size, unique) = spec.scheme.geometry(spec.n, spec.size)?;
    let mut acc = VarianceAccumulator::new(net.params().numel());
    let draws: Vec<u64> = (0..spec.num_batches as u64).collect();
    for chunk in draws.chunks(VARIANCE_CHUNK) {
        let grads = exec.try_map(chunk, |&draw| -> Result<Vec<f64>> {
            let slots = sample_minibatch(spec, data.len(), draw)?;
            let (_, g) = training::batch_gradient(
                net,
                data,
                &slots,
                policy,
                SlotOptions::default(),
                Exec::Sequential,
            )?;
            Ok(g.flatten())
        })?;
        for g in &grads {
            acc.push(g);
        }
    }
    let (layers, overall) = layer_means(net.params(), &acc.variance()?);
    Ok(VarianceReport {
        layers,
        overall,
        samples: spec.num_batches,
        scheme: spec.scheme,
        n: spec.n,
        batch_size,
        unique_per_batch: unique,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSampling {
    /// Independent masks per draw and per batch row.
    Random { seed: u64 },
    /// Draw `i` uses the mask whose kept units are the set bits of `i`,
    /// shared by all rows; requires `n_masks == 2^d` and `p = 0.5`, where
    /// every mask is equally likely.
    Enumerate,
}

/// Gradient of the batch loss averaged over `n_masks` dropout masks, with
/// the input batch (and its augmentation) held fixed.
pub fn dropout_avg_gradient<N: Network + ?Sized>(
    net: &N,
    images: &Tensor,
    labels: &[usize],
    n_masks: usize,
    drop_p: f64,
    sampling: MaskSampling,
    exec: Exec,
) -> Result<ParamSet> {
    models::check_drop_prob(drop_p)?;
    if n_masks == 0 {
        return Err(Error::config("n_masks must be at least 1"));
    }
    let width = net.feature_width();
    let rows = labels.len();
    if let MaskSampling::Enumerate = sampling {
        if width >= 32 || n_masks != 1 << width || drop_p != 0.5 {
            return Err(Error::config(format!(
                "mask enumeration needs n_masks = 2^{width} and p = 0.5"
            )));
        }
    }
    let draws: Vec<u64> = (0..n_masks as u64).collect();
    let grads = exec.try_map(&draws, |&i| -> Result<ParamSet> {
        let masks = match sampling {
            MaskSampling::Random { seed } => (0..rows as u64)
                .map(|r| {
                    DropoutMask::draw(width, drop_p, seed::derive(&[Stream::Dropout as u64, seed, i, r]))
                })
                .collect::<Result<Vec<_>>>()?,
            MaskSampling::Enumerate => vec![DropoutMask::from_bits(i, width, drop_p)?; rows],
        };
        Ok(models::loss_and_grad(net, images, labels, Mode::Train(&masks), 0.0)?.1)
    })?;
    ParamSet::mean(&grads)
}

/// Mean over parameters of the variance, across `repeats` independent
/// seeds, of [`dropout_avg_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn dropout_gradient_variance<N: Network + ?Sized>(
    net: &N,
    images: &Tensor,
    labels: &[usize],
    n_masks: usize,
    drop_p: f64,
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let reps: Vec<u64> = (0..repeats as u64).collect();
    let grads = exec.try_map(&reps, |&r| {
        let s = seed::derive(&[seed, n_masks as u64, r]);
        dropout_avg_gradient(
            net,
            images,
            labels,
            n_masks,
            drop_p,
            MaskSampling::Random { seed: s },
            Exec::Sequential,
        )
        .map(|g| g.flatten())
    })?;
    let mut acc = VarianceAccumulator::new(net.params().numel());
    grads.iter().for_each(|g| acc.push(g));
    let var = acc.variance()?;
    Ok(var.iter().sum::<f64>() / var.len() as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
