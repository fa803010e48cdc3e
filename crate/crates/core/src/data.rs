//! Labelled image datasets: the CIFAR binary layout and a seeded synthetic
//! generator whose classes are told apart by where a coloured blob sits,
//! so crops and flips genuinely move the decision-relevant signal.
//!
//! Pixels are kept as raw bytes (for export) and as per-channel
//! standardised `f64` values in `[n, h, w, c]` order. Test splits are
//! standardised with the constants of their training split.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugPolicy, AugSample};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation per channel of `[0, 1]`-scaled bytes.
    pub fn from_raw(raw: &[u8], channels: usize) -> Self {
        let count = (raw.len() / channels) as f64;
        let mut mean = vec![0.0; channels];
        for px in raw.chunks_exact(channels) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v as f64 / 255.0;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; channels];
        for px in raw.chunks_exact(channels) {
            for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v as f64 / 255.0 - m;
                *s += d * d;
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dims: [usize; 3],
    classes: usize,
    split: Split,
    images: Vec<f64>,
    labels: Vec<usize>,
    raw: Vec<u8>,
    stats: ChannelStats,
}

impl Dataset {
    /// Builds a dataset from `[n, h, w, c]` bytes. With `stats = None` the
    /// standardisation constants are computed from these bytes.
    pub fn from_raw(
        raw: Vec<u8>,
        labels: Vec<usize>,
        dims: [usize; 3],
        classes: usize,
        split: Split,
        stats: Option<&ChannelStats>,
    ) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || raw.len() != labels.len() * per {
            return Err(Error::shape(
                "dataset",
                format!("{} bytes for {} images of {dims:?}", raw.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let c = dims[2];
        let stats = match stats {
            Some(s) if s.mean.len() == c && s.std.len() == c => s.clone(),
            Some(_) => return Err(Error::shape("dataset", "channel stats do not match channels")),
            None => ChannelStats::from_raw(&raw, c),
        };
        let images = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                (v as f64 / 255.0 - stats.mean[ch]) / stats.std[ch]
            })
            .collect();
        Ok(Dataset {
            dims,
            classes,
            split,
            images,
            labels,
            raw,
            stats,
        })
    }

    /// Wraps already-normalised pixels. Such a dataset has no byte form and
    /// cannot be exported.
    pub fn from_values(
        images: Vec<f64>,
        labels: Vec<usize>,
        dims: [usize; 3],
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape("dataset", "pixel count does not match labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            dims,
            classes,
            split,
            images,
            labels,
            raw: Vec::new(),
            stats: ChannelStats::identity(dims[2]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    fn per_image(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let per = self.per_image();
        &self.raw[i * per..(i + 1) * per]
    }

    /// `[1, h, w, c]` tensor of image `i` after augmentation.
    pub fn augmented(&self, i: usize, sample: &AugSample, policy: &AugPolicy) -> Result<Tensor> {
        let mut out = vec![0.0; self.per_image()];
        augment::apply_into(self.image(i), self.dims, sample, policy, &mut out)?;
        let [h, w, c] = self.dims;
        Tensor::new(vec![1, h, w, c], out)
    }

    /// `[len, h, w, c]` tensor of unaugmented images `ids`.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor> {
        let [h, w, c] = self.dims;
        let mut data = Vec::with_capacity(ids.len() * self.per_image());
        for &i in ids {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![ids.len(), h, w, c], data)
    }

    /// Per-channel mean of the standardised pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.dims[2];
        let mut sums = vec![0.0; c];
        for px in self.images.chunks_exact(c) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let count = (self.images.len() / c) as f64;
        sums.into_iter().map(|s| s / count).collect()
    }
}

/// Byte layout of a CIFAR-style binary file: `label_bytes` label bytes
/// (the last one is used) followed by channel-major pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarFormat {
    pub label_bytes: usize,
    pub classes: usize,
    pub dims: [usize; 3],
}

impl CifarFormat {
    pub const CIFAR10: CifarFormat = CifarFormat {
        label_bytes: 1,
        classes: 10,
        dims: [32, 32, 3],
    };
    /// Coarse label byte, fine label byte, pixels. Only the fine label is used.
    pub const CIFAR100: CifarFormat = CifarFormat {
        label_bytes: 2,
        classes: 100,
        dims: [32, 32, 3],
    };

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.dims.iter().product::<usize>()
    }
}

/// Reads one or more CIFAR binary files. Pass the training split's
/// [`ChannelStats`] when loading a test split.
pub fn load_cifar<P: AsRef<Path>>(
    paths: &[P],
    format: CifarFormat,
    split: Split,
    stats: Option<&ChannelStats>,
) -> Result<Dataset> {
    let [h, w, c] = format.dims;
    let rec = format.record_len();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: format!("{} bytes is not a multiple of the {rec}-byte record", bytes.len()),
            });
        }
        for (r, record) in bytes.chunks_exact(rec).enumerate() {
            let label = record[format.label_bytes - 1] as usize;
            if label >= format.classes {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("record {r}: label {label} >= {}", format.classes),
                });
            }
            labels.push(label);
            let pixels = &record[format.label_bytes..];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        raw.push(pixels[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Dataset::from_raw(raw, labels, format.dims, format.classes, split, stats)
}

/// Writes `dataset` in the CIFAR binary layout described by `format`.
pub fn export_cifar(dataset: &Dataset, path: &Path, format: CifarFormat) -> Result<()> {
    if dataset.raw.is_empty() {
        return Err(Error::config("dataset has no byte representation to export"));
    }
    if format.dims != dataset.dims || dataset.classes > format.classes || format.label_bytes == 0 {
        return Err(Error::config("export format does not match the dataset"));
    }
    let [h, w, c] = dataset.dims;
    let mut out = Vec::with_capacity(dataset.len() * format.record_len());
    for i in 0..dataset.len() {
        out.extend(std::iter::repeat_n(0u8, format.label_bytes - 1));
        out.push(dataset.labels[i] as u8);
        let img = dataset.raw_image(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(img[(y * w + x) * c + ch]);
                }
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Defaults to `per_class`.
    pub test_per_class: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Blob amplitude relative to the default; larger is easier.
    pub separation: f64,
    /// Standard deviation of the per-pixel noise, in `[0, 1]` pixel units.
    pub noise: f64,
    /// Standard deviation of a per-image, per-channel colour offset.
    pub background: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 50,
            test_per_class: None,
            height: 8,
            width: 8,
            channels: 3,
            separation: 1.0,
            noise: 0.1,
            background: 0.0,
        }
    }
}

struct ClassPrototype {
    centre: (f64, f64),
    colour: Vec<f64>,
}

/// Deterministic `(train, test)` pair of class-conditional blob images.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::config("synthetic dataset counts must all be at least 1"));
    }
    if cfg.test_per_class == Some(0) {
        return Err(Error::config("test_per_class must be at least 1"));
    }
    if cfg.classes > 256 {
        return Err(Error::config("at most 256 classes fit the byte label format"));
    }
    let (h, w, c) = (cfg.height as f64, cfg.width as f64, cfg.channels);
    let protos: Vec<ClassPrototype> = (0..cfg.classes)
        .map(|k| {
            let mut rng = seed::stream_rng(Stream::Synth, &[seed, 0, k as u64]);
            ClassPrototype {
                centre: (rng.gen_range(0.15..0.85) * h, rng.gen_range(0.15..0.85) * w),
                colour: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let sigma = 0.18 * h.min(w);

    let make = |split: Split, per_class: usize| -> Result<Dataset> {
        let tag = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let total = per_class * cfg.classes;
        let mut raw = Vec::with_capacity(total * cfg.height * cfg.width * c);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let label = i % cfg.classes;
            let proto = &protos[label];
            let mut rng = seed::stream_rng(Stream::Synth, &[seed, tag, i as u64]);
            let cy = proto.centre.0 + rng.gen_range(-1.0..1.0);
            let cx = proto.centre.1 + rng.gen_range(-1.0..1.0);
            let amp = 0.35 * cfg.separation * rng.gen_range(0.7..1.3);
            let tint: Vec<f64> = (0..c)
                .map(|_| cfg.background * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let bump = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    for ch in 0..c {
                        let noise: f64 = rng.sample(StandardNormal);
                        let v = 0.5 + tint[ch] + bump * proto.colour[ch] + cfg.noise * noise;
                        raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            labels.push(label);
        }
        Dataset::from_raw(raw, labels, [cfg.height, cfg.width, c], cfg.classes, split, None)
    };

    let train = make(Split::Train, cfg.per_class)?;
    let test_raw = make(Split::Test, cfg.test_per_class.unwrap_or(cfg.per_class))?;
    let test = Dataset::from_raw(
        test_raw.raw,
        test_raw.labels,
        test_raw.dims,
        cfg.classes,
        Split::Test,
        Some(&train.stats),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            per_class: 7,
            test_per_class: Some(4),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synth_dataset(&small(), 3).unwrap();
        let b = synth_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&small(), 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn per_class_counts_are_exact() {
        let (train, test) = synth_dataset(&small(), 0).unwrap();
        for k in 0..3 {
            assert_eq!(train.labels().iter().filter(|&&l| l == k).count(), 7);
            assert_eq!(test.labels().iter().filter(|&&l| l == k).count(), 4);
        }
    }

    #[test]
    fn splits_share_no_image() {
        let (train, test) = synth_dataset(&small(), 0).unwrap();
        for i in 0..train.len() {
            for j in 0..test.len() {
                assert_ne!(train.raw_image(i), test.raw_image(j));
            }
        }
    }

    #[test]
    fn train_split_is_standardised() {
        let (train, test) = synth_dataset(&small(), 1).unwrap();
        for m in train.channel_means() {
            assert!(m.abs() < 1e-10, "{m}");
        }
        assert_eq!(test.stats(), train.stats());
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = SynthConfig {
            per_class: 0,
            ..small()
        };
        assert!(synth_dataset(&cfg, 0).is_err());
    }
}
