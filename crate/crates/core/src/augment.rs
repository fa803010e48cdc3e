//! Pad / random-crop / horizontal-flip augmentation with seed-reproducible noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    pub pad: usize,
    pub flip_prob: f64,
    pub enabled: bool,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            pad: 4,
            flip_prob: 0.5,
            enabled: true,
        }
    }
}

impl AugPolicy {
    pub fn disabled() -> Self {
        AugPolicy {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }

    /// Number of distinct augmentation outcomes per image.
    pub fn outcome_count(&self) -> usize {
        if !self.enabled {
            return 1;
        }
        let side = 2 * self.pad + 1;
        let flips = if self.flip_prob == 0.0 || self.flip_prob == 1.0 {
            1
        } else {
            2
        };
        side * side * flips
    }
}

/// One realised draw of the augmentation noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugSample {
    pub flip: bool,
    pub crop_dy: usize,
    pub crop_dx: usize,
    pub seed: u64,
}

impl AugSample {
    /// The sample that leaves an image untouched under `policy`.
    pub fn identity(policy: &AugPolicy) -> Self {
        AugSample {
            flip: false,
            crop_dy: policy.pad,
            crop_dx: policy.pad,
            seed: 0,
        }
    }
}

/// Deterministic in `(policy, seed)`.
pub fn draw_sample(policy: &AugPolicy, seed: u64) -> AugSample {
    if !policy.enabled {
        return AugSample {
            seed,
            ..AugSample::identity(policy)
        };
    }
    let mut rng = seed::rng(seed);
    let flip = rng.gen_bool(policy.flip_prob);
    let crop_dy = rng.gen_range(0..=2 * policy.pad);
    let crop_dx = rng.gen_range(0..=2 * policy.pad);
    AugSample {
        flip,
        crop_dy,
        crop_dx,
        seed,
    }
}

/// Applies `sample` to an `[h, w, c]` image stored in `src`, writing to `dst`.
pub fn apply_into(
    src: &[f64],
    dims: [usize; 3],
    sample: &AugSample,
    policy: &AugPolicy,
    dst: &mut [f64],
) -> Result<()> {
    let [h, w, c] = dims;
    debug_assert_eq!(src.len(), h * w * c);
    if !policy.enabled {
        dst.copy_from_slice(src);
        return Ok(());
    }
    let pad = policy.pad;
    if sample.crop_dy > 2 * pad || sample.crop_dx > 2 * pad {
        return Err(Error::OffsetOutOfRange {
            dy: sample.crop_dy,
            dx: sample.crop_dx,
            max: 2 * pad,
        });
    }
    for y in 0..h {
        // row in the unpadded image, if any
        let sy = (y + sample.crop_dy).checked_sub(pad).filter(|&v| v < h);
        for x in 0..w {
            let cx = if sample.flip { w - 1 - x } else { x };
            let sx = (cx + sample.crop_dx).checked_sub(pad).filter(|&v| v < w);
            let out = &mut dst[(y * w + x) * c..(y * w + x + 1) * c];
            match (sy, sx) {
                (Some(sy), Some(sx)) => out.copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]),
                _ => out.fill(0.0),
            }
        }
    }
    Ok(())
}

/// Zero-pads by `policy.pad`, crops an `h x w` window at the sample's
/// offsets and mirrors it horizontally when the sample says so.
pub fn apply(x: &Tensor, sample: &AugSample, policy: &AugPolicy) -> Result<Tensor> {
    let dims = match *x.shape() {
        [h, w, c] => [h, w, c],
        ref s => return Err(Error::shape("augment", format!("need [h, w, c], got {s:?}"))),
    };
    let mut out = vec![0.0; x.len()];
    apply_into(x.data(), dims, sample, policy, &mut out)?;
    Tensor::new(x.shape().to_vec(), out)
}
