//! Minibatch composition for the augmentation-multiplicity schemes.
//!
//! | scheme              | batch size `B` | unique ids `U` | batches / epoch  |
//! |---------------------|----------------|----------------|------------------|
//! | growing-within      | `U * n`        | given          | `N / U`          |
//! | fixed-within        | given          | `B / n`        | `N / U`          |
//! | fixed-neighbouring  | given          | `B`            | `n * (N / B)`    |
//!
//! Partial batches at the end of an epoch are dropped.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeMode {
    Growing,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    Within,
    Neighbouring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scheme {
    size_mode: SizeMode,
    placement: Placement,
}

impl Scheme {
    pub const GROWING: Scheme = Scheme {
        size_mode: SizeMode::Growing,
        placement: Placement::Within,
    };
    pub const FIXED_WITHIN: Scheme = Scheme {
        size_mode: SizeMode::Fixed,
        placement: Placement::Within,
    };
    pub const FIXED_NEIGHBOURING: Scheme = Scheme {
        size_mode: SizeMode::Fixed,
        placement: Placement::Neighbouring,
    };
    pub const ALL: [Scheme; 3] = [Self::GROWING, Self::FIXED_WITHIN, Self::FIXED_NEIGHBOURING];

    pub fn new(size_mode: SizeMode, placement: Placement) -> Result<Self> {
        if size_mode == SizeMode::Growing && placement == Placement::Neighbouring {
            return Err(Error::config(
                "growing batches are only defined with within placement",
            ));
        }
        Ok(Scheme { size_mode, placement })
    }

    pub fn size_mode(self) -> SizeMode {
        self.size_mode
    }

    pub fn placement(self) -> Placement {
        self.placement
    }

    /// Resolves the scheme's size parameter into `(batch_size, unique_per_batch)`.
    pub fn geometry(self, n: usize, size: usize) -> Result<(usize, usize)> {
        if n == 0 {
            return Err(Error::config("multiplicity n must be at least 1"));
        }
        if size == 0 {
            return Err(Error::config("batch size parameter must be at least 1"));
        }
        match (self.size_mode, self.placement) {
            (SizeMode::Growing, _) => {
                let b = size
                    .checked_mul(n)
                    .ok_or_else(|| Error::config(format!("U * n overflows ({size} * {n})")))?;
                Ok((b, size))
            }
            (SizeMode::Fixed, Placement::Within) => {
                if !size.is_multiple_of(n) {
                    return Err(Error::config(format!(
                        "batch size {size} is not divisible by multiplicity {n}"
                    )));
                }
                Ok((size, size / n))
            }
            (SizeMode::Fixed, Placement::Neighbouring) => Ok((size, size)),
        }
    }

    /// How many times each unique image is served per epoch plan.
    pub fn passes_per_epoch(self, n: usize) -> usize {
        match self.placement {
            Placement::Within => 1,
            Placement::Neighbouring => n,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match (self.size_mode, self.placement) {
            (SizeMode::Growing, _) => "growing-within",
            (SizeMode::Fixed, Placement::Within) => "fixed-within",
            (SizeMode::Fixed, Placement::Neighbouring) => "fixed-neighbouring",
        };
        f.write_str(s)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "growing" | "growing-within" => Ok(Self::GROWING),
            "fixed" | "fixed-within" => Ok(Self::FIXED_WITHIN),
            "fixed-neighbouring" | "neighbouring" => Ok(Self::FIXED_NEIGHBOURING),
            "growing-neighbouring" => Scheme::new(SizeMode::Growing, Placement::Neighbouring),
            other => Err(Error::config(format!("unknown scheme '{other}'"))),
        }
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub image_id: usize,
    pub aug_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub scheme: Scheme,
    pub epoch: u64,
    pub n: usize,
    pub batch_size: usize,
    pub unique_per_batch: usize,
    pub batches: Vec<Vec<Slot>>,
}

fn full_groups(dataset_size: usize, unique: usize) -> Result<usize> {
    let groups = dataset_size / unique;
    if groups == 0 {
        return Err(Error::config(format!(
            "dataset of {dataset_size} images cannot fill one batch of {unique} unique images"
        )));
    }
    Ok(groups)
}

/// Builds the minibatch schedule for one epoch.
pub fn plan_epoch(
    scheme: Scheme,
    n: usize,
    size: usize,
    dataset_size: usize,
    epoch: u64,
    run_seed: u64,
) -> Result<BatchPlan> {
    let (batch_size, unique) = scheme.geometry(n, size)?;
    let groups = full_groups(dataset_size, unique)?;

    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(&mut seed::stream_rng(Stream::Shuffle, &[run_seed, epoch]));

    let slot = |id: usize, copy: usize| Slot {
        image_id: id,
        aug_seed: seed::aug_seed(run_seed, id, epoch, copy as u64),
    };
    let mut batches = Vec::with_capacity(groups * scheme.passes_per_epoch(n));
    for group in order.chunks_exact(unique) {
        match scheme.placement {
            Placement::Within => batches.push(
                group
                    .iter()
                    .flat_map(|&id| (0..n).map(move |copy| slot(id, copy)))
                    .collect(),
            ),
            Placement::Neighbouring => {
                for copy in 0..n {
                    batches.push(group.iter().map(|&id| slot(id, copy)).collect());
                }
            }
        }
    }
    Ok(BatchPlan {
        scheme,
        epoch,
        n,
        batch_size,
        unique_per_batch: unique,
        batches,
    })
}

pub fn updates_per_epoch(scheme: Scheme, n: usize, size: usize, dataset_size: usize) -> Result<usize> {
    let (_, unique) = scheme.geometry(n, size)?;
    Ok(full_groups(dataset_size, unique)? * scheme.passes_per_epoch(n))
}

/// Per-example forward/backward evaluations needed for one update.
pub fn gradient_evals_per_update(scheme: Scheme, n: usize, size: usize) -> Result<usize> {
    Ok(scheme.geometry(n, size)?.0)
}

impl BatchPlan {
    /// One line per batch: `epoch batch_idx [id:seed ...]`.
    pub fn to_debug_string(&self) -> String {
        let mut out = String::new();
        for (i, batch) in self.batches.iter().enumerate() {
            let slots: Vec<String> = batch
                .iter()
                .map(|s| format!("{}:{}", s.image_id, s.aug_seed))
                .collect();
            out.push_str(&format!("{} {} [{}]\n", self.epoch, i, slots.join(" ")));
        }
        out
    }

    /// Parses the debug format back into `(epoch, batch_idx, slots)` rows.
    pub fn parse_debug(text: &str) -> Result<Vec<(u64, usize, Vec<Slot>)>> {
        let bad = |line: usize, detail: &str| Error::Ledger {
            line,
            detail: detail.to_string(),
        };
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let open = line.find('[').ok_or_else(|| bad(ln + 1, "missing '['"))?;
            let body = line[open + 1..]
                .strip_suffix(']')
                .ok_or_else(|| bad(ln + 1, "missing ']'"))?;
            let mut head = line[..open].split_whitespace();
            let epoch = head
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(ln + 1, "bad epoch"))?;
            let idx = head
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(ln + 1, "bad batch index"))?;
            let slots = body
                .split_whitespace()
                .map(|tok| {
                    let (id, seed) = tok.split_once(':')?;
                    Some(Slot {
                        image_id: id.parse().ok()?,
                        aug_seed: seed.parse().ok()?,
                    })
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(ln + 1, "bad slot"))?;
            rows.push((epoch, idx, slots));
        }
        Ok(rows)
    }

    pub fn total_slots(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, HashSet};

    #[test]
    fn fixed_within_example() {
        let plan = plan_epoch(Scheme::FIXED_WITHIN, 4, 64, 128, 0, 3).unwrap();
        assert_eq!(plan.batches.len(), 8);
        let mut seen = HashSet::new();
        for batch in &plan.batches {
            let mut counts = BTreeMap::new();
            for s in batch {
                *counts.entry(s.image_id).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 16);
            assert!(counts.values().all(|&c| c == 4));
            for id in counts.keys() {
                assert!(seen.insert(*id), "id {id} in two batches");
            }
        }
        assert_eq!(seen.len(), 128);
    }

    #[test]
    fn growing_at_n1_matches_fixed_at_same_size() {
        let g = plan_epoch(Scheme::GROWING, 1, 64, 200, 2, 9).unwrap();
        let f = plan_epoch(Scheme::FIXED_WITHIN, 1, 64, 200, 2, 9).unwrap();
        assert_eq!(g.batches, f.batches);
        assert_eq!(g.batches.len(), 3);
        assert!(g.batches.iter().all(|b| b.len() == 64));
    }

    #[test]
    fn neighbouring_toy_layout() {
        let plan = plan_epoch(Scheme::FIXED_NEIGHBOURING, 2, 4, 8, 0, 1).unwrap();
        assert_eq!(plan.batches.len(), 4);
        let ids = |b: &Vec<Slot>| b.iter().map(|s| s.image_id).collect::<Vec<_>>();
        assert_eq!(ids(&plan.batches[0]), ids(&plan.batches[1]));
        assert_eq!(ids(&plan.batches[2]), ids(&plan.batches[3]));
        let first: HashSet<_> = ids(&plan.batches[0]).into_iter().collect();
        let second: HashSet<_> = ids(&plan.batches[2]).into_iter().collect();
        assert!(first.is_disjoint(&second));
        assert_eq!(first.len() + second.len(), 8);
        for (a, b) in plan.batches[0].iter().zip(&plan.batches[1]) {
            assert_ne!(a.aug_seed, b.aug_seed);
        }
    }

    #[test]
    fn update_counts() {
        assert_eq!(updates_per_epoch(Scheme::GROWING, 1, 64, 50_000).unwrap(), 781);
        assert_eq!(updates_per_epoch(Scheme::GROWING, 16, 64, 50_000).unwrap(), 781);
        let base = updates_per_epoch(Scheme::FIXED_WITHIN, 1, 1024, 50_000).unwrap();
        let eight = updates_per_epoch(Scheme::FIXED_WITHIN, 8, 1024, 50_000).unwrap();
        assert_eq!(base, 48);
        assert_eq!(eight, 390);
        assert_eq!(updates_per_epoch(Scheme::FIXED_WITHIN, 1, 64, 128).unwrap(), 2);
        assert_eq!(
            updates_per_epoch(Scheme::FIXED_NEIGHBOURING, 8, 1024, 50_000).unwrap(),
            8 * 48
        );
    }

    #[test]
    fn eval_counts() {
        assert_eq!(gradient_evals_per_update(Scheme::GROWING, 16, 64).unwrap(), 1024);
        assert_eq!(
            gradient_evals_per_update(Scheme::FIXED_WITHIN, 8, 256).unwrap(),
            256
        );
        assert_eq!(gradient_evals_per_update(Scheme::GROWING, 1, 64).unwrap(), 64);
    }

    #[test]
    fn divisibility_and_overflow_errors() {
        assert!(plan_epoch(Scheme::FIXED_WITHIN, 3, 64, 128, 0, 0).is_err());
        assert!(Scheme::GROWING.geometry(usize::MAX, 2).is_err());
        assert!(plan_epoch(Scheme::GROWING, 2, 64, 10, 0, 0).is_err());
        assert!("growing-neighbouring".parse::<Scheme>().is_err());
    }

    #[test]
    fn debug_format_round_trips() {
        let plan = plan_epoch(Scheme::FIXED_WITHIN, 2, 4, 9, 5, 11).unwrap();
        let text = plan.to_debug_string();
        assert!(text.starts_with("5 0 ["));
        let rows = BatchPlan::parse_debug(&text).unwrap();
        assert_eq!(rows.len(), plan.batches.len());
        for (i, (epoch, idx, slots)) in rows.into_iter().enumerate() {
            assert_eq!((epoch, idx), (5, i));
            assert_eq!(slots, plan.batches[i]);
        }
    }

    #[test]
    fn epochs_reshuffle() {
        let a = plan_epoch(Scheme::GROWING, 2, 8, 64, 0, 4).unwrap();
        let b = plan_epoch(Scheme::GROWING, 2, 8, 64, 1, 4).unwrap();
        let again = plan_epoch(Scheme::GROWING, 2, 8, 64, 0, 4).unwrap();
        assert_eq!(a, again);
        let ids = |p: &BatchPlan| p.batches.iter().flatten().map(|s| s.image_id).collect::<Vec<_>>();
        assert_ne!(ids(&a), ids(&b));
    }
}
