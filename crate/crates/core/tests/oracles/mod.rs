//! Brute-force references for the integration and acceptance tests. Nothing
//! here calls the library's autodiff, reduction or variance code.

#![allow(dead_code)]

/// Central finite differences of `f` at `x`.
pub fn finite_difference_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference of `f` along a single coordinate.
pub fn partial(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Central difference of `f` along direction `d`.
pub fn directional(f: &dyn Fn(&[f64]) -> f64, x: &[f64], d: &[f64], h: f64) -> f64 {
    let at = |s: f64| -> Vec<f64> { x.iter().zip(d).map(|(a, b)| a + s * b).collect() };
    (f(&at(h)) - f(&at(-h))) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Softmax cross-entropy of one row of logits against a class index.
pub fn xent(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Dense softmax model `logits = x W + b`, `W` row-major `[d, k]`.
#[derive(Clone, Debug)]
pub struct ToyLinear {
    pub d: usize,
    pub k: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ToyLinear {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|j| self.b[j] + (0..self.d).map(|i| x[i] * self.w[i * self.k + j]).sum::<f64>())
            .collect()
    }

    /// Gradient of the single-example cross-entropy, laid out as `W` then `b`.
    pub fn grad(&self, x: &[f64], label: usize) -> Vec<f64> {
        let mut p = softmax(&self.logits(x));
        p[label] -= 1.0;
        let mut g = Vec::with_capacity(self.d * self.k + self.k);
        for xi in x.iter().take(self.d) {
            for pj in p.iter() {
                g.push(xi * pj);
            }
        }
        g.extend_from_slice(&p);
        g
    }
}

/// Finite augmentation space: each image has a list of equally likely
/// augmented versions.
pub struct EnumerableAugSpace {
    pub versions: Vec<Vec<Vec<f64>>>,
}

/// Which copies of each unique image a minibatch contains.
#[derive(Clone, Copy, Debug)]
pub enum Composition {
    /// `unique` distinct ids drawn uniformly without replacement, each with
    /// `copies` independent augmentations.
    Within { unique: usize, copies: usize },
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

/// Exact per-coordinate variance of the minibatch gradient (mean over
/// unique ids of the mean over each id's copies), enumerating every
/// composition and augmentation assignment with its probability.
pub fn exact_grad_variance(
    grad: &dyn Fn(&[f64], usize) -> Vec<f64>,
    labels: &[usize],
    space: &EnumerableAugSpace,
    comp: Composition,
) -> Result<Vec<f64>, String> {
    let Composition::Within { unique, copies } = comp;
    let n = labels.len();
    let sets = subsets(n, unique);
    let per_set: usize = space.versions[0].len().pow((unique * copies) as u32);
    let outcomes = sets.len().saturating_mul(per_set);
    if outcomes > 1_000_000 {
        return Err(format!("{outcomes} outcomes exceed the enumeration limit"));
    }
    // per (image, version) gradients
    let g: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| space.versions[i].iter().map(|v| grad(v, labels[i])).collect())
        .collect();
    let dim = g[0][0].len();
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut total_p = 0.0;
    for set in &sets {
        let slots: Vec<usize> = set.iter().flat_map(|&i| std::iter::repeat_n(i, copies)).collect();
        let sizes: Vec<usize> = slots.iter().map(|&i| space.versions[i].len()).collect();
        let count: usize = sizes.iter().product();
        let p = 1.0 / sets.len() as f64 / count as f64;
        let mut idx = vec![0usize; slots.len()];
        for _ in 0..count {
            let mut mean = vec![0.0; dim];
            for (s, &i) in slots.iter().enumerate() {
                for (m, v) in mean.iter_mut().zip(&g[i][idx[s]]) {
                    *m += v / slots.len() as f64;
                }
            }
            for c in 0..dim {
                m1[c] += p * mean[c];
                m2[c] += p * mean[c] * mean[c];
            }
            total_p += p;
            // odometer
            for s in 0..idx.len() {
                idx[s] += 1;
                if idx[s] < sizes[s] {
                    break;
                }
                idx[s] = 0;
            }
        }
    }
    assert!((total_p - 1.0).abs() < 1e-9);
    Ok(m1.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0)).collect())
}

/// Expected gradient over all `2^d` dropout masks of a dense softmax layer
/// whose `d` inputs are dropped with probability `p` and rescaled.
pub fn enumerate_dropout_masks(model: &ToyLinear, rows: &[(Vec<f64>, usize)], p: f64) -> Vec<f64> {
    let d = model.d;
    let dim = d * model.k + model.k;
    let mut expected = vec![0.0; dim];
    for bits in 0u64..(1 << d) {
        let kept = bits.count_ones() as i32;
        let weight = (1.0 - p).powi(kept) * p.powi(d as i32 - kept);
        for (x, label) in rows {
            let masked: Vec<f64> = (0..d)
                .map(|i| if bits >> i & 1 == 1 { x[i] / (1.0 - p) } else { 0.0 })
                .collect();
            let g = model.grad(&masked, *label);
            for (e, v) in expected.iter_mut().zip(&g) {
                *e += weight * v / rows.len() as f64;
            }
        }
    }
    expected
}

/// Closed form of heavy-ball SGD with coupled L2 on `f(x) = a x^2 / 2`:
/// `v' = m v + (a + wd) x`, `x' = x - lr v'`, after `t` steps from `(x0, 0)`.
pub fn momentum_recurrence_1d(a: f64, wd: f64, lr: f64, m: f64, x0: f64, t: u32) -> (f64, f64) {
    let k = a + wd;
    // state transition [[1 - lr k, -lr m], [k, m]]
    let (m11, m12, m21, m22) = (1.0 - lr * k, -lr * m, k, m);
    let tr = m11 + m22;
    let det = m11 * m22 - m12 * m21;
    let disc = tr * tr - 4.0 * det;
    assert!(disc > 0.0, "choose parameters with real distinct eigenvalues");
    let l1 = (tr + disc.sqrt()) / 2.0;
    let l2 = (tr - disc.sqrt()) / 2.0;
    let p1 = l1.powi(t as i32);
    let p2 = l2.powi(t as i32);
    // M^t = (p1 (M - l2 I) - p2 (M - l1 I)) / (l1 - l2)
    let e = |mij: f64, diag: bool| {
        let id = if diag { 1.0 } else { 0.0 };
        (p1 * (mij - l2 * id) - p2 * (mij - l1 * id)) / (l1 - l2)
    };
    (e(m11, true) * x0, e(m21, false) * x0)
}

/// Learning rate under the halving schedule written out longhand for a
/// 20-epoch budget.
#[rustfmt::skip]
pub const STEP_HALVING_M20_LR04: [f64; 20] = [
    0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4,
    0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625, 0.00078125, 0.000390625,
];
