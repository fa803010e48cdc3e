//! Parameter containers, dropout masks and the two networks used by the
//! experiments: a normalizer-free residual CNN with zero-initialised
//! residual gains, and a plain linear classifier for analytic checks.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Named tensors in a fixed order. Also used for gradients and momentum
/// buffers, which share the layout of the parameters they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("param_set", "parameter layouts differ"));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Mean of equally laid out sets, summed in the order given.
    pub fn mean(sets: &[ParamSet]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::shape("param_set", "mean of zero sets"))?;
        let mut acc = first.clone();
        for s in &sets[1..] {
            acc.axpy(1.0, s)?;
        }
        acc.scale(1.0 / sets.len() as f64);
        Ok(acc)
    }

    /// Groups parameter indices by layer, where a layer is the parameter
    /// name with its last dotted component removed (`stage0.block1.conv1`
    /// owns both `.weight` and `.bias`). Layers keep first-appearance order.
    pub fn layers(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let layer = layer_of(name);
            match out.iter_mut().find(|(l, _)| l == layer) {
                Some((_, idx)) => idx.push(i),
                None => out.push((layer.to_string(), vec![i])),
            }
        }
        out
    }

    /// Writes the checkpoint format: a magic line, a JSON manifest line of
    /// `{name, shape}` entries, then every value as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
        }
        let manifest: Vec<Entry> = self
            .iter()
            .map(|(name, t)| Entry {
                name,
                shape: t.shape(),
            })
            .collect();
        w.write_all(CHECKPOINT_MAGIC)?;
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let corrupt = |detail: &str| Error::Corrupt {
            path: "<checkpoint>".into(),
            detail: detail.to_string(),
        };
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| corrupt("bad magic"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing manifest"))?;
        let manifest: Vec<Entry> = serde_json::from_slice(&rest[..nl])?;
        let mut raw = rest[nl + 1..].chunks_exact(8);
        let mut set = ParamSet::new();
        for e in manifest {
            let numel: usize = e.shape.iter().product();
            let data = (&mut raw)
                .take(numel)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect::<Vec<_>>();
            if data.len() != numel {
                return Err(corrupt("truncated values"));
            }
            set.push(e.name, Tensor::new(e.shape, data)?);
        }
        if raw.next().is_some() || !raw.remainder().is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(set)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"AUGMULT-PARAMS 1\n";

pub fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(layer, _)| layer)
}

/// Keep-mask over final-layer features.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub p: f64,
    pub seed: u64,
}

impl DropoutMask {
    pub fn draw(width: usize, p: f64, seed: u64) -> Result<Self> {
        check_drop_prob(p)?;
        let mut rng = seed::rng(seed);
        let keep = (0..width).map(|_| rng.gen_bool(1.0 - p)).collect();
        Ok(DropoutMask { keep, p, seed })
    }

    pub fn all_keep(width: usize) -> Self {
        DropoutMask {
            keep: vec![true; width],
            p: 0.0,
            seed: 0,
        }
    }

    /// Mask whose unit `i` is kept iff bit `i` of `bits` is set.
    pub fn from_bits(bits: u64, width: usize, p: f64) -> Result<Self> {
        check_drop_prob(p)?;
        Ok(DropoutMask {
            keep: (0..width).map(|i| bits >> i & 1 == 1).collect(),
            p,
            seed: bits,
        })
    }

    pub fn factors(&self) -> impl Iterator<Item = f64> + '_ {
        let scale = 1.0 / (1.0 - self.p);
        self.keep.iter().map(move |&k| if k { scale } else { 0.0 })
    }
}

pub fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("drop probability {p} outside [0, 1)")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Eval,
    /// One mask per batch row.
    Train(&'a [DropoutMask]),
}

/// A differentiable classifier over `[n, h, w, c]` images.
pub trait Network: Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn num_classes(&self) -> usize;
    /// Width of the features that dropout acts on.
    fn feature_width(&self) -> usize;
    fn image_dims(&self) -> [usize; 3];

    /// Records the forward pass and returns the logits node. `params` holds
    /// one var per entry of [`Network::params`]; `dropout` is an `[n, d]`
    /// tensor of mask factors.
    fn record(&self, tape: &mut Tape, params: &[Var], images: Var, dropout: Option<&Tensor>) -> Result<Var>;
}

fn mask_factors(masks: &[DropoutMask], rows: usize, width: usize) -> Result<Tensor> {
    if masks.len() != rows {
        return Err(Error::shape(
            "dropout",
            format!("{} masks for {rows} rows", masks.len()),
        ));
    }
    if let Some(m) = masks.iter().find(|m| m.keep.len() != width) {
        return Err(Error::shape(
            "dropout",
            format!("mask width {} vs feature width {width}", m.keep.len()),
        ));
    }
    Tensor::new(
        vec![rows, width],
        masks.iter().flat_map(DropoutMask::factors).collect(),
    )
}

fn record_all<N: Network + ?Sized>(
    net: &N,
    tape: &mut Tape,
    images: &Tensor,
    mode: Mode,
) -> Result<(Vec<Var>, Var)> {
    let dims = net.image_dims();
    if images.shape().len() != 4 || images.shape()[1..] != dims {
        return Err(Error::shape(
            "forward",
            format!("images {:?} vs network input {dims:?}", images.shape()),
        ));
    }
    let vars = net
        .params()
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.leaf(images.clone())?;
    let factors = match mode {
        Mode::Eval => None,
        Mode::Train(masks) => Some(mask_factors(masks, images.shape()[0], net.feature_width())?),
    };
    let logits = net.record(tape, &vars, x, factors.as_ref())?;
    Ok((vars, logits))
}

/// Logits `[n, classes]` for a batch of images.
pub fn forward<N: Network + ?Sized>(net: &N, images: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (_, logits) = record_all(net, &mut tape, images, mode)?;
    Ok(tape.value(logits).clone())
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
pub fn loss_and_grad<N: Network + ?Sized>(
    net: &N,
    images: &Tensor,
    labels: &[usize],
    mode: Mode,
    label_smoothing: f64,
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let (vars, logits) = record_all(net, &mut tape, images, mode)?;
    let loss = tape.softmax_cross_entropy(logits, labels, label_smoothing)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, var) in net.params().names().iter().zip(&vars) {
        out.push(name.clone(), grads.wrt(*var));
    }
    Ok((value, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    /// Residual blocks per stage.
    pub blocks: usize,
    /// Channels in the first stage; later stages double it.
    pub width: usize,
    pub classes: usize,
    /// `[h, w, c]`.
    pub image_dims: [usize; 3],
}

impl ResNetConfig {
    pub fn new(blocks: usize, width: usize, classes: usize, image_dims: [usize; 3]) -> Self {
        ResNetConfig {
            blocks,
            width,
            classes,
            image_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.classes == 0 {
            return Err(Error::config("blocks, width and classes must be at least 1"));
        }
        if self.image_dims.contains(&0) {
            return Err(Error::config("image dimensions must be positive"));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.width * 4
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    conv1: (usize, usize),
    conv2: (usize, usize),
    shortcut: Option<(usize, usize)>,
    alpha: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: (usize, usize),
    blocks: Vec<BlockLayout>,
    head: (usize, usize),
}

enum Init {
    He(usize),
    Zero,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> (usize, usize) {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![3, 3, cin, cout],
            Init::He(9 * cin),
        );
        let b = self.add(format!("{prefix}.bias"), vec![cout], Init::Zero);
        (w, b)
    }
}

fn build_layout(cfg: &ResNetConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let mut lb = LayoutBuilder::default();
    let stem = lb.conv("stem.conv", cfg.image_dims[2], cfg.width);
    let mut blocks = Vec::new();
    let mut cin = cfg.width;
    for stage in 0..3 {
        let cout = cfg.width << stage;
        for b in 0..cfg.blocks {
            let prefix = format!("stage{stage}.block{b}");
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let conv1 = lb.conv(&format!("{prefix}.conv1"), cin, cout);
            let conv2 = lb.conv(&format!("{prefix}.conv2"), cout, cout);
            let shortcut =
                (stride != 1 || cin != cout).then(|| lb.conv(&format!("{prefix}.shortcut"), cin, cout));
            let alpha = lb.add(format!("{prefix}.alpha"), vec![1], Init::Zero);
            blocks.push(BlockLayout {
                conv1,
                conv2,
                shortcut,
                alpha,
                stride,
            });
            cin = cout;
        }
    }
    let d = cfg.feature_width();
    let hw = lb.add("head.weight".into(), vec![d, cfg.classes], Init::He(d));
    let hb = lb.add("head.bias".into(), vec![cfg.classes], Init::Zero);
    let layout = Layout {
        stem,
        blocks,
        head: (hw, hb),
    };
    (layout, lb.entries)
}

/// Three-stage pre-activation residual CNN without normalisation layers.
///
/// Each block computes `shortcut(x) + alpha * conv2(relu(conv1(relu(x))))`
/// with `alpha` initialised to zero, so a fresh network is its shortcut
/// path. Features are globally average pooled, optionally dropped out, and
/// fed to a dense classifier.
#[derive(Clone, Debug)]
pub struct SmallResNet {
    config: ResNetConfig,
    layout: Layout,
    params: ParamSet,
}

impl SmallResNet {
    pub fn init(config: ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, entries) = build_layout(&config);
        let mut rng = seed::stream_rng(Stream::Init, &[seed]);
        let mut params = ParamSet::new();
        for (name, shape, init) in entries {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; numel],
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(SmallResNet {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a network around previously saved parameters.
    pub fn from_params(config: ResNetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (layout, entries) = build_layout(&config);
        let matches = entries.len() == params.len()
            && entries
                .iter()
                .zip(params.iter())
                .all(|((n, s, _), (pn, t))| n == pn && s.as_slice() == t.shape());
        if !matches {
            return Err(Error::shape(
                "from_params",
                "parameters do not match the configuration",
            ));
        }
        Ok(SmallResNet {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }
}

impl Network for SmallResNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    fn image_dims(&self) -> [usize; 3] {
        self.config.image_dims
    }

    fn record(&self, tape: &mut Tape, p: &[Var], images: Var, dropout: Option<&Tensor>) -> Result<Var> {
        let l = &self.layout;
        let mut x = tape.conv2d(images, p[l.stem.0], p[l.stem.1], 1)?;
        for block in &l.blocks {
            let h = tape.relu(x)?;
            let b1 = tape.conv2d(h, p[block.conv1.0], p[block.conv1.1], block.stride)?;
            let b1 = tape.relu(b1)?;
            let b2 = tape.conv2d(b1, p[block.conv2.0], p[block.conv2.1], 1)?;
            let branch = tape.scale_by(b2, p[block.alpha])?;
            let skip = match block.shortcut {
                Some((w, b)) => tape.conv2d(h, p[w], p[b], block.stride)?,
                None => x,
            };
            x = tape.add(skip, branch)?;
        }
        let x = tape.relu(x)?;
        let mut features = tape.global_avg_pool(x)?;
        if let Some(factors) = dropout {
            features = tape.mask_mul(features, factors)?;
        }
        tape.linear(features, p[l.head.0], p[l.head.1])
    }
}

/// Dense softmax classifier on flattened pixels; dropout acts on the inputs.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    dims: [usize; 3],
    classes: usize,
    params: ParamSet,
}

impl LinearClassifier {
    pub fn zeros(dims: [usize; 3], classes: usize) -> Self {
        let d = dims.iter().product();
        let mut params = ParamSet::new();
        params.push("linear.weight", Tensor::zeros(&[d, classes]));
        params.push("linear.bias", Tensor::zeros(&[classes]));
        LinearClassifier {
            dims,
            classes,
            params,
        }
    }

    pub fn with_weights(dims: [usize; 3], weight: Tensor, bias: Tensor) -> Result<Self> {
        let d: usize = dims.iter().product();
        let classes = bias.len();
        if weight.shape() != [d, classes] || bias.shape() != [classes] {
            return Err(Error::shape("linear_classifier", "weight/bias shapes"));
        }
        let mut params = ParamSet::new();
        params.push("linear.weight", weight);
        params.push("linear.bias", bias);
        Ok(LinearClassifier {
            dims,
            classes,
            params,
        })
    }
}

impl Network for LinearClassifier {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn feature_width(&self) -> usize {
        self.dims.iter().product()
    }

    fn image_dims(&self) -> [usize; 3] {
        self.dims
    }

    fn record(&self, tape: &mut Tape, p: &[Var], images: Var, dropout: Option<&Tensor>) -> Result<Var> {
        let mut x = tape.flatten(images)?;
        if let Some(factors) = dropout {
            x = tape.mask_mul(x, factors)?;
        }
        tape.linear(x, p[0], p[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ResNetConfig {
        ResNetConfig::new(2, 8, 10, [8, 8, 3])
    }

    fn images(n: usize, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let len = n * dims.iter().product::<usize>();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, dims[0], dims[1], dims[2]], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_skipinit() {
        let a = SmallResNet::init(cfg(), 5).unwrap();
        let b = SmallResNet::init(cfg(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = SmallResNet::init(cfg(), 6).unwrap();
        assert_ne!(a.params(), c.params());
        for (name, t) in a.params().iter() {
            if name.ends_with(".alpha") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn output_shape_is_batch_by_classes() {
        let net = SmallResNet::init(cfg(), 1).unwrap();
        let out = forward(&net, &images(3, [8, 8, 3], 0), Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[3, 10]);
    }

    #[test]
    fn keep_all_train_matches_eval() {
        let net = SmallResNet::init(cfg(), 2).unwrap();
        let x = images(2, [8, 8, 3], 1);
        let masks = vec![DropoutMask::all_keep(net.feature_width()); 2];
        let train = forward(&net, &x, Mode::Train(&masks)).unwrap();
        assert_eq!(train, forward(&net, &x, Mode::Eval).unwrap());
    }

    #[test]
    fn drop_all_leaves_classifier_bias() {
        let mut net = SmallResNet::init(cfg(), 2).unwrap();
        let bias: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.3).collect();
        net.params_mut()
            .get_mut("head.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let x = images(2, [8, 8, 3], 1);
        let mask = DropoutMask::from_bits(0, net.feature_width(), 0.5).unwrap();
        let out = forward(&net, &x, Mode::Train(&[mask.clone(), mask])).unwrap();
        assert_eq!(&out.data()[..10], bias.as_slice());
        assert_eq!(&out.data()[10..], bias.as_slice());
    }

    #[test]
    fn mask_width_mismatch_is_error() {
        let net = SmallResNet::init(cfg(), 2).unwrap();
        let masks = vec![DropoutMask::all_keep(3)];
        assert!(forward(&net, &images(1, [8, 8, 3], 0), Mode::Train(&masks)).is_err());
    }

    #[test]
    fn mask_draws_are_regenerable() {
        let a = DropoutMask::draw(64, 0.4, 99).unwrap();
        assert_eq!(a, DropoutMask::draw(64, 0.4, 99).unwrap());
        assert!(DropoutMask::draw(4, 1.0, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = SmallResNet::init(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        net.params().write_checkpoint(&mut buf).unwrap();
        let back = ParamSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(&back, net.params());
        let rebuilt = SmallResNet::from_params(cfg(), back).unwrap();
        assert_eq!(rebuilt.params(), net.params());
        buf.pop();
        assert!(ParamSet::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn layers_group_weight_and_bias() {
        let net = SmallResNet::init(cfg(), 0).unwrap();
        let layers = net.params().layers();
        assert_eq!(layers[0], ("stem.conv".to_string(), vec![0, 1]));
        assert!(layers
            .iter()
            .any(|(l, idx)| l == "stage0.block0" && idx.len() == 1));
        assert_eq!(layers.last().unwrap().0, "head");
    }
}
