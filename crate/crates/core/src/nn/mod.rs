//! Network components: extractor blocks, classifier, the dimension-wise
//! weight subnetwork, adaptive blocks and the rotation head.

mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

/// Epsilon inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in running statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Parameter groups: extractor θ, classifier φ, weight subnetwork w,
/// adaptive blocks Θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Extractor,
    Classifier,
    WeightNet,
    Adaptive,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Extractor,
        Group::Classifier,
        Group::WeightNet,
        Group::Adaptive,
    ];

    /// Tag used in checkpoint files.
    pub fn tag(self) -> &'static str {
        match self {
            Group::Extractor => "theta",
            Group::Classifier => "phi",
            Group::WeightNet => "w",
            Group::Adaptive => "Theta",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: Group,
    pub name: String,
}

impl ParamKey {
    fn new(group: Group, name: impl Into<String>) -> Self {
        Self {
            group,
            name: name.into(),
        }
    }

    /// Normalization scale or shift.
    pub fn is_norm_affine(&self) -> bool {
        self.group == Group::Extractor
            && (self.name.ends_with(".gamma") || self.name.ends_with(".beta"))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.group.tag(), self.name)
    }
}

/// Sizes of the whole network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
    pub fw_layers: usize,
    pub norm: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            input_dim: 256,
            width: 64,
            blocks: 4,
            classes: 4,
            fw_layers: 10,
            norm: true,
        }
    }
}

/// Linear map, batch normalization, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    /// `(gamma, beta)`; `None` disables normalization.
    pub norm: Option<(Tensor, Tensor)>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Running averages of per-sample feature mean and standard deviation of
    /// the block output, used when a test batch is too small to mix.
    pub inst_mu: f64,
    pub inst_sigma: f64,
}

impl ExtractorBlock {
    pub fn new(weight: Tensor, bias: Tensor, norm: bool) -> Self {
        let d = bias.numel();
        Self {
            weight,
            bias,
            norm: norm.then(|| (Tensor::ones(&[d]), Tensor::zeros(&[d]))),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::ones(&[d]),
            inst_mu: 0.0,
            inst_sigma: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub type Classifier = Linear;
/// Four-way head predicting 0°, 90°, 180° or 270°.
pub type RotationHead = Linear;

/// Stack of dimension-wise `ReLU(a ∘ h + b)` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DimwiseStack {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DimwiseStack {
    /// `a = 1`, `b = 0` in every layer.
    pub fn identity(dim: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| (Tensor::ones(&[dim]), Tensor::zeros(&[dim])))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |(a, _)| a.numel())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(a, b)| a.numel() + b.numel()).sum()
    }
}

/// `f_w`: maps `z - z'` before the norm of the consistency loss.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSubnetwork {
    pub stack: DimwiseStack,
}

/// Shape-preserving block inserted after an extractor block at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveBlock {
    pub stack: DimwiseStack,
    pub enabled: bool,
}

impl AdaptiveBlock {
    pub fn identity(dim: usize, layers: usize) -> Self {
        Self {
            stack: DimwiseStack::identity(dim, layers),
            enabled: true,
        }
    }
}

/// All parameters and buffers of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub blocks: Vec<ExtractorBlock>,
    pub classifier: Classifier,
    pub rotation: RotationHead,
    pub fw: WeightSubnetwork,
    /// One slot per extractor block.
    pub adapters: Vec<Option<AdaptiveBlock>>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Network {
    /// He-normal extractor weights, zero biases, identity `f_w`, no adapters.
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut din = arch.input_dim;
        for _ in 0..arch.blocks {
            let w = normal_tensor(&mut rng, &[din, arch.width], (2.0 / din as f64).sqrt());
            blocks.push(ExtractorBlock::new(
                w,
                Tensor::zeros(&[arch.width]),
                arch.norm,
            ));
            din = arch.width;
        }
        let head_std = (1.0 / arch.width as f64).sqrt();
        let classifier = Linear {
            weight: normal_tensor(&mut rng, &[arch.width, arch.classes], head_std),
            bias: Tensor::zeros(&[arch.classes]),
        };
        let rotation = Linear {
            weight: normal_tensor(&mut rng, &[arch.width, 4], head_std),
            bias: Tensor::zeros(&[4]),
        };
        Self {
            blocks,
            classifier,
            rotation,
            fw: WeightSubnetwork {
                stack: DimwiseStack::identity(arch.width, arch.fw_layers),
            },
            adapters: vec![None; arch.blocks],
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.blocks.first().map_or(0, ExtractorBlock::in_dim),
            width: self.feature_dim(),
            blocks: self.blocks.len(),
            classes: self.classifier.bias.numel(),
            fw_layers: self.fw.stack.layers.len(),
            norm: self.blocks.first().is_some_and(|b| b.norm.is_some()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, ExtractorBlock::out_dim)
    }

    /// Insert freshly initialized adapters at the given 1-based block indices.
    pub fn insert_adapters(&mut self, locations: &[usize], layers: usize) -> Result<()> {
        self.adapters = vec![None; self.blocks.len()];
        for &loc in locations {
            if loc == 0 || loc > self.blocks.len() {
                return Err(Error::Config(format!(
                    "adapter location {loc} outside 1..={}",
                    self.blocks.len()
                )));
            }
            let dim = self.blocks[loc - 1].out_dim();
            self.adapters[loc - 1] = Some(AdaptiveBlock::identity(dim, layers));
        }
        Ok(())
    }

    pub fn remove_adapters(&mut self) {
        self.adapters = vec![None; self.blocks.len()];
    }

    /// Every trainable tensor in a fixed order.
    pub fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                ParamKey::new(Group::Extractor, format!("extractor.{i}.weight")),
                &b.weight,
            ));
            out.push((
                ParamKey::new(Group::Extractor, format!("extractor.{i}.bias")),
                &b.bias,
            ));
            if let Some((g, be)) = &b.norm {
                out.push((
                    ParamKey::new(Group::Extractor, format!("extractor.{i}.gamma")),
                    g,
                ));
                out.push((
                    ParamKey::new(Group::Extractor, format!("extractor.{i}.beta")),
                    be,
                ));
            }
        }
        out.push((
            ParamKey::new(Group::Classifier, "classifier.weight"),
            &self.classifier.weight,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "classifier.bias"),
            &self.classifier.bias,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "rotation.weight"),
            &self.rotation.weight,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "rotation.bias"),
            &self.rotation.bias,
        ));
        for (l, (a, b)) in self.fw.stack.layers.iter().enumerate() {
            out.push((ParamKey::new(Group::WeightNet, format!("fw.{l}.a")), a));
            out.push((ParamKey::new(Group::WeightNet, format!("fw.{l}.b")), b));
        }
        for (i, ad) in self.adapters.iter().enumerate() {
            if let Some(ad) = ad {
                for (l, (a, b)) in ad.stack.layers.iter().enumerate() {
                    out.push((
                        ParamKey::new(Group::Adaptive, format!("adapter.{i}.{l}.a")),
                        a,
                    ));
                    out.push((
                        ParamKey::new(Group::Adaptive, format!("adapter.{i}.{l}.b")),
                        b,
                    ));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`Network::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((
                ParamKey::new(Group::Extractor, format!("extractor.{i}.weight")),
                &mut b.weight,
            ));
            out.push((
                ParamKey::new(Group::Extractor, format!("extractor.{i}.bias")),
                &mut b.bias,
            ));
            if let Some((g, be)) = &mut b.norm {
                out.push((
                    ParamKey::new(Group::Extractor, format!("extractor.{i}.gamma")),
                    g,
                ));
                out.push((
                    ParamKey::new(Group::Extractor, format!("extractor.{i}.beta")),
                    be,
                ));
            }
        }
        out.push((
            ParamKey::new(Group::Classifier, "classifier.weight"),
            &mut self.classifier.weight,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "classifier.bias"),
            &mut self.classifier.bias,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "rotation.weight"),
            &mut self.rotation.weight,
        ));
        out.push((
            ParamKey::new(Group::Classifier, "rotation.bias"),
            &mut self.rotation.bias,
        ));
        for (l, (a, b)) in self.fw.stack.layers.iter_mut().enumerate() {
            out.push((ParamKey::new(Group::WeightNet, format!("fw.{l}.a")), a));
            out.push((ParamKey::new(Group::WeightNet, format!("fw.{l}.b")), b));
        }
        for (i, ad) in self.adapters.iter_mut().enumerate() {
            if let Some(ad) = ad {
                for (l, (a, b)) in ad.stack.layers.iter_mut().enumerate() {
                    out.push((
                        ParamKey::new(Group::Adaptive, format!("adapter.{i}.{l}.a")),
                        a,
                    ));
                    out.push((
                        ParamKey::new(Group::Adaptive, format!("adapter.{i}.{l}.b")),
                        b,
                    ));
                }
            }
        }
        out
    }

    /// Plain SGD: `p -= lr * grad` for every listed key.
    pub fn sgd_update(&mut self, grads: &[(ParamKey, Tensor)], lr: f64) -> Result<()> {
        let mut slots = self.params_mut();
        for (key, g) in grads {
            let slot = slots
                .iter_mut()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::MissingParam(key.to_string()))?;
            if slot.1.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd",
                    lhs: slot.1.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (p, d) in slot.1.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * d;
            }
        }
        Ok(())
    }

    /// Scalars in one group.
    pub fn group_size(&self, group: Group) -> usize {
        self.params()
            .iter()
            .filter(|(k, _)| k.group == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over the names, shapes and bit patterns of one group.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (key, t) in self.params() {
            if key.group != group {
                continue;
            }
            h.update(key.name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Fold the batch statistics observed in a training forward pass into the
    /// running buffers.
    pub fn update_running(&mut self, stats: &[BlockStats]) {
        let m = NORM_MOMENTUM;
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            if let (Some(mean), Some(var)) = (&s.batch_mean, &s.batch_var) {
                for (r, v) in b.running_mean.data_mut().iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in b.running_var.data_mut().iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
            b.inst_mu = (1.0 - m) * b.inst_mu + m * s.inst_mu;
            b.inst_sigma = (1.0 - m) * b.inst_sigma + m * s.inst_sigma;
        }
    }

    /// Place the network on a graph. Parameters accepted by `trainable`
    /// become leaves, everything else constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: impl Fn(&ParamKey) -> bool) -> Bound<'g> {
        let mut leaves = Vec::new();
        let mut mk = |group: Group, name: String, t: &Tensor| -> Var<'g> {
            let key = ParamKey::new(group, name);
            if trainable(&key) {
                let v = g.leaf(t.clone());
                leaves.push((key, v));
                v
            } else {
                g.constant(t.clone())
            }
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let weight = mk(Group::Extractor, format!("extractor.{i}.weight"), &b.weight);
            let bias = mk(Group::Extractor, format!("extractor.{i}.bias"), &b.bias);
            let norm = b.norm.as_ref().map(|(ga, be)| BoundNorm {
                gamma: mk(Group::Extractor, format!("extractor.{i}.gamma"), ga),
                beta: mk(Group::Extractor, format!("extractor.{i}.beta"), be),
                running_mean: b.running_mean.clone(),
                running_var: b.running_var.clone(),
            });
            blocks.push(BoundBlock { weight, bias, norm });
        }
        let classifier = BoundLinear {
            weight: mk(
                Group::Classifier,
                "classifier.weight".into(),
                &self.classifier.weight,
            ),
            bias: mk(
                Group::Classifier,
                "classifier.bias".into(),
                &self.classifier.bias,
            ),
        };
        let rotation = BoundLinear {
            weight: mk(
                Group::Classifier,
                "rotation.weight".into(),
                &self.rotation.weight,
            ),
            bias: mk(
                Group::Classifier,
                "rotation.bias".into(),
                &self.rotation.bias,
            ),
        };
        let fw = BoundStack {
            layers: self
                .fw
                .stack
                .layers
                .iter()
                .enumerate()
                .map(|(l, (a, b))| {
                    (
                        mk(Group::WeightNet, format!("fw.{l}.a"), a),
                        mk(Group::WeightNet, format!("fw.{l}.b"), b),
                    )
                })
                .collect(),
        };
        let adapters = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, ad)| {
                ad.as_ref().filter(|a| a.enabled).map(|ad| BoundStack {
                    layers: ad
                        .stack
                        .layers
                        .iter()
                        .enumerate()
                        .map(|(l, (a, b))| {
                            (
                                mk(Group::Adaptive, format!("adapter.{i}.{l}.a"), a),
                                mk(Group::Adaptive, format!("adapter.{i}.{l}.b"), b),
                            )
                        })
                        .collect(),
                })
            })
            .collect();
        Bound {
            blocks,
            classifier,
            rotation,
            fw,
            adapters,
            leaves,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct BoundNorm<'g> {
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
    running_mean: Tensor,
    running_var: Tensor,
}

pub struct BoundBlock<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
    pub norm: Option<BoundNorm<'g>>,
}

pub struct BoundLinear<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
}

pub struct BoundStack<'g> {
    pub layers: Vec<(Var<'g>, Var<'g>)>,
}

/// A [`Network`] placed on a graph.
pub struct Bound<'g> {
    pub blocks: Vec<BoundBlock<'g>>,
    pub classifier: BoundLinear<'g>,
    pub rotation: BoundLinear<'g>,
    pub fw: BoundStack<'g>,
    pub adapters: Vec<Option<BoundStack<'g>>>,
    /// Trainable parameters in binding order.
    pub leaves: Vec<(ParamKey, Var<'g>)>,
}

impl<'g> Bound<'g> {
    pub fn leaf_vars(&self) -> Vec<Var<'g>> {
        self.leaves.iter().map(|(_, v)| *v).collect()
    }

    pub fn leaves_in(&self, group: Group) -> Vec<(ParamKey, Var<'g>)> {
        self.leaves
            .iter()
            .filter(|(k, _)| k.group == group)
            .cloned()
            .collect()
    }
}

/// How normalization layers pick their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Batch statistics, reported back for running-buffer updates.
    Train,
    /// Stored running statistics.
    Running,
    /// Current-batch statistics without touching the buffers.
    Batch,
}

/// Statistics of the clean branch of one block in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BlockStats {
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
    pub inst_mu: f64,
    pub inst_sigma: f64,
}

/// Produces the perturbed branch from a block output.
pub trait AugmentHook {
    /// 1-based block whose output is perturbed.
    fn block(&self) -> usize;
    fn perturb<'g>(&mut self, h: Var<'g>) -> Result<Var<'g>>;
}

pub struct ExtractorOutput<'g> {
    pub z: Var<'g>,
    /// Perturbed branch, when an augmentation hook was given.
    pub z_aug: Option<Var<'g>>,
    /// Clean-branch output of every block (after its adapter).
    pub intermediates: Vec<Var<'g>>,
    pub stats: Vec<BlockStats>,
}

fn norm_forward<'g>(
    h: Var<'g>,
    norm: &BoundNorm<'g>,
    mode: NormMode,
) -> Result<(Var<'g>, Option<(Vec<f64>, Vec<f64>)>)> {
    let g = h.graph();
    match mode {
        NormMode::Running => {
            let inv: Vec<f64> = norm
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                .collect();
            let shift: Vec<f64> = norm
                .running_mean
                .data()
                .iter()
                .zip(&inv)
                .map(|(m, s)| -m * s)
                .collect();
            let xn = h
                .mul_row(g.constant(Tensor::vector(inv)))?
                .add_row(g.constant(Tensor::vector(shift)))?;
            Ok((xn.mul_row(norm.gamma)?.add_row(norm.beta)?, None))
        }
        NormMode::Train | NormMode::Batch => {
            let rows = h.shape()[0];
            let mean = h.mean_axis(0)?;
            let centered = h.sub(mean.expand_axis(0, rows)?)?;
            let var = centered.square()?.mean_axis(0)?;
            let inv = var.shift(NORM_EPS)?.sqrt()?.recip()?;
            let y = centered
                .mul_row(inv)?
                .mul_row(norm.gamma)?
                .add_row(norm.beta)?;
            let stats = (mode == NormMode::Train)
                .then(|| (mean.value().data().to_vec(), var.value().data().to_vec()));
            Ok((y, stats))
        }
    }
}

fn block_forward<'g>(
    x: Var<'g>,
    block: &BoundBlock<'g>,
    mode: NormMode,
) -> Result<(Var<'g>, BlockStats)> {
    let pre = x.matmul(block.weight)?.add_row(block.bias)?;
    let (normed, batch) = match &block.norm {
        Some(n) => norm_forward(pre, n, mode)?,
        None => (pre, None),
    };
    let out = normed.relu()?;
    let mut stats = BlockStats::default();
    if mode == NormMode::Train {
        if let Some((m, v)) = batch {
            stats.batch_mean = Some(m);
            stats.batch_var = Some(v);
        }
        let (mu, sigma) = mean_instance_stats(&out.value());
        stats.inst_mu = mu;
        stats.inst_sigma = sigma;
    }
    Ok((out, stats))
}

/// Batch average of per-sample feature mean and (population) std.
pub fn mean_instance_stats(h: &Tensor) -> (f64, f64) {
    let rows = h.rows();
    let (mut mu_acc, mut sd_acc) = (0.0, 0.0);
    for i in 0..rows {
        let (mu, sd) = row_stats(h.row(i));
        mu_acc += mu;
        sd_acc += sd;
    }
    (mu_acc / rows as f64, sd_acc / rows as f64)
}

/// Population mean and `sqrt(var + STD_EPS)` of one row.
pub fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + crate::autodiff::STD_EPS).sqrt())
}

/// Dimension-wise `ReLU(a ∘ h + b)`, layer after layer.
pub fn stack_forward<'g>(h: Var<'g>, stack: &BoundStack<'g>) -> Result<Var<'g>> {
    let mut out = h;
    for (a, b) in &stack.layers {
        out = out.mul_row(*a)?.add_row(*b)?.relu()?;
    }
    Ok(out)
}

/// `f_w(h)`.
pub fn weight_subnet_forward<'g>(h: Var<'g>, fw: &BoundStack<'g>) -> Result<Var<'g>> {
    if let Some((a, _)) = fw.layers.first() {
        let (hd, ad) = (h.shape()[1], a.numel());
        if hd != ad {
            return Err(Error::Shape {
                op: "weight_subnet",
                lhs: h.shape(),
                rhs: vec![ad],
            });
        }
    }
    stack_forward(h, fw)
}

/// Affine classifier: `z W + b`.
pub fn classify<'g>(z: Var<'g>, head: &BoundLinear<'g>) -> Result<Var<'g>> {
    z.matmul(head.weight)?.add_row(head.bias)
}

/// Run the extractor. Each block output passes through its adapter (when
/// bound) before the next block; the perturbed branch, if any, starts at the
/// hook's block and shares every later block and adapter.
pub fn extractor_forward<'g>(
    x: Var<'g>,
    net: &Bound<'g>,
    mode: NormMode,
    mut augment: Option<&mut dyn AugmentHook>,
) -> Result<ExtractorOutput<'g>> {
    let mut dim = x.shape().get(1).copied().unwrap_or(0);
    for b in &net.blocks {
        let w = b.weight.shape();
        if w[0] != dim {
            return Err(Error::Shape {
                op: "extractor",
                lhs: vec![dim],
                rhs: w,
            });
        }
        dim = w[1];
    }
    if let Some(hook) = augment.as_deref() {
        if hook.block() == 0 || hook.block() > net.blocks.len() {
            return Err(Error::Config(format!(
                "augmentation block {} outside 1..={}",
                hook.block(),
                net.blocks.len()
            )));
        }
    }
    x.graph().count_forward();
    let mut z = x;
    let mut z_aug: Option<Var<'g>> = None;
    let mut intermediates = Vec::with_capacity(net.blocks.len());
    let mut stats = Vec::with_capacity(net.blocks.len());
    for (i, block) in net.blocks.iter().enumerate() {
        let (mut h, s) = block_forward(z, block, mode)?;
        let mut h_aug = match z_aug {
            Some(za) => Some(block_forward(za, block, mode)?.0),
            None => None,
        };
        if let Some(hook) = augment.as_deref_mut() {
            if hook.block() == i + 1 {
                h_aug = Some(hook.perturb(h)?);
            }
        }
        if let Some(Some(ad)) = net.adapters.get(i) {
            h = stack_forward(h, ad)?;
            h_aug = h_aug.map(|v| stack_forward(v, ad)).transpose()?;
        }
        intermediates.push(h);
        stats.push(s);
        z = h;
        z_aug = h_aug;
    }
    Ok(ExtractorOutput {
        z,
        z_aug,
        intermediates,
        stats,
    })
}
