//! Test-time adaptation on unlabeled target batches.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmenter};
use crate::autodiff::{Graph, Tensor};
use crate::data::DomainSuite;
use crate::error::{Error, Result};
use crate::nn::{classify, extractor_forward, Checkpoint, Group, Network, NormMode, ParamKey};
use crate::objectives::{consistency_loss, entropy_objective, rotation_batch, rotation_objective};
use crate::train::accuracy;

/// Which parameters are updated at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Only the inserted adaptive blocks.
    Ada,
    /// Every extractor parameter.
    All,
    /// Normalization scales and shifts, with current-batch statistics.
    Bn,
    /// Nothing.
    None,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ada" => Ok(Self::Ada),
            "all" => Ok(Self::All),
            "bn" => Ok(Self::Bn),
            "none" => Ok(Self::None),
            _ => Err(Error::UnknownStrategy(s.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ada => "ada",
            Self::All => "all",
            Self::Bn => "bn",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Updated parameters carry over to the next batch.
    Online,
    /// Parameters are reset before every batch.
    Episodic,
}

/// Objective minimized at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptObjective {
    Wcont,
    Entropy,
    Rotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub strategy: Strategy,
    pub mode: AdaptMode,
    pub ttt_steps: usize,
    pub lr_adapt: f64,
    pub batch_size: usize,
    /// 1-based extractor blocks that receive an adaptive block.
    pub adaptive_locations: Vec<usize>,
    pub adapter_layers: usize,
    pub objective: AdaptObjective,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ada,
            mode: AdaptMode::Online,
            ttt_steps: 1,
            lr_adapt: 0.01,
            batch_size: 32,
            adaptive_locations: vec![1, 2, 3, 4],
            adapter_layers: 5,
            objective: AdaptObjective::Wcont,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.strategy == Strategy::Ada && self.adaptive_locations.is_empty() {
            return Err(Error::Config(
                "strategy ada needs at least one adaptive location".into(),
            ));
        }
        if let Some(&bad) = self
            .adaptive_locations
            .iter()
            .find(|&&l| l == 0 || l > blocks)
        {
            return Err(Error::Config(format!(
                "adaptive location {bad} outside 1..={blocks}"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_adapt >= 0.0) {
            return Err(Error::Config(format!(
                "lr_adapt must be >= 0, got {}",
                self.lr_adapt
            )));
        }
        self.augment.validate(blocks)
    }
}

/// Parameters updated by `strategy`, in network order.
pub fn select_param_group(strategy: Strategy, net: &Network) -> Vec<ParamKey> {
    net.params()
        .into_iter()
        .map(|(k, _)| k)
        .filter(|k| match strategy {
            Strategy::Ada => k.group == Group::Adaptive,
            Strategy::All => k.group == Group::Extractor,
            Strategy::Bn => k.is_norm_affine(),
            Strategy::None => false,
        })
        .collect()
}

/// Scalar count of a parameter list.
pub fn param_count(net: &Network, keys: &[ParamKey]) -> usize {
    net.params()
        .into_iter()
        .filter(|(k, _)| keys.contains(k))
        .map(|(_, t)| t.numel())
        .sum()
}

/// Per-domain adaptation state.
#[derive(Clone)]
pub struct AdaptState {
    /// Checkpoint network, with fresh adapters for strategy ada.
    pub base: Network,
    pub live: Network,
    pub selected: Vec<ParamKey>,
    pub cfg: AdaptConfig,
    pub batches_seen: usize,
    augmenter: Augmenter,
}

/// Outcome of one test batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    /// Test-time objective before the first update.
    pub l_wcont_pre: f64,
    /// Consistency loss measured by the final forward.
    pub l_wcont_post: f64,
    /// Forward passes, including the final prediction.
    pub forward_passes: usize,
    pub backward_passes: usize,
}

impl AdaptState {
    pub fn new(net: &Network, cfg: &AdaptConfig) -> Result<Self> {
        cfg.validate(net.blocks.len())?;
        let mut base = net.clone();
        if cfg.strategy == Strategy::Ada {
            base.insert_adapters(&cfg.adaptive_locations, cfg.adapter_layers)?;
        } else {
            base.remove_adapters();
        }
        let block = &base.blocks[cfg.augment.apply_at_block - 1];
        let reference = (block.inst_sigma > 0.0).then_some((block.inst_mu, block.inst_sigma));
        let augmenter = Augmenter::new(cfg.augment.clone(), cfg.seed.wrapping_add(0xada9))
            .with_reference(reference);
        Ok(Self {
            selected: select_param_group(cfg.strategy, &base),
            live: base.clone(),
            base,
            cfg: cfg.clone(),
            batches_seen: 0,
            augmenter,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &AdaptConfig) -> Result<Self> {
        Self::new(&ckpt.to_network()?, cfg)
    }

    fn norm_mode(&self) -> NormMode {
        if self.cfg.strategy == Strategy::Bn {
            NormMode::Batch
        } else {
            NormMode::Running
        }
    }

    /// Restore the adaptable parameters to their checkpoint values.
    pub fn reset(&mut self) {
        self.live = self.base.clone();
    }

    fn objective_and_grads(
        &mut self,
        x: &Tensor,
    ) -> Result<(f64, Vec<(ParamKey, Tensor)>, (usize, usize))> {
        let g = Graph::new();
        let selected = &self.selected;
        let bound = self.live.bind(&g, |k| selected.contains(k));
        let mode = self.norm_mode();
        let loss = match self.cfg.objective {
            AdaptObjective::Wcont => {
                let out = extractor_forward(
                    g.constant(x.clone()),
                    &bound,
                    mode,
                    Some(&mut self.augmenter),
                )?;
                consistency_loss(out.z, out.z_aug.expect("hook installed"), &bound.fw)?
            }
            AdaptObjective::Entropy => {
                let z = extractor_forward(g.constant(x.clone()), &bound, mode, None)?.z;
                entropy_objective(classify(z, &bound.classifier)?)?
            }
            AdaptObjective::Rotation => {
                let (rx, rl) = rotation_batch(x)?;
                let z = extractor_forward(g.constant(rx), &bound, mode, None)?.z;
                rotation_objective(z, &rl, &bound.rotation)?
            }
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("test-time objective {value}")));
        }
        let grads = g.grad(loss, &bound.leaf_vars(), false)?;
        let out = bound
            .leaves
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    grads.get(*v).expect("requested").value().as_ref().clone(),
                )
            })
            .collect();
        Ok((value, out, (g.forward_passes(), g.backward_passes())))
    }

    /// Update on `x` for `ttt_steps`, then predict `x` with the updated
    /// parameters.
    pub fn adapt_and_predict(&mut self, x: &Tensor) -> Result<BatchOutcome> {
        if self.cfg.mode == AdaptMode::Episodic {
            self.reset();
        }
        let mut pre = None;
        let (mut fwd, mut bwd) = (0, 0);
        if !self.selected.is_empty() {
            for _ in 0..self.cfg.ttt_steps {
                let (value, grads, passes) = self.objective_and_grads(x)?;
                pre.get_or_insert(value);
                fwd += passes.0;
                bwd += passes.1;
                if grads.iter().any(|(_, t)| !t.is_finite()) {
                    return Err(Error::NonFinite("test-time gradient".into()));
                }
                self.live.sgd_update(&grads, self.cfg.lr_adapt)?;
            }
        }
        let g = Graph::new();
        let bound = self.live.bind(&g, |_| false);
        let out = extractor_forward(
            g.constant(x.clone()),
            &bound,
            self.norm_mode(),
            Some(&mut self.augmenter),
        )?;
        let predictions = classify(out.z, &bound.classifier)?.value().argmax_rows();
        let post = consistency_loss(out.z, out.z_aug.expect("hook installed"), &bound.fw)?.item();
        self.batches_seen += 1;
        Ok(BatchOutcome {
            predictions,
            l_wcont_pre: pre.unwrap_or(post),
            l_wcont_post: post,
            forward_passes: fwd + g.forward_passes(),
            backward_passes: bwd,
        })
    }
}

/// One adapted batch in the evaluation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub domain: String,
    pub batch_idx: usize,
    pub l_wcont_pre: f64,
    pub l_wcont_post: f64,
    pub acc_running: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_domain: Vec<(String, f64)>,
    pub macro_avg: f64,
    pub records: Vec<AdaptRecord>,
}

/// Seeded sample order of a target domain.
pub fn stream_order(n: usize, seed: u64, domain_pos: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain_pos as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Adapt and predict every target domain of `suite` in seeded batches.
/// State starts from the checkpoint for every domain.
pub fn evaluate(suite: &DomainSuite, ckpt: &Checkpoint, cfg: &AdaptConfig) -> Result<EvalResult> {
    evaluate_network(suite, &ckpt.to_network()?, cfg)
}

pub fn evaluate_network(
    suite: &DomainSuite,
    net: &Network,
    cfg: &AdaptConfig,
) -> Result<EvalResult> {
    let mut per_domain = Vec::new();
    let mut records = Vec::new();
    for (pos, domain) in suite.targets()?.into_iter().enumerate() {
        let mut state = AdaptState::new(net, cfg)?;
        let order = stream_order(domain.len(), cfg.seed, pos);
        let (mut correct, mut seen) = (0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = domain.batch(chunk);
            let out = state.adapt_and_predict(&x)?;
            correct += out
                .predictions
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            seen += y.len();
            records.push(AdaptRecord {
                domain: domain.spec.domain_id.clone(),
                batch_idx: b,
                l_wcont_pre: out.l_wcont_pre,
                l_wcont_post: out.l_wcont_post,
                acc_running: correct as f64 / seen as f64,
            });
        }
        per_domain.push((domain.spec.domain_id.clone(), accuracy_from(correct, seen)));
    }
    let macro_avg = if per_domain.is_empty() {
        0.0
    } else {
        per_domain.iter().map(|(_, a)| a).sum::<f64>() / per_domain.len() as f64
    };
    Ok(EvalResult {
        per_domain,
        macro_avg,
        records,
    })
}

fn accuracy_from(correct: usize, seen: usize) -> f64 {
    if seen == 0 {
        0.0
    } else {
        correct as f64 / seen as f64
    }
}

/// Accuracy of the frozen network on a whole domain, without adaptation.
pub fn frozen_accuracy(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(accuracy(
        &crate::train::predict(net, x, NormMode::Running)?,
        labels,
    ))
}
