//! Alternating optimization of the model and the weight subnetwork, with
//! validation-based model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmenter};
use crate::autodiff::{Graph, Tensor};
use crate::data::{DomainSuite, Split};
use crate::error::{Error, Result};
use crate::nn::{
    classify, extractor_forward, Arch, Checkpoint, Group, Network, NormMode, ParamKey,
};
use crate::objectives::{
    align_loss, consistency_loss, main_loss, rotation_batch, rotation_objective, LossBundle,
};

/// Auxiliary objective trained alongside the main loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    /// Learnable consistency loss `||f_w(z - z')||`.
    Consistency,
    /// Rotation prediction with its own head.
    Rotation,
    /// Main loss only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr_model: f64,
    pub lr_w: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub arch: Arch,
    pub aux_task: AuxTask,
    /// Update f_w by gradient alignment. When off, f_w stays at its
    /// initialization.
    pub learn_w: bool,
    pub per_tensor_standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr_model: 0.01,
            lr_w: 0.001,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            augment: AugmentConfig::default(),
            val_fraction: 0.2,
            eval_every: 100,
            arch: Arch::default(),
            aux_task: AuxTask::Consistency,
            learn_w: true,
            per_tensor_standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_model > 0.0) || !(self.lr_w > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be > 0 (lr_model {}, lr_w {})",
                self.lr_model, self.lr_w
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        self.augment.validate(self.arch.blocks)
    }
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_main: Option<f64>,
    pub l_wcont: Option<f64>,
    pub l_align: Option<f64>,
    pub val_acc: f64,
    pub wallclock_ms: u64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        self.step == other.step
            && bits(self.l_main) == bits(other.l_main)
            && bits(self.l_wcont) == bits(other.l_wcont)
            && bits(self.l_align) == bits(other.l_align)
            && self.val_acc.to_bits() == other.val_acc.to_bits()
    }
}

/// Result of one [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    /// Alignment loss before the f_w update; `None` when the update was
    /// skipped or disabled.
    pub l_align: Option<f64>,
    pub w_skipped: bool,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

/// Mutable training state of one trial.
#[derive(Clone)]
pub struct TrainState {
    pub net: Network,
    pub step: usize,
    pub best_val_acc: f64,
    pub best_step: usize,
    pub best_checkpoint: Checkpoint,
    pub augmenter: Augmenter,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let net = Network::init(&cfg.arch, cfg.seed);
        Self {
            best_checkpoint: Checkpoint::from_network(&net),
            net,
            step: 0,
            best_val_acc: f64::NEG_INFINITY,
            best_step: 0,
            augmenter: Augmenter::new(cfg.augment.clone(), cfg.seed.wrapping_add(0x5eed)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xba7c)),
        }
    }
}

fn finite(name: &str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v} at step {step}")))
    }
}

fn collect(
    keys: &[(ParamKey, crate::autodiff::Var<'_>)],
    grads: &crate::autodiff::GradMap<'_>,
) -> Vec<(ParamKey, Tensor)> {
    keys.iter()
        .map(|(k, v)| {
            (
                k.clone(),
                grads
                    .get(*v)
                    .expect("requested leaf")
                    .value()
                    .as_ref()
                    .clone(),
            )
        })
        .collect()
}

/// Phase one: losses on a fresh forward and the gradient of the joint loss
/// with respect to θ and φ. f_w is a constant.
pub fn joint_gradients(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    aug: &mut Augmenter,
) -> Result<(
    LossBundle,
    Vec<(ParamKey, Tensor)>,
    Vec<crate::nn::BlockStats>,
    Graph,
)> {
    let g = Graph::new();
    let (bundle, grads, stats) = {
        let rotation = cfg.aux_task == AuxTask::Rotation;
        let bound = net.bind(&g, |k| match k.group {
            Group::Extractor => true,
            Group::Classifier => rotation || !k.name.starts_with("rotation."),
            _ => false,
        });
        let out = extractor_forward(g.constant(x.clone()), &bound, NormMode::Train, Some(aug))?;
        let z_aug = out.z_aug.expect("augmentation hook installed");
        let l_main = main_loss(
            classify(out.z, &bound.classifier)?,
            Some(classify(z_aug, &bound.classifier)?),
            labels,
        )?;
        let l_wcont = consistency_loss(out.z, z_aug, &bound.fw)?;
        let joint = match cfg.aux_task {
            AuxTask::Consistency => l_main.add(l_wcont.scale(cfg.alpha)?)?,
            AuxTask::None => l_main,
            AuxTask::Rotation => {
                let (rx, rl) = rotation_batch(x)?;
                let rot = extractor_forward(g.constant(rx), &bound, NormMode::Train, None)?;
                l_main.add(rotation_objective(rot.z, &rl, &bound.rotation)?.scale(cfg.alpha)?)?
            }
        };
        let aux_value = match cfg.aux_task {
            AuxTask::Consistency => l_wcont.item(),
            _ => (joint.item() - l_main.item()) / cfg.alpha.max(f64::MIN_POSITIVE),
        };
        let bundle = LossBundle {
            l_main: l_main.item(),
            l_wcont: aux_value,
            l_joint: joint.item(),
            alpha: cfg.alpha,
        };
        let grads = g.grad(joint, &bound.leaf_vars(), false)?;
        (bundle, collect(&bound.leaves, &grads), out.stats)
    };
    Ok((bundle, grads, stats, g))
}

/// Phase two: alignment loss on a fresh forward and its gradient with
/// respect to w. θ and φ are constants.
pub fn align_gradients(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    aug: &mut Augmenter,
) -> (
    Result<(f64, Vec<(ParamKey, Tensor)>)>,
    Vec<crate::nn::BlockStats>,
    Graph,
) {
    let g = Graph::new();
    let mut stats = Vec::new();
    let res = (|| {
        let bound = net.bind(&g, |k| {
            matches!(k.group, Group::Extractor | Group::WeightNet)
        });
        let out = extractor_forward(g.constant(x.clone()), &bound, NormMode::Train, Some(aug))?;
        stats = out.stats.clone();
        let z_aug = out.z_aug.expect("augmentation hook installed");
        let l_main = main_loss(
            classify(out.z, &bound.classifier)?,
            Some(classify(z_aug, &bound.classifier)?),
            labels,
        )?;
        let l_wcont = consistency_loss(out.z, z_aug, &bound.fw)?;
        let theta = bound.leaves_in(Group::Extractor);
        let theta_vars: Vec<_> = theta.iter().map(|(_, v)| *v).collect();
        let g_main = g.grad(l_main, &theta_vars, false)?.in_order();
        let g_wcont = g.grad(l_wcont, &theta_vars, true)?.in_order();
        let align = align_loss(&g_main, &g_wcont, cfg.per_tensor_standardize)?;
        let w = bound.leaves_in(Group::WeightNet);
        let w_vars: Vec<_> = w.iter().map(|(_, v)| *v).collect();
        let grads = g.grad(align, &w_vars, false)?;
        Ok((align.item(), collect(&w, &grads)))
    })();
    (res, stats, g)
}

/// One iteration of the alternating scheme on a labelled source batch.
pub fn train_step(
    state: &mut TrainState,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let step = state.step + 1;
    let (losses, grads, stats, g1) =
        joint_gradients(&state.net, x, labels, cfg, &mut state.augmenter)?;
    finite("l_main", losses.l_main, step)?;
    finite("l_wcont", losses.l_wcont, step)?;
    finite("l_joint", losses.l_joint, step)?;
    if grads.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "joint-loss gradient at step {step}"
        )));
    }
    state.net.sgd_update(&grads, cfg.lr_model)?;
    state.net.update_running(&stats);
    let (mut forward_passes, mut backward_passes) = (g1.forward_passes(), g1.backward_passes());

    let (mut l_align, mut w_skipped) = (None, false);
    if cfg.learn_w && cfg.aux_task == AuxTask::Consistency {
        let (res, stats, g2) = align_gradients(&state.net, x, labels, cfg, &mut state.augmenter);
        forward_passes += g2.forward_passes();
        backward_passes += g2.backward_passes();
        match res {
            Ok((value, wgrads)) => {
                finite("l_align", value, step)?;
                state.net.sgd_update(&wgrads, cfg.lr_w)?;
                l_align = Some(value);
            }
            Err(Error::DegenerateGradient(_)) => w_skipped = true,
            Err(e) => return Err(e),
        }
        state.net.update_running(&stats);
    }
    state.step = step;
    Ok(StepReport {
        losses,
        l_align,
        w_skipped,
        forward_passes,
        backward_passes,
    })
}

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Class predictions of the clean branch.
pub fn predict(net: &Network, x: &Tensor, mode: NormMode) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.rows());
    let rows: Vec<usize> = (0..x.rows()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let bound = net.bind(&g, |_| false);
        let xs = g.constant(x.select_rows(chunk));
        let z = extractor_forward(xs, &bound, mode, None)?.z;
        out.extend(classify(z, &bound.classifier)?.value().argmax_rows());
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Output of [`fit`].
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub best_val_acc: f64,
    pub best_step: usize,
    pub trace: Vec<MetricsRecord>,
    pub w_skipped_steps: usize,
}

/// Train on the suite's sources with model selection on the held-out 20%.
pub fn fit(suite: &DomainSuite, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(suite, cfg, |_| {})
}

/// [`fit`] with a callback receiving every metrics record as it is produced.
pub fn fit_with(
    suite: &DomainSuite,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if suite.source_ids.is_empty() {
        return Err(Error::Config("suite has no source domain".into()));
    }
    if cfg.arch.input_dim != suite.side * suite.side || cfg.arch.classes != suite.class_count {
        return Err(Error::Config(format!(
            "architecture expects {} inputs / {} classes, suite has {} / {}",
            cfg.arch.input_dim,
            cfg.arch.classes,
            suite.side * suite.side,
            suite.class_count
        )));
    }
    let split = Split::new(suite, cfg.val_fraction, cfg.seed)?;
    let (val_x, val_y) = split.gather(suite, &split.val_pool())?;
    let mut pool = split.train_pool();
    if pool.len() < 2 {
        return Err(Error::EmptyDomain(split.domains[0].domain_id.clone()));
    }
    let start = Instant::now();
    let mut state = TrainState::new(cfg);
    let mut trace = Vec::new();
    let mut w_skipped_steps = 0;

    let mut record = |state: &mut TrainState, report: Option<&StepReport>| -> Result<()> {
        let val_acc = accuracy(&predict(&state.net, &val_x, NormMode::Running)?, &val_y);
        if val_acc > state.best_val_acc {
            state.best_val_acc = val_acc;
            state.best_step = state.step;
            state.best_checkpoint = Checkpoint::from_network(&state.net);
        }
        let rec = MetricsRecord {
            step: state.step,
            l_main: report.map(|r| r.losses.l_main),
            l_wcont: report.map(|r| r.losses.l_wcont),
            l_align: report.and_then(|r| r.l_align),
            val_acc,
            wallclock_ms: start.elapsed().as_millis() as u64,
        };
        on_record(&rec);
        trace.push(rec);
        Ok(())
    };

    record(&mut state, None)?;
    let bs = cfg.batch_size.min(pool.len());
    let mut cursor = pool.len();
    for step in 1..=cfg.steps {
        if cursor + bs > pool.len() {
            pool.shuffle(&mut state.rng);
            cursor = 0;
        }
        let (x, y) = split.gather(suite, &pool[cursor..cursor + bs])?;
        cursor += bs;
        let report = train_step(&mut state, &x, &y, cfg)?;
        if report.w_skipped {
            w_skipped_steps += 1;
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(&mut state, Some(&report))?;
        }
    }
    Ok(FitResult {
        checkpoint: state.best_checkpoint,
        best_val_acc: state.best_val_acc,
        best_step: state.best_step,
        trace,
        w_skipped_steps,
    })
}

#[cfg(test)]
mod tests;
