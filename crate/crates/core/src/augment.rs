//! Feature-level augmentation producing the perturbed branch `z'`.
//!
//! Statistics mixing re-styles every sample with a convex mix of its own
//! per-sample feature mean/std and those of another sample in the batch. The
//! mixing coefficients are treated as constants in the graph; gradients flow
//! through the features only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::AugmentHook;

/// Floor on the per-sample std in the normalizing denominator.
pub const MIX_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    StatMix,
    Affine,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Beta(α, α) concentration for the mixing weight.
    pub mix_alpha: f64,
    /// 1-based extractor block whose output is perturbed.
    pub apply_at_block: usize,
    pub affine_weight_std: f64,
    pub affine_bias_std: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::StatMix,
            mix_alpha: 0.1,
            apply_at_block: 1,
            affine_weight_std: 0.5,
            affine_bias_std: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if !(self.mix_alpha > 0.0) {
            return Err(Error::Config(format!(
                "mix_alpha must be > 0, got {}",
                self.mix_alpha
            )));
        }
        if self.apply_at_block == 0 || self.apply_at_block > blocks {
            return Err(Error::Config(format!(
                "apply_at_block {} outside 1..={blocks}",
                self.apply_at_block
            )));
        }
        if self.affine_weight_std < 0.0 || self.affine_bias_std < 0.0 {
            return Err(Error::Config(
                "affine standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Random choices of one mixing draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    /// Partner of every sample.
    pub perm: Vec<usize>,
    /// Weight of the sample's own statistics.
    pub lambda: Vec<f64>,
}

impl MixPlan {
    pub fn draw(rows: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(e.to_string()))?;
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(rng);
        let lambda = (0..rows).map(|_| beta.sample(rng)).collect();
        Ok(Self { perm, lambda })
    }
}

/// Per-sample population mean and std over the feature axis.
pub fn instance_stats(h: &Tensor) -> Vec<(f64, f64)> {
    (0..h.rows())
        .map(|i| {
            let row = h.row(i);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            (mu, var.sqrt())
        })
        .collect()
}

/// Row-wise `h'_i = scale_i * h_i + shift_i` realizing the mix.
fn coefficients(own: &[(f64, f64)], target: impl Fn(usize) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    own.iter()
        .enumerate()
        .map(|(i, &(mu, sd))| {
            let (mix_mu, mix_sd) = target(i);
            let scale = mix_sd / sd.max(MIX_EPS);
            (scale, mix_mu - mu * scale)
        })
        .unzip()
}

/// Mixed `(μ̃, σ̃)` for every sample under `plan`.
pub fn mixed_stats(stats: &[(f64, f64)], plan: &MixPlan) -> Vec<(f64, f64)> {
    (0..stats.len())
        .map(|i| {
            let l = plan.lambda[i];
            let (mu, sd) = stats[i];
            let (pmu, psd) = stats[plan.perm[i]];
            (l * mu + (1.0 - l) * pmu, l * sd + (1.0 - l) * psd)
        })
        .collect()
}

fn mix_coefficients(h: &Tensor, plan: &MixPlan) -> (Vec<f64>, Vec<f64>) {
    let stats = instance_stats(h);
    let mixed = mixed_stats(&stats, plan);
    coefficients(&stats, |i| mixed[i])
}

fn reference_coefficients(
    h: &Tensor,
    lambda: &[f64],
    reference: (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let stats = instance_stats(h);
    coefficients(&stats, |i| {
        let l = lambda[i];
        let (mu, sd) = stats[i];
        (
            l * mu + (1.0 - l) * reference.0,
            l * sd + (1.0 - l) * reference.1,
        )
    })
}

fn apply_rows(h: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let w = h.row_len();
    let mut out = h.clone();
    for (i, chunk) in out.data_mut().chunks_mut(w).enumerate() {
        for v in chunk {
            *v = scale[i] * *v + shift[i];
        }
    }
    out
}

/// Mix instance statistics under a fixed plan.
pub fn stat_mix_with_plan(h: &Tensor, plan: &MixPlan) -> Tensor {
    let (scale, shift) = mix_coefficients(h, plan);
    apply_rows(h, &scale, &shift)
}

/// Statistics mixing with a fresh permutation and Beta(α, α) weights.
pub fn stat_mix(h: &Tensor, alpha: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if h.rows() < 2 {
        return Err(Error::BatchTooSmall(h.rows()));
    }
    let plan = MixPlan::draw(h.rows(), alpha, rng)?;
    Ok(stat_mix_with_plan(h, &plan))
}

/// `h' = gamma ∘ h + delta`.
pub fn affine_apply(h: &Tensor, gamma: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if gamma.shape() != h.shape() || delta.shape() != h.shape() {
        return Err(Error::Shape {
            op: "affine_aug",
            lhs: h.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let data = h
        .data()
        .iter()
        .zip(gamma.data().iter().zip(delta.data()))
        .map(|(x, (g, d))| g * x + d)
        .collect();
    Tensor::new(h.shape().to_vec(), data)
}

fn affine_draw(
    shape: &[usize],
    weight_std: f64,
    bias_std: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let n: usize = shape.iter().product();
    let wd = Normal::new(1.0, weight_std).map_err(|e| Error::Config(e.to_string()))?;
    let bd = Normal::new(0.0, bias_std).map_err(|e| Error::Config(e.to_string()))?;
    let gamma = (0..n).map(|_| wd.sample(rng)).collect();
    let delta = (0..n).map(|_| bd.sample(rng)).collect();
    Ok((
        Tensor::new(shape.to_vec(), gamma)?,
        Tensor::new(shape.to_vec(), delta)?,
    ))
}

/// Per-element random affine map with `γ ~ N(1, w²)`, `δ ~ N(0, b²)`.
pub fn affine_aug(
    h: &Tensor,
    weight_std: f64,
    bias_std: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (gamma, delta) = affine_draw(h.shape(), weight_std, bias_std, rng)?;
    affine_apply(h, &gamma, &delta)
}

/// Seeded augmentation hook. Every call to `perturb` draws fresh randomness.
#[derive(Clone, Debug)]
pub struct Augmenter {
    cfg: AugmentConfig,
    rng: ChaCha8Rng,
    /// Source `(μ, σ)` to mix against when the batch has a single sample.
    reference: Option<(f64, f64)>,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.rng_seed);
        Self {
            cfg,
            rng,
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: Option<(f64, f64)>) -> Self {
        self.reference = reference;
        self
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }
}

impl AugmentHook for Augmenter {
    fn block(&self) -> usize {
        self.cfg.apply_at_block
    }

    fn perturb<'g>(&mut self, h: Var<'g>) -> Result<Var<'g>> {
        let g = h.graph();
        let value = h.value();
        match self.cfg.kind {
            AugmentKind::None => h.scale(1.0),
            AugmentKind::Affine => {
                let (gamma, delta) = affine_draw(
                    value.shape(),
                    self.cfg.affine_weight_std,
                    self.cfg.affine_bias_std,
                    &mut self.rng,
                )?;
                h.mul(g.constant(gamma))?.add(g.constant(delta))
            }
            AugmentKind::StatMix => {
                let rows = value.rows();
                let (scale, shift) = if rows >= 2 {
                    let plan = MixPlan::draw(rows, self.cfg.mix_alpha, &mut self.rng)?;
                    mix_coefficients(&value, &plan)
                } else {
                    let reference = self.reference.ok_or(Error::MissingRunningStats)?;
                    let beta = Beta::new(self.cfg.mix_alpha, self.cfg.mix_alpha)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    let lambda: Vec<f64> = (0..rows).map(|_| beta.sample(&mut self.rng)).collect();
                    reference_coefficients(&value, &lambda, reference)
                };
                h.mul_col(g.constant(Tensor::vector(scale)))?
                    .add_col(g.constant(Tensor::vector(shift)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..2.0))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn lambda_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = batch(&mut rng, 5, 8);
        let plan = MixPlan {
            perm: vec![4, 3, 2, 1, 0],
            lambda: vec![1.0; 5],
        };
        let out = stat_mix_with_plan(&h, &plan);
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rows_become_mixed_means() {
        let h = Tensor::from_rows(&[vec![0.3; 6], vec![1.7; 6]]).unwrap();
        let plan = MixPlan {
            perm: vec![1, 0],
            lambda: vec![0.25, 0.6],
        };
        let out = stat_mix_with_plan(&h, &plan);
        let expect = [0.25 * 0.3 + 0.75 * 1.7, 0.6 * 1.7 + 0.4 * 0.3];
        for i in 0..2 {
            for v in out.row(i) {
                assert!((v - expect[i]).abs() < 1e-9, "{v} vs {}", expect[i]);
            }
        }
    }

    #[test]
    fn lambda_zero_swaps_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = batch(&mut rng, 2, 16);
        let plan = MixPlan {
            perm: vec![1, 0],
            lambda: vec![0.0, 0.0],
        };
        let before = instance_stats(&h);
        let after = instance_stats(&stat_mix_with_plan(&h, &plan));
        for i in 0..2 {
            assert!((after[i].0 - before[1 - i].0).abs() < 1e-9);
            assert!((after[i].1 - before[1 - i].1).abs() < 1e-9);
        }
    }

    #[test]
    fn output_statistics_are_the_mixed_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let h = batch(&mut rng, 6, 12);
            let plan = MixPlan::draw(6, 0.1, &mut rng).unwrap();
            let stats = instance_stats(&h);
            let expect = mixed_stats(&stats, &plan);
            let got = instance_stats(&stat_mix_with_plan(&h, &plan));
            for i in 0..6 {
                assert!(stats[i].1 > 1e-4);
                assert!((got[i].0 - expect[i].0).abs() < 1e-6);
                assert!((got[i].1 - expect[i].1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_sample_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = batch(&mut rng, 1, 4);
        assert!(matches!(
            stat_mix(&h, 0.1, &mut rng),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn single_sample_hook_uses_reference_or_errors() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = g.constant(batch(&mut rng, 1, 8));
        let mut aug = Augmenter::new(AugmentConfig::default(), 0);
        assert!(matches!(aug.perturb(h), Err(Error::MissingRunningStats)));
        let mut aug = aug.with_reference(Some((0.5, 0.2)));
        let out = aug.perturb(h).unwrap();
        assert_eq!(out.shape(), vec![1, 8]);
        assert!(out.value().is_finite());
    }

    #[test]
    fn degenerate_affine_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = batch(&mut rng, 3, 4);
        assert_eq!(affine_aug(&h, 0.0, 0.0, &mut rng).unwrap(), h);
        let two = Tensor::full(h.shape(), 2.0);
        let one = Tensor::full(h.shape(), 1.0);
        let out = affine_apply(&h, &two, &one).unwrap();
        for (o, x) in out.data().iter().zip(h.data()) {
            assert_eq!(*o, 2.0 * x + 1.0);
        }
    }

    #[test]
    fn affine_offset_is_unbiased() {
        // h' - h = (γ - 1) h + δ has mean 0 and variance w² h² + b².
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let h = Tensor::full(&[n, 1], 0.8);
        let out = affine_aug(&h, 0.5, 0.5, &mut rng).unwrap();
        let mean = out.data().iter().map(|v| v - 0.8).sum::<f64>() / n as f64;
        let sd = (0.25f64 * 0.64 + 0.25).sqrt();
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn hook_is_deterministic_and_fresh_per_call() {
        let run = || {
            let g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let h = g.constant(batch(&mut rng, 8, 5));
            let mut aug = Augmenter::new(AugmentConfig::default(), 99);
            let a = aug.perturb(h).unwrap().value().as_ref().clone();
            let b = aug.perturb(h).unwrap().value().as_ref().clone();
            (a, b)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }

    /// Permuting the batch before mixing only relabels samples, so the
    /// distribution of what a given sample receives is unchanged.
    #[test]
    fn mixing_is_reorder_invariant_in_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = batch(&mut rng, 4, 10);
        let order = [2usize, 0, 3, 1];
        let reordered = h.select_rows(&order);
        let trials = 4000;
        let (mut acc_a, mut acc_b) = (0.0, 0.0);
        let (mut sq_a, mut sq_b) = (0.0, 0.0);
        for t in 0..trials {
            let mut ra = ChaCha8Rng::seed_from_u64(1000 + t);
            let mut rb = ChaCha8Rng::seed_from_u64(9_000_000 + t);
            // mix then permute: track original sample 0
            let a = stat_mix(&h, 0.1, &mut ra).unwrap();
            let ma = instance_stats(&a)[0].0;
            // permute then mix: original sample 0 now sits at position 1
            let b = stat_mix(&reordered, 0.1, &mut rb).unwrap();
            let mb = instance_stats(&b)[1].0;
            acc_a += ma;
            acc_b += mb;
            sq_a += ma * ma;
            sq_b += mb * mb;
        }
        let n = trials as f64;
        let (ma, mb) = (acc_a / n, acc_b / n);
        let va = sq_a / n - ma * ma;
        let vb = sq_b / n - mb * mb;
        let se = ((va + vb) / n).sqrt();
        assert!((ma - mb).abs() < 4.0 * se, "{ma} vs {mb} (se {se})");
    }
}
