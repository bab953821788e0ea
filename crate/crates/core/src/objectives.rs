//! Loss terms for training and adaptation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{classify, weight_subnet_forward, BoundLinear, BoundStack};

/// Below this the gradient vector is treated as constant.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_main: f64,
    pub l_wcont: f64,
    pub l_joint: f64,
    pub alpha: f64,
}

impl LossBundle {
    pub fn new(l_main: f64, l_wcont: f64, alpha: f64) -> Self {
        Self {
            l_main,
            l_wcont,
            l_joint: l_main + alpha * l_wcont,
            alpha,
        }
    }
}

/// Flattened gradient after removing its mean and dividing by its std.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedGrad {
    pub flat: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `CE(logits_z, y) + CE(logits_z', y)`; the second term is dropped when
/// there is no perturbed branch.
pub fn main_loss<'g>(
    logits: Var<'g>,
    logits_aug: Option<Var<'g>>,
    labels: &[usize],
) -> Result<Var<'g>> {
    let clean = logits.softmax_ce(labels)?;
    match logits_aug {
        Some(la) => clean.add(la.softmax_ce(labels)?),
        None => Ok(clean),
    }
}

/// Batch mean of `||f_w(z - z')||` over samples.
pub fn consistency_loss<'g>(z: Var<'g>, z_aug: Var<'g>, fw: &BoundStack<'g>) -> Result<Var<'g>> {
    if z.shape() != z_aug.shape() {
        return Err(Error::Shape {
            op: "consistency_loss",
            lhs: z.shape(),
            rhs: z_aug.shape(),
        });
    }
    let diff = z.sub(z_aug)?;
    let diff = if diff.shape().len() == 1 {
        diff.reshape(&[1, diff.numel()])?
    } else {
        diff
    };
    weight_subnet_forward(diff, fw)?.row_l2norm()?.mean()
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_spread(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::DegenerateGradient(0.0));
    }
    let (mean, std) = moments(values);
    if !(std >= DEGENERATE_STD) {
        return Err(Error::DegenerateGradient(std));
    }
    Ok((mean, std))
}

/// Standardize the concatenation of `grads` (in the given order) with its
/// population mean and std.
pub fn standardize(grads: &[&Tensor]) -> Result<StandardizedGrad> {
    let flat: Vec<f64> = grads
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let (mean, std) = check_spread(&flat)?;
    Ok(StandardizedGrad {
        flat: flat.iter().map(|v| (v - mean) / std).collect(),
        mean,
        std,
    })
}

fn standardize_flat<'g>(v: Var<'g>) -> Result<Var<'g>> {
    check_spread(v.value().data())?;
    let n = v.numel();
    let centered = v.sub(v.mean()?.expand(&[n, 1])?)?;
    let std = centered.square()?.mean()?.sqrt()?;
    centered.mul(std.recip()?.expand(&[n, 1])?)
}

/// Graph version of [`standardize`], returning a `[P, 1]` column. With
/// `per_tensor` every gradient tensor is standardized on its own before
/// concatenation.
pub fn standardize_vars<'g>(grads: &[Var<'g>], per_tensor: bool) -> Result<Var<'g>> {
    let g = grads.first().ok_or(Error::DegenerateGradient(0.0))?.graph();
    let cols = grads
        .iter()
        .map(|v| v.reshape(&[v.numel(), 1]))
        .collect::<Result<Vec<_>>>()?;
    if per_tensor {
        let parts = cols
            .into_iter()
            .map(standardize_flat)
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts)
    } else {
        standardize_flat(g.concat(&cols)?)
    }
}

/// Mean squared difference between standardized main and consistency
/// gradients. `g_main` is detached; only `g_wcont` carries a graph.
pub fn align_loss<'g>(
    g_main: &[Var<'g>],
    g_wcont: &[Var<'g>],
    per_tensor: bool,
) -> Result<Var<'g>> {
    if g_main.len() != g_wcont.len() {
        return Err(Error::Shape {
            op: "align_loss",
            lhs: vec![g_main.len()],
            rhs: vec![g_wcont.len()],
        });
    }
    let target: Vec<Var<'g>> = g_main.iter().map(|v| v.detach()).collect();
    let a = standardize_vars(&target, per_tensor)?;
    let b = standardize_vars(g_wcont, per_tensor)?;
    a.sub(b)?.square()?.mean()
}

/// Row-wise log-softmax.
fn log_softmax<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let x = if logits.shape().len() == 1 {
        logits.reshape(&[1, logits.numel()])?
    } else {
        logits
    };
    let cols = x.shape()[1];
    let lse = x.logsumexp_rows()?;
    x.sub(lse.expand_axis(1, cols)?)
}

/// Batch mean of the Shannon entropy of `softmax(logits)`.
pub fn entropy_objective<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let logp = log_softmax(logits)?;
    logp.exp()?.mul(logp)?.sum_axis(1)?.mean()?.neg()
}

/// Rotate a square row-major image by `k` quarter turns counterclockwise.
pub fn rotate90(img: &[f64], side: usize, k: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for _ in 0..k % 4 {
        let src = out.clone();
        for r in 0..side {
            for c in 0..side {
                // counterclockwise: new[r][c] = old[c][side-1-r]
                out[r * side + c] = src[c * side + (side - 1 - r)];
            }
        }
    }
    out
}

/// Side length of the square images stored as rows of `x`.
pub fn image_side(x: &Tensor) -> Result<usize> {
    let d = x.row_len();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(Error::Shape {
            op: "rotation",
            lhs: vec![d],
            rhs: vec![side, side],
        });
    }
    Ok(side)
}

/// The four rotations of every image, grouped by rotation, with labels 0..4.
pub fn rotation_batch(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let side = image_side(x)?;
    let (n, d) = (x.rows(), x.row_len());
    let mut data = Vec::with_capacity(4 * n * d);
    let mut labels = Vec::with_capacity(4 * n);
    for k in 0..4 {
        for i in 0..n {
            data.extend(rotate90(x.row(i), side, k));
            labels.push(k);
        }
    }
    Ok((Tensor::matrix(4 * n, d, data)?, labels))
}

/// Cross-entropy of the rotation head on features of rotated inputs.
pub fn rotation_objective<'g>(
    features: Var<'g>,
    labels: &[usize],
    head: &BoundLinear<'g>,
) -> Result<Var<'g>> {
    classify(features, head)?.softmax_ce(labels)
}
