//! Composite operations built from graph primitives.

use super::graph::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Added under the square root of every standard deviation.
pub const STD_EPS: f64 = 1e-8;

impl<'g> Var<'g> {
    pub fn square(&self) -> Result<Var<'g>> {
        self.mul(*self)
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    /// Population standard deviation over `axis`, with [`STD_EPS`] inside the root.
    pub fn std_axis(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let mu = self.mean_axis(axis)?.expand_axis(axis, shape[axis])?;
        self.sub(mu)?
            .square()?
            .mean_axis(axis)?
            .shift(STD_EPS)?
            .sqrt()
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2norm(&self) -> Result<Var<'g>> {
        self.square()?.sum()?.sqrt()
    }

    /// Euclidean norm of every row of a matrix.
    pub fn row_l2norm(&self) -> Result<Var<'g>> {
        self.square()?.sum_axis(1)?.sqrt()
    }

    /// `self[i, j] + v[j]` for a matrix and a row vector.
    pub fn add_row(&self, v: Var<'g>) -> Result<Var<'g>> {
        let rows = self.shape()[0];
        self.add(v.expand_axis(0, rows)?)
    }

    /// `self[i, j] * v[j]`.
    pub fn mul_row(&self, v: Var<'g>) -> Result<Var<'g>> {
        let rows = self.shape()[0];
        self.mul(v.expand_axis(0, rows)?)
    }

    /// `self[i, j] + v[i]`.
    pub fn add_col(&self, v: Var<'g>) -> Result<Var<'g>> {
        let cols = self.shape()[1];
        self.add(v.expand_axis(1, cols)?)
    }

    /// `self[i, j] * v[i]`.
    pub fn mul_col(&self, v: Var<'g>) -> Result<Var<'g>> {
        let cols = self.shape()[1];
        self.mul(v.expand_axis(1, cols)?)
    }

    fn as_batch(&self) -> Result<Var<'g>> {
        match self.shape().len() {
            1 => {
                let c = self.shape()[0];
                self.reshape(&[1, c])
            }
            2 => Ok(*self),
            _ => Err(Error::Shape {
                op: "logits",
                lhs: self.shape(),
                rhs: vec![2],
            }),
        }
    }

    /// Row-wise `log(sum(exp(x)))`, shifted by the (constant) row maximum.
    pub fn logsumexp_rows(&self) -> Result<Var<'g>> {
        let x = self.as_batch()?;
        let (shifted, max) = x.shift_by_row_max()?;
        shifted.exp()?.sum_axis(1)?.ln()?.add(max)
    }

    fn shift_by_row_max(&self) -> Result<(Var<'g>, Var<'g>)> {
        let v = self.value();
        let cols = v.shape()[1];
        let max: Vec<f64> = (0..v.rows())
            .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let max = self.graph().constant(Tensor::vector(max));
        Ok((self.sub(max.expand_axis(1, cols)?)?, max))
    }

    /// Batch-mean softmax cross-entropy against integer labels.
    pub fn softmax_ce(&self, labels: &[usize]) -> Result<Var<'g>> {
        let x = self.as_batch()?;
        let shape = x.shape();
        let (rows, classes) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "softmax_ce",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let mut onehot = vec![0.0; rows * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            onehot[i * classes + y] = 1.0;
        }
        let onehot = x.graph().constant(Tensor::new(shape, onehot)?);
        let (shifted, _) = x.shift_by_row_max()?;
        let lse = shifted.exp()?.sum_axis(1)?.ln()?;
        let picked = shifted.mul(onehot)?.sum_axis(1)?;
        lse.sub(picked)?.mean()
    }

    /// Row-wise softmax probabilities.
    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let x = self.as_batch()?;
        let cols = x.shape()[1];
        let (shifted, _) = x.shift_by_row_max()?;
        let lse = shifted.exp()?.sum_axis(1)?.ln()?;
        shifted.sub(lse.expand_axis(1, cols)?)?.exp()
    }
}
