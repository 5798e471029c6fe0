//! Conventional bottleneck adapters, used as ablation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{linear, Matrix, Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    /// Purely linear bottleneck (the "stacked linear" ablation).
    None,
}

/// `f(X) = X + σ(X·W_d + b_d)·W_u + b_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBaseline<T = f64> {
    /// `d × r`.
    pub down: Matrix<T>,
    /// `1 × r`.
    pub down_bias: Matrix<T>,
    /// `r × d`.
    pub up: Matrix<T>,
    /// `1 × d`.
    pub up_bias: Matrix<T>,
    pub activation: Activation,
    /// Inverted dropout on the branch output in train mode.
    pub dropout_p: f64,
}

impl<T: Real> AdapterBaseline<T> {
    pub fn zeros(d: usize, r: usize, activation: Activation) -> Self {
        Self {
            down: Matrix::zeros(d, r),
            down_bias: Matrix::zeros(1, r),
            up: Matrix::zeros(r, d),
            up_bias: Matrix::zeros(1, d),
            activation,
            dropout_p: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.down.rows()
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.down_bias.len() + self.up.len() + self.up_bias.len()
    }

    fn check(&self, x: &Matrix<T>) -> Result<()> {
        let (d, r) = self.down.shape();
        if self.up.shape() != (r, d) || self.down_bias.shape() != (1, r) || self.up_bias.shape() != (1, d) {
            return Err(Error::shape("adapter weights", self.down.shape(), self.up.shape()));
        }
        if x.cols() != d {
            return Err(Error::shape("adapter_forward", x.shape(), self.down.shape()));
        }
        Ok(())
    }

    /// Residual-free branch `σ(X·W_d + b_d)·W_u + b_u`, with dropout in train mode.
    fn body(&self, x: &Matrix<T>, train_mode: bool, rng: &mut Rng) -> Result<Matrix<T>> {
        self.check(x)?;
        let hidden = linear(x, &self.down, &self.down_bias)?;
        let hidden = match self.activation {
            Activation::Relu => hidden.map(|v| v.max(T::zero())),
            Activation::Gelu => crate::linalg::gelu(&hidden),
            Activation::None => hidden,
        };
        let mut out = linear(&hidden, &self.up, &self.up_bias)?;
        if train_mode && self.dropout_p > 0.0 {
            let keep = T::of(1.0 / (1.0 - self.dropout_p));
            for v in out.data_mut() {
                *v = if rng.uniform() >= self.dropout_p {
                    *v * keep
                } else {
                    T::zero()
                };
            }
        }
        Ok(out)
    }
}

pub fn adapter_forward<T: Real>(
    x: &Matrix<T>,
    adapter: &AdapterBaseline<T>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    let mut y = adapter.body(x, train_mode, rng)?;
    y.add_assign(x)?;
    Ok(y)
}

/// Parallel branches sharing one residual: `X + Σₖ bodyₖ(X)`.
pub fn stacked_forward<T: Real>(
    x: &Matrix<T>,
    branches: &[AdapterBaseline<T>],
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    if branches.is_empty() {
        return Err(Error::Config("stacked adapter needs at least one branch".into()));
    }
    let mut y = x.clone();
    for branch in branches {
        if branch.width() != x.cols() {
            return Err(Error::shape("stacked_forward", x.shape(), branch.down.shape()));
        }
        y.add_assign(&branch.body(x, train_mode, rng)?)?;
    }
    Ok(y)
}

/// Parameters of `branches` biased bottlenecks at every site of every layer:
/// `branches · (2·d·r + r + d) · site_count · layers`.
pub fn stacked_param_count(d: usize, r: usize, branches: usize, site_count: usize, layers: usize) -> u64 {
    let per_branch = (2 * d * r + r + d) as u64;
    branches as u64 * per_branch * site_count as u64 * layers as u64
}
