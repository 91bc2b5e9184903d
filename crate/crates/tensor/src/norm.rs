//! Batch normalization over the rows of a `rows x channels` view.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving update with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (m, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        for (v, &b) in self.var.iter_mut().zip(&batch.var) {
            *v = (1.0 - momentum) * *v + momentum * b * correction;
        }
    }
}

/// Per-channel statistics observed in a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalizes with the statistics of `x` itself. `gamma` and `beta` are
/// `[C]` vectors.
pub fn batch_norm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    let rows = g.value(x).rows();
    let inv_n = 1.0 / rows as f64;
    let s = g.sum_rows(x);
    let mean = g.scale(s, inv_n);
    let neg_mean = g.neg(mean);
    let centered = g.add_row(x, neg_mean)?;
    let sq = g.square(centered);
    let ss = g.sum_rows(sq);
    let var = g.scale(ss, inv_n);
    let shifted = g.add_scalar(var, eps);
    let inv_std = g.powf(shifted, -0.5);
    let scale = g.mul(inv_std, gamma)?;
    let y = g.mul_row(centered, scale)?;
    let out = g.add_row(y, beta)?;
    let stats = BatchStats {
        mean: g.value(mean).data().to_vec(),
        var: g.value(var).data().to_vec(),
        count: rows,
    };
    Ok((out, stats))
}

/// Normalizes with fixed running statistics.
pub fn batch_norm_eval(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    eps: f64,
) -> Result<Var> {
    let c = stats.mean.len();
    let inv_std = Tensor::new(&[c], stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect())?;
    let inv_std = g.constant(inv_std);
    let scale = g.mul(gamma, inv_std)?;
    let mean = g.constant(Tensor::new(&[c], stats.mean.clone())?);
    let shift = g.mul(mean, scale)?;
    let bias = g.sub(beta, shift)?;
    let y = g.mul_row(x, scale)?;
    g.add_row(y, bias)
}
