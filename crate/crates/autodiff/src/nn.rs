//! Neural-network building blocks composed from graph primitives.
//!
//! Because each block is a composition, its derivatives of every order come
//! from the primitives' rules.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::tensor::Tensor;

/// Mean over all elements.
pub fn mean(x: &Expr) -> Expr {
    let n = x.value().len().max(1) as f64;
    x.sum().scale(1.0 / n)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Expr) -> Result<Expr> {
    let (rows, _) = x.value().dims2("softmax")?;
    // shift by the (constant) row maximum; softmax is shift invariant
    let mut max = Vec::with_capacity(rows);
    for r in 0..rows {
        max.push(x.value().row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let shift = Expr::constant(Tensor::new(vec![rows, 1], max)?);
    let e = x.sub(&shift)?.exp();
    let z = e.sum_to(&[rows, 1])?;
    e.div(&z)
}

/// 1-D convolution along time.
///
/// `x` holds `batch` sequences of `steps` rows each (shape
/// `[batch * steps, channels]`). `weight` has shape `[width * channels,
/// filters]`, i.e. one `width × channels` filter per column, and `bias` shape
/// `[1, filters]`. The result has `steps - width + 1` rows per sequence.
pub fn conv1d_time(x: &Expr, batch: usize, steps: usize, width: usize, weight: &Expr, bias: &Expr) -> Result<Expr> {
    let (rows, channels) = x.value().dims2("conv1d")?;
    if rows != batch * steps || width == 0 || width > steps {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: vec![batch, steps, width],
        });
    }
    let (wr, _) = weight.value().dims2("conv1d")?;
    if wr != width * channels {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let windows = steps - width + 1;
    let mut index = Vec::with_capacity(batch * windows * width);
    for b in 0..batch {
        for t in 0..windows {
            for j in 0..width {
                index.push(b * steps + t + j);
            }
        }
    }
    let unfolded = x.gather(index.into(), channels, &[batch * windows, width * channels])?;
    unfolded.matmul(weight)?.add(bias)
}

/// Column-wise maximum over row segments of a 2-D tensor.
///
/// Segment `i` covers rows `start..start + len` and produces output row `i`.
/// Ties go to the lowest row.
pub fn max_pool_segments(x: &Expr, segments: &[(usize, usize)]) -> Result<Expr> {
    let (rows, cols) = x.value().dims2("max_pool")?;
    let data = x.value().data();
    let mut index = Vec::with_capacity(segments.len() * cols);
    for &(start, len) in segments {
        if len == 0 || start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "max_pool",
                left: x.shape().to_vec(),
                right: vec![start, len],
            });
        }
        for c in 0..cols {
            let mut best = start;
            for r in start + 1..start + len {
                if data[r * cols + c] > data[best * cols + c] {
                    best = r;
                }
            }
            index.push(best * cols + c);
        }
    }
    let index: Rc<[usize]> = index.into();
    x.gather(index, 1, &[segments.len(), cols])
}

/// Max-pool over time for equally long sequences.
pub fn max_pool_time(x: &Expr, batch: usize, steps: usize) -> Result<Expr> {
    let segments: Vec<_> = (0..batch).map(|b| (b * steps, steps)).collect();
    max_pool_segments(x, &segments)
}

/// Per-feature statistics of one batch-normalization call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl NormStats {
    pub fn identity(features: usize) -> Self {
        NormStats {
            mean: Tensor::zeros(&[1, features]),
            var: Tensor::ones(&[1, features]),
        }
    }

    /// Exponential moving average: `momentum · self + (1 − momentum) · batch`.
    pub fn update(&mut self, batch: &NormStats, momentum: f64) -> Result<()> {
        self.mean = self
            .mean
            .zip_map(&batch.mean, |r, b| momentum * r + (1.0 - momentum) * b)?;
        self.var = self
            .var
            .zip_map(&batch.var, |r, b| momentum * r + (1.0 - momentum) * b)?;
        Ok(())
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Batch normalization over the rows of `x` (`[batch, features]`).
///
/// With `running` set the given statistics are used (evaluation); otherwise
/// the batch's own statistics are used and returned.
pub fn batch_norm(
    x: &Expr,
    gamma: &Expr,
    beta: &Expr,
    running: Option<&NormStats>,
) -> Result<(Expr, Option<NormStats>)> {
    let (rows, features) = x.value().dims2("batch_norm")?;
    match running {
        Some(stats) => {
            let mean = Expr::constant(stats.mean.clone());
            let denom = Expr::constant(stats.var.map(|v| (v + NORM_EPS).sqrt()));
            let y = x.sub(&mean)?.div(&denom)?.mul(gamma)?.add(beta)?;
            Ok((y, None))
        }
        None => {
            let inv_n = 1.0 / rows.max(1) as f64;
            let mean = x.sum_to(&[1, features])?.scale(inv_n);
            let centered = x.sub(&mean)?;
            let var = centered.mul(&centered)?.sum_to(&[1, features])?.scale(inv_n);
            let denom = var.add(&Expr::scalar(NORM_EPS))?.sqrt();
            let y = centered.div(&denom)?.mul(gamma)?.add(beta)?;
            let stats = NormStats {
                mean: mean.value().clone(),
                var: var.value().clone(),
            };
            Ok((y, Some(stats)))
        }
    }
}

/// Layer normalization across the features of each row.
pub fn layer_norm(x: &Expr, gamma: &Expr, beta: &Expr) -> Result<Expr> {
    let (rows, features) = x.value().dims2("layer_norm")?;
    let inv_n = 1.0 / features.max(1) as f64;
    let mean = x.sum_to(&[rows, 1])?.scale(inv_n);
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.sum_to(&[rows, 1])?.scale(inv_n);
    let denom = var.add(&Expr::scalar(NORM_EPS))?.sqrt();
    centered.div(&denom)?.mul(gamma)?.add(beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(shape: &[usize], data: &[f64]) -> Expr {
        Expr::constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax_rows(&c(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let s = softmax_rows(&c(&[2, 3], &[1000.0, 999.0, -5.0, 0.1, 0.2, 0.3])).unwrap();
        for r in 0..2 {
            let total: f64 = s.value().row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_takes_columnwise_maximum() {
        // T = 2, d = 2
        let x = c(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let p = max_pool_time(&x, 1, 2).unwrap();
        assert_eq!(p.value().data(), &[3.0, 5.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first_row() {
        let x = Expr::variable(Tensor::new(vec![2, 1], vec![4.0, 4.0]).unwrap());
        let p = max_pool_time(&x, 1, 2).unwrap();
        let g = crate::grad(&p.sum(), std::slice::from_ref(&x), false).unwrap();
        assert_eq!(g[0].value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // one sequence, 3 steps, 2 channels, width 2, one filter
        let x = c(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = c(&[4, 1], &[1.0, 0.0, 0.0, 1.0]);
        let b = c(&[1, 1], &[0.5]);
        let y = conv1d_time(&x, 1, 3, 2, &w, &b).unwrap();
        // window t: x[t][0] + x[t+1][1] + 0.5
        assert_eq!(y.value().data(), &[1.0 + 4.0 + 0.5, 3.0 + 6.0 + 0.5]);
    }

    #[test]
    fn batch_norm_train_normalizes_columns() {
        let x = c(&[2, 1], &[1.0, 3.0]);
        let one = c(&[1, 1], &[1.0]);
        let zero = c(&[1, 1], &[0.0]);
        let (y, stats) = batch_norm(&x, &one, &zero, None).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.data(), &[2.0]);
        assert_eq!(stats.var.data(), &[1.0]);
        let expect = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.value().data()[1] - expect).abs() < 1e-12);
        let (e, none) = batch_norm(&x, &one, &zero, Some(&stats)).unwrap();
        assert!(none.is_none());
        assert_eq!(e.value().data(), y.value().data());
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let x = c(&[2, 3], &[1.0, 2.0, 6.0, -1.0, 0.0, 4.0]);
        let g = c(&[1, 3], &[1.0; 3]);
        let b = c(&[1, 3], &[0.0; 3]);
        let y = layer_norm(&x, &g, &b).unwrap();
        for r in 0..2 {
            let m: f64 = y.value().row(r).iter().sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = NormStats::identity(1);
        let b = NormStats {
            mean: Tensor::full(&[1, 1], 1.0),
            var: Tensor::full(&[1, 1], 3.0),
        };
        r.update(&b, 0.9).unwrap();
        assert!((r.mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((r.var.data()[0] - 1.2).abs() < 1e-15);
    }
}
