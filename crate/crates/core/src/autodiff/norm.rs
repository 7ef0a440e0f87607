//! Batch normalization over the last (channel) axis.
//!
//! Train mode normalizes with statistics over every other axis jointly and
//! reports them so the caller can fold them into running averages; infer mode
//! uses supplied running statistics. Statistics accumulate in `f64` over fixed
//! row chunks.

use std::sync::Arc;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

const ROW_CHUNK: usize = 4096;

/// Per-channel batch mean and (biased) variance from a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Column sums of a row-major `rows x channels` quantity, where `row_fn`
/// adds row `r`'s contribution into the accumulator.
fn reduce_columns<F>(rows: usize, channels: usize, row_fn: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = exec::ranges(rows, ROW_CHUNK);
    let partials = exec::map_work(chunks.len(), rows * channels, |i| {
        let mut acc = vec![0.0; channels];
        for r in chunks[i].clone() {
            row_fn(r, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; channels];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    total
}

struct BatchNormBackward<T> {
    normalized: Arc<Vec<T>>,
    gamma: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    /// Train mode differentiates through the batch statistics.
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormBackward<T> {
    fn name(&self) -> &'static str {
        if self.train {
            "batchnorm_train"
        } else {
            "batchnorm_infer"
        }
    }

    fn backward(&self, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.channels;
        let rows = g.len() / c;
        let xh = &self.normalized;
        // One pass for both parameter gradients: acc[..c] collects dbeta,
        // acc[c..] dgamma.
        let sums = reduce_columns(rows, 2 * c, |r, acc| {
            let gs = &g[r * c..(r + 1) * c];
            let xs = &xh[r * c..(r + 1) * c];
            let (db, dg) = acc.split_at_mut(c);
            for (((b, a), &gv), &xv) in db.iter_mut().zip(dg.iter_mut()).zip(gs).zip(xs) {
                let gv = gv.as_f64();
                *b += gv;
                *a += gv * xv.as_f64();
            }
        });
        let (dbeta, dgamma) = (sums[..c].to_vec(), sums[c..].to_vec());
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            let scale: Vec<T> = (0..c).map(|j| self.gamma[j] * self.inv_std[j]).collect();
            if self.train {
                let m = rows as f64;
                let mean_db: Vec<T> = dbeta.iter().map(|&v| T::from_f64_lossy(v / m)).collect();
                let mean_dg: Vec<T> = dgamma.iter().map(|&v| T::from_f64_lossy(v / m)).collect();
                exec::for_each_chunk(&mut dx, ROW_CHUNK * c, |i, out| {
                    let base = i * ROW_CHUNK * c;
                    for (r, orow) in out.chunks_exact_mut(c).enumerate() {
                        let at = base + r * c;
                        let (gs, xs) = (&g[at..at + c], &xh[at..at + c]);
                        for j in 0..c {
                            orow[j] = scale[j] * (gs[j] - mean_db[j] - xs[j] * mean_dg[j]);
                        }
                    }
                });
            } else {
                exec::for_each_chunk(&mut dx, ROW_CHUNK * c, |i, out| {
                    let base = i * ROW_CHUNK * c;
                    for (r, orow) in out.chunks_exact_mut(c).enumerate() {
                        let gs = &g[base + r * c..base + (r + 1) * c];
                        for j in 0..c {
                            orow[j] = scale[j] * gs[j];
                        }
                    }
                });
            }
            dx
        });
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
        vec![
            dx,
            needs[1].then(|| to_t(dgamma)),
            needs[2].then(|| to_t(dbeta)),
        ]
    }
}

impl<T: Scalar> Tape<T> {
    fn bn_channels(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x)?;
        let Some(&c) = xs.last() else {
            return Err(Error::Dimension("batchnorm input has no channel axis".into()));
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v)? != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} shape {:?} does not match {c} channels",
                    self.shape(v)?
                )));
            }
        }
        Ok((xs.iter().product::<usize>() / c, c))
    }

    /// Normalizes `x` with the given statistics and applies the affine
    /// transform, keeping the normalized values for the backward pass.
    fn bn_apply(
        &mut self,
        inputs: [Var; 3],
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let [x, gamma, beta] = inputs;
        let c = inv_std.len();
        let shape = self.shape(x)?.to_vec();
        let gv = self.value(gamma)?.to_vec();
        let bv = self.value(beta)?.to_vec();
        let xv = self.value_arc(x)?;
        let mut normalized = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let chunk = ROW_CHUNK * c;
        exec::for_each_chunk(&mut normalized, chunk, |i, nchunk| {
            let xs = &xv[i * chunk..i * chunk + nchunk.len()];
            for (nrow, xrow) in nchunk.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for j in 0..c {
                    nrow[j] = (xrow[j] - mean[j]) * inv_std[j];
                }
            }
        });
        exec::for_each_chunk(&mut out, chunk, |i, ochunk| {
            let ns = &normalized[i * chunk..i * chunk + ochunk.len()];
            for (orow, nrow) in ochunk.chunks_exact_mut(c).zip(ns.chunks_exact(c)) {
                for j in 0..c {
                    orow[j] = gv[j] * nrow[j] + bv[j];
                }
            }
        });
        let rule = self.any_requires_grad(&inputs).then(|| {
            Box::new(BatchNormBackward {
                normalized: Arc::new(normalized),
                gamma: gv,
                inv_std,
                channels: c,
                train,
            }) as Box<dyn Backward<T>>
        });
        let name = if train { "batchnorm_train" } else { "batchnorm_infer" };
        self.push(name, &inputs, shape, out, rule)
    }

    /// Train-mode batch normalization. Returns the output and the batch
    /// statistics used.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (rows, c) = self.bn_channels(x, gamma, beta)?;
        if rows < 2 {
            return Err(Error::Statistics(format!(
                "batchnorm in train mode needs at least 2 values per channel, got {rows}"
            )));
        }
        let xv = self.value_arc(x)?;
        let m = rows as f64;
        let mean: Vec<f64> = reduce_columns(rows, c, |r, acc| {
            for (a, &v) in acc.iter_mut().zip(&xv[r * c..(r + 1) * c]) {
                *a += v.as_f64();
            }
        })
        .into_iter()
        .map(|s| s / m)
        .collect();
        let var: Vec<f64> = reduce_columns(rows, c, |r, acc| {
            for ((a, &v), mu) in acc.iter_mut().zip(&xv[r * c..(r + 1) * c]).zip(&mean) {
                let d = v.as_f64() - mu;
                *a += d * d;
            }
        })
        .into_iter()
        .map(|s| s / m)
        .collect();
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + BN_EPSILON).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let out = self.bn_apply([x, gamma, beta], &mean_t, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Infer-mode batch normalization with fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (_, c) = self.bn_channels(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "running statistics of length {}/{} for {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + BN_EPSILON).sqrt()))
            .collect();
        self.bn_apply([x, gamma, beta], running_mean, inv_std, false)
    }
}


/// Folds batch statistics into running averages:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = T::from_f64_lossy(momentum * r.as_f64() + (1.0 - momentum) * b);
    }
}
