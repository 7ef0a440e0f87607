//! Elementwise and axis-normalized nonlinearities.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct ReluBackward {
    mask: Vec<bool>,
}

impl<T: Scalar> Backward<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }

    fn kink_signature(&self) -> Option<u64> {
        let mut h = DefaultHasher::new();
        self.mask.hash(&mut h);
        Some(h.finish())
    }
}

struct SigmoidBackward<T> {
    output: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for SigmoidBackward<T> {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g
            .iter()
            .zip(self.output.iter())
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect();
        vec![Some(dx)]
    }
}

struct LogBackward<T> {
    input: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for LogBackward<T> {
    fn name(&self) -> &'static str {
        "log"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g.iter().zip(self.input.iter()).map(|(&g, &x)| g / x).collect();
        vec![Some(dx)]
    }
}

struct SoftmaxBackward<T> {
    output: Arc<Vec<T>>,
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward<T> {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let y = &self.output;
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.axis_len + k) * self.inner + i;
                let dot = (0..self.axis_len).fold(T::zero(), |acc, k| acc + g[at(k)] * y[at(k)]);
                for k in 0..self.axis_len {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_arc(x)?;
        let shape = self.shape(x)?.to_vec();
        let out: Vec<T> = xv.iter().map(|&v| v.max(T::zero())).collect();
        let rule = self.any_requires_grad(&[x]).then(|| {
            Box::new(ReluBackward {
                mask: xv.iter().map(|&v| v > T::zero()).collect(),
            }) as Box<dyn Backward<T>>
        });
        self.push("relu", &[x], shape, out, rule)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_arc(x)?;
        let shape = self.shape(x)?.to_vec();
        let out = Arc::new(xv.iter().map(|&v| sigmoid_scalar(v)).collect::<Vec<T>>());
        let rule = self.any_requires_grad(&[x]).then(|| {
            Box::new(SigmoidBackward {
                output: out.clone(),
            }) as Box<dyn Backward<T>>
        });
        self.push("sigmoid", &[x], shape, out, rule)
    }

    /// Natural logarithm. Inputs must be positive; callers clamp.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_arc(x)?;
        let shape = self.shape(x)?.to_vec();
        let out: Vec<T> = xv.iter().map(|&v| v.ln()).collect();
        let rule = self
            .any_requires_grad(&[x])
            .then(|| Box::new(LogBackward { input: xv }) as Box<dyn Backward<T>>);
        self.push("log", &[x], shape, out, rule)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x)?.to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value_arc(x)?;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let max = (0..axis_len).fold(T::neg_infinity(), |m, k| m.max(xv[at(k)]));
                let mut total = T::zero();
                for k in 0..axis_len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..axis_len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let out = Arc::new(out);
        let rule = self.any_requires_grad(&[x]).then(|| {
            Box::new(SoftmaxBackward {
                output: out.clone(),
                outer,
                axis_len,
                inner,
            }) as Box<dyn Backward<T>>
        });
        self.push("softmax", &[x], shape, out, rule)
    }
}
