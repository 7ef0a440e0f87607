//! Reductions to scalars and along a weighted axis.

use std::sync::Arc;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct FillBackward<T> {
    len: usize,
    scale: T,
}

impl<T: Scalar> Backward<T> for FillBackward<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.scale; self.len])]
    }
}

struct WeightedSumBackward<T> {
    values: Arc<Vec<T>>,
    weights: Arc<Vec<T>>,
    groups: usize,
    positions: usize,
    width: usize,
}

impl<T: Scalar> Backward<T> for WeightedSumBackward<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, d) = (self.positions, self.width);
        let dv = needs[0].then(|| {
            let mut dv = vec![T::zero(); self.values.len()];
            for b in 0..self.groups {
                let gb = &g[b * d..(b + 1) * d];
                for j in 0..p {
                    let w = self.weights[b * p + j];
                    let row = &mut dv[(b * p + j) * d..(b * p + j + 1) * d];
                    row.iter_mut().zip(gb).for_each(|(r, &gv)| *r = w * gv);
                }
            }
            dv
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); self.weights.len()];
            for b in 0..self.groups {
                let gb = &g[b * d..(b + 1) * d];
                for j in 0..p {
                    let row = &self.values[(b * p + j) * d..(b * p + j + 1) * d];
                    dw[b * p + j] = row.iter().zip(gb).fold(T::zero(), |acc, (&v, &gv)| acc + v * gv);
                }
            }
            dw
        });
        vec![dv, dw]
    }
}

impl<T: Scalar> Tape<T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.fill_reduce(x, false)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.fill_reduce(x, true)
    }

    fn fill_reduce(&mut self, x: Var, average: bool) -> Result<Var> {
        let xv = self.value_arc(x)?;
        let len = xv.len();
        if len == 0 {
            return Err(Error::Dimension("reduction over zero elements".into()));
        }
        let total = xv.iter().fold(T::zero(), |acc, &v| acc + v);
        let scale = if average {
            T::one() / T::from_usize(len).expect("length fits")
        } else {
            T::one()
        };
        let rule = self
            .any_requires_grad(&[x])
            .then(|| Box::new(FillBackward { len, scale }) as Box<dyn Backward<T>>);
        let name = if average { "mean" } else { "sum" };
        self.push(name, &[x], Vec::new(), vec![total * scale], rule)
    }

    /// Contracts the last axis of `weights` against the matching axis of
    /// `values`.
    ///
    /// `weights` has shape `[B.., P]` and `values` `[B.., P, D..]`; the output
    /// has shape `[B.., D..]` with `out[b, d] = sum_p weights[b, p] * values[b, p, d]`.
    pub fn weighted_sum(&mut self, values: Var, weights: Var) -> Result<Var> {
        let vs = self.shape(values)?.to_vec();
        let ws = self.shape(weights)?.to_vec();
        let Some((&positions, batch)) = ws.split_last() else {
            return Err(Error::Dimension(
                "weighted_sum: weights have no reduction axis".into(),
            ));
        };
        if vs.len() < ws.len() || vs[..ws.len()] != ws[..] {
            return Err(Error::Dimension(format!(
                "weighted_sum: weights {ws:?} are not a prefix of values {vs:?}"
            )));
        }
        let groups: usize = batch.iter().product();
        let width: usize = vs[ws.len()..].iter().product();
        let v = self.value_arc(values)?;
        let w = self.value_arc(weights)?;
        let mut out = vec![T::zero(); groups * width];
        for b in 0..groups {
            let ob = &mut out[b * width..(b + 1) * width];
            for j in 0..positions {
                let wj = w[b * positions + j];
                let row = &v[(b * positions + j) * width..(b * positions + j + 1) * width];
                ob.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + wj * x);
            }
        }
        let mut shape = batch.to_vec();
        shape.extend_from_slice(&vs[ws.len()..]);
        let rule = self.any_requires_grad(&[values, weights]).then(|| {
            Box::new(WeightedSumBackward {
                values: v,
                weights: w,
                groups,
                positions,
                width,
            }) as Box<dyn Backward<T>>
        });
        self.push("weighted_sum", &[values, weights], shape, out, rule)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn mean_of_three() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.item(m).unwrap(), 2.0);
    }

    #[test]
    fn uniform_weights_give_the_mean() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[2], &[10.0, 20.0]));
        let w = tape.constant(t(&[2], &[0.5, 0.5]));
        let s = tape.weighted_sum(v, w).unwrap();
        assert_eq!(tape.shape(s).unwrap(), &[] as &[usize]);
        assert_eq!(tape.item(s).unwrap(), 15.0);
    }

    #[test]
    fn sum_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[4], &[1.0, -2.0, 3.5, 0.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn weighted_sum_needs_an_axis() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.weighted_sum(v, w), Err(Error::Dimension(_))));
        let w = tape.constant(t(&[3], &[1.0; 3]));
        assert!(matches!(tape.weighted_sum(v, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn weighted_sum_batches_over_groups() {
        let mut tape = Tape::new();
        // 2 groups, 2 positions, width 2
        let v = tape.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.25, 0.75]));
        let s = tape.weighted_sum(v, w).unwrap();
        assert_eq!(tape.shape(s).unwrap(), &[2, 2]);
        assert_eq!(tape.value(s).unwrap(), &[1.0, 2.0, 6.5, 7.5]);
    }
}
