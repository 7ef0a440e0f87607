//! Affine maps and shape plumbing.

use std::sync::Arc;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct DenseBackward<T> {
    input: Arc<Vec<T>>,
    weight: Arc<Vec<T>>,
    rows: usize,
    din: usize,
    dout: usize,
}

impl<T: Scalar> Backward<T> for DenseBackward<T> {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn backward(&self, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, din, dout) = (self.rows, self.din, self.dout);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * din];
            T::gemm(false, true, n, dout, din, T::one(), g, &self.weight, T::zero(), &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); din * dout];
            T::gemm(true, false, din, n, dout, T::one(), &self.input, g, T::zero(), &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); dout];
            for row in g.chunks_exact(dout) {
                db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct MulBackward<T> {
    lhs: Arc<Vec<T>>,
    rhs: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for MulBackward<T> {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let scaled = |other: &[T]| g.iter().zip(other).map(|(&g, &o)| g * o).collect();
        vec![
            needs[0].then(|| scaled(&self.rhs)),
            needs[1].then(|| scaled(&self.lhs)),
        ]
    }
}

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

impl<T: Scalar> Tape<T> {
    /// `input[N, Din] x weight[Din, Dout] + bias[Dout]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input)?, self.shape(weight)?, self.shape(bias)?);
        let (&[rows, din], &[win, dout], &[blen]) = (xs, ws, bs) else {
            return Err(Error::Dimension(format!(
                "dense expects input [N, Din], weight [Din, Dout], bias [Dout]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        };
        if din != win || blen != dout {
            return Err(Error::Dimension(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?} do not agree"
            )));
        }
        let x = self.value_arc(input)?;
        let w = self.value_arc(weight)?;
        let b = self.value(bias)?;
        let mut out: Vec<T> = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        T::gemm(false, false, rows, din, dout, T::one(), &x, &w, T::one(), &mut out);
        let rule = self.any_requires_grad(&[input, weight, bias]).then(|| {
            Box::new(DenseBackward {
                input: x,
                weight: w,
                rows,
                din,
                dout,
            }) as Box<dyn Backward<T>>
        });
        self.push("dense", &[input, weight, bias], vec![rows, dout], out, rule)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.shape(lhs)?.to_vec();
        if shape != self.shape(rhs)? {
            return Err(Error::Dimension(format!(
                "mul: shapes {shape:?} and {:?} differ",
                self.shape(rhs)?
            )));
        }
        let a = self.value_arc(lhs)?;
        let b = self.value_arc(rhs)?;
        let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        let rule = self
            .any_requires_grad(&[lhs, rhs])
            .then(|| Box::new(MulBackward { lhs: a, rhs: b }) as Box<dyn Backward<T>>);
        self.push("mul", &[lhs, rhs], shape, out, rule)
    }

    /// Reinterprets the row-major values under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x)?;
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "cannot reshape {old:?} into {shape:?}"
            )));
        }
        let value = self.value_arc(x)?;
        let rule = self
            .any_requires_grad(&[x])
            .then(|| Box::new(ReshapeBackward) as Box<dyn Backward<T>>);
        self.push("reshape", &[x], shape.to_vec(), value, rule)
    }
}
