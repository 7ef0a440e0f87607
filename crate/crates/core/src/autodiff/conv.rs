//! 3x3 same-padded convolution and 2x2 max-pooling over NHWC tensors.
//!
//! Convolution lowers each sample to an `(H*W) x (9*Cin)` patch matrix and
//! multiplies it by the kernel viewed as `(9*Cin) x Cout`; NHWC makes the
//! product land directly in output layout. Kernel and bias gradients are summed
//! over fixed sample chunks and combined in chunk order, so they do not depend
//! on how many threads ran.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Scalar;

/// Samples per partial sum in the kernel-gradient reduction.
const GRAD_CHUNK: usize = 8;

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, cin: usize, col: &mut [T]) {
    let k = 9 * cin;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = (y + ky).wrapping_sub(1);
                for kx in 0..3 {
                    let sx = (xx + kx).wrapping_sub(1);
                    let dst = &mut row[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
                    if sy < h && sx < w {
                        dst.copy_from_slice(&x[(sy * w + sx) * cin..(sy * w + sx + 1) * cin]);
                    } else {
                        dst.fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, cin: usize, dx: &mut [T]) {
    let k = 9 * cin;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = (y + ky).wrapping_sub(1);
                if sy >= h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = (xx + kx).wrapping_sub(1);
                    if sx >= w {
                        continue;
                    }
                    let src = &row[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
                    let dst = &mut dx[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        9 * self.cin
    }
}

struct Conv2dBackward<T> {
    input: Arc<Vec<T>>,
    kernel: Arc<Vec<T>>,
    dims: ConvDims,
}

impl<T: Scalar> Conv2dBackward<T> {
    fn kernel_and_bias_grads(&self, g: &[T], need_k: bool, need_b: bool) -> (Vec<T>, Vec<T>) {
        let d = self.dims;
        let (hw, k, cout) = (d.hw(), d.patch(), d.cout);
        let chunks = exec::ranges(d.n, GRAD_CHUNK);
        let partials = exec::map_work(chunks.len(), g.len() * k, |c| {
            let mut dk = if need_k { vec![T::zero(); k * cout] } else { Vec::new() };
            let mut db = vec![T::zero(); cout];
            let mut col = if need_k { vec![T::zero(); hw * k] } else { Vec::new() };
            for s in chunks[c].clone() {
                let gs = &g[s * hw * cout..(s + 1) * hw * cout];
                if need_k {
                    im2col(&self.input[s * hw * d.cin..(s + 1) * hw * d.cin], d.h, d.w, d.cin, &mut col);
                    T::gemm(true, false, k, hw, cout, T::one(), &col, gs, T::one(), &mut dk);
                }
                if need_b {
                    for row in gs.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(b, &r)| *b = *b + r);
                    }
                }
            }
            (dk, db)
        });
        let mut dk = if need_k { vec![T::zero(); k * cout] } else { Vec::new() };
        let mut db = vec![T::zero(); cout];
        for (pk, pb) in partials {
            dk.iter_mut().zip(&pk).for_each(|(a, &b)| *a = *a + b);
            db.iter_mut().zip(&pb).for_each(|(a, &b)| *a = *a + b);
        }
        (dk, db)
    }
}

impl<T: Scalar> Backward<T> for Conv2dBackward<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let d = self.dims;
        let (hw, k, cout) = (d.hw(), d.patch(), d.cout);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); d.n * hw * d.cin];
            exec::for_each_chunk_init(
                &mut dx,
                hw * d.cin,
                || vec![T::zero(); hw * k],
                |s, dxs, dcol| {
                    let gs = &g[s * hw * cout..(s + 1) * hw * cout];
                    T::gemm(false, true, hw, cout, k, T::one(), gs, &self.kernel, T::zero(), dcol);
                    col2im(dcol, d.h, d.w, d.cin, dxs);
                },
            );
            dx
        });
        let (dk, db) = if needs[1] || needs[2] {
            let (dk, db) = self.kernel_and_bias_grads(g, needs[1], needs[2]);
            (needs[1].then_some(dk), needs[2].then_some(db))
        } else {
            (None, None)
        };
        vec![dx, dk, db]
    }
}

struct MaxPoolBackward {
    argmax: Vec<u32>,
    in_per_sample: usize,
    out_per_sample: usize,
}

impl<T: Scalar> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = g.len() / self.out_per_sample.max(1);
        let mut dx = vec![T::zero(); n * self.in_per_sample];
        exec::for_each_chunk(&mut dx, self.in_per_sample, |s, dxs| {
            let range = s * self.out_per_sample..(s + 1) * self.out_per_sample;
            for (&idx, &gv) in self.argmax[range.clone()].iter().zip(&g[range]) {
                let slot = &mut dxs[idx as usize];
                *slot = *slot + gv;
            }
        });
        vec![Some(dx)]
    }

    fn kink_signature(&self) -> Option<u64> {
        let mut h = DefaultHasher::new();
        self.argmax.hash(&mut h);
        Some(h.finish())
    }
}

impl<T: Scalar> Tape<T> {
    /// 3x3 convolution, stride 1, zero "same" padding.
    ///
    /// `input` is `[N, H, W, Cin]`, `kernel` `[3, 3, Cin, Cout]`, `bias` `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input)?, self.shape(kernel)?, self.shape(bias)?);
        let (&[n, h, w, cin], &[kh, kw, kcin, cout], &[blen]) = (xs, ks, bs) else {
            return Err(Error::Dimension(format!(
                "conv2d expects input [N,H,W,Cin], kernel [3,3,Cin,Cout], bias [Cout]; got {xs:?}, {ks:?}, {bs:?}"
            )));
        };
        if (kh, kw) != (3, 3) {
            return Err(Error::Dimension(format!(
                "conv2d supports 3x3 kernels only, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if blen != cout {
            return Err(Error::Dimension(format!(
                "conv2d: bias has {blen} entries for {cout} filters"
            )));
        }
        let dims = ConvDims { n, h, w, cin, cout };
        let (hw, k) = (dims.hw(), dims.patch());
        let x = self.value_arc(input)?;
        let kv = self.value_arc(kernel)?;
        let b = self.value(bias)?;
        let mut out = vec![T::zero(); n * hw * cout];
        exec::for_each_chunk_init(
            &mut out,
            hw * cout,
            || vec![T::zero(); hw * k],
            |s, os, col| {
                im2col(&x[s * hw * cin..(s + 1) * hw * cin], h, w, cin, col);
                for row in os.chunks_exact_mut(cout) {
                    row.copy_from_slice(b);
                }
                T::gemm(false, false, hw, k, cout, T::one(), col, &kv, T::one(), os);
            },
        );
        let rule = self.any_requires_grad(&[input, kernel, bias]).then(|| {
            Box::new(Conv2dBackward {
                input: x,
                kernel: kv,
                dims,
            }) as Box<dyn Backward<T>>
        });
        self.push("conv2d", &[input, kernel, bias], vec![n, h, w, cout], out, rule)
    }

    /// 2x2 max-pooling, stride 2, no padding; odd trailing rows/columns are
    /// dropped. Ties resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input)?;
        let &[n, h, w, c] = xs else {
            return Err(Error::Dimension(format!(
                "maxpool2d expects [N,H,W,C], got {xs:?}"
            )));
        };
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "maxpool2d needs H, W >= 2, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let in_per_sample = h * w * c;
        let out_per_sample = oh * ow * c;
        let x = self.value_arc(input)?;
        let per_sample = exec::map_work(n, x.len(), |s| {
            let xs = &x[s * in_per_sample..(s + 1) * in_per_sample];
            let mut out = Vec::with_capacity(out_per_sample);
            let mut arg = Vec::with_capacity(out_per_sample);
            for oy in 0..oh {
                for ox in 0..ow {
                    let corner = |dy: usize, dx: usize| ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    let offsets = [corner(0, 0), corner(0, 1), corner(1, 0), corner(1, 1)];
                    for ch in 0..c {
                        let mut best = offsets[0] + ch;
                        for &o in &offsets[1..] {
                            if xs[o + ch] > xs[best] {
                                best = o + ch;
                            }
                        }
                        out.push(xs[best]);
                        arg.push(best as u32);
                    }
                }
            }
            (out, arg)
        });
        let mut out = Vec::with_capacity(n * out_per_sample);
        let mut argmax = Vec::with_capacity(n * out_per_sample);
        for (o, a) in per_sample {
            out.extend_from_slice(&o);
            argmax.extend_from_slice(&a);
        }
        let rule = self.any_requires_grad(&[input]).then(|| {
            Box::new(MaxPoolBackward {
                argmax,
                in_per_sample,
                out_per_sample,
            }) as Box<dyn Backward<T>>
        });
        self.push("maxpool2d", &[input], vec![n, oh, ow, c], out, rule)
    }
}
