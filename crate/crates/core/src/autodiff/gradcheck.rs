//! Central-difference gradient verification.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h^2)`.
    #[default]
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, truncation error
    /// `O(h^4)`. Needed where a coordinate's derivative is small next to the
    /// function's curvature, so the three-point error swamps it.
    FivePoint,
}

impl Stencil {
    /// Probe offsets in units of the step, and their weights before dividing
    /// by the step.
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Skip coordinates whose `±step` perturbation changes a ReLU mask,
    /// max-pool argmax or clamp region; the finite difference there measures
    /// a kink, not the derivative.
    pub skip_kink_crossings: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            stencil: Stencil::ThreePoint,
            skip_kink_crossings: false,
        }
    }
}

/// Position of one scalar among the checked inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// First coordinate where either gradient estimate was NaN or infinite.
    pub non_finite: Option<Coordinate>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }

    /// Folds another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.non_finite = self.non_finite.or(other.non_finite);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape's gradient of a scalar function against central
/// differences at `point`, over every coordinate of every input.
///
/// With `skip_kink_crossings`, a coordinate is skipped when any probe sees a
/// different activation signature from the base point.
///
/// `f` receives one gradient-tracked variable per tensor in `point` and must
/// return a scalar.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.item(out)?, tape.activation_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let base_signature = tape.activation_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.tensor(v))
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport::default();
    let mut work = point.to_vec();
    let h = opts.step;
    for (i, a_grad) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let original = work[i].data()[j];
            let mut numeric = 0.0;
            let mut crossed = false;
            for &(offset, weight) in opts.stencil.taps() {
                work[i].data_mut()[j] = original + offset * h;
                let (value, signature) = eval(&work)?;
                numeric += weight * value;
                crossed |= signature != base_signature;
            }
            work[i].data_mut()[j] = original;
            let numeric = numeric / h;

            let coord = Coordinate { input: i, index: j };
            if opts.skip_kink_crossings && crossed {
                report.skipped += 1;
                continue;
            }
            let a = a_grad.data()[j];
            report.checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite.get_or_insert(coord);
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}
