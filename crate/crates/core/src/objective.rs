//! Class-reweighted binary cross-entropy and macro-averaged F1.
//!
//! Labels are per-AU `1` (active), `0` (inactive) or `-1` (unannotated).
//! Unannotated entries are masked everywhere: they add nothing to the loss,
//! shrink its per-sample divisor, and are left out of class-weight and
//! confusion counts.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Ground truth for one frame: one entry per AU in `{1, 0, -1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::Contract(format!("label value {bad} is not one of 0, 1, -1")));
        }
        Ok(LabelVector(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Some(active)` for annotated entries, `None` for `-1`.
    pub fn get(&self, au: usize) -> Option<bool> {
        match self.0.get(au)? {
            1 => Some(true),
            0 => Some(false),
            _ => None,
        }
    }

    pub fn has_invalid(&self) -> bool {
        self.0.contains(&-1)
    }

    pub fn all_invalid(&self) -> bool {
        self.0.iter().all(|&v| v == -1)
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != -1).count()
    }
}

/// Positive-class weights `w_i = total_i / (2 * positives_i)`, where
/// `total_i` counts the annotated (non `-1`) samples of AU `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    totals: Vec<u64>,
    positives: Vec<u64>,
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Builds weights from per-AU counts. Every AU needs a positive.
    pub fn from_counts(totals: Vec<u64>, positives: Vec<u64>, names: &[String]) -> Result<Self> {
        if totals.len() != positives.len() {
            return Err(Error::Dimension(format!(
                "{} totals for {} positive counts",
                totals.len(),
                positives.len()
            )));
        }
        if let Some(i) = positives.iter().position(|&p| p == 0) {
            return Err(Error::DegenerateClass {
                index: i,
                name: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
        let weights = totals
            .iter()
            .zip(&positives)
            .map(|(&t, &p)| t as f64 / (2 * p) as f64)
            .collect();
        Ok(ClassWeights {
            totals,
            positives,
            weights,
        })
    }

    /// All-ones weights (plain BCE).
    pub fn uniform(num_aus: usize) -> Self {
        ClassWeights {
            totals: vec![2; num_aus],
            positives: vec![1; num_aus],
            weights: vec![1.0; num_aus],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    pub fn positives(&self) -> &[u64] {
        &self.positives
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `w_i` as the exact fraction `(numerator, denominator)` it was rounded
    /// from.
    pub fn ratio(&self, au: usize) -> (u64, u64) {
        (self.totals[au], 2 * self.positives[au])
    }
}

/// Counts annotated samples and positives per AU and derives the weights.
pub fn compute_class_weights(labels: &[LabelVector], names: &[String]) -> Result<ClassWeights> {
    let num_aus = labels.first().map_or(names.len(), LabelVector::len);
    let mut totals = vec![0u64; num_aus];
    let mut positives = vec![0u64; num_aus];
    for l in labels {
        if l.len() != num_aus {
            return Err(Error::Dimension(format!(
                "label vector of length {} among vectors of length {num_aus}",
                l.len()
            )));
        }
        for (i, v) in l.values().iter().enumerate() {
            match v {
                1 => {
                    totals[i] += 1;
                    positives[i] += 1;
                }
                0 => totals[i] += 1,
                _ => {}
            }
        }
    }
    ClassWeights::from_counts(totals, positives, names)
}

/// Loss value and its gradient with respect to every prediction.
struct BceEval {
    loss: f64,
    grad: Vec<f64>,
    clamped: Vec<bool>,
}

fn evaluate_bce<T: Scalar>(labels: &[LabelVector], preds: &[T], weights: &ClassWeights) -> Result<BceEval> {
    let c = weights.len();
    if preds.len() != labels.len() * c || labels.iter().any(|l| l.len() != c) {
        return Err(Error::Dimension(format!(
            "{} predictions for {} samples of {c} AUs",
            preds.len(),
            labels.len()
        )));
    }
    let contributing = labels.iter().filter(|l| l.valid_count() > 0).count();
    if contributing == 0 {
        return Err(Error::EmptyLoss);
    }
    let batch_scale = 1.0 / contributing as f64;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut loss = 0.0;
    let mut grad = vec![0.0; preds.len()];
    let mut clamped = vec![false; preds.len()];
    for (s, label) in labels.iter().enumerate() {
        let valid = label.valid_count();
        if valid == 0 {
            continue;
        }
        let scale = batch_scale / valid as f64;
        let mut sample = 0.0;
        for (i, w) in weights.weights().iter().enumerate() {
            let Some(active) = label.get(i) else { continue };
            let idx = s * c + i;
            let raw = preds[idx].as_f64();
            let p = raw.clamp(lo, hi);
            clamped[idx] = raw != p;
            let (term, dterm) = if active {
                (-w * p.ln(), -w / p)
            } else {
                (-(1.0 - p).ln(), 1.0 / (1.0 - p))
            };
            sample += term;
            if !clamped[idx] {
                grad[idx] = scale * dterm;
            }
        }
        loss += sample / valid as f64;
    }
    Ok(BceEval {
        loss: loss * batch_scale,
        grad,
        clamped,
    })
}

/// Weighted BCE over a `[N, C]` batch of probabilities: per entry
/// `-(w_i * y * ln p + (1 - y) * ln(1 - p))`, averaged over a sample's
/// annotated AUs, then over samples with at least one annotated AU.
pub fn weighted_bce<T: Scalar>(labels: &[LabelVector], preds: &Tensor<T>, weights: &ClassWeights) -> Result<f64> {
    Ok(evaluate_bce(labels, preds.data(), weights)?.loss)
}

struct WeightedBceBackward<T> {
    grad: Vec<T>,
    clamped: Vec<bool>,
}

impl<T: Scalar> Backward<T> for WeightedBceBackward<T> {
    fn name(&self) -> &'static str {
        "weighted_bce"
    }

    fn backward(&self, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.grad.iter().map(|&d| d * g[0]).collect())]
    }

    fn kink_signature(&self) -> Option<u64> {
        let mut h = DefaultHasher::new();
        self.clamped.hash(&mut h);
        Some(h.finish())
    }
}

/// [`weighted_bce`] recorded on a tape, differentiable in `preds`.
pub fn weighted_bce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    preds: Var,
    labels: &[LabelVector],
    weights: &ClassWeights,
) -> Result<Var> {
    let eval = evaluate_bce(labels, tape.value(preds)?, weights)?;
    let rule = WeightedBceBackward {
        grad: eval.grad.iter().map(|&d| T::from_f64_lossy(d)).collect(),
        clamped: eval.clamped,
    };
    tape.custom(&[preds], Tensor::scalar(T::from_f64_lossy(eval.loss)), Box::new(rule))
}

/// Hard decisions: `1` where `p >= threshold`.
pub fn binarize<T: Scalar>(preds: &[T], threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold must lie strictly between 0 and 1, got {threshold}"
        )));
    }
    Ok(preds.iter().map(|&p| u8::from(p.as_f64() >= threshold)).collect())
}

/// Confusion counts of one AU. Counts from disjoint shards add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when nothing was predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

/// Tallies confusion counts per AU, skipping `-1` labels.
pub fn confusion_counts(binary: &[u8], labels: &[LabelVector], num_aus: usize) -> Result<Vec<ConfusionCounts>> {
    if binary.len() != labels.len() * num_aus || labels.iter().any(|l| l.len() != num_aus) {
        return Err(Error::Dimension(format!(
            "{} decisions for {} samples of {num_aus} AUs",
            binary.len(),
            labels.len()
        )));
    }
    let mut counts = vec![ConfusionCounts::default(); num_aus];
    for (row, label) in binary.chunks_exact(num_aus).zip(labels) {
        for (i, (&pred, count)) in row.iter().zip(counts.iter_mut()).enumerate() {
            match (label.get(i), pred != 0) {
                (None, _) => {}
                (Some(true), true) => count.tp += 1,
                (Some(false), true) => count.fp += 1,
                (Some(true), false) => count.fn_ += 1,
                (Some(false), false) => count.tn += 1,
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub support: u64,
}

/// Per-AU F1 scores and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_au: Vec<AuMetrics>,
    pub macro_f1: f64,
}

impl MetricReport {
    pub fn from_counts(names: &[String], counts: &[ConfusionCounts]) -> Self {
        let per_au: Vec<AuMetrics> = counts
            .iter()
            .enumerate()
            .map(|(i, c)| AuMetrics {
                name: names.get(i).cloned().unwrap_or_else(|| format!("AU#{i}")),
                counts: *c,
                f1: c.f1(),
                support: c.support(),
            })
            .collect();
        let macro_f1 = if per_au.is_empty() {
            0.0
        } else {
            per_au.iter().map(|m| m.f1).sum::<f64>() / per_au.len() as f64
        };
        MetricReport { per_au, macro_f1 }
    }

    /// One `name f1` line per AU and a closing `macro` line. `verbose` appends
    /// the confusion counts each value derives from.
    pub fn to_text(&self, verbose: bool) -> String {
        let mut out = String::new();
        for m in &self.per_au {
            let _ = write!(out, "{} {}", m.name, m.f1);
            if verbose {
                let c = m.counts;
                let _ = write!(out, " tp={} fp={} fn={} tn={} support={}", c.tp, c.fp, c.fn_, c.tn, m.support);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "macro {}", self.macro_f1);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Confusion counts and F1 per AU, macro F1 as their mean.
pub fn macro_f1(binary: &[u8], labels: &[LabelVector], names: &[String]) -> Result<MetricReport> {
    let num_aus = labels.first().map_or(names.len(), LabelVector::len);
    let counts = confusion_counts(binary, labels, num_aus)?;
    Ok(MetricReport::from_counts(names, &counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[i8]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("AU{i}")).collect()
    }

    fn weights_of(w: &[f64]) -> ClassWeights {
        ClassWeights {
            totals: vec![0; w.len()],
            positives: vec![0; w.len()],
            weights: w.to_vec(),
        }
    }

    #[test]
    fn label_values_are_checked() {
        assert!(LabelVector::new(vec![0, 1, -1]).is_ok());
        assert!(matches!(LabelVector::new(vec![2]), Err(Error::Contract(_))));
    }

    #[test]
    fn class_weight_substitution() {
        let mut labels = Vec::new();
        for i in 0..100 {
            labels.push(lv(&[i8::from(i < 50), i8::from(i < 25)]));
        }
        let w = compute_class_weights(&labels, &names(2)).unwrap();
        assert_eq!(w.weights(), &[1.0, 2.0]);
        assert_eq!(w.ratio(1), (100, 50));
    }

    #[test]
    fn invalid_labels_leave_the_counts() {
        let labels = vec![lv(&[1]), lv(&[0]), lv(&[-1]), lv(&[0])];
        let w = compute_class_weights(&labels, &names(1)).unwrap();
        assert_eq!(w.totals(), &[3]);
        assert_eq!(w.weights(), &[1.5]);
    }

    #[test]
    fn zero_positives_names_the_au() {
        let labels = vec![lv(&[1, 0]), lv(&[1, 0])];
        match compute_class_weights(&labels, &names(2)) {
            Err(Error::DegenerateClass { index, name }) => {
                assert_eq!(index, 1);
                assert_eq!(name, "AU1");
            }
            other => panic!("expected degenerate class, got {other:?}"),
        }
    }

    #[test]
    fn bce_substitution_values() {
        let half = Tensor::new([1, 1], vec![0.5f64]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        let l = weighted_bce(&[lv(&[1])], &half, &weights_of(&[1.0])).unwrap();
        assert!((l - ln2).abs() < 1e-15);
        let l = weighted_bce(&[lv(&[1])], &half, &weights_of(&[2.0])).unwrap();
        assert!((l - 2.0 * ln2).abs() < 1e-15);
        let l = weighted_bce(&[lv(&[0])], &half, &weights_of(&[2.0])).unwrap();
        assert!((l - ln2).abs() < 1e-15);
    }

    #[test]
    fn perfect_positive_is_near_zero() {
        let p = Tensor::new([1, 1], vec![1.0 - 1e-7]).unwrap();
        let l = weighted_bce(&[lv(&[1])], &p, &weights_of(&[3.0])).unwrap();
        assert!(l < 1e-6);
        // exact 1.0 is clamped rather than producing ln(0)
        let p = Tensor::new([1, 1], vec![1.0]).unwrap();
        assert!(weighted_bce(&[lv(&[0])], &p, &weights_of(&[1.0])).unwrap().is_finite());
    }

    #[test]
    fn masked_entries_shrink_the_divisor() {
        let p = Tensor::new([1, 2], vec![0.5f64, 0.9]).unwrap();
        let l = weighted_bce(&[lv(&[1, -1])], &p, &weights_of(&[1.0, 1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            weighted_bce(&[lv(&[-1, -1])], &p, &weights_of(&[1.0, 1.0])),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn binarize_boundary() {
        assert_eq!(binarize(&[0.5f64, 0.4999, 0.9], 0.5).unwrap(), vec![1, 0, 1]);
        assert!(binarize(&[0.5f64], 0.0).is_err());
        assert!(binarize(&[0.5f64], 1.0).is_err());
    }

    #[test]
    fn f1_hand_count() {
        let labels = vec![lv(&[1]), lv(&[1]), lv(&[0]), lv(&[0])];
        let report = macro_f1(&[1, 1, 1, 1], &labels, &names(1)).unwrap();
        let c = report.per_au[0].counts;
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 2, 0, 0));
        assert!((report.per_au[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![lv(&[1, 0, 1]), lv(&[0, 1, 1])];
        let binary: Vec<u8> = labels.iter().flat_map(|l| l.values().iter().map(|&v| v as u8)).collect();
        let report = macro_f1(&binary, &labels, &names(3)).unwrap();
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn zero_support_scores_zero() {
        let labels = vec![lv(&[0]), lv(&[-1])];
        let report = macro_f1(&[0, 1], &labels, &names(1)).unwrap();
        assert_eq!(report.per_au[0].f1, 0.0);
        assert_eq!(report.per_au[0].counts.tn, 1);
    }

    #[test]
    fn text_report_lists_every_au() {
        let labels = vec![lv(&[1, 0])];
        let report = macro_f1(&[1, 0], &labels, &names(2)).unwrap();
        let text = report.to_text(true);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("AU0 1 tp=1"));
        assert!(text.ends_with("macro 0.5\n"));
        assert!(report.to_json().contains("\"macro_f1\": 0.5"));
    }
}
