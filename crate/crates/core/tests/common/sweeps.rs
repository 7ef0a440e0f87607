//! Randomized comparisons of the objective against the scalar oracles in
//! the parent module.

use auattn::objective::{compute_class_weights, macro_f1, weighted_bce, ClassWeights};
use auattn::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_oracle, macro_recount, plain_bce, random_label_rows, to_label_vectors};

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("AU{i}")).collect()
}

/// Random class weights with every AU having at least one positive.
pub fn random_weights(rng: &mut ChaCha8Rng, c: usize) -> ClassWeights {
    let positives: Vec<u64> = (0..c).map(|_| rng.random_range(1..50)).collect();
    let totals = positives.iter().map(|&p| p + rng.random_range(0..400)).collect();
    ClassWeights::from_counts(totals, positives, &names(c)).unwrap()
}

/// Probabilities in `[0, 1]`, with a share of exact 0s and 1s and values
/// below the clamp.
pub fn random_preds(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..c)
                .map(|_| match rng.random_range(0..20) {
                    0 => 0.0,
                    1 => 1.0,
                    2 => rng.random_range(0.0..1e-8),
                    _ => rng.random_range(0.0..1.0),
                })
                .collect()
        })
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
}

#[derive(Debug, Default)]
pub struct LossSweep {
    /// Largest `|loss - oracle| / max(|oracle|, 1)` with random weights.
    pub weighted: f64,
    /// The same against plain BCE with unit weights.
    pub unit: f64,
    /// Triples the oracle rejects (no annotated entry) that were not
    /// rejected with `EmptyLoss`.
    pub unrejected: usize,
}

pub fn loss_sweep(seed: u64, trials: usize) -> LossSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = LossSweep::default();
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1.0);
    for _ in 0..trials {
        let (n, c) = (rng.random_range(1..9), rng.random_range(1..13));
        let labels = random_label_rows(&mut rng, n, c, 0.2);
        let preds = random_preds(&mut rng, n, c);
        let weights = random_weights(&mut rng, c);
        let lv = to_label_vectors(&labels);
        let got = weighted_bce(&lv, &tensor(&preds), &weights);
        let unit = weighted_bce(&lv, &tensor(&preds), &ClassWeights::uniform(c));
        match (bce_oracle(&labels, &preds, weights.weights()), plain_bce(&labels, &preds)) {
            (Some(want), Some(plain)) => {
                worst.weighted = worst.weighted.max(rel(got.unwrap(), want));
                worst.unit = worst.unit.max(rel(unit.unwrap(), plain));
            }
            _ => {
                if !matches!(got, Err(Error::EmptyLoss)) {
                    worst.unrejected += 1;
                }
            }
        }
    }
    worst
}

#[derive(Debug, Default)]
pub struct F1Sweep {
    /// Batches whose per-AU or macro F1 differed from the recount in any bit.
    pub mismatches: usize,
    /// AUs seen with no positive label (F1 defined as 0).
    pub zero_support: usize,
}

pub fn f1_sweep(seed: u64, batches: usize) -> F1Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = F1Sweep::default();
    for _ in 0..batches {
        let (n, c) = (rng.random_range(1..40), rng.random_range(1..13));
        let mut labels = random_label_rows(&mut rng, n, c, 0.2);
        // One AU per batch never fires.
        let silent = rng.random_range(0..c);
        for row in &mut labels {
            if row[silent] == 1 {
                row[silent] = 0;
            }
        }
        let preds: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect())
            .collect();
        let report = macro_f1(&preds.concat(), &to_label_vectors(&labels), &names(c)).unwrap();
        let (per_au, mean) = macro_recount(&preds, &labels, c);
        let got: Vec<f64> = report.per_au.iter().map(|m| m.f1).collect();
        if got != per_au || report.macro_f1 != mean {
            out.mismatches += 1;
        }
        out.zero_support += report.per_au.iter().filter(|m| m.support == 0).count();
    }
    out
}

/// Checks `w_i * 2 * positives_i == total_i` on random label sets, exactly
/// on the stored integer ratio and to 1e-12 on the float. Returns the
/// number of violations.
pub fn class_weight_sweep(seed: u64, sets: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..sets {
        let (n, c) = (rng.random_range(1..60), rng.random_range(1..13));
        let mut rows = random_label_rows(&mut rng, n, c, 0.15);
        rows.push(vec![1; c]);
        let w = compute_class_weights(&to_label_vectors(&rows), &names(c)).unwrap();
        for au in 0..c {
            let total = rows.iter().filter(|r| r[au] != -1).count() as u64;
            let positives = rows.iter().filter(|r| r[au] == 1).count() as u64;
            let back = w.weights()[au] * (2 * positives) as f64;
            if w.ratio(au) != (total, 2 * positives) || (back - total as f64).abs() > 1e-12 * total as f64 {
                violations += 1;
            }
        }
    }
    violations
}
