//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the code under test except to build
//! inputs.

#![allow(dead_code)]

pub mod attention;
pub mod sweeps;

use std::path::Path;

use auattn::dataio::{build_index, generate_synthetic, DatasetIndex, Policy, SyntheticSpec};
use auattn::model::ModelConfig;
use auattn::objective::LabelVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const CLAMP: f64 = 1e-7;

/// Weighted BCE straight from its definition: per entry
/// `-(w*y*ln p + (1-y)*ln(1-p))` with `p` clamped, `-1` entries skipped,
/// averaged over a sample's valid entries, then over samples with any.
pub fn bce_oracle(labels: &[Vec<i8>], preds: &[Vec<f64>], weights: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    let mut samples = 0usize;
    for (y, p) in labels.iter().zip(preds) {
        let mut sum = 0.0;
        let mut valid = 0usize;
        for i in 0..y.len() {
            if y[i] == -1 {
                continue;
            }
            let q = p[i].clamp(CLAMP, 1.0 - CLAMP);
            let yi = y[i] as f64;
            sum += -(weights[i] * yi * q.ln() + (1.0 - yi) * (1.0 - q).ln());
            valid += 1;
        }
        if valid > 0 {
            total += sum / valid as f64;
            samples += 1;
        }
    }
    (samples > 0).then(|| total / samples as f64)
}

/// Ordinary unweighted BCE with the same masking and reduction.
pub fn plain_bce(labels: &[Vec<i8>], preds: &[Vec<f64>]) -> Option<f64> {
    let mut total = 0.0;
    let mut samples = 0usize;
    for (y, p) in labels.iter().zip(preds) {
        let terms: Vec<f64> = y
            .iter()
            .zip(p)
            .filter(|(&yi, _)| yi != -1)
            .map(|(&yi, &pi)| {
                let q = pi.clamp(CLAMP, 1.0 - CLAMP);
                if yi == 1 {
                    -q.ln()
                } else {
                    -(1.0 - q).ln()
                }
            })
            .collect();
        if !terms.is_empty() {
            total += terms.iter().sum::<f64>() / terms.len() as f64;
            samples += 1;
        }
    }
    (samples > 0).then(|| total / samples as f64)
}

/// Per-AU `[tp, fp, fn, tn]` over entries whose label is not `-1`.
pub fn confusion_recount(preds: &[Vec<u8>], labels: &[Vec<i8>], num_aus: usize) -> Vec<[u64; 4]> {
    let mut out = vec![[0u64; 4]; num_aus];
    for (p, y) in preds.iter().zip(labels) {
        for au in 0..num_aus {
            let slot = match (p[au], y[au]) {
                (_, -1) => continue,
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 1) => 2,
                (0, 0) => 3,
                other => panic!("unexpected entry {other:?}"),
            };
            out[au][slot] += 1;
        }
    }
    out
}

/// F1 from integer counts, 0 when nothing was predicted or present.
pub fn f1_from_counts(c: [u64; 4]) -> f64 {
    let [tp, fp, fn_, _] = c;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn macro_recount(preds: &[Vec<u8>], labels: &[Vec<i8>], num_aus: usize) -> (Vec<f64>, f64) {
    let per_au: Vec<f64> = confusion_recount(preds, labels, num_aus)
        .into_iter()
        .map(f1_from_counts)
        .collect();
    let mean = per_au.iter().sum::<f64>() / num_aus as f64;
    (per_au, mean)
}

pub fn to_label_vectors(rows: &[Vec<i8>]) -> Vec<LabelVector> {
    rows.iter().map(|r| LabelVector::new(r.clone()).unwrap()).collect()
}

/// Random labels in {-1, 0, 1} with the given chance of `-1`.
pub fn random_label_rows(rng: &mut ChaCha8Rng, n: usize, c: usize, invalid: f64) -> Vec<Vec<i8>> {
    (0..n)
        .map(|_| {
            (0..c)
                .map(|_| {
                    if rng.random_bool(invalid) {
                        -1
                    } else {
                        i8::from(rng.random_bool(0.5))
                    }
                })
                .collect()
        })
        .collect()
}

pub fn au_names() -> Vec<String> {
    auattn::DEFAULT_AU_NAMES.iter().map(|s| s.to_string()).collect()
}

/// A model small enough to train for several epochs in seconds: 32-pixel
/// inputs and narrow blocks, pooled down to a 4x4 feature map.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        block_filters: vec![4, 8, 8, 8, 16, 16],
        pool_schedule: vec![true, true, true, false, false, false],
        attention_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Writes a synthetic dataset into `dir` and indexes it.
pub fn synthetic_index(dir: &Path, count: usize, seed: u64, size: usize) -> DatasetIndex {
    let spec = SyntheticSpec {
        image_size: size,
        ..SyntheticSpec::new(count, seed)
    };
    generate_synthetic(&spec, dir).unwrap();
    build_index(dir, Policy::Mask).unwrap()
}
