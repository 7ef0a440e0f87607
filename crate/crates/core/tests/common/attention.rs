//! Randomized trials of attention pooling, measured against its defining
//! properties rather than against the implementation.

use auattn::autodiff::Tape;
use auattn::model::{attention_forward, ModelConfig, ModelParams, Mode};
use auattn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attention_config(channels: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        block_filters: vec![4, 4, 4, 4, 4, channels],
        pool_schedule: vec![false; 6],
        attention_hidden: hidden,
        ..ModelConfig::default()
    }
}

/// Parameters whose attention layers are random, so the softmax is far
/// from uniform.
fn random_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut params = ModelParams::<f64>::init(config, rng.random()).unwrap();
    let a = &mut params.attention;
    for t in [&mut a.fc1_bias, &mut a.beta, &mut a.fc2_weight, &mut a.fc2_bias] {
        for v in t.data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    for v in a.gamma.data_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    for v in a.running_mean.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in a.running_var.data_mut() {
        *v = rng.random_range(0.2..3.0);
    }
    params
}

struct Pooled {
    vector: Vec<f64>,
    weights: Vec<f64>,
}

fn pool(params: &ModelParams<f64>, features: &Tensor<f64>, mode: Mode) -> Pooled {
    let mut tape = Tape::new();
    let vars = params.register_constant(&mut tape);
    let x = tape.constant(features.clone());
    let out = attention_forward(&mut tape, x, params, &vars, mode).unwrap();
    Pooled {
        vector: tape.value(out.vector).unwrap().to_vec(),
        weights: tape.value(out.weights).unwrap().to_vec(),
    }
}

/// Alternates modes; train-mode batch norm needs two rows per channel.
fn mode_for(trial: usize, rows: usize) -> Mode {
    if trial % 2 == 1 && rows >= 2 {
        Mode::Train
    } else {
        Mode::Infer
    }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, h, w, c], |_| rng.random_range(-3.0..3.0)).unwrap()
}

/// Worst observed deviation from each property over a sweep.
#[derive(Debug, Default)]
pub struct AttentionSweep {
    /// `|sum of weights - 1|`.
    pub sum: f64,
    /// Largest negative weight magnitude, or pooled value outside the
    /// per-channel range of the pooled positions.
    pub bounds: f64,
    /// Pooled vector change under a random spatial permutation.
    pub permutation: f64,
    /// Pooled vector change from the input with a single position.
    pub identity: f64,
}

pub fn attention_sweep(seed: u64, trials: usize) -> AttentionSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = AttentionSweep::default();
    for trial in 0..trials {
        let (n, h, w, c) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..7),
        );
        let config = attention_config(c, rng.random_range(1..9));
        let params = random_params(&config, &mut rng);
        let features = random_features(&mut rng, n, h, w, c);
        let mode = mode_for(trial, n * h * w);
        let out = pool(&params, &features, mode);
        let positions = h * w;
        for s in 0..n {
            let weights = &out.weights[s * positions..(s + 1) * positions];
            worst.sum = worst.sum.max((weights.iter().sum::<f64>() - 1.0).abs());
            for &a in weights {
                worst.bounds = worst.bounds.max(-a);
            }
            for ch in 0..c {
                let column = (0..positions).map(|p| features.data()[(s * positions + p) * c + ch]);
                let lo = column.clone().fold(f64::INFINITY, f64::min);
                let hi = column.fold(f64::NEG_INFINITY, f64::max);
                let v = out.vector[s * c + ch];
                worst.bounds = worst.bounds.max(lo - v).max(v - hi);
            }
        }

        let mut perm: Vec<usize> = (0..positions).collect();
        for i in (1..positions).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![0.0; features.len()];
        for s in 0..n {
            for (dst, &src) in perm.iter().enumerate() {
                let from = (s * positions + src) * c;
                let to = (s * positions + dst) * c;
                shuffled[to..to + c].copy_from_slice(&features.data()[from..from + c]);
            }
        }
        let shuffled = pool(&params, &Tensor::new(vec![n, h, w, c], shuffled).unwrap(), mode);
        for (x, y) in out.vector.iter().zip(&shuffled.vector) {
            worst.permutation = worst.permutation.max((x - y).abs());
        }

        let single = random_features(&mut rng, n, 1, 1, c);
        let out = pool(&params, &single, mode_for(trial, n));
        for (x, y) in out.vector.iter().zip(single.data()) {
            worst.identity = worst.identity.max((x - y).abs());
        }
    }
    worst
}
