//! The detector network: a stack of conv blocks (conv 3x3 -> batch norm ->
//! ReLU -> optional 2x2 max-pool), attention pooling over the final feature
//! map's spatial positions, and a sigmoid prediction head.
//!
//! Attention pooling treats each spatial position of the `H x W x C` feature
//! map as a sub-vector `v` of length `C`, scores every sub-vector with a shared
//! `FC(hidden) -> BN -> ReLU -> FC(1)` network, turns the `H*W` scores of a
//! sample into weights with a softmax, and returns `sum(w * v)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{update_running, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the square input image in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    /// Filter count of each conv block, in order.
    pub block_filters: Vec<usize>,
    /// Whether each block ends with a 2x2 max-pool.
    pub pool_schedule: Vec<bool>,
    /// Width of the attention score network's hidden layer.
    pub attention_hidden: usize,
    pub num_aus: usize,
}

impl Default for ModelConfig {
    /// Pools in the first four blocks only, leaving a 7x7x256 feature map for
    /// 112-pixel inputs.
    fn default() -> Self {
        ModelConfig {
            input_size: 112,
            input_channels: 3,
            block_filters: vec![32, 64, 128, 128, 256, 256],
            pool_schedule: vec![true, true, true, true, false, false],
            attention_hidden: 128,
            num_aus: crate::NUM_AUS,
        }
    }
}

impl ModelConfig {
    /// Pools after every block. With 112-pixel inputs the feature map
    /// collapses to 1x1 and attention pooling becomes the identity.
    pub fn pool_every_block() -> Self {
        ModelConfig {
            pool_schedule: vec![true; 6],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.block_filters.is_empty() {
            return fail("at least one conv block is required".into());
        }
        if self.block_filters.contains(&0) {
            return fail(format!("block filters {:?} must be positive", self.block_filters));
        }
        if self.pool_schedule.len() != self.block_filters.len() {
            return fail(format!(
                "pool schedule has {} entries for {} blocks",
                self.pool_schedule.len(),
                self.block_filters.len()
            ));
        }
        if self.input_size == 0 || self.input_channels == 0 {
            return fail("input size and channels must be positive".into());
        }
        if self.attention_hidden == 0 {
            return fail("attention hidden width must be positive".into());
        }
        if self.num_aus == 0 {
            return fail("at least one AU is required".into());
        }
        let mut size = self.input_size;
        for (block, &pool) in self.pool_schedule.iter().enumerate() {
            if pool {
                if size < 2 {
                    return fail(format!(
                        "block {block} pools a {size}x{size} map; input size {} is too small for schedule {}",
                        self.input_size,
                        format_pool_schedule(&self.pool_schedule)
                    ));
                }
                size /= 2;
            }
        }
        Ok(())
    }

    /// Side length of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.pool_schedule
            .iter()
            .fold(self.input_size, |s, &p| if p { s / 2 } else { s })
    }

    /// Channel count of the final feature map.
    pub fn feature_channels(&self) -> usize {
        *self.block_filters.last().expect("validated config has blocks")
    }
}

/// Parses a pool schedule written as one `0`/`1` per block, e.g. `111100`.
pub fn parse_pool_schedule(text: &str) -> Result<Vec<bool>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Config("empty pool schedule".into()));
    }
    text.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Config(format!(
                "pool schedule may only contain 0 and 1, found {other:?}"
            ))),
        })
        .collect()
}

pub fn format_pool_schedule(schedule: &[bool]) -> String {
    schedule.iter().map(|&p| if p { '1' } else { '0' }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch norm; running statistics are reported
    /// for the caller to fold in.
    Train,
    /// Running statistics in every batch norm.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Every learnable tensor and batch-norm running statistic of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub attention: AttentionParams<T>,
    pub head: HeadParams<T>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(rng)))
}

fn bn_tensors<T: Scalar>(c: usize) -> Result<[Tensor<T>; 4]> {
    Ok([
        Tensor::full([c], T::one())?,
        Tensor::zeros([c])?,
        Tensor::zeros([c])?,
        Tensor::full([c], T::one())?,
    ])
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights on ReLU paths, `N(0, 1/fan_in)` for the head, zero
    /// biases, unit batch-norm scale. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.block_filters.len());
        let mut cin = config.input_channels;
        for &cout in &config.block_filters {
            let kernel = normal(&mut rng, &[3, 3, cin, cout], (2.0 / (9 * cin) as f64).sqrt())?;
            let [gamma, beta, running_mean, running_var] = bn_tensors(cout)?;
            blocks.push(ConvBlock {
                kernel,
                bias: Tensor::zeros([cout])?,
                gamma,
                beta,
                running_mean,
                running_var,
            });
            cin = cout;
        }
        let (c, hidden) = (config.feature_channels(), config.attention_hidden);
        let fc1_weight = normal(&mut rng, &[c, hidden], (2.0 / c as f64).sqrt())?;
        let fc2_weight = normal(&mut rng, &[hidden, 1], (2.0 / hidden as f64).sqrt())?;
        let head_weight = normal(&mut rng, &[c, config.num_aus], (1.0 / c as f64).sqrt())?;
        let [gamma, beta, running_mean, running_var] = bn_tensors(hidden)?;
        Ok(ModelParams {
            blocks,
            attention: AttentionParams {
                fc1_weight,
                fc1_bias: Tensor::zeros([hidden])?,
                gamma,
                beta,
                running_mean,
                running_var,
                fc2_weight,
                fc2_bias: Tensor::zeros([1])?,
            },
            head: HeadParams {
                weight: head_weight,
                bias: Tensor::zeros([config.num_aus])?,
            },
        })
    }

    /// Learnable tensors in canonical order.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().filter(|(n, _)| is_trainable(n)).map(|(_, t)| t).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_mut()
            .into_iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).filter(|n| is_trainable(n)).collect()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Every tensor under its stable checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.kernel"), &b.kernel));
            out.push((format!("block{i}.conv.bias"), &b.bias));
            out.push((format!("block{i}.bn.gamma"), &b.gamma));
            out.push((format!("block{i}.bn.beta"), &b.beta));
            out.push((format!("block{i}.bn.running_mean"), &b.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.running_var));
        }
        let a = &self.attention;
        out.push(("attention.fc1.weight".into(), &a.fc1_weight));
        out.push(("attention.fc1.bias".into(), &a.fc1_bias));
        out.push(("attention.bn.gamma".into(), &a.gamma));
        out.push(("attention.bn.beta".into(), &a.beta));
        out.push(("attention.bn.running_mean".into(), &a.running_mean));
        out.push(("attention.bn.running_var".into(), &a.running_var));
        out.push(("attention.fc2.weight".into(), &a.fc2_weight));
        out.push(("attention.fc2.bias".into(), &a.fc2_bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv.kernel"), &mut b.kernel));
            out.push((format!("block{i}.conv.bias"), &mut b.bias));
            out.push((format!("block{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.beta));
            out.push((format!("block{i}.bn.running_mean"), &mut b.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.running_var));
        }
        let a = &mut self.attention;
        out.push(("attention.fc1.weight".into(), &mut a.fc1_weight));
        out.push(("attention.fc1.bias".into(), &mut a.fc1_bias));
        out.push(("attention.bn.gamma".into(), &mut a.gamma));
        out.push(("attention.bn.beta".into(), &mut a.beta));
        out.push(("attention.bn.running_mean".into(), &mut a.running_mean));
        out.push(("attention.bn.running_var".into(), &mut a.running_var));
        out.push(("attention.fc2.weight".into(), &mut a.fc2_weight));
        out.push(("attention.fc2.bias".into(), &mut a.fc2_bias));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn zero_grad(&mut self) {
        for t in self.trainable_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let block = |b: &ConvBlock<T>| ConvBlock {
            kernel: b.kernel.cast(),
            bias: b.bias.cast(),
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
        };
        let a = &self.attention;
        ModelParams {
            blocks: self.blocks.iter().map(block).collect(),
            attention: AttentionParams {
                fc1_weight: a.fc1_weight.cast(),
                fc1_bias: a.fc1_bias.cast(),
                gamma: a.gamma.cast(),
                beta: a.beta.cast(),
                running_mean: a.running_mean.cast(),
                running_var: a.running_var.cast(),
                fc2_weight: a.fc2_weight.cast(),
                fc2_bias: a.fc2_bias.cast(),
            },
            head: HeadParams {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }

    /// Folds train-mode batch statistics (blocks in order, then attention)
    /// into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        if stats.len() != self.blocks.len() + 1 {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} batch norms",
                stats.len(),
                self.blocks.len() + 1
            )));
        }
        let targets = self
            .blocks
            .iter_mut()
            .map(|b| (&mut b.running_mean, &mut b.running_var))
            .chain(std::iter::once((
                &mut self.attention.running_mean,
                &mut self.attention.running_var,
            )));
        for ((mean, var), s) in targets.zip(stats) {
            update_running(mean.data_mut(), &s.mean, momentum);
            update_running(var.data_mut(), &s.var, momentum);
        }
        Ok(())
    }

    /// Records every learnable tensor as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.trainable().into_iter().map(|t| tape.param(t)).collect())
    }

    /// Records every learnable tensor as a constant (inference only).
    pub fn register_constant(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.trainable().into_iter().map(|t| tape.leaf(t, false)).collect())
    }
}

fn is_trainable(name: &str) -> bool {
    !name.contains("running_")
}

const BLOCK_VARS: usize = 4;
const ATTENTION_VARS: usize = 6;

/// Tape variables for the learnable tensors, in [`ModelParams::trainable`]
/// order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = config.block_filters.len() * BLOCK_VARS + ATTENTION_VARS + 2;
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "{} variables for a model with {expected} learnable tensors",
                vars.len()
            )));
        }
        Ok(ParamVars(vars))
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }

    fn block(&self, i: usize) -> [Var; 4] {
        let b = &self.0[i * BLOCK_VARS..(i + 1) * BLOCK_VARS];
        [b[0], b[1], b[2], b[3]]
    }

    fn attention(&self) -> [Var; 6] {
        let start = self.0.len() - ATTENTION_VARS - 2;
        let a = &self.0[start..start + ATTENTION_VARS];
        [a[0], a[1], a[2], a[3], a[4], a[5]]
    }

    fn head(&self) -> [Var; 2] {
        let n = self.0.len();
        [self.0[n - 2], self.0[n - 1]]
    }
}

fn batchnorm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&Tensor<T>, &Tensor<T>),
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batchnorm_train(x, gamma, beta)?;
            Ok((y, Some(stats)))
        }
        Mode::Infer => Ok((
            tape.batchnorm_infer(x, gamma, beta, running.0.data(), running.1.data())?,
            None,
        )),
    }
}

/// Runs the conv stack. `images` is `[N, S, S, C_in]` with pixel values in
/// `[0, 1]`; the result is the `[N, H, W, C_feat]` feature map plus, in train
/// mode, each block's batch statistics.
pub fn extract_features<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    params: &ModelParams<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    mode: Mode,
) -> Result<(Var, Vec<BatchStats>)> {
    let shape = tape.shape(images)?;
    let s = config.input_size;
    if shape.len() != 4 || shape[1..] != [s, s, config.input_channels] {
        return Err(Error::Dimension(format!(
            "expected images [N, {s}, {s}, {}], got {shape:?}",
            config.input_channels
        )));
    }
    let mut x = images;
    let mut stats = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        let [kernel, bias, gamma, beta] = vars.block(i);
        let conv = tape.conv2d(x, kernel, bias)?;
        if x != images {
            tape.forget(x)?;
        }
        let (normed, batch) =
            batchnorm(tape, conv, gamma, beta, (&block.running_mean, &block.running_var), mode)?;
        tape.forget(conv)?;
        stats.extend(batch);
        let act = tape.relu(normed)?;
        tape.forget(normed)?;
        x = if config.pool_schedule[i] {
            let pooled = tape.maxpool2d(act)?;
            tape.forget(act)?;
            pooled
        } else {
            act
        };
    }
    Ok((x, stats))
}

/// Attention pooling outputs. `scores` and `weights` are `[N, H*W]` in
/// row-major position order.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub vector: Var,
    /// Score-network activations after the ReLU, `[N*H*W, hidden]`.
    pub hidden: Var,
    pub scores: Var,
    pub weights: Var,
    pub stats: Option<BatchStats>,
}

/// Pools a `[N, H, W, C]` feature map into `[N, C]` attention vectors.
pub fn attention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    params: &ModelParams<T>,
    vars: &ParamVars,
    mode: Mode,
) -> Result<AttentionOutput> {
    let shape = tape.shape(features)?.to_vec();
    let &[n, h, w, c] = shape.as_slice() else {
        return Err(Error::Dimension(format!(
            "attention expects a [N,H,W,C] feature map, got {shape:?}"
        )));
    };
    let positions = h * w;
    let [fc1_w, fc1_b, gamma, beta, fc2_w, fc2_b] = vars.attention();
    let a = &params.attention;

    let flat = tape.reshape(features, &[n * positions, c])?;
    let hidden = tape.dense(flat, fc1_w, fc1_b)?;
    let (normed, stats) = batchnorm(tape, hidden, gamma, beta, (&a.running_mean, &a.running_var), mode)?;
    let act = tape.relu(normed)?;
    let raw = tape.dense(act, fc2_w, fc2_b)?;
    let scores = tape.reshape(raw, &[n, positions])?;
    let weights = tape.softmax(scores, 1)?;
    let values = tape.reshape(features, &[n, positions, c])?;
    let vector = tape.weighted_sum(values, weights)?;
    Ok(AttentionOutput {
        vector,
        hidden: act,
        scores,
        weights,
        stats,
    })
}

/// `sigmoid(vector * W + b)`: one probability per AU.
pub fn predict<T: Scalar>(tape: &mut Tape<T>, vector: Var, vars: &ParamVars) -> Result<Var> {
    let [w, b] = vars.head();
    let logits = tape.dense(vector, w, b)?;
    tape.sigmoid(logits)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub attention: AttentionOutput,
    pub predictions: Var,
    /// Train mode only: block statistics in order, then the attention's.
    pub stats: Vec<BatchStats>,
}

/// `extract_features -> attention_forward -> predict`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    params: &ModelParams<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    let (features, mut stats) = extract_features(tape, images, params, vars, config, mode)?;
    let attention = attention_forward(tape, features, params, vars, mode)?;
    let predictions = predict(tape, attention.vector, vars)?;
    stats.extend(attention.stats.clone());
    Ok(ForwardOutput {
        features,
        attention,
        predictions,
        stats,
    })
}

/// Infer-mode predictions `[N, num_aus]` for a batch of images, without
/// gradient tracking.
pub fn infer<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig, images: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register_constant(&mut tape);
    let x = tape.constant(images);
    let out = forward(&mut tape, x, params, &vars, config, Mode::Infer)?;
    tape.tensor(out.predictions)
}
