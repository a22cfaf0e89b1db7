//! The BiGRU+CNN classifier: configuration, parameters, training, inference,
//! and a checksummed binary serialization format.
//!
//! The network reads a fixed-length id sequence and produces the probability
//! that the text is offensive:
//!
//! ids → embedding → conv1d (same padding, ReLU) → maxpool →
//! BiGRU (sequences) → BiGRU (final states) → dense (ReLU) → dropout →
//! dense (1 unit, sigmoid)
//!
//! Training is plain minibatch Adam on binary cross-entropy with seeded
//! shuffling, so a fixed seed reproduces runs bit-for-bit.

use crate::data::RawTweet;
use crate::eval::{self, EpochRecord};
use crate::layers::{
    bigru_forward, conv1d_forward, dense_forward, dropout, Activation, ConvParams, GruParams,
    GruVars,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{self, Vocabulary};
use std::path::Path;
use thiserror::Error;

/// Hyperparameters of the network and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub pool: usize,
    pub gru1_hidden: usize,
    pub gru2_hidden: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Loss weight of the positive class; 1.0 leaves the loss unweighted.
    pub pos_weight: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Library defaults; `epochs` defaults to 100.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_len: 40,
            embed_dim: 100,
            conv_filters: 64,
            kernel_size: 3,
            pool: 2,
            gru1_hidden: 64,
            gru2_hidden: 32,
            dense_hidden: 64,
            dropout_rate: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            pos_weight: 1.0,
            seed: 1337,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("conv_filters", self.conv_filters),
            ("kernel_size", self.kernel_size),
            ("pool", self.pool),
            ("gru1_hidden", self.gru1_hidden),
            ("gru2_hidden", self.gru2_hidden),
            ("dense_hidden", self.dense_hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if self.vocab_size < 2 {
            return Err(ConfigError::VocabTooSmall(self.vocab_size));
        }
        if self.kernel_size % 2 == 0 {
            return Err(ConfigError::EvenKernel(self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::BadDropout(self.dropout_rate));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(ConfigError::BadLearningRate(self.learning_rate));
        }
        if !(self.pos_weight > 0.0) || !self.pos_weight.is_finite() {
            return Err(ConfigError::BadPosWeight(self.pos_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field {0} must be positive")]
    NotPositive(&'static str),
    #[error("vocab_size must be at least 2 (pad and oov), got {0}")]
    VocabTooSmall(usize),
    #[error("kernel_size must be odd for symmetric same-padding, got {0}")]
    EvenKernel(usize),
    #[error("dropout_rate must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("learning_rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("pos_weight must be finite and positive, got {0}")]
    BadPosWeight(f64),
}

/// All learnable weights of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub embedding: Tensor<T>,
    pub conv: ConvParams<T>,
    pub gru1_fwd: GruParams<T>,
    pub gru1_bwd: GruParams<T>,
    pub gru2_fwd: GruParams<T>,
    pub gru2_bwd: GruParams<T>,
    pub dense1_w: Tensor<T>,
    pub dense1_b: Tensor<T>,
    pub dense2_w: Tensor<T>,
    pub dense2_b: Tensor<T>,
}

macro_rules! for_each_param {
    ($self:expr, $f:expr) => {{
        let f = &mut $f;
        f("embedding", &mut $self.embedding);
        f("conv.kernels", &mut $self.conv.kernels);
        f("conv.bias", &mut $self.conv.bias);
        for (prefix, gru) in [
            ("gru1.fwd", &mut $self.gru1_fwd),
            ("gru1.bwd", &mut $self.gru1_bwd),
            ("gru2.fwd", &mut $self.gru2_fwd),
            ("gru2.bwd", &mut $self.gru2_bwd),
        ] {
            f(concat_name(prefix, "w_z"), &mut gru.w_z);
            f(concat_name(prefix, "w_r"), &mut gru.w_r);
            f(concat_name(prefix, "w_h"), &mut gru.w_h);
            f(concat_name(prefix, "u_z"), &mut gru.u_z);
            f(concat_name(prefix, "u_r"), &mut gru.u_r);
            f(concat_name(prefix, "u_h"), &mut gru.u_h);
            f(concat_name(prefix, "b_z"), &mut gru.b_z);
            f(concat_name(prefix, "b_r"), &mut gru.b_r);
            f(concat_name(prefix, "b_h"), &mut gru.b_h);
        }
        f("dense1.w", &mut $self.dense1_w);
        f("dense1.b", &mut $self.dense1_b);
        f("dense2.w", &mut $self.dense2_w);
        f("dense2.b", &mut $self.dense2_b);
    }};
}

/// Interned parameter names, so iteration stays allocation-free.
fn concat_name(prefix: &str, field: &str) -> &'static str {
    const NAMES: &[(&str, &str, &str)] = &[
        ("gru1.fwd", "w_z", "gru1.fwd.w_z"),
        ("gru1.fwd", "w_r", "gru1.fwd.w_r"),
        ("gru1.fwd", "w_h", "gru1.fwd.w_h"),
        ("gru1.fwd", "u_z", "gru1.fwd.u_z"),
        ("gru1.fwd", "u_r", "gru1.fwd.u_r"),
        ("gru1.fwd", "u_h", "gru1.fwd.u_h"),
        ("gru1.fwd", "b_z", "gru1.fwd.b_z"),
        ("gru1.fwd", "b_r", "gru1.fwd.b_r"),
        ("gru1.fwd", "b_h", "gru1.fwd.b_h"),
        ("gru1.bwd", "w_z", "gru1.bwd.w_z"),
        ("gru1.bwd", "w_r", "gru1.bwd.w_r"),
        ("gru1.bwd", "w_h", "gru1.bwd.w_h"),
        ("gru1.bwd", "u_z", "gru1.bwd.u_z"),
        ("gru1.bwd", "u_r", "gru1.bwd.u_r"),
        ("gru1.bwd", "u_h", "gru1.bwd.u_h"),
        ("gru1.bwd", "b_z", "gru1.bwd.b_z"),
        ("gru1.bwd", "b_r", "gru1.bwd.b_r"),
        ("gru1.bwd", "b_h", "gru1.bwd.b_h"),
        ("gru2.fwd", "w_z", "gru2.fwd.w_z"),
        ("gru2.fwd", "w_r", "gru2.fwd.w_r"),
        ("gru2.fwd", "w_h", "gru2.fwd.w_h"),
        ("gru2.fwd", "u_z", "gru2.fwd.u_z"),
        ("gru2.fwd", "u_r", "gru2.fwd.u_r"),
        ("gru2.fwd", "u_h", "gru2.fwd.u_h"),
        ("gru2.fwd", "b_z", "gru2.fwd.b_z"),
        ("gru2.fwd", "b_r", "gru2.fwd.b_r"),
        ("gru2.fwd", "b_h", "gru2.fwd.b_h"),
        ("gru2.bwd", "w_z", "gru2.bwd.w_z"),
        ("gru2.bwd", "w_r", "gru2.bwd.w_r"),
        ("gru2.bwd", "w_h", "gru2.bwd.w_h"),
        ("gru2.bwd", "u_z", "gru2.bwd.u_z"),
        ("gru2.bwd", "u_r", "gru2.bwd.u_r"),
        ("gru2.bwd", "u_h", "gru2.bwd.u_h"),
        ("gru2.bwd", "b_z", "gru2.bwd.b_z"),
        ("gru2.bwd", "b_r", "gru2.bwd.b_r"),
        ("gru2.bwd", "b_h", "gru2.bwd.b_h"),
    ];
    NAMES
        .iter()
        .find(|(p, f, _)| *p == prefix && *f == field)
        .map(|(_, _, full)| *full)
        .expect("known gru parameter name")
}

impl<T: Scalar> ModelParams<T> {
    /// Zero-filled parameters with the shapes implied by `config`.
    pub fn with_shapes(config: &ModelConfig) -> Self {
        let g1_in = config.conv_filters;
        let g2_in = 2 * config.gru1_hidden;
        let d1_in = 2 * config.gru2_hidden;
        ModelParams {
            embedding: Tensor::zeros(&[config.vocab_size, config.embed_dim]),
            conv: ConvParams {
                kernels: Tensor::zeros(&[
                    config.conv_filters,
                    config.kernel_size,
                    config.embed_dim,
                ]),
                bias: Tensor::zeros(&[config.conv_filters]),
            },
            gru1_fwd: GruParams::zeros(g1_in, config.gru1_hidden),
            gru1_bwd: GruParams::zeros(g1_in, config.gru1_hidden),
            gru2_fwd: GruParams::zeros(g2_in, config.gru2_hidden),
            gru2_bwd: GruParams::zeros(g2_in, config.gru2_hidden),
            dense1_w: Tensor::zeros(&[d1_in, config.dense_hidden]),
            dense1_b: Tensor::zeros(&[config.dense_hidden]),
            dense2_w: Tensor::zeros(&[config.dense_hidden, 1]),
            dense2_b: Tensor::zeros(&[1]),
        }
    }

    /// Visit every tensor as (name, &mut tensor), in the fixed order used by
    /// the optimizer and the file format.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        for_each_param!(self, f);
    }

    /// Tensor names and shapes in iteration order.
    pub fn tensor_names(&mut self) -> Vec<&'static str> {
        let mut names = Vec::new();
        self.for_each_tensor_mut(|name, _| names.push(name));
        names
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_tensor_mut(|_, t| n += t.size());
        n
    }
}

/// Glorot-initialize all weights (biases zero), deterministically from `rng`.
pub fn build<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>, ConfigError> {
    config.validate()?;
    let g1_in = config.conv_filters;
    let g2_in = 2 * config.gru1_hidden;
    let d1_in = 2 * config.gru2_hidden;
    Ok(ModelParams {
        embedding: Tensor::glorot(
            &[config.vocab_size, config.embed_dim],
            config.vocab_size,
            config.embed_dim,
            rng,
        ),
        conv: ConvParams::new(config.conv_filters, config.kernel_size, config.embed_dim, rng),
        gru1_fwd: GruParams::new(g1_in, config.gru1_hidden, rng),
        gru1_bwd: GruParams::new(g1_in, config.gru1_hidden, rng),
        gru2_fwd: GruParams::new(g2_in, config.gru2_hidden, rng),
        gru2_bwd: GruParams::new(g2_in, config.gru2_hidden, rng),
        dense1_w: Tensor::glorot(&[d1_in, config.dense_hidden], d1_in, config.dense_hidden, rng),
        dense1_b: Tensor::zeros(&[config.dense_hidden]),
        dense2_w: Tensor::glorot(&[config.dense_hidden, 1], config.dense_hidden, 1, rng),
        dense2_b: Tensor::zeros(&[1]),
    })
}

/// Parameter leaves of one recorded forward pass.
pub struct NetVars {
    pub table: Var,
    pub conv_k: Var,
    pub conv_b: Var,
    pub gru1_fwd: GruVars,
    pub gru1_bwd: GruVars,
    pub gru2_fwd: GruVars,
    pub gru2_bwd: GruVars,
    pub dense1_w: Var,
    pub dense1_b: Var,
    pub dense2_w: Var,
    pub dense2_b: Var,
}

impl NetVars {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, p: &ModelParams<T>) -> Self {
        NetVars {
            table: tape.leaf(p.embedding.clone()),
            conv_k: tape.leaf(p.conv.kernels.clone()),
            conv_b: tape.leaf(p.conv.bias.clone()),
            gru1_fwd: GruVars::leaf(tape, &p.gru1_fwd),
            gru1_bwd: GruVars::leaf(tape, &p.gru1_bwd),
            gru2_fwd: GruVars::leaf(tape, &p.gru2_fwd),
            gru2_bwd: GruVars::leaf(tape, &p.gru2_bwd),
            dense1_w: tape.leaf(p.dense1_w.clone()),
            dense1_b: tape.leaf(p.dense1_b.clone()),
            dense2_w: tape.leaf(p.dense2_w.clone()),
            dense2_b: tape.leaf(p.dense2_b.clone()),
        }
    }

    /// (name, var) pairs in `ModelParams` iteration order.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let gru = |prefix: &str, g: &GruVars| {
            vec![
                (concat_name(prefix, "w_z"), g.w_z),
                (concat_name(prefix, "w_r"), g.w_r),
                (concat_name(prefix, "w_h"), g.w_h),
                (concat_name(prefix, "u_z"), g.u_z),
                (concat_name(prefix, "u_r"), g.u_r),
                (concat_name(prefix, "u_h"), g.u_h),
                (concat_name(prefix, "b_z"), g.b_z),
                (concat_name(prefix, "b_r"), g.b_r),
                (concat_name(prefix, "b_h"), g.b_h),
            ]
        };
        let mut out = vec![
            ("embedding", self.table),
            ("conv.kernels", self.conv_k),
            ("conv.bias", self.conv_b),
        ];
        out.extend(gru("gru1.fwd", &self.gru1_fwd));
        out.extend(gru("gru1.bwd", &self.gru1_bwd));
        out.extend(gru("gru2.fwd", &self.gru2_fwd));
        out.extend(gru("gru2.bwd", &self.gru2_bwd));
        out.push(("dense1.w", self.dense1_w));
        out.push(("dense1.b", self.dense1_b));
        out.push(("dense2.w", self.dense2_w));
        out.push(("dense2.b", self.dense2_b));
        out
    }
}

/// Record the full forward pass for a batch of id rows; returns per-example
/// probabilities in (0, 1) as a rank-1 value.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &NetVars,
    config: &ModelConfig,
    ids: &[u32],
    batch: usize,
    training: bool,
    rng: &mut Rng,
) -> Var {
    assert_eq!(ids.len(), batch * config.max_len, "id buffer must be batch × max_len");
    let embedded = tape.embedding(ids, batch, config.max_len, vars.table);
    let conv = conv1d_forward(tape, embedded, vars.conv_k, vars.conv_b);
    let pooled = tape.maxpool1d(conv, config.pool);
    let seq = bigru_forward(tape, pooled, &vars.gru1_fwd, &vars.gru1_bwd, config.gru1_hidden, true);
    let last = bigru_forward(tape, seq, &vars.gru2_fwd, &vars.gru2_bwd, config.gru2_hidden, false);
    let hidden = dense_forward(tape, last, vars.dense1_w, vars.dense1_b, Activation::Relu);
    let dropped = dropout(tape, hidden, config.dropout_rate, training, rng);
    let logit = dense_forward(tape, dropped, vars.dense2_w, vars.dense2_b, Activation::Sigmoid);
    tape.reshape(logit, &[batch])
}

/// Probability clip that keeps the cross-entropy finite.
pub const PROB_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy over a batch, with optional positive-class
/// weighting: −(1/B)·Σ [w·y·ln p + (1−y)·ln(1−p)], probabilities clipped to
/// [1e-7, 1−1e-7].
pub fn loss_bce<T: Scalar>(tape: &mut Tape<T>, probs: Var, targets: &[u8], pos_weight: f64) -> Var {
    let p = tape.value(probs);
    assert_eq!(p.size(), targets.len(), "probability/label lengths disagree");
    assert!(!targets.is_empty(), "loss requires at least one example");
    let lo = T::from_f64c(PROB_CLIP);
    let hi = T::from_f64c(1.0 - PROB_CLIP);
    let w = T::from_f64c(pos_weight);
    let inv_b = T::from_f64c(1.0 / targets.len() as f64);
    let mut acc = T::zero();
    for (&pi, &yi) in p.data().iter().zip(targets) {
        let pc = pi.max(lo).min(hi);
        if yi == 1 {
            acc += w * pc.ln();
        } else {
            acc += (T::one() - pc).ln();
        }
    }
    let value = Tensor::scalar(-acc * inv_b);
    let targets = targets.to_vec();
    let shape = p.shape().to_vec();
    let probs_idx = probs.index();
    tape.push_op(
        value,
        Box::new(move |vals, g, sink| {
            let g0 = g.data()[0];
            let pvals = vals[probs_idx].data().to_vec();
            let gp = sink.entry(probs, &shape);
            for ((gpi, &pi), &yi) in gp.data_mut().iter_mut().zip(&pvals).zip(&targets) {
                // The clip is flat outside its range, so clipped entries get
                // no gradient; inside it is the identity.
                if pi > lo && pi < hi {
                    let d = if yi == 1 { w / pi } else { -(T::one()) / (T::one() - pi) };
                    *gpi += -g0 * inv_b * d;
                }
            }
        }),
    )
}

/// Standard Adam step with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and bias
/// correction; `t` is the 1-based step count.
pub fn adam_update(w: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], lr: f32, t: u64) {
    assert!(t >= 1, "adam step count is 1-based");
    assert_eq!(w.len(), grad.len());
    assert_eq!(w.len(), m.len());
    assert_eq!(w.len(), v.len());
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;
    let bc1 = 1.0 - B1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - B2.powi(t.min(i32::MAX as u64) as i32);
    for i in 0..w.len() {
        m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
        v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        w[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

/// First and second Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &mut ModelParams<f32>) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor_mut(|_, t| m.push(Tensor::zeros(t.shape())));
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// Fixed-length encoded examples ready for the network.
#[derive(Clone, Debug, Default)]
pub struct EncodedSet {
    pub max_len: usize,
    ids: Vec<u32>,
    labels: Vec<u8>,
}

impl EncodedSet {
    pub fn new(max_len: usize) -> Self {
        EncodedSet { max_len, ids: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, row: &[u32], label: u8) {
        assert_eq!(row.len(), self.max_len, "row length must equal max_len");
        self.ids.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Preprocess and encode raw records against a vocabulary.
    pub fn from_records<'a>(
        records: impl Iterator<Item = &'a RawTweet>,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Self {
        let mut set = EncodedSet::new(max_len);
        for r in records {
            let tokens = text::preprocess(&r.text);
            set.push(&text::encode(&tokens, vocab, max_len), r.label);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }

    fn gather(&self, idx: &[usize]) -> (Vec<u32>, Vec<u8>) {
        let mut ids = Vec::with_capacity(idx.len() * self.max_len);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            ids.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (ids, labels)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; try a lower learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Run one forward pass per batch (no dropout) and return the mean loss and
/// per-example probabilities.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    set: &EncodedSet,
) -> (f64, Vec<f64>) {
    assert!(!set.is_empty(), "evaluate requires a non-empty set");
    let mut probs = Vec::with_capacity(set.len());
    let mut loss_sum = 0.0f64;
    let mut rng = Rng::new(0); // unused: dropout is off outside training
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(config.batch_size) {
        let (ids, labels) = set.gather(chunk);
        let mut tape: Tape<f32> = Tape::new();
        let vars = NetVars::leaf(&mut tape, params);
        let out = forward_graph(&mut tape, &vars, config, &ids, chunk.len(), false, &mut rng);
        let loss = loss_bce(&mut tape, out, &labels, config.pos_weight);
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        probs.extend(tape.value(out).data().iter().map(|&p| p as f64));
    }
    (loss_sum / set.len() as f64, probs)
}

fn threshold_labels(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Train with minibatch Adam; returns one [`EpochRecord`] per epoch. The
/// validation set may be empty, in which case the records carry no
/// validation fields. Aborts with a diagnostic if the loss leaves the reals.
pub fn train(
    params: &mut ModelParams<f32>,
    config: &ModelConfig,
    train_set: &EncodedSet,
    val_set: &EncodedSet,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    // One stream drives shuffling and dropout; forked from the seed so it is
    // independent of the init stream used by `build`.
    let mut run_rng = Rng::new(config.seed).fork(0x7261_696e);
    let mut adam = AdamState::new(params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let lr = config.learning_rate as f32;

    for epoch in 1..=config.epochs {
        run_rng.shuffle(&mut order);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (ids, labels) = train_set.gather(chunk);
            let mut tape: Tape<f32> = Tape::new();
            let vars = NetVars::leaf(&mut tape, params);
            let out =
                forward_graph(&mut tape, &vars, config, &ids, chunk.len(), true, &mut run_rng);
            let loss = loss_bce(&mut tape, out, &labels, config.pos_weight);
            if !tape.value(loss).item().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            tape.backward(loss);
            adam.t += 1;
            let named = vars.named();
            let mut slot = 0;
            params.for_each_tensor_mut(|name, tensor| {
                let (var_name, var) = named[slot];
                debug_assert_eq!(name, var_name, "parameter order drifted");
                if let Some(g) = tape.grad(var) {
                    adam_update(
                        tensor.data_mut(),
                        g.data(),
                        adam.m[slot].data_mut(),
                        adam.v[slot].data_mut(),
                        lr,
                        adam.t,
                    );
                }
                slot += 1;
            });
        }

        let (train_loss, train_probs) = evaluate(params, config, train_set);
        let train_preds = threshold_labels(&train_probs, 0.5);
        let train_cm = eval::confusion(&train_preds, train_set.labels());
        let train_acc = eval::metrics(&train_cm).accuracy;

        let mut record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss: None,
            val_acc: None,
            val_recall: None,
            val_auc: None,
        };
        if !val_set.is_empty() {
            let (val_loss, val_probs) = evaluate(params, config, val_set);
            let val_preds = threshold_labels(&val_probs, 0.5);
            let cm = eval::confusion(&val_preds, val_set.labels());
            let m = eval::metrics(&cm);
            record.val_loss = Some(val_loss);
            record.val_acc = Some(m.accuracy);
            record.val_recall = Some(m.recall);
            record.val_auc = eval::roc_auc(&val_probs, val_set.labels()).ok();
        }
        history.push(record);
    }
    Ok(history)
}

/// A trained classifier bundled with everything inference needs.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub vocab: Vocabulary,
}

/// Outcome of classifying one text.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    /// 1 iff probability ≥ threshold.
    pub label: u8,
}

impl TrainedModel {
    /// Probabilities for pre-encoded id rows.
    pub fn predict_encoded(&self, ids: &[u32], batch: usize) -> Vec<f64> {
        let mut rng = Rng::new(0);
        let mut tape: Tape<f32> = Tape::new();
        let vars = NetVars::leaf(&mut tape, &self.params);
        let out = forward_graph(&mut tape, &vars, &self.config, ids, batch, false, &mut rng);
        tape.value(out).data().iter().map(|&p| p as f64).collect()
    }

    /// Clean → tokenize → drop stopwords → encode → forward. Empty text
    /// encodes to all padding and still yields a probability.
    pub fn predict_text(&self, raw: &str, threshold: f64) -> Prediction {
        let tokens = text::preprocess(raw);
        let ids = text::encode(&tokens, &self.vocab, self.config.max_len);
        let probability = self.predict_encoded(&ids, 1)[0];
        Prediction { probability, label: u8::from(probability >= threshold) }
    }
}

// ---- serialization ----

const MAGIC: &[u8; 4] = b"BGCN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file: bad magic")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file checksum mismatch: file is corrupt")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Malformed(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelIoError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn push_field(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serialize a trained model: magic, format version, total file length, a
/// field-tagged config block (vocabulary included), named tensor records,
/// and a trailing CRC32 of everything before it. Little-endian throughout.
/// The stored length separates truncation from in-place corruption on load.
pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes()); // total length, patched below

    let c = &model.config;
    let u32f = |v: usize| (v as u32).to_le_bytes().to_vec();
    let fields: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (b"vocs", u32f(c.vocab_size)),
        (b"maxl", u32f(c.max_len)),
        (b"embd", u32f(c.embed_dim)),
        (b"cvfl", u32f(c.conv_filters)),
        (b"kern", u32f(c.kernel_size)),
        (b"pool", u32f(c.pool)),
        (b"gru1", u32f(c.gru1_hidden)),
        (b"gru2", u32f(c.gru2_hidden)),
        (b"dens", u32f(c.dense_hidden)),
        (b"drop", c.dropout_rate.to_le_bytes().to_vec()),
        (b"lrnr", c.learning_rate.to_le_bytes().to_vec()),
        (b"btch", u32f(c.batch_size)),
        (b"epoc", u32f(c.epochs)),
        (b"posw", c.pos_weight.to_le_bytes().to_vec()),
        (b"seed", c.seed.to_le_bytes().to_vec()),
        (b"vocb", model.vocab.to_tsv().into_bytes()),
    ];
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (tag, payload) in &fields {
        push_field(&mut out, tag, payload);
    }

    let mut params = model.params.clone();
    let mut records: Vec<(&'static str, Vec<usize>, Vec<f32>)> = Vec::new();
    params.for_each_tensor_mut(|name, t| {
        records.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let total = (out.len() + 4) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn parse_body(r: &mut Reader) -> Result<TrainedModel, ModelIoError> {
    let n_fields = r.u32()?;
    if n_fields > 4096 {
        return Err(ModelIoError::Malformed(format!("implausible field count {}", n_fields)));
    }
    let mut u32_fields: std::collections::HashMap<[u8; 4], u32> = Default::default();
    let mut f64_fields: std::collections::HashMap<[u8; 4], f64> = Default::default();
    let mut seed = None;
    let mut vocab_text = None;
    for _ in 0..n_fields {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u32()? as usize;
        match &tag {
            b"drop" | b"lrnr" | b"posw" => {
                if len != 8 {
                    return Err(ModelIoError::Malformed("bad f64 field length".into()));
                }
                f64_fields.insert(tag, r.f64()?);
            }
            b"seed" => {
                if len != 8 {
                    return Err(ModelIoError::Malformed("bad seed field length".into()));
                }
                seed = Some(r.u64()?);
            }
            b"vocb" => {
                let bytes = r.take(len)?;
                let text = std::str::from_utf8(bytes)
                    .map_err(|_| ModelIoError::Malformed("vocabulary is not UTF-8".into()))?;
                vocab_text = Some(text.to_owned());
            }
            _ => {
                if len == 4 {
                    u32_fields.insert(tag, r.u32()?);
                } else {
                    // Unknown field: skip its payload.
                    r.take(len)?;
                }
            }
        }
    }

    let need_u32 = |tag: &[u8; 4]| -> Result<usize, ModelIoError> {
        u32_fields.get(tag).map(|&v| v as usize).ok_or_else(|| {
            ModelIoError::Malformed(format!(
                "missing config field {:?}",
                String::from_utf8_lossy(tag)
            ))
        })
    };
    let need_f64 = |tag: &[u8; 4]| -> Result<f64, ModelIoError> {
        f64_fields.get(tag).copied().ok_or_else(|| {
            ModelIoError::Malformed(format!(
                "missing config field {:?}",
                String::from_utf8_lossy(tag)
            ))
        })
    };

    let config = ModelConfig {
        vocab_size: need_u32(b"vocs")?,
        max_len: need_u32(b"maxl")?,
        embed_dim: need_u32(b"embd")?,
        conv_filters: need_u32(b"cvfl")?,
        kernel_size: need_u32(b"kern")?,
        pool: need_u32(b"pool")?,
        gru1_hidden: need_u32(b"gru1")?,
        gru2_hidden: need_u32(b"gru2")?,
        dense_hidden: need_u32(b"dens")?,
        dropout_rate: need_f64(b"drop")?,
        learning_rate: need_f64(b"lrnr")?,
        batch_size: need_u32(b"btch")?,
        epochs: need_u32(b"epoc")?,
        pos_weight: need_f64(b"posw")?,
        seed: seed.ok_or_else(|| ModelIoError::Malformed("missing config field seed".into()))?,
    };
    config.validate().map_err(|e| ModelIoError::Malformed(e.to_string()))?;
    let vocab_text =
        vocab_text.ok_or_else(|| ModelIoError::Malformed("missing vocabulary".into()))?;
    let vocab = Vocabulary::from_tsv(&vocab_text)
        .map_err(|e| ModelIoError::Malformed(format!("vocabulary: {}", e)))?;
    if vocab.len() != config.vocab_size {
        return Err(ModelIoError::Malformed(format!(
            "vocabulary has {} entries but config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let n_tensors = r.u32()? as usize;
    let mut params = ModelParams::<f32>::with_shapes(&config);
    let mut expected: Vec<&'static str> = params.tensor_names();
    if n_tensors != expected.len() {
        return Err(ModelIoError::Malformed(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            n_tensors
        )));
    }
    for slot in 0..n_tensors {
        let name_len = r.u32()? as usize;
        if name_len > 256 {
            return Err(ModelIoError::Malformed("implausible tensor name length".into()));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelIoError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(ModelIoError::Malformed("implausible tensor rank".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(count * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if expected[slot] != name {
            return Err(ModelIoError::Malformed(format!(
                "tensor {} out of order: expected {:?}, found {:?}",
                slot, expected[slot], name
            )));
        }
        expected[slot] = "";
        let mut placed = false;
        params.for_each_tensor_mut(|n, t| {
            if n == name {
                if t.shape() != shape.as_slice() {
                    // Shape errors surface after the loop via `placed`.
                    return;
                }
                *t = Tensor::from_vec(&shape, data.clone());
                placed = true;
            }
        });
        if !placed {
            return Err(ModelIoError::Malformed(format!(
                "tensor {:?} has an unexpected shape {:?}",
                name, shape
            )));
        }
    }

    Ok(TrainedModel { config, params, vocab })
}

/// Parse model bytes, verifying magic, version, stored length, and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel, ModelIoError> {
    if bytes.len() < 20 {
        return Err(ModelIoError::Truncated);
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion(version));
    }
    let stored_total = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if (bytes.len() as u64) < stored_total {
        return Err(ModelIoError::Truncated);
    }
    let body_end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored_crc {
        return Err(ModelIoError::ChecksumMismatch);
    }
    let mut reader = Reader { buf: &bytes[..body_end], pos: 16 };
    parse_body(&mut reader)
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<(), ModelIoError> {
    std::fs::write(path, to_bytes(model))
        .map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<TrainedModel, ModelIoError> {
    let bytes = std::fs::read(path)
        .map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
