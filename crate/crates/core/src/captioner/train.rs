use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{accumulate_backward, forward_sequence, perplexity, LSTM_BIASES};
use crate::lstm::LstmError;
use super::{CaptionDataset, CaptionModel, CaptionSample, ModelConfig, ModelError, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain SGD with heavy-ball momentum.
    Sgd,
    /// RMSProp; momentum is ignored.
    RmsProp,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or rmsprop)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub rms_decay: f64,
    pub max_caption_len: usize,
    pub use_bias: bool,
    /// Stop after this many parameter updates, even mid-epoch.
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 256,
            embed_dim: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip_norm: 5.0,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            rms_decay: 0.99,
            max_caption_len: 30,
            use_bias: true,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("gradient clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad("RMSProp decay must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.max_caption_len == 0 {
            return bad("max caption length must be at least 1");
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub updates: usize,
    /// Mean per-caption loss over the batches of this epoch.
    pub mean_loss: f64,
    /// Training-set perplexity after the epoch.
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub updates: usize,
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(
                f,
                "epoch {} updates {} loss {:.6} perplexity {:.6}",
                e.epoch, e.updates, e.mean_loss, e.perplexity
            )?;
        }
        Ok(())
    }
}

const RMS_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    decay: f64,
    state: Weights,
    frozen: Vec<bool>,
}

impl Optimizer {
    fn new(config: &TrainConfig, weights: &Weights) -> Self {
        let frozen = weights
            .tensors()
            .iter()
            .map(|(name, _, _)| !config.use_bias && LSTM_BIASES.contains(&name.as_str()))
            .collect();
        Optimizer {
            kind: config.optimizer,
            lr: config.learning_rate,
            momentum: config.momentum,
            decay: config.rms_decay,
            state: weights.zeros_like(),
            frozen,
        }
    }

    fn apply(&mut self, weights: &mut Weights, grads: &Weights) {
        let params = weights.tensors_mut();
        let state = self.state.tensors_mut();
        let grads = grads.tensors();
        for ((((_, w), (_, s)), (_, _, g)), &frozen) in params.into_iter().zip(state).zip(grads).zip(&self.frozen) {
            if frozen {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, v), g) in w.iter_mut().zip(s.iter_mut()).zip(g) {
                        *v = self.momentum * *v - self.lr * g;
                        *w += *v;
                    }
                }
                OptimizerKind::RmsProp => {
                    for ((w, c), g) in w.iter_mut().zip(s.iter_mut()).zip(g) {
                        *c = self.decay * *c + (1.0 - self.decay) * g * g;
                        *w -= self.lr * g / (c.sqrt() + RMS_EPS);
                    }
                }
            }
        }
    }
}

fn truncated(sample: &CaptionSample, max_len: usize) -> CaptionSample {
    let mut s = sample.clone();
    // room for END
    s.tokens.truncate(max_len - 1);
    s
}

/// Minibatch training of a fresh model on `dataset`.
///
/// Each epoch visits the samples in a seeded shuffled order. Batch gradients
/// are averaged, clipped to `grad_clip_norm` in global L2 norm, then applied.
/// Captions longer than `max_caption_len - 1` words are truncated.
pub fn train(dataset: &CaptionDataset, config: &TrainConfig) -> Result<(CaptionModel, TrainLog), ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let model_config = ModelConfig {
        vocab_size: dataset.vocab.len(),
        embed_dim: config.embed_dim,
        hidden: config.hidden,
        init_feat_dim: dataset.init_dim,
        persist_feat_dim: dataset.persist_dim,
        use_bias: config.use_bias,
        max_caption_len: config.max_caption_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CaptionModel::with_rng(model_config, dataset.vocab.clone(), &mut rng)?;

    let samples: Vec<CaptionSample> = dataset
        .samples
        .iter()
        .map(|s| truncated(s, config.max_caption_len))
        .collect();
    let train_set = CaptionDataset {
        samples,
        vocab: dataset.vocab.clone(),
        init_dim: dataset.init_dim,
        persist_dim: dataset.persist_dim,
    };

    let mut optimizer = Optimizer::new(config, &model.weights);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let budget = config.max_updates.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=config.epochs {
        if log.updates >= budget {
            break;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.weights.zeros_like();
            for &i in batch {
                let sample = &train_set.samples[i];
                let diverged = ModelError::NonFiniteLoss { epoch, update: log.updates };
                let pass = match forward_sequence(&model, sample) {
                    Err(ModelError::Lstm(LstmError::NonFinite(_))) => return Err(diverged),
                    r => r?,
                };
                if !pass.loss.is_finite() {
                    return Err(diverged);
                }
                loss_sum += pass.loss;
                accumulate_backward(&model, sample, &pass, &mut grads)?;
            }
            seen += batch.len();
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.norm();
            if norm > config.grad_clip_norm {
                grads.scale(config.grad_clip_norm / norm);
            }
            optimizer.apply(&mut model.weights, &grads);
            log.updates += 1;
            if !model.weights.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, update: log.updates });
            }
            if log.updates >= budget {
                log.epochs.push(epoch_entry(&model, &train_set, epoch, log.updates, loss_sum / seen as f64)?);
                break 'epochs;
            }
        }
        log.epochs.push(epoch_entry(&model, &train_set, epoch, log.updates, loss_sum / seen as f64)?);
    }
    Ok((model, log))
}

fn epoch_entry(
    model: &CaptionModel,
    data: &CaptionDataset,
    epoch: usize,
    updates: usize,
    mean_loss: f64,
) -> Result<EpochLog, ModelError> {
    let ppl = match perplexity(model, data) {
        Err(ModelError::Lstm(LstmError::NonFinite(_))) => f64::NAN,
        r => r?,
    };
    if !ppl.is_finite() {
        return Err(ModelError::NonFiniteLoss { epoch, update: updates });
    }
    Ok(EpochLog {
        epoch,
        updates,
        mean_loss,
        perplexity: ppl,
    })
}
