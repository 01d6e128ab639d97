use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CaptionDataset, CaptionSample, ModelError};
use crate::lstm::{self, init_params_with, uniform_fan_in, LstmParams, LstmState, StepCache};
use crate::text::{Vocabulary, END_ID, RESERVED, START_ID};

/// Shape-defining hyperparameters of a caption model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub init_feat_dim: usize,
    pub persist_feat_dim: usize,
    /// When false the LSTM biases are zero and never updated.
    pub use_bias: bool,
    pub max_caption_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1");
        }
        if self.vocab_size < RESERVED {
            return bad("vocabulary must hold the reserved tokens");
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len must be at least 1");
        }
        Ok(())
    }
}

/// Trainable tensors. Also used, zero-initialized, as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub lstm: LstmParams,
    /// Word embeddings, `vocab × embed`.
    pub embed: Array2<f64>,
    /// Output projection, `vocab × hidden`.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    /// Init feature projection into the word-input space, `embed × init_dim`.
    pub f_init: Array2<f64>,
}

/// Names of the LSTM bias tensors inside [`Weights::tensors`].
pub(crate) const LSTM_BIASES: [&str; 4] = ["b_i", "b_o", "b_f", "b_m"];

impl Weights {
    pub fn zeros_like(&self) -> Self {
        Weights {
            lstm: self.lstm.zeros_like(),
            embed: Array2::zeros(self.embed.raw_dim()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
            f_init: Array2::zeros(self.f_init.raw_dim()),
        }
    }

    /// `(name, shape, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = self.lstm.tensors();
        for (name, arr) in [("E", &self.embed), ("W_d", &self.w_out), ("F_init", &self.f_init)] {
            out.push((name.to_string(), arr.shape().to_vec(), arr.as_slice().expect("standard layout")));
        }
        out.push(("b_d".to_string(), self.b_out.shape().to_vec(), self.b_out.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.lstm.tensors_mut();
        out.push(("E".into(), self.embed.as_slice_mut().expect("standard layout")));
        out.push(("W_d".into(), self.w_out.as_slice_mut().expect("standard layout")));
        out.push(("F_init".into(), self.f_init.as_slice_mut().expect("standard layout")));
        out.push(("b_d".into(), self.b_out.as_slice_mut().expect("standard layout")));
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub weights: Weights,
    pub vocab: Vocabulary,
    pub config: ModelConfig,
}

impl CaptionModel {
    /// Seeded random initialization. Output bias starts at zero.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, vocab, &mut rng)
    }

    pub(crate) fn with_rng(config: ModelConfig, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::DimMismatch {
                what: "vocabulary size",
                expected: config.vocab_size,
                got: vocab.len(),
            });
        }
        let mut lstm = init_params_with(config.embed_dim, config.hidden, config.persist_feat_dim, rng)?;
        if !config.use_bias {
            for (name, t) in lstm.tensors_mut() {
                if LSTM_BIASES.contains(&name.as_str()) {
                    t.fill(0.0);
                }
            }
        }
        let embed = uniform_fan_in(config.vocab_size, config.embed_dim, rng);
        let w_out = uniform_fan_in(config.vocab_size, config.hidden, rng);
        let f_init = uniform_fan_in(config.embed_dim, config.init_feat_dim, rng);
        Ok(CaptionModel {
            weights: Weights {
                lstm,
                embed,
                w_out,
                b_out: Array1::zeros(config.vocab_size),
                f_init,
            },
            vocab,
            config,
        })
    }

    /// Builds a model with all-zero weights.
    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(CaptionModel {
            weights: Weights {
                lstm: LstmParams::zeros(config.embed_dim, config.hidden, config.persist_feat_dim)?,
                embed: Array2::zeros((config.vocab_size, config.embed_dim)),
                w_out: Array2::zeros((config.vocab_size, config.hidden)),
                b_out: Array1::zeros(config.vocab_size),
                f_init: Array2::zeros((config.embed_dim, config.init_feat_dim)),
            },
            vocab,
            config,
        })
    }

    /// Checks that weights, vocabulary and config agree.
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = &self.config;
        c.validate()?;
        let w = &self.weights;
        let checks = [
            ("vocabulary size", c.vocab_size, self.vocab.len()),
            ("lstm input", c.embed_dim, w.lstm.input_dim()),
            ("lstm hidden", c.hidden, w.lstm.hidden()),
            ("lstm persistent", c.persist_feat_dim, w.lstm.persist_dim()),
            ("E rows", c.vocab_size, w.embed.nrows()),
            ("E cols", c.embed_dim, w.embed.ncols()),
            ("W_d rows", c.vocab_size, w.w_out.nrows()),
            ("W_d cols", c.hidden, w.w_out.ncols()),
            ("b_d", c.vocab_size, w.b_out.len()),
            ("F_init rows", c.embed_dim, w.f_init.nrows()),
            ("F_init cols", c.init_feat_dim, w.f_init.ncols()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(ModelError::DimMismatch { what, expected, got });
            }
        }
        if !w.is_finite() {
            return Err(ModelError::InvalidConfig("non-finite weight".into()));
        }
        Ok(())
    }

    /// Persistent input for a step: the supplied feature or zeros.
    pub(crate) fn persist_input(&self, persist: Option<&Array1<f64>>) -> Result<Array1<f64>, ModelError> {
        let dim = self.config.persist_feat_dim;
        match persist {
            Some(p) if p.len() != dim => Err(ModelError::DimMismatch {
                what: "persistent feature",
                expected: dim,
                got: p.len(),
            }),
            Some(p) => Ok(p.clone()),
            None => Ok(Array1::zeros(dim)),
        }
    }

    pub(crate) fn init_input(&self, init_feat: &Array1<f64>) -> Result<Array1<f64>, ModelError> {
        if init_feat.len() != self.config.init_feat_dim {
            return Err(ModelError::DimMismatch {
                what: "init feature",
                expected: self.config.init_feat_dim,
                got: init_feat.len(),
            });
        }
        Ok(self.weights.f_init.dot(init_feat))
    }

    /// Runs the step-0 feature input and returns the resulting state.
    pub(crate) fn prime(&self, init_feat: &Array1<f64>, p: &Array1<f64>) -> Result<(LstmState, StepCache), ModelError> {
        let x0 = self.init_input(init_feat)?;
        Ok(lstm::lstm_step_cached(&self.weights.lstm, &LstmState::zeros(self.config.hidden), &x0, p)?)
    }

    pub(crate) fn logits(&self, y: &Array1<f64>) -> Array1<f64> {
        let mut z = self.weights.w_out.dot(y);
        z += &self.weights.b_out;
        z
    }
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

/// Everything recorded by [`forward_sequence`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: f64,
    /// `-log p(target)` at each predicted step.
    pub step_nll: Vec<f64>,
    /// Word distribution at each predicted step (words then END).
    pub distributions: Vec<Array1<f64>>,
    /// `cells[0]` is the init-feature step; `cells[t]` consumed `inputs[t - 1]`.
    cells: Vec<StepCache>,
    outputs: Vec<Array1<f64>>,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    init_feat: Array1<f64>,
}

impl ForwardPass {
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

fn check_sample(model: &CaptionModel, sample: &CaptionSample) -> Result<(), ModelError> {
    let size = model.config.vocab_size;
    if let Some(&id) = sample.tokens.iter().find(|&&id| id >= size) {
        return Err(ModelError::TokenOutOfRange { id, size });
    }
    if sample.init_feat.iter().any(|v| !v.is_finite()) {
        return Err(lstm::LstmError::NonFinite("init feature").into());
    }
    Ok(())
}

/// Teacher-forced pass over one caption, returning the summed negative log
/// likelihood of every word and the closing END.
pub fn forward_sequence(model: &CaptionModel, sample: &CaptionSample) -> Result<ForwardPass, ModelError> {
    check_sample(model, sample)?;
    let p = model.persist_input(sample.persist_feat.as_ref())?;
    let (mut state, first) = model.prime(&sample.init_feat, &p)?;

    let mut inputs = Vec::with_capacity(sample.tokens.len() + 1);
    inputs.push(START_ID);
    inputs.extend_from_slice(&sample.tokens);
    let mut targets = sample.tokens.clone();
    targets.push(END_ID);

    let n = targets.len();
    let mut cells = Vec::with_capacity(n + 1);
    let mut outputs = Vec::with_capacity(n);
    let mut distributions = Vec::with_capacity(n);
    cells.push(first);
    let mut loss = 0.0;
    let mut step_nll = Vec::with_capacity(n);
    for (&input, &target) in inputs.iter().zip(&targets) {
        let x = model.weights.embed.row(input).to_owned();
        let (next, cache) = lstm::lstm_step_cached(&model.weights.lstm, &state, &x, &p)?;
        let logp = log_softmax(&model.logits(&next.y));
        loss -= logp[target];
        step_nll.push(-logp[target]);
        distributions.push(logp.mapv(f64::exp));
        outputs.push(next.y.clone());
        cells.push(cache);
        state = next;
    }

    Ok(ForwardPass {
        loss,
        step_nll,
        distributions,
        cells,
        outputs,
        inputs,
        targets,
        init_feat: sample.init_feat.clone(),
    })
}

/// Exact gradient of the sequence loss with respect to every weight.
pub fn backward_sequence(model: &CaptionModel, sample: &CaptionSample, pass: &ForwardPass) -> Result<Weights, ModelError> {
    let mut grads = model.weights.zeros_like();
    accumulate_backward(model, sample, pass, &mut grads)?;
    Ok(grads)
}

pub(crate) fn accumulate_backward(
    model: &CaptionModel,
    sample: &CaptionSample,
    pass: &ForwardPass,
    grads: &mut Weights,
) -> Result<(), ModelError> {
    let n = sample.tokens.len() + 1;
    if pass.targets.len() != n
        || pass.targets[..n - 1] != sample.tokens[..]
        || pass.cells.len() != n + 1
        || pass.distributions.len() != n
    {
        return Err(ModelError::CacheMismatch("caption differs from the forward pass"));
    }
    if pass.init_feat != sample.init_feat {
        return Err(ModelError::CacheMismatch("init feature differs from the forward pass"));
    }
    let w = &model.weights;
    let h = model.config.hidden;
    let mut d_y = Array1::zeros(h);
    let mut d_m = Array1::zeros(h);

    for t in (0..n).rev() {
        let mut d_logits = pass.distributions[t].clone();
        d_logits[pass.targets[t]] -= 1.0;
        general_mat_mul(
            1.0,
            &d_logits.view().insert_axis(Axis(1)),
            &pass.outputs[t].view().insert_axis(Axis(0)),
            1.0,
            &mut grads.w_out,
        );
        grads.b_out += &d_logits;
        d_y += &w.w_out.t().dot(&d_logits);

        let back = lstm::accumulate_step_backward(&w.lstm, &pass.cells[t + 1], d_y.view(), d_m.view(), &mut grads.lstm)?;
        let mut row = grads.embed.row_mut(pass.inputs[t]);
        row += &back.d_x;
        d_y = back.d_prev.y;
        d_m = back.d_prev.m;
    }

    let back = lstm::accumulate_step_backward(&w.lstm, &pass.cells[0], d_y.view(), d_m.view(), &mut grads.lstm)?;
    general_mat_mul(
        1.0,
        &back.d_x.view().insert_axis(Axis(1)),
        &pass.init_feat.view().insert_axis(Axis(0)),
        1.0,
        &mut grads.f_init,
    );
    Ok(())
}

/// `exp(total NLL / predicted tokens)`, counting each caption's END.
///
/// The mean is kept as a running mean over tokens, which stays exact when
/// every token has the same NLL (a uniform model gives exactly `ln V`).
pub fn perplexity(model: &CaptionModel, dataset: &CaptionDataset) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut mean = 0.0;
    let mut count = 0usize;
    for s in &dataset.samples {
        for nll in forward_sequence(model, s)?.step_nll {
            count += 1;
            mean += (nll - mean) / count as f64;
        }
    }
    Ok(mean.exp())
}
