use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{backward_sequence, forward_sequence};
use super::{CaptionModel, CaptionSample, ModelConfig, ModelError};
use crate::text::{build_vocab, RESERVED};

/// Below this magnitude on both sides the absolute difference is used.
pub const ABS_FALLBACK: f64 = 1e-8;

/// Step for the fourth-order stencil. Loss roundoff is about 1e-15, so much
/// smaller steps swamp the recurrent-weight gradients (often 1e-7) in noise.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Dims of the random model and caption used by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Ordinary words, not counting START, END and UNK.
    pub words: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub init_dim: usize,
    pub persist_dim: usize,
    pub caption_len: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            words: 6,
            embed_dim: 4,
            hidden: 5,
            init_dim: 3,
            persist_dim: 2,
            caption_len: 3,
        }
    }
}

impl GradCheckConfig {
    /// A random tiny configuration with the given persistent width.
    pub fn random(rng: &mut impl Rng, persist_dim: usize) -> Self {
        GradCheckConfig {
            words: rng.random_range(1..=20 - RESERVED),
            embed_dim: rng.random_range(1..=6),
            hidden: rng.random_range(1..=16),
            init_dim: rng.random_range(1..=5),
            persist_dim,
            caption_len: rng.random_range(0..=4),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.hidden > 16 {
            return Err(ModelError::InvalidConfig("grad check needs 1 ≤ hidden ≤ 16".into()));
        }
        if self.words + RESERVED > 20 {
            return Err(ModelError::InvalidConfig("grad check needs a vocabulary of at most 20".into()));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::InvalidConfig("embed_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `tensor[index]` with the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute fallback when both values are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FALLBACK {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares [`backward_sequence`] with central differences on a random model.
pub fn grad_check(config: &GradCheckConfig, seed: u64, eps: f64) -> Result<GradCheckReport, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..config.words).map(|i| format!("w{i}")).collect();
    let vocab = build_vocab(&[words], 1).expect("min_count 1");
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: config.embed_dim,
        hidden: config.hidden,
        init_feat_dim: config.init_dim,
        persist_feat_dim: config.persist_dim,
        use_bias: true,
        max_caption_len: config.caption_len + 1,
    };
    let mut model = CaptionModel::with_rng(model_config, vocab, &mut rng)?;
    // move every tensor off its initial pattern, biases and b_d included
    for (_, t) in model.weights.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let random = |n: usize, rng: &mut ChaCha8Rng| Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
    let sample = CaptionSample {
        clip_id: "gradcheck".into(),
        init_feat: random(config.init_dim, &mut rng),
        persist_feat: (config.persist_dim > 0).then(|| random(config.persist_dim, &mut rng)),
        tokens: (0..config.caption_len)
            .map(|_| rng.random_range(RESERVED..RESERVED + config.words))
            .collect(),
    };
    grad_check_model(&model, &sample, eps)
}

/// Finite-difference check of every parameter of `model` on one sample.
///
/// Uses the five-point central stencil
/// `(L(w-2h) - 8 L(w-h) + 8 L(w+h) - L(w+2h)) / 12h`.
pub fn grad_check_model(model: &CaptionModel, sample: &CaptionSample, eps: f64) -> Result<GradCheckReport, ModelError> {
    if !(eps > 0.0) {
        return Err(ModelError::InvalidConfig("eps must be positive".into()));
    }
    let pass = forward_sequence(model, sample)?;
    let grads = backward_sequence(model, sample, &pass)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(name, _, data)| (name, data.to_vec()))
        .collect();

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (t, (name, values)) in analytic.iter().enumerate() {
        for (k, &a) in values.iter().enumerate() {
            let original = probe.weights.tensors_mut()[t].1[k];
            let mut loss_at = |offset: f64| -> Result<f64, ModelError> {
                probe.weights.tensors_mut()[t].1[k] = original + offset;
                forward_sequence(&probe, sample).map(|p| p.loss)
            };
            let numeric =
                (loss_at(-2.0 * eps)? - 8.0 * loss_at(-eps)? + 8.0 * loss_at(eps)? - loss_at(2.0 * eps)?) / (12.0 * eps);
            probe.weights.tensors_mut()[t].1[k] = original;

            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::model::tests::{config, vocab_of};
    use crate::text::END_ID;

    #[test]
    fn default_config_passes() {
        let r = grad_check(&GradCheckConfig::default(), 1, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 100);
    }

    #[test]
    fn step_size_is_stable() {
        let a = grad_check(&GradCheckConfig::default(), 2, 1e-5).unwrap().max_rel_error;
        let b = grad_check(&GradCheckConfig::default(), 2, 1e-6).unwrap().max_rel_error;
        let ratio = a.max(b) / a.min(b).max(f64::MIN_POSITIVE);
        assert!(ratio <= 10.0, "{a} vs {b}");
    }

    #[test]
    fn degenerate_gradients_use_absolute_error() {
        assert!((relative_error(1e-10, 3e-10) - 2e-10).abs() < 1e-24);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        // zero-loss model: all gradients vanish and the fallback keeps the result defined
        let vocab = vocab_of(1);
        let mut model = CaptionModel::zeros(config(&vocab, 2, 2, 1, 0), vocab).unwrap();
        model.weights.b_out[END_ID] = 60.0;
        let sample = CaptionSample { clip_id: "z".into(), init_feat: Array1::from(vec![0.5]), persist_feat: None, tokens: vec![] };
        let r = grad_check_model(&model, &sample, 1e-5).unwrap();
        assert!(r.max_rel_error.is_finite());
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_oversized_configs() {
        let big = GradCheckConfig { hidden: 17, ..GradCheckConfig::default() };
        assert!(grad_check(&big, 0, 1e-5).is_err());
        let wide = GradCheckConfig { words: 18, ..GradCheckConfig::default() };
        assert!(grad_check(&wide, 0, 1e-5).is_err());
        assert!(grad_check(&GradCheckConfig::default(), 0, 0.0).is_err());
    }
}
