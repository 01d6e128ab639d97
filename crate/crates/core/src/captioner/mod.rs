//! Sequence-level caption generator built on the LSTM cell.
//!
//! A caption is produced by first feeding the projected init feature through
//! the cell once, then START and the words of the caption. The persistent
//! feature is supplied at every step. The output at each word step goes
//! through a softmax over the vocabulary.

mod decode;
mod gradcheck;
mod model;
mod train;

pub use decode::{beam_decode, greedy_decode, BeamHypothesis, Decoded};
pub use gradcheck::{grad_check, grad_check_model, relative_error, GradCheckConfig, GradCheckReport, DEFAULT_EPS};
pub use model::{
    backward_sequence, forward_sequence, perplexity, CaptionModel, ForwardPass, ModelConfig, Weights,
};
pub use train::{train, EpochLog, OptimizerKind, TrainConfig, TrainLog};

use ndarray::Array1;
use thiserror::Error;

use crate::lstm::LstmError;
use crate::text::Vocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("forward cache does not match: {0}")]
    CacheMismatch(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, update {update}")]
    NonFiniteLoss { epoch: usize, update: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("max length must be at least 1")]
    ZeroMaxLen,
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub clip_id: String,
    pub init_feat: Array1<f64>,
    pub persist_feat: Option<Array1<f64>>,
    /// Word ids, without START or END.
    pub tokens: Vec<usize>,
}

/// Samples sharing one vocabulary and feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDataset {
    pub samples: Vec<CaptionSample>,
    pub vocab: Vocabulary,
    pub init_dim: usize,
    pub persist_dim: usize,
}

impl CaptionDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
pub(crate) fn model_for_tests(seed: u64) -> CaptionModel {
    let vocab = model::tests::vocab_of(3);
    CaptionModel::new(model::tests::config(&vocab, 3, 4, 2, 1), vocab, seed).expect("valid config")
}
