use thiserror::Error;

use crate::captioner::ModelError;
use crate::features::FeatureError;
use crate::io::IoError;
use crate::lstm::LstmError;
use crate::metrics::MetricError;
use crate::text::TextError;

/// Any failure in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
