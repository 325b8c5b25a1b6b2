//! The stochastic segmenter contract and the built-in slice network.

mod checkpoint;
mod layers;
mod loss;
mod net;
mod train;

use thiserror::Error;

use crate::volume::{Volume, VolumeError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use loss::{
    binary_cross_entropy, composite_loss, dice_score, soft_dice_loss, LossWeights, DICE_SMOOTH, PROB_CLAMP,
};
pub use net::{channel_dropout_mask, PredictorConfig, SliceNet};
pub use train::{
    evaluate_dice, gradient_check, train, Adamax, EpochRecord, GradCheck, PlateauScheduler, TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid predictor configuration: {0}")]
    InvalidConfig(String),
    #[error("in-plane dims of {dims:?} must be multiples of {multiple}")]
    IncompatibleDims { dims: [usize; 3], multiple: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f32),
    #[error("training set is empty")]
    EmptyCohort,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PredictorError> = std::result::Result<T, E>;

/// A segmenter that can be sampled with dropout.
///
/// `predict` must be a pure function of the parameters, `image`,
/// `dropout_rate` and `seed`, and must return probabilities in [0, 1]. Rate 0
/// disables all randomness.
pub trait Predictor: Send + Sync {
    fn predict(&self, image: &Volume, dropout_rate: f32, seed: u64) -> Result<Volume>;

    /// Rejects grids the predictor cannot process.
    fn check_dims(&self, _dims: [usize; 3]) -> Result<()> {
        Ok(())
    }
}

impl Predictor for SliceNet {
    fn predict(&self, image: &Volume, dropout_rate: f32, seed: u64) -> Result<Volume> {
        self.predict_volume(image, dropout_rate, seed)
    }

    fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        SliceNet::check_dims(self, dims)
    }
}
