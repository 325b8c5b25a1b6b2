//! Uncertainty categories for volumetric segmentation.
//!
//! Epistemic uncertainty is sampled with Monte-Carlo test-time dropout and
//! aleatoric uncertainty with test-time augmentation (affine motion, k-space
//! ghosting, multiplicative bias fields) around a stochastic segmenter. The
//! resulting voxelwise mean / variance / entropy maps feed the cross-case
//! stability and diversity analyses in [`analysis`].
//!
//! Module map:
//!
//! - [`volume`]: 3D grids, masks, raw/NIfTI file I/O.
//! - [`phantom`]: deterministic synthetic subjects with lesion labels.
//! - [`augment`]: the test-time augmentation families.
//! - [`predictor`]: the stochastic segmenter contract and a small 2.5D
//!   convolutional segmenter with hand-written backpropagation.
//! - [`uq`]: the 14-case registry and the Monte-Carlo engine.
//! - [`analysis`]: median/IQR, entropy-support masks, spatial correlation
//!   matrices, mean non-zero entropy and the predicted-error target.

pub mod analysis;
pub mod augment;
pub mod phantom;
pub mod predictor;
pub mod seed;
pub mod uq;
pub mod volume;

pub use analysis::{CaseSummary, CorrelationMatrix};
pub use augment::{AffineParams, BiasFieldParams, GhostingParams, Level, TransformSample};
pub use phantom::PhantomSpec;
pub use predictor::{Predictor, PredictorConfig, SliceNet, TrainConfig};
pub use uq::{CaseKind, CaseSpec, SampleStack, UncertaintyMaps};
pub use volume::{Mask, Volume};
