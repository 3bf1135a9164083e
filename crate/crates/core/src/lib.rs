//! Early-exit semantic segmentation runtime with confidence-adaptive masking.
//!
//! A multi-exit network produces a full-resolution class distribution at each
//! exit. Pixels whose prediction is confident enough are frozen: their
//! features stop changing, later convolutions skip them, and their label is
//! final. The [`policy`] module decides which pixels freeze. Besides the
//! dense and single-threshold policies it provides per-class thresholds
//! calibrated from training-set class-mean probabilities ([`calibration`]).
//!
//! Cost is tracked as an exact FLOP count per exit ([`masked::FlopsLedger`])
//! and quality as per-exit mIoU ([`metrics`]).

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod masked;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod tensor;
mod weights;

pub use calibration::{ClassConfidenceMatrix, ClassMeanTable, ThresholdVector};
pub use error::{Error, FormatError, Result};
pub use masked::{FlopsLedger, PixelMask};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use model::{AdaptiveResult, ModelConfig, MultiExitNet, PredictionCanvas};
pub use policy::{ExitPolicy, PolicyRegistry};
pub use tensor::{ConvParams, Tensor};
