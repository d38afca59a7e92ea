//! Below-horizon small-aircraft detection pipeline.
//!
//! A grayscale frame goes through a small fully-convolutional encoder/decoder
//! network that classifies every pixel as aircraft or background; connected
//! aircraft pixels become candidates; a persistence tracker declares a
//! detection once a candidate survives a gate for W successive frames. The
//! crate also ships a synthetic encounter generator with exact ground truth
//! and an evaluation harness that produces operating-characteristic curves,
//! zero-false-alarm window searches and detection-range statistics.

pub mod checkpoint;
pub mod eval;
pub mod image;
pub mod pgm;
pub mod scenegen;
pub mod segnet;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use eval::{EvalCase, EvalError, EvalReport, SocPoint, ZfaOutcome};
pub use image::{BinaryMask, GrayImage, ImageError};
pub use pgm::PgmError;
pub use scenegen::{CameraModel, EncounterKind, EncounterSpec, LabeledSequence, SceneFrame, SceneGenError};
pub use segnet::{build_network, ConvBnBlock, Network, NetworkConfig, NetworkGrads, SegnetError, CLASS_AIRCRAFT, CLASS_BACKGROUND};
pub use tracker::{Candidate, DetectionEvent, Track, TrackerError, TrackerState};
pub use trainer::{LabeledSample, TrainConfig, TrainerError};
pub use tensor::{
    BatchNormCache, BatchNormState, PoolIndices, Scalar, SgdState, Tensor, TensorError,
};
