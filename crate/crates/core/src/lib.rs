//! Raw-domain camera simulator.
//!
//! A raw capture is mapped to new camera settings by three stages: a
//! physically derived exposure multiplier with a learned linear refinement,
//! a noise-level-conditioned denoiser, and an aperture network gated by
//! f-number-conditioned attention. The result is re-noised with the target
//! noise level function.

pub mod aperture;
pub mod dataset;
pub mod error;
pub mod exposure;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod raw;
pub mod render;
pub mod training;

pub use aperture::ApertureNet;
pub use dataset::{RawContainer, SceneSequence, SyntheticScene};
pub use error::{Error, Result};
pub use exposure::{compute_alpha, fnumber_to_stop, ExposureCorrection};
pub use noise::{DenoiserNet, NlfPropagation};
pub use pipeline::{simulate, ModelConfig, SimulateOptions, SimulatorModel, StageToggles, TrainSchedule};
pub use raw::{CfaOrder, ExposureSettings, Mosaic, NoiseLevelFunction, RawImage};
pub use render::{RenderParams, RgbImage};
