//! Token-level timing control for a toy flow-matching synthesizer:
//! timing-track data model, alignment ingestion and cross-validation
//! filtering, track building, zero-corrected timing conditioning, the
//! conditional flow-matching generator, a synthetic render/align world, and
//! the timing-control evaluation harness.

pub mod align;
pub mod build;
pub mod checkpoint;
pub mod cond;
pub mod crossval;
pub mod edit;
pub mod eval;
pub mod flow;
pub mod frame;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod textnorm;
pub mod track;
pub mod world;

pub use frame::{frames_to_ms, log_compress, ms_to_frames, FrameRate, LogScale};
pub use track::{TimingTrack, TokenTiming, TrackError};
