//! Determined blind source separation with consistent ILRMA and IVA.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common case.

pub mod consistency;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod mixture;
pub mod nmf;
pub mod scalar;
pub mod separation;
pub mod signal;
pub mod stft;

pub use error::{Error, Result};
pub use eval::{Db, EvalScores};
pub use scalar::{Complex, Real};
pub use separation::{Method, SeparationConfig};
pub use signal::{RunReport, TimeSignal};
pub use stft::WindowKind;

pub type Spectrogram64 = stft::Spectrogram<f64>;
pub type Spectrogram32 = stft::Spectrogram<f32>;
pub type StftEngine64 = stft::StftEngine<f64>;
pub type StftEngine32 = stft::StftEngine<f32>;
pub type TimeSignal64 = signal::TimeSignal<f64>;
pub type TimeSignal32 = signal::TimeSignal<f32>;
pub type SeparationState64 = separation::SeparationState<f64>;
pub type SeparationState32 = separation::SeparationState<f32>;
pub type CMatrix64 = linalg::CMatrix<f64>;
