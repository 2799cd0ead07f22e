//! Reference-conditioned single-microphone speaker extraction.
//!
//! A mixture of two talkers and a separate recording of the wanted talker go
//! in; an estimate of that talker's waveform comes out. The model is a U-Net
//! with two encoder heads working on the real and imaginary STFT channels,
//! trained on SI-SDR of the resynthesized waveform plus an MSE term on the
//! spectral features.

pub mod audio;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod net;
pub mod objectives;
pub mod pipeline;
pub mod room;
pub mod trainer;

pub use audio::{read_wav, write_wav, AudioBuffer, WavEncoding, PROCESSING_RATE};
pub use error::{Error, Result};
