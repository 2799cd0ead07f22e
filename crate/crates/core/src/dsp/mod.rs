//! Resampling, STFT analysis/synthesis and feature packing.

mod features;
mod resample;
mod stft;

pub use features::{
    combine_mag_phase, crop_frames, log_spectrum, pad_frames, ri_pack, ri_unpack, CropInfo,
    Matrix, RiTensor, DEFAULT_LOG_FLOOR_DB,
};
pub use resample::resample;
pub use stft::{cola_sum, istft, stft, ComplexSpectrogram, Stft, StftConfig, WindowKind};

pub use rustfft::num_complex::Complex64;
