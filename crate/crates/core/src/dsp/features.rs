use rustfft::num_complex::Complex64;

use super::stft::{ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};

pub const DEFAULT_LOG_FLOOR_DB: f64 = -80.0;

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Real/imaginary feature tensor: channel 0 holds real parts, channel 1
/// imaginary parts, each `bins x frames` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RiTensor {
    pub(crate) data: Vec<f64>,
    pub(crate) bins: usize,
    pub(crate) frames: usize,
    pub(crate) config: StftConfig,
    pub(crate) original_length: usize,
    pub(crate) sample_rate: u32,
}

impl RiTensor {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (2, self.bins, self.frames)
    }

    pub fn get(&self, channel: usize, bin: usize, frame: usize) -> f64 {
        self.data[(channel * self.bins + bin) * self.frames + frame]
    }

    /// Same metadata, new contents. Panics if the length differs.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            data,
            ..self.clone()
        }
    }
}

pub fn ri_pack(spec: &ComplexSpectrogram) -> RiTensor {
    let plane = spec.data.len();
    let mut data = vec![0.0; 2 * plane];
    for (i, c) in spec.data.iter().enumerate() {
        data[i] = c.re;
        data[plane + i] = c.im;
    }
    RiTensor {
        data,
        bins: spec.bins(),
        frames: spec.frames,
        config: spec.config,
        original_length: spec.original_length,
        sample_rate: spec.sample_rate,
    }
}

pub fn ri_unpack(t: &RiTensor) -> ComplexSpectrogram {
    let plane = t.bins * t.frames;
    let data = (0..plane)
        .map(|i| Complex64::new(t.data[i], t.data[plane + i]))
        .collect();
    ComplexSpectrogram {
        data,
        frames: t.frames,
        config: t.config,
        original_length: t.original_length,
        sample_rate: t.sample_rate,
    }
}

/// Natural-log magnitude, `ln(max(|X|, 10^(floor_db / 20)))`.
pub fn log_spectrum(spec: &ComplexSpectrogram, floor_db: f64) -> Result<Matrix> {
    if floor_db >= 0.0 {
        return Err(Error::invalid("log-spectrum floor must be negative dB"));
    }
    let floor = 10f64.powf(floor_db / 20.0);
    Matrix::new(
        spec.bins(),
        spec.frames,
        spec.data.iter().map(|c| c.norm().max(floor).ln()).collect(),
    )
}

/// Attaches magnitudes to the phase of another spectrogram. Entries whose
/// phase source is exactly zero produce zero.
pub fn combine_mag_phase(mag: &Matrix, phase_source: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if mag.rows != phase_source.bins() || mag.cols != phase_source.frames {
        return Err(Error::invalid(format!(
            "magnitude is {}x{} but phase source is {}x{}",
            mag.rows,
            mag.cols,
            phase_source.bins(),
            phase_source.frames
        )));
    }
    let data = mag
        .data
        .iter()
        .zip(&phase_source.data)
        .map(|(&m, &p)| {
            let r = p.norm();
            if r == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                p * (m / r)
            }
        })
        .collect();
    Ok(ComplexSpectrogram {
        data,
        ..phase_source.clone()
    })
}

/// Frame count before padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropInfo {
    pub original_frames: usize,
}

/// Zero-pads the frame axis up to the next multiple of `multiple`, which must
/// be a power of two.
pub fn pad_frames(t: &RiTensor, multiple: usize) -> Result<(RiTensor, CropInfo)> {
    if !multiple.is_power_of_two() {
        return Err(Error::invalid(format!("pad multiple {multiple} is not a power of two")));
    }
    let padded = t.frames.div_ceil(multiple) * multiple;
    let mut data = vec![0.0; 2 * t.bins * padded];
    for row in 0..2 * t.bins {
        data[row * padded..row * padded + t.frames]
            .copy_from_slice(&t.data[row * t.frames..(row + 1) * t.frames]);
    }
    Ok((
        RiTensor {
            data,
            frames: padded,
            ..t.clone()
        },
        CropInfo {
            original_frames: t.frames,
        },
    ))
}

pub fn crop_frames(t: &RiTensor, info: CropInfo) -> Result<RiTensor> {
    let keep = info.original_frames;
    if keep > t.frames {
        return Err(Error::invalid("crop exceeds tensor width"));
    }
    let mut data = Vec::with_capacity(2 * t.bins * keep);
    for row in 0..2 * t.bins {
        data.extend_from_slice(&t.data[row * t.frames..row * t.frames + keep]);
    }
    Ok(RiTensor {
        data,
        frames: keep,
        ..t.clone()
    })
}
