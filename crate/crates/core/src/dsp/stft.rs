use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// `0.5 - 0.5 cos(2 pi m / N)`, m = 0..N.
    HannPeriodic,
}

impl WindowKind {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::HannPeriodic => (0..n)
                .map(|m| 0.5 - 0.5 * (2.0 * PI * m as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Framing parameters.
///
/// Padding convention: `frame_size - hop` zeros are prepended and the tail is
/// zero-filled to whole frames, so every input sample is covered by the same
/// number of frames. A signal of `T` samples yields
/// `ceil((T + frame_size - hop) / hop)` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    /// Bins `0..keep_bins` are stored; the rest of the half spectrum is
    /// treated as zero on synthesis.
    pub keep_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_size: 256,
            hop: 64,
            window: WindowKind::HannPeriodic,
            keep_bins: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.hop == 0 {
            return Err(Error::invalid("frame size and hop must be positive"));
        }
        if !self.frame_size.is_multiple_of(self.hop) {
            return Err(Error::invalid(format!(
                "hop {} does not divide frame size {}",
                self.hop, self.frame_size
            )));
        }
        if self.keep_bins == 0 || self.keep_bins > self.frame_size / 2 + 1 {
            return Err(Error::invalid(format!(
                "keep_bins {} outside 1..={}",
                self.keep_bins,
                self.frame_size / 2 + 1
            )));
        }
        let sums = cola_sum(self);
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if sums.iter().any(|s| (s - mean).abs() > 1e-10 * mean.max(1.0)) {
            return Err(Error::invalid(format!(
                "{:?} window is not overlap-add constant at hop {}",
                self.window, self.hop
            )));
        }
        Ok(())
    }

    pub fn front_pad(&self) -> usize {
        self.frame_size - self.hop
    }

    pub fn num_frames(&self, len: usize) -> usize {
        (len + self.front_pad()).div_ceil(self.hop).max(1)
    }

    /// Longest output `istft` can produce from `frames` frames.
    pub fn reconstructable_len(&self, frames: usize) -> usize {
        frames * self.hop
    }
}

/// Sum of squared analysis windows over all frame shifts, evaluated on one hop
/// period. Constant for a COLA window/hop pair.
pub fn cola_sum(cfg: &StftConfig) -> Vec<f64> {
    let w = cfg.window.coefficients(cfg.frame_size);
    (0..cfg.hop)
        .map(|p| {
            (0..cfg.frame_size / cfg.hop)
                .map(|j| w[p + j * cfg.hop].powi(2))
                .sum()
        })
        .collect()
}

/// Complex STFT, `keep_bins` rows by `frames` columns, stored row-major
/// (`data[k * frames + l]`).
#[derive(Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub(crate) data: Vec<Complex64>,
    pub(crate) frames: usize,
    pub(crate) config: StftConfig,
    pub(crate) original_length: usize,
    pub(crate) sample_rate: u32,
}

impl fmt::Debug for ComplexSpectrogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplexSpectrogram")
            .field("bins", &self.bins())
            .field("frames", &self.frames)
            .field("original_length", &self.original_length)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl ComplexSpectrogram {
    pub fn new(
        data: Vec<Complex64>,
        frames: usize,
        config: StftConfig,
        original_length: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        if frames == 0 || data.len() != config.keep_bins * frames {
            return Err(Error::invalid(format!(
                "spectrogram data has {} entries, expected {} x {}",
                data.len(),
                config.keep_bins,
                frames
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("non-finite spectrogram entry"));
        }
        Ok(Self {
            data,
            frames,
            config,
            original_length,
            sample_rate,
        })
    }

    pub fn zeros(config: StftConfig, frames: usize, original_length: usize, sample_rate: u32) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); config.keep_bins * frames],
            frames,
            config,
            original_length,
            sample_rate,
        }
    }

    pub fn bins(&self) -> usize {
        self.config.keep_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn set(&mut self, bin: usize, frame: usize, value: Complex64) {
        self.data[bin * self.frames + frame] = value;
    }

    pub fn frame_energy(&self, frame: usize) -> f64 {
        (0..self.bins()).map(|k| self.get(k, frame).norm_sqr()).sum()
    }
}

/// Planned STFT analysis/synthesis pair for one configuration.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window.coefficients(config.frame_size),
            forward: planner.plan_fft_forward(config.frame_size),
            inverse: planner.plan_fft_inverse(config.frame_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Forward transform of raw samples (un-normalized DFT).
    pub fn analyze(&self, samples: &[f64], sample_rate: u32) -> ComplexSpectrogram {
        let cfg = &self.config;
        let n = cfg.frame_size;
        let frames = cfg.num_frames(samples.len());
        let front = cfg.front_pad();
        let mut out = ComplexSpectrogram::zeros(*cfg, frames, samples.len(), sample_rate);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..frames {
            for (m, slot) in buf.iter_mut().enumerate() {
                let p = l * cfg.hop + m;
                let v = p
                    .checked_sub(front)
                    .and_then(|t| samples.get(t))
                    .copied()
                    .unwrap_or(0.0);
                *slot = Complex64::new(v * self.window[m], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..cfg.keep_bins {
                out.data[k * frames + l] = buf[k];
            }
        }
        out
    }

    fn overlap_norm(&self, frames: usize, length: usize) -> Vec<f64> {
        let cfg = &self.config;
        let front = cfg.front_pad();
        let mut norm = vec![0.0; length];
        for l in 0..frames {
            for m in 0..cfg.frame_size {
                let p = l * cfg.hop + m;
                if p >= front && p - front < length {
                    norm[p - front] += self.window[m] * self.window[m];
                }
            }
        }
        norm
    }

    /// Weighted overlap-add synthesis of `frames` frames stored row-major in
    /// `data`, truncated to `length` samples.
    pub fn synthesize(&self, data: &[Complex64], frames: usize, length: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if data.len() != cfg.keep_bins * frames {
            return Err(Error::invalid("spectrogram shape does not match configuration"));
        }
        if length > cfg.reconstructable_len(frames) {
            return Err(Error::invalid(format!(
                "requested {length} samples but {frames} frames reconstruct at most {}",
                cfg.reconstructable_len(frames)
            )));
        }
        let n = cfg.frame_size;
        let front = cfg.front_pad();
        let nyquist_kept = cfg.keep_bins == n / 2 + 1;
        let mut out = vec![0.0; length];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..frames {
            buf.fill(Complex64::new(0.0, 0.0));
            buf[0] = Complex64::new(data[l].re, 0.0);
            let upper = if nyquist_kept { cfg.keep_bins - 1 } else { cfg.keep_bins };
            for k in 1..upper {
                let v = data[k * frames + l];
                buf[k] = v;
                buf[n - k] = v.conj();
            }
            if nyquist_kept {
                buf[n / 2] = Complex64::new(data[(n / 2) * frames + l].re, 0.0);
            }
            self.inverse.process(&mut buf);
            for m in 0..n {
                let p = l * cfg.hop + m;
                if p >= front && p - front < length {
                    out[p - front] += self.window[m] * buf[m].re / n as f64;
                }
            }
        }
        let norm = self.overlap_norm(frames, length);
        for (o, d) in out.iter_mut().zip(norm) {
            *o = if d > 1e-12 { *o / d } else { 0.0 };
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::synthesize`]: maps a gradient on the output samples
    /// to a gradient on the stored bins, expressed as `d/dRe + i d/dIm`.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Vec<Complex64> {
        let cfg = &self.config;
        let n = cfg.frame_size;
        let front = cfg.front_pad();
        let length = grad.len();
        let norm = self.overlap_norm(frames, length);
        let nyquist_kept = cfg.keep_bins == n / 2 + 1;
        let mut out = vec![Complex64::new(0.0, 0.0); cfg.keep_bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..frames {
            for (m, slot) in buf.iter_mut().enumerate() {
                let p = l * cfg.hop + m;
                let g = if p >= front && p - front < length && norm[p - front] > 1e-12 {
                    grad[p - front] * self.window[m] / norm[p - front]
                } else {
                    0.0
                };
                *slot = Complex64::new(g, 0.0);
            }
            self.forward.process(&mut buf);
            let scale = 1.0 / n as f64;
            out[l] = Complex64::new(buf[0].re * scale, 0.0);
            let upper = if nyquist_kept { cfg.keep_bins - 1 } else { cfg.keep_bins };
            for k in 1..upper {
                out[k * frames + l] = buf[k] * (2.0 * scale);
            }
            if nyquist_kept {
                out[(n / 2) * frames + l] = Complex64::new(buf[n / 2].re * scale, 0.0);
            }
        }
        out
    }
}

pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let engine = Stft::new(*cfg)?;
    Ok(engine.analyze(audio.samples(), audio.sample_rate()))
}

pub fn istft(spec: &ComplexSpectrogram, length: usize) -> Result<AudioBuffer> {
    let engine = Stft::new(spec.config)?;
    let samples = engine.synthesize(&spec.data, spec.frames, length)?;
    AudioBuffer::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn buf(x: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(x, 8000).unwrap()
    }

    /// Sum of sinusoids centred on STFT bins 1..=max_bin with random
    /// amplitudes and phases. Interior frames carry no Nyquist energy.
    fn bin_centred(rng: &mut ChaCha8Rng, len: usize, max_bin: usize) -> Vec<f64> {
        let comps: Vec<(f64, f64, f64)> = (1..=max_bin)
            .map(|k| (k as f64, rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        (0..len)
            .map(|t| {
                comps
                    .iter()
                    .map(|(k, a, ph)| a * (2.0 * PI * k * t as f64 / 256.0 + ph).cos())
                    .sum::<f64>()
                    / max_bin as f64
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn default_config_is_cola() {
        let cfg = StftConfig::default();
        cfg.validate().unwrap();
        for s in cola_sum(&cfg) {
            assert!((s - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = StftConfig::default();
        assert!(StftConfig { hop: 100, ..base }.validate().is_err());
        assert!(StftConfig { keep_bins: 130, ..base }.validate().is_err());
        assert!(StftConfig { keep_bins: 0, ..base }.validate().is_err());
        // 50% overlap Hann is not squared-window COLA.
        assert!(StftConfig { hop: 128, ..base }.validate().is_err());
    }

    #[test]
    fn frame_count_follows_padding_convention() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_frames(64), 4);
        assert_eq!(cfg.num_frames(65), 5);
        assert_eq!(cfg.num_frames(8000), (8000usize + 192).div_ceil(64));
        let spec = stft(&buf(vec![0.0; 1000]), &cfg).unwrap();
        assert_eq!(spec.bins(), 128);
        assert_eq!(spec.frames(), cfg.num_frames(1000));
        assert_eq!(spec.original_length(), 1000);
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let spec = stft(&buf(vec![0.0; 777]), &cfg).unwrap();
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec, 777).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_16_cosine_matches_direct_dft() {
        // 500 Hz at 8 kHz is exactly bin 16 of a 256-point frame.
        let x: Vec<f64> = (0..4000)
            .map(|t| (2.0 * PI * 500.0 * t as f64 / 8000.0).cos())
            .collect();
        let cfg = StftConfig::default();
        let spec = stft(&buf(x.clone()), &cfg).unwrap();
        let w = cfg.window.coefficients(256);
        for l in 4..spec.frames() - 4 {
            // Independent per-frame DFT.
            let start = l * 64 - 192;
            let mut oracle = vec![Complex64::new(0.0, 0.0); 128];
            for (k, o) in oracle.iter_mut().enumerate() {
                for m in 0..256 {
                    let th = -2.0 * PI * (k * m) as f64 / 256.0;
                    *o += Complex64::from_polar(x[start + m] * w[m], th);
                }
            }
            for (k, o) in oracle.iter().enumerate() {
                assert!((spec.get(k, l) - o).norm() < 1e-9);
            }
            let total = spec.frame_energy(l);
            let e16 = spec.get(16, l).norm_sqr();
            let lobe: f64 = (15..=17).map(|k| spec.get(k, l).norm_sqr()).sum();
            // Periodic Hann spreads a bin-centred tone as [1/4, 1/2, 1/4].
            assert!((e16 / total - 2.0 / 3.0).abs() < 1e-9);
            assert!(lobe / total > 0.999_999);
            let peak = (0..128)
                .max_by(|&a, &b| spec.get(a, l).norm().total_cmp(&spec.get(b, l).norm()))
                .unwrap();
            assert_eq!(peak, 16);
        }
    }

    #[test]
    fn round_trip_on_bin_centred_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = bin_centred(&mut rng, 5000, 60);
        // Taper the edges so partial frames carry negligible Nyquist energy.
        let x: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let e = (t.min(4999 - t) as f64 / 400.0).min(1.0);
                v * (0.5 - 0.5 * (PI * e).cos()).powi(3)
            })
            .collect();
        let cfg = StftConfig::default();
        let spec = stft(&buf(x.clone()), &cfg).unwrap();
        let back = istft(&spec, x.len()).unwrap();
        assert!(rel_err(back.samples(), &x) < 1e-6);
    }

    #[test]
    fn nyquist_bin_is_discarded() {
        let x: Vec<f64> = (0..2048).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let spec = stft(&buf(x.clone()), &StftConfig::default()).unwrap();
        // The windowed alternating tone occupies bins 127 and 128 only.
        for l in 4..spec.frames() - 4 {
            assert!((spec.get(127, l).norm() - 64.0).abs() < 1e-9);
            for k in 0..127 {
                assert!(spec.get(k, l).norm() < 1e-9);
            }
        }
        // Dropping bin 128 leaves -0.5 cos(2 pi m / N) (-1)^m per frame; the
        // weighted overlap-add of that is (-1)^t / 3 in the interior.
        let back = istft(&spec, x.len()).unwrap();
        for t in 300..1700 {
            assert!((back.samples()[t] - x[t] / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_rejects_excess_length() {
        let spec = stft(&buf(vec![0.5; 100]), &StftConfig::default()).unwrap();
        let max = StftConfig::default().reconstructable_len(spec.frames());
        assert!(istft(&spec, max).is_ok());
        assert!(matches!(istft(&spec, max + 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn adjoint_identity() {
        // <synth(X), g> == <X, synth_adjoint(g)> with the real inner product on RI.
        let cfg = StftConfig {
            frame_size: 32,
            hop: 8,
            window: WindowKind::HannPeriodic,
            keep_bins: 16,
        };
        let engine = Stft::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = 12;
        let len = 90;
        let data: Vec<Complex64> = (0..16 * frames)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = engine.synthesize(&data, frames, len).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = engine.synthesize_adjoint(&g, frames);
        let rhs: f64 = data.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn stft_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..900).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..900).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -2.5);
        let cfg = StftConfig::default();
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sx = stft(&buf(x), &cfg).unwrap();
        let sy = stft(&buf(y), &cfg).unwrap();
        let sz = stft(&buf(z), &cfg).unwrap();
        for i in 0..sz.data().len() {
            let expect = sx.data()[i] * a + sy.data()[i] * b;
            assert!((sz.data()[i] - expect).norm() < 1e-12);
        }
    }
}
