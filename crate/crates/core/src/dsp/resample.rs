use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Band-limited resampling by spectrum truncation / zero extension.
///
/// The output has `round(len * target / source)` samples. Components above the
/// lower of the two Nyquist frequencies are discarded. Equal rates return the
/// input unchanged.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    let source_rate = audio.sample_rate();
    if source_rate == target_rate || audio.is_empty() {
        let n = if audio.is_empty() { 0 } else { audio.len() };
        return AudioBuffer::new(audio.samples()[..n].to_vec(), target_rate);
    }
    let n = audio.len();
    let m = ((n as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    if m == 0 {
        return Ok(AudioBuffer::zeros(0, target_rate));
    }

    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex64> = audio
        .samples()
        .iter()
        .map(|&s| Complex64::new(s, 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let shared = n.min(m);
    // Strictly-below-Nyquist bins of the shorter transform copy straight over.
    let half = (shared - 1) / 2;
    out[0] = spectrum[0];
    for k in 1..=half {
        out[k] = spectrum[k];
        out[m - k] = spectrum[n - k];
    }
    if shared.is_multiple_of(2) {
        let k = shared / 2;
        if m > n {
            // Split the source Nyquist bin across both sides of the longer spectrum.
            out[k] = spectrum[k] * 0.5;
            out[m - k] = spectrum[k] * 0.5;
        } else {
            // Fold both source bins onto the target Nyquist bin (kept real).
            out[k] = Complex64::new((spectrum[k] + spectrum[n - k]).re, 0.0);
        }
    }

    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    AudioBuffer::new(out.iter().map(|c| c.re * scale).collect(), target_rate)
}
