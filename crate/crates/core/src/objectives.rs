//! Training objectives: SI-SDR on waveforms, MSE on RI features and their
//! weighted combination, with exact gradients back to the network output.
//!
//! Sign convention: the optimizer minimizes
//! `beta_sisdr * (-SI-SDR) + beta_mse * MSE`.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::{RiTensor, Stft};
use crate::error::{Error, Result};

pub const SI_SDR_EPS: f64 = 1e-8;
pub const SI_SDR_CAP_DB: f64 = 100.0;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_sisdr: f64,
    pub beta_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_sisdr: 0.75,
            beta_mse: 0.25,
        }
    }
}

impl LossWeights {
    /// Weights summing to one, from the SI-SDR share.
    pub fn from_sisdr_share(beta_sisdr: f64) -> Result<Self> {
        let w = Self {
            beta_sisdr,
            beta_mse: 1.0 - beta_sisdr,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta_sisdr)
            && (0.0..=1.0).contains(&self.beta_mse)
            && (self.beta_sisdr + self.beta_mse - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights ({}, {}) must be in [0, 1] and sum to 1",
                self.beta_sisdr, self.beta_mse
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean SI-SDR over both extraction directions, dB.
    pub si_sdr_pair: f64,
    /// Mean feature MSE over both extraction directions.
    pub mse_pair: f64,
    pub combined: f64,
}

fn check_pair(target: &[f64], estimate: &[f64]) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "target has {} samples, estimate {}",
            target.len(),
            estimate.len()
        )));
    }
    let ss: f64 = target.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::invalid("SI-SDR target is all zeros"));
    }
    Ok(ss)
}

/// SI-SDR in dB between a target and an estimate, with its gradient with
/// respect to the estimate.
///
/// `10 log10(|a s|^2 / (|a s - e|^2 + eps) + eps)` with `a = <e,s>/<s,s>`,
/// clamped to `[-100, 100]` dB. An estimate whose residual is below the cap
/// (including any exact rescaling of the target) returns the cap with a zero
/// gradient.
pub fn si_sdr_grad(target: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    let ss = check_pair(target, estimate)?;
    let es: f64 = target.iter().zip(estimate).map(|(s, e)| s * e).sum();
    let alpha = es / ss;
    let proj_energy = alpha * alpha * ss;
    let resid_energy: f64 = target
        .iter()
        .zip(estimate)
        .map(|(s, e)| (alpha * s - e).powi(2))
        .sum();
    let cap_ratio = 10f64.powf(SI_SDR_CAP_DB / 10.0);
    if resid_energy * cap_ratio <= proj_energy {
        return Ok((SI_SDR_CAP_DB, vec![0.0; target.len()]));
    }
    let denom = resid_energy + SI_SDR_EPS;
    let ratio = proj_energy / denom;
    let value = DB * (ratio + SI_SDR_EPS).ln();
    if !(-SI_SDR_CAP_DB..=SI_SDR_CAP_DB).contains(&value) {
        return Ok((value.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB), vec![0.0; target.len()]));
    }
    // d(proj)/de = 2 a s ; d(resid)/de = 2 (e - a s)
    let outer = DB / (ratio + SI_SDR_EPS) / denom;
    let grad = target
        .iter()
        .zip(estimate)
        .map(|(s, e)| outer * (2.0 * alpha * s - ratio * 2.0 * (e - alpha * s)))
        .collect();
    Ok((value, grad))
}

/// Scale-invariant signal-to-distortion ratio in dB. No mean removal.
pub fn si_sdr(target: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    si_sdr_slices(target.samples(), estimate.samples())
}

pub fn si_sdr_slices(target: &[f64], estimate: &[f64]) -> Result<f64> {
    si_sdr_grad(target, estimate).map(|(v, _)| v)
}

/// Mean SI-SDR over the two extraction directions of one mixture.
pub fn pair_si_sdr(
    target_1: &AudioBuffer,
    estimate_1: &AudioBuffer,
    target_2: &AudioBuffer,
    estimate_2: &AudioBuffer,
) -> Result<f64> {
    Ok(0.5 * (si_sdr(target_1, estimate_1)? + si_sdr(target_2, estimate_2)?))
}

/// Mean squared difference over every entry of two equally shaped tensors.
pub fn ri_mse(target: &RiTensor, estimate: &RiTensor) -> Result<f64> {
    if target.shape() != estimate.shape() {
        return Err(Error::invalid(format!(
            "RI shapes differ: {:?} vs {:?}",
            target.shape(),
            estimate.shape()
        )));
    }
    Ok(mse(target.data(), estimate.data()))
}

pub fn pair_ri_mse(
    target_1: &RiTensor,
    estimate_1: &RiTensor,
    target_2: &RiTensor,
    estimate_2: &RiTensor,
) -> Result<f64> {
    Ok(0.5 * (ri_mse(target_1, estimate_1)? + ri_mse(target_2, estimate_2)?))
}

fn mse(target: &[f64], estimate: &[f64]) -> f64 {
    target
        .iter()
        .zip(estimate)
        .map(|(t, e)| (e - t).powi(2))
        .sum::<f64>()
        / target.len() as f64
}

pub fn combined_loss(pair_sisdr: f64, pair_mse: f64, weights: &LossWeights) -> f64 {
    weights.beta_sisdr * -pair_sisdr + weights.beta_mse * pair_mse
}

/// Per-estimate loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateLoss {
    pub si_sdr: f64,
    pub mse: f64,
}

/// Loss of one RI estimate and its gradient on the network output.
///
/// `estimate` is a `2 x bins x padded_frames` slice (channel-major); only the
/// first `target_ri.frames()` frames enter the loss. `target_wave` has the
/// original signal length. The returned gradient has the layout of
/// `estimate` and is already multiplied by `scale`.
pub fn ri_estimate_loss(
    stft: &Stft,
    estimate: &[f64],
    padded_frames: usize,
    target_ri: &RiTensor,
    target_wave: &[f64],
    weights: &LossWeights,
    scale: f64,
) -> Result<(EstimateLoss, Vec<f64>)> {
    let bins = target_ri.bins();
    let frames = target_ri.frames();
    if estimate.len() != 2 * bins * padded_frames || padded_frames < frames {
        return Err(Error::invalid("estimate tensor does not match target shape"));
    }
    let plane = bins * frames;
    let mut cropped = vec![0.0; 2 * plane];
    let mut spec = vec![Complex64::new(0.0, 0.0); plane];
    for c in 0..2 {
        for k in 0..bins {
            let src = &estimate[(c * bins + k) * padded_frames..][..frames];
            cropped[(c * bins + k) * frames..][..frames].copy_from_slice(src);
        }
    }
    for i in 0..plane {
        spec[i] = Complex64::new(cropped[i], cropped[plane + i]);
    }
    let wave = stft.synthesize(&spec, frames, target_wave.len())?;
    let (sdr, dwave) = si_sdr_grad(target_wave, &wave)?;
    let err = mse(target_ri.data(), &cropped);

    let dspec = stft.synthesize_adjoint(&dwave, frames);
    let n = cropped.len() as f64;
    let mut grad = vec![0.0; estimate.len()];
    for c in 0..2 {
        for k in 0..bins {
            for l in 0..frames {
                let i = (c * bins + k) * frames + l;
                let d = dspec[k * frames + l];
                let from_sdr = if c == 0 { d.re } else { d.im };
                let from_mse = 2.0 * (cropped[i] - target_ri.data()[i]) / n;
                grad[(c * bins + k) * padded_frames + l] =
                    scale * (-weights.beta_sisdr * from_sdr + weights.beta_mse * from_mse);
            }
        }
    }
    Ok((EstimateLoss { si_sdr: sdr, mse: err }, grad))
}

/// Loss of one log-magnitude estimate, reconstructed with the mixture phase.
///
/// `estimate` is `bins x padded_frames`; `mixture` is the mixture spectrogram
/// (`bins x frames`, row-major) supplying phase; `target_log` is the target
/// log-magnitude `bins x frames`.
#[allow(clippy::too_many_arguments)]
pub fn ls_estimate_loss(
    stft: &Stft,
    estimate: &[f64],
    padded_frames: usize,
    mixture: &[Complex64],
    target_log: &[f64],
    target_wave: &[f64],
    weights: &LossWeights,
    scale: f64,
) -> Result<(EstimateLoss, Vec<f64>)> {
    let bins = stft.config().keep_bins;
    let frames = mixture.len() / bins;
    if estimate.len() != bins * padded_frames || target_log.len() != mixture.len() {
        return Err(Error::invalid("log-spectrum estimate does not match target shape"));
    }
    let mut cropped = vec![0.0; bins * frames];
    for k in 0..bins {
        cropped[k * frames..][..frames].copy_from_slice(&estimate[k * padded_frames..][..frames]);
    }
    let unit: Vec<Complex64> = mixture
        .iter()
        .map(|p| {
            let r = p.norm();
            if r == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                p / r
            }
        })
        .collect();
    let spec: Vec<Complex64> = cropped.iter().zip(&unit).map(|(&v, &u)| u * v.exp()).collect();
    let wave = stft.synthesize(&spec, frames, target_wave.len())?;
    let (sdr, dwave) = si_sdr_grad(target_wave, &wave)?;
    let err = mse(target_log, &cropped);
    let dspec = stft.synthesize_adjoint(&dwave, frames);
    let n = cropped.len() as f64;
    let mut grad = vec![0.0; estimate.len()];
    for k in 0..bins {
        for l in 0..frames {
            let i = k * frames + l;
            // d/dv of Re/Im(u e^v) is (u e^v); chain with (dRe, dIm).
            let s = spec[i];
            let from_sdr = dspec[i].re * s.re + dspec[i].im * s.im;
            let from_mse = 2.0 * (cropped[i] - target_log[i]) / n;
            grad[k * padded_frames + l] =
                scale * (-weights.beta_sisdr * from_sdr + weights.beta_mse * from_mse);
        }
    }
    Ok((EstimateLoss { si_sdr: sdr, mse: err }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{ri_pack, stft as stft_of, StftConfig, WindowKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a(x: &[f64]) -> AudioBuffer {
        AudioBuffer::new(x.to_vec(), 8000).unwrap()
    }

    #[test]
    fn hand_case_zero_db() {
        let v = si_sdr(&a(&[1.0, 0.0]), &a(&[1.0, 1.0])).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn scaled_target_hits_cap() {
        let s = [0.3, -1.0, 2.0, 0.5];
        for c in [1.0, -0.01, 7.5] {
            let e: Vec<f64> = s.iter().map(|v| v * c).collect();
            assert_eq!(si_sdr(&a(&s), &a(&e)).unwrap(), SI_SDR_CAP_DB);
        }
    }

    #[test]
    fn orthogonal_estimate_is_very_negative() {
        let v = si_sdr(&a(&[1.0, 0.0]), &a(&[0.0, 1.0])).unwrap();
        assert!((-SI_SDR_CAP_DB..=-80.0 + 1e-9).contains(&v));
    }

    #[test]
    fn errors_on_zero_target_and_length_mismatch() {
        assert!(matches!(
            si_sdr(&a(&[0.0, 0.0]), &a(&[1.0, 0.0])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(si_sdr(&a(&[1.0]), &a(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn pair_average_and_symmetry() {
        // 0 dB and 10 dB cases averaged.
        let s1 = a(&[1.0, 0.0]);
        let e1 = a(&[1.0, 1.0]);
        let s2 = a(&[1.0, 0.0]);
        let e2 = a(&[1.0, 10f64.powf(-0.5)]);
        let v = pair_si_sdr(&s1, &e1, &s2, &e2).unwrap();
        assert!((v - 5.0).abs() < 1e-6, "{v}");
        assert_eq!(v, pair_si_sdr(&s2, &e2, &s1, &e1).unwrap());
    }

    #[test]
    fn mse_cases() {
        let cfg = StftConfig::default();
        let x = a(&(0..300).map(|t| (t as f64 * 0.1).sin()).collect::<Vec<_>>());
        let t = ri_pack(&stft_of(&x, &cfg).unwrap());
        assert_eq!(ri_mse(&t, &t).unwrap(), 0.0);
        let zero = t.with_data(vec![0.0; t.data().len()]);
        let expect = t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64;
        assert!((ri_mse(&t, &zero).unwrap() - expect).abs() < 1e-12 * expect);
        let shifted = t.with_data(t.data().iter().map(|v| v + 0.3).collect());
        assert!((ri_mse(&t, &shifted).unwrap() - 0.09).abs() < 1e-12);
        let other = ri_pack(&stft_of(&a(&[0.0; 10]), &cfg).unwrap());
        assert!(ri_mse(&t, &other).is_err());
    }

    #[test]
    fn combined_weighting() {
        let w = LossWeights::default();
        assert!((combined_loss(8.0, 0.04, &w) - -5.99).abs() < 1e-12);
        let only_sdr = LossWeights::from_sisdr_share(1.0).unwrap();
        assert_eq!(combined_loss(8.0, 0.04, &only_sdr), -8.0);
        let only_mse = LossWeights::from_sisdr_share(0.0).unwrap();
        assert_eq!(combined_loss(8.0, 0.04, &only_mse), 0.04);
        assert!(LossWeights::from_sisdr_share(1.5).is_err());
        assert!(LossWeights { beta_sisdr: 0.5, beta_mse: 0.6 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..10_000, c1 in prop::sample::select(vec![0.5, 2.0, -3.0]), c2 in prop::sample::select(vec![0.5, 2.0, -3.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = s.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
            let base = si_sdr_slices(&s, &e).unwrap();
            let sc: Vec<f64> = s.iter().map(|v| v * c1).collect();
            let ec: Vec<f64> = e.iter().map(|v| v * c2).collect();
            prop_assert!((si_sdr_slices(&sc, &ec).unwrap() - base).abs() < 1e-9);
            prop_assert!(base <= SI_SDR_CAP_DB);
        }

        #[test]
        fn combined_is_affine(p in -50.0f64..50.0, m in 0.0f64..10.0, d in -5.0f64..5.0) {
            let w = LossWeights::default();
            let l0 = combined_loss(p, m, &w);
            prop_assert!((combined_loss(p + d, m, &w) - l0 - (-0.75 * d)).abs() < 1e-9);
            prop_assert!((combined_loss(p, m + d.abs(), &w) - l0 - 0.25 * d.abs()).abs() < 1e-9);
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], idx: &[usize]) {
        let h = 1e-5;
        for &i in idx {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5);
            assert!(rel < 1e-4, "index {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn si_sdr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|v| 0.7 * v + rng.random_range(-0.5..0.5)).collect();
        let (_, g) = si_sdr_grad(&s, &e).unwrap();
        let idx: Vec<usize> = (0..64).step_by(7).collect();
        fd_check(|x| si_sdr_slices(&s, x).unwrap(), &e, &g, &idx);
    }

    fn small_cfg() -> StftConfig {
        StftConfig {
            frame_size: 32,
            hop: 8,
            window: WindowKind::HannPeriodic,
            keep_bins: 16,
        }
    }

    #[test]
    fn ri_loss_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let engine = Stft::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let len = 100;
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tri = ri_pack(&engine.analyze(&target, 8000));
        let frames = tri.frames();
        let padded = frames.div_ceil(4) * 4;
        let est: Vec<f64> = (0..2 * 16 * padded).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = LossWeights::default();
        let eval = |x: &[f64]| {
            let (l, _) = ri_estimate_loss(&engine, x, padded, &tri, &target, &w, 1.0).unwrap();
            combined_loss(l.si_sdr, l.mse, &w)
        };
        let (_, g) = ri_estimate_loss(&engine, &est, padded, &tri, &target, &w, 1.0).unwrap();
        let idx: Vec<usize> = (0..est.len()).step_by(13).collect();
        fd_check(eval, &est, &g, &idx);
    }

    #[test]
    fn mse_gradient_zero_at_target() {
        let cfg = small_cfg();
        let engine = Stft::new(cfg).unwrap();
        let target: Vec<f64> = (0..64).map(|t| (t as f64 * 0.3).sin()).collect();
        let tri = ri_pack(&engine.analyze(&target, 8000));
        let w = LossWeights::from_sisdr_share(0.0).unwrap();
        let (l, g) =
            ri_estimate_loss(&engine, tri.data(), tri.frames(), &tri, &target, &w, 1.0).unwrap();
        assert_eq!(l.mse, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ls_loss_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let engine = Stft::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let len = 80;
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = target.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let ms = engine.analyze(&mix, 8000);
        let ts = engine.analyze(&target, 8000);
        let tlog: Vec<f64> = ts.data().iter().map(|c| c.norm().max(1e-4).ln()).collect();
        let frames = ms.frames();
        let est: Vec<f64> = (0..16 * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = LossWeights::default();
        let eval = |x: &[f64]| {
            let (l, _) =
                ls_estimate_loss(&engine, x, frames, ms.data(), &tlog, &target, &w, 1.0).unwrap();
            combined_loss(l.si_sdr, l.mse, &w)
        };
        let (_, g) =
            ls_estimate_loss(&engine, &est, frames, ms.data(), &tlog, &target, &w, 1.0).unwrap();
        let idx: Vec<usize> = (0..est.len()).step_by(11).collect();
        fd_check(eval, &est, &g, &idx);
    }
}
