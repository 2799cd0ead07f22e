//! Glue between waveforms and the network: input features, batched
//! loss/gradient evaluation, and waveform reconstruction.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::audio::{AudioBuffer, PROCESSING_RATE};
use crate::corpus::{fit_reference, MixtureExample};
use crate::dsp::{ri_pack, RiTensor, Stft, DEFAULT_LOG_FLOOR_DB};
use crate::error::{Error, Result};
use crate::net::{FeatureMode, ModelConfig, Scalar, SiameseUnet, Tensor};
use crate::objectives::{combined_loss, ls_estimate_loss, ri_estimate_loss, LossBreakdown, LossWeights};

/// Turns waveforms into network tensors and network output back into
/// waveforms for one STFT configuration and feature mode.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stft: Stft,
    mode: FeatureMode,
    multiple: usize,
    log_floor: f64,
}

impl FeatureExtractor {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        let stft = model.stft;
        let multiple = model.size_multiple();
        if !stft.keep_bins.is_multiple_of(multiple) {
            return Err(Error::ModelConfig(format!(
                "{} frequency bins are not a multiple of {multiple} required by a depth-{} network",
                stft.keep_bins,
                model.depth()
            )));
        }
        Ok(Self {
            stft: Stft::new(stft)?,
            mode: model.features,
            multiple,
            log_floor: DEFAULT_LOG_FLOOR_DB / 20.0 * std::f64::consts::LN_10,
        })
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn bins(&self) -> usize {
        self.stft.config().keep_bins
    }

    pub fn frames(&self, len: usize) -> usize {
        self.stft.config().num_frames(len)
    }

    pub fn padded_frames(&self, len: usize) -> usize {
        self.frames(len).div_ceil(self.multiple) * self.multiple
    }

    /// Unpadded features (`channels x bins x frames`) and the spectrogram.
    fn features(&self, samples: &[f64]) -> (Vec<f64>, Vec<Complex64>) {
        let spec = self.stft.analyze(samples, PROCESSING_RATE);
        let data = spec.data().to_vec();
        let feats = match self.mode {
            FeatureMode::RealImag => data.iter().map(|c| c.re).chain(data.iter().map(|c| c.im)).collect(),
            FeatureMode::LogSpectrum => data.iter().map(|c| c.norm().ln().max(self.log_floor)).collect(),
        };
        (feats, data)
    }

    /// Copies unpadded features into a padded item; padding is silence.
    fn pad_into(&self, feats: &[f64], frames: usize, padded: usize, out: &mut [f64]) {
        let fill = match self.mode {
            FeatureMode::RealImag => 0.0,
            FeatureMode::LogSpectrum => self.log_floor,
        };
        out.fill(fill);
        for row in 0..feats.len() / frames {
            out[row * padded..row * padded + frames].copy_from_slice(&feats[row * frames..(row + 1) * frames]);
        }
    }

    fn tensor(&self, signals: &[&[f64]]) -> Tensor<f64> {
        let len = signals[0].len();
        let (frames, padded) = (self.frames(len), self.padded_frames(len));
        let c = self.mode.channels();
        let mut t = Tensor::zeros(signals.len(), c, self.bins(), padded);
        for (i, s) in signals.iter().enumerate() {
            let (f, _) = self.features(s);
            self.pad_into(&f, frames, padded, t.item_mut(i));
        }
        t
    }

    /// Waveform of `length` samples from one output item
    /// (`channels x bins x padded_frames`). The log-spectrum variant takes
    /// its phase from `mixture`.
    pub fn reconstruct(&self, output: &[f64], mixture: &[f64], length: usize) -> Result<Vec<f64>> {
        let (frames, padded) = (self.frames(length), self.padded_frames(length));
        let bins = self.bins();
        let mut spec = vec![Complex64::new(0.0, 0.0); bins * frames];
        match self.mode {
            FeatureMode::RealImag => {
                for k in 0..bins {
                    for l in 0..frames {
                        spec[k * frames + l] =
                            Complex64::new(output[k * padded + l], output[(bins + k) * padded + l]);
                    }
                }
            }
            FeatureMode::LogSpectrum => {
                let mix = self.stft.analyze(mixture, PROCESSING_RATE);
                for k in 0..bins {
                    for l in 0..frames {
                        let p = mix.get(k, l);
                        let r = p.norm();
                        let unit = if r == 0.0 { Complex64::new(0.0, 0.0) } else { p / r };
                        spec[k * frames + l] = unit * output[k * padded + l].exp();
                    }
                }
            }
        }
        self.stft.synthesize(&spec, frames, length)
    }
}

/// One training target: waveform plus the unpadded features the MSE term
/// compares against.
#[derive(Debug, Clone)]
struct Target {
    wave: Vec<f64>,
    ri: Option<RiTensor>,
    log: Vec<f64>,
    mixture_spec: Vec<Complex64>,
}

/// Network inputs and targets for a batch of equally long examples. Item
/// `i < B` of the output estimates `target_1` of example `i` from
/// `reference_1`; item `B + i` estimates `target_2` from `reference_2`.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub mixture: Tensor<f64>,
    pub references: Tensor<f64>,
    targets: Vec<Target>,
    padded_frames: usize,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.mixture.n
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.n == 0
    }
}

pub fn prepare_batch(fx: &FeatureExtractor, examples: &[MixtureExample]) -> Result<PreparedBatch> {
    let Some(first) = examples.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let len = first.len();
    for ex in examples {
        ex.validate()?;
        if ex.len() != len {
            return Err(Error::invalid("batch examples differ in length"));
        }
        if ex.mixture.sample_rate() != PROCESSING_RATE {
            return Err(Error::invalid("batch examples must be at the processing rate"));
        }
    }
    let mixes: Vec<&[f64]> = examples.iter().map(|e| e.mixture.samples()).collect();
    let refs: Vec<&[f64]> = examples
        .iter()
        .map(|e| e.reference_1.samples())
        .chain(examples.iter().map(|e| e.reference_2.samples()))
        .collect();
    let targets = examples
        .iter()
        .map(|e| (e, &e.target_1))
        .chain(examples.iter().map(|e| (e, &e.target_2)))
        .map(|(e, t)| {
            let wave = t.samples().to_vec();
            match fx.mode {
                FeatureMode::RealImag => Target {
                    ri: Some(ri_pack(&fx.stft.analyze(&wave, PROCESSING_RATE))),
                    wave,
                    log: Vec::new(),
                    mixture_spec: Vec::new(),
                },
                FeatureMode::LogSpectrum => Target {
                    log: fx.features(&wave).0,
                    wave,
                    ri: None,
                    mixture_spec: fx.features(e.mixture.samples()).1,
                },
            }
        })
        .collect();
    Ok(PreparedBatch {
        mixture: fx.tensor(&mixes),
        references: fx.tensor(&refs),
        targets,
        padded_frames: fx.padded_frames(len),
    })
}

/// Training-mode forward pass, loss averaged over all `2B` estimates, and
/// (when the loss is finite) backward pass accumulating parameter gradients.
pub fn loss_and_backward<T: Scalar>(
    net: &mut SiameseUnet<T>,
    fx: &FeatureExtractor,
    batch: &PreparedBatch,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (out, cache) = net.forward_train(&batch.mixture.cast(), &batch.references.cast())?;
    let n = out.n;
    let scale = 1.0 / n as f64;
    let per_item: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let est: Vec<f64> = out.item(i).iter().map(|v| v.to_f64()).collect();
            let t = &batch.targets[i];
            match &t.ri {
                Some(ri) => ri_estimate_loss(&fx.stft, &est, batch.padded_frames, ri, &t.wave, weights, scale),
                None => ls_estimate_loss(
                    &fx.stft,
                    &est,
                    batch.padded_frames,
                    &t.mixture_spec,
                    &t.log,
                    &t.wave,
                    weights,
                    scale,
                ),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    // Both directions of an example are added first, so relabeling the two
    // speakers of every example leaves the sums bit-identical.
    let half = n / 2;
    let (mut sdr, mut mse) = (0.0, 0.0);
    for i in 0..half {
        let (a, b) = (&per_item[i].0, &per_item[half + i].0);
        sdr += a.si_sdr + b.si_sdr;
        mse += a.mse + b.mse;
    }
    for (l, _) in &per_item[2 * half..] {
        sdr += l.si_sdr;
        mse += l.mse;
    }
    let (sdr, mse) = (sdr * scale, mse * scale);
    let breakdown = LossBreakdown {
        si_sdr_pair: sdr,
        mse_pair: mse,
        combined: combined_loss(sdr, mse, weights),
    };
    if !breakdown.combined.is_finite() {
        return Ok(breakdown);
    }
    let mut dout = Tensor::zeros(out.n, out.c, out.h, out.w);
    for (i, (_, g)) in per_item.iter().enumerate() {
        for (d, v) in dout.item_mut(i).iter_mut().zip(g) {
            *d = T::from_f64(*v);
        }
    }
    net.backward(&cache, &dout);
    Ok(breakdown)
}

/// Estimates of `target_1` and `target_2` of a mixture given two references
/// (inference mode). References are tiled or truncated to the mixture length.
pub fn extract_many<T: Scalar>(
    net: &SiameseUnet<T>,
    fx: &FeatureExtractor,
    mixture: &AudioBuffer,
    references: &[&AudioBuffer],
) -> Result<Vec<AudioBuffer>> {
    if net.config().features != fx.mode {
        return Err(Error::ModelConfig("network and feature extractor disagree on feature mode".into()));
    }
    for a in std::iter::once(mixture).chain(references.iter().copied()) {
        if a.sample_rate() != PROCESSING_RATE {
            return Err(Error::invalid(format!(
                "signals must be at {PROCESSING_RATE} Hz, got {}",
                a.sample_rate()
            )));
        }
    }
    if mixture.is_empty() || references.is_empty() {
        return Err(Error::invalid("mixture and references must be non-empty"));
    }
    let len = mixture.len();
    let fitted = references
        .iter()
        .map(|r| fit_reference(r, len))
        .collect::<Result<Vec<_>>>()?;
    let mix_t = fx.tensor(&[mixture.samples()]);
    let refs: Vec<&[f64]> = fitted.iter().map(|r| r.samples()).collect();
    let ref_t = fx.tensor(&refs);
    let out = net.forward(&mix_t.cast(), &ref_t.cast())?;
    (0..out.n)
        .map(|i| {
            let item: Vec<f64> = out.item(i).iter().map(|v| v.to_f64()).collect();
            AudioBuffer::new(fx.reconstruct(&item, mixture.samples(), len)?, PROCESSING_RATE)
        })
        .collect()
}

/// Single-reference extraction.
pub fn extract<T: Scalar>(
    net: &SiameseUnet<T>,
    fx: &FeatureExtractor,
    mixture: &AudioBuffer,
    reference: &AudioBuffer,
) -> Result<AudioBuffer> {
    Ok(extract_many(net, fx, mixture, &[reference])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ExampleMeta;
    use crate::dsp::StftConfig;

    fn small() -> (ModelConfig, FeatureExtractor) {
        small_with(FeatureMode::RealImag)
    }

    fn small_with(mode: FeatureMode) -> (ModelConfig, FeatureExtractor) {
        let mut model = ModelConfig::from_widths(mode, &[3, 4]).unwrap();
        model.stft = StftConfig {
            frame_size: 32,
            hop: 8,
            keep_bins: 16,
            ..StftConfig::default()
        };
        let fx = FeatureExtractor::new(&model).unwrap();
        (model, fx)
    }

    fn example(len: usize, seed: f64) -> MixtureExample {
        let sig = |f: f64| AudioBuffer::new((0..len).map(|i| ((i as f64 + seed) * f).sin()).collect(), 8000).unwrap();
        let (t1, t2) = (sig(0.3), sig(1.1));
        let mix = AudioBuffer::new(t1.samples().iter().zip(t2.samples()).map(|(a, b)| a + b).collect(), 8000).unwrap();
        MixtureExample {
            mixture: mix,
            target_1: t1,
            target_2: t2,
            reference_1: sig(0.31),
            reference_2: sig(1.05),
            meta: ExampleMeta {
                speaker_1: "a".into(),
                speaker_2: "b".into(),
                utterance_1: "a/1".into(),
                utterance_2: "b/1".into(),
                reference_utterance_1: "a/2".into(),
                reference_utterance_2: "b/2".into(),
                scene: None,
                reference_scenes: None,
                snr_db: None,
                noise: None,
                target: None,
                gain_2_db: 0.0,
            },
        }
    }

    #[test]
    fn batch_layout_and_padding() {
        let (_, fx) = small();
        let b = prepare_batch(&fx, &[example(100, 0.0), example(100, 3.0)]).unwrap();
        // (100 + 24) / 8 -> 16 frames, already a multiple of 4.
        assert_eq!(b.mixture.shape(), (2, 2, 16, 16));
        assert_eq!(b.references.shape(), (4, 2, 16, 16));
        let b = prepare_batch(&fx, &[example(60, 0.0)]).unwrap();
        assert_eq!((fx.frames(60), b.padded_frames), (11, 12));
        assert_eq!(b.mixture.item(0)[11], 0.0);
        assert!(prepare_batch(&fx, &[example(60, 0.0), example(61, 0.0)]).is_err());
    }

    #[test]
    fn reconstruction_inverts_features() {
        for mode in [FeatureMode::RealImag, FeatureMode::LogSpectrum] {
            let (_, fx) = small_with(mode);
            let ex = example(120, 1.0);
            let t = fx.tensor(&[ex.target_1.samples()]);
            // Log-spectrum features take the mixture phase, so feed the
            // target as its own phase source.
            let out = fx.reconstruct(t.item(0), ex.target_1.samples(), 120).unwrap();
            let spec = fx.stft().analyze(ex.target_1.samples(), 8000);
            let direct = fx.stft().synthesize(spec.data(), spec.frames(), 120).unwrap();
            for (a, b) in out.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn extraction_shapes() {
        let (model, fx) = small();
        let net = SiameseUnet::<f32>::new(model, 1).unwrap();
        let ex = example(77, 0.0);
        let short_ref = ex.reference_1.slice(0, 10);
        let out = extract_many(&net, &fx, &ex.mixture, &[&short_ref, &ex.reference_2]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].len(), 77);
        let again = extract(&net, &fx, &ex.mixture, &short_ref).unwrap();
        assert_eq!(again, out[0]);
    }
}
