use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LoadedCorpus;
use crate::audio::{read_wav, AudioBuffer, PROCESSING_RATE};
use crate::dsp::resample;
use crate::error::{Error, Result};
use crate::room::{convolve, generate_rir, sample_scene, SceneRanges, SceneSpec, UniformRange};

/// Stored signals are rounded to multiples of 2^-20. Sums of two or three
/// such values (below 8 in magnitude) are exact in both `f64` and `f32`, so
/// mixtures equal the sum of their parts in memory and on disk alike.
const GRID: f64 = (1u64 << 20) as f64;
const MAX_NOISE_DRAWS: usize = 100;

fn on_grid(x: Vec<f64>) -> AudioBuffer {
    AudioBuffer::from_trusted(x.into_iter().map(|v| (v * GRID).round() / GRID).collect(), PROCESSING_RATE)
}

fn sum(parts: &[&AudioBuffer]) -> Vec<f64> {
    let mut out = parts[0].samples().to_vec();
    for p in &parts[1..] {
        for (o, v) in out.iter_mut().zip(p.samples()) {
            *o += v;
        }
    }
    out
}

/// Training/evaluation target in reverberant examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Each source convolved with its room response.
    #[default]
    Image,
    /// The dry source.
    Dry,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(TargetKind::Image),
            "dry" => Ok(TargetKind::Dry),
            _ => Err(Error::Config(format!("unknown target kind `{s}` (expected image or dry)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub speaker_1: String,
    pub speaker_2: String,
    pub utterance_1: String,
    pub utterance_2: String,
    pub reference_utterance_1: String,
    pub reference_utterance_2: String,
    /// Shared room of the two mixed sources (noisy mode).
    pub scene: Option<SceneSpec>,
    /// Independent rooms of the two references (noisy mode).
    pub reference_scenes: Option<[SceneSpec; 2]>,
    pub snr_db: Option<f64>,
    pub noise: Option<String>,
    pub target: Option<TargetKind>,
    /// Gain applied to source 2 before mixing (0 unless jitter is enabled).
    #[serde(default)]
    pub gain_2_db: f64,
}

/// Two-talker mixture with both targets and both references.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: AudioBuffer,
    pub target_1: AudioBuffer,
    pub target_2: AudioBuffer,
    pub reference_1: AudioBuffer,
    pub reference_2: AudioBuffer,
    pub meta: ExampleMeta,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    fn signals(&self) -> [&AudioBuffer; 5] {
        [&self.mixture, &self.target_1, &self.target_2, &self.reference_1, &self.reference_2]
    }

    /// All five signals share one length and sample rate.
    pub fn validate(&self) -> Result<()> {
        let (n, fs) = (self.mixture.len(), self.mixture.sample_rate());
        if self.signals().iter().any(|s| s.len() != n || s.sample_rate() != fs) {
            return Err(Error::invalid("example signals differ in length or sample rate"));
        }
        Ok(())
    }

    /// The same example with the roles of the two speakers exchanged.
    pub fn swapped(&self) -> Self {
        let mut meta = self.meta.clone();
        std::mem::swap(&mut meta.speaker_1, &mut meta.speaker_2);
        std::mem::swap(&mut meta.utterance_1, &mut meta.utterance_2);
        std::mem::swap(&mut meta.reference_utterance_1, &mut meta.reference_utterance_2);
        if let Some(r) = meta.reference_scenes.as_mut() {
            r.swap(0, 1);
        }
        if let Some(s) = meta.scene.as_mut() {
            s.source_pos.swap(0, 1);
        }
        Self {
            mixture: self.mixture.clone(),
            target_1: self.target_2.clone(),
            target_2: self.target_1.clone(),
            reference_1: self.reference_2.clone(),
            reference_2: self.reference_1.clone(),
            meta,
        }
    }

    /// Crops all signals to `[start, start + len)`.
    pub fn cropped(&self, start: usize, len: usize) -> Self {
        Self {
            mixture: self.mixture.slice(start, len),
            target_1: self.target_1.slice(start, len),
            target_2: self.target_2.slice(start, len),
            reference_1: self.reference_1.slice(start, len),
            reference_2: self.reference_2.slice(start, len),
            meta: self.meta.clone(),
        }
    }
}

/// Repeats `reference` end to end and truncates to `target_len`.
pub fn fit_reference(reference: &AudioBuffer, target_len: usize) -> Result<AudioBuffer> {
    if reference.is_empty() {
        return Err(Error::invalid("reference is empty"));
    }
    let r = reference.samples();
    let out = (0..target_len).map(|i| r[i % r.len()]).collect();
    AudioBuffer::new(out, reference.sample_rate())
}

/// Random `len`-sample window of `audio`; shorter inputs are zero-padded.
fn random_segment<R: Rng + ?Sized>(rng: &mut R, audio: &AudioBuffer, len: usize) -> AudioBuffer {
    if audio.len() <= len {
        return audio.with_len(len);
    }
    let start = rng.random_range(0..=audio.len() - len);
    audio.slice(start, len)
}

/// Draws two distinct speakers, a mixed utterance and a different reference
/// utterance for each, crops the mixed utterances to `batch_duration`
/// seconds and sums them.
pub fn draw_clean_example<R: Rng + ?Sized>(
    rng: &mut R,
    corpus: &LoadedCorpus,
    duration_range: (f64, f64),
    batch_duration: f64,
) -> Result<MixtureExample> {
    let (lo, hi) = duration_range;
    if !(lo > 0.0 && lo <= hi) || !(lo..=hi).contains(&batch_duration) {
        return Err(Error::invalid(format!(
            "batch duration {batch_duration} s outside [{lo}, {hi}] s"
        )));
    }
    let speakers = &corpus.speakers;
    if speakers.len() < 2 || speakers.iter().any(|s| s.utterances.len() < 2) {
        return Err(Error::invalid("need two speakers with at least two utterances each"));
    }
    let len = (batch_duration * PROCESSING_RATE as f64).round() as usize;
    let a = rng.random_range(0..speakers.len());
    let mut b = rng.random_range(0..speakers.len() - 1);
    if b >= a {
        b += 1;
    }
    let mut pick = |spk: usize| -> Result<(AudioBuffer, AudioBuffer, String, String)> {
        let utts = &speakers[spk].utterances;
        let u = rng.random_range(0..utts.len());
        let mut r = rng.random_range(0..utts.len() - 1);
        if r >= u {
            r += 1;
        }
        let seg = random_segment(rng, &utts[u].1, len);
        let reference = fit_reference(&utts[r].1, len)?;
        Ok((seg, reference, utts[u].0.clone(), utts[r].0.clone()))
    };
    let (s1, r1, u1, ru1) = pick(a)?;
    let (s2, r2, u2, ru2) = pick(b)?;
    let target_1 = on_grid(s1.into_samples());
    let target_2 = on_grid(s2.into_samples());
    let mixture = AudioBuffer::from_trusted(sum(&[&target_1, &target_2]), PROCESSING_RATE);
    Ok(MixtureExample {
        mixture,
        target_1,
        target_2,
        reference_1: on_grid(r1.into_samples()),
        reference_2: on_grid(r2.into_samples()),
        meta: ExampleMeta {
            speaker_1: speakers[a].id.clone(),
            speaker_2: speakers[b].id.clone(),
            utterance_1: u1,
            utterance_2: u2,
            reference_utterance_1: ru1,
            reference_utterance_2: ru2,
            scene: None,
            reference_scenes: None,
            snr_db: None,
            noise: None,
            target: None,
            gain_2_db: 0.0,
        },
    })
}

/// Rescales source 2 of a clean example by a gain drawn from
/// `U[-max_db, max_db]` and re-forms the mixture.
pub(crate) fn apply_gain_jitter<R: Rng + ?Sized>(rng: &mut R, ex: &mut MixtureExample, max_db: f64) {
    if max_db <= 0.0 {
        return;
    }
    let db = rng.random_range(-max_db..=max_db);
    ex.target_2 = on_grid(ex.target_2.scaled(10f64.powf(db / 20.0)).into_samples());
    ex.mixture = AudioBuffer::from_trusted(sum(&[&ex.target_1, &ex.target_2]), PROCESSING_RATE);
    ex.meta.gain_2_db = db;
}

/// Noise recordings at the processing rate.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub clips: Vec<(String, AudioBuffer)>,
}

impl NoiseBank {
    /// Loads every mono WAV below `dir` (sorted by path).
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::at_path(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "noise directory not found"),
            ));
        }
        let mut clips = Vec::new();
        for entry in walkdir::WalkDir::new(dir).sort_by_file_name().follow_links(true) {
            let entry = entry.map_err(|e| Error::at_path(dir, e.into()))?;
            let p = entry.path();
            if !entry.file_type().is_file() || !p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                continue;
            }
            let id = p.strip_prefix(dir).expect("below root").with_extension("");
            clips.push((id.to_string_lossy().replace('\\', "/"), resample(&read_wav(p)?, PROCESSING_RATE)?));
        }
        Self::from_clips(clips).map_err(|_| Error::EmptyCorpus(dir.to_path_buf()))
    }

    pub fn from_clips(clips: Vec<(String, AudioBuffer)>) -> Result<Self> {
        let clips: Vec<_> = clips.into_iter().filter(|(_, a)| !a.is_empty()).collect();
        if clips.is_empty() {
            return Err(Error::invalid("noise bank is empty"));
        }
        Ok(Self { clips })
    }

    /// A `len`-sample excerpt starting at a random offset, wrapping around.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> (String, Vec<f64>) {
        let (id, clip) = &self.clips[rng.random_range(0..self.clips.len())];
        let s = clip.samples();
        let off = rng.random_range(0..s.len());
        (id.clone(), (0..len).map(|i| s[(off + i) % s.len()]).collect())
    }
}

/// Places the two dry sources of `clean` in a sampled room, convolves each
/// reference with the response of its own independently sampled room, and
/// adds noise so that `10 log10(P(image_1 + image_2) / P(noise))` equals an
/// SNR drawn from `snr_range`.
pub fn make_noisy_example<R: Rng + ?Sized>(
    rng: &mut R,
    clean: &MixtureExample,
    ranges: &SceneRanges,
    noise: &NoiseBank,
    snr_range: UniformRange,
    target: TargetKind,
) -> Result<MixtureExample> {
    clean.validate()?;
    let fs = PROCESSING_RATE;
    let n = clean.len();
    let scene = sample_scene(rng, ranges, 2)?;
    let ref_scenes = [sample_scene(rng, ranges, 1)?, sample_scene(rng, ranges, 1)?];
    let snr_db = snr_range.sample(rng);
    let image = |src: &AudioBuffer, sc: &SceneSpec, i: usize| -> Result<AudioBuffer> {
        Ok(on_grid(convolve(src, &generate_rir(sc, i, fs)?)?.into_samples()))
    };
    let image_1 = image(&clean.target_1, &scene, 0)?;
    let image_2 = image(&clean.target_2, &scene, 1)?;
    let reference_1 = image(&clean.reference_1, &ref_scenes[0], 0)?;
    let reference_2 = image(&clean.reference_2, &ref_scenes[1], 0)?;
    let speech = AudioBuffer::from_trusted(sum(&[&image_1, &image_2]), fs);
    let p_speech = speech.power();
    if p_speech == 0.0 {
        return Err(Error::invalid("reverberant speech mixture is silent"));
    }
    let mut drawn = None;
    for _ in 0..MAX_NOISE_DRAWS {
        let (id, seg) = noise.draw(rng, n);
        let p: f64 = seg.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
        if p > 0.0 {
            drawn = Some((id, seg, p));
            break;
        }
    }
    let (noise_id, seg, p_noise) = drawn.ok_or(Error::SamplingFailure(MAX_NOISE_DRAWS))?;
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise = on_grid(seg.iter().map(|v| v * gain).collect());
    let mixture = AudioBuffer::from_trusted(sum(&[&image_1, &image_2, &scaled_noise]), fs);
    let (target_1, target_2) = match target {
        TargetKind::Image => (image_1, image_2),
        TargetKind::Dry => (clean.target_1.clone(), clean.target_2.clone()),
    };
    let mut meta = clean.meta.clone();
    meta.scene = Some(scene);
    meta.reference_scenes = Some(ref_scenes);
    meta.snr_db = Some(snr_db);
    meta.noise = Some(noise_id);
    meta.target = Some(target);
    Ok(MixtureExample {
        mixture,
        target_1,
        target_2,
        reference_1,
        reference_2,
        meta,
    })
}

/// SNR of an image-target example measured from its stored signals:
/// speech is `target_1 + target_2`, noise is the remainder of the mixture.
pub fn measured_snr_db(ex: &MixtureExample) -> Result<f64> {
    if ex.meta.target != Some(TargetKind::Image) {
        return Err(Error::invalid("SNR is only measurable on image-target examples"));
    }
    let speech = sum(&[&ex.target_1, &ex.target_2]);
    let (mut ps, mut pn) = (0.0, 0.0);
    for (s, m) in speech.iter().zip(ex.mixture.samples()) {
        ps += s * s;
        pn += (m - s) * (m - s);
    }
    Ok(10.0 * (ps / pn).log10())
}
