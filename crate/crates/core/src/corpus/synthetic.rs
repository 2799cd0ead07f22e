//! Speech-like test material: voiced syllables with a speaker-specific
//! pitch and formant scale, plus babble noise made of several such voices.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioBuffer, WavEncoding};
use crate::error::{Error, Result};

/// Vowel formant frequencies (Hz) of an adult male voice.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];

/// Speaker characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    /// Mean fundamental frequency, Hz.
    pub f0: f64,
    /// Multiplier on all formant frequencies.
    pub formant_scale: f64,
    /// Relative depth of the slow pitch movement.
    pub intonation: f64,
}

impl Voice {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            f0: rng.random_range(85.0..260.0),
            formant_scale: rng.random_range(0.9..1.25),
            intonation: rng.random_range(0.05..0.2),
        }
    }
}

fn envelope(f: f64, formants: &[f64; 3]) -> f64 {
    let mut a = 0.0;
    for (fc, bw) in formants.iter().zip(BANDWIDTHS) {
        let x = (f - fc) / bw;
        a += 1.0 / (1.0 + x * x);
    }
    // Glottal roll-off.
    a / (1.0 + f / 800.0)
}

/// `seconds` of syllables separated by short pauses, peak-normalized to 0.5.
pub fn utterance<R: Rng + ?Sized>(rng: &mut R, voice: &Voice, seconds: f64, sample_rate: u32) -> AudioBuffer {
    let fs = sample_rate as f64;
    let n = (seconds * fs).round() as usize;
    let nyq = 0.45 * fs;
    let mut out = vec![0.0; n];
    let mut pos = (rng.random_range(0.0..0.15) * fs) as usize;
    let mut phases = vec![0.0f64; 64];
    let block = (fs / 200.0).max(1.0) as usize;
    let contour_rate = rng.random_range(0.3..0.8);
    while pos < n {
        let syl = (rng.random_range(0.12..0.32) * fs) as usize;
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())].map(|f| f * voice.formant_scale);
        let pitch_offset = rng.random_range(-0.08..0.08);
        let end = (pos + syl).min(n);
        let mut t0 = pos;
        while t0 < end {
            let t1 = (t0 + block).min(end);
            let time = t0 as f64 / fs;
            let f0 = voice.f0 * (1.0 + pitch_offset + voice.intonation * (2.0 * PI * contour_rate * time).sin());
            let harmonics = ((nyq / f0) as usize).min(phases.len());
            let amps: Vec<f64> = (1..=harmonics).map(|h| envelope(h as f64 * f0, &vowel)).collect();
            for (i, sample) in out[t0..t1].iter_mut().enumerate() {
                let u = (t0 + i - pos) as f64 / syl as f64;
                let env = (PI * u).sin().powf(0.6);
                let mut s = 0.0;
                for (h, a) in amps.iter().enumerate() {
                    phases[h] += 2.0 * PI * (h + 1) as f64 * f0 / fs;
                    s += a * phases[h].sin();
                }
                *sample = env * s + env * 0.02 * rng.random_range(-1.0..1.0);
            }
            t0 = t1;
        }
        for p in &mut phases {
            *p %= 2.0 * PI;
        }
        pos = end + (rng.random_range(0.03..0.2) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::new(out, sample_rate).expect("finite samples")
}

/// Sum of `talkers` independent voices, peak-normalized to 0.5.
pub fn babble<R: Rng + ?Sized>(rng: &mut R, talkers: usize, seconds: f64, sample_rate: u32) -> AudioBuffer {
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut acc = vec![0.0; n];
    for _ in 0..talkers.max(1) {
        let v = Voice::random(rng);
        for (a, s) in acc.iter_mut().zip(utterance(rng, &v, seconds, sample_rate).samples()) {
            *a += s;
        }
    }
    let peak = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        acc.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::new(acc, sample_rate).expect("finite samples")
}

/// Writes `<dir>/spkNN/uttMM.wav` (16-bit PCM) for a synthetic corpus whose
/// utterance lengths are drawn from `seconds`.
pub fn write_corpus(
    dir: &Path,
    speakers: usize,
    utterances: usize,
    seconds: (f64, f64),
    sample_rate: u32,
    seed: u64,
) -> Result<()> {
    if speakers == 0 || utterances == 0 || !(seconds.0 > 0.0 && seconds.0 <= seconds.1) {
        return Err(Error::invalid("synthetic corpus needs speakers, utterances and a positive length range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..speakers {
        let voice = Voice::random(&mut rng);
        let sdir = dir.join(format!("spk{s:02}"));
        std::fs::create_dir_all(&sdir).map_err(|e| Error::at_path(&sdir, e))?;
        for u in 0..utterances {
            let len = rng.random_range(seconds.0..=seconds.1);
            let a = utterance(&mut rng, &voice, len, sample_rate);
            write_wav(sdir.join(format!("utt{u:02}.wav")), &a, WavEncoding::Pcm16)?;
        }
    }
    Ok(())
}

/// Writes `<dir>/babbleNN.wav` noise files.
pub fn write_noise(dir: &Path, files: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..files {
        let a = babble(&mut rng, 6, seconds, sample_rate);
        write_wav(dir.join(format!("babble{i:02}.wav")), &a, WavEncoding::Pcm16)?;
    }
    Ok(())
}
