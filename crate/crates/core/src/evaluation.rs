//! Metrics, projection decomposition, baselines and test-set reports.
//!
//! SDR and SIR use a time-invariant decomposition: the estimate is projected
//! onto the target and onto span{target, interference} with scalar gains, not
//! with the long FIR filters of the usual BSS toolkits. Values order systems
//! correctly but are not numerically comparable to those toolkits.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer, WavEncoding};
use crate::corpus::{DatasetManifest, MixtureExample};
use crate::dsp::{Stft, StftConfig};
use crate::error::{Error, Result};
use crate::net::{FeatureMode, SiameseUnet};
use crate::objectives::{si_sdr_slices, SI_SDR_CAP_DB, SI_SDR_EPS};
use crate::pipeline::{extract_many, FeatureExtractor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `si_sdr(target, estimate) - si_sdr(target, mixture)` in dB.
pub fn si_sdri(target: &[f64], estimate: &[f64], mixture: &[f64]) -> Result<f64> {
    check_len(target, estimate)?;
    check_len(target, mixture)?;
    Ok(si_sdr_slices(target, estimate)? - si_sdr_slices(target, mixture)?)
}

/// Orthogonal split of an estimate into target, interference and artifact
/// parts; the three parts add up to the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

pub fn decompose(estimate: &[f64], target: &[f64], interference: &[f64]) -> Result<Decomposition> {
    check_len(estimate, target)?;
    check_len(estimate, interference)?;
    let tt = dot(target, target);
    let ii = dot(interference, interference);
    let ti = dot(target, interference);
    let det = tt * ii - ti * ti;
    // Relative test: det / (tt ii) is sin^2 of the angle between the sources.
    if !(tt > 0.0 && ii > 0.0) || det <= 1e-12 * tt * ii {
        return Err(Error::invalid("target and interference are collinear or silent"));
    }
    let et = dot(estimate, target);
    let ei = dot(estimate, interference);
    let g = et / tt;
    let a = (ii * et - ti * ei) / det;
    let b = (tt * ei - ti * et) / det;
    let n = estimate.len();
    let mut s_target = vec![0.0; n];
    let mut e_interf = vec![0.0; n];
    let mut e_artif = vec![0.0; n];
    for k in 0..n {
        let s = g * target[k];
        let p = a * target[k] + b * interference[k];
        s_target[k] = s;
        e_interf[k] = p - s;
        e_artif[k] = estimate[k] - p;
    }
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

fn ratio_db(signal: f64, error: f64) -> f64 {
    if signal == 0.0 {
        return -SI_SDR_CAP_DB;
    }
    if error * 10f64.powf(SI_SDR_CAP_DB / 10.0) <= signal {
        return SI_SDR_CAP_DB;
    }
    (10.0 * (signal / (error + SI_SDR_EPS) + SI_SDR_EPS).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
}

/// `10 log10(|s_target|^2 / |e_interf + e_artif|^2)`, capped like SI-SDR.
///
/// `e_artif` is orthogonal to `e_interf`, so the error energy is summed
/// per component; a direct sum can round below `|e_interf|^2` when the
/// artifact term is pure roundoff.
pub fn sdr(d: &Decomposition) -> f64 {
    let err = dot(&d.e_interf, &d.e_interf) + dot(&d.e_artif, &d.e_artif);
    ratio_db(dot(&d.s_target, &d.s_target), err)
}

/// `10 log10(|s_target|^2 / |e_interf|^2)`, capped like SI-SDR.
pub fn sir(d: &Decomposition) -> f64 {
    ratio_db(dot(&d.s_target, &d.s_target), dot(&d.e_interf, &d.e_interf))
}

/// Target magnitude with mixture phase, resynthesized to the target length.
pub fn oracle_mask_baseline(stft: &Stft, mixture: &AudioBuffer, target: &AudioBuffer) -> Result<AudioBuffer> {
    check_len(mixture.samples(), target.samples())?;
    let mix = stft.analyze(mixture.samples(), mixture.sample_rate());
    let tgt = stft.analyze(target.samples(), target.sample_rate());
    let spec: Vec<Complex64> = mix
        .data()
        .iter()
        .zip(tgt.data())
        .map(|(m, t)| {
            let r = m.norm();
            if r == 0.0 { Complex64::new(0.0, 0.0) } else { m / r * t.norm() }
        })
        .collect();
    AudioBuffer::new(stft.synthesize(&spec, mix.frames(), target.len())?, target.sample_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Mixture,
    OracleMask,
    ProposedRi,
    ProposedLs,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Mixture => "mixture",
            System::OracleMask => "oracle-mask",
            System::ProposedRi => "proposed-ri",
            System::ProposedLs => "proposed-ls",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, System::ProposedRi | System::ProposedLs)
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(System::Mixture),
            "oracle" | "oracle-mask" => Ok(System::OracleMask),
            "proposed" | "proposed-ri" => Ok(System::ProposedRi),
            "proposed-ls" => Ok(System::ProposedLs),
            other => Err(Error::invalid(format!(
                "unknown system `{other}` (expected mixture, oracle, proposed or proposed-ls)"
            ))),
        }
    }
}

/// Metrics for one speaker of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example: usize,
    /// 1 or 2: which target of the example was extracted.
    pub speaker: u8,
    pub speaker_id: String,
    pub si_sdr: f64,
    pub si_sdri: f64,
    pub sdr: f64,
    pub sir: f64,
    pub snr_db: Option<f64>,
    pub t60: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
        Self { mean, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub system: System,
    pub records: usize,
    pub si_sdr: Aggregate,
    pub si_sdri: Aggregate,
    pub sdr: Aggregate,
    pub sir: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: System,
    pub records: Vec<EvalRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ReportLine<'a> {
    Record(&'a EvalRecord),
    Summary(&'a Summary),
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        let r = &self.records;
        Summary {
            system: self.system,
            records: r.len(),
            si_sdr: Aggregate::of(r.iter().map(|x| x.si_sdr)),
            si_sdri: Aggregate::of(r.iter().map(|x| x.si_sdri)),
            sdr: Aggregate::of(r.iter().map(|x| x.sdr)),
            sir: Aggregate::of(r.iter().map(|x| x.sir)),
        }
    }

    /// One JSON object per record, then one summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ReportLine::Record(r)).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&ReportLine::Summary(&self.summary())).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::at_path(path, e))
    }

    pub fn summary_table(&self) -> String {
        let s = self.summary();
        let mut t = String::new();
        let _ = writeln!(t, "system: {}  records: {}", s.system.as_str(), s.records);
        let _ = writeln!(t, "{:<8} {:>10} {:>10}", "metric", "mean dB", "median dB");
        for (name, a) in [("SI-SDR", s.si_sdr), ("SI-SDRi", s.si_sdri), ("SDR", s.sdr), ("SIR", s.sir)] {
            let _ = writeln!(t, "{name:<8} {:>10.2} {:>10.2}", a.mean, a.median);
        }
        t
    }
}

/// Metrics of an estimate of `target`, where everything else in the
/// mixture counts as interference.
fn score(
    example: usize,
    speaker: u8,
    ex: &MixtureExample,
    target: &AudioBuffer,
    estimate: &AudioBuffer,
) -> Result<EvalRecord> {
    let (t, m, e) = (target.samples(), ex.mixture.samples(), estimate.samples());
    let interference: Vec<f64> = m.iter().zip(t).map(|(a, b)| a - b).collect();
    let d = decompose(e, t, &interference)?;
    Ok(EvalRecord {
        example,
        speaker,
        speaker_id: if speaker == 1 { ex.meta.speaker_1.clone() } else { ex.meta.speaker_2.clone() },
        si_sdr: si_sdr_slices(t, e)?,
        si_sdri: si_sdri(t, e, m)?,
        sdr: sdr(&d),
        sir: sir(&d),
        snr_db: ex.meta.snr_db,
        t60: ex.meta.scene.as_ref().map(|s| s.t60),
    })
}

/// Estimates of both targets of one example under `system`.
pub fn estimate_example(
    system: System,
    ex: &MixtureExample,
    net: Option<&SiameseUnet<f32>>,
    fx: Option<&FeatureExtractor>,
    stft: &Stft,
) -> Result<[AudioBuffer; 2]> {
    match system {
        System::Mixture => Ok([ex.mixture.clone(), ex.mixture.clone()]),
        System::OracleMask => Ok([
            oracle_mask_baseline(stft, &ex.mixture, &ex.target_1)?,
            oracle_mask_baseline(stft, &ex.mixture, &ex.target_2)?,
        ]),
        System::ProposedRi | System::ProposedLs => {
            let (Some(net), Some(fx)) = (net, fx) else {
                return Err(Error::invalid(format!("system {} needs a trained model", system.as_str())));
            };
            let mut out = extract_many(net, fx, &ex.mixture, &[&ex.reference_1, &ex.reference_2])?;
            let second = out.pop().expect("two estimates");
            let first = out.pop().expect("two estimates");
            Ok([first, second])
        }
    }
}

/// Evaluates every example of `manifest` (both speakers, each with its own
/// reference). `dump_dir` receives `<index>_<speaker>.wav` estimates.
pub fn evaluate_system(
    system: System,
    manifest: &DatasetManifest,
    net: Option<&SiameseUnet<f32>>,
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    let fx = match (system, net) {
        (System::ProposedRi | System::ProposedLs, Some(net)) => {
            let want = if system == System::ProposedRi { FeatureMode::RealImag } else { FeatureMode::LogSpectrum };
            if net.config().features != want {
                return Err(Error::ModelConfig(format!(
                    "system {} requires a {:?} model, checkpoint holds {:?}",
                    system.as_str(),
                    want,
                    net.config().features
                )));
            }
            Some(FeatureExtractor::new(net.config())?)
        }
        (s, None) if s.needs_model() => {
            return Err(Error::invalid(format!("system {} needs a checkpoint", s.as_str())));
        }
        _ => None,
    };
    let stft = Stft::new(net.map_or_else(StftConfig::default, |n| n.config().stft))?;
    if let Some(d) = dump_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::at_path(d, e))?;
    }
    let per_example = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let ex = manifest.load_example(i)?;
            let est = estimate_example(system, &ex, net, fx.as_ref(), &stft)?;
            if let Some(d) = dump_dir {
                for (k, e) in est.iter().enumerate() {
                    write_wav(d.join(format!("{i:06}_{}.wav", k + 1)), e, WavEncoding::Float32)?;
                }
            }
            Ok([score(i, 1, &ex, &ex.target_1, &est[0])?, score(i, 2, &ex, &ex.target_2, &est[1])?])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        system,
        records: per_example.into_iter().flatten().collect(),
    })
}
