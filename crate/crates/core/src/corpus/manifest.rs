use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{apply_gain_jitter, draw_clean_example, make_noisy_example, NoiseBank, TargetKind};
use super::{ExampleMeta, LoadedCorpus, MixtureExample};
use crate::audio::{read_wav, write_wav, WavEncoding, PROCESSING_RATE};
use crate::error::{Error, Result};
use crate::room::{SceneRanges, UniformRange};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    Clean,
    Noisy,
}

impl std::str::FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(MixMode::Clean),
            "noisy" => Ok(MixMode::Noisy),
            _ => Err(Error::Config(format!("unknown mix mode `{s}` (expected clean or noisy)"))),
        }
    }
}

/// Everything that determines a synthesized split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub mode: MixMode,
    pub count: usize,
    pub seed: u64,
    /// Example durations are drawn uniformly from this range, seconds.
    pub duration_range: (f64, f64),
    pub scene_ranges: SceneRanges,
    pub snr_range: UniformRange,
    pub target: TargetKind,
    /// Source-2 gain jitter in dB for clean mixing; 0 disables it.
    pub gain_jitter_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: MixMode::Clean,
            count: 8,
            seed: 0,
            duration_range: (2.0, 8.0),
            scene_ranges: SceneRanges::default(),
            snr_range: UniformRange::new(10.0, 25.0),
            target: TargetKind::Image,
            gain_jitter_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub split: String,
    pub sample_rate: u32,
    pub count: usize,
    pub generator: SynthConfig,
}

/// One manifest line per example. Audio paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub num_samples: usize,
    pub mixture: String,
    pub target_1: String,
    pub target_2: String,
    pub reference_1: String,
    pub reference_2: String,
    #[serde(flatten)]
    pub meta: ExampleMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Line {
    Header(ManifestHeader),
    Example(ExampleRecord),
}

/// A manifest file and the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ExampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_example(&self, i: usize) -> Result<MixtureExample> {
        let r = &self.records[i];
        let load = |rel: &str| read_wav(self.root.join(rel));
        let ex = MixtureExample {
            mixture: load(&r.mixture)?,
            target_1: load(&r.target_1)?,
            target_2: load(&r.target_2)?,
            reference_1: load(&r.reference_1)?,
            reference_2: load(&r.reference_2)?,
            meta: r.meta.clone(),
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn load_all(&self) -> Result<Vec<MixtureExample>> {
        (0..self.len()).into_par_iter().map(|i| self.load_example(i)).collect()
    }
}

/// Writes the five signals of `ex` as float WAVs and returns its record.
fn write_example(root: &Path, split: &str, index: usize, ex: &MixtureExample) -> Result<ExampleRecord> {
    ex.validate()?;
    let dir_rel = format!("{split}/{index:06}");
    std::fs::create_dir_all(root.join(&dir_rel)).map_err(|e| Error::at_path(root.join(&dir_rel), e))?;
    let put = |name: &str, a: &crate::audio::AudioBuffer| -> Result<String> {
        let rel = format!("{dir_rel}/{name}.wav");
        write_wav(root.join(&rel), a, WavEncoding::Float32)?;
        Ok(rel)
    };
    Ok(ExampleRecord {
        index,
        num_samples: ex.len(),
        mixture: put("mixture", &ex.mixture)?,
        target_1: put("target_1", &ex.target_1)?,
        target_2: put("target_2", &ex.target_2)?,
        reference_1: put("reference_1", &ex.reference_1)?,
        reference_2: put("reference_2", &ex.reference_2)?,
        meta: ex.meta.clone(),
    })
}

fn write_lines(path: &Path, header: &ManifestHeader, records: &[ExampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n").map_err(|e| Error::at_path(path, e))
    };
    put(&Line::Header(header.clone()))?;
    for r in records {
        put(&Line::Example(r.clone()))?;
    }
    w.flush().map_err(|e| Error::at_path(path, e))
}

fn manifest_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Stores `examples` next to `path` and writes the manifest itself.
pub fn write_manifest(path: &Path, header: &ManifestHeader, examples: &[MixtureExample]) -> Result<DatasetManifest> {
    let root = manifest_root(path);
    let records = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| write_example(&root, &header.split, i, ex))
        .collect::<Result<Vec<_>>>()?;
    let header = ManifestHeader {
        count: records.len(),
        ..header.clone()
    };
    write_lines(path, &header, &records)?;
    Ok(DatasetManifest { root, header, records })
}

/// Reads a manifest and checks that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::at_path(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let integrity = |m: String| Error::ManifestIntegrity(format!("{}: {m}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| integrity("empty file".into()))?
        .map_err(|e| Error::at_path(path, e))?;
    let header = match serde_json::from_str::<serde_json::Value>(&first) {
        Ok(v) => {
            let version = v.get("format_version").and_then(|x| x.as_u64());
            if let Some(found) = version.filter(|&f| f != MANIFEST_VERSION as u64) {
                return Err(Error::UnsupportedVersion {
                    found: found as u32,
                    expected: MANIFEST_VERSION,
                });
            }
            match serde_json::from_value::<Line>(v) {
                Ok(Line::Header(h)) => h,
                _ => return Err(integrity("first line is not a header".into())),
            }
        }
        Err(e) => return Err(integrity(format!("header: {e}"))),
    };
    let root = manifest_root(path);
    let mut records = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::at_path(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match serde_json::from_str::<Line>(&line) {
            Ok(Line::Example(r)) => r,
            Ok(Line::Header(_)) => return Err(integrity(format!("line {}: second header", n + 2))),
            Err(e) => return Err(integrity(format!("line {}: {e}", n + 2))),
        };
        for rel in [&rec.mixture, &rec.target_1, &rec.target_2, &rec.reference_1, &rec.reference_2] {
            if !root.join(rel).is_file() {
                return Err(integrity(format!("example {} references missing file {rel}", rec.index)));
            }
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(integrity(format!(
            "header announces {} examples, found {}",
            header.count,
            records.len()
        )));
    }
    Ok(DatasetManifest { root, header, records })
}

/// Generator for example `index`: every example has its own ChaCha stream,
/// so output does not depend on scheduling.
fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Synthesizes `cfg.count` examples in parallel and writes them with their
/// manifest to `path`. Noisy mode needs a noise bank.
pub fn synthesize_dataset(
    path: &Path,
    split: &str,
    corpus: &LoadedCorpus,
    noise: Option<&NoiseBank>,
    cfg: &SynthConfig,
) -> Result<DatasetManifest> {
    let (lo, hi) = cfg.duration_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!("bad duration range [{lo}, {hi}]")));
    }
    cfg.scene_ranges.validate()?;
    let noise = match (cfg.mode, noise) {
        (MixMode::Noisy, None) => return Err(Error::Config("noisy mode needs a noise directory".into())),
        (_, n) => n,
    };
    let root = manifest_root(path);
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = example_rng(cfg.seed, i);
            let duration = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let mut ex = draw_clean_example(&mut rng, corpus, cfg.duration_range, duration)?;
            apply_gain_jitter(&mut rng, &mut ex, cfg.gain_jitter_db);
            if cfg.mode == MixMode::Noisy {
                let bank = noise.expect("checked above");
                ex = make_noisy_example(&mut rng, &ex, &cfg.scene_ranges, bank, cfg.snr_range, cfg.target)?;
            }
            write_example(&root, split, i, &ex)
        })
        .collect::<Result<Vec<_>>>()?;
    let header = ManifestHeader {
        format_version: MANIFEST_VERSION,
        split: split.to_string(),
        sample_rate: PROCESSING_RATE,
        count: records.len(),
        generator: cfg.clone(),
    };
    write_lines(path, &header, &records)?;
    Ok(DatasetManifest { root, header, records })
}
