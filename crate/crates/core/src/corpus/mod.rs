//! Speech corpora, speaker splits, mixture synthesis and dataset manifests.

mod manifest;
mod mix;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioBuffer, PROCESSING_RATE};
use crate::dsp::resample;
use crate::error::{Error, Result};

pub use manifest::{
    read_manifest, synthesize_dataset, write_manifest, DatasetManifest, ExampleRecord, ManifestHeader, MixMode,
    SynthConfig, MANIFEST_VERSION,
};
pub use mix::{
    draw_clean_example, fit_reference, make_noisy_example, measured_snr_db, ExampleMeta, MixtureExample,
    NoiseBank, TargetKind,
};

/// How a file path (relative to the corpus root) maps to a speaker id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutRule {
    /// First directory below the root (`<root>/<speaker>/.../<file>.wav`).
    TopDir,
    /// Directory that directly contains the file.
    ParentDir,
    /// File stem up to the first occurrence of the separator
    /// (`<speaker>-<chapter>-<n>.wav` with `-`).
    FilenamePrefix(char),
}

impl LayoutRule {
    fn speaker_of(&self, rel: &Path) -> Option<String> {
        match self {
            LayoutRule::TopDir => {
                let mut comps = rel.components();
                let first = comps.next()?;
                comps.next()?;
                Some(first.as_os_str().to_string_lossy().into_owned())
            }
            LayoutRule::ParentDir => {
                let parent = rel.parent()?.file_name()?;
                Some(parent.to_string_lossy().into_owned())
            }
            LayoutRule::FilenamePrefix(sep) => {
                let stem = rel.file_stem()?.to_string_lossy();
                let (spk, _) = stem.split_once(*sep)?;
                (!spk.is_empty()).then(|| spk.to_string())
            }
        }
    }
}

impl std::str::FromStr for LayoutRule {
    type Err = Error;

    /// `top-dir`, `parent-dir` or `prefix:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top-dir" => Ok(LayoutRule::TopDir),
            "parent-dir" => Ok(LayoutRule::ParentDir),
            _ => {
                let sep = s.strip_prefix("prefix:").map(|r| r.chars().collect::<Vec<_>>());
                match sep.as_deref() {
                    Some([c]) => Ok(LayoutRule::FilenamePrefix(*c)),
                    _ => Err(Error::Config(format!(
                        "unknown layout `{s}` (expected top-dir, parent-dir or prefix:<char>)"
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Path relative to the corpus root, without extension, `/`-separated.
    pub id: String,
    pub path: PathBuf,
    pub sample_rate: u32,
    pub num_samples: usize,
}

/// Speakers and their utterances. Every speaker has at least two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub speakers: BTreeMap<String, Vec<Utterance>>,
}

/// Result of [`scan_corpus`] with counts of what was left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanReport {
    pub index: CorpusIndex,
    pub undecodable: usize,
    pub unassigned: usize,
    pub single_utterance_speakers: usize,
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Indexes every decodable mono WAV below `root`. Speakers with a single
/// utterance cannot supply a separate reference and are dropped.
pub fn scan_corpus(root: &Path, layout: &LayoutRule) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::at_path(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let mut speakers: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
    let (mut undecodable, mut unassigned) = (0, 0);
    let walker = walkdir::WalkDir::new(root).sort_by_file_name().follow_links(true);
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::at_path(&path, e.into())
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || !is_wav(path) {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays below root");
        let Some(speaker) = layout.speaker_of(rel) else {
            unassigned += 1;
            continue;
        };
        let spec = match hound::WavReader::open(path) {
            Ok(r) if r.spec().channels == 1 && r.duration() > 0 => (r.spec().sample_rate, r.duration() as usize),
            _ => {
                undecodable += 1;
                continue;
            }
        };
        let id = rel.with_extension("").components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        speakers.entry(speaker).or_default().push(Utterance {
            id,
            path: path.to_path_buf(),
            sample_rate: spec.0,
            num_samples: spec.1,
        });
    }
    let before = speakers.len();
    speakers.retain(|_, u| u.len() >= 2);
    let single_utterance_speakers = before - speakers.len();
    if undecodable + unassigned + single_utterance_speakers > 0 {
        log::warn!(
            "corpus {}: skipped {undecodable} undecodable files, {unassigned} files without a speaker, \
             {single_utterance_speakers} single-utterance speakers",
            root.display()
        );
    }
    if speakers.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(ScanReport {
        index: CorpusIndex {
            root: root.to_path_buf(),
            speakers,
        },
        undecodable,
        unassigned,
        single_utterance_speakers,
    })
}

/// Split fractions for train, validation and test speakers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Speaker-disjoint train/valid/test indexes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerSplit {
    pub train: CorpusIndex,
    pub valid: CorpusIndex,
    pub test: CorpusIndex,
}

impl CorpusIndex {
    pub fn num_utterances(&self) -> usize {
        self.speakers.values().map(Vec::len).sum()
    }

    fn subset(&self, ids: &[&String]) -> CorpusIndex {
        CorpusIndex {
            root: self.root.clone(),
            speakers: ids.iter().map(|&id| (id.clone(), self.speakers[id].clone())).collect(),
        }
    }

    /// Decodes every utterance and resamples it to the processing rate.
    pub fn load(&self) -> Result<LoadedCorpus> {
        let mut speakers = Vec::with_capacity(self.speakers.len());
        for (id, utts) in &self.speakers {
            let mut audio = Vec::with_capacity(utts.len());
            for u in utts {
                let a = resample(&read_wav(&u.path)?, PROCESSING_RATE)?;
                audio.push((u.id.clone(), a));
            }
            speakers.push(LoadedSpeaker {
                id: id.clone(),
                utterances: audio,
            });
        }
        Ok(LoadedCorpus { speakers })
    }
}

/// Validation and test get `max(2, floor(n * fraction))` speakers each (a
/// mixture needs two distinct speakers from its own split); the rest, also at
/// least two, go to training.
pub fn split_speakers(index: &CorpusIndex, fractions: SplitFractions, seed: u64) -> Result<SpeakerSplit> {
    let n = index.speakers.len();
    if n < 6 {
        return Err(Error::invalid(format!("need at least 6 speakers to split, corpus has {n}")));
    }
    let SplitFractions { train, valid, test } = fractions;
    if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + valid + test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must lie in [0, 1] and sum to 1"));
    }
    let n_valid = ((n as f64 * valid).floor() as usize).max(2);
    let n_test = ((n as f64 * test).floor() as usize).max(2);
    if n_valid + n_test + 2 > n {
        return Err(Error::invalid(format!("{n} speakers cannot fill three splits of two or more")));
    }
    let mut ids: Vec<&String> = index.speakers.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (valid_ids, rest) = ids.split_at(n_valid);
    let (test_ids, train_ids) = rest.split_at(n_test);
    fn sorted<'a>(s: &[&'a String]) -> Vec<&'a String> {
        let mut v = s.to_vec();
        v.sort();
        v
    }
    Ok(SpeakerSplit {
        train: index.subset(&sorted(train_ids)),
        valid: index.subset(&sorted(valid_ids)),
        test: index.subset(&sorted(test_ids)),
    })
}

#[derive(Debug, Clone)]
pub struct LoadedSpeaker {
    pub id: String,
    /// `(utterance id, audio at the processing rate)`.
    pub utterances: Vec<(String, AudioBuffer)>,
}

/// Corpus held in memory at the processing rate.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub speakers: Vec<LoadedSpeaker>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, WavEncoding};

    fn tone(len: usize) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), 8000).unwrap()
    }

    fn make_corpus(dir: &Path, layout: &[(&str, usize)]) {
        for (spk, n) in layout {
            std::fs::create_dir_all(dir.join(spk)).unwrap();
            for i in 0..*n {
                write_wav(dir.join(spk).join(format!("u{i}.wav")), &tone(800), WavEncoding::Pcm16).unwrap();
            }
        }
    }

    #[test]
    fn scan_counts_speakers_and_utterances() {
        let dir = tempfile::tempdir().unwrap();
        make_corpus(dir.path(), &[("A", 3), ("B", 2)]);
        std::fs::write(dir.path().join("B").join("broken.wav"), b"not a wav").unwrap();
        let r = scan_corpus(dir.path(), &LayoutRule::TopDir).unwrap();
        assert_eq!(r.index.speakers.len(), 2);
        assert_eq!(r.index.num_utterances(), 5);
        assert_eq!(r.undecodable, 1);
        assert_eq!(r.index.speakers["A"][0].id, "A/u0");
        let again = scan_corpus(dir.path(), &LayoutRule::TopDir).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn empty_or_missing_corpus_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_corpus(dir.path(), &LayoutRule::TopDir),
            Err(Error::EmptyCorpus(_))
        ));
        assert!(matches!(
            scan_corpus(&dir.path().join("nope"), &LayoutRule::TopDir),
            Err(Error::Path { .. })
        ));
    }

    #[test]
    fn layout_rules() {
        let p = Path::new("1089/134686/1089-134686-0001.wav");
        assert_eq!(LayoutRule::TopDir.speaker_of(p).unwrap(), "1089");
        assert_eq!(LayoutRule::ParentDir.speaker_of(p).unwrap(), "134686");
        assert_eq!(LayoutRule::FilenamePrefix('-').speaker_of(p).unwrap(), "1089");
        assert_eq!(LayoutRule::TopDir.speaker_of(Path::new("loose.wav")), None);
        assert_eq!("prefix:_".parse::<LayoutRule>().unwrap(), LayoutRule::FilenamePrefix('_'));
        assert!("prefix:ab".parse::<LayoutRule>().is_err());
    }

    fn fake_index(n: usize) -> CorpusIndex {
        let speakers = (0..n)
            .map(|i| {
                let u = Utterance {
                    id: format!("s{i:02}/u"),
                    path: PathBuf::from(format!("s{i:02}/u.wav")),
                    sample_rate: 8000,
                    num_samples: 1,
                };
                (format!("s{i:02}"), vec![u.clone(), u])
            })
            .collect();
        CorpusIndex {
            root: PathBuf::from("/x"),
            speakers,
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split_speakers(&fake_index(10), SplitFractions::default(), 1).unwrap();
        assert_eq!(
            (s.train.speakers.len(), s.valid.speakers.len(), s.test.speakers.len()),
            (6, 2, 2)
        );
        let s6 = split_speakers(&fake_index(6), SplitFractions::default(), 1).unwrap();
        assert_eq!(
            (s6.train.speakers.len(), s6.valid.speakers.len(), s6.test.speakers.len()),
            (2, 2, 2)
        );
        let s30 = split_speakers(&fake_index(30), SplitFractions::default(), 1).unwrap();
        assert_eq!(
            (s30.train.speakers.len(), s30.valid.speakers.len(), s30.test.speakers.len()),
            (24, 3, 3)
        );
        let all: Vec<&String> = s
            .train
            .speakers
            .keys()
            .chain(s.valid.speakers.keys())
            .chain(s.test.speakers.keys())
            .collect();
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
        assert_eq!(s, split_speakers(&fake_index(10), SplitFractions::default(), 1).unwrap());
        assert!(split_speakers(&fake_index(5), SplitFractions::default(), 1).is_err());
    }
}
