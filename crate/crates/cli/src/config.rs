//! Flat dotted-key configuration: defaults, TOML files and `key=value`
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use toml::Value;

use refextract::corpus::{LayoutRule, MixMode, SynthConfig, TargetKind};
use refextract::dsp::{StftConfig, WindowKind};
use refextract::net::{FeatureMode, ModelConfig};
use refextract::objectives::LossWeights;
use refextract::room::{SceneRanges, UniformRange};
use refextract::trainer::TrainConfig;

pub struct Key {
    pub name: &'static str,
    pub default: fn() -> Value,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal => $default:expr, $help:literal;)*) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, default: || Value::from($default), help: $help },)*];
    };
}

keys! {
    "dsp.frame_size" => 256, "STFT frame length in samples";
    "dsp.hop" => 64, "STFT hop in samples";
    "dsp.keep_bins" => 128, "frequency bins kept (the rest, including Nyquist, are dropped)";
    "model.features" => "ri", "network features: ri (real/imaginary) or ls (log-spectrum)";
    "model.width_divisor" => 1, "divide every hidden width by this (must divide 64)";
    "model.share_encoder" => false, "use one encoder for mixture and reference";
    "model.bn_momentum" => 0.1, "batch-norm running-statistics momentum";
    "model.bn_eps" => 1e-5, "batch-norm epsilon";
    "train.lr" => 0.001, "Adam learning rate";
    "train.batch_size" => 16, "mixtures per batch (each gives two estimates)";
    "train.beta" => 0.75, "SI-SDR share of the loss; the MSE term gets 1 - beta";
    "train.adam_beta1" => 0.9, "Adam first-moment decay";
    "train.adam_beta2" => 0.999, "Adam second-moment decay";
    "train.adam_eps" => 1e-8, "Adam epsilon";
    "train.max_steps" => 10000, "number of optimizer updates";
    "train.validate_every" => 500, "steps between validations (0 disables)";
    "train.checkpoint_every" => 500, "steps between checkpoints (0: only at the end)";
    "train.duration_min" => 2.0, "shortest batch duration, seconds";
    "train.duration_max" => 8.0, "longest batch duration, seconds";
    "train.grad_clip" => 0.0, "global gradient-norm clip (0 disables)";
    "train.max_rejections" => 5, "consecutive non-finite steps tolerated";
    "train.seed" => 0, "initialization and batch-sampling seed";
    "synth.mode" => "clean", "clean (anechoic sum) or noisy (reverberant with noise)";
    "synth.count" => 8, "training mixtures; validation and test sizes scale with the split fractions";
    "synth.seed" => 0, "dataset seed";
    "synth.layout" => "top-dir", "speaker id rule: top-dir, parent-dir or prefix:<char>";
    "synth.valid_fraction" => 0.1, "fraction of speakers held out for validation";
    "synth.test_fraction" => 0.1, "fraction of speakers held out for testing";
    "synth.duration_min" => 2.0, "shortest example, seconds";
    "synth.duration_max" => 8.0, "longest example, seconds";
    "synth.snr_min" => 10.0, "lowest noise SNR, dB (noisy mode)";
    "synth.snr_max" => 25.0, "highest noise SNR, dB (noisy mode)";
    "synth.target" => "image", "noisy-mode target: image (reverberant) or dry";
    "synth.gain_jitter_db" => 0.0, "clean-mode level jitter of the second source, dB";
    "scene.room_x_min" => 4.0, "room length range, m";
    "scene.room_x_max" => 8.0, "";
    "scene.room_y_min" => 4.0, "room width range, m";
    "scene.room_y_max" => 8.0, "";
    "scene.room_z_min" => 2.5, "room height range, m";
    "scene.room_z_max" => 3.0, "";
    "scene.t60_min" => 0.16, "reverberation time range, s";
    "scene.t60_max" => 2.0, "";
    "scene.mic_offset" => 0.5, "microphone offset from the room centre in x and y, +/- m";
    "scene.mic_z" => 1.5, "microphone height, m";
    "scene.source_distance" => 1.0, "nominal source distance from the microphone, m";
    "scene.source_distance_jitter" => 0.5, "source distance jitter, +/- m";
}

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Text listing every key with its default, for `--help`.
pub fn describe_keys() -> String {
    let mut out = String::from("Configuration keys (set in a TOML file or with --set key=value):\n");
    for k in KEYS {
        let help = if k.help.is_empty() { String::new() } else { format!("  {}", k.help) };
        out.push_str(&format!("  {:<30} {:<10}{}\n", k.name, (k.default)().to_string(), help));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name.to_string(), (k.default)())).collect(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&name, t, out),
            other => out.push((name, other.clone())),
        }
    }
}

impl Config {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
            let mut pairs = Vec::new();
            flatten("", &table, &mut pairs);
            for (k, v) in pairs {
                cfg.set(&k, v)?;
            }
        }
        for o in overrides {
            cfg.set_str(o)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override; the value is parsed as a TOML value
    /// and falls back to a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            bail!("override `{assignment}` is not of the form key=value");
        };
        let (k, v) = (k.trim(), v.trim());
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(v.to_string()));
        self.set(k, value)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let Some(spec) = lookup(key) else {
            bail!("unknown configuration key `{key}` (see --help for the list)");
        };
        let value = match ((spec.default)(), value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (d, v) if std::mem::discriminant(&d) == std::mem::discriminant(&v) => v,
            (d, v) => bail!("`{key}` expects a {} value, got {}", d.type_str(), v.type_str()),
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    fn f(&self, key: &str) -> f64 {
        self.values[key].as_float().expect("typed on insertion")
    }

    fn i(&self, key: &str) -> Result<u64> {
        let v = self.values[key].as_integer().expect("typed on insertion");
        u64::try_from(v).with_context(|| format!("`{key}` must be non-negative"))
    }

    fn u(&self, key: &str) -> Result<usize> {
        Ok(self.i(key)? as usize)
    }

    fn s(&self, key: &str) -> &str {
        self.values[key].as_str().expect("typed on insertion")
    }

    fn b(&self, key: &str) -> bool {
        self.values[key].as_bool().expect("typed on insertion")
    }

    pub fn stft(&self) -> Result<StftConfig> {
        let cfg = StftConfig {
            frame_size: self.u("dsp.frame_size")?,
            hop: self.u("dsp.hop")?,
            window: WindowKind::HannPeriodic,
            keep_bins: self.u("dsp.keep_bins")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let features: FeatureMode = self.s("model.features").parse()?;
        let mut m = ModelConfig::reduced(features, self.u("model.width_divisor")?)?;
        m.share_encoder_weights = self.b("model.share_encoder");
        m.bn_momentum = self.f("model.bn_momentum");
        m.bn_eps = self.f("model.bn_eps");
        m.stft = self.stft()?;
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self, checkpoint_dir: Option<PathBuf>) -> Result<TrainConfig> {
        let clip = self.f("train.grad_clip");
        let cfg = TrainConfig {
            learning_rate: self.f("train.lr"),
            batch_size: self.u("train.batch_size")?,
            adam_beta1: self.f("train.adam_beta1"),
            adam_beta2: self.f("train.adam_beta2"),
            adam_eps: self.f("train.adam_eps"),
            max_steps: self.i("train.max_steps")?,
            validate_every: self.i("train.validate_every")?,
            checkpoint_every: self.i("train.checkpoint_every")?,
            checkpoint_dir,
            seed: self.i("train.seed")?,
            weights: LossWeights::from_sisdr_share(self.f("train.beta"))?,
            duration_range: (self.f("train.duration_min"), self.f("train.duration_max")),
            grad_clip: (clip > 0.0).then_some(clip),
            max_rejections: self.i("train.max_rejections")? as u32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_ranges(&self) -> Result<SceneRanges> {
        let r = |a: &str, b: &str| UniformRange::new(self.f(a), self.f(b));
        let off = self.f("scene.mic_offset");
        let jitter = self.f("scene.source_distance_jitter");
        let ranges = SceneRanges {
            room_x: r("scene.room_x_min", "scene.room_x_max"),
            room_y: r("scene.room_y_min", "scene.room_y_max"),
            room_z: r("scene.room_z_min", "scene.room_z_max"),
            t60: r("scene.t60_min", "scene.t60_max"),
            mic_offset: UniformRange::new(-off, off),
            mic_z: self.f("scene.mic_z"),
            source_distance_base: self.f("scene.source_distance"),
            source_distance_offset: UniformRange::new(-jitter, jitter),
            ..SceneRanges::default()
        };
        ranges.validate()?;
        Ok(ranges)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let mode: MixMode = self.s("synth.mode").parse()?;
        let target: TargetKind = self.s("synth.target").parse()?;
        Ok(SynthConfig {
            mode,
            count: self.u("synth.count")?,
            seed: self.i("synth.seed")?,
            duration_range: (self.f("synth.duration_min"), self.f("synth.duration_max")),
            scene_ranges: self.scene_ranges()?,
            snr_range: UniformRange::new(self.f("synth.snr_min"), self.f("synth.snr_max")),
            target,
            gain_jitter_db: self.f("synth.gain_jitter_db"),
        })
    }

    pub fn layout(&self) -> Result<LayoutRule> {
        Ok(self.s("synth.layout").parse()?)
    }

    pub fn split_fractions(&self) -> (f64, f64) {
        (self.f("synth.valid_fraction"), self.f("synth.test_fraction"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let c = Config::default();
        let t = c.train(None).unwrap();
        assert_eq!((t.learning_rate, t.batch_size), (0.001, 16));
        assert_eq!(t.weights.beta_sisdr, 0.75);
        assert_eq!(c.model().unwrap(), ModelConfig::full(FeatureMode::RealImag));
        assert_eq!(c.scene_ranges().unwrap(), SceneRanges::default());
        c.synth().unwrap();
    }

    #[test]
    fn overrides_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlr = 0.01\n[model]\nfeatures = \"ls\"\n").unwrap();
        let c = Config::load(Some(&path), &["train.lr=2e-3".into(), "train.max_steps = 7".into()]).unwrap();
        let t = c.train(None).unwrap();
        assert_eq!((t.learning_rate, t.max_steps), (0.002, 7));
        assert_eq!(c.model().unwrap().features, FeatureMode::LogSpectrum);
        // Bare words are strings; integers widen to floats.
        let mut c = Config::default();
        c.set_str("synth.mode=noisy").unwrap();
        c.set_str("train.beta=1").unwrap();
        assert_eq!(c.train(None).unwrap().weights.beta_mse, 0.0);
    }

    #[test]
    fn unknown_keys_and_wrong_types_are_rejected() {
        let mut c = Config::default();
        assert!(c.set_str("train.learning_rate=0.1").is_err());
        assert!(c.set_str("train.batch_size=1.5").is_err());
        assert!(c.set_str("no_equals_sign").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[dsp]\nwindow_len = 3\n").unwrap();
        assert!(Config::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let text = describe_keys();
        for k in KEYS {
            assert!(text.contains(k.name));
        }
        assert!(text.contains("0.001"));
    }
}
