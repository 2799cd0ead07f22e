//! Optimization loop: batch sampling, swapped-role loss, Adam, validation and
//! resumable checkpoints.
//!
//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/state.ckpt       full training state (resume point)
//! <dir>/model.net        network at the last checkpoint
//! <dir>/best.net         network with the best validation SI-SDRi so far
//! <dir>/train_log.jsonl  one JSON record per accepted or rejected step
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::PROCESSING_RATE;
use crate::corpus::MixtureExample;
use crate::error::{Error, Result};
use crate::net::{
    check_header, decode_network, encode_network, read_network, save_network, BlobReader, BlobWriter, ModelConfig,
    Scalar, SiameseUnet,
};
use crate::objectives::{si_sdr_slices, LossBreakdown, LossWeights};
use crate::pipeline::{extract_many, loss_and_backward, prepare_batch, FeatureExtractor};

const STATE_MAGIC: &[u8; 8] = b"RXTRAIN\0";
pub const STATE_FORMAT_VERSION: u32 = 1;

pub const STATE_FILE: &str = "state.ckpt";
pub const MODEL_FILE: &str = "model.net";
pub const BEST_FILE: &str = "best.net";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: u64,
    /// Validate every this many steps; 0 disables validation.
    pub validate_every: u64,
    /// Write `state.ckpt` and `model.net` every this many steps (and at the
    /// end); 0 writes only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Per-batch signal duration range in seconds.
    pub duration_range: (f64, f64),
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Consecutive rejected steps tolerated before training aborts.
    pub max_rejections: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 10_000,
            validate_every: 500,
            checkpoint_every: 500,
            checkpoint_dir: None,
            seed: 0,
            weights: LossWeights::default(),
            duration_range: (2.0, 8.0),
            grad_clip: None,
            max_rejections: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("duration range must satisfy 0 < min <= max");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        if self.max_rejections == 0 {
            return bad("max_rejections must be at least 1");
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Result of one call to [`TrainState::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// The loss or a gradient was non-finite; no update was applied.
    pub rejected: bool,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar = f32> {
    pub config: TrainConfig,
    /// Number of accepted updates.
    pub step: u64,
    pub net: SiameseUnet<T>,
    moments: Vec<(Vec<T>, Vec<T>)>,
    rng: ChaCha8Rng,
    pub best_valid: Option<f64>,
    pub history: Vec<HistoryEntry>,
    consecutive_rejections: u32,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    config: TrainConfig,
    step: u64,
    rng: ChaCha8Rng,
    best_valid: Option<f64>,
    history: Vec<HistoryEntry>,
    consecutive_rejections: u32,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; network initialization and batch sampling both derive
    /// from `config.seed`.
    pub fn new(config: TrainConfig, model: ModelConfig) -> Result<Self> {
        config.validate()?;
        let net = SiameseUnet::new(model, config.seed)?;
        let moments = net
            .params()
            .iter()
            .map(|p| (vec![T::ZERO; p.len()], vec![T::ZERO; p.len()]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            step: 0,
            net,
            moments,
            rng,
            best_valid: None,
            history: Vec::new(),
            consecutive_rejections: 0,
        })
    }

    /// Draws `batch_size` examples with replacement and crops them to one
    /// common duration drawn from the configured range (shortened to the
    /// shortest drawn example when necessary).
    pub fn sample_batch(&mut self, data: &[MixtureExample]) -> Result<Vec<MixtureExample>> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        let (lo, hi) = self.config.duration_range;
        let secs = if lo == hi { lo } else { self.rng.random_range(lo..hi) };
        let shortest = picks.iter().map(|&i| data[i].len()).min().unwrap_or(0);
        let len = ((secs * PROCESSING_RATE as f64).round() as usize).clamp(1, shortest.max(1));
        if shortest == 0 {
            return Err(Error::invalid("training example with no samples"));
        }
        Ok(picks
            .into_iter()
            .map(|i| {
                let start = self.rng.random_range(0..=data[i].len() - len);
                data[i].cropped(start, len)
            })
            .collect())
    }

    /// One forward/backward pass over both extraction directions of every
    /// example and one Adam update.
    pub fn train_step(&mut self, fx: &FeatureExtractor, batch: &[MixtureExample]) -> Result<StepOutcome> {
        let prepared = prepare_batch(fx, batch)?;
        let saved_buffers: Vec<Vec<T>> = self.net.buffers().iter().map(|b| b.value.clone()).collect();
        self.net.zero_grad();
        let loss = loss_and_backward(&mut self.net, fx, &prepared, &self.config.weights)?;
        let finite = loss.combined.is_finite() && self.net.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            for (b, v) in self.net.buffers_mut().into_iter().zip(saved_buffers) {
                b.value = v;
            }
            self.consecutive_rejections += 1;
            log::warn!(
                "step {}: non-finite loss or gradient, update rejected ({} in a row)",
                self.step + 1,
                self.consecutive_rejections
            );
            if self.consecutive_rejections >= self.config.max_rejections {
                return Err(Error::NonFiniteLoss { step: self.step + 1 });
            }
            return Ok(StepOutcome { loss, rejected: true });
        }
        self.consecutive_rejections = 0;
        self.adam_update();
        self.step += 1;
        self.history.push(HistoryEntry { step: self.step, loss });
        Ok(StepOutcome { loss, rejected: false })
    }

    fn adam_update(&mut self) {
        let c = &self.config;
        let clip = c.grad_clip.map_or(1.0, |limit| {
            let norm = self
                .net
                .params()
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|g| g.to_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > limit { limit / norm } else { 1.0 }
        });
        let t = (self.step + 1) as i32;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        let (lr, eps) = (c.learning_rate, c.adam_eps);
        for (p, (m, v)) in self.net.params_mut().into_iter().zip(&mut self.moments) {
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64() * clip;
                let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / corr1) / ((vi / corr2).sqrt() + eps);
                p.value[i] = T::from_f64(p.value[i].to_f64() - update);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = BlobWriter::default();
        w.raw(STATE_MAGIC);
        w.u32(STATE_FORMAT_VERSION);
        let record = StateRecord {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            best_valid: self.best_valid,
            history: self.history.clone(),
            consecutive_rejections: self.consecutive_rejections,
        };
        w.str(&serde_json::to_string(&record).expect("state record serializes"));
        w.raw(&encode_network(&self.net));
        w.u64(self.moments.len() as u64);
        for (m, v) in &self.moments {
            w.values(m);
            w.values(v);
        }
        w.bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes);
        check_header(&mut r, STATE_MAGIC, STATE_FORMAT_VERSION)?;
        let record: StateRecord = serde_json::from_str(r.str()?)
            .map_err(|e| Error::Checkpoint(format!("training state record: {e}")))?;
        let net: SiameseUnet<T> = read_network(&mut r)?;
        let count = r.u64()? as usize;
        let params = net.params();
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "{count} optimizer moment pairs stored, network has {} parameters",
                params.len()
            )));
        }
        let moments = params
            .iter()
            .map(|p| Ok((r.values(p.len())?, r.values(p.len())?)))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            config: record.config,
            step: record.step,
            net,
            moments,
            rng: record.rng,
            best_valid: record.best_valid,
            history: record.history,
            consecutive_rejections: record.consecutive_rejections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::at_path(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::at_path(path, e))
}

/// Loads a network from either a network file or a training-state file.
pub fn load_model<T: Scalar>(path: &Path) -> Result<SiameseUnet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    if bytes.starts_with(STATE_MAGIC) {
        Ok(TrainState::<T>::decode(&bytes)?.net)
    } else {
        decode_network(&bytes)
    }
}

/// Mean SI-SDR improvement over both extraction directions of every
/// example, in inference mode at full example length.
pub fn validate<T: Scalar>(net: &SiameseUnet<T>, fx: &FeatureExtractor, examples: &[MixtureExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let per_example = examples
        .par_iter()
        .map(|ex| {
            let est = extract_many(net, fx, &ex.mixture, &[&ex.reference_1, &ex.reference_2])?;
            let mut total = 0.0;
            for (target, e) in [&ex.target_1, &ex.target_2].into_iter().zip(&est) {
                total += si_sdr_slices(target.samples(), e.samples())?
                    - si_sdr_slices(target.samples(), ex.mixture.samples())?;
            }
            Ok(total / 2.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_example.iter().sum::<f64>() / examples.len() as f64)
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub si_sdr: f64,
    pub mse: f64,
    pub rejected: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_si_sdri: Option<f64>,
    pub elapsed_secs: f64,
}

/// Runs `train_step` until `config.max_steps` accepted steps, validating,
/// checkpointing and logging as configured; the final state is always written
/// when a checkpoint directory is set. `observer` sees every log record.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    train_set: &[MixtureExample],
    valid_set: &[MixtureExample],
    mut observer: impl FnMut(&LogRecord),
) -> Result<()> {
    state.config.validate()?;
    let fx = FeatureExtractor::new(state.net.config())?;
    let dir = state.config.checkpoint_dir.clone();
    let mut log = match &dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::at_path(d, e))?;
            let path = d.join(LOG_FILE);
            let f: File = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::at_path(&path, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let started = Instant::now();
    while state.step < state.config.max_steps {
        let batch = state.sample_batch(train_set)?;
        let outcome = state.train_step(&fx, &batch)?;
        let mut record = LogRecord {
            step: state.step,
            loss: outcome.loss.combined,
            si_sdr: outcome.loss.si_sdr_pair,
            mse: outcome.loss.mse_pair,
            rejected: outcome.rejected,
            valid_si_sdri: None,
            elapsed_secs: started.elapsed().as_secs_f64(),
        };
        if !outcome.rejected {
            let every = state.config.validate_every;
            if every > 0 && state.step.is_multiple_of(every) && !valid_set.is_empty() {
                let v = validate(&state.net, &fx, valid_set)?;
                record.valid_si_sdri = Some(v);
                if state.best_valid.is_none_or(|b| v > b) {
                    state.best_valid = Some(v);
                    if let Some(d) = &dir {
                        save_network(&state.net, &d.join(BEST_FILE))?;
                    }
                }
            }
            let every = state.config.checkpoint_every;
            if let Some(d) = &dir {
                if every > 0 && state.step.is_multiple_of(every) && state.step < state.config.max_steps {
                    state.save(&d.join(STATE_FILE))?;
                    save_network(&state.net, &d.join(MODEL_FILE))?;
                }
            }
        }
        if let Some(w) = &mut log {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        observer(&record);
    }
    if let Some(d) = &dir {
        state.save(&d.join(STATE_FILE))?;
        save_network(&state.net, &d.join(MODEL_FILE))?;
    }
    Ok(())
}
