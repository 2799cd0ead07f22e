mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use refextract::corpus::{
    read_manifest, scan_corpus, split_speakers, synthesize_dataset, synthetic, CorpusIndex, MixMode, NoiseBank,
    SplitFractions,
};
use refextract::dsp::resample;
use refextract::evaluation::{evaluate_system, System};
use refextract::pipeline::{extract, FeatureExtractor};
use refextract::room::{estimate_t60, generate_rir, SceneSpec, SPEED_OF_SOUND};
use refextract::trainer::{load_model, train, TrainState, STATE_FILE};
use refextract::{read_wav, write_wav, WavEncoding, PROCESSING_RATE};

use config::{describe_keys, Config};

#[derive(Parser)]
#[command(name = "refextract", version, about = "Reference-conditioned single-microphone speaker extraction")]
#[command(after_long_help = describe_keys())]
struct Cli {
    /// TOML configuration file with flat or nested dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize mixture manifests from a speaker corpus.
    Synth(SynthArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Extract one speaker from a mixture WAV given a reference WAV.
    Extract(ExtractArgs),
    /// Score a system on a manifest.
    Evaluate(EvaluateArgs),
    /// Generate one room impulse response and report its measured T60.
    Rir(RirArgs),
    /// Write a small synthetic speech-like corpus (and babble noise).
    DemoCorpus(DemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus root directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of noise WAVs (noisy mode).
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Output directory for `<split>.jsonl` and example WAVs.
    #[arg(long)]
    out: PathBuf,
    /// clean or noisy (overrides synth.mode).
    #[arg(long)]
    mode: Option<String>,
    /// Training mixtures (overrides synth.count).
    #[arg(long)]
    n: Option<usize>,
    /// Dataset seed (overrides synth.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Put every speaker into a single `train.jsonl`.
    #[arg(long)]
    no_split: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.max_steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/state.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Network file (`model.net`, `best.net`) or training state.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// mixture, oracle, proposed or proposed-ls.
    #[arg(long, value_parser = parse_system)]
    system: System,
    /// Network file, required for the proposed systems.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report path (JSON lines); defaults to `<manifest stem>.<system>.report.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write estimates as `<index>_<speaker>.wav` here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct RirArgs {
    /// Room dimensions `x,y,z` in metres.
    #[arg(long, value_parser = parse_point)]
    room: [f64; 3],
    #[arg(long, value_parser = parse_point)]
    mic: [f64; 3],
    #[arg(long, value_parser = parse_point)]
    source: [f64; 3],
    #[arg(long)]
    t60: f64,
    #[arg(long, default_value_t = PROCESSING_RATE)]
    sample_rate: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    utterances: usize,
    #[arg(long, default_value_t = 2.0)]
    min_secs: f64,
    #[arg(long, default_value_t = 4.0)]
    max_secs: f64,
    /// Also write this many babble noise files under `<out>/noise`.
    #[arg(long, default_value_t = 0)]
    noise_files: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_system(s: &str) -> std::result::Result<System, String> {
    s.parse().map_err(|e: refextract::Error| e.to_string())
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} directory not found: {}", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn split_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_synth(cfg: &mut Config, a: SynthArgs) -> Result<()> {
    if let Some(m) = &a.mode {
        cfg.set_str(&format!("synth.mode=\"{m}\"")).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(n) = a.n {
        cfg.set_str(&format!("synth.count={n}")).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        cfg.set_str(&format!("synth.seed={s}")).map_err(|e| usage(e.to_string()))?;
    }
    let synth = cfg.synth().map_err(|e| usage(e.to_string()))?;
    require_dir(&a.corpus, "corpus")?;
    let noise = match (synth.mode, &a.noise) {
        (MixMode::Noisy, Some(dir)) => {
            require_dir(dir, "noise")?;
            Some(NoiseBank::load(dir)?)
        }
        (MixMode::Noisy, None) => return Err(usage("noisy mode needs --noise <dir>")),
        (MixMode::Clean, _) => None,
    };
    let report = scan_corpus(&a.corpus, &cfg.layout()?)?;
    log::info!(
        "corpus: {} speakers, {} utterances ({} undecodable, {} unassigned, {} single-utterance speakers dropped)",
        report.index.speakers.len(),
        report.index.num_utterances(),
        report.undecodable,
        report.unassigned,
        report.single_utterance_speakers
    );
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let splits: Vec<(&str, CorpusIndex, usize)> = if a.no_split {
        vec![("train", report.index, synth.count)]
    } else {
        let (valid, test) = cfg.split_fractions();
        let fractions = SplitFractions {
            train: 1.0 - valid - test,
            valid,
            test,
        };
        let s = split_speakers(&report.index, fractions, synth.seed)?;
        let scaled = |f: f64| ((synth.count as f64 * f / fractions.train).ceil() as usize).max(1);
        vec![
            ("train", s.train, synth.count),
            ("valid", s.valid, scaled(valid)),
            ("test", s.test, scaled(test)),
        ]
    };
    for (k, (name, index, count)) in splits.into_iter().enumerate() {
        let corpus = index.load()?;
        let mut c = synth.clone();
        c.count = count;
        c.seed = split_seed(synth.seed, k as u64);
        let path = a.out.join(format!("{name}.jsonl"));
        let m = synthesize_dataset(&path, name, &corpus, noise.as_ref(), &c)?;
        println!("{name}: {} examples -> {}", m.len(), path.display());
    }
    Ok(())
}

fn run_train(cfg: &mut Config, a: TrainArgs) -> Result<()> {
    if let Some(n) = a.max_steps {
        cfg.set_str(&format!("train.max_steps={n}")).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        cfg.set_str(&format!("train.seed={s}")).map_err(|e| usage(e.to_string()))?;
    }
    let tc = cfg.train(Some(a.out.clone())).map_err(|e| usage(e.to_string()))?;
    let model = cfg.model().map_err(|e| usage(e.to_string()))?;
    require_file(&a.train, "training manifest")?;
    if let Some(v) = &a.valid {
        require_file(v, "validation manifest")?;
    }
    let state_path = a.out.join(STATE_FILE);
    let mut state = if a.resume {
        require_file(&state_path, "training state")?;
        let mut s = TrainState::<f32>::load(&state_path)?;
        s.config.max_steps = tc.max_steps;
        s.config.checkpoint_dir = Some(a.out.clone());
        println!("resuming at step {}", s.step);
        s
    } else {
        TrainState::new(tc, model)?
    };
    let c = &state.config;
    println!(
        "lr {} batch {} beta {} max_steps {} seed {} parameters {}",
        c.learning_rate,
        c.batch_size,
        c.weights.beta_sisdr,
        c.max_steps,
        c.seed,
        state.net.parameter_count()
    );
    let train_set = read_manifest(&a.train)?.load_all()?;
    let valid_set = match &a.valid {
        Some(v) => read_manifest(v)?.load_all()?,
        None => Vec::new(),
    };
    train(&mut state, &train_set, &valid_set, |r| {
        if let Some(v) = r.valid_si_sdri {
            log::info!("step {}: loss {:.4}, validation SI-SDRi {v:.2} dB", r.step, r.loss);
        } else {
            log::debug!("step {}: loss {:.4} si-sdr {:.2}", r.step, r.loss, r.si_sdr);
        }
    })?;
    println!("finished at step {}; checkpoints in {}", state.step, a.out.display());
    Ok(())
}

fn run_extract(a: ExtractArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    let net = load_model::<f32>(&a.model)?;
    let fx = FeatureExtractor::new(net.config())?;
    let mixture = read_wav(&a.mixture)?;
    let reference = read_wav(&a.reference)?;
    let rate = mixture.sample_rate();
    let est = extract(
        &net,
        &fx,
        &resample(&mixture, PROCESSING_RATE)?,
        &resample(&reference, PROCESSING_RATE)?,
    )?;
    let out = resample(&est, rate)?.with_len(mixture.len());
    write_wav(&a.out, &out, WavEncoding::Float32)?;
    println!("wrote {} ({} samples at {} Hz)", a.out.display(), out.len(), rate);
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let net = match (&a.model, a.system.needs_model()) {
        (Some(p), true) => {
            require_file(p, "model")?;
            Some(load_model::<f32>(p)?)
        }
        (None, true) => return Err(usage(format!("system {} needs --model", a.system.as_str()))),
        (_, false) => None,
    };
    let manifest = read_manifest(&a.manifest)?;
    let report = evaluate_system(a.system, &manifest, net.as_ref(), a.dump.as_deref())?;
    let path = a.report.unwrap_or_else(|| {
        let stem = a.manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
        a.manifest.with_file_name(format!("{stem}.{}.report.jsonl", a.system.as_str()))
    });
    report.write_jsonl(&path)?;
    print!("{}", report.summary_table());
    println!("report: {}", path.display());
    Ok(())
}

fn run_rir(a: RirArgs) -> Result<()> {
    let scene = SceneSpec {
        room_dims: a.room,
        t60: a.t60,
        mic_pos: a.mic,
        source_pos: vec![a.source],
    };
    scene.validate().map_err(|e| usage(e.to_string()))?;
    let rir = generate_rir(&scene, 0, a.sample_rate)?;
    write_wav(&a.out, &rir, WavEncoding::Float32)?;
    let d = scene.source_distance(0);
    println!("samples {} ({:.3} s)", rir.len(), rir.duration_secs());
    println!(
        "direct path: {:.3} m, expected tap {}",
        d,
        (d / SPEED_OF_SOUND * a.sample_rate as f64).round()
    );
    if a.t60 > 0.0 {
        match estimate_t60(&rir) {
            Ok(t) => println!("T60 requested {:.3} s, measured {t:.3} s", a.t60),
            Err(e) => println!("T60 requested {:.3} s, not measurable: {e}", a.t60),
        }
    }
    Ok(())
}

fn run_demo(a: DemoArgs) -> Result<()> {
    if !(a.min_secs > 0.0 && a.min_secs <= a.max_secs) {
        return Err(usage("need 0 < --min-secs <= --max-secs"));
    }
    synthetic::write_corpus(
        &a.out.join("speech"),
        a.speakers,
        a.utterances,
        (a.min_secs, a.max_secs),
        PROCESSING_RATE,
        a.seed,
    )?;
    println!("corpus: {}", a.out.join("speech").display());
    if a.noise_files > 0 {
        synthetic::write_noise(&a.out.join("noise"), a.noise_files, a.max_secs * 2.0, PROCESSING_RATE, a.seed ^ 1)?;
        println!("noise: {}", a.out.join("noise").display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref(), &cli.overrides).map_err(|e| usage(format!("{e:#}")))?;
    match cli.command {
        Command::Synth(a) => run_synth(&mut cfg, a),
        Command::Train(a) => run_train(&mut cfg, a),
        Command::Extract(a) => run_extract(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Rir(a) => run_rir(a),
        Command::DemoCorpus(a) => run_demo(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
