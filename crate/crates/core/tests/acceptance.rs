//! Acceptance suite. Every criterion prints one `ACCEPTANCE <n> PASS|FAIL`
//! line and fails the test on FAIL.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refextract::corpus::{
    scan_corpus, synthesize_dataset, synthetic, DatasetManifest, LayoutRule, LoadedCorpus, MixMode, MixtureExample,
    NoiseBank, SynthConfig,
};
use refextract::dsp::{istft, stft, Stft, StftConfig};
use refextract::evaluation::{decompose, evaluate_system, oracle_mask_baseline, System};
use refextract::net::{encode_network, FeatureMode, ModelConfig, SiameseUnet, Tensor};
use refextract::objectives::{si_sdr_slices, LossWeights};
use refextract::pipeline::{loss_and_backward, prepare_batch, FeatureExtractor};
use refextract::room::{estimate_t60, generate_rir, sample_scene, SceneRanges, UniformRange, SPEED_OF_SOUND};
use refextract::trainer::{train, validate, TrainConfig, TrainState};
use refextract::AudioBuffer;

fn report(n: u32, pass: bool, detail: String) {
    // Written to the raw handle so the line survives the test harness's
    // output capture.
    let line = format!("ACCEPTANCE {n} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "acceptance criterion {n} failed: {detail}");
}

/// A synthetic speech-like corpus and babble noise, shared by the tests
/// that need one.
struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    corpus: LoadedCorpus,
    noise: NoiseBank,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        synthetic::write_corpus(&root.join("speech"), 6, 3, (1.0, 2.5), 8000, 11).unwrap();
        synthetic::write_noise(&root.join("noise"), 2, 6.0, 8000, 12).unwrap();
        let corpus = scan_corpus(&root.join("speech"), &LayoutRule::TopDir)
            .unwrap()
            .index
            .load()
            .unwrap();
        let noise = NoiseBank::load(&root.join("noise")).unwrap();
        Fixture {
            _dir: dir,
            root,
            corpus,
            noise,
        }
    })
}

fn synth(name: &str, cfg: &SynthConfig) -> DatasetManifest {
    let f = fixture();
    let noise = (cfg.mode == MixMode::Noisy).then_some(&f.noise);
    synthesize_dataset(&f.root.join(format!("{name}.jsonl")), name, &f.corpus, noise, cfg).unwrap()
}

// 1 -------------------------------------------------------------------------

#[test]
fn c1_stft_round_trip() {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(8000..=64000);
        // Tones centred on bins up to 3 kHz; tapered ends keep the onsets
        // from leaking into the dropped Nyquist bin.
        let comps: Vec<(f64, f64, f64)> = (0..16)
            .map(|_| {
                (
                    rng.random_range(1..=96) as f64,
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let x: Vec<f64> = (0..len)
            .map(|t| {
                let e = (t.min(len - 1 - t) as f64 / 2000.0).min(1.0);
                let taper = (0.5 - 0.5 * (PI * e).cos()).powi(3);
                taper
                    * comps
                        .iter()
                        .map(|(k, a, ph)| a * (2.0 * PI * k * t as f64 / 256.0 + ph).cos())
                        .sum::<f64>()
            })
            .collect();
        let a = AudioBuffer::new(x, 8000).unwrap();
        let back = istft(&stft(&a, &cfg).unwrap(), len).unwrap();
        let num: f64 = back.samples().iter().zip(a.samples()).map(|(p, q)| (p - q).powi(2)).sum();
        let den: f64 = a.samples().iter().map(|q| q * q).sum();
        worst = worst.max((num / den).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-6 && secs < 10.0,
        format!("worst relative error {worst:.2e} (< 1e-6), {secs:.2} s (< 10 s)"),
    );
}

// 2 -------------------------------------------------------------------------

#[test]
fn c2_si_sdr_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        // 1-2 s of 8 kHz audio. The eps guard shifts the value by about
        // 4.3 eps / |residual|^2 dB, negligible at audio lengths.
        let n = rng.random_range(8000..16000);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let base = si_sdr_slices(&s, &e).unwrap();
        for scale in [0.5, 2.0, -3.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
            worst = worst.max((si_sdr_slices(&s, &scaled).unwrap() - base).abs());
        }
    }
    let hand = si_sdr_slices(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    report(
        2,
        worst <= 1e-9 && hand.abs() <= 1e-9,
        format!("max scale deviation {worst:.2e} dB, hand case {hand:.2e} dB"),
    );
}

// 3 -------------------------------------------------------------------------

#[test]
fn c3_gradient_check() {
    let start = Instant::now();
    let mut model = ModelConfig::from_widths(FeatureMode::RealImag, &[4, 8]).unwrap();
    model.stft = StftConfig {
        frame_size: 32,
        hop: 8,
        keep_bins: 16,
        ..StftConfig::default()
    };
    let fx = FeatureExtractor::new(&model).unwrap();
    // 104 samples -> 16 frames of 16 bins: 2 x 16 x 16 network inputs.
    assert_eq!(fx.frames(104), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples: Vec<MixtureExample> = (0..2)
        .map(|_| {
            let mut sig = || {
                AudioBuffer::new((0..104).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
            };
            let (t1, t2, r1, r2) = (sig(), sig(), sig(), sig());
            let mix = AudioBuffer::new(t1.samples().iter().zip(t2.samples()).map(|(a, b)| a + b).collect(), 8000)
                .unwrap();
            example(mix, t1, t2, r1, r2)
        })
        .collect();
    let batch = prepare_batch(&fx, &examples).unwrap();
    assert_eq!(batch.mixture.shape(), (2, 2, 16, 16));
    let weights = LossWeights::default();
    let mut net = SiameseUnet::<f64>::new(model, 4).unwrap();
    net.zero_grad();
    loss_and_backward(&mut net, &fx, &batch, &weights).unwrap();
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let loss_at = |net: &SiameseUnet<f64>| {
        let mut probe = net.clone();
        loss_and_backward(&mut probe, &fx, &batch, &weights).unwrap().combined
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = net.params()[which].grad[flat];
        let mut plus = net.clone();
        plus.params_mut()[which].value[flat] += h;
        let mut minus = net.clone();
        minus.params_mut()[which].value[flat] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        // Biases ahead of batch norm have zero gradient; a central
        // difference only resolves the loss to ~1e-10, hence the floor.
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        worst < 1e-4 && secs < 60.0,
        format!("worst relative error {worst:.2e} over 20 parameters (< 1e-4), {secs:.2} s (< 60 s)"),
    );
}

fn example(mixture: AudioBuffer, t1: AudioBuffer, t2: AudioBuffer, r1: AudioBuffer, r2: AudioBuffer) -> MixtureExample {
    MixtureExample {
        mixture,
        target_1: t1,
        target_2: t2,
        reference_1: r1,
        reference_2: r2,
        meta: refextract::corpus::ExampleMeta {
            speaker_1: "a".into(),
            speaker_2: "b".into(),
            utterance_1: "a/0".into(),
            utterance_2: "b/0".into(),
            reference_utterance_1: "a/1".into(),
            reference_utterance_2: "b/1".into(),
            scene: None,
            reference_scenes: None,
            snr_db: None,
            noise: None,
            target: None,
            gain_2_db: 0.0,
        },
    }
}

// 4 -------------------------------------------------------------------------

/// Parameter count of the published plan from layer arithmetic alone.
fn published_parameter_count() -> usize {
    let encoder = [[2, 64], [64, 128], [128, 256], [256, 512], [512, 512], [512, 512], [512, 512]];
    let decoder = [[1024, 512], [1536, 512], [1536, 512], [1536, 256], [768, 128], [384, 64], [192, 2]];
    // 4x4 kernel weights + bias + batch-norm scale and shift.
    let stage = |[cin, cout]: [usize; 2]| 16 * cin * cout + cout + 2 * cout;
    let enc: usize = encoder.iter().copied().map(stage).sum();
    let dec: usize = decoder.iter().copied().map(stage).sum();
    // Two encoder heads, decoder, 3x3 two-channel head with bias.
    2 * enc + dec + (9 * 2 * 2 + 2)
}

#[test]
fn c4_architecture_contract() {
    let cfg = ModelConfig::full(FeatureMode::RealImag);
    let mut ok = cfg.validate().is_ok();
    let mut notes = Vec::new();
    let d = cfg.depth();
    for j in 0..d {
        let skip = 2 * cfg.encoder[d - 1 - j][1];
        let prev = if j == 0 { 0 } else { cfg.decoder[j - 1][1] };
        if cfg.decoder[j][0] != prev + skip {
            ok = false;
            notes.push(format!("decoder stage {j} takes {} channels", cfg.decoder[j][0]));
        }
    }
    if cfg.decoder[0][0] != 1024 {
        ok = false;
        notes.push(format!("bottleneck concat {}", cfg.decoder[0][0]));
    }
    let net = SiameseUnet::<f32>::new(cfg.clone(), 0).unwrap();
    for w in [128, 256] {
        let x = Tensor::<f32>::zeros(1, 2, 128, w);
        let y = net.forward(&x, &x).unwrap();
        if y.shape() != (1, 2, 128, w) {
            ok = false;
            notes.push(format!("(2,128,{w}) gave {:?}", y.shape()));
        }
    }
    let expected = published_parameter_count();
    let counted = net.parameter_count();
    ok &= counted == expected && cfg.parameter_count() == expected;
    report(
        4,
        ok,
        format!(
            "parameters {counted} (layer arithmetic {expected}); plan and shape problems: {}",
            if notes.is_empty() { "none".to_string() } else { notes.join("; ") }
        ),
    );
}

// 5 -------------------------------------------------------------------------

/// Width divisor of the reduced network used for the overfit run.
const OVERFIT_WIDTH_DIVISOR: usize = 8;

#[test]
fn c5_overfit_eight_mixtures() {
    let start = Instant::now();
    let cfg = SynthConfig {
        mode: MixMode::Clean,
        count: 8,
        seed: 5,
        duration_range: (1.0, 1.0),
        ..SynthConfig::default()
    };
    let set = synth("overfit", &cfg).load_all().unwrap();
    let model = ModelConfig::reduced(FeatureMode::RealImag, OVERFIT_WIDTH_DIVISOR).unwrap();
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        max_steps: 0,
        validate_every: 0,
        checkpoint_every: 0,
        ..defaults.clone()
    };
    let mut state = TrainState::<f32>::new(tc, model).unwrap();
    let fx = FeatureExtractor::new(state.net.config()).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    while state.step < 2000 {
        state.config.max_steps += 100;
        train(&mut state, &set, &[], |_| {}).unwrap();
        let v = validate(&state.net, &fx, &set).unwrap();
        trace.push(format!("{}:{v:.1}", state.step));
        best = best.max(v);
        if v >= 10.0 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let last = validate(&state.net, &fx, &set).unwrap();
    let at_defaults = state.config.learning_rate == defaults.learning_rate
        && state.config.batch_size == defaults.batch_size
        && state.config.weights == defaults.weights;
    report(
        5,
        last >= 10.0 && state.step <= 2000 && secs <= 1800.0 && at_defaults,
        format!(
            "training-set SI-SDRi {last:.2} dB after {} steps (>= 10 dB, <= 2000 steps), {secs:.0} s (<= 1800 s), width/{OVERFIT_WIDTH_DIVISOR}; trace {}",
            state.step,
            trace.join(" ")
        ),
    );
}

// 6 -------------------------------------------------------------------------

#[test]
fn c6_rir_validity() {
    let ranges = SceneRanges {
        t60: UniformRange::new(0.2, 0.8),
        ..SceneRanges::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_t60, mut worst_tap) = (0.0f64, 0usize);
    for _ in 0..20 {
        let scene = sample_scene(&mut rng, &ranges, 1).unwrap();
        let h = generate_rir(&scene, 0, 8000).unwrap();
        let t = estimate_t60(&h).unwrap();
        worst_t60 = worst_t60.max((t / scene.t60 - 1.0).abs());
        let expected = (scene.source_distance(0) / SPEED_OF_SOUND * 8000.0).round() as usize;
        let s = h.samples();
        let peak = (0..s.len()).max_by(|&a, &b| s[a].abs().total_cmp(&s[b].abs())).unwrap();
        worst_tap = worst_tap.max(peak.abs_diff(expected));
    }
    report(
        6,
        worst_t60 <= 0.2 && worst_tap <= 1,
        format!(
            "worst T60 deviation {:.1}% (<= 20%), worst direct-path offset {worst_tap} samples (<= 1)",
            100.0 * worst_t60
        ),
    );
}

// 7 -------------------------------------------------------------------------

#[test]
fn c7_mixing_exactness() {
    let noisy = synth(
        "snr",
        &SynthConfig {
            mode: MixMode::Noisy,
            count: 50,
            seed: 7,
            duration_range: (1.0, 2.0),
            ..SynthConfig::default()
        },
    );
    let mut worst: f64 = 0.0;
    for ex in noisy.load_all().unwrap() {
        let (mut ps, mut pn) = (0.0, 0.0);
        for k in 0..ex.len() {
            let speech = ex.target_1.samples()[k] + ex.target_2.samples()[k];
            let noise = ex.mixture.samples()[k] - speech;
            ps += speech * speech;
            pn += noise * noise;
        }
        let measured = 10.0 * (ps / pn).log10();
        worst = worst.max((measured - ex.meta.snr_db.unwrap()).abs());
    }
    let clean = synth(
        "exact",
        &SynthConfig {
            count: 50,
            seed: 8,
            duration_range: (1.0, 2.0),
            ..SynthConfig::default()
        },
    );
    let mut exact = true;
    for ex in clean.load_all().unwrap() {
        for k in 0..ex.len() {
            exact &= ex.mixture.samples()[k] == ex.target_1.samples()[k] + ex.target_2.samples()[k];
        }
    }
    report(
        7,
        worst <= 0.1 && exact,
        format!("worst SNR deviation {worst:.2e} dB over 50 noisy examples (<= 0.1), clean sums exact: {exact}"),
    );
}

// 8 -------------------------------------------------------------------------

#[test]
fn c8_metric_ordering() {
    let manifest = synth(
        "metrics",
        &SynthConfig {
            mode: MixMode::Noisy,
            count: 20,
            seed: 9,
            duration_range: (1.0, 2.0),
            ..SynthConfig::default()
        },
    );
    let oracle = evaluate_system(System::OracleMask, &manifest, None, None).unwrap();
    let mixture = evaluate_system(System::Mixture, &manifest, None, None).unwrap();
    let mean = |r: &refextract::evaluation::EvalReport| r.summary().si_sdri.mean;
    let mixture_zero = mixture.records.iter().all(|r| r.si_sdri == 0.0);
    let ordered = oracle.records.iter().chain(&mixture.records).all(|r| r.sir >= r.sdr);
    let stft = Stft::new(StftConfig::default()).unwrap();
    let mut worst_sum: f64 = 0.0;
    for ex in manifest.load_all().unwrap() {
        for target in [&ex.target_1, &ex.target_2] {
            let est = oracle_mask_baseline(&stft, &ex.mixture, target).unwrap();
            let interference: Vec<f64> =
                ex.mixture.samples().iter().zip(target.samples()).map(|(m, t)| m - t).collect();
            let d = decompose(est.samples(), target.samples(), &interference).unwrap();
            let mut num = 0.0;
            for k in 0..est.len() {
                num += (d.s_target[k] + d.e_interf[k] + d.e_artif[k] - est.samples()[k]).powi(2);
            }
            let den: f64 = est.samples().iter().map(|v| v * v).sum();
            worst_sum = worst_sum.max((num / den).sqrt());
        }
    }
    let om = mean(&oracle);
    report(
        8,
        om > 0.0 && mixture_zero && ordered && worst_sum <= 1e-8 && oracle.records.len() == 40,
        format!(
            "oracle-mask SI-SDRi {om:.2} dB (> 0), mixture SI-SDRi all zero: {mixture_zero}, sir >= sdr: {ordered}, decomposition residual {worst_sum:.1e} (<= 1e-8)"
        ),
    );
}

// 9 -------------------------------------------------------------------------

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn c9_determinism() {
    let f = fixture();
    let cfg = SynthConfig {
        count: 4,
        seed: 10,
        duration_range: (1.0, 1.0),
        ..SynthConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let manifests: Vec<_> = ["a", "b"]
        .iter()
        .map(|d| {
            let dir = tmp.path().join(d);
            let m = synthesize_dataset(&dir.join("set.jsonl"), "train", &f.corpus, None, &cfg).unwrap();
            (read_tree(&dir), m)
        })
        .collect();
    let synth_same = manifests[0].0 == manifests[1].0;

    let set = manifests[0].1.load_all().unwrap();
    let run = || {
        let mut model = ModelConfig::reduced(FeatureMode::RealImag, 16).unwrap();
        model.stft = StftConfig::default();
        let tc = TrainConfig {
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut st = TrainState::<f32>::new(tc, model).unwrap();
        let fx = FeatureExtractor::new(st.net.config()).unwrap();
        let mut trajectory = vec![encode_network(&st.net)];
        for _ in 0..3 {
            let batch = st.sample_batch(&set).unwrap();
            st.train_step(&fx, &batch).unwrap();
            trajectory.push(encode_network(&st.net));
        }
        (trajectory, st)
    };
    let (ta, sa) = run();
    let (tb, sb) = run();
    let train_same = ta == tb && sa.encode() == sb.encode();

    let manifest = &manifests[0].1;
    let reports: Vec<String> = [&sa, &sb]
        .iter()
        .flat_map(|st| {
            [System::ProposedRi, System::OracleMask]
                .map(|s| evaluate_system(s, manifest, Some(&st.net), None).unwrap().to_jsonl())
        })
        .collect();
    let eval_same = reports[0] == reports[2] && reports[1] == reports[3];
    report(
        9,
        synth_same && train_same && eval_same,
        format!("manifests identical: {synth_same}, parameter trajectories identical: {train_same}, reports identical: {eval_same}"),
    );
}
