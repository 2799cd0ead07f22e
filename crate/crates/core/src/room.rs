//! Acoustic scene sampling and image-method room impulse responses.
//!
//! Walls share one reflection coefficient derived from the requested T60
//! (Sabine's formula, optionally refined against the image-energy decay, see
//! [`AbsorptionModel`]). Reverberant responses pass through the usual 100 Hz
//! high-pass. Image sources are enumerated up to a propagation time of
//! 1.2 x T60 and each is rendered as an 81-tap Hann-windowed sinc centred on
//! its fractional delay. Past [`TAIL_START_SECS`] the delays are snapped to a
//! 1/64-sample grid first, so the dense tail costs one kernel per grid cell
//! rather than one per image.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Half-width of the fractional-delay kernel; the kernel has `2 * 40 + 1` taps.
pub const DELAY_KERNEL_HALF_WIDTH: usize = 40;
/// Images are generated up to this multiple of T60.
pub const IMAGE_TIME_LIMIT: f64 = 1.2;
/// Images arriving after this time are rendered from a delay grid of
/// `1 / TAIL_PHASES` samples instead of one kernel evaluation each.
pub const TAIL_START_SECS: f64 = 0.3;
const TAIL_PHASES: usize = 64;
const SABINE: f64 = 0.1611;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Closed interval sampled uniformly; `min == max` is a point value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub min: f64,
    pub max: f64,
}

impl UniformRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::invalid(format!(
                "{name}: bad range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Distributions of the random acoustic conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub room_x: UniformRange,
    pub room_y: UniformRange,
    pub room_z: UniformRange,
    pub t60: UniformRange,
    /// Offset of the microphone from the room centre in x and y.
    pub mic_offset: UniformRange,
    pub mic_z: f64,
    /// Source azimuth around the microphone, degrees; 0 is +x, counter-clockwise.
    pub source_angle: UniformRange,
    pub source_distance_base: f64,
    pub source_distance_offset: UniformRange,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            room_x: UniformRange::new(4.0, 8.0),
            room_y: UniformRange::new(4.0, 8.0),
            room_z: UniformRange::new(2.5, 3.0),
            t60: UniformRange::new(0.16, 2.0),
            mic_offset: UniformRange::new(-0.5, 0.5),
            mic_z: 1.5,
            source_angle: UniformRange::new(0.0, 180.0),
            source_distance_base: 1.0,
            source_distance_offset: UniformRange::new(-0.5, 0.5),
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        self.room_x.validate("room_x")?;
        self.room_y.validate("room_y")?;
        self.room_z.validate("room_z")?;
        self.t60.validate("t60")?;
        self.mic_offset.validate("mic_offset")?;
        self.source_angle.validate("source_angle")?;
        self.source_distance_offset.validate("source_distance_offset")?;
        if self.room_x.min <= 0.0 || self.room_y.min <= 0.0 || self.room_z.min <= 0.0 {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        if self.t60.min < 0.0 {
            return Err(Error::invalid("t60 must be non-negative"));
        }
        Ok(())
    }
}

/// One room with a microphone and one or more sources, metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_dims: [f64; 3],
    /// Reverberation time in seconds; zero means anechoic.
    pub t60: f64,
    pub mic_pos: [f64; 3],
    pub source_pos: Vec<[f64; 3]>,
}

fn inside(p: &[f64; 3], dims: &[f64; 3]) -> bool {
    p.iter().zip(dims).all(|(&v, &d)| v > 0.0 && v < d)
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidScene("room dimensions must be positive".into()));
        }
        if !(self.t60 >= 0.0) {
            return Err(Error::InvalidScene("t60 must be non-negative".into()));
        }
        if !inside(&self.mic_pos, &self.room_dims) {
            return Err(Error::InvalidScene("microphone outside the room".into()));
        }
        for (i, s) in self.source_pos.iter().enumerate() {
            if !inside(s, &self.room_dims) {
                return Err(Error::InvalidScene(format!("source {i} outside the room")));
            }
        }
        Ok(())
    }

    pub fn source_distance(&self, source_index: usize) -> f64 {
        distance(&self.source_pos[source_index], &self.mic_pos)
    }

    pub fn volume(&self) -> f64 {
        self.room_dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.room_dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Wall reflection coefficient, `sqrt(1 - alpha)` with Sabine's alpha.
    /// Zero for an anechoic scene.
    pub fn reflection_coefficient(&self) -> Result<f64> {
        if self.t60 == 0.0 {
            return Ok(0.0);
        }
        let alpha = SABINE * self.volume() / (self.surface() * self.t60);
        if alpha > 1.0 {
            return Err(Error::InvalidScene(format!(
                "T60 {} s is too short for a {:?} m room (absorption {alpha:.3} > 1)",
                self.t60, self.room_dims
            )));
        }
        Ok((1.0 - alpha).sqrt().clamp(0.0, 1.0 - f64::EPSILON))
    }
}

/// Draws a scene. Sources sit in the microphone's horizontal plane at the
/// sampled azimuth and distance; placements that leave the room are redrawn.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &SceneRanges,
    n_sources: usize,
) -> Result<SceneSpec> {
    if n_sources == 0 {
        return Err(Error::invalid("a scene needs at least one source"));
    }
    ranges.validate()?;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let room_dims = [
            ranges.room_x.sample(rng),
            ranges.room_y.sample(rng),
            ranges.room_z.sample(rng),
        ];
        let t60 = ranges.t60.sample(rng);
        let mic_pos = [
            room_dims[0] / 2.0 + ranges.mic_offset.sample(rng),
            room_dims[1] / 2.0 + ranges.mic_offset.sample(rng),
            ranges.mic_z,
        ];
        if !inside(&mic_pos, &room_dims) {
            continue;
        }
        let mut source_pos = Vec::with_capacity(n_sources);
        'sources: for _ in 0..n_sources {
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let theta = ranges.source_angle.sample(rng).to_radians();
                let d = ranges.source_distance_base + ranges.source_distance_offset.sample(rng);
                let p = [
                    mic_pos[0] + d * theta.cos(),
                    mic_pos[1] + d * theta.sin(),
                    mic_pos[2],
                ];
                if d > 0.0 && inside(&p, &room_dims) {
                    source_pos.push(p);
                    continue 'sources;
                }
            }
            break;
        }
        if source_pos.len() < n_sources {
            continue;
        }
        let scene = SceneSpec {
            room_dims,
            t60,
            mic_pos,
            source_pos,
        };
        if scene.reflection_coefficient().is_err() {
            continue;
        }
        return Ok(scene);
    }
    Err(Error::SamplingFailure(MAX_PLACEMENT_ATTEMPTS))
}

/// Adds one windowed-sinc fractional delay to `h`.
fn add_delayed_tap(h: &mut [f64], delay: f64, gain: f64) {
    let half = DELAY_KERNEL_HALF_WIDTH as i64;
    let centre = delay.round() as i64;
    let frac = delay - centre as f64;
    let sin_frac = (PI * frac).sin();
    let width = (half + 1) as f64;
    // Window phase pi * t / width with t = j - frac, stepped by rotation.
    let step = Complex64::from_polar(1.0, PI / width);
    let mut phase = Complex64::from_polar(1.0, PI * (-half as f64 - frac) / width);
    for j in -half..=half {
        let idx = centre + j;
        let t = j as f64 - frac;
        if idx >= 0 && (idx as usize) < h.len() {
            // sin(pi (j - frac)) = -(-1)^j sin(pi frac)
            let sinc = if t == 0.0 {
                1.0
            } else {
                let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
                sign * sin_frac / (PI * t)
            };
            let win = 0.5 * (1.0 + phase.re);
            h[idx as usize] += gain * win * sinc;
        }
        phase *= step;
    }
}

/// Adds every image with reflection coefficient `beta` to `h`; images
/// arriving at or after `tail_start` samples go through the delay grid.
fn render_images(scene: &SceneSpec, src: [f64; 3], fs: f64, beta: f64, tail_start: f64, h: &mut [f64]) {
    let len = h.len();
    let (_, [nx, ny, nz]) = image_extent(scene, fs, len);
    let mut beta_pow = vec![1.0; (2 * (nx + ny + nz) + 4) as usize];
    for o in 1..beta_pow.len() {
        beta_pow[o] = beta_pow[o - 1] * beta;
    }
    let mut tail = vec![0.0; (len + 1) * TAIL_PHASES];
    for_each_image(scene, src, fs, len, |delay, order, d| {
        let gain = beta_pow[order as usize] / (4.0 * PI * d);
        if delay < tail_start {
            add_delayed_tap(h, delay, gain);
        } else {
            tail[(delay * TAIL_PHASES as f64).round() as usize] += gain;
        }
    });
    render_tail(h, &tail);
}

/// Renders gains accumulated on the `1 / TAIL_PHASES` delay grid.
fn render_tail(h: &mut [f64], tail: &[f64]) {
    let half = DELAY_KERNEL_HALF_WIDTH;
    let span = 2 * half + 3;
    let kernels: Vec<Vec<f64>> = (0..TAIL_PHASES)
        .map(|p| {
            let mut k = vec![0.0; span];
            add_delayed_tap(&mut k, (half + 1) as f64 + p as f64 / TAIL_PHASES as f64, 1.0);
            k
        })
        .collect();
    for (q, &g) in tail.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (n, p) = (q / TAIL_PHASES, q % TAIL_PHASES);
        let start = n as i64 - (half + 1) as i64;
        for (j, &k) in kernels[p].iter().enumerate() {
            let idx = start + j as i64;
            if idx >= 0 && (idx as usize) < h.len() {
                h[idx as usize] += g * k;
            }
        }
    }
}

/// How the shared wall reflection coefficient is obtained from T60.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsorptionModel {
    /// `beta = sqrt(1 - alpha)`, `alpha = 0.1611 V / (S T60)`.
    Sabine,
    /// Starts from Sabine and searches `beta` so that the image-energy decay
    /// of this source/microphone pair has the requested T60 over its
    /// -5..-25 dB range. Shoebox image decays are not diffuse, so plain Sabine
    /// coefficients give noticeably longer decays.
    #[default]
    Calibrated,
}

/// Allen & Berkley's 100 Hz high-pass. All image taps share a sign, so
/// without it the dense tail accumulates a large low-frequency offset.
fn highpass_100hz(h: &mut [f64], fs: f64) {
    let w = 2.0 * PI * 100.0 / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y0, mut y1) = (0.0, 0.0);
    for v in h.iter_mut() {
        let y2 = y1;
        y1 = y0;
        y0 = b1 * y1 + b2 * y2 + *v;
        *v = y0 + a1 * y1 + r1 * y2;
    }
}

/// Visits every image source whose arrival falls inside `len` samples.
/// The callback receives delay in samples, reflection order and distance.
fn image_extent(scene: &SceneSpec, fs: f64, len: usize) -> (f64, [i64; 3]) {
    let max_dist = (len + DELAY_KERNEL_HALF_WIDTH) as f64 / fs * SPEED_OF_SOUND;
    let n = |l: f64| (max_dist / (2.0 * l)).ceil() as i64 + 1;
    let [lx, ly, lz] = scene.room_dims;
    (max_dist, [n(lx), n(ly), n(lz)])
}

fn for_each_image(scene: &SceneSpec, src: [f64; 3], fs: f64, len: usize, mut f: impl FnMut(f64, i64, f64)) {
    let mic = scene.mic_pos;
    let [lx, ly, lz] = scene.room_dims;
    let (max_dist, [nx, ny, nz]) = image_extent(scene, fs, len);
    for mx in -nx..=nx {
        for q in 0..2i64 {
            let dx = (1 - 2 * q) as f64 * src[0] - mic[0] + 2.0 * mx as f64 * lx;
            if dx.abs() > max_dist {
                continue;
            }
            let ox = (mx - q).abs() + mx.abs();
            for my in -ny..=ny {
                for j in 0..2i64 {
                    let dy = (1 - 2 * j) as f64 * src[1] - mic[1] + 2.0 * my as f64 * ly;
                    let dxy2 = dx * dx + dy * dy;
                    if dxy2 > max_dist * max_dist {
                        continue;
                    }
                    let oy = (my - j).abs() + my.abs();
                    for mz in -nz..=nz {
                        for k in 0..2i64 {
                            let dz = (1 - 2 * k) as f64 * src[2] - mic[2] + 2.0 * mz as f64 * lz;
                            let d = (dxy2 + dz * dz).sqrt();
                            let delay = d / SPEED_OF_SOUND * fs;
                            if delay >= len as f64 {
                                continue;
                            }
                            f(delay, ox + oy + (mz - k).abs() + mz.abs(), d);
                        }
                    }
                }
            }
        }
    }
}

/// Least-squares decay slope (dB per second) over the -5..-25 dB part of a
/// Schroeder curve sampled every `dt` seconds. `None` when the curve does
/// not span that range.
fn decay_slope(edc_db: impl Iterator<Item = f64>, dt: f64) -> Option<f64> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, db) in edc_db.enumerate() {
        if db < -25.0 {
            if n < 3.0 {
                return None;
            }
            let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            return (slope < 0.0).then_some(slope);
        }
        if db <= -5.0 {
            let t = i as f64 * dt;
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    None
}

fn calibrate_reflection(scene: &SceneSpec, src: [f64; 3], fs: f64, len: usize, initial: f64) -> f64 {
    const BIN: usize = 8;
    let bins = len.div_ceil(BIN);
    let (_, [nx, ny, nz]) = image_extent(scene, fs, len);
    let orders = (2 * (nx + ny + nz) + 4) as usize;
    // Energy histogram over (time bin, reflection order).
    let mut hist = vec![0.0; bins * orders];
    for_each_image(scene, src, fs, len, |delay, o, d| {
        let b = (delay as usize / BIN).min(bins - 1);
        hist[b * orders + o as usize] += 1.0 / (d * d);
    });
    let t60_of = |beta: f64| -> Option<f64> {
        let b2 = beta * beta;
        let energy: Vec<f64> = (0..bins)
            .map(|b| {
                hist[b * orders..(b + 1) * orders]
                    .iter()
                    .rev()
                    .fold(0.0, |acc, &h| acc * b2 + h)
            })
            .collect();
        let mut edc = vec![0.0; bins];
        let mut acc = 0.0;
        for b in (0..bins).rev() {
            acc += energy[b];
            edc[b] = acc;
        }
        let total = edc[0];
        decay_slope(edc.iter().map(|e| 10.0 * (e / total).log10()), BIN as f64 / fs)
            .map(|s| -60.0 / s)
    };
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-9);
    let mut beta = initial;
    for _ in 0..60 {
        match t60_of(beta) {
            Some(t) if (t / scene.t60 - 1.0).abs() < 1e-3 => return beta,
            Some(t) if t < scene.t60 => lo = beta,
            // Too slow, or so slow the curve never reaches -25 dB.
            _ => hi = beta,
        }
        beta = 0.5 * (lo + hi);
    }
    beta
}

/// Image-method impulse response from source `source_index` to the
/// microphone, with the default absorption model.
pub fn generate_rir(scene: &SceneSpec, source_index: usize, sample_rate: u32) -> Result<AudioBuffer> {
    generate_rir_with(scene, source_index, sample_rate, AbsorptionModel::default())
}

pub fn generate_rir_with(
    scene: &SceneSpec,
    source_index: usize,
    sample_rate: u32,
    model: AbsorptionModel,
) -> Result<AudioBuffer> {
    scene.validate()?;
    if source_index >= scene.source_pos.len() {
        return Err(Error::invalid(format!("no source {source_index} in scene")));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let fs = sample_rate as f64;
    let sabine_beta = scene.reflection_coefficient()?;
    let src = scene.source_pos[source_index];
    let direct = distance(&src, &scene.mic_pos);
    let direct_delay = direct / SPEED_OF_SOUND * fs;
    let tail = (IMAGE_TIME_LIMIT * scene.t60 * fs).ceil() as usize;
    let len = tail.max(direct_delay.ceil() as usize + DELAY_KERNEL_HALF_WIDTH + 1);
    let mut h = vec![0.0; len];

    if sabine_beta == 0.0 {
        add_delayed_tap(&mut h, direct_delay, 1.0 / (4.0 * PI * direct));
        return Ok(AudioBuffer::from_trusted(h, sample_rate));
    }
    let beta = match model {
        AbsorptionModel::Sabine => sabine_beta,
        AbsorptionModel::Calibrated => calibrate_reflection(scene, src, fs, len, sabine_beta),
    };
    render_images(scene, src, fs, beta, TAIL_START_SECS * fs, &mut h);
    highpass_100hz(&mut h, fs);
    Ok(AudioBuffer::from_trusted(h, sample_rate))
}

/// Linear convolution truncated to the length of `signal`.
pub fn convolve(signal: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer> {
    if signal.sample_rate() != rir.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            signal.sample_rate(),
            rir.sample_rate()
        )));
    }
    let out = fft_convolve(signal.samples(), rir.samples(), signal.len());
    AudioBuffer::new(out, signal.sample_rate())
}

pub(crate) fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let to_c = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let mut a = to_c(x);
    let mut b = to_c(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    (0..out_len)
        .map(|i| if i < full { a[i].re / n as f64 } else { 0.0 })
        .collect()
}

/// Reverberation time from Schroeder backward integration, fitting the
/// -5 dB to -25 dB portion of the decay curve and extrapolating to -60 dB.
pub fn estimate_t60(rir: &AudioBuffer) -> Result<f64> {
    let h = rir.samples();
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    if total <= 0.0 {
        return Err(Error::Estimation("impulse response is silent".into()));
    }
    let fs = rir.sample_rate() as f64;
    let slope = decay_slope(edc.iter().map(|e| 10.0 * (e / total).log10()), 1.0 / fs)
        .ok_or_else(|| Error::Estimation("decay curve does not span -5..-25 dB".into()))?;
    Ok(-60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_ranges() -> SceneRanges {
        SceneRanges {
            room_x: UniformRange::point(6.0),
            room_y: UniformRange::point(6.0),
            room_z: UniformRange::point(2.75),
            t60: UniformRange::point(0.4),
            mic_offset: UniformRange::point(0.0),
            mic_z: 1.5,
            source_angle: UniformRange::point(0.0),
            source_distance_base: 1.0,
            source_distance_offset: UniformRange::point(0.0),
        }
    }

    #[test]
    fn point_ranges_place_source_on_x_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_scene(&mut rng, &point_ranges(), 1).unwrap();
        assert_eq!(s.room_dims, [6.0, 6.0, 2.75]);
        assert_eq!(s.mic_pos, [3.0, 3.0, 1.5]);
        assert_eq!(s.source_pos[0], [4.0, 3.0, 1.5]);
        let ranges = SceneRanges {
            source_angle: UniformRange::point(90.0),
            ..point_ranges()
        };
        let s = sample_scene(&mut rng, &ranges, 1).unwrap();
        assert!((s.source_pos[0][0] - 3.0).abs() < 1e-12);
        assert!((s.source_pos[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn default_ranges_respected_and_deterministic() {
        let ranges = SceneRanges::default();
        for seed in 0..50 {
            let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &ranges, 2).unwrap();
            let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &ranges, 2).unwrap();
            assert_eq!(a, b);
            assert!(ranges.room_x.contains(a.room_dims[0]));
            assert!(ranges.room_y.contains(a.room_dims[1]));
            assert!(ranges.room_z.contains(a.room_dims[2]));
            assert!(ranges.t60.contains(a.t60));
            assert_eq!(a.mic_pos[2], 1.5);
            for i in 0..2 {
                let d = a.source_distance(i);
                assert!((0.5 - 1e-12..=1.5 + 1e-12).contains(&d));
                assert_eq!(a.source_pos[i][2], 1.5);
            }
        }
    }

    #[test]
    fn unsatisfiable_ranges_fail() {
        let ranges = SceneRanges {
            source_distance_base: 10.0,
            ..point_ranges()
        };
        let err = sample_scene(&mut ChaCha8Rng::seed_from_u64(1), &ranges, 1).unwrap_err();
        assert!(matches!(err, Error::SamplingFailure(_)));
        assert!(sample_scene(&mut ChaCha8Rng::seed_from_u64(1), &point_ranges(), 0).is_err());
    }

    fn anechoic(distance: f64) -> SceneSpec {
        SceneSpec {
            room_dims: [6.0, 6.0, 3.0],
            t60: 0.0,
            mic_pos: [2.0, 3.0, 1.5],
            source_pos: vec![[2.0 + distance, 3.0, 1.5]],
        }
    }

    #[test]
    fn anechoic_integer_delay_is_single_impulse() {
        // 20 samples at 8 kHz.
        let d = 20.0 * SPEED_OF_SOUND / 8000.0;
        let h = generate_rir(&anechoic(d), 0, 8000).unwrap();
        for (i, &v) in h.samples().iter().enumerate() {
            if i != 20 {
                assert!(v.abs() < 1e-15, "tap {i} = {v}");
            }
        }
        assert!((h.samples()[20] - 1.0 / (4.0 * PI * d)).abs() < 1e-15);
    }

    #[test]
    fn free_field_inverse_distance_law() {
        let d = 10.0 * SPEED_OF_SOUND / 8000.0;
        let near = generate_rir(&anechoic(d), 0, 8000).unwrap();
        let far = generate_rir(&anechoic(2.0 * d), 0, 8000).unwrap();
        let peak = |h: &AudioBuffer| h.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak(&far) / peak(&near) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sabine_absorption_above_one_is_invalid() {
        let scene = SceneSpec {
            t60: 0.01,
            ..anechoic(1.0)
        };
        assert!(matches!(generate_rir(&scene, 0, 8000), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn reverberant_rir_decays_near_requested_t60() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = sample_scene(&mut rng, &point_ranges(), 1).unwrap();
        let h = generate_rir(&scene, 0, 8000).unwrap();
        assert!(h.len() as f64 >= 0.4 * 8000.0);
        let t = estimate_t60(&h).unwrap();
        assert!((t / 0.4 - 1.0).abs() < 0.2, "estimated {t}");
        let sabine = generate_rir_with(&scene, 0, 8000, AbsorptionModel::Sabine).unwrap();
        assert_eq!(sabine.len(), h.len());
        assert!(estimate_t60(&sabine).is_ok());
        let peak = (0..h.len())
            .max_by(|&a, &b| h.samples()[a].abs().total_cmp(&h.samples()[b].abs()))
            .unwrap();
        let expect = (1.0 / SPEED_OF_SOUND * 8000.0).round() as usize;
        assert!(peak.abs_diff(expect) <= 1);
    }

    #[test]
    fn gridded_tail_matches_exact_rendering() {
        let scene = SceneSpec {
            room_dims: [5.0, 4.0, 2.8],
            t60: 0.5,
            mic_pos: [2.4, 2.1, 1.5],
            source_pos: vec![[3.1, 2.9, 1.5]],
        };
        let fs = 8000.0;
        let mut exact = vec![0.0; 4800];
        let mut gridded = vec![0.0; 4800];
        render_images(&scene, scene.source_pos[0], fs, 0.8, f64::INFINITY, &mut exact);
        render_images(&scene, scene.source_pos[0], fs, 0.8, 400.0, &mut gridded);
        assert_eq!(exact[..300], gridded[..300]);
        let err: f64 = exact.iter().zip(&gridded).map(|(a, b)| (a - b).powi(2)).sum();
        let tail: f64 = exact[400..].iter().map(|a| a * a).sum();
        // Delay error at most 1/128 sample.
        assert!(10.0 * (err / tail).log10() < -25.0, "{}", 10.0 * (err / tail).log10());
    }

    fn brute_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|n| (0..=n).filter(|&m| n - m < h.len()).map(|m| x[m] * h[n - m]).sum())
            .collect()
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = convolve(
            &AudioBuffer::new(x.clone(), 8000).unwrap(),
            &AudioBuffer::new(h.clone(), 8000).unwrap(),
        )
        .unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in y.samples().iter().zip(brute_convolve(&x, &h)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn convolution_identity_shift_and_rate_check() {
        let x = AudioBuffer::new((0..50).map(|i| (i as f64).cos()).collect(), 8000).unwrap();
        let delta = AudioBuffer::new(vec![1.0], 8000).unwrap();
        let y = convolve(&x, &delta).unwrap();
        for (a, b) in y.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        let shift = AudioBuffer::new(vec![0.0, 0.0, 0.0, 1.0], 8000).unwrap();
        let y = convolve(&x, &shift).unwrap();
        for i in 3..50 {
            assert!((y.samples()[i] - x.samples()[i - 3]).abs() < 1e-12);
        }
        let other = AudioBuffer::new(vec![1.0], 16000).unwrap();
        assert!(convolve(&x, &other).is_err());
    }

    #[test]
    fn t60_of_exponential_decay() {
        let fs = 8000.0;
        for t60 in [0.3, 0.7, 1.5] {
            let h: Vec<f64> = (0..(2.0 * t60 * fs) as usize)
                .map(|n| 10f64.powf(-3.0 * n as f64 / (t60 * fs)))
                .collect();
            let buf = AudioBuffer::new(h, 8000).unwrap();
            let est = estimate_t60(&buf).unwrap();
            assert!((est / t60 - 1.0).abs() < 0.05, "{est} vs {t60}");
            let loud = estimate_t60(&buf.scaled(10.0)).unwrap();
            assert!((loud - est).abs() < 1e-9 * est);
        }
    }

    #[test]
    fn t60_of_impulse_fails() {
        let mut h = vec![0.0; 100];
        h[3] = 1.0;
        let buf = AudioBuffer::new(h, 8000).unwrap();
        assert!(matches!(estimate_t60(&buf), Err(Error::Estimation(_))));
        assert!(estimate_t60(&AudioBuffer::zeros(10, 8000)).is_err());
    }
}
