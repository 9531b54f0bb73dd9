//! Synthetic determined convolutive scenes with known ground truth.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::signal::{read_wav, write_wav, TimeSignal, WavEncoding};

/// Initial amplitude of the reverberant tail relative to a unit direct path.
pub const TAIL_LEVEL: f64 = 0.3;

/// RMS level every synthesized source is normalized to.
pub const SOURCE_RMS: f64 = 0.1;

/// `x_m = sum_n s_n * h_mn`, truncated to the source length. `irs` is
/// indexed `[m][n]`.
pub fn convolve_mix<T: Real>(sources: &[Vec<T>], irs: &[Vec<Vec<T>>]) -> Result<Vec<Vec<T>>> {
    let n = sources.len();
    if n == 0 {
        return Err(Error::invalid("no sources"));
    }
    let len = sources[0].len();
    if sources.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("sources differ in length"));
    }
    if irs.is_empty() || irs.iter().any(|row| row.len() != n) {
        return Err(Error::invalid(format!("impulse responses must be M x {n}")));
    }
    if irs.iter().flatten().any(|h| h.is_empty()) {
        return Err(Error::invalid("empty impulse response"));
    }
    Ok(irs
        .iter()
        .map(|row| {
            let mut x = vec![T::zero(); len];
            for (s, h) in sources.iter().zip(row) {
                for (acc, v) in x.iter_mut().zip(convolve(s, h, len)) {
                    *acc += v;
                }
            }
            x
        })
        .collect())
}

/// First `len` samples of the full convolution `s * h`.
pub fn convolve<T: Real>(s: &[T], h: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (k, &hk) in h.iter().enumerate() {
        if hk == T::zero() {
            continue;
        }
        for (o, &sv) in out.iter_mut().skip(k).zip(s) {
            *o += hk * sv;
        }
    }
    out
}

/// Direct-path impulse of height `direct_gain` followed by a white-noise tail
/// whose amplitude falls by 60 dB over `decay_ms`.
pub fn synth_ir(seed: u64, taps: usize, decay_ms: f64, sample_rate: u32, direct_gain: f64) -> Result<Vec<f64>> {
    if taps == 0 {
        return Err(Error::invalid("impulse response needs at least one tap"));
    }
    if !(decay_ms >= 0.0) {
        return Err(Error::invalid("decay time must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = decay_ms * 1e-3 * sample_rate as f64;
    let mut h = vec![0.0; taps];
    h[0] = direct_gain;
    if decay > 0.0 {
        for (t, v) in h.iter_mut().enumerate().skip(1) {
            let g: f64 = rng.sample(StandardNormal);
            *v = TAIL_LEVEL * g * 10f64.powf(-3.0 * t as f64 / decay);
        }
    }
    Ok(h)
}

/// Schroeder backward-integrated energy decay curve in dB, normalized to
/// 0 dB at the first sample.
pub fn schroeder_curve(h: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = h
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter().map(|e| 10.0 * (e / total).log10()).collect()
}

/// Reverberation time from the -5 to -35 dB span of the Schroeder curve,
/// extrapolated to 60 dB. `None` when the curve never reaches -35 dB.
pub fn estimate_t60_ms(h: &[f64], sample_rate: u32) -> Option<f64> {
    let edc = schroeder_curve(h);
    let t5 = edc.iter().position(|&d| d <= -5.0)?;
    let t35 = edc.iter().position(|&d| d <= -35.0)?;
    Some(2.0 * (t35 - t5) as f64 * 1000.0 / sample_rate as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Amplitude-modulated tone notes on interleaved carrier grids.
    AmTones,
    /// Band-pass filtered noise bursts.
    NoiseBursts,
    /// Pulse-excited resonances in syllable-like segments.
    SpeechLike,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::AmTones, SourceKind::NoiseBursts, SourceKind::SpeechLike];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::AmTones => "am-tones",
            SourceKind::NoiseBursts => "noise-bursts",
            SourceKind::SpeechLike => "speech-like",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown source kind `{s}`")))
    }
}

/// Seed for stream `index` derived from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` independent sources of `length` samples, each normalized to
/// [`SOURCE_RMS`].
pub fn synth_sources(seed: u64, kind: SourceKind, n: usize, length: usize, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    if n == 0 || length == 0 {
        return Err(Error::invalid("need at least one source and one sample"));
    }
    if sample_rate < 1000 {
        return Err(Error::invalid("sample rate below 1 kHz"));
    }
    Ok((0..n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            let mut s = match kind {
                SourceKind::AmTones => am_tones(&mut rng, k, n, length, sample_rate as f64),
                SourceKind::NoiseBursts => noise_bursts(&mut rng, length, sample_rate as f64),
                SourceKind::SpeechLike => speech_like(&mut rng, length, sample_rate as f64),
            };
            normalize_rms(&mut s, SOURCE_RMS);
            s
        })
        .collect())
}

fn normalize_rms(s: &mut [f64], target: f64) {
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    if rms > 0.0 {
        s.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Segment lengths in samples covering `length`, each uniform in `[lo, hi)`
/// seconds.
fn segments<R: Rng>(rng: &mut R, length: usize, rate: f64, lo: f64, hi: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < length {
        let dur = ((rng.random_range(lo..hi) * rate) as usize).max(1);
        let end = (start + dur).min(length);
        out.push((start, end));
        start = end;
    }
    out
}

fn hann_env(t: usize, len: usize) -> f64 {
    if len < 2 {
        return 1.0;
    }
    0.5 - 0.5 * (TAU * (t as f64 + 0.5) / len as f64).cos()
}

/// Carrier grid spacing `rate / 64`; source `k` of `n` owns every `n`-th
/// grid line, so carriers of different sources never coincide.
fn am_tones<R: Rng>(rng: &mut R, k: usize, n: usize, length: usize, rate: f64) -> Vec<f64> {
    let spacing = rate / 64.0;
    let max_line = ((0.45 * rate / spacing) as usize - k) / n;
    let mut out = vec![0.0; length];
    for (a, b) in segments(rng, length, rate, 0.25, 0.6) {
        if rng.random_bool(0.2) {
            continue;
        }
        let fm = rng.random_range(2.0..6.0);
        let depth = rng.random_range(0.3..0.9);
        let voices = rng.random_range(1..=2);
        for _ in 0..voices {
            let line = rng.random_range(1..=max_line.max(1));
            let fc = (line * n + k) as f64 * spacing + spacing;
            let phase = rng.random_range(0.0..TAU);
            let amp = rng.random_range(0.5..1.0);
            for t in a..b {
                let time = t as f64 / rate;
                let env = hann_env(t - a, b - a) * (1.0 + depth * (TAU * fm * time).sin());
                out[t] += amp * env * (TAU * fc * time + phase).sin();
            }
        }
    }
    out
}

/// Two-pole resonator coefficients for centre `freq` and pole radius `r`.
fn resonator(freq: f64, r: f64, rate: f64) -> (f64, f64) {
    (2.0 * r * (TAU * freq / rate).cos(), -r * r)
}

fn noise_bursts<R: Rng>(rng: &mut R, length: usize, rate: f64) -> Vec<f64> {
    let mut out = vec![0.0; length];
    for (a, b) in segments(rng, length, rate, 0.1, 0.4) {
        if rng.random_bool(0.35) {
            continue;
        }
        let fc = rng.random_range(0.03..0.4) * rate;
        let (a1, a2) = resonator(fc, rng.random_range(0.9..0.98), rate);
        let (mut y1, mut y2) = (0.0, 0.0);
        for t in a..b {
            let e: f64 = rng.sample(StandardNormal);
            let y = e + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            out[t] = y * hann_env(t - a, b - a);
        }
    }
    out
}

/// Impulse-train excitation with jittered pitch through two formant
/// resonators, in syllables separated by pauses.
fn speech_like<R: Rng>(rng: &mut R, length: usize, rate: f64) -> Vec<f64> {
    let mut out = vec![0.0; length];
    let base_pitch = rng.random_range(90.0..240.0);
    for (a, b) in segments(rng, length, rate, 0.12, 0.35) {
        if rng.random_bool(0.3) {
            continue;
        }
        let f1 = rng.random_range(250.0f64..900.0).min(0.2 * rate);
        let f2 = rng.random_range(900.0f64..2600.0).min(0.4 * rate);
        let (a11, a12) = resonator(f1, 0.97, rate);
        let (a21, a22) = resonator(f2, 0.95, rate);
        let pitch_start = base_pitch * rng.random_range(0.85..1.15);
        let pitch_end = base_pitch * rng.random_range(0.85..1.15);
        let mut state = [0.0f64; 4];
        let mut phase = 0.0;
        for t in a..b {
            let frac = (t - a) as f64 / (b - a) as f64;
            let pitch = pitch_start + (pitch_end - pitch_start) * frac;
            phase += pitch / rate;
            let noise: f64 = rng.sample(StandardNormal);
            let mut e = 0.02 * noise;
            if phase >= 1.0 {
                phase -= 1.0;
                e += 1.0;
            }
            let y1 = e + a11 * state[0] + a12 * state[1];
            state[1] = state[0];
            state[0] = y1;
            let y2 = y1 + a21 * state[2] + a22 * state[3];
            state[3] = state[2];
            state[2] = y2;
            out[t] = y2 * (PI * frac).sin();
        }
    }
    out
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SourceKind,
    pub n_sources: usize,
    pub n_channels: usize,
    pub length: usize,
    pub sample_rate: u32,
    pub ir_taps: usize,
    pub decay_ms: f64,
    /// Direct-path gain from source `n` to channel `m != n`.
    pub cross_gain: f64,
    /// Largest direct-path delay in samples.
    pub max_delay: usize,
    /// Zero-based channel the ground-truth images are taken at.
    pub ref_channel: usize,
}

impl SceneSpec {
    /// Two sources, two channels, 32-tap IRs with a short tail.
    pub fn near_anechoic(kind: SourceKind, length: usize, sample_rate: u32) -> Self {
        SceneSpec {
            kind,
            n_sources: 2,
            n_channels: 2,
            length,
            sample_rate,
            ir_taps: 32,
            decay_ms: 1.0,
            cross_gain: 0.6,
            max_delay: 4,
            ref_channel: 0,
        }
    }
}

/// Dry sources, impulse responses, mixture and reference-channel images.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub sources: TimeSignal<f64>,
    /// Indexed `[m][n]`.
    pub irs: Vec<Vec<Vec<f64>>>,
    pub mixture: TimeSignal<f64>,
    /// `s_n * h_{ref,n}`, one channel per source.
    pub images: TimeSignal<f64>,
}

impl Scene {
    /// Mean Schroeder T60 over all impulse responses that reach -35 dB.
    pub fn t60_ms(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .irs
            .iter()
            .flatten()
            .filter_map(|h| estimate_t60_ms(h, self.spec.sample_rate))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Builds one scene; every random draw descends from `seed`.
pub fn make_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if spec.n_sources == 0 || spec.n_channels == 0 {
        return Err(Error::invalid("scene needs sources and channels"));
    }
    if spec.max_delay >= spec.ir_taps {
        return Err(Error::invalid("direct-path delay must be shorter than the IR"));
    }
    if spec.ref_channel >= spec.n_channels {
        return Err(Error::invalid("reference channel out of range"));
    }
    let sources = synth_sources(derive_seed(seed, 0), spec.kind, spec.n_sources, spec.length, spec.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let irs: Vec<Vec<Vec<f64>>> = (0..spec.n_channels)
        .map(|m| {
            (0..spec.n_sources)
                .map(|n| {
                    let gain = if m == n { 1.0 } else { spec.cross_gain };
                    let delay = if spec.max_delay == 0 { 0 } else { rng.random_range(0..=spec.max_delay) };
                    let ir_seed = rng.random::<u64>();
                    let tail = synth_ir(ir_seed, spec.ir_taps - delay, spec.decay_ms, spec.sample_rate, gain)?;
                    let mut h = vec![0.0; delay];
                    h.extend(tail);
                    Ok(h)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mixture = convolve_mix(&sources, &irs)?;
    let images: Vec<Vec<f64>> = sources
        .iter()
        .zip(&irs[spec.ref_channel])
        .map(|(s, h)| convolve(s, h, spec.length))
        .collect();
    Ok(Scene {
        spec: spec.clone(),
        seed,
        sources: TimeSignal::new(sources, spec.sample_rate)?,
        irs,
        mixture: TimeSignal::new(mixture, spec.sample_rate)?,
        images: TimeSignal::new(images, spec.sample_rate)?,
    })
}

/// One replayable scene on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub seed: u64,
    pub spec: SceneSpec,
    /// Relative to the manifest's directory.
    pub mixture: PathBuf,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scenes: Vec<SceneEntry>,
}

impl SceneManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes the mixture and images as float64 WAVs under `dir` and returns
/// the manifest entry.
pub fn write_scene(scene: &Scene, name: &str, dir: impl AsRef<Path>) -> Result<SceneEntry> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mixture = PathBuf::from(format!("{name}_mix.wav"));
    write_wav(dir.join(&mixture), &scene.mixture, WavEncoding::Float64)?;
    let images = scene
        .images
        .split()
        .iter()
        .enumerate()
        .map(|(n, img)| {
            let p = PathBuf::from(format!("{name}_src{n}.wav"));
            write_wav(dir.join(&p), img, WavEncoding::Float64)?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(SceneEntry {
        name: name.to_string(),
        seed: scene.seed,
        spec: scene.spec.clone(),
        mixture,
        images,
    })
}

/// Mixture and reference images of a manifest entry, paths resolved against
/// `base`.
pub fn load_scene(entry: &SceneEntry, base: impl AsRef<Path>) -> Result<(TimeSignal<f64>, Vec<Vec<f64>>)> {
    let base = base.as_ref();
    let mixture = read_wav(base.join(&entry.mixture))?;
    let images = entry
        .images
        .iter()
        .map(|p| {
            let s = read_wav(base.join(p))?;
            Ok(s.into_channels().swap_remove(0))
        })
        .collect::<Result<_>>()?;
    Ok((mixture, images))
}
