//! Time-domain signals, RIFF/WAV codec and the JSON run report.
//!
//! Samples are planar in memory (one `Vec` per channel) and interleaved on
//! disk. Integer PCM is normalized by `2^(bits-1)` so that negative full
//! scale maps to exactly `-1.0`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Db;
use crate::scalar::Real;

/// Planar multichannel signal with a shared sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal<T> {
    channels: Vec<Vec<T>>,
    sample_rate: u32,
}

impl<T: Real> TimeSignal<T> {
    /// Builds a signal, checking that every channel has the same length and
    /// every sample is finite.
    pub fn new(channels: Vec<Vec<T>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("signal needs at least one channel"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("channel lengths differ"));
        }
        if channels.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(TimeSignal {
            channels,
            sample_rate,
        })
    }

    pub fn zeros(n_channels: usize, len: usize, sample_rate: u32) -> Self {
        TimeSignal {
            channels: vec![vec![T::zero(); len]; n_channels.max(1)],
            sample_rate,
        }
    }

    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[T] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<T>> {
        self.channels
    }

    /// Splits into single-channel signals.
    pub fn split(&self) -> Vec<TimeSignal<T>> {
        self.channels
            .iter()
            .map(|c| TimeSignal {
                channels: vec![c.clone()],
                sample_rate: self.sample_rate,
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> TimeSignal<U> {
        TimeSignal {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&s| U::lit(s.as_f64())).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or truncates every channel to `len`.
    pub fn resized(&self, len: usize) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.resize(len, T::zero());
                c
            })
            .collect();
        TimeSignal {
            channels,
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Pcm32,
    Float32,
    Float64,
}

impl WavEncoding {
    pub fn bits(self) -> u16 {
        match self {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Pcm24 => 24,
            WavEncoding::Pcm32 | WavEncoding::Float32 => 32,
            WavEncoding::Float64 => 64,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, WavEncoding::Float32 | WavEncoding::Float64)
    }

    fn from_format(tag: u16, bits: u16) -> Result<Self> {
        match (tag, bits) {
            (FORMAT_PCM, 16) => Ok(WavEncoding::Pcm16),
            (FORMAT_PCM, 24) => Ok(WavEncoding::Pcm24),
            (FORMAT_PCM, 32) => Ok(WavEncoding::Pcm32),
            (FORMAT_FLOAT, 32) => Ok(WavEncoding::Float32),
            (FORMAT_FLOAT, 64) => Ok(WavEncoding::Float64),
            _ => Err(Error::Format(format!(
                "format tag {tag:#06x} with {bits} bits per sample"
            ))),
        }
    }
}

/// Outcome of a write; integer encodings clip to full scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteStats {
    pub clipped: usize,
}

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated wav file ({what})"),
    ))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a RIFF/WAVE file into a planar `f64` signal.
pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSignal<f64>> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<TimeSignal<f64>> {
    if bytes.len() < 12 {
        return Err(truncated("header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE signature".into()));
    }

    let mut fmt: Option<(WavEncoding, usize, u32)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| Error::Format("chunk size overflow".into()))?;
        match id {
            b"fmt " => {
                if size < 16 || body_end > bytes.len() {
                    return Err(truncated("fmt chunk"));
                }
                let body = &bytes[body_start..body_end];
                let mut tag = u16_at(body, 0);
                let channels = u16_at(body, 2) as usize;
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::Format("short WAVE_FORMAT_EXTENSIBLE chunk".into()));
                    }
                    // The sub-format GUID starts with the plain format tag.
                    tag = u16_at(body, 24);
                }
                if channels == 0 {
                    return Err(Error::Format("zero channels".into()));
                }
                fmt = Some((WavEncoding::from_format(tag, bits)?, channels, rate));
            }
            b"data" => {
                if body_end > bytes.len() {
                    return Err(truncated("data chunk"));
                }
                data = Some(&bytes[body_start..body_end]);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
        if data.is_some() && fmt.is_some() {
            break;
        }
    }

    let (encoding, n_channels, rate) =
        fmt.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| truncated("no data chunk"))?;
    let width = encoding.bits() as usize / 8;
    let frame = width * n_channels;
    if data.len() % frame != 0 {
        return Err(truncated("partial sample frame"));
    }
    let n_frames = data.len() / frame;
    let mut channels = vec![Vec::with_capacity(n_frames); n_channels];
    for (f, chunk) in data.chunks_exact(frame).enumerate() {
        debug_assert!(f < n_frames);
        for (m, raw) in chunk.chunks_exact(width).enumerate() {
            channels[m].push(decode_sample(encoding, raw));
        }
    }
    TimeSignal::new(channels, rate)
}

fn decode_sample(encoding: WavEncoding, raw: &[u8]) -> f64 {
    match encoding {
        WavEncoding::Pcm16 => i16::from_le_bytes([raw[0], raw[1]]) as f64 / 32768.0,
        WavEncoding::Pcm24 => {
            let v = i32::from_le_bytes([0, raw[0], raw[1], raw[2]]) >> 8;
            v as f64 / 8_388_608.0
        }
        WavEncoding::Pcm32 => {
            i32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64 / 2_147_483_648.0
        }
        WavEncoding::Float32 => f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64,
        WavEncoding::Float64 => f64::from_le_bytes(raw.try_into().expect("8-byte sample")),
    }
}

/// Writes `signal` interleaved with the requested encoding.
pub fn write_wav<T: Real>(
    path: impl AsRef<Path>,
    signal: &TimeSignal<T>,
    encoding: WavEncoding,
) -> Result<WriteStats> {
    let (bytes, stats) = encode_wav(signal, encoding)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    if stats.clipped > 0 {
        log::warn!("{} samples clipped to full scale", stats.clipped);
    }
    Ok(stats)
}

pub fn encode_wav<T: Real>(
    signal: &TimeSignal<T>,
    encoding: WavEncoding,
) -> Result<(Vec<u8>, WriteStats)> {
    let n_channels = signal.n_channels();
    let width = encoding.bits() as usize / 8;
    let data_len = signal.len() * n_channels * width;
    if data_len > u32::MAX as usize - 64 {
        return Err(Error::invalid("signal too long for RIFF"));
    }
    let tag = if encoding.is_float() {
        FORMAT_FLOAT
    } else {
        FORMAT_PCM
    };
    let block_align = (n_channels * width) as u16;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(n_channels as u16).to_le_bytes());
    out.extend_from_slice(&signal.sample_rate().to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&encoding.bits().to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    let mut stats = WriteStats::default();
    for l in 0..signal.len() {
        for m in 0..n_channels {
            let x = signal.channel(m)[l].as_f64();
            if !x.is_finite() {
                return Err(Error::invalid("non-finite sample"));
            }
            encode_sample(encoding, x, &mut out, &mut stats);
        }
    }
    Ok((out, stats))
}

fn quantize(x: f64, bits: u32, stats: &mut WriteStats) -> i64 {
    if !(-1.0..=1.0).contains(&x) {
        stats.clipped += 1;
    }
    let scale = (1i64 << (bits - 1)) as f64;
    let q = (x.clamp(-1.0, 1.0) * scale).round() as i64;
    q.clamp(-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
}

fn encode_sample(encoding: WavEncoding, x: f64, out: &mut Vec<u8>, stats: &mut WriteStats) {
    match encoding {
        WavEncoding::Pcm16 => {
            out.extend_from_slice(&(quantize(x, 16, stats) as i16).to_le_bytes());
        }
        WavEncoding::Pcm24 => {
            let q = quantize(x, 24, stats) as i32;
            out.extend_from_slice(&q.to_le_bytes()[..3]);
        }
        WavEncoding::Pcm32 => {
            out.extend_from_slice(&(quantize(x, 32, stats) as i32).to_le_bytes());
        }
        WavEncoding::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        WavEncoding::Float64 => out.extend_from_slice(&x.to_le_bytes()),
    }
}

/// Everything one separation run produced, in the shape written to JSON.
///
/// `nll` and `inconsistency` hold one entry per iteration plus the initial
/// state. Wall time is kept in memory only so that reports from identical
/// seeds are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub window: String,
    pub window_len_ms: f64,
    pub shift_divisor: usize,
    pub n_bases: usize,
    pub seed: u64,
    pub nll: Vec<f64>,
    pub inconsistency: Vec<f64>,
    pub sdr: Vec<Db>,
    pub sir: Vec<Db>,
    pub sar: Vec<Db>,
    pub delta_sdr: Vec<Db>,
    pub delta_sir: Vec<Db>,
    #[serde(default)]
    pub delta_sdr_mean: Option<Db>,
    #[serde(default)]
    pub delta_sir_mean: Option<Db>,
    #[serde(default)]
    pub pairing: Vec<usize>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn builder() -> RunReportBuilder {
        RunReportBuilder::default()
    }

    pub fn iterations(&self) -> usize {
        self.nll.len().saturating_sub(1)
    }

    /// Replaces the score fields.
    pub fn with_scores(mut self, scores: crate::eval::EvalScores) -> Self {
        self.delta_sdr_mean = scores.mean_delta_sdr();
        self.delta_sir_mean = scores.mean_delta_sir();
        self.sdr = scores.sdr;
        self.sir = scores.sir;
        self.sar = scores.sar;
        self.delta_sdr = scores.delta_sdr;
        self.delta_sir = scores.delta_sir;
        self.pairing = scores.pairing;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.nll.is_empty() && self.error.is_none() {
            return Err(Error::invalid("report needs at least the initial nll entry"));
        }
        if self.nll.len() != self.inconsistency.len() {
            return Err(Error::invalid(format!(
                "diagnostic length mismatch: nll {} vs inconsistency {}",
                self.nll.len(),
                self.inconsistency.len()
            )));
        }
        let n = self.sdr.len();
        if [self.sir.len(), self.sar.len(), self.delta_sdr.len(), self.delta_sir.len()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(Error::invalid("per-source score arrays differ in length"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }
}

#[derive(Debug, Default)]
pub struct RunReportBuilder {
    method: Option<String>,
    window: Option<String>,
    window_len_ms: f64,
    shift_divisor: usize,
    n_bases: usize,
    seed: Option<u64>,
    nll: Vec<f64>,
    inconsistency: Vec<f64>,
    scores: Option<crate::eval::EvalScores>,
    error: Option<String>,
    wall_time_s: f64,
}

impl RunReportBuilder {
    pub fn method(mut self, method: impl Into<String>) -> Self {
        self.method = Some(method.into());
        self
    }

    pub fn window(mut self, window: impl Into<String>, len_ms: f64, shift_divisor: usize) -> Self {
        self.window = Some(window.into());
        self.window_len_ms = len_ms;
        self.shift_divisor = shift_divisor;
        self
    }

    pub fn n_bases(mut self, k: usize) -> Self {
        self.n_bases = k;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn diagnostics(mut self, nll: Vec<f64>, inconsistency: Vec<f64>) -> Self {
        self.nll = nll;
        self.inconsistency = inconsistency;
        self
    }

    pub fn scores(mut self, scores: crate::eval::EvalScores) -> Self {
        self.scores = Some(scores);
        self
    }

    pub fn error(mut self, err: impl Into<String>) -> Self {
        self.error = Some(err.into());
        self
    }

    pub fn wall_time(mut self, seconds: f64) -> Self {
        self.wall_time_s = seconds;
        self
    }

    pub fn build(self) -> Result<RunReport> {
        let seed = self
            .seed
            .ok_or_else(|| Error::invalid("run report requires a seed"))?;
        let method = self
            .method
            .ok_or_else(|| Error::invalid("run report requires a method"))?;
        let scores = self.scores.unwrap_or_default();
        let report = RunReport {
            method,
            window: self.window.unwrap_or_default(),
            window_len_ms: self.window_len_ms,
            shift_divisor: self.shift_divisor,
            n_bases: self.n_bases,
            seed,
            nll: self.nll,
            inconsistency: self.inconsistency,
            delta_sdr_mean: scores.mean_delta_sdr(),
            delta_sir_mean: scores.mean_delta_sir(),
            sdr: scores.sdr,
            sir: scores.sir,
            sar: scores.sar,
            delta_sdr: scores.delta_sdr,
            delta_sir: scores.delta_sir,
            pairing: scores.pairing,
            error: self.error,
            wall_time_s: self.wall_time_s,
        };
        report.validate()?;
        Ok(report)
    }
}

pub fn write_report(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let mut text = report.to_json()?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    RunReport::from_json(&fs::read_to_string(path)?)
}
