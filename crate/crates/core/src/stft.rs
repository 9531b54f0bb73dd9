//! Short-time Fourier transform with a perfect-reconstruction synthesis
//! window.
//!
//! Framing is circular: a signal of length `L` is zero-padded to
//! `J * shift` samples with `J = ceil(L / shift)`, and segment `j` reads
//! samples `j * shift + q` modulo that padded length. Under this layout the
//! canonical dual of any window satisfying the painless condition inverts the
//! transform exactly, edges included, and `STFT(ISTFT(.))` is an orthogonal
//! projection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Complex, Real};
use crate::signal::TimeSignal;

/// Overlap-add denominators below this make the frame non-invertible.
pub const PAINLESS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Hamming,
    Blackman,
    /// All ones. Only meant for tests and diagnostics.
    Rectangular,
}

impl WindowKind {
    pub const TABLE: [WindowKind; 3] = [WindowKind::Hann, WindowKind::Hamming, WindowKind::Blackman];

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Hamming => "hamming",
            WindowKind::Blackman => "blackman",
            WindowKind::Rectangular => "rectangular",
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" | "hanning" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            "blackman" => Ok(WindowKind::Blackman),
            "rect" | "rectangular" | "boxcar" => Ok(WindowKind::Rectangular),
            other => Err(Error::invalid(format!("unknown window kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowRole {
    Analysis,
    Synthesis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    kind: WindowKind,
    role: WindowRole,
    coeffs: Vec<T>,
}

impl<T: Real> Window<T> {
    /// Periodic (DFT-even) window of length `len`.
    pub fn new(kind: WindowKind, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::invalid(format!("window length {len} < 2")));
        }
        let step = 2.0 * std::f64::consts::PI / len as f64;
        let coeffs = (0..len)
            .map(|q| {
                let phase = step * q as f64;
                let w = match kind {
                    WindowKind::Hann => 0.5 - 0.5 * phase.cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowKind::Blackman => 0.42 - 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos(),
                    WindowKind::Rectangular => 1.0,
                };
                T::lit(w)
            })
            .collect();
        Ok(Window {
            kind,
            role: WindowRole::Analysis,
            coeffs,
        })
    }

    /// Wraps arbitrary analysis coefficients.
    pub fn from_coeffs(kind: WindowKind, coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("empty window"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) || coeffs.iter().all(|c| c.is_zero()) {
            return Err(Error::invalid("window must be finite and not all zero"));
        }
        Ok(Window {
            kind,
            role: WindowRole::Analysis,
            coeffs,
        })
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn role(&self) -> WindowRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Canonical dual for hop `shift`: `w[q] / sum_m w[q + m*shift]^2`.
    pub fn canonical_dual(&self, shift: usize) -> Result<Window<T>> {
        if shift == 0 {
            return Err(Error::invalid("shift must be positive"));
        }
        let denom = overlap_denominator(&self.coeffs, shift);
        let floor = T::lit(PAINLESS_FLOOR);
        if let Some((offset, &value)) = denom.iter().enumerate().find(|(_, d)| **d < floor) {
            return Err(Error::NonInvertibleFrame {
                offset,
                value: value.as_f64(),
            });
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(q, &w)| w / denom[q % shift])
            .collect();
        Ok(Window {
            kind: self.kind,
            role: WindowRole::Synthesis,
            coeffs,
        })
    }
}

/// `d[r] = sum over k = r (mod shift) of w[k]^2`, for `r < shift`.
fn overlap_denominator<T: Real>(w: &[T], shift: usize) -> Vec<T> {
    let mut d = vec![T::zero(); shift];
    for (k, &c) in w.iter().enumerate() {
        d[k % shift] += c * c;
    }
    d
}

/// Frame layout plus the number of segments for one signal length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftGeometry {
    pub window_len: usize,
    pub shift: usize,
    pub fft_len: usize,
    pub frames: usize,
}

impl StftGeometry {
    /// Geometry for a signal of `signal_len` samples.
    pub fn new(window_len: usize, shift: usize, fft_len: usize, signal_len: usize) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::invalid("window length must be at least 2"));
        }
        if shift == 0 || !window_len.is_multiple_of(shift) {
            return Err(Error::invalid(format!(
                "shift {shift} must divide window length {window_len}"
            )));
        }
        if fft_len < window_len {
            return Err(Error::invalid(format!(
                "fft length {fft_len} shorter than window {window_len}"
            )));
        }
        let frames = signal_len.div_ceil(shift).max(1);
        Ok(StftGeometry {
            window_len,
            shift,
            fft_len,
            frames,
        })
    }

    /// `fft_len == window_len`.
    pub fn unpadded(window_len: usize, shift: usize, signal_len: usize) -> Result<Self> {
        Self::new(window_len, shift, window_len, signal_len)
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Length of the zero-padded circular signal, `frames * shift`.
    pub fn padded_len(&self) -> usize {
        self.frames * self.shift
    }

    /// Energy weight of bin `i` in the half spectrum: 1 for DC and Nyquist,
    /// 2 for bins that stand for a conjugate pair.
    pub fn bin_weight(&self, i: usize) -> f64 {
        if i == 0 || (self.fft_len.is_multiple_of(2) && i == self.fft_len / 2) {
            1.0
        } else {
            2.0
        }
    }
}

/// Complex `bins x frames` array tagged with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    data: Array2<Complex<T>>,
    geometry: StftGeometry,
}

impl<T: Real> Spectrogram<T> {
    pub fn zeros(geometry: StftGeometry) -> Self {
        Spectrogram {
            data: Array2::from_elem((geometry.bins(), geometry.frames), Complex::new(T::zero(), T::zero())),
            geometry,
        }
    }

    pub fn from_array(data: Array2<Complex<T>>, geometry: StftGeometry) -> Result<Self> {
        if data.dim() != (geometry.bins(), geometry.frames) {
            return Err(Error::invalid(format!(
                "array shape {:?} does not match geometry ({}, {})",
                data.dim(),
                geometry.bins(),
                geometry.frames
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("non-finite spectrogram entry"));
        }
        Ok(Spectrogram { data, geometry })
    }

    pub fn geometry(&self) -> &StftGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &Array2<Complex<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex<T>> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex<T>> {
        self.data
    }

    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    /// Squared norm of the full (conjugate-extended) spectrum.
    pub fn energy(&self) -> T {
        let mut total = T::zero();
        for (i, row) in self.data.outer_iter().enumerate() {
            let row_energy: T = row.iter().map(|z| z.norm_sqr()).sum();
            total += T::lit(self.geometry.bin_weight(i)) * row_energy;
        }
        total
    }

    pub fn power(&self) -> Array2<T> {
        self.data.mapv(|z| z.norm_sqr())
    }

    pub fn scaled(&self, c: Complex<T>) -> Self {
        Spectrogram {
            data: self.data.mapv(|z| z * c),
            geometry: self.geometry,
        }
    }
}

impl<T: Real> std::ops::Sub for &Spectrogram<T> {
    type Output = Spectrogram<T>;

    fn sub(self, rhs: &Spectrogram<T>) -> Spectrogram<T> {
        assert_eq!(self.geometry, rhs.geometry, "geometry mismatch");
        Spectrogram {
            data: &self.data - &rhs.data,
            geometry: self.geometry,
        }
    }
}

/// Analysis/synthesis window pair with cached FFT plans.
#[derive(Clone)]
pub struct StftEngine<T: Real> {
    window: Window<T>,
    dual: Window<T>,
    shift: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for StftEngine<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftEngine")
            .field("kind", &self.window.kind())
            .field("window_len", &self.window.len())
            .field("shift", &self.shift)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl<T: Real> StftEngine<T> {
    pub fn new(kind: WindowKind, window_len: usize, shift: usize) -> Result<Self> {
        Self::with_fft_len(kind, window_len, shift, window_len)
    }

    pub fn with_fft_len(kind: WindowKind, window_len: usize, shift: usize, fft_len: usize) -> Result<Self> {
        let window = Window::new(kind, window_len)?;
        Self::from_window(window, shift, fft_len)
    }

    pub fn from_window(window: Window<T>, shift: usize, fft_len: usize) -> Result<Self> {
        // Validates the layout against a dummy length.
        StftGeometry::new(window.len(), shift, fft_len, 1)?;
        let dual = window.canonical_dual(shift)?;
        let mut planner = FftPlanner::new();
        Ok(StftEngine {
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
            window,
            dual,
            shift,
            fft_len,
        })
    }

    pub fn window(&self) -> &Window<T> {
        &self.window
    }

    pub fn dual(&self) -> &Window<T> {
        &self.dual
    }

    pub fn geometry(&self, signal_len: usize) -> StftGeometry {
        StftGeometry::new(self.window.len(), self.shift, self.fft_len, signal_len)
            .expect("layout validated at construction")
    }

    fn check(&self, geometry: &StftGeometry) -> Result<()> {
        if geometry.window_len != self.window.len()
            || geometry.shift != self.shift
            || geometry.fft_len != self.fft_len
        {
            return Err(Error::invalid(format!(
                "geometry {geometry:?} does not match engine {self:?}"
            )));
        }
        Ok(())
    }

    /// Forward transform of one channel.
    pub fn forward(&self, signal: &[T]) -> Spectrogram<T> {
        let geometry = self.geometry(signal.len());
        self.forward_with(signal, geometry)
            .expect("geometry built from engine")
    }

    pub fn forward_with(&self, signal: &[T], geometry: StftGeometry) -> Result<Spectrogram<T>> {
        self.check(&geometry)?;
        if signal.len() > geometry.padded_len() {
            return Err(Error::invalid(format!(
                "signal of {} samples exceeds padded length {}",
                signal.len(),
                geometry.padded_len()
            )));
        }
        let q_len = geometry.window_len;
        let padded = geometry.padded_len();
        let bins = geometry.bins();
        let zero = Complex::new(T::zero(), T::zero());
        let w = self.window.coeffs();

        let columns: Vec<Vec<Complex<T>>> = (0..geometry.frames)
            .into_par_iter()
            .with_min_len(8)
            .map(|j| {
                let mut buf = vec![zero; self.fft_len];
                let start = j * geometry.shift;
                for q in 0..q_len {
                    let l = (start + q) % padded;
                    if let Some(&s) = signal.get(l) {
                        buf[q] = Complex::new(w[q] * s, T::zero());
                    }
                }
                self.forward.process(&mut buf);
                buf.truncate(bins);
                buf
            })
            .collect();

        let mut data = Array2::from_elem((bins, geometry.frames), zero);
        for (j, col) in columns.iter().enumerate() {
            for (i, &z) in col.iter().enumerate() {
                data[(i, j)] = z;
            }
        }
        Ok(Spectrogram { data, geometry })
    }

    /// Inverse transform truncated or zero-extended to `len` samples.
    pub fn inverse(&self, spec: &Spectrogram<T>, len: usize) -> Result<Vec<T>> {
        let geometry = *spec.geometry();
        self.check(&geometry)?;
        if spec.bins() != geometry.bins() || spec.frames() != geometry.frames {
            return Err(Error::invalid("spectrogram shape does not match its geometry"));
        }
        let f = self.fft_len;
        let bins = geometry.bins();
        let q_len = geometry.window_len;
        let padded = geometry.padded_len();
        let scale = T::one() / T::from_usize_lossy(f);
        let zero = Complex::new(T::zero(), T::zero());
        let dual = self.dual.coeffs();
        let data = spec.data();

        let frames: Vec<Vec<T>> = (0..geometry.frames)
            .into_par_iter()
            .with_min_len(8)
            .map(|j| {
                let mut buf = vec![zero; f];
                for i in 0..bins {
                    buf[i] = data[(i, j)];
                }
                // Conjugate mirror; DC and Nyquist keep only their real part
                // through the final `re` below.
                for i in bins..f {
                    buf[i] = data[(f - i, j)].conj();
                }
                self.inverse.process(&mut buf);
                (0..q_len).map(|q| buf[q].re * scale * dual[q]).collect()
            })
            .collect();

        let mut out = vec![T::zero(); padded];
        for (j, frame) in frames.iter().enumerate() {
            let start = j * geometry.shift;
            for (q, &v) in frame.iter().enumerate() {
                out[(start + q) % padded] += v;
            }
        }
        out.resize(len, T::zero());
        Ok(out)
    }

    /// Forward transform of every channel.
    pub fn forward_all(&self, signal: &TimeSignal<T>) -> Vec<Spectrogram<T>> {
        signal.channels().iter().map(|c| self.forward(c)).collect()
    }

    pub fn inverse_all(&self, specs: &[Spectrogram<T>], len: usize, sample_rate: u32) -> Result<TimeSignal<T>> {
        let channels = specs
            .iter()
            .map(|s| self.inverse(s, len))
            .collect::<Result<Vec<_>>>()?;
        TimeSignal::new(channels, sample_rate)
    }
}

/// Builds a window of the given kind and length.
pub fn make_window<T: Real>(kind: WindowKind, len: usize) -> Result<Window<T>> {
    Window::new(kind, len)
}

pub fn canonical_dual<T: Real>(window: &Window<T>, shift: usize) -> Result<Window<T>> {
    window.canonical_dual(shift)
}

/// Forward transform with an explicit window and geometry.
pub fn stft<T: Real>(signal: &[T], window: &Window<T>, geometry: StftGeometry) -> Result<Spectrogram<T>> {
    StftEngine::from_window(window.clone(), geometry.shift, geometry.fft_len)?.forward_with(signal, geometry)
}

/// Inverse transform with an explicit synthesis window.
pub fn istft<T: Real>(spec: &Spectrogram<T>, dual: &Window<T>, len: usize) -> Result<Vec<T>> {
    let g = *spec.geometry();
    if dual.len() != g.window_len {
        return Err(Error::invalid(format!(
            "dual window length {} does not match geometry {}",
            dual.len(),
            g.window_len
        )));
    }
    let mut planner = FftPlanner::new();
    let engine = StftEngine {
        window: dual.clone(),
        dual: dual.clone(),
        shift: g.shift,
        fft_len: g.fft_len,
        forward: planner.plan_fft_forward(g.fft_len),
        inverse: planner.plan_fft_inverse(g.fft_len),
    };
    engine.inverse(spec, len)
}

/// Window length in samples for a duration in milliseconds, rounded to the
/// nearest even sample count.
pub fn window_len_from_ms(ms: f64, sample_rate: u32) -> usize {
    let exact = ms * sample_rate as f64 / 1000.0;
    ((exact / 2.0).round() as usize * 2).max(2)
}
