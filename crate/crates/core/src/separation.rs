//! Determined separation by iterative projection: ILRMA, IVA, their
//! consistent variants and the iterative back-projection variants.
//!
//! One iteration of every method runs, in order:
//!
//! 1. consistency projection of each separated spectrogram (consistent
//!    variants only),
//! 2. source-model update from `|Y_n|^2` (NMF basis then activations for
//!    ILRMA, frame norms for IVA),
//! 3. spatial update per frequency and source: weighted covariance,
//!    `w_in = (W_i U_in)^-1 e_n`, unit normalization in the `U_in` metric,
//!    then `y_ijn = w_in^H x_ij`,
//! 4. back projection to the reference channel and the rescale of `W` (and
//!    the NMF basis) that keeps the likelihood unchanged (`+bp` variants).
//!
//! Diagnostics are sampled after step 4.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency;
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::nmf::{self, NmfModel, VarianceField};
use crate::scalar::{Complex, Real};
use crate::signal::{RunReport, TimeSignal};
use crate::stft::{Spectrogram, StftEngine};

/// Relative diagonal loading applied once when `W_i U_in` is singular.
pub const IP_LOADING: f64 = 1e-10;

/// Positivity floor relative to the largest observed bin power.
pub const RELATIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ilrma")]
    Ilrma,
    #[serde(rename = "consistent-ilrma")]
    ConsistentIlrma,
    #[serde(rename = "consistent-ilrma-bp")]
    ConsistentIlrmaBp,
    #[serde(rename = "iva")]
    Iva,
    #[serde(rename = "consistent-iva")]
    ConsistentIva,
    #[serde(rename = "consistent-iva-bp")]
    ConsistentIvaBp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Iva,
        Method::ConsistentIva,
        Method::ConsistentIvaBp,
        Method::Ilrma,
        Method::ConsistentIlrma,
        Method::ConsistentIlrmaBp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ilrma => "ilrma",
            Method::ConsistentIlrma => "consistent-ilrma",
            Method::ConsistentIlrmaBp => "consistent-ilrma-bp",
            Method::Iva => "iva",
            Method::ConsistentIva => "consistent-iva",
            Method::ConsistentIvaBp => "consistent-iva-bp",
        }
    }

    pub fn uses_nmf(self) -> bool {
        matches!(self, Method::Ilrma | Method::ConsistentIlrma | Method::ConsistentIlrmaBp)
    }

    pub fn is_consistent(self) -> bool {
        !matches!(self, Method::Ilrma | Method::Iva)
    }

    pub fn back_projects(self) -> bool {
        matches!(self, Method::ConsistentIlrmaBp | Method::ConsistentIvaBp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Per-frequency `N x M` demixing matrices; row `n` of `W_i` is `w_in^H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingStack<T> {
    mats: Vec<CMatrix<T>>,
}

impl<T: Real> DemixingStack<T> {
    pub fn identity(bins: usize, n: usize) -> Self {
        DemixingStack {
            mats: vec![CMatrix::identity(n); bins],
        }
    }

    pub fn from_matrices(mats: Vec<CMatrix<T>>) -> Result<Self> {
        let first = mats.first().ok_or_else(|| Error::invalid("empty demixing stack"))?;
        let (r, c) = (first.rows(), first.cols());
        if mats.iter().any(|m| m.rows() != r || m.cols() != c) {
            return Err(Error::invalid("demixing matrices differ in shape"));
        }
        Ok(DemixingStack { mats })
    }

    pub fn bins(&self) -> usize {
        self.mats.len()
    }

    pub fn sources(&self) -> usize {
        self.mats[0].rows()
    }

    pub fn get(&self, i: usize) -> &CMatrix<T> {
        &self.mats[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut CMatrix<T> {
        &mut self.mats[i]
    }

    pub fn matrices(&self) -> &[CMatrix<T>] {
        &self.mats
    }
}

/// Back-projection vectors `lambda_in` (column `n` of `W_i^-1`), indexed
/// `[i][n]`, each of length `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjectionCoeffs<T> {
    pub lambda: Vec<Vec<Vec<Complex<T>>>>,
    pub ref_channel: usize,
}

impl<T: Real> BackProjectionCoeffs<T> {
    pub fn at_reference(&self, i: usize, n: usize) -> Complex<T> {
        self.lambda[i][n][self.ref_channel]
    }
}

fn zero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

/// `x_ij` for every frame of bin `i`, as `M`-vectors.
fn bin_vectors<T: Real>(observed: &[Spectrogram<T>], i: usize) -> Vec<Vec<Complex<T>>> {
    let frames = observed[0].frames();
    (0..frames)
        .map(|j| observed.iter().map(|x| x.data()[(i, j)]).collect())
        .collect()
}

/// `U_in = (1/J) sum_j x_ij x_ij^H / r_j`, symmetrized.
pub fn weighted_covariance<T: Real>(x: &[Vec<Complex<T>>], r: ArrayView1<'_, T>) -> CMatrix<T> {
    assert_eq!(x.len(), r.len(), "frame count mismatch");
    let m = x.first().map_or(0, |v| v.len());
    let mut u = CMatrix::zeros(m, m);
    for (xj, &rj) in x.iter().zip(r.iter()) {
        let inv = T::one() / rj;
        for a in 0..m {
            let xa = xj[a] * inv;
            for b in 0..m {
                u[(a, b)] += xa * xj[b].conj();
            }
        }
    }
    u.scale(Complex::new(T::one() / T::from_usize_lossy(x.len().max(1)), T::zero()));
    u.hermitian_part()
}

/// Unnormalized iterative-projection direction `(W U)^-1 e_n`.
pub fn ip_direction<T: Real>(w: &CMatrix<T>, u: &CMatrix<T>, n: usize) -> Result<Vec<Complex<T>>> {
    let wu = w * u;
    let mut e = vec![zero::<T>(); w.rows()];
    e[n] = Complex::new(T::one(), T::zero());
    linalg::solve(&wu, &e)
}

/// Iterative-projection update of `w_in`, scaled so that `w^H U w = 1`.
/// Returns the column vector `w_in`; row `n` of `W_i` is its conjugate.
pub fn ip_update<T: Real>(w: &CMatrix<T>, u: &CMatrix<T>, n: usize) -> Result<Vec<Complex<T>>> {
    let mut v = ip_direction(w, u, n)?;
    let q = linalg::quad_form(&v, u)?;
    if !(q > T::zero()) || !q.is_finite() {
        return Err(Error::SingularMatrix {
            condition: f64::INFINITY,
        });
    }
    let s = T::one() / q.sqrt();
    v.iter_mut().for_each(|z| *z *= s);
    Ok(v)
}

/// What happened to one `(i, n)` spatial update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IpOutcome {
    Updated,
    Loaded,
    Skipped,
}

/// [`ip_update`] with one retry on a diagonally loaded covariance; keeps the
/// current row when both attempts fail.
fn ip_update_row<T: Real>(w: &mut CMatrix<T>, u: &CMatrix<T>, n: usize) -> IpOutcome {
    let (v, outcome) = match ip_update(w, u, n) {
        Ok(v) => (v, IpOutcome::Updated),
        Err(_) => {
            let mut loaded = u.clone();
            let load = T::lit(IP_LOADING) * u.trace().re / T::from_usize_lossy(u.rows());
            loaded.add_identity(load);
            match ip_update(w, &loaded, n) {
                Ok(v) => (v, IpOutcome::Loaded),
                Err(_) => return IpOutcome::Skipped,
            }
        }
    };
    for (dst, src) in w.row_mut(n).iter_mut().zip(&v) {
        *dst = src.conj();
    }
    outcome
}

/// `y_ij = W_i x_ij` for every bin.
pub fn separate<T: Real>(w: &DemixingStack<T>, observed: &[Spectrogram<T>]) -> Result<Vec<Spectrogram<T>>> {
    let g = *observed
        .first()
        .ok_or_else(|| Error::invalid("no observed channels"))?
        .geometry();
    if observed.iter().any(|x| *x.geometry() != g) {
        return Err(Error::invalid("observed channels differ in geometry"));
    }
    if w.bins() != g.bins() || w.get(0).cols() != observed.len() {
        return Err(Error::invalid("demixing stack does not match observations"));
    }
    let n_src = w.sources();
    let mut out: Vec<Array2<Complex<T>>> = (0..n_src).map(|_| Array2::from_elem((g.bins(), g.frames), zero())).collect();
    let rows: Vec<Vec<Vec<Complex<T>>>> = (0..g.bins())
        .into_par_iter()
        .map(|i| separate_bin(w.get(i), observed, i))
        .collect();
    for (i, per_source) in rows.into_iter().enumerate() {
        for (n, row) in per_source.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                out[n][(i, j)] = v;
            }
        }
    }
    out.into_iter().map(|d| Spectrogram::from_array(d, g)).collect()
}

/// `[n][j]` outputs of one bin.
fn separate_bin<T: Real>(w: &CMatrix<T>, observed: &[Spectrogram<T>], i: usize) -> Vec<Vec<Complex<T>>> {
    let frames = observed[0].frames();
    (0..w.rows())
        .map(|n| {
            let row = w.row(n);
            (0..frames)
                .map(|j| {
                    row.iter()
                        .zip(observed)
                        .fold(zero(), |acc, (wn, x)| acc + wn * x.data()[(i, j)])
                })
                .collect()
        })
        .collect()
}

fn log_abs_det<T: Real>(w: &CMatrix<T>) -> f64 {
    match linalg::det(w) {
        Ok(d) => d.norm().as_f64().ln(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// ILRMA negative log-likelihood, constants dropped:
/// `sum_ijn (|y|^2 / r + ln r) - 2 J sum_i ln|det W_i|`.
pub fn nll_ilrma<T: Real>(w: &DemixingStack<T>, separated: &[Spectrogram<T>], variances: &[VarianceField<T>]) -> f64 {
    let frames = separated[0].frames() as f64;
    let mut total = 0.0;
    for (y, r) in separated.iter().zip(variances) {
        let mut s = T::zero();
        for (z, &v) in y.data().iter().zip(r.values().iter()) {
            s += z.norm_sqr() / v + v.ln();
        }
        total += s.as_f64();
    }
    let det_term: f64 = w.matrices().iter().map(log_abs_det).sum();
    total - 2.0 * frames * det_term
}

/// IVA negative log-likelihood under the spherical Laplace model:
/// `sum_jn r_jn - 2 J sum_i ln|det W_i|` with `r_jn` the frame norm.
pub fn nll_iva<T: Real>(w: &DemixingStack<T>, separated: &[Spectrogram<T>]) -> f64 {
    let frames = separated[0].frames() as f64;
    let mut total = 0.0;
    for y in separated {
        total += nmf::spherical_variance(y.data().view(), T::zero()).iter().map(|v| v.as_f64()).sum::<f64>();
    }
    let det_term: f64 = w.matrices().iter().map(log_abs_det).sum();
    total - 2.0 * frames * det_term
}

/// Separation settings independent of the STFT.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationConfig {
    pub method: Method,
    pub iterations: usize,
    pub n_bases: usize,
    pub seed: u64,
    /// Zero-based reference channel for back projection.
    pub ref_channel: usize,
    /// Sample rate, used only to label the window length in reports.
    pub sample_rate: u32,
    /// Records the normalized inconsistency every iteration. Costs one extra
    /// projection per source and iteration.
    pub track_inconsistency: bool,
}

impl SeparationConfig {
    pub fn new(method: Method) -> Self {
        SeparationConfig {
            method,
            iterations: 100,
            n_bases: 2,
            seed: 0,
            ref_channel: 0,
            sample_rate: 16000,
            track_inconsistency: true,
        }
    }
}

/// Counts of non-nominal events during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunEvents {
    pub loaded_updates: usize,
    pub skipped_updates: usize,
    pub skipped_rescales: usize,
}

/// Everything the driver tracks between iterations.
#[derive(Debug, Clone)]
pub struct SeparationState<T: Real> {
    pub method: Method,
    pub demixing: DemixingStack<T>,
    pub models: Vec<NmfModel<T>>,
    pub observed: Vec<Spectrogram<T>>,
    pub separated: Vec<Spectrogram<T>>,
    pub nll: Vec<f64>,
    pub inconsistency: Vec<f64>,
    pub floor: T,
    pub events: RunEvents,
    mixture_energy: T,
}

impl<T: Real> SeparationState<T> {
    /// Identity demixing, random NMF models drawn from `seed`.
    pub fn new(method: Method, observed: Vec<Spectrogram<T>>, n_bases: usize, seed: u64) -> Result<Self> {
        let g = *observed
            .first()
            .ok_or_else(|| Error::invalid("no observed channels"))?
            .geometry();
        if observed.len() < 2 {
            return Err(Error::Unsupported(format!(
                "determined separation needs at least 2 channels, got {}",
                observed.len()
            )));
        }
        if observed.iter().any(|x| *x.geometry() != g) {
            return Err(Error::invalid("observed channels differ in geometry"));
        }
        let max_power = observed
            .iter()
            .flat_map(|x| x.data().iter().map(|z| z.norm_sqr()))
            .fold(T::zero(), T::max);
        if !(max_power > T::zero()) {
            return Err(Error::invalid("mixture is silent"));
        }
        let floor = T::lit(RELATIVE_FLOOR) * max_power;
        let n_src = observed.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let models = if method.uses_nmf() {
            (0..n_src)
                .map(|_| NmfModel::random(g.bins(), g.frames, n_bases, floor, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let demixing = DemixingStack::identity(g.bins(), n_src);
        let separated = separate(&demixing, &observed)?;
        let mixture_energy = observed.iter().map(|x| x.energy()).sum();
        Ok(SeparationState {
            method,
            demixing,
            models,
            observed,
            separated,
            nll: Vec::new(),
            inconsistency: Vec::new(),
            floor,
            events: RunEvents::default(),
            mixture_energy,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.separated.len()
    }

    pub fn variances(&self) -> Vec<VarianceField<T>> {
        self.models.iter().map(|m| m.variance()).collect()
    }

    /// Likelihood of the current (synchronized) state under the method's
    /// source model.
    pub fn negative_log_likelihood(&self) -> f64 {
        if self.method.uses_nmf() {
            nll_ilrma(&self.demixing, &self.separated, &self.variances())
        } else {
            nll_iva(&self.demixing, &self.separated)
        }
    }

    pub fn normalized_inconsistency(&self, engine: &StftEngine<T>) -> Result<f64> {
        Ok(consistency::normalized_inconsistency_with(engine, &self.separated, self.mixture_energy)?.as_f64())
    }

    /// Recomputes `Y = W X`.
    pub fn resynchronize(&mut self) -> Result<()> {
        self.separated = separate(&self.demixing, &self.observed)?;
        Ok(())
    }

    /// Replaces every separated spectrogram by its consistent projection.
    pub fn project_consistent(&mut self, engine: &StftEngine<T>) -> Result<()> {
        self.separated = self
            .separated
            .iter()
            .map(|y| consistency::project_consistent(engine, y))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// NMF basis then activation update for every source.
    pub fn update_source_models(&mut self) {
        let separated = &self.separated;
        self.models.par_iter_mut().zip(separated.par_iter()).for_each(|(model, y)| {
            model.update(y.power().view());
        });
    }

    /// Frame-wise variances of the IVA model, `2 r_jn` broadcast over bins.
    fn spherical_weights(&self) -> Vec<Array1<T>> {
        let two = T::lit(2.0);
        self.separated
            .iter()
            .map(|y| nmf::spherical_variance(y.data().view(), self.floor).mapv(|r| two * r))
            .collect()
    }

    /// Spatial update for every bin and source, then `Y = W X`.
    pub fn update_spatial(&mut self) -> Result<()> {
        enum Weights<T: Real> {
            Nmf(Vec<VarianceField<T>>),
            Frames(Vec<Array1<T>>),
        }
        let weights = if self.method.uses_nmf() {
            Weights::Nmf(self.variances())
        } else {
            Weights::Frames(self.spherical_weights())
        };
        let observed = &self.observed;
        let n_src = self.n_sources();
        let results: Vec<(CMatrix<T>, Vec<IpOutcome>, Vec<Vec<Complex<T>>>)> = self
            .demixing
            .mats
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let mut w = w.clone();
                let x = bin_vectors(observed, i);
                let outcomes = (0..n_src)
                    .map(|n| {
                        let u = match &weights {
                            Weights::Nmf(r) => weighted_covariance(&x, r[n].values().row(i)),
                            Weights::Frames(r) => weighted_covariance(&x, r[n].view()),
                        };
                        ip_update_row(&mut w, &u, n)
                    })
                    .collect();
                let y = separate_bin(&w, observed, i);
                (w, outcomes, y)
            })
            .collect();

        for (i, (w, outcomes, y)) in results.into_iter().enumerate() {
            for o in outcomes {
                match o {
                    IpOutcome::Updated => {}
                    IpOutcome::Loaded => self.events.loaded_updates += 1,
                    IpOutcome::Skipped => self.events.skipped_updates += 1,
                }
            }
            self.demixing.mats[i] = w;
            for (n, row) in y.into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    self.separated[n].data_mut()[(i, j)] = v;
                }
            }
        }
        Ok(())
    }

    /// Columns of `W_i^-1` for every bin.
    pub fn back_projection(&self, ref_channel: usize) -> Result<BackProjectionCoeffs<T>> {
        let m = self.observed.len();
        if ref_channel >= m {
            return Err(Error::invalid(format!("reference channel {ref_channel} out of range")));
        }
        let lambda = self
            .demixing
            .mats
            .par_iter()
            .map(|w| {
                let inv = linalg::inverse(w)?;
                Ok((0..w.rows()).map(|n| inv.column(n)).collect())
            })
            .collect::<Result<Vec<Vec<Vec<Complex<T>>>>>>()?;
        Ok(BackProjectionCoeffs { lambda, ref_channel })
    }

    /// Separated spectrograms scaled to the reference channel,
    /// `y_ijn * lambda_in[ref]`.
    pub fn back_project(&self, ref_channel: usize) -> Result<(BackProjectionCoeffs<T>, Vec<Spectrogram<T>>)> {
        let coeffs = self.back_projection(ref_channel)?;
        let images = self
            .separated
            .iter()
            .enumerate()
            .map(|(n, y)| {
                let mut img = y.clone();
                for (i, mut row) in img.data_mut().outer_iter_mut().enumerate() {
                    let l = coeffs.at_reference(i, n);
                    row.mapv_inplace(|z| z * l);
                }
                img
            })
            .collect();
        Ok((coeffs, images))
    }

    /// Scales row `n` of `W_i` by `lambda_in[ref]` so that `y_n` becomes its
    /// back-projected image, scales row `i` of the NMF basis by
    /// `|lambda_in[ref]|^2`, and recomputes `Y`. Zero coefficients are left
    /// alone and counted.
    pub fn rescale(&mut self, coeffs: &BackProjectionCoeffs<T>) -> Result<()> {
        let n_src = self.n_sources();
        for i in 0..self.demixing.bins() {
            for n in 0..n_src {
                let l = coeffs.at_reference(i, n);
                let mag2 = l.norm_sqr();
                if !(mag2 > T::zero()) || !mag2.is_finite() {
                    log::debug!("{}", Error::DegenerateScale { bin: i, source_index: n });
                    self.events.skipped_rescales += 1;
                    continue;
                }
                for z in self.demixing.mats[i].row_mut(n) {
                    *z *= l;
                }
                if let Some(model) = self.models.get_mut(n) {
                    model.scale_basis_row(i, mag2);
                }
            }
        }
        self.resynchronize()
    }

    fn record(&mut self, engine: &StftEngine<T>, track: bool) -> Result<()> {
        let nll = self.negative_log_likelihood();
        if !nll.is_finite() {
            return Err(Error::ContractViolation(format!("non-finite likelihood {nll}")));
        }
        self.nll.push(nll);
        let inc = if track { self.normalized_inconsistency(engine)? } else { 0.0 };
        self.inconsistency.push(inc.max(0.0));
        Ok(())
    }

    /// One full iteration for the state's method.
    pub fn iterate(&mut self, engine: &StftEngine<T>, ref_channel: usize) -> Result<()> {
        if self.method.is_consistent() {
            self.project_consistent(engine)?;
        }
        if self.method.uses_nmf() {
            self.update_source_models();
        }
        self.update_spatial()?;
        if self.method.back_projects() {
            let coeffs = self.back_projection(ref_channel)?;
            self.rescale(&coeffs)?;
        }
        Ok(())
    }
}

/// State and report of one run.
#[derive(Debug, Clone)]
pub struct RunOutput<T: Real> {
    pub state: SeparationState<T>,
    pub report: RunReport,
}

/// Runs `config.iterations` iterations from the identity demixing matrix.
///
/// Setup errors are returned directly. A failure inside the loop stops the
/// run; the returned report then carries the error and the diagnostics up to
/// the last completed iteration.
pub fn run<T: Real>(
    observed: Vec<Spectrogram<T>>,
    engine: &StftEngine<T>,
    config: &SeparationConfig,
) -> Result<RunOutput<T>> {
    let started = Instant::now();
    if config.ref_channel >= observed.len() {
        return Err(Error::invalid("reference channel out of range"));
    }
    let mut state = SeparationState::new(config.method, observed, config.n_bases, config.seed)?;
    let mut failure = state.record(engine, config.track_inconsistency).err();
    for _ in 0..config.iterations {
        if failure.is_some() {
            break;
        }
        failure = state
            .iterate(engine, config.ref_channel)
            .and_then(|_| state.record(engine, config.track_inconsistency))
            .err();
    }
    if state.events != RunEvents::default() {
        log::info!("{}: {:?}", config.method, state.events);
    }

    let window = engine.window();
    let shift = window.len() / (window.len() / engine_shift(engine)).max(1);
    let mut builder = RunReport::builder()
        .method(config.method.name())
        .window(
            window.kind().name(),
            window.len() as f64 * 1000.0 / config.sample_rate as f64,
            window.len() / shift,
        )
        .n_bases(if config.method.uses_nmf() { config.n_bases } else { 0 })
        .seed(config.seed)
        .diagnostics(state.nll.clone(), state.inconsistency.clone());
    if let Some(err) = &failure {
        log::error!("{} aborted after {} iterations: {err}", config.method, state.nll.len().saturating_sub(1));
        builder = builder.error(err.to_string());
        // A failure before the first record leaves no diagnostics at all.
        if state.nll.is_empty() {
            return Err(failure.expect("checked above"));
        }
    }
    let report = builder.wall_time(started.elapsed().as_secs_f64()).build()?;
    Ok(RunOutput { state, report })
}

fn engine_shift<T: Real>(engine: &StftEngine<T>) -> usize {
    engine.geometry(1).shift
}

/// Separates a time-domain mixture and returns the back-projected source
/// images at the reference channel, one output channel per source.
pub fn separate_signal<T: Real>(
    mixture: &TimeSignal<T>,
    engine: &StftEngine<T>,
    config: &SeparationConfig,
) -> Result<(TimeSignal<T>, RunOutput<T>)> {
    let observed = engine.forward_all(mixture);
    let out = run(observed, engine, config)?;
    let (_, images) = out.state.back_project(config.ref_channel)?;
    let signal = engine.inverse_all(&images, mixture.len(), mixture.sample_rate())?;
    Ok((signal, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::WindowKind;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    type C = Complex<f64>;

    fn c(re: f64, im: f64) -> C {
        C::new(re, im)
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> CMatrix<f64> {
        let frames: Vec<Vec<C>> = (0..3 * n)
            .map(|_| (0..n).map(|_| c(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect())
            .collect();
        weighted_covariance(&frames, Array1::ones(3 * n).view())
    }

    fn random_mixture(seed: u64, len: usize) -> (StftEngine<f64>, Vec<Spectrogram<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let engine = StftEngine::new(WindowKind::Hann, 64, 16).unwrap();
        let s: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                (0..len)
                    .map(|l| {
                        let g: f64 = rng.sample(StandardNormal);
                        g * g * g * (1.0 + (l as f64 * 0.01).sin())
                    })
                    .collect()
            })
            .collect();
        let a = [[1.0, 0.6], [0.4, 1.0]];
        let x: Vec<Vec<f64>> = (0..2).map(|m| (0..len).map(|l| a[m][0] * s[0][l] + a[m][1] * s[1][l]).collect()).collect();
        let observed = x.iter().map(|ch| engine.forward(ch)).collect();
        (engine, observed)
    }

    #[test]
    fn covariance_cases() {
        let x = vec![vec![c(1.0, 0.0), c(0.0, 0.0)]];
        let u = weighted_covariance(&x, Array1::ones(1).view());
        assert_eq!(u, CMatrix::from_real(&[&[1.0, 0.0], &[0.0, 0.0]]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<Vec<C>> = (0..20).map(|_| (0..3).map(|_| c(rng.random(), rng.random())).collect()).collect();
        let r = Array1::from_shape_fn(20, |_| rng.random_range(0.5..2.0));
        let u = weighted_covariance(&frames, r.view());
        let u2 = weighted_covariance(&frames, r.mapv(|v| 2.0 * v).view());
        for a in 0..3 {
            for b in 0..3 {
                let direct: C = frames.iter().zip(r.iter()).map(|(x, &rv)| x[a] * x[b].conj() / rv).sum::<C>() / 20.0;
                assert!((u[(a, b)] - direct).norm() < 1e-12);
                assert!((u2[(a, b)] * 2.0 - u[(a, b)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn ip_update_scalar_closed_form() {
        let w = CMatrix::<f64>::identity(1);
        let u = CMatrix::from_real(&[&[4.0]]);
        let v = ip_update(&w, &u, 0).unwrap();
        assert!((v[0] - c(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn ip_update_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = random_psd(&mut rng, 2);
            let mut w = CMatrix::identity(2);
            w[(0, 1)] = c(rng.random(), rng.random());
            for n in 0..2 {
                let dir = ip_direction(&w, &u, n).unwrap();
                let r = (&w * &u).mul_vec(&dir);
                for (k, z) in r.iter().enumerate() {
                    let expect = if k == n { 1.0 } else { 0.0 };
                    assert!((z - c(expect, 0.0)).norm() < 1e-10);
                }
                let v = ip_update(&w, &u, n).unwrap();
                assert!((linalg::quad_form(&v, &u).unwrap() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_covariance_falls_back_or_skips() {
        let mut w = CMatrix::<f64>::identity(2);
        let zero_u = CMatrix::zeros(2, 2);
        assert_eq!(ip_update_row(&mut w, &zero_u, 0), IpOutcome::Skipped);
        assert_eq!(w, CMatrix::identity(2));

        // rank one: the direct solve fails, loading rescues it
        let rank_one = CMatrix::from_real(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(ip_update_row(&mut w, &rank_one, 0), IpOutcome::Loaded);
        assert!(w.is_finite());
    }

    #[test]
    fn separate_identity_inverse_and_permutation() {
        let (_, observed) = random_mixture(3, 256);
        let bins = observed[0].bins();
        let y = separate(&DemixingStack::identity(bins, 2), &observed).unwrap();
        assert_eq!(y, observed);

        let perm = CMatrix::from_real(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let stack = DemixingStack::from_matrices(vec![perm; bins]).unwrap();
        let y = separate(&stack, &observed).unwrap();
        assert_eq!(y[0], observed[1]);
        assert_eq!(y[1], observed[0]);
    }

    #[test]
    fn separate_with_exact_inverse_recovers_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let engine = StftEngine::<f64>::new(WindowKind::Hann, 32, 8).unwrap();
        let s: Vec<Vec<f64>> = (0..2).map(|_| (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = CMatrix::from_real(&[&[1.0, 0.5], &[0.3, 1.0]]);
        let x: Vec<Vec<f64>> = (0..2)
            .map(|m| (0..200).map(|l| a[(m, 0)].re * s[0][l] + a[(m, 1)].re * s[1][l]).collect())
            .collect();
        let observed: Vec<_> = x.iter().map(|ch| engine.forward(ch)).collect();
        let inv = linalg::inverse(&a).unwrap();
        let stack = DemixingStack::from_matrices(vec![inv; observed[0].bins()]).unwrap();
        let y = separate(&stack, &observed).unwrap();
        for n in 0..2 {
            let back = engine.inverse(&y[n], 200).unwrap();
            assert!(back.iter().zip(&s[n]).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn nll_unit_case() {
        let g = crate::stft::StftGeometry::unpadded(8, 2, 6).unwrap();
        let ones = Array2::from_elem((g.bins(), g.frames), c(1.0, 0.0));
        let y: Vec<_> = (0..2).map(|_| Spectrogram::from_array(ones.clone(), g).unwrap()).collect();
        let r: Vec<_> = (0..2).map(|_| VarianceField(Array2::ones((g.bins(), g.frames)))).collect();
        let value = nll_ilrma(&DemixingStack::identity(g.bins(), 2), &y, &r);
        assert!((value - (g.bins() * g.frames * 2) as f64).abs() < 1e-12);
    }

    #[test]
    fn nll_scaling_closed_form() {
        // W_i -> 2 W_i and r -> 4 r: |y|^2/r unchanged, each log r gains
        // ln 4, det term loses 2J ln(2^N) per bin. Net change is zero.
        let (_, observed) = random_mixture(5, 256);
        let mut state = SeparationState::new(Method::Ilrma, observed, 2, 1).unwrap();
        let before = state.negative_log_likelihood();
        for i in 0..state.demixing.bins() {
            state.demixing.mats[i].scale(c(2.0, 0.0));
        }
        state.resynchronize().unwrap();
        let r4: Vec<_> = state.variances().into_iter().map(|v| VarianceField(v.0.mapv(|x| 4.0 * x))).collect();
        let after = nll_ilrma(&state.demixing, &state.separated, &r4);
        assert!((after - before).abs() <= 1e-9 * before.abs(), "{before} {after}");
    }

    #[test]
    fn back_projection_diagonal_example() {
        let (_, observed) = random_mixture(6, 128);
        let bins = observed[0].bins();
        let mut state = SeparationState::new(Method::Iva, observed, 2, 0).unwrap();
        state.demixing = DemixingStack::from_matrices(vec![CMatrix::from_real(&[&[2.0, 0.0], &[0.0, 4.0]]); bins]).unwrap();
        state.resynchronize().unwrap();
        let coeffs = state.back_projection(0).unwrap();
        assert!((coeffs.lambda[0][0][0] - c(0.5, 0.0)).norm() < 1e-15);
        assert_eq!(coeffs.lambda[0][1][0], c(0.0, 0.0));
        let before = state.clone();
        state.rescale(&coeffs).unwrap();
        assert_eq!(state.events.skipped_rescales, bins);
        assert_eq!(state.demixing.get(0).row(1), before.demixing.get(0).row(1));
    }

    #[test]
    fn back_projection_identity_and_mixture_sum() {
        let (_, observed) = random_mixture(7, 256);
        let mut state = SeparationState::new(Method::Ilrma, observed.clone(), 2, 0).unwrap();
        let (coeffs, images) = state.back_project(0).unwrap();
        assert_eq!(coeffs.lambda[3][0], vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(images[0], observed[0]);
        assert!(images[1].data().iter().all(|z| z.norm() == 0.0));

        // Any nonsingular W: sum_n y_ijn * lambda_in reproduces x_ij.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for w in &mut state.demixing.mats {
            *w = CMatrix::from_rows(&[
                vec![c(rng.random(), rng.random()) + 1.0, c(rng.random(), rng.random())],
                vec![c(rng.random(), rng.random()), c(rng.random(), rng.random()) + 1.0],
            ]);
        }
        state.resynchronize().unwrap();
        let coeffs = state.back_projection(0).unwrap();
        for i in 0..observed[0].bins() {
            let inv = linalg::inverse(state.demixing.get(i)).unwrap();
            for j in 0..observed[0].frames() {
                let y: Vec<C> = (0..2).map(|n| state.separated[n].data()[(i, j)]).collect();
                for m in 0..2 {
                    let sum: C = (0..2).map(|n| y[n] * coeffs.lambda[i][n][m]).sum();
                    assert!((sum - observed[m].data()[(i, j)]).norm() < 1e-12);
                    for n in 0..2 {
                        let mut masked = vec![c(0.0, 0.0); 2];
                        masked[n] = y[n];
                        let direct = inv.mul_vec(&masked)[m];
                        assert!((direct - y[n] * coeffs.lambda[i][n][m]).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rescale_preserves_likelihood_and_ratios() {
        let (engine, observed) = random_mixture(9, 512);
        let mut state = SeparationState::new(Method::ConsistentIlrmaBp, observed, 2, 4).unwrap();
        for _ in 0..3 {
            state.update_source_models();
            state.update_spatial().unwrap();
        }
        let before = state.negative_log_likelihood();
        let ratio_before: Vec<f64> = {
            let r = state.variances();
            state.separated[0].data().iter().zip(r[0].values().iter()).map(|(z, v)| z.norm_sqr() / v).collect()
        };
        let (coeffs, images) = state.back_project(0).unwrap();
        state.rescale(&coeffs).unwrap();
        let after = state.negative_log_likelihood();
        assert!((after - before).abs() <= 1e-9 * before.abs(), "{before} vs {after}");
        let r = state.variances();
        for ((z, v), rb) in state.separated[0].data().iter().zip(r[0].values().iter()).zip(&ratio_before) {
            assert!((z.norm_sqr() / v - rb).abs() <= 1e-8 * rb.max(1e-3));
        }
        // Y now equals the back-projected images.
        for n in 0..2 {
            let d = (&state.separated[n] - &images[n]).energy();
            assert!(d <= 1e-20 * images[n].energy());
        }
        let _ = engine;
    }

    #[test]
    fn unit_lambda_leaves_state_unchanged() {
        let (_, observed) = random_mixture(10, 256);
        let mut state = SeparationState::new(Method::Ilrma, observed, 2, 4).unwrap();
        let before = (state.demixing.clone(), state.models.clone(), state.separated.clone());
        let coeffs = state.back_projection(0).unwrap();
        let ones = BackProjectionCoeffs {
            lambda: coeffs.lambda.iter().map(|per| per.iter().map(|_| vec![c(1.0, 0.0); 2]).collect()).collect(),
            ref_channel: 0,
        };
        state.rescale(&ones).unwrap();
        assert_eq!(state.demixing, before.0);
        assert_eq!(state.models, before.1);
        assert_eq!(state.separated, before.2);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (engine, observed) = random_mixture(11, 256);
        let mut config = SeparationConfig::new(Method::ConsistentIlrmaBp);
        config.iterations = 0;
        let out = run(observed.clone(), &engine, &config).unwrap();
        assert_eq!(out.state.separated, observed);
        assert_eq!(out.report.nll.len(), 1);
        assert_eq!(out.report.inconsistency.len(), 1);
        assert!(out.report.inconsistency[0] < 1e-20);
    }

    #[test]
    fn ilrma_likelihood_is_monotone() {
        let (engine, observed) = random_mixture(12, 2048);
        let mut config = SeparationConfig::new(Method::Ilrma);
        config.iterations = 30;
        let out = run(observed, &engine, &config).unwrap();
        for w in out.report.nll.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn iva_likelihood_is_monotone() {
        let (engine, observed) = random_mixture(13, 2048);
        let mut config = SeparationConfig::new(Method::Iva);
        config.iterations = 30;
        let out = run(observed, &engine, &config).unwrap();
        for w in out.report.nll.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn driver_matches_manual_ilrma_bit_for_bit() {
        let (engine, observed) = random_mixture(14, 1024);
        let mut config = SeparationConfig::new(Method::Ilrma);
        config.iterations = 5;
        config.seed = 77;
        let out = run(observed.clone(), &engine, &config).unwrap();

        let mut manual = SeparationState::new(Method::Ilrma, observed, 2, 77).unwrap();
        for _ in 0..5 {
            manual.update_source_models();
            manual.update_spatial().unwrap();
        }
        assert_eq!(manual.demixing, out.state.demixing);
        assert_eq!(manual.models, out.state.models);
        assert_eq!(manual.separated, out.state.separated);
    }

    #[test]
    fn projection_step_yields_consistent_spectrograms() {
        let (engine, observed) = random_mixture(15, 1024);
        let mut state = SeparationState::new(Method::ConsistentIlrma, observed, 2, 3).unwrap();
        state.iterate(&engine, 0).unwrap();
        state.project_consistent(&engine).unwrap();
        for y in &state.separated {
            let e = consistency::inconsistency_energy(&engine, y).unwrap();
            assert!(e <= 1e-15 * y.energy(), "{e}");
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fastica".parse::<Method>().is_err());
    }

    #[test]
    fn single_channel_rejected() {
        let (_, observed) = random_mixture(16, 128);
        assert!(matches!(
            SeparationState::new(Method::Ilrma, observed[..1].to_vec(), 2, 0),
            Err(Error::Unsupported(_))
        ));
    }
}
