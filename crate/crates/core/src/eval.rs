//! BSS-Eval style energy ratios, improvements over the mixture, and the
//! symmetric uncertainty coefficient used to check real/imaginary
//! independence of spectrogram bins.
//!
//! The decomposition follows the usual time-invariant-filter variant: the
//! target is the least-squares fit of the estimate by FIR-filtered copies of
//! its paired reference, the interference is what the other references add
//! to that fit, and the artifact is the residual. All signals are extended
//! by `filter_len - 1` samples so that filtered references are not
//! truncated.

use std::fmt;
use std::sync::Arc;

use ndarray::ArrayView2;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Complex, Real};

pub const DEFAULT_FILTER_LEN: usize = 512;

/// Relative ridge added to the Gram matrix when the reference basis is rank
/// deficient.
pub const RIDGE: f64 = 1e-10;

/// A score in decibels. Perfect estimates and undefined ratios are flags,
/// never float sentinels, so they survive JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DbRepr", into = "DbRepr")]
pub enum Db {
    Value(f64),
    Infinite,
    NegInfinite,
    Undefined,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DbRepr {
    Number(f64),
    Flag(String),
}

impl From<Db> for DbRepr {
    fn from(d: Db) -> Self {
        match d {
            Db::Value(v) => DbRepr::Number(v),
            Db::Infinite => DbRepr::Flag("inf".into()),
            Db::NegInfinite => DbRepr::Flag("-inf".into()),
            Db::Undefined => DbRepr::Flag("undefined".into()),
        }
    }
}

impl TryFrom<DbRepr> for Db {
    type Error = String;

    fn try_from(r: DbRepr) -> std::result::Result<Self, String> {
        match r {
            DbRepr::Number(v) => Ok(Db::Value(v)),
            DbRepr::Flag(s) => match s.as_str() {
                "inf" => Ok(Db::Infinite),
                "-inf" => Ok(Db::NegInfinite),
                "undefined" => Ok(Db::Undefined),
                other => Err(format!("unknown score flag `{other}`")),
            },
        }
    }
}

impl Db {
    /// `10 log10(num / den)` with flags for degenerate ratios.
    ///
    /// A denominator below `eps * num` counts as zero: at that level it is
    /// rounding noise from the projections, not signal.
    pub fn ratio<T: Real>(num: T, den: T) -> Db {
        let (num, den) = (num.as_f64(), den.as_f64());
        if !(num > 0.0) || !num.is_finite() || !den.is_finite() {
            return Db::Undefined;
        }
        if den <= T::epsilon().as_f64() * num {
            return Db::Infinite;
        }
        Db::Value(10.0 * (num / den).log10())
    }

    /// Float view for ordering; undefined sorts below everything.
    pub fn as_f64(self) -> f64 {
        match self {
            Db::Value(v) => v,
            Db::Infinite => f64::INFINITY,
            Db::NegInfinite | Db::Undefined => f64::NEG_INFINITY,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Db::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Db::Infinite)
    }

    fn from_f64(v: f64) -> Db {
        if v.is_nan() {
            Db::Undefined
        } else if v == f64::INFINITY {
            Db::Infinite
        } else if v == f64::NEG_INFINITY {
            Db::NegInfinite
        } else {
            Db::Value(v)
        }
    }

    pub fn mean(values: &[Db]) -> Option<Db> {
        if values.is_empty() {
            return None;
        }
        if values.contains(&Db::Undefined) {
            return Some(Db::Undefined);
        }
        let sum: f64 = values.iter().map(|d| d.as_f64()).sum();
        Some(Db::from_f64(sum / values.len() as f64))
    }
}

impl std::ops::Sub for Db {
    type Output = Db;

    fn sub(self, rhs: Db) -> Db {
        if self == Db::Undefined || rhs == Db::Undefined {
            return Db::Undefined;
        }
        Db::from_f64(self.as_f64() - rhs.as_f64())
    }
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Db::Value(v) => write!(f, "{v:.3}"),
            Db::Infinite => f.write_str("inf"),
            Db::NegInfinite => f.write_str("-inf"),
            Db::Undefined => f.write_str("undefined"),
        }
    }
}

/// Target, interference and artifact parts of one estimate; their sum is the
/// zero-extended estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    pub target: Vec<T>,
    pub interference: Vec<T>,
    pub artifact: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub sdr: Db,
    pub sir: Db,
    pub sar: Db,
}

impl<T: Real> Decomposition<T> {
    pub fn scores(&self) -> Scores {
        let energy = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>();
        let target = energy(&self.target);
        let interf = energy(&self.interference);
        let artif = energy(&self.artifact);
        let distortion: T = self
            .interference
            .iter()
            .zip(&self.artifact)
            .map(|(&a, &b)| (a + b) * (a + b))
            .sum();
        let wanted: T = self
            .target
            .iter()
            .zip(&self.interference)
            .map(|(&a, &b)| (a + b) * (a + b))
            .sum();
        if !(target > T::zero()) {
            return Scores {
                sdr: Db::Undefined,
                sir: Db::Undefined,
                sar: Db::Undefined,
            };
        }
        Scores {
            sdr: Db::ratio(target, distortion),
            sir: Db::ratio(target, interf),
            sar: Db::ratio(wanted, artif),
        }
    }
}

/// Per-source scores and their improvements over the unprocessed mixture.
///
/// `pairing[n]` is the estimate index matched to reference `n`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalScores {
    pub sdr: Vec<Db>,
    pub sir: Vec<Db>,
    pub sar: Vec<Db>,
    pub delta_sdr: Vec<Db>,
    pub delta_sir: Vec<Db>,
    pub pairing: Vec<usize>,
}

impl EvalScores {
    pub fn mean_delta_sdr(&self) -> Option<Db> {
        Db::mean(&self.delta_sdr)
    }

    pub fn mean_delta_sir(&self) -> Option<Db> {
        Db::mean(&self.delta_sir)
    }
}

/// Lower-triangular Cholesky factor, row-major.
struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    fn factor(a: &[T], n: usize) -> Option<Self> {
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, l })
    }

    /// Factors `a`, adding a relative ridge once if it is not positive
    /// definite.
    fn factor_regularized(mut a: Vec<T>, n: usize) -> Result<Self> {
        if let Some(c) = Self::factor(&a, n) {
            return Ok(c);
        }
        let trace: T = (0..n).map(|i| a[i * n + i]).sum();
        let ridge = T::lit(RIDGE) * (trace / T::from_usize_lossy(n.max(1))).max(T::min_positive_value());
        log::warn!("reference basis is rank deficient; adding ridge {:e}", ridge.as_f64());
        for i in 0..n {
            a[i * n + i] += ridge;
        }
        Self::factor(&a, n)
            .ok_or_else(|| Error::ContractViolation("reference Gram matrix not positive definite".into()))
    }

    fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Precomputed reference correlations for decomposing many estimates
/// against one set of references.
pub struct BssEval<T: Real> {
    filter_len: usize,
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    ref_spectra: Vec<Vec<Complex<T>>>,
    full: Cholesky<T>,
    own: Vec<Cholesky<T>>,
}

impl<T: Real> BssEval<T> {
    pub fn new(references: &[Vec<T>], filter_len: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("no reference signals"));
        }
        if filter_len == 0 {
            return Err(Error::invalid("distortion filter length must be >= 1"));
        }
        let len = references[0].len();
        if references.iter().any(|r| r.len() != len) {
            return Err(Error::invalid("references differ in length"));
        }
        if len == 0 {
            return Err(Error::invalid("empty reference signals"));
        }
        let n_src = references.len();
        let fft_len = (len + 2 * filter_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let spectrum = |x: &[T]| {
            let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
            buf.resize(fft_len, Complex::new(T::zero(), T::zero()));
            forward.process(&mut buf);
            buf
        };
        let ref_spectra: Vec<_> = references.iter().map(|r| spectrum(r)).collect();

        let dim = n_src * filter_len;
        let mut gram = vec![T::zero(); dim * dim];
        let scale = T::one() / T::from_usize_lossy(fft_len);
        for a in 0..n_src {
            for b in 0..n_src {
                // corr[k] = sum_m s_a[m] s_b[m + k], k in (-filter_len, filter_len)
                let mut buf: Vec<Complex<T>> = ref_spectra[a]
                    .iter()
                    .zip(&ref_spectra[b])
                    .map(|(x, y)| x.conj() * y)
                    .collect();
                inverse.process(&mut buf);
                let corr = |k: isize| {
                    let idx = if k >= 0 { k as usize } else { fft_len - (-k) as usize };
                    buf[idx].re * scale
                };
                for t1 in 0..filter_len {
                    for t2 in 0..filter_len {
                        gram[(a * filter_len + t1) * dim + b * filter_len + t2] = corr(t1 as isize - t2 as isize);
                    }
                }
            }
        }
        let full = Cholesky::factor_regularized(gram.clone(), dim)?;
        let own = (0..n_src)
            .map(|a| {
                let block: Vec<T> = (0..filter_len)
                    .flat_map(|t1| {
                        let row = (a * filter_len + t1) * dim + a * filter_len;
                        gram[row..row + filter_len].to_vec()
                    })
                    .collect();
                Cholesky::factor_regularized(block, filter_len)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(BssEval {
            filter_len,
            len,
            fft_len,
            forward,
            inverse,
            ref_spectra,
            full,
            own,
        })
    }

    pub fn n_references(&self) -> usize {
        self.ref_spectra.len()
    }

    pub fn extended_len(&self) -> usize {
        self.len + self.filter_len - 1
    }

    fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        buf.resize(self.fft_len, Complex::new(T::zero(), T::zero()));
        self.forward.process(&mut buf);
        buf
    }

    /// `sum_tau coeffs[a][tau] s_a[l - tau]` for the listed references.
    fn synthesize(&self, sources: &[usize], coeffs: &[T]) -> Vec<T> {
        let zero = Complex::new(T::zero(), T::zero());
        let mut acc = vec![zero; self.fft_len];
        for (slot, &a) in sources.iter().enumerate() {
            let h = self.spectrum(&coeffs[slot * self.filter_len..(slot + 1) * self.filter_len]);
            for (o, (x, y)) in acc.iter_mut().zip(self.ref_spectra[a].iter().zip(&h)) {
                *o += x * y;
            }
        }
        self.inverse.process(&mut acc);
        let scale = T::one() / T::from_usize_lossy(self.fft_len);
        acc[..self.extended_len()].iter().map(|z| z.re * scale).collect()
    }

    /// Splits `estimate` relative to reference `target`.
    pub fn decompose(&self, estimate: &[T], target: usize) -> Result<Decomposition<T>> {
        if estimate.len() != self.len {
            return Err(Error::invalid(format!(
                "estimate has {} samples, references {}",
                estimate.len(),
                self.len
            )));
        }
        if target >= self.n_references() {
            return Err(Error::invalid("target index out of range"));
        }
        let n_src = self.n_references();
        let fl = self.filter_len;
        let est_spec = self.spectrum(estimate);
        let scale = T::one() / T::from_usize_lossy(self.fft_len);
        // rhs[(a, tau)] = sum_m s_a[m] est[m + tau]
        let mut rhs = vec![T::zero(); n_src * fl];
        for a in 0..n_src {
            let mut buf: Vec<Complex<T>> = self.ref_spectra[a]
                .iter()
                .zip(&est_spec)
                .map(|(x, y)| x.conj() * y)
                .collect();
            self.inverse.process(&mut buf);
            for tau in 0..fl {
                rhs[a * fl + tau] = buf[tau].re * scale;
            }
        }

        let own_coeffs = self.own[target].solve(&rhs[target * fl..(target + 1) * fl]);
        let target_part = self.synthesize(&[target], &own_coeffs);
        let all: Vec<usize> = (0..n_src).collect();
        let full_coeffs = self.full.solve(&rhs);
        let projection = self.synthesize(&all, &full_coeffs);

        let mut padded = estimate.to_vec();
        padded.resize(self.extended_len(), T::zero());
        let interference: Vec<T> = projection.iter().zip(&target_part).map(|(&p, &t)| p - t).collect();
        let artifact: Vec<T> = padded.iter().zip(&projection).map(|(&e, &p)| e - p).collect();
        Ok(Decomposition {
            target: target_part,
            interference,
            artifact,
        })
    }

    /// Scores of every estimate against every reference: `[estimate][reference]`.
    pub fn score_matrix(&self, estimates: &[Vec<T>]) -> Result<Vec<Vec<Scores>>> {
        estimates
            .iter()
            .map(|e| (0..self.n_references()).map(|r| Ok(self.decompose(e, r)?.scores())).collect())
            .collect()
    }
}

/// One-shot decomposition of `estimate` against `references[target]`.
pub fn decompose<T: Real>(
    estimate: &[T],
    references: &[Vec<T>],
    target: usize,
    filter_len: usize,
) -> Result<Decomposition<T>> {
    BssEval::new(references, filter_len)?.decompose(estimate, target)
}

/// `SDR_sep - SDR_input` and `SIR_sep - SIR_input`, per source.
pub fn improvements(sep: &[Scores], input: &[Scores]) -> (Vec<Db>, Vec<Db>) {
    assert_eq!(sep.len(), input.len(), "score lists differ in length");
    sep.iter()
        .zip(input)
        .map(|(s, i)| (s.sdr - i.sdr, s.sir - i.sir))
        .unzip()
}

/// Advances `p` to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search for the reference-to-estimate assignment with the
/// highest mean SIR. `sir[e][r]` scores estimate `e` against reference `r`;
/// ties keep the lexicographically first permutation.
pub fn best_permutation(sir: &[Vec<Db>]) -> Vec<usize> {
    let n = sir.len();
    assert!(n <= 8, "exhaustive permutation search limited to 8 sources");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut first = true;
    loop {
        let values: Vec<Db> = (0..n).map(|r| sir[perm[r]][r]).collect();
        let score = Db::mean(&values).map_or(f64::NEG_INFINITY, Db::as_f64);
        if first || score > best_score {
            best_score = score;
            best = perm.clone();
            first = false;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

/// Pairs estimates with references, then scores separation and the input
/// mixture channel against each reference.
pub fn evaluate<T: Real>(
    estimates: &[Vec<T>],
    references: &[Vec<T>],
    mixture: &[T],
    filter_len: usize,
) -> Result<EvalScores> {
    let bss = BssEval::new(references, filter_len)?;
    if estimates.len() != references.len() {
        return Err(Error::invalid("estimate and reference counts differ"));
    }
    let matrix = bss.score_matrix(estimates)?;
    let sir: Vec<Vec<Db>> = matrix.iter().map(|row| row.iter().map(|s| s.sir).collect()).collect();
    let pairing = best_permutation(&sir);
    let sep: Vec<Scores> = pairing.iter().enumerate().map(|(r, &e)| matrix[e][r]).collect();
    let input: Vec<Scores> = (0..references.len())
        .map(|r| Ok(bss.decompose(mixture, r)?.scores()))
        .collect::<Result<_>>()?;
    let (delta_sdr, delta_sir) = improvements(&sep, &input);
    Ok(EvalScores {
        sdr: sep.iter().map(|s| s.sdr).collect(),
        sir: sep.iter().map(|s| s.sir).collect(),
        sar: sep.iter().map(|s| s.sar).collect(),
        delta_sdr,
        delta_sir,
        pairing,
    })
}

fn histogram_indices<T: Real>(x: &[T], bins: usize) -> Vec<usize> {
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    let hi = x.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    if !(span > T::zero()) {
        return vec![0; x.len()];
    }
    let b = T::from_usize_lossy(bins);
    x.iter()
        .map(|&v| {
            let idx = ((v - lo) / span * b).floor().to_usize().unwrap_or(0);
            idx.min(bins - 1)
        })
        .collect()
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, total: usize) -> f64 {
    let total = total as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// `2 (H1 + H2 - H12) / (H1 + H2)` from equal-width histograms spanning each
/// variable's sample range.
pub fn symmetric_uncertainty<T: Real>(q1: &[T], q2: &[T], bins: usize) -> Result<f64> {
    if q1.len() != q2.len() {
        return Err(Error::invalid("sample arrays differ in length"));
    }
    if bins < 2 {
        return Err(Error::invalid("need at least 2 histogram bins"));
    }
    if q1.is_empty() {
        return Err(Error::UndefinedRatio("no samples".into()));
    }
    let a = histogram_indices(q1, bins);
    let b = histogram_indices(q2, bins);
    let total = q1.len();

    let marginal = |idx: &[usize]| {
        let mut counts = vec![0usize; bins];
        for &i in idx {
            counts[i] += 1;
        }
        entropy_of_counts(counts.into_iter(), total)
    };
    let h1 = marginal(&a);
    let h2 = marginal(&b);

    let mut joint: Vec<u64> = a
        .iter()
        .zip(&b)
        .map(|(&i, &j)| (i as u64) * bins as u64 + j as u64)
        .collect();
    joint.sort_unstable();
    // Summing in count order makes the result independent of argument order.
    let mut runs: Vec<usize> = joint.chunk_by(|x, y| x == y).map(|run| run.len()).collect();
    runs.sort_unstable();
    let h12 = entropy_of_counts(runs.into_iter(), total);

    let denom = h1 + h2;
    if !(denom > 0.0) {
        return Err(Error::UndefinedRatio("both variables have zero entropy".into()));
    }
    Ok(2.0 * (h1 + h2 - h12) / denom)
}

/// Symmetric uncertainty between real and imaginary parts pooled over all
/// bins of a spectrogram. DC and Nyquist rows are real by construction and
/// are left out.
pub fn suc_real_imag<T: Real>(spec: ArrayView2<'_, Complex<T>>, fft_len: usize, bins: usize) -> Result<f64> {
    let nyquist = fft_len.is_multiple_of(2).then_some(fft_len / 2);
    let mut re = Vec::with_capacity(spec.len());
    let mut im = Vec::with_capacity(spec.len());
    for (i, row) in spec.outer_iter().enumerate() {
        if i == 0 || Some(i) == nyquist {
            continue;
        }
        for z in row {
            re.push(z.re);
            im.push(z.im);
        }
    }
    let degenerate = |v: &[T]| {
        v.is_empty() || v.iter().copied().fold(T::infinity(), T::min) == v.iter().copied().fold(T::neg_infinity(), T::max)
    };
    if degenerate(&re) || degenerate(&im) {
        return Err(Error::UndefinedRatio("real or imaginary part is constant".into()));
    }
    symmetric_uncertainty(&re, &im, bins)
}
