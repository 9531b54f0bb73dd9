//! Dense complex kernels for the small per-frequency systems (N <= 8).
//!
//! Partial-pivot LU is the only factorization. Inverses are formed only
//! where a whole column is needed (back projection, condition estimates).

use std::ops::{Index, IndexMut, Mul};

use crate::error::{Error, Result};
use crate::scalar::{Complex, Real};

/// Matrices whose row-equilibrated 1-norm condition number exceeds this are
/// singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Tolerated relative asymmetry of a Hermitian argument.
pub const HERMITIAN_TOL: f64 = 1e-8;

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex<T>>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        CMatrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_real(rows: &[&[f64]]) -> Self {
        let rows: Vec<Vec<Complex<T>>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| Complex::new(T::lit(x), T::zero())).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn diag(values: &[Complex<T>]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, r: usize) -> &[Complex<T>] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex<T>] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)].conj();
            }
        }
        out
    }

    pub fn scale(&mut self, s: Complex<T>) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn add_identity(&mut self, s: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)].re += s;
        }
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b)
    }

    pub fn mul_vec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// Max absolute column sum.
    pub fn norm_1(&self) -> T {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].norm()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    /// Largest `|a_ij - conj(a_ji)|` relative to the largest entry.
    pub fn hermitian_defect(&self) -> T {
        let scale = self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max);
        if scale == T::zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst / scale
    }

    /// `(A + A^H) / 2`.
    pub fn hermitian_part(&self) -> Self {
        let mut out = self.clone();
        let half = T::lit(0.5);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(r, c)] = (self[(r, c)] + self[(c, r)].conj()) * half;
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;

    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for CMatrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Real> Mul for &CMatrix<T> {
    type Output = CMatrix<T>;

    fn mul(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.cols, rhs.rows, "dimension mismatch");
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                for c in 0..rhs.cols {
                    out[(r, c)] += a * rhs[(k, c)];
                }
            }
        }
        out
    }
}

/// Partial-pivot LU factors of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: CMatrix<T>,
    perm: Vec<usize>,
    swaps: usize,
    singular: bool,
}

impl<T: Real> Lu<T> {
    pub fn new(a: &CMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid(format!("{}x{} matrix is not square", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        let mut singular = false;
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|r| (r, lu[(r, k)].norm()))
                .fold((k, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == T::zero() || !pivot.is_finite() {
                singular = true;
                continue;
            }
            if p != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(p, c)];
                    lu[(p, c)] = tmp;
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let inv = lu[(k, k)].inv();
            for r in k + 1..n {
                let f = lu[(r, k)] * inv;
                lu[(r, k)] = f;
                for c in k + 1..n {
                    let u = lu[(k, c)];
                    lu[(r, c)] -= f * u;
                }
            }
        }
        Ok(Lu {
            lu,
            perm,
            swaps,
            singular,
        })
    }

    pub fn det(&self) -> Complex<T> {
        let n = self.lu.rows;
        let mut d = if self.swaps.is_multiple_of(2) {
            Complex::new(T::one(), T::zero())
        } else {
            Complex::new(-T::one(), T::zero())
        };
        for i in 0..n {
            d *= self.lu[(i, i)];
        }
        d
    }

    /// Solves without any conditioning check. Callers must know the factors
    /// are nonsingular.
    fn solve_unchecked(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.lu.rows;
        let mut x: Vec<Complex<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                let l = self.lu[(r, c)];
                let xc = x[c];
                x[r] -= l * xc;
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                let u = self.lu[(r, c)];
                let xc = x[c];
                x[r] -= u * xc;
            }
            x[r] /= self.lu[(r, r)];
        }
        x
    }

    pub fn inverse_unchecked(&self) -> CMatrix<T> {
        let n = self.lu.rows;
        let mut inv = CMatrix::zeros(n, n);
        let mut e = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..n {
            e.iter_mut().for_each(|z| *z = Complex::new(T::zero(), T::zero()));
            e[c] = Complex::new(T::one(), T::zero());
            for (r, v) in self.solve_unchecked(&e).into_iter().enumerate() {
                inv[(r, c)] = v;
            }
        }
        inv
    }

    /// Exact 1-norm condition number of `D A`, where `D` scales every row of
    /// `A` to unit 1-norm; infinite when a pivot vanished. Row scale alone
    /// never makes a matrix singular.
    pub fn condition(&self, a: &CMatrix<T>) -> T {
        if self.singular {
            return T::infinity();
        }
        let mut inv = self.inverse_unchecked();
        if !inv.is_finite() {
            return T::infinity();
        }
        let mut scaled = a.clone();
        for r in 0..a.rows {
            let norm = (0..a.cols).fold(T::zero(), |acc, c| acc + a[(r, c)].norm());
            if !(norm > T::zero()) {
                return T::infinity();
            }
            for c in 0..a.cols {
                scaled[(r, c)] = a[(r, c)] / norm;
                inv[(c, r)] = inv[(c, r)] * norm;
            }
        }
        scaled.norm_1() * inv.norm_1()
    }
}

fn check_condition<T: Real>(a: &CMatrix<T>, lu: &Lu<T>) -> Result<()> {
    let condition = lu.condition(a);
    if !(condition <= T::lit(CONDITION_LIMIT)) {
        return Err(Error::SingularMatrix {
            condition: condition.as_f64(),
        });
    }
    Ok(())
}

/// Solves `A x = b`; fails when the condition estimate exceeds
/// [`CONDITION_LIMIT`].
pub fn solve<T: Real>(a: &CMatrix<T>, b: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    if b.len() != a.rows {
        return Err(Error::invalid("right-hand side length mismatch"));
    }
    let lu = Lu::new(a)?;
    check_condition(a, &lu)?;
    Ok(lu.solve_unchecked(b))
}

/// Inverse of a well-conditioned square matrix.
pub fn inverse<T: Real>(a: &CMatrix<T>) -> Result<CMatrix<T>> {
    let lu = Lu::new(a)?;
    check_condition(a, &lu)?;
    Ok(lu.inverse_unchecked())
}

pub fn det<T: Real>(a: &CMatrix<T>) -> Result<Complex<T>> {
    Ok(Lu::new(a)?.det())
}

/// `w^H U w` for Hermitian `U`, returned as its real part.
pub fn quad_form<T: Real>(w: &[Complex<T>], u: &CMatrix<T>) -> Result<T> {
    if !u.is_square() || u.rows != w.len() {
        return Err(Error::invalid("quadratic form dimension mismatch"));
    }
    if u.hermitian_defect() > T::lit(HERMITIAN_TOL) {
        return Err(Error::ContractViolation(format!(
            "matrix is not Hermitian (relative defect {:e})",
            u.hermitian_defect().as_f64()
        )));
    }
    Ok(quad_form_unchecked(w, u))
}

pub(crate) fn quad_form_unchecked<T: Real>(w: &[Complex<T>], u: &CMatrix<T>) -> T {
    let uw = u.mul_vec(w);
    w.iter()
        .zip(&uw)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a.conj() * b)
        .re
}
