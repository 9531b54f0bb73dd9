//! Variance models for separated spectrograms: rank-K Itakura-Saito NMF and
//! the spherical per-frame model of the IVA baseline.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{Complex, Real};

/// Default positivity floor when no data scale is known.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Expected power `E|y_ij|^2` per bin, every entry at least the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceField<T>(pub Array2<T>);

impl<T: Real> VarianceField<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.0
    }
}

/// Nonnegative basis (`bins x K`) and activations (`K x frames`) of one
/// source.
///
/// Activations are floored at a fixed value. The basis and the variance are
/// floored per bin; rescaling a basis row rescales its floor too, so the
/// variance of that bin scales exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel<T> {
    basis: Array2<T>,
    activation: Array2<T>,
    floor: T,
    bin_floor: Array1<T>,
}

impl<T: Real> NmfModel<T> {
    /// Uniform `(0, 1)` entries clamped at `floor`.
    pub fn random<R: Rng>(bins: usize, frames: usize, k: usize, floor: T, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("NMF rank must be at least 1"));
        }
        if !(floor > T::zero()) {
            return Err(Error::invalid("positivity floor must be > 0"));
        }
        let mut draw = |_| T::lit(rng.random::<f64>()).max(floor);
        let basis = Array2::from_shape_fn((bins, k), &mut draw);
        let activation = Array2::from_shape_fn((k, frames), &mut draw);
        Ok(NmfModel {
            basis,
            activation,
            floor,
            bin_floor: Array1::from_elem(bins, floor),
        })
    }

    pub fn from_parts(basis: Array2<T>, activation: Array2<T>, floor: T) -> Result<Self> {
        if basis.ncols() != activation.nrows() {
            return Err(Error::invalid("basis/activation rank mismatch"));
        }
        if basis.ncols() == 0 {
            return Err(Error::invalid("NMF rank must be at least 1"));
        }
        if !(floor > T::zero()) {
            return Err(Error::invalid("positivity floor must be > 0"));
        }
        if basis.iter().chain(activation.iter()).any(|&v| !(v.is_finite() && v > T::zero())) {
            return Err(Error::invalid("NMF entries must be finite and positive"));
        }
        let mut m = NmfModel {
            bin_floor: Array1::from_elem(basis.nrows(), floor),
            basis,
            activation,
            floor,
        };
        m.apply_floor();
        Ok(m)
    }

    pub fn basis(&self) -> &Array2<T> {
        &self.basis
    }

    pub fn activation(&self) -> &Array2<T> {
        &self.activation
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Current floor of basis row and variance row `i`.
    pub fn bin_floor(&self, i: usize) -> T {
        self.bin_floor[i]
    }

    fn apply_floor(&mut self) {
        let f = self.floor;
        for (mut row, &bf) in self.basis.rows_mut().into_iter().zip(&self.bin_floor) {
            row.mapv_inplace(|v| v.max(bf));
        }
        self.activation.mapv_inplace(|v| v.max(f));
    }

    /// `R = T V`, floored per bin.
    pub fn variance(&self) -> VarianceField<T> {
        let mut r = self.basis.dot(&self.activation);
        for (mut row, &bf) in r.rows_mut().into_iter().zip(&self.bin_floor) {
            row.mapv_inplace(|v| v.max(bf));
        }
        VarianceField(r)
    }

    /// Multiplies row `i` of the basis, and its floor, by `c > 0`; used when
    /// back projection rescales one frequency of one source.
    pub fn scale_basis_row(&mut self, i: usize, c: T) {
        self.basis.row_mut(i).mapv_inplace(|v| v * c);
        self.bin_floor[i] *= c;
    }

    /// Majorization-minimization step on the basis for IS divergence.
    pub fn update_basis(&mut self, power: ArrayView2<'_, T>) {
        let r = self.variance().0;
        let (weighted, inv) = ratio_terms(power, &r);
        let num = weighted.dot(&self.activation.t());
        let den = inv.dot(&self.activation.t());
        Zip::from(self.basis.rows_mut())
            .and(num.rows())
            .and(den.rows())
            .and(&self.bin_floor)
            .for_each(|mut t, n, d, &f| {
                Zip::from(&mut t).and(&n).and(&d).for_each(|t, &n, &d| *t = (*t * (n / d).sqrt()).max(f));
            });
    }

    pub fn update_activation(&mut self, power: ArrayView2<'_, T>) {
        let r = self.variance().0;
        let (weighted, inv) = ratio_terms(power, &r);
        let num = self.basis.t().dot(&weighted);
        let den = self.basis.t().dot(&inv);
        let f = self.floor;
        Zip::from(&mut self.activation)
            .and(&num)
            .and(&den)
            .for_each(|v, &n, &d| *v = (*v * (n / d).sqrt()).max(f));
    }

    /// Basis update followed by activation update, both from the same power
    /// spectrogram.
    pub fn update(&mut self, power: ArrayView2<'_, T>) {
        self.update_basis(power);
        self.update_activation(power);
    }
}

/// `(P / R^2, 1 / R)` element-wise.
fn ratio_terms<T: Real>(power: ArrayView2<'_, T>, r: &Array2<T>) -> (Array2<T>, Array2<T>) {
    assert_eq!(power.dim(), r.dim(), "power spectrogram shape mismatch");
    let inv = r.mapv(|v| T::one() / v);
    let weighted = Zip::from(&power).and(&inv).map_collect(|&p, &ri| p * ri * ri);
    (weighted, inv)
}

/// Uniformly random model reproducible from `seed`.
pub fn init_nmf<T: Real>(bins: usize, frames: usize, k: usize, seed: u64) -> Result<NmfModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NmfModel::random(bins, frames, k, T::lit(DEFAULT_FLOOR), &mut rng)
}

/// `sum_ij p/r - log(p/r) - 1`.
pub fn is_divergence<T: Real>(power: ArrayView2<'_, T>, r: ArrayView2<'_, T>) -> T {
    Zip::from(&power).and(&r).fold(T::zero(), |acc, &p, &v| {
        let q = p / v;
        acc + q - q.ln() - T::one()
    })
}

/// Frame-wise `sqrt(sum_i |y_ij|^2)`, floored.
pub fn spherical_variance<T: Real>(y: ArrayView2<'_, Complex<T>>, floor: T) -> Array1<T> {
    y.columns()
        .into_iter()
        .map(|col| col.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt().max(floor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_instance(seed: u64, i: usize, j: usize, k: usize) -> (NmfModel<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = NmfModel::random(i, j, k, 1e-12, &mut rng).unwrap();
        let power = Array2::from_shape_fn((i, j), |_| rng.random_range(0.01..3.0));
        (model, power)
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = init_nmf::<f64>(9, 7, 2, 42).unwrap();
        let b = init_nmf::<f64>(9, 7, 2, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.basis().dim(), (9, 2));
        let music = init_nmf::<f64>(9, 7, 10, 1).unwrap();
        assert_eq!(music.basis().dim(), (9, 10));
        assert_eq!(music.activation().dim(), (10, 7));
        assert!(a.basis().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(init_nmf::<f64>(3, 3, 0, 1).is_err());
    }

    #[test]
    fn variance_products() {
        let ones = NmfModel::from_parts(Array2::ones((3, 1)), Array2::ones((1, 4)), 1e-12).unwrap();
        assert!(ones.variance().0.iter().all(|&v| v == 1.0));

        let t = array![[1.0, 2.0], [0.5, 3.0]];
        let v = array![[1.0, 0.1, 2.0], [0.2, 4.0, 1.0]];
        let m = NmfModel::from_parts(t.clone(), v.clone(), 1e-12).unwrap();
        let r = m.variance().0;
        for i in 0..2 {
            for j in 0..3 {
                let direct: f64 = (0..2).map(|k| t[(i, k)] * v[(k, j)]).sum();
                assert!((r[(i, j)] - direct).abs() < 1e-15);
            }
        }
        let scaled = NmfModel::from_parts(t.mapv(|x| x * 3.0), v, 1e-12).unwrap();
        let r3 = scaled.variance().0;
        assert!(r3.iter().zip(r.iter()).all(|(a, b)| (a - 3.0 * b).abs() < 1e-14));
    }

    #[test]
    fn fixed_point_when_power_matches_model() {
        let (mut model, _) = random_instance(3, 12, 10, 3);
        let power = model.variance().0;
        let before = model.clone();
        model.update_basis(power.view());
        model.update_activation(power.view());
        for (a, b) in model.basis().iter().zip(before.basis()) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
        for (a, b) in model.activation().iter().zip(before.activation()) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
    }

    #[test]
    fn zero_power_decays_to_floor() {
        let (mut model, _) = random_instance(4, 5, 6, 2);
        let zero = Array2::zeros((5, 6));
        for _ in 0..50 {
            model.update(zero.view());
        }
        assert!(model.basis().iter().chain(model.activation()).all(|&v| v >= 1e-12));
        assert!(model.basis().iter().all(|&v| v < 1e-3));
    }

    #[test]
    fn updates_do_not_increase_divergence() {
        for seed in 0..20 {
            let (mut model, power) = random_instance(100 + seed, 8, 11, 3);
            let d0 = is_divergence(power.view(), model.variance().0.view());
            model.update_basis(power.view());
            let d1 = is_divergence(power.view(), model.variance().0.view());
            model.update_activation(power.view());
            let d2 = is_divergence(power.view(), model.variance().0.view());
            assert!(d1 <= d0 + 1e-9 && d2 <= d1 + 1e-9, "{d0} {d1} {d2}");
        }
    }

    #[test]
    fn row_scaling_is_exact_at_the_floor() {
        let t: Array2<f64> = array![[1e-12, 1e-12], [0.5, 1e-12]];
        let v: Array2<f64> = array![[1e-12, 1e-12], [1e-12, 4.0]];
        let mut m = NmfModel::from_parts(t, v, 1e-12).unwrap();
        let before = m.variance().0;
        assert_eq!(before[(0, 0)], 1e-12);
        m.scale_basis_row(0, 1e-3);
        let after = m.variance().0;
        for j in 0..2 {
            assert!((after[(0, j)] - 1e-3 * before[(0, j)]).abs() <= 1e-15 * before[(0, j)]);
            assert_eq!(after[(1, j)], before[(1, j)]);
        }
        assert_eq!(m.bin_floor(0), 1e-15);
    }

    #[test]
    fn spherical_variance_cases() {
        let mut y = Array2::from_elem((4, 3), Complex::<f64>::new(0.0, 0.0));
        y[(2, 1)] = Complex::new(0.0, 2.0);
        let r = spherical_variance(y.view(), 1e-12);
        assert_eq!(r[1], 2.0);
        assert_eq!(r[0], 1e-12);
        let c = Complex::new(3.0, -4.0);
        let r5 = spherical_variance(y.mapv(|z| z * c).view(), 1e-12);
        assert!((r5[1] - 10.0).abs() < 1e-14);
    }
}
