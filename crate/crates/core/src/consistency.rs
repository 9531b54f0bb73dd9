//! Projection onto consistent spectrograms and inconsistency diagnostics.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::{Spectrogram, StftEngine};

/// `STFT(ISTFT(y))` over the full circular support, so the result is a fixed
/// point of the same map.
pub fn project_consistent<T: Real>(engine: &StftEngine<T>, y: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    let g = *y.geometry();
    let time = engine.inverse(y, g.padded_len())?;
    engine.forward_with(&time, g)
}

/// Inconsistent component `y - STFT(ISTFT(y))`.
pub fn inconsistent_part<T: Real>(engine: &StftEngine<T>, y: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    let projected = project_consistent(engine, y)?;
    Ok(y - &projected)
}

/// Squared norm of the inconsistent component, over the conjugate-extended
/// spectrum.
pub fn inconsistency_energy<T: Real>(engine: &StftEngine<T>, y: &Spectrogram<T>) -> Result<T> {
    Ok(inconsistent_part(engine, y)?.energy())
}

/// `sum_n |E(Y_n)|^2 / sum_m |X_m|^2`.
pub fn normalized_inconsistency<T: Real>(
    engine: &StftEngine<T>,
    separated: &[Spectrogram<T>],
    observed: &[Spectrogram<T>],
) -> Result<T> {
    let reference: T = observed.iter().map(|x| x.energy()).sum();
    normalized_inconsistency_with(engine, separated, reference)
}

/// Same as [`normalized_inconsistency`] with a precomputed mixture energy.
pub fn normalized_inconsistency_with<T: Real>(
    engine: &StftEngine<T>,
    separated: &[Spectrogram<T>],
    mixture_energy: T,
) -> Result<T> {
    if !(mixture_energy > T::zero()) {
        return Err(Error::UndefinedRatio("mixture energy is zero".into()));
    }
    let mut total = T::zero();
    for y in separated {
        total += inconsistency_energy(engine, y)?;
    }
    Ok(total / mixture_energy)
}

/// Per-iteration normalized inconsistency, starting from the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyDiag {
    pub normalized: Vec<f64>,
    pub mixture_energy: f64,
}

impl ConsistencyDiag {
    pub fn new(mixture_energy: f64) -> Self {
        ConsistencyDiag {
            normalized: Vec::new(),
            mixture_energy,
        }
    }

    pub fn push(&mut self, value: f64) {
        debug_assert!(value >= 0.0);
        self.normalized.push(value.max(0.0));
    }
}
