//! Phase-space state of the coupled electron-oscillator chain.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use super::linalg;
use super::DynamicsError;

/// Tolerance on `max |rho - rho^H|` for a valid state.
pub const HERMITICITY_TOL: f64 = 1e-12;
/// Tolerance on `|tr rho - n_electrons|` for a valid state.
pub const TRACE_TOL: f64 = 1e-10;
/// Allowed excursion of density-matrix eigenvalues outside `[0, 1]`.
pub const SPECTRUM_TOL: f64 = 1e-10;

/// Instantaneous state: classical displacements `Q`, momenta `P`, the
/// electronic one-particle density matrix `rho`, and the simulation time.
///
/// A valid state has Hermitian `rho` (within [`HERMITICITY_TOL`]), trace equal
/// to the electron number (within [`TRACE_TOL`]) and eigenvalues inside
/// `[0, 1]` (within [`SPECTRUM_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    /// Oscillator displacements, one per site.
    pub q: Array1<f64>,
    /// Oscillator momenta, one per site.
    pub p: Array1<f64>,
    /// Electronic one-particle density matrix, `L x L`.
    pub rho: Array2<Complex64>,
    /// Simulation time in units of `hbar / t_nn`.
    pub time: f64,
}

impl LatticeState {
    /// Validating constructor; `n_electrons` fixes the expected trace.
    pub fn new(
        q: Array1<f64>,
        p: Array1<f64>,
        rho: Array2<Complex64>,
        time: f64,
        n_electrons: usize,
    ) -> Result<Self, DynamicsError> {
        let state = Self::from_parts_unchecked(q, p, rho, time);
        state.validate(n_electrons)?;
        Ok(state)
    }

    /// Constructor without invariant checks, for integrator internals and
    /// tests that deliberately build invalid states.
    pub fn from_parts_unchecked(
        q: Array1<f64>,
        p: Array1<f64>,
        rho: Array2<Complex64>,
        time: f64,
    ) -> Self {
        Self { q, p, rho, time }
    }

    /// Number of lattice sites.
    pub fn l(&self) -> usize {
        self.q.len()
    }

    /// Real part of `tr rho`.
    pub fn trace(&self) -> f64 {
        self.rho.diag().iter().map(|z| z.re).sum()
    }

    /// Largest entrywise deviation of `rho` from Hermiticity.
    pub fn hermiticity_deviation(&self) -> f64 {
        linalg::hermiticity_deviation(&self.rho)
    }

    /// Site-occupation vector `n_i = Re rho_ii`.
    pub fn electron_density(&self) -> Array1<f64> {
        Array1::from_iter(self.rho.diag().iter().map(|z| z.re))
    }

    /// Cheap structural checks: consistent shapes, finite entries, Hermiticity
    /// and trace.  Does not diagonalize.
    pub fn validate_structure(&self, n_electrons: usize) -> Result<(), DynamicsError> {
        let l = self.q.len();
        if self.p.len() != l || self.rho.nrows() != l || self.rho.ncols() != l {
            return Err(DynamicsError::ShapeMismatch(format!(
                "q: {}, p: {}, rho: {}x{}",
                l,
                self.p.len(),
                self.rho.nrows(),
                self.rho.ncols()
            )));
        }
        if !self.q.iter().all(|x| x.is_finite()) {
            return Err(DynamicsError::NonFinite("displacements Q"));
        }
        if !self.p.iter().all(|x| x.is_finite()) {
            return Err(DynamicsError::NonFinite("momenta P"));
        }
        if !self.rho.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(DynamicsError::NonFinite("density matrix rho"));
        }
        if !self.time.is_finite() {
            return Err(DynamicsError::NonFinite("time"));
        }
        let dev = self.hermiticity_deviation();
        if dev > HERMITICITY_TOL {
            return Err(DynamicsError::NotHermitian { deviation: dev });
        }
        let tr = self.trace();
        if (tr - n_electrons as f64).abs() > TRACE_TOL {
            return Err(DynamicsError::TraceMismatch {
                found: tr,
                expected: n_electrons as f64,
            });
        }
        Ok(())
    }

    /// Full validation: structure plus the density-matrix spectrum staying in
    /// `[0, 1]`.  Costs one Hermitian eigendecomposition.
    pub fn validate(&self, n_electrons: usize) -> Result<(), DynamicsError> {
        self.validate_structure(n_electrons)?;
        let vals = linalg::eigvalsh(&self.rho);
        let min = vals.first().copied().unwrap_or(0.0);
        let max = vals.last().copied().unwrap_or(0.0);
        if min < -SPECTRUM_TOL || max > 1.0 + SPECTRUM_TOL {
            return Err(DynamicsError::SpectrumOutOfRange { min, max });
        }
        Ok(())
    }

    /// Sorted eigenvalues of `rho` (the conserved natural occupations).
    pub fn occupation_spectrum(&self) -> Vec<f64> {
        linalg::eigvalsh(&self.rho)
    }

    /// State translated by `shift` sites: site `i` of the result is site
    /// `(i + shift) mod L` of `self`.  The dynamics commutes with this map.
    pub fn cyclic_shift(&self, shift: usize) -> Self {
        let l = self.l();
        let s = shift % l;
        let q = Array1::from_iter((0..l).map(|i| self.q[(i + s) % l]));
        let p = Array1::from_iter((0..l).map(|i| self.p[(i + s) % l]));
        let mut rho = Array2::<Complex64>::zeros((l, l));
        for i in 0..l {
            for j in 0..l {
                rho[[i, j]] = self.rho[[(i + s) % l, (j + s) % l]];
            }
        }
        Self::from_parts_unchecked(q, p, rho, self.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn half_filled_diag(l: usize) -> LatticeState {
        // Diagonal rho with n_i = 1/2: trivially Hermitian, trace L/2,
        // spectrum {1/2}.
        let rho = Array2::from_diag(&Array1::from_elem(l, Complex64::new(0.5, 0.0)));
        LatticeState::from_parts_unchecked(Array1::zeros(l), Array1::zeros(l), rho, 0.0)
    }

    #[test]
    fn valid_state_passes_full_validation() {
        let s = half_filled_diag(8);
        s.validate(4).unwrap();
    }

    #[test]
    fn violations_map_to_distinct_errors() {
        let l = 8;
        let mut s = half_filled_diag(l);
        s.rho[[0, 1]] = Complex64::new(0.3, 0.1); // rho_{10} stays 0
        assert!(matches!(
            s.validate_structure(4),
            Err(DynamicsError::NotHermitian { .. })
        ));

        let mut s = half_filled_diag(l);
        s.rho[[0, 0]] = Complex64::new(0.9, 0.0);
        assert!(matches!(
            s.validate_structure(4),
            Err(DynamicsError::TraceMismatch { .. })
        ));

        let mut s = half_filled_diag(l);
        s.rho[[0, 0]] = Complex64::new(1.5, 0.0);
        s.rho[[1, 1]] = Complex64::new(-0.5, 0.0);
        assert!(matches!(
            s.validate(4),
            Err(DynamicsError::SpectrumOutOfRange { .. })
        ));

        let mut s = half_filled_diag(l);
        s.q[3] = f64::NAN;
        assert!(matches!(
            s.validate_structure(4),
            Err(DynamicsError::NonFinite(_))
        ));

        let s = LatticeState::from_parts_unchecked(
            Array1::zeros(l),
            Array1::zeros(l - 1),
            Array2::zeros((l, l)),
            0.0,
        );
        assert!(matches!(
            s.validate_structure(4),
            Err(DynamicsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cyclic_shift_moves_sites_and_preserves_spectrum() {
        let l = 6;
        let mut s = half_filled_diag(l);
        for i in 0..l {
            s.q[i] = i as f64;
            s.rho[[i, i]] = Complex64::new(0.5 + 0.01 * (i as f64 - 2.5), 0.0);
        }
        let shifted = s.cyclic_shift(2);
        assert_eq!(shifted.q[0], 2.0);
        assert_eq!(shifted.q[l - 1], 1.0);
        assert_eq!(shifted.rho[[0, 0]], s.rho[[2, 2]]);
        let a = s.occupation_spectrum();
        let b = shifted.occupation_spectrum();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // Shifting by L is the identity.
        let full = s.cyclic_shift(l);
        assert_eq!(full, s);
    }
}
