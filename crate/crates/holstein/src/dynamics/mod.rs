//! Exact Ehrenfest dynamics of the 1D semiclassical Holstein model.
//!
//! Electrons hop on a periodic chain of `L` sites and couple linearly to one
//! classical Einstein oscillator per site.  The electronic one-particle
//! density matrix `rho` obeys the von Neumann equation generated by the
//! instantaneous mean-field Hamiltonian
//!
//! ```text
//! H_ij({Q}) = -t_nn (delta_{j,i+1} + delta_{j,i-1}) - g delta_ij Q_i
//! ```
//!
//! (indices periodic), while the oscillators follow Newton's equations with
//! the Hellmann-Feynman force `g rho_ii`:
//!
//! ```text
//! dQ_i/dt = P_i / m
//! dP_i/dt = g rho_ii - K Q_i
//! drho/dt = -(i/hbar) [H({Q}), rho]
//! ```
//!
//! Everything is expressed in units of the hopping `t_nn = 1` and `hbar = 1`.

mod ground;
mod integrate;
pub(crate) mod linalg;
mod state;

pub use ground::{cdw_ground_state, cdw_ground_state_seeded, free_fermi_ground_state};
pub(crate) use integrate::check_integrity;
pub use integrate::{eval_rhs, rk4_step, simulate, Rk4, StateDerivative};
pub use state::LatticeState;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest supported chain length.  `L = 2` is rejected because both
/// neighbors of a site coincide there and the periodic hopping would be
/// double-counted; odd `L` is rejected because half filling and the staggered
/// order parameter require an even number of sites.
pub const MIN_LATTICE: usize = 4;

/// Errors produced by the dynamics layer.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("unsupported lattice size {0}: need an even L >= 4")]
    BadLattice(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("density matrix is not Hermitian: max |rho - rho^H| = {deviation:.3e}")]
    NotHermitian { deviation: f64 },
    #[error("density matrix trace {found:.12} differs from electron number {expected}")]
    TraceMismatch { found: f64, expected: f64 },
    #[error("density-matrix spectrum escapes [0, 1]: min {min:.3e}, max {max:.6}")]
    SpectrumOutOfRange { min: f64, max: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "self-consistency did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    Convergence { residual: f64, iterations: usize },
    #[error("integrity failure at integration step {step}: {what}")]
    Integrity { step: usize, what: String },
}

/// Static parameters of the Holstein chain, in units of `t_nn = hbar = 1`.
///
/// The defaults fix the adiabatic ratio `r = hbar Omega / t_nn = 0.4` and put
/// the dimensionless coupling `lambda = g^2 / (4 t_nn K)` at one for `g = 1`:
/// `K ~= 0.25` and `m = K / Omega^2 = 1.5625` (the mass is stored as the exact
/// binary value and `K` is derived as `m Omega^2` so that the identity
/// `spring_k == mass * omega^2` holds bit-for-bit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    /// Number of lattice sites `L` (even, >= 4).
    pub l: usize,
    /// Nearest-neighbor hopping amplitude (energy unit).
    pub t_nn: f64,
    /// Reduced Planck constant (action unit).
    pub hbar: f64,
    /// Einstein phonon frequency `Omega`.
    pub omega: f64,
    /// Oscillator mass `m`.
    pub mass: f64,
    /// Spring constant `K = m Omega^2`.
    pub spring_k: f64,
    /// Electron-phonon coupling `g` (changed abruptly by a quench).
    pub g: f64,
    /// Electron number; half filling, `L / 2`.
    pub n_electrons: usize,
}

impl PhysicsParams {
    /// Parameters for an `l`-site chain at coupling `g` with the default
    /// normalization described on the type.
    pub fn new(l: usize, g: f64) -> Result<Self, DynamicsError> {
        if l < MIN_LATTICE || l % 2 != 0 {
            return Err(DynamicsError::BadLattice(l));
        }
        if !g.is_finite() {
            return Err(DynamicsError::NonFinite("coupling g"));
        }
        let t_nn = 1.0;
        let hbar = 1.0;
        let omega = 0.4 * t_nn / hbar;
        let mass = 1.5625;
        Ok(Self {
            l,
            t_nn,
            hbar,
            omega,
            mass,
            spring_k: mass * omega * omega,
            g,
            n_electrons: l / 2,
        })
    }

    /// Same chain with a different coupling; this is what a quench does.
    pub fn with_g(self, g: f64) -> Self {
        Self { g, ..self }
    }

    /// Adiabatic ratio `r = hbar Omega / t_nn`.
    pub fn adiabatic_ratio(&self) -> f64 {
        self.hbar * self.omega / self.t_nn
    }

    /// Dimensionless electron-phonon coupling `lambda = g^2 / (W K)` with
    /// bandwidth `W = 4 t_nn`.
    pub fn dimensionless_coupling(&self) -> f64 {
        self.g * self.g / (4.0 * self.t_nn * self.spring_k)
    }

    /// Displacement scale `g / K`: the classical equilibrium displacement of
    /// an oscillator below a fully occupied site.
    pub fn displacement_scale(&self) -> f64 {
        self.g / self.spring_k
    }
}

/// Mean-field Hamiltonian `H({Q})` for the given displacements: periodic
/// nearest-neighbor hopping `-t_nn` plus the site-diagonal coupling
/// `-g Q_i`.
pub fn build_hamiltonian(params: &PhysicsParams, q: &Array1<f64>) -> Array2<Complex64> {
    let l = params.l;
    assert_eq!(q.len(), l, "displacement vector length must equal L");
    let mut h = Array2::<Complex64>::zeros((l, l));
    for i in 0..l {
        let right = (i + 1) % l;
        h[[i, right]] = Complex64::new(-params.t_nn, 0.0);
        h[[right, i]] = Complex64::new(-params.t_nn, 0.0);
        h[[i, i]] = Complex64::new(-params.g * q[i], 0.0);
    }
    h
}

/// Total conserved energy: `Re tr(H({Q}) rho) + sum_i P_i^2 / 2m + sum_i K Q_i^2 / 2`.
///
/// The electronic trace uses the same Hamiltonian that generates the motion,
/// so this quantity is exactly conserved by the flow at fixed `g`.
pub fn total_energy(state: &LatticeState, params: &PhysicsParams) -> f64 {
    let l = params.l;
    let rho = &state.rho;
    let mut electronic = 0.0;
    for i in 0..l {
        let right = (i + 1) % l;
        let left = (i + l - 1) % l;
        // Row i of H contributes H_ij rho_ji for j in {i-1, i, i+1}.
        electronic += -params.t_nn * (rho[[right, i]].re + rho[[left, i]].re)
            - params.g * state.q[i] * rho[[i, i]].re;
    }
    let kinetic: f64 = state.p.iter().map(|p| p * p).sum::<f64>() / (2.0 * params.mass);
    let elastic: f64 =
        0.5 * params.spring_k * state.q.iter().map(|q| q * q).sum::<f64>();
    electronic + kinetic + elastic
}
