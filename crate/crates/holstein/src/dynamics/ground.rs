//! Initial-state preparation: free Fermi sea and the self-consistent
//! charge-density-wave ground state.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use super::linalg;
use super::state::LatticeState;
use super::{build_hamiltonian, DynamicsError, PhysicsParams};

/// Eigenvalues closer than this are treated as one degenerate shell when
/// filling.
const SHELL_TOL: f64 = 1e-9;
/// Convergence threshold on `max_i |Q_new_i - Q_i|` for the self-consistency
/// loop.
const SCF_TOL: f64 = 1e-10;
/// Linear-mixing factor of the self-consistency loop.
const SCF_MIXING: f64 = 0.5;
/// Iteration cap of the self-consistency loop.
const SCF_MAX_ITER: usize = 10_000;
/// Relative amplitude of the staggered seed displacement.
const SEED_AMPLITUDE: f64 = 0.1;

/// Zero-temperature occupations for `n_fill` electrons over the sorted
/// eigenvalues `vals`: full shells get weight 1 and a partially filled
/// degenerate shell at the Fermi level shares its remaining electrons
/// equally.  This keeps the state invariant under every lattice symmetry that
/// permutes the shell.
fn shell_occupations(vals: &[f64], n_fill: usize) -> Vec<f64> {
    let mut occ = vec![0.0; vals.len()];
    let mut remaining = n_fill as f64;
    let mut start = 0;
    while start < vals.len() && remaining > 0.0 {
        let mut end = start + 1;
        while end < vals.len() && (vals[end] - vals[start]).abs() <= SHELL_TOL {
            end += 1;
        }
        let size = (end - start) as f64;
        let weight = (remaining / size).min(1.0);
        for slot in occ.iter_mut().take(end).skip(start) {
            *slot = weight;
        }
        remaining -= weight * size;
        start = end;
    }
    occ
}

/// `rho = V diag(occ) V^H`, skipping empty orbitals.
fn density_from_orbitals(
    vecs: &Array2<Complex64>,
    occ: &[f64],
) -> Array2<Complex64> {
    let l = vecs.nrows();
    let mut rho = Array2::<Complex64>::zeros((l, l));
    for (k, &w) in occ.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for i in 0..l {
            let vi = vecs[[i, k]] * w;
            for j in 0..l {
                rho[[i, j]] += vi * vecs[[j, k]].conj();
            }
        }
    }
    linalg::symmetrize(&mut rho);
    rho
}

/// Site densities `n_i = sum_k occ_k |v_ik|^2` without forming `rho`.
fn site_densities(vecs: &Array2<Complex64>, occ: &[f64]) -> Array1<f64> {
    let l = vecs.nrows();
    let mut n = Array1::<f64>::zeros(l);
    for (k, &w) in occ.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for i in 0..l {
            n[i] += w * vecs[[i, k]].norm_sqr();
        }
    }
    n
}

/// Ground state of the decoupled (`g = 0`) chain at half filling: the free
/// Fermi sea with `Q = P = 0`.
///
/// For `L` divisible by 4 the Fermi level falls on a twofold-degenerate
/// momentum shell, which is occupied with weight 1/2 per state; the natural
/// occupations are therefore drawn from `{0, 1/2, 1}` and the state is
/// uniform.
pub fn free_fermi_ground_state(params: &PhysicsParams) -> LatticeState {
    let q = Array1::<f64>::zeros(params.l);
    let h = build_hamiltonian(&params.with_g(0.0), &q);
    let (vals, vecs) = linalg::eigh(&h);
    let occ = shell_occupations(&vals, params.n_electrons);
    let rho = density_from_orbitals(&vecs, &occ);
    LatticeState::from_parts_unchecked(q, Array1::zeros(params.l), rho, 0.0)
}

/// Self-consistent charge-density-wave ground state at coupling `params.g`.
///
/// Fixed-point iteration of `Q_i <- g rho_ii({Q}) / K` from a staggered seed
/// `0.1 (-1)^i g / K`, with linear mixing 0.5, convergence threshold `1e-10`
/// on the displacement update, and at most `10^4` iterations.  Returns the
/// converged state with `P = 0` at time zero; the density matrix is the
/// zero-temperature projector of the converged mean-field Hamiltonian.
pub fn cdw_ground_state(params: &PhysicsParams) -> Result<LatticeState, DynamicsError> {
    let l = params.l;
    let scale = SEED_AMPLITUDE * params.displacement_scale();
    let mut q = Array1::from_iter((0..l).map(|i| if i % 2 == 0 { scale } else { -scale }));

    let mut residual = f64::INFINITY;
    for _ in 0..SCF_MAX_ITER {
        let h = build_hamiltonian(params, &q);
        let (vals, vecs) = linalg::eigh(&h);
        let occ = shell_occupations(&vals, params.n_electrons);
        let n = site_densities(&vecs, &occ);

        residual = 0.0;
        for i in 0..l {
            let target = params.g * n[i] / params.spring_k;
            residual = residual.max((target - q[i]).abs());
            q[i] += SCF_MIXING * (target - q[i]);
        }
        if residual <= SCF_TOL {
            let h = build_hamiltonian(params, &q);
            let (vals, vecs) = linalg::eigh(&h);
            let occ = shell_occupations(&vals, params.n_electrons);
            let rho = density_from_orbitals(&vecs, &occ);
            let state = LatticeState::from_parts_unchecked(q, Array1::zeros(l), rho, 0.0);
            state.validate(params.n_electrons)?;
            return Ok(state);
        }
    }
    Err(DynamicsError::Convergence {
        residual,
        iterations: SCF_MAX_ITER,
    })
}

/// `cdw_ground_state` with a caller-chosen seed pattern, used to probe the
/// degenerate symmetry partner (e.g. an inverted staggered seed).
pub fn cdw_ground_state_seeded(
    params: &PhysicsParams,
    seed_q: &Array1<f64>,
) -> Result<LatticeState, DynamicsError> {
    let l = params.l;
    if seed_q.len() != l {
        return Err(DynamicsError::ShapeMismatch(format!(
            "seed length {} vs L = {}",
            seed_q.len(),
            l
        )));
    }
    let mut q = seed_q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..SCF_MAX_ITER {
        let h = build_hamiltonian(params, &q);
        let (vals, vecs) = linalg::eigh(&h);
        let occ = shell_occupations(&vals, params.n_electrons);
        let n = site_densities(&vecs, &occ);
        residual = 0.0;
        for i in 0..l {
            let target = params.g * n[i] / params.spring_k;
            residual = residual.max((target - q[i]).abs());
            q[i] += SCF_MIXING * (target - q[i]);
        }
        if residual <= SCF_TOL {
            let h = build_hamiltonian(params, &q);
            let (vals, vecs) = linalg::eigh(&h);
            let occ = shell_occupations(&vals, params.n_electrons);
            let rho = density_from_orbitals(&vecs, &occ);
            let state = LatticeState::from_parts_unchecked(q, Array1::zeros(l), rho, 0.0);
            state.validate(params.n_electrons)?;
            return Ok(state);
        }
    }
    Err(DynamicsError::Convergence {
        residual,
        iterations: SCF_MAX_ITER,
    })
}
