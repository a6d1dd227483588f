//! Hermitian eigendecomposition bridge and small matrix helpers.
//!
//! The physics layer stores matrices as `ndarray` arrays; eigendecompositions
//! go through nalgebra's pure-Rust `symmetric_eigen`, which handles complex
//! Hermitian input.  Results are returned sorted by ascending eigenvalue with
//! a deterministic index tie-break so repeated runs are bitwise identical.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;

/// Eigendecomposition of a Hermitian matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvector `k` stored in column `k`.  The input is assumed Hermitian; only
/// debug builds assert it.
pub(crate) fn eigh(h: &Array2<Complex64>) -> (Vec<f64>, Array2<Complex64>) {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "eigh needs a square matrix");
    debug_assert!(
        hermiticity_deviation(h) < 1e-9,
        "eigh input is not Hermitian (deviation {})",
        hermiticity_deviation(h)
    );
    let m = DMatrix::from_fn(n, n, |r, c| h[[r, c]]);
    let eig = m.symmetric_eigen();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("non-finite eigenvalue")
            .then(a.cmp(&b))
    });

    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = Array2::<Complex64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = eig.eigenvectors[(r, src)];
        }
    }
    (vals, vecs)
}

/// Sorted eigenvalues of a Hermitian matrix.
pub(crate) fn eigvalsh(h: &Array2<Complex64>) -> Vec<f64> {
    eigh(h).0
}

/// Largest entrywise deviation from Hermiticity, `max_ij |m_ij - conj(m_ji)|`.
pub(crate) fn hermiticity_deviation(m: &Array2<Complex64>) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    dev
}

/// In-place Hermitian symmetrization `m <- (m + m^H) / 2`; the diagonal
/// becomes exactly real.
pub(crate) fn symmetrize(m: &mut Array2<Complex64>) {
    let n = m.nrows();
    for i in 0..n {
        m[[i, i]] = Complex64::new(m[[i, i]].re, 0.0);
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]].conj());
            m[[i, j]] = avg;
            m[[j, i]] = avg.conj();
        }
    }
}
