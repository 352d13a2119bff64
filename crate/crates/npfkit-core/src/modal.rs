//! Eigendecomposition of the Jacobian into a biorthogonal modal basis,
//! linear participation factors and mode selection.
//!
//! Right eigenvectors are scaled to unit infinity norm with the
//! largest-magnitude entry made real-positive, then the left rows are taken
//! as the matrix inverse, so `Psi * Phi = I` holds by construction.
//! Eigenpairs are ordered by descending real part, then ascending imaginary
//! part, so a decomposition is deterministic for a fixed input matrix.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use faer::linalg::solvers::{DenseSolveCore, PartialPivLu};
use faer::Mat;
use num_complex::Complex64;

/// Right/left eigenvectors and eigenvalues of a diagonalizable Jacobian.
#[derive(Debug, Clone)]
pub struct ModalBasis {
    /// Right eigenvectors as columns, `n x n`.
    pub phi: DenseTensor,
    /// Left eigenvectors as rows, `n x n`, normalized so `psi * phi = I`.
    pub psi: DenseTensor,
    pub lambda: Vec<Complex64>,
    /// 1-norm condition estimate of `phi`.
    pub condition: f64,
}

/// Sorted, unique mode indices into a [`ModalBasis`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSubset {
    indices: Vec<usize>,
}

/// Mode selection criteria.
#[derive(Debug, Clone)]
pub enum ModeCriteria {
    All,
    Indices(Vec<usize>),
    /// Oscillatory modes with damping ratio below the threshold.
    DampingBelow(f64),
    /// Oscillatory modes with frequency (Hz) inside the band.
    FrequencyBand { lo_hz: f64, hi_hz: f64 },
}

impl ModeSubset {
    pub fn all(n: usize) -> Self {
        Self { indices: (0..n).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Decompose a real square matrix into a biorthogonal modal basis.
pub fn decompose(a1: &DenseTensor, condition_limit: f64) -> Result<ModalBasis> {
    let n = square_dim(a1)?;
    let a = a1
        .as_real()
        .ok_or_else(|| Error::Argument("decompose expects a real matrix".into()))?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("matrix has non-finite entries".into()));
    }
    if n == 1 {
        let lam = Complex64::new(a[0], 0.0);
        let one = vec![Complex64::new(1.0, 0.0)];
        return Ok(ModalBasis {
            phi: DenseTensor::complex(vec![1, 1], one.clone())?,
            psi: DenseTensor::complex(vec![1, 1], one)?,
            lambda: vec![lam],
            condition: 1.0,
        });
    }

    let m = Mat::<f64>::from_fn(n, n, |r, c| a[r * n + c]);
    let evd = m
        .eigen()
        .map_err(|e| Error::NotDiagonalizable(format!("eigensolver failed: {e:?}")))?;
    let s = evd.S();
    let u = evd.U();

    // deterministic eigenpair order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (s[i], s[j]);
        b.re.partial_cmp(&a.re)
            .unwrap()
            .then(a.im.partial_cmp(&b.im).unwrap())
            .then(i.cmp(&j))
    });

    let mut lambda = Vec::with_capacity(n);
    let mut phi = vec![Complex64::new(0.0, 0.0); n * n];
    for (col, &src) in order.iter().enumerate() {
        lambda.push(s[src]);
        // unit infinity norm with the largest entry real-positive
        let mut pivot = 0usize;
        let mut best = -1.0f64;
        for r in 0..n {
            let mag = u[(r, src)].norm();
            if mag > best {
                best = mag;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Err(Error::NotDiagonalizable(format!(
                "eigenvector {src} is identically zero"
            )));
        }
        let scale = u[(pivot, src)];
        for r in 0..n {
            phi[r * n + col] = u[(r, src)] / scale;
        }
    }

    let phi_mat = Mat::<Complex64>::from_fn(n, n, |r, c| phi[r * n + c]);
    let lu = PartialPivLu::new(phi_mat.as_ref());
    let inv = lu.inverse();
    let mut psi = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            psi[r * n + c] = inv[(r, c)];
        }
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotDiagonalizable(
            "eigenvector matrix is numerically singular".into(),
        ));
    }
    let condition = one_norm(&phi, n) * one_norm(&psi, n);
    if !condition.is_finite() || condition > condition_limit {
        return Err(Error::NotDiagonalizable(format!(
            "condition estimate {condition:.3e} exceeds limit {condition_limit:.3e}"
        )));
    }
    // residual check guards against silently defective spectra
    let mut a_norm = 0.0f64;
    for v in a {
        a_norm = a_norm.max(v.abs());
    }
    let mut resid = 0.0f64;
    for c in 0..n {
        for r in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                acc += a[r * n + k] * phi[k * n + c];
            }
            acc -= lambda[c] * phi[r * n + c];
            resid = resid.max(acc.norm());
        }
    }
    if resid > 1e-6 * a_norm.max(1.0) {
        return Err(Error::NotDiagonalizable(format!(
            "eigenpair residual {resid:.3e} too large; spectrum may be defective"
        )));
    }

    Ok(ModalBasis {
        phi: DenseTensor::complex(vec![n, n], phi)?,
        psi: DenseTensor::complex(vec![n, n], psi)?,
        lambda,
        condition,
    })
}

fn square_dim(m: &DenseTensor) -> Result<usize> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::Argument(format!(
            "expected a square matrix, got shape {:?}",
            m.shape()
        )));
    }
    Ok(m.shape()[0])
}

fn one_norm(m: &[Complex64], n: usize) -> f64 {
    let mut best = 0.0f64;
    for c in 0..n {
        let mut s = 0.0;
        for r in 0..n {
            s += m[r * n + c].norm();
        }
        best = best.max(s);
    }
    best
}

impl ModalBasis {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn phi_at(&self, row: usize, col: usize) -> Complex64 {
        self.phi.value_at(&[row, col])
    }

    pub fn psi_at(&self, row: usize, col: usize) -> Complex64 {
        self.psi.value_at(&[row, col])
    }
}

/// Linear participation factors: `P[k, i] = phi[k, i] * psi[i, k]`.
pub fn linear_pf(basis: &ModalBasis) -> DenseTensor {
    let n = basis.n();
    let mut p = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n {
        for i in 0..n {
            p[k * n + i] = basis.phi_at(k, i) * basis.psi_at(i, k);
        }
    }
    DenseTensor::complex(vec![n, n], p).expect("square shape")
}

/// Damping ratio of an oscillatory eigenvalue; `None` for real modes.
pub fn damping_ratio(lambda: Complex64) -> Option<f64> {
    if lambda.im == 0.0 {
        return None;
    }
    let mag = lambda.norm();
    if mag == 0.0 {
        return None;
    }
    Some(-lambda.re / mag)
}

/// Select modes by criteria; conjugate partners of complex modes are always
/// co-selected.
pub fn select_modes(basis: &ModalBasis, criteria: &ModeCriteria) -> Result<ModeSubset> {
    let n = basis.n();
    let mut picked: Vec<bool> = vec![false; n];
    match criteria {
        ModeCriteria::All => picked.iter_mut().for_each(|p| *p = true),
        ModeCriteria::Indices(idx) => {
            for &i in idx {
                if i >= n {
                    return Err(Error::Argument(format!(
                        "mode index {i} out of range for n={n}"
                    )));
                }
                picked[i] = true;
            }
        }
        ModeCriteria::DampingBelow(thr) => {
            for (i, &l) in basis.lambda.iter().enumerate() {
                if let Some(z) = damping_ratio(l) {
                    if z < *thr {
                        picked[i] = true;
                    }
                }
            }
        }
        ModeCriteria::FrequencyBand { lo_hz, hi_hz } => {
            for (i, &l) in basis.lambda.iter().enumerate() {
                let f = l.im.abs() / (2.0 * std::f64::consts::PI);
                if l.im != 0.0 && f >= *lo_hz && f <= *hi_hz {
                    picked[i] = true;
                }
            }
        }
    }
    // conjugate closure
    let initial: Vec<usize> = (0..n).filter(|&i| picked[i]).collect();
    for i in initial {
        let l = basis.lambda[i];
        if l.im != 0.0 {
            if let Some(j) = conjugate_partner(&basis.lambda, i) {
                picked[j] = true;
            }
        }
    }
    let indices: Vec<usize> = (0..n).filter(|&i| picked[i]).collect();
    if indices.is_empty() {
        return Err(Error::EmptySelection(
            "criteria matched no modes".into(),
        ));
    }
    Ok(ModeSubset { indices })
}

fn conjugate_partner(lambda: &[Complex64], i: usize) -> Option<usize> {
    let target = lambda[i].conj();
    let tol = 1e-8 * (1.0 + lambda[i].norm());
    let mut best: Option<(usize, f64)> = None;
    for (j, &l) in lambda.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = (l - target).norm();
        if d <= tol {
            match best {
                Some((_, bd)) if bd <= d => {}
                _ => best = Some((j, d)),
            }
        }
    }
    best.map(|(j, _)| j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(n: usize, vals: &[f64]) -> DenseTensor {
        DenseTensor::real(vec![n, n], vals.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_matrix_trivial_basis() {
        let a = mat(2, &[-1.0, 0.0, 0.0, -2.0]);
        let b = decompose(&a, 1e10).unwrap();
        assert_eq!(b.lambda[0], Complex64::new(-1.0, 0.0));
        assert_eq!(b.lambda[1], Complex64::new(-2.0, 0.0));
        for k in 0..2 {
            for i in 0..2 {
                let want = if k == i { 1.0 } else { 0.0 };
                assert_relative_eq!(b.phi_at(k, i).re, want, epsilon = 1e-14);
                assert_relative_eq!(b.psi_at(k, i).re, want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn companion_matrix_hand_spectrum() {
        // char poly l^2 + 3 l + 2 -> eigenvalues -1, -2
        let a = mat(2, &[0.0, 1.0, -2.0, -3.0]);
        let b = decompose(&a, 1e10).unwrap();
        assert_relative_eq!(b.lambda[0].re, -1.0, epsilon = 1e-12);
        assert_relative_eq!(b.lambda[1].re, -2.0, epsilon = 1e-12);
        // psi * phi = I within 1e-12
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..2 {
                    acc += b.psi_at(r, k) * b.phi_at(k, c);
                }
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((acc - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn defective_jordan_block_rejected() {
        let a = mat(2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            decompose(&a, 1e10),
            Err(Error::NotDiagonalizable(_))
        ));
    }

    #[test]
    fn linear_pf_identity_for_diagonal() {
        let a = mat(3, &[-1.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, -3.0]);
        let b = decompose(&a, 1e10).unwrap();
        let p = linear_pf(&b);
        for k in 0..3 {
            for i in 0..3 {
                let want = if k == i { 1.0 } else { 0.0 };
                assert!((p.value_at(&[k, i]) - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_pf_columns_sum_to_one() {
        let a = mat(2, &[0.0, 1.0, -2.0, -3.0]);
        let b = decompose(&a, 1e10).unwrap();
        let p = linear_pf(&b);
        for i in 0..2 {
            let s = p.value_at(&[0, i]) + p.value_at(&[1, i]);
            assert!((s - 1.0).norm() < 1e-10);
        }
    }

    fn random_hurwitz(n: usize, seed: u64) -> DenseTensor {
        let sys = crate::system::gen_random_poly(n, 1, 1.0, seed, 0.4).unwrap();
        let model = crate::system::SystemModel::Polynomial(sys);
        let eq = crate::system::find_equilibrium(&model, 1e-9).unwrap();
        crate::system::linear_part(&model, &eq).unwrap()
    }

    #[test]
    fn random_basis_invariants() {
        let a = random_hurwitz(5, 11);
        let b = decompose(&a, 1e10).unwrap();
        let n = 5;
        // biorthogonality both ways
        for r in 0..n {
            for c in 0..n {
                let mut pf = Complex64::new(0.0, 0.0);
                let mut fp = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    pf += b.psi_at(r, k) * b.phi_at(k, c);
                    fp += b.phi_at(r, k) * b.psi_at(k, c);
                }
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((pf - want).norm() < 1e-10);
                assert!((fp - want).norm() < 1e-10);
            }
        }
        // A phi = phi diag(lambda)
        let av = a.as_real().unwrap();
        for c in 0..n {
            for r in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    acc += av[r * n + k] * b.phi_at(k, c);
                }
                let want = b.lambda[c] * b.phi_at(r, c);
                assert!((acc - want).norm() < 1e-8 * (1.0 + want.norm()));
            }
        }
        // linear PF against the direct per-entry loop
        let p = linear_pf(&b);
        for k in 0..n {
            for i in 0..n {
                let want = b.phi_at(k, i) * b.psi_at(i, k);
                assert_eq!(p.value_at(&[k, i]), want);
            }
        }
        // column sums are 1
        for i in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..n {
                s += p.value_at(&[k, i]);
            }
            assert!((s - 1.0).norm() < 1e-10);
        }
    }

    #[test]
    fn decompose_is_deterministic() {
        let a = random_hurwitz(6, 3);
        let b1 = decompose(&a, 1e10).unwrap();
        let b2 = decompose(&a, 1e10).unwrap();
        assert_eq!(b1.lambda, b2.lambda);
        assert_eq!(b1.phi.to_complex_vec(), b2.phi.to_complex_vec());
        assert_eq!(b1.psi.to_complex_vec(), b2.psi.to_complex_vec());
    }

    #[test]
    fn conjugate_pairs_have_conjugate_pf() {
        // oscillatory 2x2 block plus a real mode
        let a = mat(
            3,
            &[-0.2, 2.0, 0.1, -2.0, -0.2, 0.0, 0.0, 0.3, -1.0],
        );
        let b = decompose(&a, 1e10).unwrap();
        let p = linear_pf(&b);
        // find the conjugate pair
        let mut pair = None;
        for i in 0..3 {
            if b.lambda[i].im != 0.0 {
                let j = conjugate_partner(&b.lambda, i).unwrap();
                pair = Some((i, j));
                break;
            }
        }
        let (i, j) = pair.expect("complex pair exists");
        assert!((b.lambda[i] - b.lambda[j].conj()).norm() < 1e-10);
        for k in 0..3 {
            let d = (p.value_at(&[k, i]) - p.value_at(&[k, j]).conj()).norm();
            assert!(d < 1e-10, "pf conjugate mismatch at state {k}: {d}");
        }
    }

    #[test]
    fn select_all_and_indices() {
        let a = random_hurwitz(4, 5);
        let b = decompose(&a, 1e10).unwrap();
        let all = select_modes(&b, &ModeCriteria::All).unwrap();
        assert_eq!(all.indices(), &[0, 1, 2, 3]);
        let one = select_modes(&b, &ModeCriteria::Indices(vec![2])).unwrap();
        assert!(one.indices().contains(&2));
    }

    #[test]
    fn damping_threshold_none_matches_is_error() {
        let a = mat(2, &[-1.0, 0.0, 0.0, -2.0]);
        let b = decompose(&a, 1e10).unwrap();
        // real modes only: no oscillatory mode can violate any threshold
        assert!(matches!(
            select_modes(&b, &ModeCriteria::DampingBelow(0.5)),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn conjugate_closure_on_index_selection() {
        let a = mat(
            3,
            &[-0.2, 2.0, 0.1, -2.0, -0.2, 0.0, 0.0, 0.3, -1.0],
        );
        let b = decompose(&a, 1e10).unwrap();
        let i = (0..3).find(|&i| b.lambda[i].im != 0.0).unwrap();
        let sel = select_modes(&b, &ModeCriteria::Indices(vec![i])).unwrap();
        assert_eq!(sel.len(), 2);
        let j = conjugate_partner(&b.lambda, i).unwrap();
        assert!(sel.indices().contains(&i) && sel.indices().contains(&j));
    }
}
