//! Cavity states, target states and the functionals evaluated on them.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::basis_vector;
use crate::matrix::ComplexMatrix;

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-6;
/// Population in the two highest Fock levels above which truncation error
/// becomes visible.
pub const LEAKAGE_WARN: f64 = 1e-3;

/// Hermitian, unit-trace, positive semidefinite `N x N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(ComplexMatrix);

impl DensityMatrix {
    /// Validates all density-matrix invariants.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if m.dim() < 2 {
            return Err(Error::CutoffTooSmall(m.dim()));
        }
        if !m.is_finite() {
            return Err(Error::InvalidState("non-finite entries".into()));
        }
        let defect = m.hermiticity_defect();
        if defect > HERMITICITY_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (defect {defect:.2e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min_ev = m.hermitian_eigenvalues()[0];
        if min_ev < -POSITIVITY_TOL {
            return Err(Error::InvalidState(format!("smallest eigenvalue {min_ev:.3e}")));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix whose invariants the caller has already established.
    pub(crate) fn from_trusted(m: ComplexMatrix) -> Self {
        Self(m)
    }

    /// `|n><n|`
    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::CutoffTooSmall(dim));
        }
        let v = basis_vector(n, dim)?;
        Ok(Self(ComplexMatrix::outer(&v, &v)))
    }

    /// `|psi><psi|` for a normalized copy of `psi`.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        if psi.len() < 2 {
            return Err(Error::CutoffTooSmall(psi.len()));
        }
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidState("state vector has zero norm".into()));
        }
        let v: Vec<C64> = psi.iter().map(|z| z / norm).collect();
        Ok(Self(ComplexMatrix::outer(&v, &v)))
    }

    /// Mixture `sum_n w_n |n><n|` of Fock states; weights are normalized.
    pub fn fock_mixture(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || !(total > 0.0) {
            return Err(Error::InvalidState("mixture weights must be non-negative".into()));
        }
        let diag: Vec<C64> = weights.iter().map(|&w| C64::new(w / total, 0.0)).collect();
        Self::new(ComplexMatrix::from_diagonal(&diag))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    /// Fock populations `rho_nn`.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.0[(n, n)].re).collect()
    }

    /// `Tr(A rho)`
    pub fn expectation(&self, op: &ComplexMatrix) -> C64 {
        op.matmul(&self.0).trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.hermitian_eigenvalues()[0]
    }

    /// Population of the two highest Fock levels.
    pub fn leakage(&self) -> f64 {
        let n = self.dim();
        self.0[(n - 1, n - 1)].re + self.0[(n - 2, n - 2)].re
    }
}

/// True when `m` has no eigenvalue below `-tol`: a Cholesky factorization of
/// the Hermitian part of `m + tol * I` runs to completion with positive pivots.
pub fn passes_positivity(m: &ComplexMatrix, tol: f64) -> bool {
    let n = m.dim();
    let mut l = vec![C64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut d = m[(j, j)].re + tol;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        if !(d > 0.0) {
            return false;
        }
        let pivot = d.sqrt();
        l[j * n + j] = C64::new(pivot, 0.0);
        for i in j + 1..n {
            let mut s = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / pivot;
        }
    }
    true
}

/// One `(n, amplitude)` entry of a target superposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetComponent {
    pub n: usize,
    #[serde(default = "one")]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

fn one() -> f64 {
    1.0
}

/// Pure target state built from Fock components.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    components: Vec<(usize, C64)>,
    vector: Vec<C64>,
}

impl TargetSpec {
    pub fn new(components: &[(usize, C64)], dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::CutoffTooSmall(dim));
        }
        if components.is_empty() {
            return Err(Error::InvalidTarget("no components".into()));
        }
        let mut vector = vec![C64::new(0.0, 0.0); dim];
        for &(n, amp) in components {
            if n >= dim {
                return Err(Error::InvalidTarget(format!("Fock index {n} >= cutoff {dim}")));
            }
            vector[n] += amp;
        }
        let norm = vector.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidTarget("amplitudes have zero norm".into()));
        }
        vector.iter_mut().for_each(|z| *z /= norm);
        let components = components.iter().map(|&(n, a)| (n, a / norm)).collect();
        Ok(Self { components, vector })
    }

    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        Self::new(&[(n, C64::new(1.0, 0.0))], dim)
    }

    pub fn from_components(components: &[TargetComponent], dim: usize) -> Result<Self> {
        let comps: Vec<(usize, C64)> = components.iter().map(|c| (c.n, C64::new(c.re, c.im))).collect();
        Self::new(&comps, dim)
    }

    pub fn components(&self) -> &[(usize, C64)] {
        &self.components
    }

    pub fn vector(&self) -> &[C64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn density_matrix(&self) -> DensityMatrix {
        DensityMatrix::from_trusted(ComplexMatrix::outer(&self.vector, &self.vector))
    }
}

/// `<psi|rho|psi>` for the pure target `psi`, clamped to `[0, 1]`.
pub fn fidelity(rho: &DensityMatrix, target: &TargetSpec) -> f64 {
    fidelity_matrix(rho.matrix(), target.vector())
}

pub(crate) fn fidelity_matrix(rho: &ComplexMatrix, psi: &[C64]) -> f64 {
    assert_eq!(rho.dim(), psi.len(), "state and target dimensions differ");
    let rpsi = rho.apply(psi);
    let f: C64 = psi.iter().zip(&rpsi).map(|(a, b)| a.conj() * b).sum();
    f.re.clamp(0.0, 1.0)
}

/// `Tr(rho^2)`
pub fn purity(rho: &DensityMatrix) -> f64 {
    // Tr(rho^2) = sum_ij |rho_ij|^2 for Hermitian rho
    rho.matrix().as_slice().iter().map(|z| z.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn fidelity_examples() {
        let vac = DensityMatrix::fock(0, 4).unwrap();
        assert_eq!(fidelity(&vac, &TargetSpec::fock(0, 4).unwrap()), 1.0);
        assert_eq!(fidelity(&vac, &TargetSpec::fock(1, 4).unwrap()), 0.0);
        let mix = DensityMatrix::fock_mixture(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(fidelity(&mix, &TargetSpec::fock(0, 4).unwrap()), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn purity_examples() {
        assert_abs_diff_eq!(purity(&DensityMatrix::fock(2, 5).unwrap()), 1.0, epsilon = 1e-15);
        let mix = DensityMatrix::fock_mixture(&[0.5, 0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(purity(&mix), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn target_is_normalized() {
        let t = TargetSpec::new(&[(1, c(1.0, 0.0)), (3, c(0.0, 1.0))], 6).unwrap();
        let norm: f64 = t.vector().iter().map(|z| z.norm_sqr()).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.vector()[1].re, 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(TargetSpec::fock(6, 6).is_err());
        assert!(TargetSpec::new(&[], 6).is_err());
    }

    #[test]
    fn density_validation_rejects_bad_input() {
        let not_unit = ComplexMatrix::from_diagonal(&[c(0.7, 0.0), c(0.7, 0.0)]);
        assert!(DensityMatrix::new(not_unit).is_err());
        let negative = ComplexMatrix::from_diagonal(&[c(1.1, 0.0), c(-0.1, 0.0)]);
        assert!(DensityMatrix::new(negative).is_err());
        let mut non_herm = ComplexMatrix::from_diagonal(&[c(0.5, 0.0), c(0.5, 0.0)]);
        non_herm[(0, 1)] = c(0.1, 0.0);
        assert!(DensityMatrix::new(non_herm).is_err());
    }

    #[test]
    fn positivity_check_threshold() {
        let ok = ComplexMatrix::from_diagonal(&[c(1.0 + 5e-7, 0.0), c(-5e-7, 0.0)]);
        assert!(passes_positivity(&ok, POSITIVITY_TOL));
        let bad = ComplexMatrix::from_diagonal(&[c(1.0 + 2e-6, 0.0), c(-2e-6, 0.0)]);
        assert!(!passes_positivity(&bad, POSITIVITY_TOL));
    }

    #[test]
    fn leakage_reads_top_levels() {
        let rho = DensityMatrix::fock_mixture(&[0.9, 0.0, 0.05, 0.05]).unwrap();
        assert_abs_diff_eq!(rho.leakage(), 0.1, epsilon = 1e-15);
    }

    fn arb_state(dim: usize) -> impl Strategy<Value = DensityMatrix> {
        // mixture of two random pure states
        let comp = -1.0f64..1.0;
        (
            proptest::collection::vec((comp.clone(), comp.clone()), dim),
            proptest::collection::vec((comp.clone(), comp), dim),
            0.0f64..1.0,
        )
            .prop_filter_map("non-zero vectors", move |(u, v, w)| {
                let u: Vec<C64> = u.into_iter().map(|(a, b)| c(a, b)).collect();
                let v: Vec<C64> = v.into_iter().map(|(a, b)| c(a, b)).collect();
                let pu = DensityMatrix::pure(&u).ok()?;
                let pv = DensityMatrix::pure(&v).ok()?;
                let mut m = pu.matrix().scale_real(w);
                m.axpy(c(1.0 - w, 0.0), pv.matrix());
                m.hermitize();
                DensityMatrix::new(m).ok()
            })
    }

    proptest! {
        #[test]
        fn fidelity_bounded_and_linear(
            a in arb_state(4),
            b in arb_state(4),
            w in 0.0f64..1.0,
            amps in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4),
        ) {
            let comps: Vec<(usize, C64)> = amps.iter().enumerate().map(|(n, &(r, i))| (n, c(r, i))).collect();
            prop_assume!(comps.iter().map(|(_, z)| z.norm_sqr()).sum::<f64>() > 1e-3);
            let t = TargetSpec::new(&comps, 4).unwrap();
            let fa = fidelity(&a, &t);
            let fb = fidelity(&b, &t);
            prop_assert!((0.0..=1.0).contains(&fa));
            let mut m = a.matrix().scale_real(w);
            m.axpy(c(1.0 - w, 0.0), b.matrix());
            let mixed = DensityMatrix::new(m).unwrap();
            prop_assert!((fidelity(&mixed, &t) - (w * fa + (1.0 - w) * fb)).abs() < 1e-12);
        }

        #[test]
        fn purity_at_most_one(a in arb_state(5)) {
            let p = purity(&a);
            prop_assert!(p <= 1.0 + 1e-12 && p > 0.0);
        }
    }
}
