//! Ladder operators, projectors and displacement matrices on the truncated
//! Fock space `span{|0>, ..., |N-1>}`.

use std::sync::OnceLock;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::matrix::ComplexMatrix;

fn check_cutoff(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::CutoffTooSmall(dim));
    }
    Ok(())
}

/// Annihilation operator: `<n-1|a|n> = sqrt(n)`.
pub fn annihilation_op(dim: usize) -> Result<ComplexMatrix> {
    check_cutoff(dim)?;
    let mut a = ComplexMatrix::zeros(dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(a)
}

pub fn creation_op(dim: usize) -> Result<ComplexMatrix> {
    Ok(annihilation_op(dim)?.adjoint())
}

pub fn number_op(dim: usize) -> Result<ComplexMatrix> {
    check_cutoff(dim)?;
    let diag: Vec<C64> = (0..dim).map(|n| C64::new(n as f64, 0.0)).collect();
    Ok(ComplexMatrix::from_diagonal(&diag))
}

/// `|n><n|`
pub fn projector(n: usize, dim: usize) -> Result<ComplexMatrix> {
    check_cutoff(dim)?;
    if n >= dim {
        return Err(Error::FockIndexOutOfRange { index: n, dim });
    }
    let mut p = ComplexMatrix::zeros(dim);
    p[(n, n)] = C64::new(1.0, 0.0);
    Ok(p)
}

/// Parity operator `diag((-1)^n)`.
pub fn parity_op(dim: usize) -> Result<ComplexMatrix> {
    check_cutoff(dim)?;
    let diag: Vec<C64> = (0..dim)
        .map(|n| C64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0))
        .collect();
    Ok(ComplexMatrix::from_diagonal(&diag))
}

/// Fock basis vector `|n>` of length `dim`.
pub fn basis_vector(n: usize, dim: usize) -> Result<Vec<C64>> {
    if n >= dim {
        return Err(Error::FockIndexOutOfRange { index: n, dim });
    }
    let mut v = vec![C64::new(0.0, 0.0); dim];
    v[n] = C64::new(1.0, 0.0);
    Ok(v)
}

const LN_FACTORIAL_TABLE: usize = 1024;

/// `ln(n!)`, tabulated by direct accumulation for small `n`.
pub fn ln_factorial(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACTORIAL_TABLE);
        let mut acc = 0.0;
        t.push(0.0);
        for k in 1..LN_FACTORIAL_TABLE {
            acc += (k as f64).ln();
            t.push(acc);
        }
        t
    });
    match table.get(n) {
        Some(&v) => v,
        None => table[LN_FACTORIAL_TABLE - 1] + (LN_FACTORIAL_TABLE..=n).map(|k| (k as f64).ln()).sum::<f64>(),
    }
}

/// Largest normalized series term tolerated before the alternating sum is
/// considered cancellation-limited (absolute error ~ 1e-16 * term).
const SERIES_TERM_LIMIT: f64 = 1e3;

/// Real part of the displacement matrix element with the phase stripped:
/// `<m|D(r)|n>` for real `r >= 0`, via the finite double sum over `j`
/// collapsed onto `k = m - n + j`. Returns `None` when the alternating sum
/// would lose too much precision.
fn element_series_real(m: usize, n: usize, r: f64) -> Option<f64> {
    let x_ln = r.ln();
    let base = -0.5 * r * r + 0.5 * (ln_factorial(m) + ln_factorial(n));
    let j_lo = n.saturating_sub(m);
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut max_term: f64 = 0.0;
    for j in j_lo..=n {
        let k = m + j - n;
        let power = (k + j) as f64;
        let ln_mag = base + power * x_ln - ln_factorial(k) - ln_factorial(j) - ln_factorial(n - j);
        let mag = ln_mag.exp();
        max_term = max_term.max(mag);
        let term = if j % 2 == 0 { mag } else { -mag };
        // Neumaier summation
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    if max_term > SERIES_TERM_LIMIT {
        None
    } else {
        Some(sum + comp)
    }
}

/// Generalized Laguerre polynomial `L_deg^{(order)}(x)` by the three-term
/// recurrence in the degree.
pub fn laguerre(deg: usize, order: usize, x: f64) -> f64 {
    let k = order as f64;
    let mut prev = 1.0;
    if deg == 0 {
        return prev;
    }
    let mut cur = 1.0 + k - x;
    for i in 1..deg {
        let i = i as f64;
        let next = ((2.0 * i + 1.0 + k - x) * cur - (i + k) * prev) / (i + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Same quantity as [`element_series_real`] via the Laguerre representation
/// `sqrt(n!/m!) r^(m-n) e^{-r^2/2} L_n^{(m-n)}(r^2)` (for `m >= n`, with the
/// sign `(-1)^(n-m)` for `m < n`), evaluated in the log domain.
fn element_laguerre_real(m: usize, n: usize, r: f64) -> f64 {
    let (lo, hi) = if m >= n { (n, m) } else { (m, n) };
    let order = hi - lo;
    let x = r * r;
    let lag = laguerre(lo, order, x);
    if lag == 0.0 {
        return 0.0;
    }
    let ln_pref = 0.5 * (ln_factorial(lo) - ln_factorial(hi)) + order as f64 * r.ln() - 0.5 * x;
    let val = lag.signum() * (lag.abs().ln() + ln_pref).exp();
    if m < n && order % 2 == 1 {
        -val
    } else {
        val
    }
}

/// Exact (untruncated) matrix element `<m|D(alpha)|n>`.
///
/// Evaluated from the finite closed-form sum with log-factorial term
/// magnitudes; when the alternating sum is cancellation-limited the
/// equivalent Laguerre form is used instead.
pub fn displacement_element(m: usize, n: usize, alpha: C64) -> C64 {
    let r = alpha.norm();
    if r == 0.0 {
        return if m == n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
    }
    let phi = alpha.arg();
    let real = element_series_real(m, n, r).unwrap_or_else(|| element_laguerre_real(m, n, r));
    // alpha^(m-n+j) (-alpha*)^j carries the phase e^{i phi (m-n)} and the sign (-1)^j
    C64::from_polar(1.0, phi * (m as f64 - n as f64)) * real
}

/// `D(alpha)` with entries `<m|D(alpha)|n>` of the infinite-dimensional
/// operator, truncated to the first `dim` rows and columns.
pub fn displacement_series(alpha: C64, dim: usize) -> Result<ComplexMatrix> {
    check_cutoff(dim)?;
    Ok(ComplexMatrix::from_fn(dim, |m, n| displacement_element(m, n, alpha)))
}

/// `exp(alpha a^dagger - alpha^* a)` of the truncated generator, via the
/// Padé scaling-and-squaring exponential.
pub fn displacement_exp_oracle(alpha: C64, dim: usize) -> Result<ComplexMatrix> {
    let a = annihilation_op(dim)?;
    let ad = a.adjoint();
    let mut gen = ad.scale(alpha);
    gen.axpy(-alpha.conj(), &a);
    Ok(ComplexMatrix::from_nalgebra(&gen.to_nalgebra().exp()))
}
