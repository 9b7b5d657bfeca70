//! Wigner quasi-probability via the displaced parity operator.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{self, Write};

use num_complex::Complex64 as C64;

use crate::fock::displacement_element;
use crate::state::DensityMatrix;

/// Wigner values on a rectangular `(x, p)` grid; `values[i * ps.len() + j]`
/// belongs to `(xs[i], ps[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerField {
    pub xs: Vec<f64>,
    pub ps: Vec<f64>,
    pub values: Vec<f64>,
}

impl WignerField {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ps.len() + j]
    }

    /// Riemann sum of `W d^2 alpha` over the grid (uniform spacing assumed);
    /// `d^2 alpha = dx dp / 2` in the `(x + i p) / sqrt(2)` convention.
    pub fn integral(&self) -> f64 {
        let step = |v: &[f64]| if v.len() > 1 { (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64 } else { 1.0 };
        0.5 * self.values.iter().sum::<f64>() * step(&self.xs) * step(&self.ps)
    }

    /// CSV with header `x,p,w`, rows ordered by `x` then `p`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,p,w")?;
        for (i, x) in self.xs.iter().enumerate() {
            for (j, p) in self.ps.iter().enumerate() {
                writeln!(w, "{x},{p},{}", self.get(i, j))?;
            }
        }
        Ok(())
    }
}

/// `W(alpha) = (2/pi) Tr[rho D(alpha) P D(alpha)^dagger]` at
/// `alpha = (x + i p) / sqrt(2)`, with `P` the photon-number parity.
///
/// Uses `D(alpha) P D(alpha)^dagger = D(2 alpha) P`; the matrix elements of
/// `D(2 alpha)` are exact, so no truncation enters beyond that of `rho`.
/// Returns the field together with the largest imaginary residue seen.
pub fn wigner_grid_with_residue(rho: &DensityMatrix, xs: &[f64], ps: &[f64]) -> (WignerField, f64) {
    let dim = rho.dim();
    let m = rho.matrix();
    let mut values = Vec::with_capacity(xs.len() * ps.len());
    let mut residue: f64 = 0.0;
    for &x in xs {
        for &p in ps {
            let alpha = C64::new(x, p) * FRAC_1_SQRT_2;
            let two_alpha = alpha * 2.0;
            let mut acc = C64::new(0.0, 0.0);
            for col in 0..dim {
                let parity = if col % 2 == 0 { 1.0 } else { -1.0 };
                for row in 0..dim {
                    // Tr[rho D P] = sum_{row,col} rho_{col,row} D_{row,col} (-1)^col
                    acc += m[(col, row)] * displacement_element(row, col, two_alpha) * parity;
                }
            }
            let w = acc * (2.0 / PI);
            residue = residue.max(w.im.abs());
            values.push(w.re);
        }
    }
    (
        WignerField {
            xs: xs.to_vec(),
            ps: ps.to_vec(),
            values,
        },
        residue,
    )
}

pub fn wigner_grid(rho: &DensityMatrix, xs: &[f64], ps: &[f64]) -> WignerField {
    wigner_grid_with_residue(rho, xs, ps).0
}

/// `n` evenly spaced points covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
