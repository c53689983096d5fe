//! Dense complex linear algebra shared by the beamformer syntheses.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<Complex64>`. The SVD is a one-sided Jacobi iteration,
//! which keeps full relative accuracy on rank-deficient inputs; singular
//! values come out in descending order.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

pub type ComplexMatrix = DMatrix<Complex64>;

/// Relative cutoff below which singular values count as zero.
pub const RANK_CUTOFF: f64 = 1e-12;

const SVD_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize },
    #[error("empty {rows}x{cols} matrix")]
    Empty { rows: usize, cols: usize },
    #[error("non-finite entry in a {rows}x{cols} matrix")]
    NonFinite { rows: usize, cols: usize },
    #[error("row mismatch: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
}

/// Thin singular value decomposition `A = U diag(s) V^H`.
///
/// `u` is `rows x r`, `v` is `cols x r` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: ComplexMatrix,
    pub s: Vec<f64>,
    pub v: ComplexMatrix,
}

impl Svd {
    /// Number of singular values above the relative rank cutoff.
    pub fn rank(&self) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > RANK_CUTOFF * top).count()
    }
}

pub fn is_finite(a: &ComplexMatrix) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

fn check_input(a: &ComplexMatrix) -> Result<(), NumericsError> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(NumericsError::Empty { rows, cols });
    }
    if !is_finite(a) {
        return Err(NumericsError::NonFinite { rows, cols });
    }
    Ok(())
}

pub fn svd(a: &ComplexMatrix) -> Result<Svd, NumericsError> {
    check_input(a)?;
    let (rows, cols) = a.shape();
    if rows < cols {
        // A^H = U S V^H  =>  A = V S U^H
        let t = tall_svd(a.adjoint())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    tall_svd(a.clone())
}

fn tall_svd(a: ComplexMatrix) -> Result<Svd, NumericsError> {
    let (rows, cols) = a.shape();
    if rows <= 2 * cols {
        return jacobi_svd(a);
    }
    // A = Q R; the SVD of the small R carries over with U = Q U_R
    let qr = a.qr();
    let inner = jacobi_svd(qr.r())?;
    Ok(Svd {
        u: qr.q() * inner.u,
        s: inner.s,
        v: inner.v,
    })
}

/// One-sided (Hestenes) Jacobi on a tall matrix: rotate column pairs of
/// `w = A V` until all are mutually orthogonal, then read off `s` as the
/// column norms.
fn jacobi_svd(mut w: ComplexMatrix) -> Result<Svd, NumericsError> {
    let (rows, cols) = w.shape();
    let mut v = ComplexMatrix::identity(cols, cols);
    let mut sq: Vec<f64> = (0..cols).map(|j| w.column(j).norm_squared()).collect();
    // pairs of columns this far below the matrix norm are already zero to working precision
    let negligible = (f64::EPSILON * f64::EPSILON) * sq.iter().sum::<f64>() * 1e-8;
    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in (p + 1)..cols {
                let gamma = {
                    let ws = w.as_slice();
                    let (cp, cq) = (&ws[p * rows..(p + 1) * rows], &ws[q * rows..(q + 1) * rows]);
                    cp.iter().zip(cq).fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y)
                };
                let (alpha, beta) = (sq[p], sq[q]);
                let g = gamma.norm();
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() || alpha.max(beta) <= negligible {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s, phase);
                rotate_pair(&mut v, p, q, c, s, phase);
                sq[p] = w.column(p).norm_squared();
                sq[q] = w.column(q).norm_squared();
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(NumericsError::SvdNonConvergence { rows, cols });
    }

    let norms: Vec<f64> = (0..cols).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let top = s[0];

    let mut u = ComplexMatrix::zeros(rows, cols);
    let mut filled = 0;
    for (c, &i) in order.iter().enumerate() {
        if s[c] > 0.0 && s[c] > f64::EPSILON * top * rows as f64 {
            let col = w.column(i) / Complex64::new(s[c], 0.0);
            u.set_column(c, &col);
            filled += 1;
        } else {
            s[c] = 0.0;
        }
    }
    complete_orthonormal(&mut u, filled);
    let v_sorted = ComplexMatrix::from_fn(cols, cols, |r, c| v[(r, order[c])]);

    let out = Svd { u, s, v: v_sorted };
    if !is_finite(&out.u) || !is_finite(&out.v) {
        return Err(NumericsError::SvdNonConvergence { rows, cols });
    }
    Ok(out)
}

/// `(x_p, x_q e^{-j theta}) <- (c x_p - s x_q', s x_p + c x_q')`.
fn rotate_pair(x: &mut ComplexMatrix, p: usize, q: usize, c: f64, s: f64, phase: Complex64) {
    let rows = x.nrows();
    let back = phase.conj();
    let (head, tail) = x.as_mut_slice().split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq * back;
        *xp = a * c - b * s;
        *xq = a * s + b * c;
    }
}

/// Fill columns `filled..` of `u` with unit vectors orthogonal to all
/// earlier columns (Gram-Schmidt over the canonical basis, twice).
fn complete_orthonormal(u: &mut ComplexMatrix, filled: usize) {
    let (rows, cols) = u.shape();
    let mut next = filled;
    let mut e = 0;
    while next < cols && e < rows {
        let mut x = DVector::<Complex64>::zeros(rows);
        x[e] = Complex64::new(1.0, 0.0);
        e += 1;
        for _ in 0..2 {
            for j in 0..next {
                let uj = u.column(j);
                let proj = uj.dotc(&x);
                x -= uj * proj;
            }
        }
        let n = x.norm();
        if n > 1e-6 {
            u.set_column(next, &(x / Complex64::new(n, 0.0)));
            next += 1;
        }
    }
}

/// Moore-Penrose pseudo-inverse via the SVD, zeroing singular values below
/// `RANK_CUTOFF` times the largest one.
pub fn pseudo_inverse(a: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    let dec = svd(a)?;
    let (rows, cols) = a.shape();
    let top = dec.s.first().copied().unwrap_or(0.0);
    let mut out = ComplexMatrix::zeros(cols, rows);
    if top == 0.0 {
        return Ok(out);
    }
    for (i, &s) in dec.s.iter().enumerate() {
        if s <= RANK_CUTOFF * top {
            continue;
        }
        let v_col = dec.v.column(i);
        let u_col = dec.u.column(i);
        // A+ = sum_i v_i u_i^H / s_i
        out += (v_col * u_col.adjoint()) * Complex64::new(1.0 / s, 0.0);
    }
    Ok(out)
}

/// Orthonormal basis for the column span of `x` (columns above the rank cutoff).
pub fn orthonormal_basis(x: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    if x.ncols() == 0 {
        return Ok(ComplexMatrix::zeros(x.nrows(), 0));
    }
    let dec = svd(x)?;
    let rank = dec.rank();
    Ok(dec.u.columns(0, rank).into_owned())
}

/// Projects the columns of `b` onto the orthogonal complement of `span(x)`.
pub fn project_out(b: &ComplexMatrix, x: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    if b.nrows() != x.nrows() {
        return Err(NumericsError::RowMismatch {
            left: b.nrows(),
            right: x.nrows(),
        });
    }
    if x.ncols() == 0 {
        return Ok(b.clone());
    }
    let basis = orthonormal_basis(x)?;
    if basis.ncols() == 0 {
        return Ok(b.clone());
    }
    let coeffs = basis.adjoint() * b;
    Ok(b - &basis * coeffs)
}

/// Nearest point of the grid `{2 pi q / n_q : q = 0..n_q}` to `theta` (mod 2 pi).
///
/// Exact ties go to the smaller grid index, so a tie between the last grid
/// point and `2 pi` resolves to `0`.
pub fn quantize_phase(theta: f64, n_q: usize) -> f64 {
    debug_assert!(n_q >= 2, "n_q must be at least 2");
    quantization_index(theta, n_q) as f64 * 2.0 * PI / n_q as f64
}

pub fn quantization_index(theta: f64, n_q: usize) -> usize {
    let step = 2.0 * PI / n_q as f64;
    let wrapped = theta.rem_euclid(2.0 * PI);
    let x = wrapped / step;
    let lower = x.floor();
    let frac = x - lower;
    let lower = (lower as usize) % n_q;
    if frac > 0.5 {
        (lower + 1) % n_q
    } else if frac == 0.5 && lower + 1 == n_q {
        0
    } else {
        lower
    }
}

pub fn frobenius_norm(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Scales every column to unit Euclidean norm, returning the original norms.
pub fn normalize_columns(a: &mut ComplexMatrix) -> Vec<f64> {
    let mut norms = Vec::with_capacity(a.ncols());
    for mut col in a.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col.unscale_mut(n);
        }
        norms.push(n);
    }
    norms
}

/// Entry-wise phase projection: `(1/sqrt(rows)) exp(j angle(a_ij))`.
pub fn unit_modulus_phases(a: &ComplexMatrix) -> ComplexMatrix {
    let scale = 1.0 / (a.nrows() as f64).sqrt();
    a.map(|z| Complex64::from_polar(scale, z.arg()))
}

/// Builds `U diag(s) V^H` back from a decomposition.
pub fn reconstruct(dec: &Svd) -> ComplexMatrix {
    let s = DVector::from_iterator(dec.s.len(), dec.s.iter().map(|&s| Complex64::new(s, 0.0)));
    let us = ComplexMatrix::from_fn(dec.u.nrows(), dec.u.ncols(), |r, c| dec.u[(r, c)] * s[c]);
    us * dec.v.adjoint()
}
