//! Disturbance covariance, achievable spectral efficiency and global energy
//! efficiency.
//!
//! The log-determinant is computed through Cholesky factors: with
//! `R = L L^H` and `G = d^H H q`, `det(I + c R^-1 G G^H) = det(I + c C C^H)`
//! where `C = L^-1 G`, and the latter matrix is itself Hermitian positive
//! definite.
//!
//! The rate only depends on the column space of `d_k`, so `user_rate`
//! evaluates it on the orthonormal left singular basis of `d_k`. That avoids
//! squaring the condition number of `d_k` when forming `d^H d`.

use crate::beamformers::{Architecture, BeamformerSet};
use crate::channel::ChannelRealization;
use crate::numerics::{svd, ComplexMatrix};
use nalgebra::Cholesky;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("user index {user} out of range for {users} users")]
    UserOutOfRange { user: usize, users: usize },
    #[error("disturbance covariance of user {user} is singular")]
    SingularDisturbance { user: usize },
    #[error("beamformer/channel mismatch: {0}")]
    Mismatch(String),
}

fn check_shapes(channels: &[ChannelRealization], bf: &BeamformerSet) -> Result<(), MetricsError> {
    if channels.len() != bf.users.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} channels vs {} beamformers",
            channels.len(),
            bf.users.len()
        )));
    }
    let m = bf.streams();
    for (k, (ch, u)) in channels.iter().zip(&bf.users).enumerate() {
        let (n_r, n_t) = ch.h.shape();
        if u.q.shape() != (n_t, m) || u.d.shape() != (n_r, m) {
            return Err(MetricsError::Mismatch(format!("user {k} has inconsistent q/d shapes")));
        }
    }
    Ok(())
}

fn hermitize(a: &mut ComplexMatrix) {
    let n = a.nrows();
    for i in 0..n {
        a[(i, i)] = Complex64::new(a[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let avg = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = avg;
            a[(j, i)] = avg.conj();
        }
    }
}

/// `sigma2 d_k^H d_k + P_T/(M K) sum_{l != k} d_k^H H_k q_l q_l^H H_k^H d_k`.
pub fn disturbance_covariance(
    k: usize,
    channels: &[ChannelRealization],
    bf: &BeamformerSet,
    p_t: f64,
    sigma2: f64,
) -> Result<ComplexMatrix, MetricsError> {
    check_shapes(channels, bf)?;
    let users = channels.len();
    if k >= users {
        return Err(MetricsError::UserOutOfRange { user: k, users });
    }
    Ok(covariance_with(k, &bf.users[k].d, channels, bf, p_t, sigma2))
}

fn covariance_with(
    k: usize,
    d: &ComplexMatrix,
    channels: &[ChannelRealization],
    bf: &BeamformerSet,
    p_t: f64,
    sigma2: f64,
) -> ComplexMatrix {
    let users = channels.len();
    let m = bf.streams();
    let dh_h = d.adjoint() * &channels[k].h;
    let mut r = (d.adjoint() * d) * Complex64::new(sigma2, 0.0);
    let per_stream = p_t / (m * users) as f64;
    for (l, other) in bf.users.iter().enumerate() {
        if l == k {
            continue;
        }
        let g = &dh_h * &other.q;
        r += (&g * g.adjoint()) * Complex64::new(per_stream, 0.0);
    }
    hermitize(&mut r);
    r
}

/// Spectral efficiency of user `k` in bit/s/Hz.
pub fn user_rate(
    k: usize,
    channels: &[ChannelRealization],
    bf: &BeamformerSet,
    p_t: f64,
    sigma2: f64,
) -> Result<f64, MetricsError> {
    check_shapes(channels, bf)?;
    let users = channels.len();
    if k >= users {
        return Err(MetricsError::UserOutOfRange { user: k, users });
    }
    let m = bf.streams();
    let singular = MetricsError::SingularDisturbance { user: k };
    let dec = svd(&bf.users[k].d).map_err(|_| singular.clone())?;
    if dec.rank() < m {
        return Err(singular);
    }
    let d = dec.u.columns(0, m).into_owned();

    let r = covariance_with(k, &d, channels, bf, p_t, sigma2);
    let chol = Cholesky::new(r).ok_or(MetricsError::SingularDisturbance { user: k })?;
    let l = chol.l();
    if (0..m).any(|i| l[(i, i)].re <= 0.0 || !l[(i, i)].re.is_finite()) {
        return Err(MetricsError::SingularDisturbance { user: k });
    }
    let g = d.adjoint() * &channels[k].h * &bf.users[k].q;
    let c = l
        .solve_lower_triangular(&g)
        .ok_or(MetricsError::SingularDisturbance { user: k })?;
    let mut a = (&c * c.adjoint()) * Complex64::new(p_t / (m * users) as f64, 0.0);
    for i in 0..m {
        a[(i, i)] += Complex64::new(1.0, 0.0);
    }
    hermitize(&mut a);
    let chol_a = Cholesky::new(a).ok_or(MetricsError::SingularDisturbance { user: k })?;
    let la = chol_a.l();
    let log_det: f64 = (0..m).map(|i| 2.0 * la[(i, i)].re.log2()).sum();
    Ok(log_det.max(0.0))
}

/// Sum spectral efficiency over all users, bit/s/Hz.
pub fn ase(channels: &[ChannelRealization], bf: &BeamformerSet, p_t: f64, sigma2: f64) -> Result<f64, MetricsError> {
    check_shapes(channels, bf)?;
    (0..channels.len()).map(|k| user_rate(k, channels, bf, p_t, sigma2)).sum()
}

/// `W ASE / (eta P_T + P_TX,c + K P_RX,c)` in bit/Joule.
pub fn gee(ase_val: f64, bandwidth_hz: f64, p_t: f64, p_tx_c: f64, p_rx_c: f64, k_users: usize, eta: f64) -> f64 {
    let denominator = eta * p_t + p_tx_c + k_users as f64 * p_rx_c;
    debug_assert!(denominator > 0.0, "total consumed power must be positive");
    bandwidth_hz * ase_val / denominator
}

/// One (architecture, sweep point, drop) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub arch: Architecture,
    pub n_t: usize,
    pub n_r: usize,
    pub k: usize,
    pub m: usize,
    pub p_t_dbw: f64,
    pub drop: usize,
    pub ase: f64,
    pub p_tx_c: f64,
    pub p_rx_c: f64,
    pub gee: f64,
    pub flags: Vec<String>,
}

impl MetricSample {
    /// True when the row carries a synthesis or evaluation failure rather
    /// than a measurement.
    pub fn is_failure(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("error:"))
    }
}
