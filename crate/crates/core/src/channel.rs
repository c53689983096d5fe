//! Clustered narrowband mmWave channel with ULA steering vectors.

use crate::numerics::ComplexMatrix;
use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
    #[error("path list is empty")]
    NoPaths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LosMode {
    #[default]
    Off,
    ForcedOn,
}

/// Close-in path loss `fspl_1m_db + 20 log10(f_GHz) + 10 n log10(d_m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathLossModel {
    pub fspl_1m_db: f64,
    pub nlos_exponent: f64,
    pub los_exponent: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        Self {
            fspl_1m_db: 32.4,
            nlos_exponent: 3.19,
            los_exponent: 2.0,
        }
    }
}

impl PathLossModel {
    pub fn loss_db(&self, distance_m: f64, carrier_freq_ghz: f64, exponent: f64) -> f64 {
        self.fspl_1m_db + 20.0 * carrier_freq_ghz.log10() + 10.0 * exponent * distance_m.log10()
    }

    pub fn nlos_gain(&self, distance_m: f64, carrier_freq_ghz: f64) -> f64 {
        db_to_linear(-self.loss_db(distance_m, carrier_freq_ghz, self.nlos_exponent))
    }

    pub fn los_gain(&self, distance_m: f64, carrier_freq_ghz: f64) -> f64 {
        db_to_linear(-self.loss_db(distance_m, carrier_freq_ghz, self.los_exponent))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    pub n_t: usize,
    pub n_r: usize,
    pub n_cl: usize,
    pub n_ray_per_cluster: usize,
    pub carrier_freq_ghz: f64,
    pub cell_radius_m: f64,
    pub min_distance_m: f64,
    pub angle_spread_deg: f64,
    pub los_mode: LosMode,
    pub pathloss: PathLossModel,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            n_t: 100,
            n_r: 30,
            n_cl: 2,
            n_ray_per_cluster: 20,
            carrier_freq_ghz: 73.0,
            cell_radius_m: 100.0,
            min_distance_m: 10.0,
            angle_spread_deg: 5.0,
            los_mode: LosMode::Off,
            pathloss: PathLossModel::default(),
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |msg: &str| Err(ChannelError::InvalidParams(msg.to_string()));
        if self.n_t == 0 || self.n_r == 0 {
            return bad("antenna counts must be at least 1");
        }
        if self.n_cl == 0 || self.n_ray_per_cluster == 0 {
            return bad("need at least one cluster and one ray per cluster");
        }
        if !(self.min_distance_m > 0.0 && self.min_distance_m < self.cell_radius_m) {
            return bad("require 0 < min_distance_m < cell_radius_m");
        }
        if self.carrier_freq_ghz.is_nan() || self.carrier_freq_ghz <= 0.0 {
            return bad("carrier frequency must be positive");
        }
        if self.angle_spread_deg.is_nan() || self.angle_spread_deg < 0.0 {
            return bad("angle spread must be non-negative");
        }
        Ok(())
    }

    pub fn total_rays(&self) -> usize {
        self.n_cl * self.n_ray_per_cluster
    }

    /// `sqrt(N_R N_T / sum_i N_ray,i)`.
    pub fn gamma(&self) -> f64 {
        ((self.n_r * self.n_t) as f64 / self.total_rays() as f64).sqrt()
    }
}

/// One propagation ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    pub attenuation: f64,
    pub aoa: f64,
    pub aod: f64,
}

impl PathComponent {
    /// `|alpha|^2 L`, the ranking key for analog beam selection.
    pub fn strength(&self) -> f64 {
        self.gain.norm_sqr() * self.attenuation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosComponent {
    pub phase: f64,
    pub attenuation: f64,
    pub aoa: f64,
    pub aod: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub distance_m: f64,
    pub paths: Vec<PathComponent>,
    pub los: Option<LosComponent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: ComplexMatrix,
    pub paths: Vec<PathComponent>,
    pub los: Option<LosComponent>,
    pub user_distance_m: f64,
    /// The normalization factor applied to the scattered rays.
    pub gamma: f64,
}

impl ChannelRealization {
    pub fn n_r(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.h.ncols()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// ULA response with half-wavelength spacing, entry `m` equal to
/// `exp(-j pi m sin(phi)) / sqrt(n)`.
pub fn steering_vector(phi: f64, n: usize) -> DVector<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    let step = -PI * phi.sin();
    DVector::from_fn(n, |m, _| Complex64::from_polar(scale, step * m as f64))
}

/// Linear power gain of the default close-in NLOS model.
pub fn path_loss(distance_m: f64, carrier_freq_ghz: f64) -> f64 {
    PathLossModel::default().nlos_gain(distance_m, carrier_freq_ghz)
}

/// Thermal noise power `F N0 W` in watts.
pub fn noise_variance(noise_figure_db: f64, noise_density_dbm_hz: f64, bandwidth_hz: f64) -> f64 {
    db_to_linear(noise_figure_db + noise_density_dbm_hz - 30.0) * bandwidth_hz
}

fn clip_angle(phi: f64) -> f64 {
    phi.clamp(-FRAC_PI_2, FRAC_PI_2)
}

/// Zero-mean Laplacian with the given standard deviation (scale `sigma / sqrt 2`).
fn laplacian<R: Rng + ?Sized>(rng: &mut R, std_dev: f64) -> f64 {
    if std_dev == 0.0 {
        return 0.0;
    }
    let scale = std_dev / std::f64::consts::SQRT_2;
    let magnitude: f64 = Exp::new(1.0 / scale).expect("positive rate").sample(rng);
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Samples one user's distance and ray geometry.
pub fn draw_geometry<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Geometry {
    let distance_m = rng.random_range(params.min_distance_m..=params.cell_radius_m);
    let attenuation = params.pathloss.nlos_gain(distance_m, params.carrier_freq_ghz);
    let spread = params.angle_spread_deg.to_radians();

    let mut paths = Vec::with_capacity(params.total_rays());
    for _ in 0..params.n_cl {
        let center_aod = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
        let center_aoa = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
        for _ in 0..params.n_ray_per_cluster {
            let aod = clip_angle(center_aod + laplacian(rng, spread));
            let aoa = clip_angle(center_aoa + laplacian(rng, spread));
            paths.push(PathComponent {
                gain: complex_gaussian(rng),
                attenuation,
                aoa,
                aod,
            });
        }
    }

    let los = match params.los_mode {
        LosMode::Off => None,
        LosMode::ForcedOn => Some(LosComponent {
            phase: rng.random_range(0.0..2.0 * PI),
            attenuation: params.pathloss.los_gain(distance_m, params.carrier_freq_ghz),
            aoa: rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
            aod: rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
        }),
    };

    Geometry {
        distance_m,
        paths,
        los,
    }
}

/// Sums the rank-one ray contributions into the `N_R x N_T` channel matrix.
pub fn assemble_channel(params: &ChannelParams, geometry: Geometry) -> Result<ChannelRealization, ChannelError> {
    if geometry.paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    if params.n_t == 0 || params.n_r == 0 {
        return Err(ChannelError::InvalidParams("antenna counts must be at least 1".into()));
    }
    let gamma = params.gamma();
    let mut h = ComplexMatrix::zeros(params.n_r, params.n_t);
    for path in &geometry.paths {
        let a_r = steering_vector(path.aoa, params.n_r);
        let a_t = steering_vector(path.aod, params.n_t);
        let coeff = path.gain * (gamma * path.attenuation.sqrt());
        h.ger(coeff, &a_r, &a_t.conjugate(), Complex64::new(1.0, 0.0));
    }
    if let Some(los) = &geometry.los {
        if params.los_mode == LosMode::ForcedOn {
            let a_r = steering_vector(los.aoa, params.n_r);
            let a_t = steering_vector(los.aod, params.n_t);
            let amplitude = ((params.n_r * params.n_t) as f64 * los.attenuation).sqrt();
            let coeff = Complex64::from_polar(amplitude, los.phase);
            h.ger(coeff, &a_r, &a_t.conjugate(), Complex64::new(1.0, 0.0));
        }
    }
    Ok(ChannelRealization {
        h,
        paths: geometry.paths,
        los: geometry.los,
        user_distance_m: geometry.distance_m,
        gamma,
    })
}
