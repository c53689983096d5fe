//! Transmitter and receiver circuit power per architecture.
//!
//! Constants are stored in mW; the public functions return watts.

use crate::beamformers::Architecture;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid power constant `{name}` = {value}")]
pub struct InvalidConstant {
    pub name: &'static str,
    pub value: f64,
}

/// Per-component power draws in mW, plus the amplifier inefficiency `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConstants {
    pub p_rfc: f64,
    pub p_dac: f64,
    pub p_adc: f64,
    pub p_pa: f64,
    pub p_lna: f64,
    pub p_bb: f64,
    pub p_ps: f64,
    pub p_element: f64,
    pub p_sw: f64,
    pub p_ps_fixed: f64,
    pub eta: f64,
}

impl Default for PowerConstants {
    fn default() -> Self {
        Self {
            p_rfc: 40.0,
            p_dac: 110.0,
            p_adc: 200.0,
            p_pa: 16.0,
            p_lna: 30.0,
            p_bb: 243.0,
            p_ps: 30.0,
            p_element: 27.0,
            p_sw: 5.0,
            p_ps_fixed: 1.0,
            eta: 2.0,
        }
    }
}

impl PowerConstants {
    pub fn validate(&self) -> Result<(), InvalidConstant> {
        let entries = [
            ("p_rfc", self.p_rfc),
            ("p_dac", self.p_dac),
            ("p_adc", self.p_adc),
            ("p_pa", self.p_pa),
            ("p_lna", self.p_lna),
            ("p_bb", self.p_bb),
            ("p_ps", self.p_ps),
            ("p_element", self.p_element),
            ("p_sw", self.p_sw),
            ("p_ps_fixed", self.p_ps_fixed),
        ];
        for (name, value) in entries {
            if !(value > 0.0 && value.is_finite()) {
                return Err(InvalidConstant { name, value });
            }
        }
        if !(self.eta > 1.0 && self.eta.is_finite()) {
            return Err(InvalidConstant {
                name: "eta",
                value: self.eta,
            });
        }
        Ok(())
    }
}

/// Base-station circuit power in mW.
pub fn tx_circuit_power_mw(arch: Architecture, n_t: usize, n_t_rf: usize, n_q: usize, c: &PowerConstants) -> f64 {
    let n_t = n_t as f64;
    let n_rf = n_t_rf as f64;
    let n_q = n_q as f64;
    match arch {
        Architecture::CmFd | Architecture::PzfFd => n_t * (c.p_rfc + c.p_dac + c.p_pa) + c.p_bb,
        Architecture::PzfHy => n_rf * (c.p_rfc + c.p_dac + n_t * c.p_ps) + n_t * c.p_pa + c.p_bb,
        Architecture::An => n_rf * (c.p_rfc + n_t * c.p_element + c.p_dac),
        Architecture::SwPhsh => {
            n_rf * (c.p_rfc + c.p_dac + n_q * c.p_ps_fixed) + n_t * (n_rf * c.p_sw + c.p_pa) + c.p_bb
        }
        Architecture::Sw => n_rf * (c.p_rfc + c.p_dac + c.p_sw) + n_rf * c.p_pa + c.p_bb,
    }
}

/// Per-device receiver circuit power in mW.
///
/// The hybrid receiver counts one LNA per receive antenna.
pub fn rx_circuit_power_mw(arch: Architecture, n_r: usize, n_r_rf: usize, n_q: usize, c: &PowerConstants) -> f64 {
    let n_r = n_r as f64;
    let n_rf = n_r_rf as f64;
    let n_q = n_q as f64;
    match arch {
        Architecture::CmFd | Architecture::PzfFd => n_r * (c.p_rfc + c.p_adc + c.p_lna) + c.p_bb,
        Architecture::PzfHy => n_rf * (c.p_rfc + c.p_adc + n_r * c.p_ps) + n_r * c.p_lna + c.p_bb,
        Architecture::An => n_rf * (c.p_rfc + n_r * c.p_element + c.p_adc),
        Architecture::SwPhsh => {
            n_rf * (c.p_rfc + c.p_adc + n_q * c.p_ps_fixed) + n_r * (n_rf * c.p_sw + c.p_lna) + c.p_bb
        }
        Architecture::Sw => n_rf * (c.p_rfc + c.p_adc + c.p_sw) + n_rf * c.p_lna + c.p_bb,
    }
}

pub fn tx_circuit_power(arch: Architecture, n_t: usize, n_t_rf: usize, n_q: usize, c: &PowerConstants) -> f64 {
    tx_circuit_power_mw(arch, n_t, n_t_rf, n_q, c) / 1000.0
}

pub fn rx_circuit_power(arch: Architecture, n_r: usize, n_r_rf: usize, n_q: usize, c: &PowerConstants) -> f64 {
    rx_circuit_power_mw(arch, n_r, n_r_rf, n_q, c) / 1000.0
}

/// RF-chain counts used for power accounting: fully digital structures
/// drive every antenna, the others use `K M` at the base station and `M`
/// per device unless overridden.
pub fn rf_chain_counts(
    arch: Architecture,
    n_t: usize,
    n_r: usize,
    n_t_rf: usize,
    n_r_rf: usize,
) -> (usize, usize) {
    if arch.is_fully_digital() {
        (n_t, n_r)
    } else {
        (n_t_rf, n_r_rf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tx_golden_values() {
        let c = PowerConstants::default();
        assert_eq!(tx_circuit_power(Architecture::CmFd, 100, 100, 8, &c), 16.843);
        assert_eq!(tx_circuit_power(Architecture::PzfFd, 100, 100, 8, &c), 16.843);
        assert_eq!(tx_circuit_power(Architecture::PzfHy, 100, 10, 8, &c), 33.343);
        assert_eq!(tx_circuit_power(Architecture::Sw, 100, 10, 8, &c), 1.953);
    }

    #[test]
    fn rx_golden_values() {
        let c = PowerConstants::default();
        assert_eq!(rx_circuit_power(Architecture::CmFd, 30, 30, 8, &c), 8.343);
        assert_eq!(rx_circuit_power(Architecture::An, 30, 1, 8, &c), 1.050);
        assert_eq!(rx_circuit_power(Architecture::Sw, 30, 1, 8, &c), 0.518);
    }

    #[test]
    fn switched_structures_are_cheaper_than_hybrid() {
        let c = PowerConstants::default();
        for (n, rf) in [(16, 4), (64, 10), (100, 10), (256, 30)] {
            let sw = tx_circuit_power(Architecture::Sw, n, rf, 8, &c);
            let swp = tx_circuit_power(Architecture::SwPhsh, n, rf, 8, &c);
            let hy = tx_circuit_power(Architecture::PzfHy, n, rf, 8, &c);
            assert!(sw < swp && swp < hy, "tx n={n}: {sw} {swp} {hy}");
            let sw = rx_circuit_power(Architecture::Sw, n, rf, 8, &c);
            let swp = rx_circuit_power(Architecture::SwPhsh, n, rf, 8, &c);
            let hy = rx_circuit_power(Architecture::PzfHy, n, rf, 8, &c);
            assert!(sw < swp && swp < hy, "rx n={n}: {sw} {swp} {hy}");
        }
    }

    #[test]
    fn affine_in_antenna_count() {
        let c = PowerConstants::default();
        for arch in Architecture::ALL {
            let p = |n| tx_circuit_power(arch, n, 10, 8, &c);
            let first = p(21) - p(20);
            for n in [30, 64, 200] {
                assert!(((p(n + 1) - p(n)) - first).abs() < 1e-9, "{arch} tx");
            }
            let p = |n| rx_circuit_power(arch, n, 3, 8, &c);
            let first = p(11) - p(10);
            for n in [30, 64, 200] {
                assert!(((p(n + 1) - p(n)) - first).abs() < 1e-9, "{arch} rx");
            }
        }
    }

    #[test]
    fn validation() {
        assert!(PowerConstants::default().validate().is_ok());
        let c = PowerConstants {
            eta: 1.0,
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().name, "eta");
        let c = PowerConstants {
            p_sw: 0.0,
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().name, "p_sw");
    }
}
