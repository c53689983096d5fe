//! Link-level Monte Carlo simulator for the downlink of a single-cell mmWave
//! MU-MIMO system.
//!
//! Six precoder/combiner structures are synthesized on shared clustered
//! channel realizations and compared on achievable spectral efficiency and
//! global energy efficiency under a component-level circuit power model.

pub mod beamformers;
pub mod channel;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod power;
pub mod validate;

pub use beamformers::{Architecture, BeamformerSet, SynthesisError, SynthesisOptions};
pub use channel::{ChannelParams, ChannelRealization, PathComponent};
pub use harness::{run_sweep, ResultTable, SimConfig};
pub use metrics::MetricSample;
pub use numerics::ComplexMatrix;
pub use power::PowerConstants;
