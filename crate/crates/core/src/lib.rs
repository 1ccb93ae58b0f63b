//! Shot-noise model of a DVS pixel: small-signal circuit, noise spectra,
//! event-rate prediction, Monte-Carlo simulation and bias optimization.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod biasopt;
pub mod circuit;
pub mod config;
pub mod error;
pub mod events;
pub mod io;
pub mod params;
pub mod spectrum;
pub mod timesim;

pub use circuit::{bandwidth_3db, build_system, signal_tf_closed_form, Input, Node, NoiseSource, SmallSignalSystem};
pub use error::{Error, Result};
pub use params::{lux_to_photocurrent, BiasConfig, DeviceParams, OperatingPoint};
