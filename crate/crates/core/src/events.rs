//! Analytic event-rate prediction from node noise statistics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::circuit::{Node, SmallSignalSystem};
use crate::error::{Error, Result};
use crate::params::{BiasConfig, DeviceParams};
use crate::spectrum::{psd, trapezoid, FrequencyGrid, PsdUnits, SpectrumSeries};

/// Largest share of the second moment allowed in the top decade of the grid.
pub const M2_TAIL_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    /// RMS noise, TC log-e units.
    pub sigma_tc: f64,
    /// Characteristic frequency `sqrt(m2/m0) / 2pi`, Hz.
    pub nu0: f64,
    pub m0: f64,
    pub m2: f64,
}

/// Spectral moments of a TC-referred spectrum.
pub fn noise_stats(spectrum: &SpectrumSeries) -> Result<NoiseStats> {
    if spectrum.units != PsdUnits::TcSquaredPerHz {
        return Err(Error::Domain("noise_stats expects a TC-referred spectrum".into()));
    }
    let f = &spectrum.grid.points;
    let s = &spectrum.total;
    let m0 = trapezoid(f, s);
    let integrand: Vec<f64> = f.iter().zip(s).map(|(&f, &s)| (2.0 * PI * f).powi(2) * s).collect();
    let m2 = trapezoid(f, &integrand);
    if !(m0.is_finite() && m2.is_finite()) {
        return Err(Error::Numerical("non-finite spectral moment".into()));
    }
    if m0 <= 0.0 {
        return Ok(NoiseStats {
            sigma_tc: 0.0,
            nu0: 0.0,
            m0: 0.0,
            m2: 0.0,
        });
    }
    let f_top = f[f.len() - 1] / 10.0;
    let start = f.partition_point(|&x| x < f_top);
    if start + 1 < f.len() {
        let tail = trapezoid(&f[start..], &integrand[start..]);
        if tail > M2_TAIL_LIMIT * m2 {
            return Err(Error::Model(format!(
                "second spectral moment does not converge: top decade holds {:.1}% of m2; \
                 the PSD needs at least a two-pole roll-off",
                100.0 * tail / m2
            )));
        }
    }
    Ok(NoiseStats {
        sigma_tc: m0.sqrt(),
        nu0: (m2 / m0).sqrt() / (2.0 * PI),
        m0,
        m2,
    })
}

/// First-order change-amplifier response applied to a spectrum.
pub fn change_amp_filter(spectrum: &SpectrumSeries, f_ca: f64) -> SpectrumSeries {
    spectrum.weighted(|f| 1.0 / (1.0 + (f / f_ca).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub on_rate: f64,
    pub off_rate: f64,
    pub total_rate: f64,
    pub leak_rate: f64,
}

fn crossing_rate(nu0: f64, theta: f64, sigma: f64, delta_refr: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let nu = nu0 * (-theta * theta / (2.0 * sigma * sigma)).exp();
    nu / (1.0 + nu * delta_refr)
}

/// Level-crossing rate with refractory correction; leak is reported separately.
pub fn rice_rate(stats: &NoiseStats, bias: &BiasConfig) -> Result<RatePrediction> {
    if !(bias.theta_on > 0.0 && bias.theta_off > 0.0) {
        return Err(Error::Precondition("thresholds must be positive".into()));
    }
    let on = crossing_rate(stats.nu0, bias.theta_on, stats.sigma_tc, bias.delta_refr);
    let off = crossing_rate(stats.nu0, bias.theta_off, stats.sigma_tc, bias.delta_refr);
    Ok(RatePrediction {
        on_rate: on,
        off_rate: off,
        total_rate: on + off,
        leak_rate: 0.0,
    })
}

/// Charge the leak current must supply to cross one ON threshold.
pub fn threshold_charge(params: &DeviceParams, bias: &BiasConfig, system: &SmallSignalSystem) -> f64 {
    params.c_leak * params.ca_gain * bias.theta_on * system.signal_gain(Node::VSf)
}

pub fn leak_rate_from_charge(i_leak: f64, q_theta: f64) -> Result<f64> {
    if !(i_leak >= 0.0) {
        return Err(Error::Precondition(format!(
            "I_leak must be non-negative, got {i_leak}"
        )));
    }
    if !(q_theta > 0.0) {
        return Err(Error::Domain("threshold charge is zero".into()));
    }
    Ok(i_leak / q_theta)
}

pub fn leak_rate(params: &DeviceParams, bias: &BiasConfig, system: &SmallSignalSystem) -> Result<f64> {
    leak_rate_from_charge(params.i_leak, threshold_charge(params, bias, system))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateUnits {
    pub on_rate: String,
    pub off_rate: String,
    pub total_rate: String,
    pub leak_rate: String,
    pub sigma_tc: String,
    pub nu0: String,
}

impl Default for RateUnits {
    fn default() -> Self {
        RateUnits {
            on_rate: "Hz".into(),
            off_rate: "Hz".into(),
            total_rate: "Hz".into(),
            leak_rate: "Hz".into(),
            sigma_tc: "log-e".into(),
            nu0: "Hz".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub on_rate: f64,
    pub off_rate: f64,
    pub total_rate: f64,
    pub leak_rate: f64,
    pub sigma_tc: f64,
    pub nu0: f64,
    pub units: RateUnits,
}

/// Statistics of the TC-referred noise seen by the comparators.
pub fn event_path_stats(system: &SmallSignalSystem, params: &DeviceParams) -> Result<NoiseStats> {
    let grid = FrequencyGrid::for_system(system, &[params.f_ca])?;
    let spec = psd(system, Node::VSf, &grid)?.referred_to_tc(system)?;
    noise_stats(&change_amp_filter(&spec, params.f_ca))
}

/// Full analytic rate pipeline for one operating point.
pub fn predict_rate(system: &SmallSignalSystem, bias: &BiasConfig, params: &DeviceParams) -> Result<RateReport> {
    let stats = event_path_stats(system, params)?;
    let r = rice_rate(&stats, bias)?;
    Ok(RateReport {
        on_rate: r.on_rate,
        off_rate: r.off_rate,
        total_rate: r.total_rate,
        leak_rate: leak_rate(params, bias, system)?,
        sigma_tc: stats.sigma_tc,
        nu0: stats.nu0,
        units: RateUnits::default(),
    })
}
