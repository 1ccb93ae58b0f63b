//! Device constants, bias settings and operating points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementary charge in coulombs.
pub const Q_E: f64 = 1.602176634e-19;

/// Fixed silicon and process constants of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    /// Thermal voltage, V.
    #[serde(rename = "U_T")]
    pub u_t: f64,
    pub kappa_fb: f64,
    pub kappa_n: f64,
    pub kappa_sf: f64,
    /// Photodiode node capacitance, F.
    #[serde(rename = "C_in")]
    pub c_in: f64,
    /// Photoreceptor output node capacitance, F.
    #[serde(rename = "C_out")]
    pub c_out: f64,
    /// Source-follower load capacitance, F.
    #[serde(rename = "C_sf")]
    pub c_sf: f64,
    /// Amplifier Early voltage, V.
    #[serde(rename = "V_A")]
    pub v_a: f64,
    /// Elementary charge, C.
    pub q_e: f64,
    /// Reset-switch leak current, A.
    #[serde(rename = "I_leak")]
    pub i_leak: f64,
    /// Photocurrent per lux of on-chip illuminance, A/lux.
    pub lux_to_amps: f64,
    /// Change-amplifier bandwidth seen by the comparators, Hz.
    pub f_ca: f64,
    /// Equivalent change-amplifier capacitance charged by the leak, F.
    #[serde(rename = "C_leak")]
    pub c_leak: f64,
    /// Change-amplifier voltage gain from `v_sf` to its output.
    pub ca_gain: f64,
    /// Supply voltage of the power model, V.
    #[serde(rename = "V_dd")]
    pub v_dd: f64,
}

impl DeviceParams {
    /// The "davis346-default" parameter set.
    pub fn davis346_default() -> Self {
        DeviceParams {
            u_t: 0.025,
            kappa_fb: 0.9,
            kappa_n: 0.9,
            kappa_sf: 0.3,
            c_in: 265e-15,
            c_out: 130e-15,
            c_sf: 854e-15,
            v_a: 4.0,
            q_e: Q_E,
            i_leak: 5e-18,
            lux_to_amps: 25e-15,
            f_ca: 1.5,
            c_leak: 20e-15,
            ca_gain: 20.0,
            v_dd: 1.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("U_T", self.u_t),
            ("C_in", self.c_in),
            ("C_out", self.c_out),
            ("C_sf", self.c_sf),
            ("V_A", self.v_a),
            ("q_e", self.q_e),
            ("lux_to_amps", self.lux_to_amps),
            ("f_ca", self.f_ca),
            ("C_leak", self.c_leak),
            ("ca_gain", self.ca_gain),
            ("V_dd", self.v_dd),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, k) in [
            ("kappa_fb", self.kappa_fb),
            ("kappa_n", self.kappa_n),
            ("kappa_sf", self.kappa_sf),
        ] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Domain(format!("{name} must lie in (0, 1], got {k}")));
            }
        }
        if !(self.i_leak.is_finite() && self.i_leak >= 0.0) {
            return Err(Error::Domain(format!(
                "I_leak must be non-negative, got {}",
                self.i_leak
            )));
        }
        Ok(())
    }

    /// Looks up a fittable parameter by its config name.
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "U_T" => self.u_t,
            "kappa_fb" => self.kappa_fb,
            "kappa_n" => self.kappa_n,
            "kappa_sf" => self.kappa_sf,
            "C_in" => self.c_in,
            "C_out" => self.c_out,
            "C_sf" => self.c_sf,
            "V_A" => self.v_a,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "U_T" => &mut self.u_t,
            "kappa_fb" => &mut self.kappa_fb,
            "kappa_n" => &mut self.kappa_n,
            "kappa_sf" => &mut self.kappa_sf,
            "C_in" => &mut self.c_in,
            "C_out" => &mut self.c_out,
            "C_sf" => &mut self.c_sf,
            "V_A" => &mut self.v_a,
            _ => return Err(Error::Domain(format!("unknown fittable parameter `{name}`"))),
        };
        *slot = value;
        Ok(())
    }

    /// Names accepted by [`DeviceParams::get`] and [`DeviceParams::set`].
    pub const FITTABLE: [&'static str; 8] = ["U_T", "kappa_fb", "kappa_n", "kappa_sf", "C_in", "C_out", "C_sf", "V_A"];
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self::davis346_default()
    }
}

/// User-controllable biases and event-pipeline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    #[serde(rename = "I_pr")]
    pub i_pr: f64,
    #[serde(rename = "I_sf")]
    pub i_sf: f64,
    /// ON threshold, TC log-e units.
    pub theta_on: f64,
    /// OFF threshold, TC log-e units.
    pub theta_off: f64,
    /// Refractory period, s.
    pub delta_refr: f64,
}

impl BiasConfig {
    pub fn davis346_default() -> Self {
        BiasConfig {
            i_pr: 3e-9,
            i_sf: 10e-12,
            theta_on: 0.075,
            theta_off: 0.075,
            delta_refr: 1e-3,
        }
    }

    pub fn with_i_pr(mut self, i_pr: f64) -> Self {
        self.i_pr = i_pr;
        self
    }

    pub fn with_i_sf(mut self, i_sf: f64) -> Self {
        self.i_sf = i_sf;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("I_pr", self.i_pr),
            ("I_sf", self.i_sf),
            ("theta_on", self.theta_on),
            ("theta_off", self.theta_off),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.delta_refr.is_finite() && self.delta_refr >= 0.0) {
            return Err(Error::Domain(format!(
                "delta_refr must be non-negative, got {}",
                self.delta_refr
            )));
        }
        Ok(())
    }
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self::davis346_default()
    }
}

/// DC photocurrent of the pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    #[serde(rename = "I_pd")]
    pub i_pd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illuminance: Option<f64>,
}

impl OperatingPoint {
    pub fn from_current(i_pd: f64) -> Result<Self> {
        let op = OperatingPoint {
            i_pd,
            illuminance: None,
        };
        op.validate()?;
        Ok(op)
    }

    pub fn from_lux(lux: f64, params: &DeviceParams) -> Result<Self> {
        let i_pd = lux_to_photocurrent(lux, params)?;
        Ok(OperatingPoint {
            i_pd,
            illuminance: Some(lux),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i_pd.is_finite() && self.i_pd > 0.0) {
            return Err(Error::Domain(format!("I_pd must be positive, got {}", self.i_pd)));
        }
        Ok(())
    }
}

/// Converts on-chip illuminance to photocurrent.
pub fn lux_to_photocurrent(illuminance: f64, params: &DeviceParams) -> Result<f64> {
    if !(illuminance.is_finite() && illuminance > 0.0) {
        return Err(Error::Domain(format!(
            "illuminance must be positive, got {illuminance}"
        )));
    }
    Ok(illuminance * params.lux_to_amps)
}

/// Operating point as written in a config file: either `I_pd` or `illuminance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPointSpec {
    #[serde(rename = "I_pd", default, skip_serializing_if = "Option::is_none")]
    pub i_pd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illuminance: Option<f64>,
}

impl OperatingPointSpec {
    pub fn resolve(&self, params: &DeviceParams) -> Result<OperatingPoint> {
        match (self.i_pd, self.illuminance) {
            (Some(i_pd), lux) => {
                let mut op = OperatingPoint::from_current(i_pd)?;
                op.illuminance = lux;
                Ok(op)
            }
            (None, Some(lux)) => OperatingPoint::from_lux(lux, params),
            (None, None) => Err(Error::Config("operating_point needs `I_pd` or `illuminance`".into())),
        }
    }
}

impl Default for OperatingPointSpec {
    fn default() -> Self {
        OperatingPointSpec {
            i_pd: None,
            illuminance: Some(0.1),
        }
    }
}
