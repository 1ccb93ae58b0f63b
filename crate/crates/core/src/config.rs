//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biasopt::{CalibrationOptions, Constraints, GridSpec, SweepSpec};
use crate::circuit::Node;
use crate::error::{Error, Result};
use crate::params::{BiasConfig, DeviceParams, OperatingPoint, OperatingPointSpec};
use crate::spectrum::FrequencyGrid;
use crate::timesim::SimConfig;

/// Explicit frequency grid for PSD, RMS and transfer-function output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub points_per_decade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illuminance: Option<GridSpec>,
    #[serde(rename = "I_pd", default, skip_serializing_if = "Option::is_none")]
    pub i_pd: Option<GridSpec>,
    #[serde(rename = "I_pr")]
    pub i_pr: GridSpec,
    #[serde(rename = "I_sf")]
    pub i_sf: GridSpec,
}

impl SweepConfig {
    pub fn to_spec(&self, params: &DeviceParams) -> Result<SweepSpec> {
        let i_pr = self.i_pr.values()?;
        let i_sf = self.i_sf.values()?;
        match (&self.illuminance, &self.i_pd) {
            (Some(lux), None) => SweepSpec::from_lux(&lux.values()?, i_pr, i_sf, params),
            (None, Some(i_pd)) => Ok(SweepSpec {
                i_pd: i_pd.values()?,
                i_pr,
                i_sf,
            }),
            _ => Err(Error::Config(
                "sweep: give exactly one of `illuminance` and `I_pd`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Names of the device parameters to fit.
    pub free: Vec<String>,
    #[serde(default = "default_node")]
    pub node: Node,
    /// Measured PSD CSV, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default)]
    pub options: CalibrationOptions,
}

fn default_node() -> Node {
    Node::VPr
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub device: DeviceParams,
    pub bias: BiasConfig,
    #[serde(default)]
    pub operating_point: OperatingPointSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<Constraints>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateConfig>,
}

impl Config {
    /// Parses JSON, naming the offending key path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.bias.validate()?;
        self.operating_point.resolve(&self.device)?;
        if let Some(g) = &self.grid {
            FrequencyGrid::log(g.f_min, g.f_max, g.points_per_decade)?;
        }
        Ok(())
    }

    pub fn op(&self) -> Result<OperatingPoint> {
        self.operating_point.resolve(&self.device)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
