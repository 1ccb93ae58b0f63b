//! Bias sweeps, the constrained bias optimizer and PSD calibration.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{bandwidth_3db, build_system, Node, NoiseSource};
use crate::error::{Error, Result};
use crate::events::{change_amp_filter, event_path_stats, leak_rate, noise_stats, rice_rate};
use crate::params::{BiasConfig, DeviceParams, OperatingPoint};
use crate::spectrum::{photon_fraction, psd, FrequencyGrid};

/// Log-spaced or explicit grid of positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Log { min: f64, max: f64, points_per_decade: f64 },
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        let v = match self {
            GridSpec::List(v) => v.clone(),
            GridSpec::Log {
                min,
                max,
                points_per_decade,
            } => {
                if !(*min > 0.0 && max >= min && *points_per_decade > 0.0) {
                    return Err(Error::Domain(format!("invalid log grid [{min}, {max}]")));
                }
                let n = ((max / min).log10() * points_per_decade).round() as usize;
                if n == 0 {
                    vec![*min]
                } else {
                    (0..=n).map(|i| min * (max / min).powf(i as f64 / n as f64)).collect()
                }
            }
        };
        check_grid("grid", &v)?;
        Ok(v)
    }
}

fn check_grid(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Domain(format!("{name} grid is empty")));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Domain(format!("{name} grid must be positive")));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

/// Metrics of one bias point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Predicted ON plus OFF noise rate, Hz.
    pub rate_hz: f64,
    /// Signal bandwidth at `v_sf`, Hz.
    pub bandwidth_hz: f64,
    /// Total TC-referred RMS noise at `v_sf`.
    pub rms_tc: f64,
    pub photon_fraction: f64,
    pub power_w: f64,
    pub leak_rate_hz: f64,
}

pub fn power(op: &OperatingPoint, bias: &BiasConfig, params: &DeviceParams) -> f64 {
    params.v_dd * (bias.i_pr + bias.i_sf + op.i_pd)
}

pub fn evaluate_point(op: &OperatingPoint, bias: &BiasConfig, params: &DeviceParams) -> Result<PointMetrics> {
    let system = build_system(op, bias, params)?;
    let grid = FrequencyGrid::for_system(&system, &[params.f_ca])?;
    let spec = psd(&system, Node::VSf, &grid)?.referred_to_tc(&system)?;
    let stats = noise_stats(&change_amp_filter(&spec, params.f_ca))?;
    Ok(PointMetrics {
        rate_hz: rice_rate(&stats, bias)?.total_rate,
        bandwidth_hz: bandwidth_3db(&system, Node::VSf)?,
        rms_tc: spec.total_power().sqrt(),
        photon_fraction: photon_fraction(&spec)?,
        power_w: power(op, bias, params),
        leak_rate_hz: leak_rate(params, bias, &system)?,
    })
}

/// Predicted rate with the `I_pr` noise source removed.
pub fn asymptotic_rate(op: &OperatingPoint, bias: &BiasConfig, params: &DeviceParams) -> Result<f64> {
    let system = build_system(op, bias, params)?.ablate(NoiseSource::Pr);
    Ok(rice_rate(&event_path_stats(&system, params)?, bias)?.total_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub i_pd: Vec<f64>,
    pub i_pr: Vec<f64>,
    pub i_sf: Vec<f64>,
}

impl SweepSpec {
    pub fn from_lux(lux: &[f64], i_pr: Vec<f64>, i_sf: Vec<f64>, params: &DeviceParams) -> Result<Self> {
        let i_pd = lux
            .iter()
            .map(|&l| crate::params::lux_to_photocurrent(l, params))
            .collect::<Result<Vec<f64>>>()?;
        Ok(SweepSpec { i_pd, i_pr, i_sf })
    }

    /// Two illuminances, `I_pr` from 1 pA to 10 nA, `I_sf` = 10 pA.
    pub fn noise_rate_figure(params: &DeviceParams) -> Result<Self> {
        let i_pr = GridSpec::Log {
            min: 1e-12,
            max: 1e-8,
            points_per_decade: 8.0,
        }
        .values()?;
        Self::from_lux(&[0.002, 0.04], i_pr, vec![10e-12], params)
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("I_pd", &self.i_pd)?;
        check_grid("I_pr", &self.i_pr)?;
        check_grid("I_sf", &self.i_sf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub i_pd: f64,
    pub i_pr: f64,
    pub i_sf: f64,
    pub rate_hz: f64,
    pub bandwidth_hz: f64,
    pub rms_tc: f64,
    pub photon_fraction: f64,
    pub power_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Cartesian sweep in lexicographic `(I_pd, I_pr, I_sf)` order.
pub fn sweep(spec: &SweepSpec, bias: &BiasConfig, params: &DeviceParams) -> Result<Vec<SweepRecord>> {
    spec.validate()?;
    let mut points = Vec::with_capacity(spec.i_pd.len() * spec.i_pr.len() * spec.i_sf.len());
    for &i_pd in &spec.i_pd {
        for &i_pr in &spec.i_pr {
            for &i_sf in &spec.i_sf {
                points.push((i_pd, i_pr, i_sf));
            }
        }
    }
    Ok(points
        .par_iter()
        .map(|&(i_pd, i_pr, i_sf)| {
            let b = bias.with_i_pr(i_pr).with_i_sf(i_sf);
            let m = OperatingPoint::from_current(i_pd).and_then(|op| evaluate_point(&op, &b, params));
            match m {
                Ok(m) => SweepRecord {
                    i_pd,
                    i_pr,
                    i_sf,
                    rate_hz: m.rate_hz,
                    bandwidth_hz: m.bandwidth_hz,
                    rms_tc: m.rms_tc,
                    photon_fraction: m.photon_fraction,
                    power_w: m.power_w,
                    error: None,
                },
                Err(e) => SweepRecord {
                    i_pd,
                    i_pr,
                    i_sf,
                    rate_hz: f64::NAN,
                    bandwidth_hz: f64::NAN,
                    rms_tc: f64::NAN,
                    photon_fraction: f64::NAN,
                    power_w: params.v_dd * (i_pr + i_sf + i_pd),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Shape summary of a rate-versus-`I_pr` curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveShape {
    pub peak_index: usize,
    /// Peak rate over the rate at the lowest bias.
    pub rise_ratio: f64,
    /// Peak rate over the rate at the highest bias.
    pub fall_ratio: f64,
    /// Relative spread of the rate over the top half-decade of bias.
    pub plateau_spread: f64,
    /// Rate rises to a single interior peak, then decreases.
    pub unimodal: bool,
}

pub fn curve_shape(i_pr: &[f64], rate: &[f64]) -> Result<CurveShape> {
    if i_pr.len() != rate.len() || rate.len() < 3 {
        return Err(Error::Domain("curve needs at least three matching points".into()));
    }
    let peak_index = rate
        .iter()
        .enumerate()
        .fold(0, |best, (i, &r)| if r > rate[best] { i } else { best });
    let n = rate.len();
    let rising = rate[..=peak_index].windows(2).all(|w| w[1] >= w[0]);
    let falling = rate[peak_index..].windows(2).all(|w| w[1] <= w[0]);
    let top = i_pr[n - 1] / 10f64.sqrt();
    let tail: Vec<f64> = i_pr
        .iter()
        .zip(rate)
        .filter(|(&i, _)| i >= top)
        .map(|(_, &r)| r)
        .collect();
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    Ok(CurveShape {
        peak_index,
        rise_ratio: rate[peak_index] / rate[0],
        fall_ratio: rate[peak_index] / rate[n - 1],
        plateau_spread: (hi - lo) / lo,
        unimodal: rising && falling && peak_index > 0 && peak_index < n - 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    /// Required signal bandwidth, Hz.
    pub min_bandwidth: f64,
    /// Power cap, W.
    pub max_power: f64,
    /// Allowed excess over the asymptotic rate.
    #[serde(default = "default_slack")]
    pub rate_slack: f64,
    /// Source-follower pole over the required bandwidth.
    #[serde(default = "default_margin")]
    pub sf_margin: f64,
    #[serde(default = "default_pr_grid")]
    pub i_pr_grid: GridSpec,
}

fn default_slack() -> f64 {
    0.10
}

fn default_margin() -> f64 {
    1.2
}

fn default_pr_grid() -> GridSpec {
    GridSpec::Log {
        min: 1e-12,
        max: 1e-7,
        points_per_decade: 8.0,
    }
}

impl Constraints {
    pub fn new(min_bandwidth: f64, max_power: f64) -> Self {
        Constraints {
            min_bandwidth,
            max_power,
            rate_slack: default_slack(),
            sf_margin: default_margin(),
            i_pr_grid: default_pr_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rationale {
    #[serde(rename = "sf-limited")]
    SfLimited,
    #[serde(rename = "pr-limited")]
    PrLimited,
    #[serde(rename = "power-capped")]
    PowerCapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecommendation {
    #[serde(rename = "I_pr")]
    pub i_pr: f64,
    #[serde(rename = "I_sf")]
    pub i_sf: f64,
    pub predicted_rate: f64,
    pub predicted_bandwidth: f64,
    pub predicted_power: f64,
    pub asymptotic_rate: f64,
    pub rationale: Rationale,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding_constraint: Option<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// `I_sf` that puts the source-follower pole at `f_hz`.
pub fn i_sf_for_pole(f_hz: f64, params: &DeviceParams) -> f64 {
    2.0 * PI * f_hz * params.c_sf * params.u_t / params.kappa_sf
}

pub fn optimize(
    op: &OperatingPoint,
    constraints: &Constraints,
    bias: &BiasConfig,
    params: &DeviceParams,
) -> Result<BiasRecommendation> {
    if !(constraints.min_bandwidth > 0.0 && constraints.max_power > 0.0) {
        return Err(Error::Precondition(
            "min_bandwidth and max_power must be positive".into(),
        ));
    }
    if !(constraints.rate_slack > 0.0 && constraints.sf_margin > 0.0) {
        return Err(Error::Precondition("rate_slack and sf_margin must be positive".into()));
    }
    op.validate()?;
    params.validate()?;
    let grid = constraints.i_pr_grid.values()?;
    let i_sf = i_sf_for_pole(constraints.min_bandwidth * constraints.sf_margin, params);
    let base = bias.with_i_sf(i_sf);
    let at = |k: usize| base.with_i_pr(grid[k]);
    let last = grid.len() - 1;
    let mut notes = Vec::new();

    let metrics: Vec<PointMetrics> = (0..grid.len())
        .into_par_iter()
        .map(|k| evaluate_point(op, &at(k), params))
        .collect::<Result<Vec<_>>>()?;
    let r_inf = asymptotic_rate(op, &at(last), params)?;
    let finish = |k: usize, rationale, binding: Option<&str>, notes: Vec<String>| BiasRecommendation {
        i_pr: grid[k],
        i_sf,
        predicted_rate: metrics[k].rate_hz,
        predicted_bandwidth: metrics[k].bandwidth_hz,
        predicted_power: metrics[k].power_w,
        asymptotic_rate: r_inf,
        rationale,
        feasible: binding.is_none(),
        binding_constraint: binding.map(str::to_string),
        notes,
    };

    if metrics[0].power_w > constraints.max_power {
        notes.push("minimal bias already exceeds the power cap".into());
        return Ok(finish(0, Rationale::PowerCapped, Some("max_power"), notes));
    }

    let within = |k: usize| (metrics[k].rate_hz - r_inf).abs() <= constraints.rate_slack * r_inf;
    let plateau = (0..=last).rev().take_while(|&k| within(k)).last();
    let mut k = match plateau {
        Some(k) => k,
        None => {
            notes.push("rate does not settle within rate_slack on the I_pr grid".into());
            last
        }
    };

    let pr_system = build_system(op, &at(last), params)?;
    let pr_bandwidth = bandwidth_3db(&pr_system, Node::VPr)?;
    if pr_bandwidth < constraints.min_bandwidth {
        notes.push(format!(
            "photoreceptor bandwidth {pr_bandwidth:.4} Hz at the largest I_pr is below the requirement"
        ));
        let mut best = 0;
        for j in 0..=last {
            if metrics[j].power_w <= constraints.max_power && metrics[j].rate_hz < metrics[best].rate_hz {
                best = j;
            }
        }
        return Ok(finish(best, Rationale::PrLimited, Some("min_bandwidth"), notes));
    }

    while metrics[k].bandwidth_hz < constraints.min_bandwidth && k < last {
        k += 1;
    }
    let mut rationale = Rationale::SfLimited;
    if metrics[k].power_w > constraints.max_power {
        rationale = Rationale::PowerCapped;
        while k > 0 && metrics[k].power_w > constraints.max_power {
            k -= 1;
        }
    }
    let binding = if metrics[k].power_w > constraints.max_power {
        Some("max_power")
    } else if metrics[k].bandwidth_hz < constraints.min_bandwidth {
        Some("min_bandwidth")
    } else {
        None
    };
    Ok(finish(k, rationale, binding, notes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    #[serde(default = "default_budget")]
    pub max_evaluations: usize,
    #[serde(default = "default_tol")]
    pub step_tolerance: f64,
}

fn default_budget() -> usize {
    20_000
}

fn default_tol() -> f64 {
    1e-7
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            max_evaluations: default_budget(),
            step_tolerance: default_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fitted: DeviceParams,
    pub values: BTreeMap<String, f64>,
    /// Mean squared log10 PSD error.
    pub residual: f64,
    pub rms_log10_error: f64,
    pub evaluations: usize,
    pub starts: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

struct Fit<'a> {
    f: FrequencyGrid,
    log_meas: Vec<f64>,
    base: DeviceParams,
    free: &'a [String],
    op: &'a OperatingPoint,
    bias: &'a BiasConfig,
    node: Node,
}

impl Fit<'_> {
    fn params_at(&self, x: &[f64]) -> Option<DeviceParams> {
        let mut p = self.base;
        for (name, v) in self.free.iter().zip(x) {
            p.set(name, v.exp()).ok()?;
        }
        p.validate().ok().map(|_| p)
    }

    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        let p = self.params_at(x)?;
        let sys = build_system(self.op, self.bias, &p).ok()?;
        let spec = psd(&sys, self.node, &self.f).ok()?;
        let r: Vec<f64> = spec
            .total
            .iter()
            .zip(&self.log_meas)
            .map(|(m, y)| m.log10() - y)
            .collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn cost(&self, x: &[f64]) -> f64 {
        match self.residuals(x) {
            Some(r) => r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64,
            None => f64::INFINITY,
        }
    }
}

struct Descent {
    x: Vec<f64>,
    cost: f64,
    evaluations: usize,
    converged: bool,
}

fn coordinate_descent(fit: &Fit<'_>, x0: Vec<f64>, opts: &CalibrationOptions, budget: usize) -> Descent {
    let mut x = x0;
    let mut cost = fit.cost(&x);
    let mut evaluations = 1;
    let mut h = 2f64.ln();
    while h > opts.step_tolerance && evaluations < budget {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += dir * h;
                let c = fit.cost(&y);
                evaluations += 1;
                if c < cost {
                    x = y;
                    cost = c;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Descent {
        x,
        cost,
        evaluations,
        converged: h <= opts.step_tolerance,
    }
}

/// Levenberg-Marquardt polish with a forward-difference Jacobian.
fn refine(fit: &Fit<'_>, start: &Descent, iterations: usize) -> Descent {
    let mut x = start.x.clone();
    let Some(mut r) = fit.residuals(&x) else {
        return Descent {
            x,
            cost: start.cost,
            evaluations: 0,
            converged: start.converged,
        };
    };
    let n = x.len();
    let m = r.len();
    let mut cost = r.iter().map(|v| v * v).sum::<f64>() / m as f64;
    let mut lambda = 1e-3;
    let mut evaluations = 1;
    for _ in 0..iterations {
        let mut jac = DMatrix::<f64>::zeros(m, n);
        let mut ok = true;
        for j in 0..n {
            let eps = 1e-6;
            let mut y = x.clone();
            y[j] += eps;
            evaluations += 1;
            match fit.residuals(&y) {
                Some(ry) => {
                    for i in 0..m {
                        jac[(i, j)] = (ry[i] - r[i]) / eps;
                    }
                }
                None => ok = false,
            }
        }
        if !ok {
            break;
        }
        let rv = DVector::from_vec(r.clone());
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &rv;
        let mut stepped = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let y: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            evaluations += 1;
            if let Some(ry) = fit.residuals(&y) {
                let c = ry.iter().map(|v| v * v).sum::<f64>() / m as f64;
                if c < cost {
                    x = y;
                    r = ry;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    stepped = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !stepped || cost < 1e-20 {
            break;
        }
    }
    Descent {
        x,
        cost,
        evaluations,
        converged: start.converged,
    }
}

/// Fits the `free` device parameters to a measured PSD at `node`.
pub fn calibrate(
    measured: &[(f64, f64)],
    known: &DeviceParams,
    free: &[String],
    op: &OperatingPoint,
    bias: &BiasConfig,
    node: Node,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    if free.is_empty() {
        return Err(Error::Precondition("free parameter set is empty".into()));
    }
    for name in free {
        if known.get(name).is_none() {
            return Err(Error::Precondition(format!(
                "`{name}` is not fittable; choose from {:?}",
                DeviceParams::FITTABLE
            )));
        }
    }
    if measured.len() < 8 {
        return Err(Error::Precondition(format!(
            "need at least 8 PSD points, got {}",
            measured.len()
        )));
    }
    if measured
        .iter()
        .any(|&(f, s)| !(f > 0.0 && s > 0.0 && f.is_finite() && s.is_finite()))
    {
        return Err(Error::Precondition("PSD data must be positive and finite".into()));
    }
    let mut data = measured.to_vec();
    data.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid = FrequencyGrid::from_points(data.iter().map(|d| d.0).collect())?;
    let mut warnings = Vec::new();
    let span = (data[data.len() - 1].0 / data[0].0).log10();
    if span < 2.0 {
        warnings.push(format!("data spans {span:.2} decades; the fit is poorly conditioned"));
    }
    known.validate()?;
    let fit = Fit {
        f: grid,
        log_meas: data.iter().map(|d| d.1.log10()).collect(),
        base: *known,
        free,
        op,
        bias,
        node,
    };

    let x0: Vec<f64> = free.iter().map(|n| known.get(n).unwrap().ln()).collect();
    let factors: [fn(usize) -> f64; 5] = [
        |_| 1.0,
        |_| 0.5,
        |_| 2.0,
        |i| if i % 2 == 0 { 0.5 } else { 2.0 },
        |i| if i % 2 == 0 { 2.0 } else { 0.5 },
    ];
    let starts: Vec<Vec<f64>> = factors
        .iter()
        .map(|fac| {
            x0.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let name = free[i].as_str();
                    let mut y = v + fac(i).ln();
                    if name.starts_with("kappa") {
                        y = y.min(0.0);
                    }
                    y
                })
                .collect()
        })
        .collect();
    let per_start = opts.max_evaluations / starts.len();
    let runs: Vec<Descent> = starts
        .into_par_iter()
        .map(|s| coordinate_descent(&fit, s, opts, per_start))
        .collect();
    let mut evaluations: usize = runs.iter().map(|r| r.evaluations).sum();
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let polished = refine(&fit, &runs[best], 50);
    evaluations += polished.evaluations;
    let final_run = if polished.cost <= runs[best].cost {
        polished
    } else {
        runs.into_iter().nth(best).unwrap()
    };
    if !final_run.cost.is_finite() {
        return Err(Error::Numerical("no start produced a valid model".into()));
    }
    if !final_run.converged {
        warnings.push("evaluation budget exhausted before the step tolerance was reached".into());
    }
    let fitted = fit.params_at(&final_run.x).expect("best point is valid");
    let values = free.iter().map(|n| (n.clone(), fitted.get(n).unwrap())).collect();
    Ok(CalibrationReport {
        fitted,
        values,
        residual: final_run.cost,
        rms_log10_error: final_run.cost.sqrt(),
        evaluations,
        starts: factors.len(),
        converged: final_run.converged,
        warnings,
    })
}
