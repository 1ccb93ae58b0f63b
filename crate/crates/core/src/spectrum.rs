//! Per-source noise PSDs, cumulative RMS and shot-noise metrics.

use serde::{Deserialize, Serialize};

use crate::circuit::{Input, Node, NoiseSource, SmallSignalSystem};
use crate::error::{Error, Result};

pub const DEFAULT_POINTS_PER_DECADE: f64 = 64.0;
pub const MIN_POINTS_PER_DECADE: f64 = 16.0;
/// Default grid spans this factor below the slowest and above the fastest pole.
pub const DEFAULT_GRID_MARGIN: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub points: Vec<f64>,
}

impl FrequencyGrid {
    pub fn log(f_min: f64, f_max: f64, points_per_decade: f64) -> Result<Self> {
        if !(f_min > 0.0 && f_max > f_min && f_max.is_finite()) {
            return Err(Error::Domain(format!("invalid grid range [{f_min}, {f_max}]")));
        }
        if !(points_per_decade >= 1.0) {
            return Err(Error::Domain(format!(
                "points_per_decade must be >= 1, got {points_per_decade}"
            )));
        }
        let decades = (f_max / f_min).log10();
        let n = (decades * points_per_decade).ceil().max(1.0) as usize;
        let points = (0..=n)
            .map(|i| f_min * 10f64.powf(decades * i as f64 / n as f64))
            .collect();
        Ok(FrequencyGrid { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points[0] <= 0.0 || points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "grid points must be positive and strictly increasing".into(),
            ));
        }
        Ok(FrequencyGrid { points })
    }

    /// Log grid covering the system poles and any extra corner frequencies.
    pub fn for_system(system: &SmallSignalSystem, extra_hz: &[f64]) -> Result<Self> {
        let poles = system.pole_frequencies_hz();
        let lo = poles.iter().chain(extra_hz).cloned().fold(f64::INFINITY, f64::min);
        let hi = poles.iter().chain(extra_hz).cloned().fold(0.0, f64::max);
        Self::log(
            lo / DEFAULT_GRID_MARGIN,
            hi * DEFAULT_GRID_MARGIN,
            DEFAULT_POINTS_PER_DECADE,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_per_decade(&self) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        (n - 1) as f64 / (self.points[n - 1] / self.points[0]).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdUnits {
    /// V²/Hz at the node.
    VoltsSquaredPerHz,
    /// (log-e)²/Hz referred through the DC signal gain.
    TcSquaredPerHz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSeries {
    pub node: Node,
    pub grid: FrequencyGrid,
    /// Indexed by [`NoiseSource::index`].
    pub per_source: [Vec<f64>; 3],
    pub total: Vec<f64>,
    pub units: PsdUnits,
}

/// Per-source PSDs at `node`.
pub fn psd(system: &SmallSignalSystem, node: Node, grid: &FrequencyGrid) -> Result<SpectrumSeries> {
    let mut per_source: [Vec<f64>; 3] = Default::default();
    for src in NoiseSource::ALL {
        let s = system.injection(src).psd;
        per_source[src.index()] = grid
            .points
            .iter()
            .map(|&f| Ok(s * system.transfer_fn(Input::Noise(src), node, f)?.norm_sqr()))
            .collect::<Result<Vec<f64>>>()?;
    }
    let total = sum_sources(&per_source);
    Ok(SpectrumSeries {
        node,
        grid: grid.clone(),
        per_source,
        total,
        units: PsdUnits::VoltsSquaredPerHz,
    })
}

fn sum_sources(per_source: &[Vec<f64>; 3]) -> Vec<f64> {
    (0..per_source[0].len())
        .map(|i| per_source[0][i] + per_source[1][i] + per_source[2][i])
        .collect()
}

impl SpectrumSeries {
    pub fn source(&self, src: NoiseSource) -> &[f64] {
        &self.per_source[src.index()]
    }

    /// Photon shot-noise part: half of the photodiode source.
    pub fn photon(&self) -> Vec<f64> {
        self.source(NoiseSource::Pd).iter().map(|v| 0.5 * v).collect()
    }

    /// Same spectrum multiplied pointwise by `w(f)`.
    pub fn weighted(&self, w: impl Fn(f64) -> f64) -> SpectrumSeries {
        let ws: Vec<f64> = self.grid.points.iter().map(|&f| w(f)).collect();
        let per_source = self
            .per_source
            .clone()
            .map(|v| v.iter().zip(&ws).map(|(a, b)| a * b).collect::<Vec<f64>>());
        let total = sum_sources(&per_source);
        SpectrumSeries {
            per_source,
            total,
            ..self.clone()
        }
    }

    /// Refers the spectrum to TC log-e units through the node's DC signal gain.
    pub fn referred_to_tc(&self, system: &SmallSignalSystem) -> Result<SpectrumSeries> {
        if self.units == PsdUnits::TcSquaredPerHz {
            return Ok(self.clone());
        }
        let g = system.signal_gain(self.node);
        if !(g > 0.0) {
            return Err(Error::Domain(format!("node {} has no signal gain", self.node)));
        }
        let mut out = self.weighted(|_| 1.0 / (g * g));
        out.units = PsdUnits::TcSquaredPerHz;
        Ok(out)
    }

    /// Integrated power of one source over the grid.
    pub fn power(&self, src: NoiseSource) -> f64 {
        trapezoid(&self.grid.points, self.source(src))
    }

    pub fn total_power(&self) -> f64 {
        trapezoid(&self.grid.points, &self.total)
    }
}

/// Converts a voltage quantity at `node` to TC log-e units.
pub fn refer_to_tc(value: f64, system: &SmallSignalSystem, node: Node) -> Result<f64> {
    let g = system.signal_gain(node);
    if !(g > 0.0) {
        return Err(Error::Domain(format!("node {node} has no signal gain")));
    }
    Ok(value / g)
}

/// Trapezoidal rule in linear `x`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

fn cumulative_trapezoid(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    out.push(0.0);
    for i in 1..x.len() {
        acc += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRms {
    pub grid: FrequencyGrid,
    pub units: PsdUnits,
    pub per_source: [Vec<f64>; 3],
    pub total: Vec<f64>,
    pub final_rms: [f64; 3],
    pub final_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl CumulativeRms {
    pub fn final_of(&self, src: NoiseSource) -> f64 {
        self.final_rms[src.index()]
    }
}

pub fn cumulative_rms(spectrum: &SpectrumSeries) -> CumulativeRms {
    let x = &spectrum.grid.points;
    let per_pow = spectrum.per_source.clone().map(|y| cumulative_trapezoid(x, &y));
    let tot_pow: Vec<f64> = (0..x.len())
        .map(|i| per_pow[0][i] + per_pow[1][i] + per_pow[2][i])
        .collect();
    let final_rms = per_pow.clone().map(|v| v.last().copied().unwrap_or(0.0).sqrt());
    let final_total = tot_pow.last().copied().unwrap_or(0.0).sqrt();
    let ppd = spectrum.grid.points_per_decade();
    let warning = (ppd < MIN_POINTS_PER_DECADE)
        .then(|| format!("grid has {ppd:.1} points per decade, below {MIN_POINTS_PER_DECADE}"));
    CumulativeRms {
        grid: spectrum.grid.clone(),
        units: spectrum.units,
        per_source: per_pow.map(|v| v.into_iter().map(f64::sqrt).collect()),
        total: tot_pow.into_iter().map(f64::sqrt).collect(),
        final_rms,
        final_total,
        warning,
    }
}

/// Share of integrated noise power due to photon shot noise.
pub fn photon_fraction(spectrum: &SpectrumSeries) -> Result<f64> {
    let total = spectrum.total_power();
    if !(total > 0.0) {
        return Err(Error::Domain("total noise power is zero".into()));
    }
    Ok(0.5 * spectrum.power(NoiseSource::Pd) / total)
}

/// Total integrated noise power relative to the photon shot-noise power.
pub fn shot_limit_ratio(spectrum: &SpectrumSeries) -> Result<f64> {
    let photon = 0.5 * spectrum.power(NoiseSource::Pd);
    if !(photon > 0.0) {
        return Err(Error::Domain("photon shot-noise power is zero".into()));
    }
    Ok(spectrum.total_power() / photon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_system;
    use crate::params::{BiasConfig, DeviceParams, OperatingPoint};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn system(i_pd: f64, i_pr: f64, i_sf: f64) -> SmallSignalSystem {
        let op = OperatingPoint::from_current(i_pd).unwrap();
        let b = BiasConfig::davis346_default().with_i_pr(i_pr).with_i_sf(i_sf);
        build_system(&op, &b, &DeviceParams::davis346_default()).unwrap()
    }

    fn synthetic(grid: &FrequencyGrid, s: impl Fn(f64) -> f64) -> SpectrumSeries {
        let pd: Vec<f64> = grid.points.iter().map(|&f| s(f)).collect();
        let zero = vec![0.0; pd.len()];
        SpectrumSeries {
            node: Node::VPr,
            grid: grid.clone(),
            total: pd.clone(),
            per_source: [pd, zero.clone(), zero],
            units: PsdUnits::VoltsSquaredPerHz,
        }
    }

    #[test]
    fn single_pole_rms_oracle() {
        let (s0, fc) = (1e-10, 1.0);
        let grid = FrequencyGrid::log(fc * 1e-4, fc * 1e7, DEFAULT_POINTS_PER_DECADE).unwrap();
        let cum = cumulative_rms(&synthetic(&grid, |f| s0 / (1.0 + (f / fc).powi(2))));
        let exact = (s0 * fc * PI / 2.0).sqrt();
        assert!((exact - 1.2533e-5).abs() < 1e-9);
        assert!(((cum.final_total - exact) / exact).abs() < 1e-3);
        assert!(cum.warning.is_none());
    }

    #[test]
    fn coarse_grid_warns() {
        let grid = FrequencyGrid::log(1.0, 1e4, 4.0).unwrap();
        assert!(cumulative_rms(&synthetic(&grid, |_| 1.0)).warning.is_some());
    }

    #[test]
    fn photodiode_only_spectrum_sits_on_the_floor() {
        let grid = FrequencyGrid::log(1.0, 1e3, 32.0).unwrap();
        let s = synthetic(&grid, |f| 1.0 / (1.0 + f));
        assert!((photon_fraction(&s).unwrap() - 0.5).abs() < 1e-12);
        assert!((shot_limit_ratio(&s).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(shot_limit_ratio(&s.weighted(|_| 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn tc_referral_divides_by_squared_gain() {
        let sys = system(2.5e-15, 3e-9, 1e-11);
        let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
        let v = psd(&sys, Node::VSf, &grid).unwrap();
        let t = v.referred_to_tc(&sys).unwrap();
        let g = sys.signal_gain(Node::VSf);
        assert_eq!(t.units, PsdUnits::TcSquaredPerHz);
        assert!(((t.total_power() * g * g - v.total_power()) / v.total_power()).abs() < 1e-12);
        assert!((refer_to_tc(g, &sys, Node::VSf).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn photodiode_contribution_independent_of_pr_bias_in_band() {
        let lo = system(2.5e-15, 1e-11, 1e-11);
        let hi = system(2.5e-15, 3e-9, 1e-11);
        let grid = FrequencyGrid::log(0.01, 0.3, 16.0).unwrap();
        let a = psd(&lo, Node::VPr, &grid).unwrap();
        let b = psd(&hi, Node::VPr, &grid).unwrap();
        for (x, y) in a.source(NoiseSource::Pd).iter().zip(b.source(NoiseSource::Pd)) {
            assert!(((x - y) / y).abs() < 0.01);
        }
    }

    fn scaled_pr_psd(i_prs: &[f64], x: f64) -> Vec<f64> {
        i_prs
            .iter()
            .map(|&i_pr| {
                let g = FrequencyGrid::from_points(vec![x * i_pr]).unwrap();
                psd(&system(2.5e-15, i_pr, 1e-11), Node::VPr, &g)
                    .unwrap()
                    .source(NoiseSource::Pr)[0]
                    * i_pr
            })
            .collect()
    }

    fn assert_collapsed(i_prs: &[f64], x_min: f64) {
        for x in (0..=12).map(|k| x_min * 10f64.powf(k as f64 / 4.0)) {
            let v = scaled_pr_psd(i_prs, x);
            for y in &v[1..] {
                assert!(((y - v[0]) / v[0]).abs() < 0.10, "f/I_pr = {x:e}: {v:?}");
            }
        }
    }

    #[test]
    fn pr_spectrum_collapses_against_f_over_ipr() {
        // The low band is pinned by the photodiode zero; the shift holds where the I_pr power lives.
        let x_fast = system(2.5e-15, 1e-8, 1e-11).pole_frequencies_hz()[2] / 1e-8;
        assert_collapsed(&[1e-9, 1e-8], x_fast);
        // At 100 pA the photoreceptor poles merge and the resonant peak rises above the shifted curve.
        assert_collapsed(&[1e-10, 1e-9, 1e-8], 3.0 * x_fast);
    }

    #[test]
    fn default_grid_spans_poles_with_margin() {
        let sys = system(2.5e-15, 3e-9, 1e-11);
        let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
        let p = sys.pole_frequencies_hz();
        assert!(grid.points[0] <= p[0] / DEFAULT_GRID_MARGIN * (1.0 + 1e-9));
        assert!(*grid.points.last().unwrap() >= p[2] * DEFAULT_GRID_MARGIN * (1.0 - 1e-9));
        assert!(grid.points_per_decade() >= DEFAULT_POINTS_PER_DECADE - 1e-9);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(FrequencyGrid::log(0.0, 1.0, 10.0).is_err());
        assert!(FrequencyGrid::log(10.0, 1.0, 10.0).is_err());
        assert!(FrequencyGrid::from_points(vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn total_is_sum_of_sources(lpd in -15.0..-11.0f64, lpr in -12.0..-7.0f64, node in 0usize..3) {
            let sys = system(10f64.powf(lpd), 10f64.powf(lpr), 1e-11);
            let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
            let s = psd(&sys, Node::ALL[node], &grid).unwrap();
            for i in 0..grid.len() {
                let sum = s.per_source[0][i] + s.per_source[1][i] + s.per_source[2][i];
                prop_assert!((s.total[i] - sum).abs() <= 1e-12 * sum);
            }
        }

        #[test]
        fn lowering_isf_never_raises_sf_node_rms(lpr in -11.0..-8.0f64, lsf in -12.0..-9.0f64, drop in 1.5..20.0f64) {
            let i_pr = 10f64.powf(lpr);
            let hi = system(2.5e-15, i_pr, 10f64.powf(lsf));
            let lo = system(2.5e-15, i_pr, 10f64.powf(lsf) / drop);
            let poles: Vec<f64> = hi.pole_frequencies_hz().iter().chain(&lo.pole_frequencies_hz()).cloned().collect();
            let f_lo = poles.iter().cloned().fold(f64::INFINITY, f64::min) / 1e3;
            let f_hi = poles.iter().cloned().fold(0.0, f64::max) * 1e3;
            let grid = FrequencyGrid::log(f_lo, f_hi, 64.0).unwrap();
            let a = cumulative_rms(&psd(&hi, Node::VSf, &grid).unwrap());
            let b = cumulative_rms(&psd(&lo, Node::VSf, &grid).unwrap());
            for src in [NoiseSource::Pd, NoiseSource::Pr] {
                prop_assert!(b.final_of(src) <= a.final_of(src) * (1.0 + 1e-9));
            }
        }

        #[test]
        fn photon_fraction_is_scale_invariant(c in 1e-6..1e6f64) {
            let sys = system(2.5e-15, 1e-10, 1e-11);
            let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
            let s = psd(&sys, Node::VSf, &grid).unwrap();
            let a = photon_fraction(&s).unwrap();
            let b = photon_fraction(&s.weighted(|_| c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }

        #[test]
        fn cumulative_rms_is_monotone(lpr in -12.0..-7.0f64) {
            let sys = system(2.5e-15, 10f64.powf(lpr), 1e-11);
            let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
            let cum = cumulative_rms(&psd(&sys, Node::VSf, &grid).unwrap());
            prop_assert!(cum.total.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
