//! Seeded Monte-Carlo time-domain simulation and Welch PSD estimation.
//!
//! State is `[v_in, v_pr, v_sf, z]`, where `z` is the change-amplifier
//! output in TC log-e units. Each step is propagated exactly with the
//! matrix exponential of the augmented system, holding the injected
//! currents constant over the step.

use std::f64::consts::PI;

use nalgebra::SMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::circuit::{Node, NoiseSource, SmallSignalSystem};
use crate::error::{Error, Result};
use crate::events::leak_rate;
use crate::params::{BiasConfig, DeviceParams};

/// Warm-up length in units of the slowest time constant.
pub const WARMUP_TIME_CONSTANTS: f64 = 5.0;
pub const MAX_WARMUP_STEPS: u64 = 50_000_000;
pub const MIN_PSD_SAMPLES: usize = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DriveMode {
    #[default]
    #[serde(rename = "gaussian-white")]
    GaussianWhite,
    #[serde(rename = "poisson-photon")]
    PoissonPhoton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEnable {
    #[serde(default = "yes")]
    pub pd: bool,
    #[serde(default = "yes")]
    pub pr: bool,
    #[serde(default = "yes")]
    pub sf: bool,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl Default for NoiseEnable {
    fn default() -> Self {
        NoiseEnable {
            pd: true,
            pr: true,
            sf: true,
        }
    }
}

impl NoiseEnable {
    pub fn none() -> Self {
        NoiseEnable {
            pd: false,
            pr: false,
            sf: false,
        }
    }

    fn get(&self, src: NoiseSource) -> bool {
        match src {
            NoiseSource::Pd => self.pd,
            NoiseSource::Pr => self.pr,
            NoiseSource::Sf => self.sf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Simulated time after warm-up, s.
    pub duration: f64,
    /// Step, s; chosen from the fastest time constant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub drive_mode: DriveMode,
    #[serde(default)]
    pub record_traces: bool,
    /// Keep every n-th sample in the trace.
    #[serde(default = "one")]
    pub trace_stride: usize,
    /// Piecewise-constant log-intensity `(t, value)` pairs; zero before the first pair.
    #[serde(default)]
    pub stimulus: Vec<(f64, f64)>,
    #[serde(default)]
    pub noise: NoiseEnable,
    #[serde(default = "yes")]
    pub leak: bool,
    #[serde(default = "yes")]
    pub warmup: bool,
}

impl SimConfig {
    pub fn new(duration: f64, seed: u64) -> Self {
        SimConfig {
            duration,
            dt: None,
            seed,
            drive_mode: DriveMode::GaussianWhite,
            record_traces: false,
            trace_stride: 1,
            stimulus: Vec::new(),
            noise: NoiseEnable::default(),
            leak: true,
            warmup: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    On,
    Off,
    LeakOn,
}

impl Polarity {
    /// Integer code used in event CSV files.
    pub fn code(self) -> i32 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
            Polarity::LeakOn => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Traces {
    pub t: Vec<f64>,
    pub v_pr: Vec<f64>,
    pub v_sf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub duration: f64,
    pub dt: f64,
    pub steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub n_on: u64,
    pub n_off: u64,
    pub n_leak: u64,
    pub on_rate: f64,
    pub off_rate: f64,
    /// ON plus OFF noise events per second, leak excluded.
    pub total_rate: f64,
    pub leak_rate: f64,
    /// Rate of fixed-level threshold crossings by the change-amplifier state, no reset.
    pub level_crossing_rate: f64,
    pub var_v_pr: f64,
    pub var_v_sf: f64,
    /// Variance of the change-amplifier input `v_sf / gain`, log-e².
    pub var_tc_sf: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub events: Vec<EventRecord>,
    pub traces: Option<Traces>,
    pub summary: SimSummary,
}

type M4 = SMatrix<f64, 4, 4>;

struct Discretized {
    phi: [[f64; 4]; 4],
    gam: [[f64; 3]; 4],
}

fn augmented(system: &SmallSignalSystem, params: &DeviceParams) -> Result<(M4, SMatrix<f64, 4, 3>)> {
    let c_inv = system
        .c
        .try_inverse()
        .ok_or_else(|| Error::Numerical("capacitance matrix is singular".into()))?;
    let a3 = -(c_inv * system.g);
    let w_ca = 2.0 * PI * params.f_ca;
    let gain = system.signal_gain(Node::VSf);
    let mut a = M4::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&a3);
    a[(3, 2)] = w_ca / gain;
    a[(3, 3)] = -w_ca;
    let mut b = SMatrix::<f64, 4, 3>::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(&c_inv);
    Ok((a, b))
}

/// Fastest and slowest time constants of the simulated dynamics, s.
pub fn time_constants(system: &SmallSignalSystem, params: &DeviceParams) -> (f64, f64) {
    let mut mags: Vec<f64> = system.natural_frequencies().iter().map(|s| s.norm()).collect();
    mags.push(2.0 * PI * params.f_ca);
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let min = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    (1.0 / max, 1.0 / min)
}

/// Largest permitted step: a tenth of the fastest time constant.
pub fn max_dt(system: &SmallSignalSystem, params: &DeviceParams) -> f64 {
    time_constants(system, params).0 / 10.0
}

fn discretize(a: &M4, b: &SMatrix<f64, 4, 3>, dt: f64) -> Discretized {
    let mut m = SMatrix::<f64, 7, 7>::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&(a * dt));
    m.fixed_view_mut::<4, 3>(0, 4).copy_from(&(b * dt));
    let e = m.exp();
    let mut phi = [[0.0; 4]; 4];
    let mut gam = [[0.0; 3]; 4];
    for r in 0..4 {
        for c in 0..4 {
            phi[r][c] = e[(r, c)];
        }
        for c in 0..3 {
            gam[r][c] = e[(r, 4 + c)];
        }
    }
    Discretized { phi, gam }
}

fn stimulus_at(stim: &[(f64, f64)], t: f64) -> f64 {
    let idx = stim.partition_point(|&(ts, _)| ts <= t);
    if idx == 0 {
        0.0
    } else {
        stim[idx - 1].1
    }
}

/// Runs one seeded trial.
pub fn simulate(
    system: &SmallSignalSystem,
    bias: &BiasConfig,
    params: &DeviceParams,
    sim: &SimConfig,
) -> Result<SimOutput> {
    bias.validate()?;
    let limit = max_dt(system, params);
    let dt = sim.dt.unwrap_or(limit);
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if dt > limit * (1.0 + 1e-9) {
        return Err(Error::Domain(format!(
            "dt = {dt:e} s is too coarse; the fastest time constant requires dt <= {limit:e} s"
        )));
    }
    if !(sim.duration >= dt) {
        return Err(Error::Domain(format!("duration {} s is shorter than dt", sim.duration)));
    }
    if sim.trace_stride == 0 {
        return Err(Error::Domain("trace_stride must be at least 1".into()));
    }
    if sim.stimulus.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Domain("stimulus times must be non-decreasing".into()));
    }

    let (a, b) = augmented(system, params)?;
    let d = discretize(&a, &b, dt);
    let mut warnings = Vec::new();

    let q = params.q_e;
    let sd = NoiseSource::ALL.map(|src| {
        if sim.noise.get(src) {
            (system.injection(src).psd / (2.0 * dt)).sqrt()
        } else {
            0.0
        }
    });
    let poisson = match sim.drive_mode {
        DriveMode::PoissonPhoton if sim.noise.pd && system.injection(NoiseSource::Pd).psd > 0.0 => {
            let lambda = system.i_pd * dt / q;
            Some(Poisson::new(lambda).map_err(|e| Error::Numerical(format!("photon sampler: {e}")))?)
        }
        _ => None,
    };
    // In photon mode the Gaussian part of the photodiode source is the feedback transistor only.
    let sd_pd = if poisson.is_some() { sd[0] / 2f64.sqrt() } else { sd[0] };

    let leak_ramp = if sim.leak {
        bias.theta_on * leak_rate(params, bias, system)?
    } else {
        0.0
    };
    let gain_sf = system.signal_gain(Node::VSf);
    let steps = (sim.duration / dt).round() as u64;
    let (_, tau_slow) = time_constants(system, params);
    let mut warmup_steps = if sim.warmup {
        (WARMUP_TIME_CONSTANTS * tau_slow / dt).ceil() as u64
    } else {
        0
    };
    if warmup_steps > MAX_WARMUP_STEPS {
        warnings.push(format!(
            "warm-up truncated from {warmup_steps} to {MAX_WARMUP_STEPS} steps"
        ));
        warmup_steps = MAX_WARMUP_STEPS;
    }
    let hold_steps = (bias.delta_refr / dt - 1e-9).ceil().max(0.0) as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut x = [0.0f64; 4];
    let draw = |rng: &mut ChaCha8Rng, signal: f64| -> [f64; 3] {
        let n0: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        let mut i0 = sd_pd * n0 + signal;
        if let Some(p) = &poisson {
            let k: f64 = p.sample(rng);
            i0 += (k * q - system.i_pd * dt) / dt;
        }
        [i0, sd[1] * n1, sd[2] * n2]
    };
    let step = |x: &[f64; 4], u: &[f64; 3]| -> [f64; 4] {
        let mut nx = [0.0; 4];
        for ((out, p), g) in nx.iter_mut().zip(&d.phi).zip(&d.gam) {
            *out = p[0] * x[0] + p[1] * x[1] + p[2] * x[2] + p[3] * x[3] + g[0] * u[0] + g[1] * u[1] + g[2] * u[2];
        }
        nx
    };

    for _ in 0..warmup_steps {
        let u = draw(&mut rng, 0.0);
        x = step(&x, &u);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite state after warm-up: {x:?}")));
    }

    let mut events = Vec::new();
    let mut traces = sim.record_traces.then(Traces::default);
    let (mut n_on, mut n_off, mut n_leak) = (0u64, 0u64, 0u64);
    let mut leak_acc = 0.0;
    let mut leak_since_reset = 0.0;
    let mut memorized = x[3];
    let mut next_allowed = 0u64;
    let mut stats = [Welford::default(), Welford::default(), Welford::default()];

    // Crossings of the fixed levels +theta_on and -theta_off, without reset.
    let (mut n_cross, mut above, mut below) = (0u64, false, false);
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let signal = if sim.stimulus.is_empty() {
            0.0
        } else {
            -system.i_pd * stimulus_at(&sim.stimulus, t0)
        };
        let u = draw(&mut rng, signal);
        x = step(&x, &u);
        let t = (k + 1) as f64 * dt;
        if !(x[1].is_finite() && x[2].is_finite() && x[3].is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {t} s: {x:?}")));
        }
        stats[0].push(x[1]);
        stats[1].push(x[2]);
        stats[2].push(x[2] / gain_sf);
        let (up, down) = (x[3] >= bias.theta_on, x[3] <= -bias.theta_off);
        n_cross += (up && !above) as u64 + (down && !below) as u64;
        (above, below) = (up, down);
        if let Some(tr) = traces.as_mut() {
            if k % sim.trace_stride as u64 == 0 {
                tr.t.push(t);
                tr.v_pr.push(x[1]);
                tr.v_sf.push(x[2]);
            }
        }

        leak_acc += leak_ramp * dt;
        leak_since_reset += leak_ramp * dt;
        let y = x[3] + leak_acc;
        if k < next_allowed {
            memorized = y;
            leak_since_reset = 0.0;
            continue;
        }
        let polarity = if y - memorized >= bias.theta_on {
            if leak_since_reset >= bias.theta_on {
                n_leak += 1;
                Polarity::LeakOn
            } else {
                n_on += 1;
                Polarity::On
            }
        } else if memorized - y >= bias.theta_off {
            n_off += 1;
            Polarity::Off
        } else {
            continue;
        };
        events.push(EventRecord { timestamp: t, polarity });
        memorized = y;
        leak_since_reset = 0.0;
        next_allowed = k + hold_steps;
    }

    let duration = steps as f64 * dt;
    let summary = SimSummary {
        duration,
        dt,
        steps,
        warmup_steps,
        seed: sim.seed,
        n_on,
        n_off,
        n_leak,
        on_rate: n_on as f64 / duration,
        off_rate: n_off as f64 / duration,
        total_rate: (n_on + n_off) as f64 / duration,
        leak_rate: n_leak as f64 / duration,
        level_crossing_rate: n_cross as f64 / duration,
        var_v_pr: stats[0].variance(),
        var_v_sf: stats[1].variance(),
        var_tc_sf: stats[2].variance(),
        warnings,
    };
    Ok(SimOutput {
        events,
        traces,
        summary,
    })
}

/// Independent trials with the given seeds, returned in seed order.
pub fn simulate_trials(
    system: &SmallSignalSystem,
    bias: &BiasConfig,
    params: &DeviceParams,
    sim: &SimConfig,
    seeds: &[u64],
) -> Result<Vec<SimOutput>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig { seed, ..sim.clone() };
            simulate(system, bias, params, &cfg)
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// One-sided averaged periodogram of a uniformly sampled trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPsd {
    pub f: Vec<f64>,
    pub psd: Vec<f64>,
    pub segment_len: usize,
    pub segments: usize,
}

impl EmpiricalPsd {
    /// Integral of the estimate, comparable to the sample variance.
    pub fn integral(&self) -> f64 {
        let df = if self.f.len() > 1 { self.f[1] - self.f[0] } else { 0.0 };
        self.psd.iter().sum::<f64>() * df
    }
}

/// Welch estimate with Hann windows, 50% overlap and per-segment mean removal.
pub fn empirical_psd(trace: &[f64], dt: f64, segment_len: Option<usize>) -> Result<EmpiricalPsd> {
    if trace.len() < MIN_PSD_SAMPLES {
        return Err(Error::Accuracy(format!(
            "trace has {} samples; at least {MIN_PSD_SAMPLES} are required",
            trace.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let n = match segment_len {
        Some(n) if n >= 16 && n <= trace.len() => n,
        Some(n) => {
            return Err(Error::Domain(format!(
                "segment length {n} is invalid for {} samples",
                trace.len()
            )))
        }
        None => {
            let target = (trace.len() / 8).clamp(256, 1 << 16);
            1usize << (usize::BITS - 1 - target.leading_zeros())
        }
    };
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let fs = 1.0 / dt;
    let hop = n / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut segments = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut start = 0;
    while start + n <= trace.len() {
        let seg = &trace[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (fs * w2 * segments as f64);
    let psd = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if k == 0 || (n % 2 == 0 && k == n / 2) {
                p * scale
            } else {
                2.0 * p * scale
            }
        })
        .collect();
    let f = (0..bins).map(|k| k as f64 * fs / n as f64).collect();
    Ok(EmpiricalPsd {
        f,
        psd,
        segment_len: n,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_system;
    use crate::params::OperatingPoint;
    use crate::spectrum::{cumulative_rms, psd, FrequencyGrid};
    use proptest::prelude::*;
    use rand::Rng;

    fn setup(i_pd: f64, i_pr: f64) -> (SmallSignalSystem, BiasConfig, DeviceParams) {
        let p = DeviceParams::davis346_default();
        let b = BiasConfig::davis346_default().with_i_pr(i_pr);
        let op = OperatingPoint::from_current(i_pd).unwrap();
        (build_system(&op, &b, &p).unwrap(), b, p)
    }

    fn quiet(duration: f64) -> SimConfig {
        SimConfig {
            noise: NoiseEnable::none(),
            leak: false,
            ..SimConfig::new(duration, 0)
        }
    }

    #[test]
    fn silent_pixel_emits_nothing() {
        let (sys, b, p) = setup(2.5e-15, 3e-9);
        let out = simulate(&sys, &b, &p, &quiet(5.0)).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.summary.var_v_pr, 0.0);
    }

    #[test]
    fn leak_alone_matches_charge_balance() {
        let (_, b, mut p) = setup(2.5e-13, 3e-9);
        p.i_leak = 5e-16;
        let sys = build_system(&OperatingPoint::from_current(2.5e-13).unwrap(), &b, &p).unwrap();
        let rate = leak_rate(&p, &b, &sys).unwrap();
        let duration = 20.0 / rate;
        let out = simulate(
            &sys,
            &b,
            &p,
            &SimConfig {
                leak: true,
                ..quiet(duration)
            },
        )
        .unwrap();
        assert!(out.events.iter().all(|e| e.polarity == Polarity::LeakOn));
        assert!((out.summary.n_leak as i64 - 20).abs() <= 1, "{}", out.summary.n_leak);
        let gaps: Vec<f64> = out.events.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
        assert!(gaps.iter().all(|g| (g * rate - 1.0).abs() < 1e-3), "{gaps:?}");
    }

    #[test]
    fn step_stimulus_counts_thresholds() {
        let (sys, b, p) = setup(2.5e-13, 3e-9);
        let count = |level: f64| {
            let sim = SimConfig {
                stimulus: vec![(0.2, level * b.theta_on)],
                ..quiet(3.0)
            };
            simulate(&sys, &b, &p, &sim).unwrap().events
        };
        // The change amplifier approaches the step exponentially, so an exact multiple is never reached.
        let ev = count(2.2);
        assert_eq!(ev.len(), 2);
        assert!(ev.iter().all(|e| e.polarity == Polarity::On));
        assert_eq!(count(1.9).len(), 1);
        let down = count(-2.2);
        assert_eq!(down.len(), 2);
        assert!(down.iter().all(|e| e.polarity == Polarity::Off));
        assert!(count(0.9).is_empty());
    }

    #[test]
    fn step_response_settles_to_dc_gain() {
        let (sys, b, p) = setup(2.5e-13, 3e-9);
        let sim = SimConfig {
            stimulus: vec![(0.0, 0.01)],
            record_traces: true,
            ..quiet(2.0)
        };
        let tr = simulate(&sys, &b, &p, &sim).unwrap().traces.unwrap();
        let want = 0.01 * sys.signal_gain(Node::VPr);
        assert!((tr.v_pr.last().unwrap() - want).abs() < 1e-6 * want);
        assert!((tr.v_sf.last().unwrap() - want).abs() < 1e-6 * want);
    }

    #[test]
    fn zero_order_hold_is_step_size_independent() {
        let (sys, b, p) = setup(2.5e-13, 3e-9);
        let dt = max_dt(&sys, &p);
        let run = |h: f64| {
            let sim = SimConfig {
                dt: Some(h),
                stimulus: vec![(0.0, 0.05)],
                record_traces: true,
                ..quiet(4096.0 * dt)
            };
            simulate(&sys, &b, &p, &sim).unwrap().traces.unwrap()
        };
        let (a, c) = (run(dt), run(dt / 4.0));
        let peak = a.v_pr.iter().cloned().fold(0.0, f64::max);
        for i in 0..a.t.len() {
            assert!((a.v_pr[i] - c.v_pr[4 * i + 3]).abs() < 1e-3 * peak);
        }
    }

    #[test]
    fn coarse_step_and_short_run_rejected() {
        let (sys, b, p) = setup(2.5e-15, 3e-9);
        let dt = max_dt(&sys, &p);
        let coarse = SimConfig {
            dt: Some(2.0 * dt),
            ..quiet(1.0)
        };
        assert!(matches!(simulate(&sys, &b, &p, &coarse), Err(Error::Domain(_))));
        let short = SimConfig {
            dt: Some(dt),
            ..quiet(0.5 * dt)
        };
        assert!(simulate(&sys, &b, &p, &short).is_err());
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let (sys, b, p) = setup(2.5e-15, 1e-11);
        let sim = SimConfig::new(20.0, 42);
        let a = simulate(&sys, &b, &p, &sim).unwrap();
        let c = simulate(&sys, &b, &p, &sim).unwrap();
        assert_eq!(a.events, c.events);
        assert!(!a.events.is_empty());
        let other = simulate(
            &sys,
            &b,
            &p,
            &SimConfig {
                seed: 43,
                ..sim.clone()
            },
        )
        .unwrap();
        assert_ne!(a.events, other.events);
        let trials = simulate_trials(&sys, &b, &p, &sim, &[42, 43]).unwrap();
        assert_eq!(trials[0].events, a.events);
        assert_eq!(trials[1].events, other.events);
    }

    #[test]
    fn variance_matches_model() {
        let (sys, b, p) = setup(2.5e-15, 3e-9);
        let out = simulate(&sys, &b, &p, &SimConfig::new(60.0, 7)).unwrap();
        let grid = FrequencyGrid::for_system(&sys, &[]).unwrap();
        let model = cumulative_rms(&psd(&sys, Node::VPr, &grid).unwrap())
            .final_total
            .powi(2);
        assert!(
            ((out.summary.var_v_pr - model) / model).abs() < 0.10,
            "{} vs {model}",
            out.summary.var_v_pr
        );
    }

    #[test]
    fn fixed_level_crossings_follow_rice() {
        let (sys, b, p) = setup(2.5e-15, 1e-11);
        let rice = crate::events::predict_rate(&sys, &b, &p).unwrap().total_rate;
        let sim = SimConfig {
            leak: false,
            ..SimConfig::new(2000.0, 9)
        };
        let got = simulate(&sys, &b, &p, &sim).unwrap().summary.level_crossing_rate;
        assert!(((got - rice) / rice).abs() < 0.15, "{got} vs {rice}");
    }

    #[test]
    fn drive_modes_agree_at_high_photon_rate() {
        let (sys, b, p) = setup(1e-13, 3e-9);
        let run = |mode| {
            let sim = SimConfig {
                drive_mode: mode,
                record_traces: true,
                ..SimConfig::new(20.0, 3)
            };
            let out = simulate(&sys, &b, &p, &sim).unwrap();
            empirical_psd(&out.traces.unwrap().v_pr, out.summary.dt, Some(1 << 14)).unwrap()
        };
        let (g, q) = (run(DriveMode::GaussianWhite), run(DriveMode::PoissonPhoton));
        let f_pole = sys.pole_frequencies_hz()[0];
        let band = |e: &EmpiricalPsd| {
            let sel: Vec<f64> =
                e.f.iter()
                    .zip(&e.psd)
                    .filter(|(f, _)| **f > 0.1 * f_pole && **f < 3.0 * f_pole)
                    .map(|(_, s)| *s)
                    .collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        assert!(((band(&g) - band(&q)) / band(&g)).abs() < 0.20);
    }

    #[test]
    fn welch_white_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (sigma, fs) = (0.5, 1000.0);
        let x: Vec<f64> = (0..1 << 17)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let e = empirical_psd(&x, 1.0 / fs, None).unwrap();
        let level = sigma * sigma / (fs / 2.0);
        let inner = &e.psd[1..e.psd.len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!(((mean - level) / level).abs() < 0.10);
        for chunk in inner.chunks_exact(inner.len() / 8) {
            let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
            assert!(((m - level) / level).abs() < 0.10);
        }
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!(((e.integral() - var) / var).abs() < 0.05);
    }

    #[test]
    fn welch_sinusoid_parseval() {
        let (amp, fs, f0) = (2.0, 1000.0, 37.3);
        let x: Vec<f64> = (0..1 << 15)
            .map(|i| amp * (2.0 * PI * f0 * i as f64 / fs).sin())
            .collect();
        let e = empirical_psd(&x, 1.0 / fs, None).unwrap();
        assert!(((e.integral() - amp * amp / 2.0) / (amp * amp / 2.0)).abs() < 0.05);
    }

    #[test]
    fn short_trace_rejected() {
        assert!(matches!(
            empirical_psd(&[0.0; 100], 1e-3, None),
            Err(Error::Accuracy(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn events_respect_refractory_and_order(seed in 0u64..1000, theta in 0.03..0.08f64, refr in 1e-3..0.05f64) {
            let (_, _, p) = setup(2.5e-15, 1e-11);
            let b = BiasConfig { theta_on: theta, theta_off: theta, delta_refr: refr, ..BiasConfig::davis346_default().with_i_pr(1e-11) };
            let sys = build_system(&OperatingPoint::from_current(2.5e-15).unwrap(), &b, &p).unwrap();
            let out = simulate(&sys, &b, &p, &SimConfig::new(10.0, seed)).unwrap();
            for w in out.events.windows(2) {
                prop_assert!(w[1].timestamp >= w[0].timestamp);
                prop_assert!(w[1].timestamp - w[0].timestamp >= refr - 1e-12);
            }
        }
    }
}
