//! Linearized photoreceptor and source-follower circuit.
//!
//! Node order is `v_in`, `v_pr`, `v_sf`. The system is `(G + sC) v = i`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BiasConfig, DeviceParams, OperatingPoint};

/// Small-signal gain of the source follower.
pub const A_SF: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    #[serde(rename = "v_in")]
    VIn,
    #[serde(rename = "v_pr")]
    VPr,
    #[serde(rename = "v_sf")]
    VSf,
}

impl Node {
    pub const ALL: [Node; 3] = [Node::VIn, Node::VPr, Node::VSf];

    pub fn index(self) -> usize {
        match self {
            Node::VIn => 0,
            Node::VPr => 1,
            Node::VSf => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Node::VIn => "v_in",
            Node::VPr => "v_pr",
            Node::VSf => "v_sf",
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Node {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v_in" => Ok(Node::VIn),
            "v_pr" => Ok(Node::VPr),
            "v_sf" => Ok(Node::VSf),
            _ => Err(Error::Domain(format!(
                "unknown node `{s}` (expected v_in, v_pr or v_sf)"
            ))),
        }
    }
}

/// Shot-noise sources of the pixel front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    /// Photodiode plus feedback transistor, `4 q I_pd`.
    Pd,
    /// Amplifier and its bias transistor, `4 q I_pr`.
    Pr,
    /// Source-follower bias, `4 q I_sf`.
    Sf,
}

impl NoiseSource {
    pub const ALL: [NoiseSource; 3] = [NoiseSource::Pd, NoiseSource::Pr, NoiseSource::Sf];

    pub fn index(self) -> usize {
        match self {
            NoiseSource::Pd => 0,
            NoiseSource::Pr => 1,
            NoiseSource::Sf => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NoiseSource::Pd => "pd",
            NoiseSource::Pr => "pr",
            NoiseSource::Sf => "sf",
        }
    }
}

impl FromStr for NoiseSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pd" => Ok(NoiseSource::Pd),
            "pr" => Ok(NoiseSource::Pr),
            "sf" => Ok(NoiseSource::Sf),
            _ => Err(Error::Domain(format!(
                "unknown noise source `{s}` (expected pd, pr or sf)"
            ))),
        }
    }
}

/// Excitation used by [`SmallSignalSystem::transfer_fn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    /// Unit current at the node the source injects into.
    Noise(NoiseSource),
    /// Log-intensity change: `-I_pd` per log-e unit at `v_in`.
    Signal,
}

impl FromStr for Input {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "signal" {
            Ok(Input::Signal)
        } else {
            s.parse().map(Input::Noise)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseInjection {
    pub source: NoiseSource,
    pub node: Node,
    /// One-sided white current PSD, A²/Hz.
    pub psd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conductances {
    pub g_s: f64,
    pub g_mfb: f64,
    pub g_ma: f64,
    pub g_oa: f64,
    pub g_msf: f64,
}

impl Conductances {
    pub fn new(op: &OperatingPoint, bias: &BiasConfig, p: &DeviceParams) -> Self {
        Conductances {
            g_s: op.i_pd / p.u_t,
            g_mfb: p.kappa_fb * op.i_pd / p.u_t,
            g_ma: p.kappa_n * bias.i_pr / p.u_t,
            g_oa: bias.i_pr / p.v_a,
            g_msf: p.kappa_sf * bias.i_sf / p.u_t,
        }
    }

    /// DC loop gain `(g_ma / g_oa) (g_mfb / g_s)`.
    pub fn loop_gain(&self) -> f64 {
        (self.g_ma / self.g_oa) * (self.g_mfb / self.g_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallSignalSystem {
    pub nodes: [Node; 3],
    pub g: Matrix3<f64>,
    pub c: Matrix3<f64>,
    pub injections: Vec<NoiseInjection>,
    /// V per log-e unit at `v_pr`.
    pub signal_gain_dc: f64,
    pub i_pd: f64,
    pub conductances: Conductances,
}

/// Builds the linearized circuit at an operating point.
pub fn build_system(op: &OperatingPoint, bias: &BiasConfig, params: &DeviceParams) -> Result<SmallSignalSystem> {
    op.validate()?;
    bias.validate()?;
    params.validate()?;
    let k = Conductances::new(op, bias, params);
    #[rustfmt::skip]
    let g = Matrix3::new(
        k.g_s,  -k.g_mfb, 0.0,
        k.g_ma,  k.g_oa,  0.0,
        0.0,    -A_SF * k.g_msf, k.g_msf,
    );
    let c = Matrix3::from_diagonal(&Vector3::new(params.c_in, params.c_out, params.c_sf));
    let q = params.q_e;
    let injections = vec![
        NoiseInjection {
            source: NoiseSource::Pd,
            node: Node::VIn,
            psd: 4.0 * q * op.i_pd,
        },
        NoiseInjection {
            source: NoiseSource::Pr,
            node: Node::VPr,
            psd: 4.0 * q * bias.i_pr,
        },
        NoiseInjection {
            source: NoiseSource::Sf,
            node: Node::VSf,
            psd: 4.0 * q * bias.i_sf,
        },
    ];
    let mut sys = SmallSignalSystem {
        nodes: Node::ALL,
        g,
        c,
        injections,
        signal_gain_dc: 0.0,
        i_pd: op.i_pd,
        conductances: k,
    };
    for s in sys.natural_frequencies() {
        if !(s.re < 0.0) || !s.re.is_finite() {
            return Err(Error::Model(format!("unstable natural frequency {s}")));
        }
    }
    sys.signal_gain_dc = sys.transfer_fn(Input::Signal, Node::VPr, 0.0)?.norm();
    Ok(sys)
}

impl SmallSignalSystem {
    /// Complex response at `node` to `input` at frequency `f` (Hz).
    pub fn transfer_fn(&self, input: Input, node: Node, f: f64) -> Result<Complex64> {
        if !(f >= 0.0) {
            return Err(Error::Domain(format!("frequency must be non-negative, got {f}")));
        }
        let w = 2.0 * PI * f;
        let m = self.g.map(|x| Complex64::new(x, 0.0)) + self.c.map(|x| Complex64::new(0.0, w * x));
        let mut rhs = Vector3::<Complex64>::zeros();
        match input {
            Input::Signal => rhs[0] = Complex64::new(-self.i_pd, 0.0),
            Input::Noise(src) => rhs[self.injection(src).node.index()] = Complex64::new(1.0, 0.0),
        }
        let v = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical(format!("singular system matrix at f = {f} Hz")))?;
        let out = v[node.index()];
        if !(out.re.is_finite() && out.im.is_finite()) {
            return Err(Error::Numerical(format!("non-finite response at f = {f} Hz")));
        }
        Ok(out)
    }

    pub fn injection(&self, src: NoiseSource) -> &NoiseInjection {
        &self.injections[src.index()]
    }

    /// Copy of the system with one noise source switched off.
    pub fn ablate(&self, src: NoiseSource) -> SmallSignalSystem {
        let mut s = self.clone();
        s.injections[src.index()].psd = 0.0;
        s
    }

    /// DC signal gain at `node`, V per log-e unit.
    pub fn signal_gain(&self, node: Node) -> f64 {
        match node {
            Node::VIn => self
                .transfer_fn(Input::Signal, Node::VIn, 0.0)
                .map(|h| h.norm())
                .unwrap_or(0.0),
            Node::VPr => self.signal_gain_dc,
            Node::VSf => self.signal_gain_dc * A_SF,
        }
    }

    /// Roots of `det(G + sC)`, rad/s.
    pub fn natural_frequencies(&self) -> [Complex64; 3] {
        let (g, c) = (&self.g, &self.c);
        let a2 = c[(0, 0)] * c[(1, 1)];
        let a1 = g[(0, 0)] * c[(1, 1)] + g[(1, 1)] * c[(0, 0)];
        let a0 = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        let [p1, p2] = quadratic_roots(a2, a1, a0);
        [p1, p2, Complex64::new(-g[(2, 2)] / c[(2, 2)], 0.0)]
    }

    /// Magnitudes of the natural frequencies in Hz, ascending.
    pub fn pole_frequencies_hz(&self) -> [f64; 3] {
        let mut p = self.natural_frequencies().map(|s| s.norm() / (2.0 * PI));
        p.sort_by(|a, b| a.total_cmp(b));
        p
    }
}

pub(crate) fn quadratic_roots(a: f64, b: f64, c: f64) -> [Complex64; 2] {
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        // Stable form avoids cancellation when the roots are far apart.
        let qv = -0.5 * (b + b.signum() * disc.sqrt());
        let r1 = qv / a;
        let r2 = if qv != 0.0 { c / qv } else { 0.0 };
        [Complex64::new(r1, 0.0), Complex64::new(r2, 0.0)]
    } else {
        let re = -b / (2.0 * a);
        let im = (-disc).sqrt() / (2.0 * a);
        [Complex64::new(re, im), Complex64::new(re, -im)]
    }
}

/// Analytic two-pole photoreceptor plus one-pole source-follower description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalTfClosedForm {
    /// DC gain at `v_pr`, V per log-e unit.
    pub dc_gain: f64,
    /// Input pole `g_s / C_in`, rad/s.
    pub omega_in: f64,
    /// Output pole `g_oa / C_out`, rad/s.
    pub omega_out: f64,
    pub a_loop: f64,
    /// Natural frequency, rad/s.
    pub omega0: f64,
    pub q: f64,
    /// Source-follower pole `g_msf / C_sf`, rad/s.
    pub omega_sf: f64,
}

pub fn signal_tf_closed_form(
    op: &OperatingPoint,
    bias: &BiasConfig,
    params: &DeviceParams,
) -> Result<SignalTfClosedForm> {
    op.validate()?;
    bias.validate()?;
    params.validate()?;
    let k = Conductances::new(op, bias, params);
    let a_loop = k.loop_gain();
    let omega_in = k.g_s / params.c_in;
    let omega_out = k.g_oa / params.c_out;
    let omega0 = ((1.0 + a_loop) * omega_in * omega_out).sqrt();
    let q = omega0 / (omega_in + omega_out);
    let dc_gain = (params.u_t / params.kappa_fb) * a_loop / (1.0 + a_loop);
    Ok(SignalTfClosedForm {
        dc_gain,
        omega_in,
        omega_out,
        a_loop,
        omega0,
        q,
        omega_sf: k.g_msf / params.c_sf,
    })
}

impl SignalTfClosedForm {
    /// Photoreceptor poles, rad/s.
    pub fn poles(&self) -> [Complex64; 2] {
        quadratic_roots(1.0, self.omega0 / self.q, self.omega0 * self.omega0)
    }

    /// Ratio of the fast to the slow photoreceptor pole magnitude.
    pub fn pole_ratio(&self) -> f64 {
        let [a, b] = self.poles().map(|p| p.norm());
        a.max(b) / a.min(b)
    }

    /// Closed-form signal response at `v_pr` or `v_sf`.
    pub fn eval(&self, node: Node, f: f64) -> Result<Complex64> {
        let s = Complex64::new(0.0, 2.0 * PI * f);
        let w2 = self.omega0 * self.omega0;
        let h_pr = self.dc_gain * w2 / (s * s + s * (self.omega0 / self.q) + w2);
        match node {
            Node::VPr => Ok(h_pr),
            Node::VSf => Ok(h_pr * A_SF * self.omega_sf / (s + self.omega_sf)),
            Node::VIn => Err(Error::Domain("closed form covers v_pr and v_sf only".into())),
        }
    }
}

/// Smallest frequency where the signal response at `node` falls to `1/sqrt(2)` of its DC value.
pub fn bandwidth_3db(system: &SmallSignalSystem, node: Node) -> Result<f64> {
    let h0 = system.transfer_fn(Input::Signal, node, 0.0)?.norm();
    let target = h0 / 2f64.sqrt();
    let below = |f: f64| -> Result<bool> { Ok(system.transfer_fn(Input::Signal, node, f)?.norm() < target) };
    let (lo_dec, hi_dec, per_dec) = (-3.0, 9.0, 40.0);
    let n = ((hi_dec - lo_dec) * per_dec) as usize;
    let mut prev = 10f64.powf(lo_dec);
    if below(prev)? {
        return Err(Error::Range(format!("signal already below -3 dB at {prev} Hz")));
    }
    for i in 1..=n {
        let f = 10f64.powf(lo_dec + i as f64 / per_dec);
        if below(f)? {
            let (mut a, mut b) = (prev.ln(), f.ln());
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if below(m.exp())? {
                    b = m;
                } else {
                    a = m;
                }
                if b - a < 1e-12 {
                    break;
                }
            }
            return Ok((0.5 * (a + b)).exp());
        }
        prev = f;
    }
    Err(Error::Range("no -3 dB crossing within [1e-3, 1e9] Hz".into()))
}
