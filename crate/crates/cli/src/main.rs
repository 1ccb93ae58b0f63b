use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dvs_noise::biasopt::{self, Constraints, SweepSpec};
use dvs_noise::config::{CalibrateConfig, Config};
use dvs_noise::events::predict_rate;
use dvs_noise::params::OperatingPointSpec;
use dvs_noise::spectrum::{cumulative_rms, psd, FrequencyGrid};
use dvs_noise::timesim::{simulate, SimConfig};
use dvs_noise::{build_system, io, Error, Input, Node, Result, SmallSignalSystem};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dvs-noise", version, about = "Shot-noise model of a DVS pixel")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-source noise PSD at a node.
    Psd {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "v_pr")]
        node: Node,
        /// Refer the PSD to log-intensity units.
        #[arg(long)]
        tc: bool,
    },
    /// Cumulative RMS noise at a node.
    Rms {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "v_pr")]
        node: Node,
        #[arg(long)]
        tc: bool,
    },
    /// Transfer function from an input to a node.
    Tf {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "v_pr")]
        node: Node,
        /// `signal`, `pd`, `pr` or `sf`.
        #[arg(long, default_value = "signal")]
        input: Input,
    },
    /// Predicted noise and leak event rates.
    Rate {
        #[command(flatten)]
        common: Common,
    },
    /// Event rate over a bias grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo simulation of one pixel.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated time, s.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Bias recommendation under bandwidth and power constraints.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Hz.
        #[arg(long)]
        min_bandwidth: Option<f64>,
        /// W.
        #[arg(long)]
        max_power: Option<f64>,
    },
    /// Fit device parameters to a measured PSD.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// CSV with `f_hz` and `psd_v2hz` columns.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated parameter names.
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<String>>,
        #[arg(long)]
        node: Option<Node>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Override the photoreceptor bias current, A.
    #[arg(long = "i-pr", allow_hyphen_values = true)]
    i_pr: Option<f64>,
    /// Override the source-follower bias current, A.
    #[arg(long = "i-sf", allow_hyphen_values = true)]
    i_sf: Option<f64>,
    /// Override the photocurrent, A.
    #[arg(long = "i-pd", conflicts_with = "lux", allow_hyphen_values = true)]
    i_pd: Option<f64>,
    /// Override the illuminance, lux.
    #[arg(long, allow_hyphen_values = true)]
    lux: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    config: Config,
    options: Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(v) = common.i_pr {
            config.bias.i_pr = v;
        }
        if let Some(v) = common.i_sf {
            config.bias.i_sf = v;
        }
        if let Some(v) = common.i_pd {
            config.operating_point = OperatingPointSpec {
                i_pd: Some(v),
                illuminance: None,
            };
        }
        if let Some(v) = common.lux {
            config.operating_point = OperatingPointSpec {
                i_pd: None,
                illuminance: Some(v),
            };
        }
        config.validate()?;
        std::fs::create_dir_all(&common.out)?;
        Ok(Run {
            command,
            out: common.out.clone(),
            config,
            options: json!({ "format": common.format }),
            seeds: Vec::new(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
        })
    }

    fn option(&mut self, key: &str, value: impl Serialize) {
        self.options[key] = serde_json::to_value(value).expect("option serializes");
    }

    fn system(&self) -> Result<SmallSignalSystem> {
        build_system(&self.config.op()?, &self.config.bias, &self.config.device)
    }

    fn grid(&self, sys: &SmallSignalSystem) -> Result<FrequencyGrid> {
        match &self.config.grid {
            Some(g) => FrequencyGrid::log(g.f_min, g.f_max, g.points_per_decade),
            None => FrequencyGrid::for_system(sys, &[]),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents.as_bytes())?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("output serializes");
        self.write(name, &text)
    }

    /// Writes the config snapshot and the manifest.
    fn finish(mut self) -> Result<()> {
        let snapshot = self.config.to_json();
        self.write("config.json", &snapshot)?;
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "options": self.options,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "warnings": self.warnings,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.out.join("manifest.json"), text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn spectrum_cmd(common: &Common, node: Node, tc: bool, cumulative: bool) -> Result<()> {
    let mut run = Run::new(if cumulative { "rms" } else { "psd" }, common)?;
    run.option("node", node);
    run.option("tc", tc);
    let sys = run.system()?;
    let mut spec = psd(&sys, node, &run.grid(&sys)?)?;
    if tc {
        spec = spec.referred_to_tc(&sys)?;
    }
    if cumulative {
        let cum = cumulative_rms(&spec);
        run.warnings.extend(cum.warning.clone());
        match common.format {
            Format::Csv => run.write("rms.csv", &io::rms_csv(&cum)?)?,
            Format::Json => run.write_json("rms.json", &cum)?,
        }
    } else {
        match common.format {
            Format::Csv => run.write("psd.csv", &io::psd_csv(&spec)?)?,
            Format::Json => run.write_json("psd.json", &spec)?,
        }
    }
    run.finish()
}

fn tf_cmd(common: &Common, node: Node, input: Input) -> Result<()> {
    let mut run = Run::new("tf", common)?;
    run.option("node", node);
    run.option(
        "input",
        match input {
            Input::Signal => "signal",
            Input::Noise(s) => s.label(),
        },
    );
    let sys = run.system()?;
    let f = run.grid(&sys)?.points;
    let h = f
        .iter()
        .map(|&f| sys.transfer_fn(input, node, f))
        .collect::<Result<Vec<_>>>()?;
    match common.format {
        Format::Csv => run.write("tf.csv", &io::tf_csv(&f, &h)?)?,
        Format::Json => {
            let out = json!({
                "node": node,
                "f_hz": f,
                "magnitude": h.iter().map(|z| z.norm()).collect::<Vec<_>>(),
                "phase_deg": h.iter().map(|z| z.arg().to_degrees()).collect::<Vec<_>>(),
                "pole_frequencies_hz": sys.pole_frequencies_hz(),
            });
            run.write_json("tf.json", &out)?
        }
    }
    run.finish()
}

fn rate_cmd(common: &Common) -> Result<()> {
    let mut run = Run::new("rate", common)?;
    let sys = run.system()?;
    let report = predict_rate(&sys, &run.config.bias, &run.config.device)?;
    run.write_json("rate.json", &report)?;
    run.finish()
}

fn sweep_cmd(common: &Common) -> Result<()> {
    let mut run = Run::new("sweep", common)?;
    let spec = match &run.config.sweep {
        Some(s) => s.to_spec(&run.config.device)?,
        None => SweepSpec::noise_rate_figure(&run.config.device)?,
    };
    let records = biasopt::sweep(&spec, &run.config.bias, &run.config.device)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        run.warnings
            .push(format!("{failed} of {} sweep points failed", records.len()));
    }
    match common.format {
        Format::Csv => run.write("sweep.csv", &io::sweep_csv(&records)?)?,
        Format::Json => run.write_json("sweep.json", &records)?,
    }
    run.finish()
}

fn simulate_cmd(common: &Common, seed: Option<u64>, duration: Option<f64>) -> Result<()> {
    let mut run = Run::new("simulate", common)?;
    let mut sim = run.config.sim.clone().unwrap_or_else(|| SimConfig::new(10.0, 0));
    if let Some(s) = seed {
        sim.seed = s;
    }
    if let Some(d) = duration {
        sim.duration = d;
    }
    run.config.sim = Some(sim.clone());
    run.seeds.push(sim.seed);
    let sys = run.system()?;
    let out = simulate(&sys, &run.config.bias, &run.config.device, &sim)?;
    run.warnings.extend(out.summary.warnings.iter().cloned());
    match common.format {
        Format::Csv => {
            run.write("events.csv", &io::events_csv(&out.events)?)?;
            if let Some(t) = &out.traces {
                run.write("traces.csv", &io::traces_csv(t)?)?;
            }
            run.write_json("summary.json", &out.summary)?;
        }
        Format::Json => run.write_json("simulation.json", &out)?,
    }
    run.finish()
}

fn optimize_cmd(common: &Common, min_bw: Option<f64>, max_power: Option<f64>) -> Result<()> {
    let mut run = Run::new("optimize", common)?;
    let mut c = match (&run.config.optimize, min_bw, max_power) {
        (Some(c), _, _) => c.clone(),
        (None, Some(bw), Some(p)) => Constraints::new(bw, p),
        (None, _, _) => {
            return Err(Error::Config(
                "optimize needs an `optimize` section or both --min-bandwidth and --max-power".into(),
            ))
        }
    };
    if let Some(bw) = min_bw {
        c.min_bandwidth = bw;
    }
    if let Some(p) = max_power {
        c.max_power = p;
    }
    run.config.optimize = Some(c.clone());
    let rec = biasopt::optimize(&run.config.op()?, &c, &run.config.bias, &run.config.device)?;
    if !rec.feasible {
        let binding = rec.binding_constraint.as_deref().unwrap_or("unknown");
        run.warnings.push(format!("constraints infeasible; binding: {binding}"));
    }
    run.write_json("recommendation.json", &rec)?;
    run.finish()
}

fn calibrate_cmd(common: &Common, data: Option<PathBuf>, free: Option<Vec<String>>, node: Option<Node>) -> Result<()> {
    let mut run = Run::new("calibrate", common)?;
    let mut cal = run.config.calibrate.clone().unwrap_or(CalibrateConfig {
        free: Vec::new(),
        node: Node::VPr,
        data: None,
        options: Default::default(),
    });
    if let Some(f) = free {
        cal.free = f;
    }
    if let Some(n) = node {
        cal.node = n;
    }
    let path = match (data, &cal.data) {
        (Some(p), _) => std::path::absolute(p)?,
        (None, Some(rel)) => {
            let base = common
                .config
                .as_deref()
                .and_then(Path::parent)
                .unwrap_or(Path::new("."));
            std::path::absolute(base.join(rel))?
        }
        (None, None) => return Err(Error::Config("calibrate needs --data or `calibrate.data`".into())),
    };
    cal.data = Some(path.display().to_string());
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let measured = io::read_calibration_csv(&text)?;
    run.config.calibrate = Some(cal.clone());
    let op = run.config.op()?;
    let report = biasopt::calibrate(
        &measured,
        &run.config.device,
        &cal.free,
        &op,
        &run.config.bias,
        cal.node,
        &cal.options,
    )?;
    run.warnings.extend(report.warnings.iter().cloned());
    run.write_json("calibration.json", &report)?;
    let mut fitted = run.config.clone();
    fitted.device = report.fitted;
    fitted.calibrate = None;
    run.write("fitted_config.json", &fitted.to_json())?;
    run.finish()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Psd { common, node, tc } => spectrum_cmd(&common, node, tc, false),
        Command::Rms { common, node, tc } => spectrum_cmd(&common, node, tc, true),
        Command::Tf { common, node, input } => tf_cmd(&common, node, input),
        Command::Rate { common } => rate_cmd(&common),
        Command::Sweep { common } => sweep_cmd(&common),
        Command::Simulate { common, seed, duration } => simulate_cmd(&common, seed, duration),
        Command::Optimize {
            common,
            min_bandwidth,
            max_power,
        } => optimize_cmd(&common, min_bandwidth, max_power),
        Command::Calibrate {
            common,
            data,
            free,
            node,
        } => calibrate_cmd(&common, data, free, node),
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
