//! CSV encoding of model and simulation outputs.

use crate::biasopt::SweepRecord;
use crate::circuit::NoiseSource;
use crate::error::{Error, Result};
use crate::spectrum::{CumulativeRms, SpectrumSeries};
use crate::timesim::{EmpiricalPsd, EventRecord, Traces};

fn num(x: f64) -> String {
    format!("{x:.9e}")
}

fn write_rows<I>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const SOURCE_ORDER: [NoiseSource; 3] = [NoiseSource::Pd, NoiseSource::Pr, NoiseSource::Sf];

pub const PSD_HEADER: [&str; 5] = ["f_hz", "psd_total", "psd_pd", "psd_pr", "psd_sf"];
pub const RMS_HEADER: [&str; 5] = ["f_hz", "cum_rms_total", "cum_rms_pd", "cum_rms_pr", "cum_rms_sf"];
pub const SWEEP_HEADER: [&str; 8] = [
    "i_pd",
    "i_pr",
    "i_sf",
    "rate_hz",
    "bandwidth_hz",
    "rms_tc",
    "photon_fraction",
    "power_w",
];

pub fn psd_csv(spec: &SpectrumSeries) -> Result<String> {
    write_rows(
        &PSD_HEADER,
        spec.grid.points.iter().enumerate().map(|(i, &f)| {
            let mut row = vec![num(f), num(spec.total[i])];
            row.extend(SOURCE_ORDER.iter().map(|s| num(spec.source(*s)[i])));
            row
        }),
    )
}

pub fn rms_csv(cum: &CumulativeRms) -> Result<String> {
    write_rows(
        &RMS_HEADER,
        cum.grid.points.iter().enumerate().map(|(i, &f)| {
            let mut row = vec![num(f), num(cum.total[i])];
            row.extend(SOURCE_ORDER.iter().map(|s| num(cum.per_source[s.index()][i])));
            row
        }),
    )
}

/// Columns `f_hz, magnitude, phase_deg`.
pub fn tf_csv(f: &[f64], h: &[num_complex::Complex64]) -> Result<String> {
    write_rows(
        &["f_hz", "magnitude", "phase_deg"],
        f.iter()
            .zip(h)
            .map(|(&f, h)| vec![num(f), num(h.norm()), num(h.arg().to_degrees())]),
    )
}

pub fn events_csv(events: &[EventRecord]) -> Result<String> {
    write_rows(
        &["t_seconds", "polarity"],
        events
            .iter()
            .map(|e| vec![format!("{:.12e}", e.timestamp), e.polarity.code().to_string()]),
    )
}

pub fn traces_csv(traces: &Traces) -> Result<String> {
    write_rows(
        &["t_seconds", "v_pr", "v_sf"],
        (0..traces.t.len()).map(|i| {
            vec![
                format!("{:.12e}", traces.t[i]),
                num(traces.v_pr[i]),
                num(traces.v_sf[i]),
            ]
        }),
    )
}

pub fn empirical_psd_csv(p: &EmpiricalPsd) -> Result<String> {
    write_rows(
        &["f_hz", "psd"],
        p.f.iter().zip(&p.psd).map(|(&f, &s)| vec![num(f), num(s)]),
    )
}

/// Failed points keep their inputs and leave metrics as `NaN`.
pub fn sweep_csv(records: &[SweepRecord]) -> Result<String> {
    write_rows(
        &SWEEP_HEADER,
        records.iter().map(|r| {
            [
                r.i_pd,
                r.i_pr,
                r.i_sf,
                r.rate_hz,
                r.bandwidth_hz,
                r.rms_tc,
                r.photon_fraction,
                r.power_w,
            ]
            .iter()
            .map(|&x| num(x))
            .collect()
        }),
    )
}

/// Reads `f_hz, psd_v2hz` rows.
pub fn read_calibration_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::Config(format!("calibration data: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("calibration data: missing column `{name}`")))
    };
    let (fi, si) = (col("f_hz")?, col("psd_v2hz")?);
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Config(format!("calibration data line {line}: {e}")))?;
        let field = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("calibration data line {line}: bad `{name}`")))
        };
        out.push((field(fi, "f_hz")?, field(si, "psd_v2hz")?));
    }
    Ok(out)
}
