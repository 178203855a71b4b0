//! Link-budget calibration: find the receiver noise power at which a short
//! linear-surface training run lands in a target SER band.

use std::path::Path;

use serde::Serialize;
use sislink_core::evaluation::evaluate;
use sislink_core::training::{train, with_threads};
use sislink_core::{ActivationKind, ExperimentConfig, Scenario};

use crate::config_file::{load_config, resolve_output_dir, to_toml, write};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct CalibrateOptions {
    pub min_dbm: f64,
    pub max_dbm: f64,
    pub band: (f64, f64),
    pub probe_iterations: usize,
    /// Symbol decisions per probe SER estimate.
    pub probe_trials: usize,
    pub max_probes: usize,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self { min_dbm: -90.0, max_dbm: -20.0, band: (0.10, 0.15), probe_iterations: 50, probe_trials: 20_000, max_probes: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationProbe {
    pub noise_dbm: f64,
    pub ser: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    /// Probes in the order they ran.
    pub probes: Vec<CalibrationProbe>,
    pub band: (f64, f64),
    pub chosen_dbm: Option<f64>,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe,noise_dbm,ser,ci95,in_band\n");
        for (i, p) in self.probes.iter().enumerate() {
            let inside = p.ser >= self.band.0 && p.ser <= self.band.1;
            s.push_str(&format!("{},{},{:.6},{:.6},{}\n", i + 1, p.noise_dbm, p.ser, p.ci95, inside));
        }
        s
    }

    /// Human-readable SER-vs-noise table, sorted by noise power.
    pub fn table(&self) -> String {
        let mut rows = self.probes.clone();
        rows.sort_by(|a, b| a.noise_dbm.total_cmp(&b.noise_dbm));
        let mut s = String::from("  noise [dBm]      SER     ±95%\n");
        for p in rows {
            s.push_str(&format!("  {:>11.3}  {:>7.4}  {:>7.4}\n", p.noise_dbm, p.ser, p.ci95));
        }
        s
    }

    /// Whether probe SER is non-decreasing in noise power, allowing the two
    /// confidence intervals to overlap.
    pub fn is_monotone(&self) -> bool {
        let mut rows = self.probes.clone();
        rows.sort_by(|a, b| a.noise_dbm.total_cmp(&b.noise_dbm));
        rows.windows(2).all(|w| w[1].ser + w[1].ci95 + w[0].ci95 >= w[0].ser)
    }
}

/// Trained linear-surface SER at one noise power.
pub fn probe(base: &ExperimentConfig, noise_dbm: f64, opts: &CalibrateOptions) -> CliResult<CalibrationProbe> {
    let mut cfg = base.clone();
    cfg.surface.kind = ActivationKind::Linear;
    cfg.channel.noise.override_noise_power_dbm = Some(noise_dbm);
    cfg.training.iterations = opts.probe_iterations;
    cfg.training.eval_every = opts.probe_iterations.max(1);
    let scn = Scenario::new(cfg)?;
    let threads = scn.config.training.threads;
    let est = with_threads(threads, || -> sislink_core::Result<_> {
        let params = train(&scn)?.params;
        Ok(evaluate(&scn, &params, opts.probe_trials)?.1)
    })?;
    Ok(CalibrationProbe { noise_dbm, ser: est.ser, ci95: est.ci95_halfwidth })
}

/// Bisection on noise power. Probes both ends first; the band is reachable
/// only if it lies between their SERs.
pub fn calibrate(
    base: &ExperimentConfig,
    opts: &CalibrateOptions,
    mut on_probe: impl FnMut(&CalibrationProbe),
) -> CliResult<CalibrationReport> {
    if !(opts.min_dbm < opts.max_dbm) || !(opts.band.0 < opts.band.1) || opts.max_probes < 2 || opts.probe_trials == 0 {
        return Err(CliError::Config(format!("invalid calibration settings: {opts:?}")));
    }
    let (lo_t, hi_t) = opts.band;
    let inside = |p: &CalibrationProbe| p.ser >= lo_t && p.ser <= hi_t;
    let mut report = CalibrationReport { probes: Vec::new(), band: opts.band, chosen_dbm: None };
    let mut run = |dbm: f64, report: &mut CalibrationReport| -> CliResult<CalibrationProbe> {
        let p = probe(base, dbm, opts)?;
        on_probe(&p);
        report.probes.push(p);
        Ok(p)
    };
    let low = run(opts.min_dbm, &mut report)?;
    if inside(&low) {
        report.chosen_dbm = Some(low.noise_dbm);
        return Ok(report);
    }
    let high = run(opts.max_dbm, &mut report)?;
    if inside(&high) {
        report.chosen_dbm = Some(high.noise_dbm);
        return Ok(report);
    }
    if low.ser > hi_t || high.ser < lo_t {
        return Ok(report);
    }
    let (mut a, mut b) = (opts.min_dbm, opts.max_dbm);
    while report.probes.len() < opts.max_probes {
        let mid = 0.5 * (a + b);
        let p = run(mid, &mut report)?;
        if inside(&p) {
            report.chosen_dbm = Some(mid);
            break;
        }
        if p.ser > hi_t {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(report)
}

/// Calibrate from a config file. Writes `calibration_report.csv` always and
/// `calibrated.toml` (the input config plus the chosen noise power) on success.
pub fn cmd_calibrate(
    config: &Path,
    opts: &CalibrateOptions,
    out: Option<&Path>,
    on_probe: impl FnMut(&CalibrationProbe),
) -> CliResult<CalibrationReport> {
    let mut cfg = load_config(config)?;
    let dir = resolve_output_dir(&mut cfg, out)?;
    let report = calibrate(&cfg, opts, on_probe)?;
    write(&dir.join("calibration_report.csv"), &report.to_csv())?;
    match report.chosen_dbm {
        Some(dbm) => {
            let mut derived = cfg;
            derived.channel.noise.override_noise_power_dbm = Some(dbm);
            write(&dir.join("calibrated.toml"), &to_toml(&derived))?;
            Ok(report)
        }
        None => Err(CliError::Acceptance(format!(
            "SER band [{}, {}] unreachable for noise in [{}, {}] dBm after {} probes:\n{}",
            opts.band.0,
            opts.band.1,
            opts.min_dbm,
            opts.max_dbm,
            report.probes.len(),
            report.table()
        ))),
    }
}
