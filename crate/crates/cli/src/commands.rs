//! The train, evaluate, sweep, heatmap and gradcheck subcommands.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sislink_core::evaluation::{amplitude_heatmap, evaluate, heatmap_csv, sweep_elements, HeatmapRecord};
use sislink_core::gradients::{finite_difference_check, GradCheckReport};
use sislink_core::propagation::{noise_power, watts_to_dbm};
use sislink_core::training::{train, with_threads, CurvePoint};
use sislink_core::{ActivationKind, ExperimentConfig, Scenario, SerEstimate, SisParams, SweepResult};

use crate::config_file::{load_config, resolve_output_dir, to_toml, write};
use crate::error::{CliError, CliResult};

/// Largest gradient-check error accepted by [`cmd_gradcheck`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub loss: f64,
    pub ser: f64,
}

impl From<&CurvePoint> for CurveRecord {
    fn from(p: &CurvePoint) -> Self {
        Self { iteration: p.iteration, loss: p.loss, ser: p.ser }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifacts {
    pub params: PathBuf,
    pub learning_curve: PathBuf,
    pub run_json: PathBuf,
    pub resolved_config: PathBuf,
}

/// Everything `train` reports about one run.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    /// Fully resolved config; feeding it back reproduces every artifact.
    pub config: ExperimentConfig,
    pub learning_curve: Vec<CurveRecord>,
    pub final_ser: SerEstimate,
    /// Equalizer fitted for the final estimate, as `[re, im]`.
    pub equalizer: [f64; 2],
    pub trainable_parameters: usize,
    pub wall_seconds: f64,
    pub artifacts: Artifacts,
}

fn scenario(cfg: ExperimentConfig) -> CliResult<Scenario> {
    Ok(Scenario::new(cfg)?)
}

/// Train from a config file and write params, learning curve, config echo
/// and run metrics into the output directory.
pub fn cmd_train(config: &Path, out: Option<&Path>, threads: Option<usize>) -> CliResult<RunMetrics> {
    let mut cfg = load_config(config)?;
    if let Some(t) = threads {
        cfg.training.threads = t;
    }
    let dir = resolve_output_dir(&mut cfg, out)?;
    let start = Instant::now();
    let scn = scenario(cfg.clone())?;
    let outcome = train(&scn)?;
    let (eq, estimate) =
        with_threads(cfg.training.threads, || evaluate(&scn, &outcome.params, cfg.evaluation.trials))?;
    let artifacts = Artifacts {
        params: dir.join("params.txt"),
        learning_curve: dir.join("learning_curve.csv"),
        run_json: dir.join("run.json"),
        resolved_config: dir.join("resolved_config.toml"),
    };
    write(&artifacts.params, &outcome.params.to_text())?;
    write(&artifacts.learning_curve, &outcome.curve.to_csv())?;
    write(&artifacts.resolved_config, &to_toml(&cfg))?;
    let metrics = RunMetrics {
        config: cfg,
        learning_curve: outcome.curve.points.iter().map(CurveRecord::from).collect(),
        final_ser: estimate,
        equalizer: [eq.g.re, eq.g.im],
        trainable_parameters: outcome.params.num_trainable(),
        wall_seconds: start.elapsed().as_secs_f64(),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialise");
    write(&metrics.artifacts.run_json, &(json + "\n"))?;
    Ok(metrics)
}

pub fn load_params(path: &Path, cfg: &ExperimentConfig) -> CliResult<SisParams> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let params = SisParams::from_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    params
        .check_shape(cfg.surface.kind, cfg.geometry.cells_per_layer, cfg.geometry.layers_per_sis)
        .map_err(|e| CliError::Config(format!("{} does not match the config: {e}", path.display())))?;
    Ok(params)
}

const EVAL_HEADER: &str = "params,kind,N,L,kappa,noise_dbm,trials,errors,ser,ci95,seed\n";

/// Estimate SER of saved parameters and append a row to `eval.csv`.
pub fn cmd_evaluate(params_path: &Path, config: &Path, trials: Option<usize>, out: Option<&Path>) -> CliResult<SerEstimate> {
    let mut cfg = load_config(config)?;
    let params = load_params(params_path, &cfg)?;
    let dir = resolve_output_dir(&mut cfg, out)?;
    let trials = trials.unwrap_or(cfg.evaluation.trials);
    if trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let threads = cfg.training.threads;
    let scn = scenario(cfg)?;
    let (_, est) = with_threads(threads, || evaluate(&scn, &params, trials))?;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
    let c = &scn.config;
    let mut line = String::new();
    if fresh {
        line.push_str(EVAL_HEADER);
    }
    line.push_str(&format!(
        "{},{},{},{},{},{},{},{},{:.10e},{:.10e},{}\n",
        params_path.display().to_string().replace(',', "_"),
        c.surface.kind,
        c.geometry.cells_per_layer,
        c.geometry.layers_per_sis,
        c.channel.kappa,
        watts_to_dbm(noise_power(&c.channel.noise)),
        est.trials,
        est.errors,
        est.ser,
        est.ci95_halfwidth,
        scn.seed
    ));
    f.write_all(line.as_bytes()).map_err(|e| CliError::io(&path, e))?;
    Ok(est)
}

/// Retrain and evaluate each `(N, kappa, kind)` combination, rewriting
/// `sweep.csv` after every row so partial sweeps survive interruption.
pub fn cmd_sweep(
    config: &Path,
    n_values: &[usize],
    kappa_values: &[f64],
    kinds: &[ActivationKind],
    out: Option<&Path>,
    mut progress: impl FnMut(&sislink_core::evaluation::SweepRow) + Send,
) -> CliResult<SweepResult> {
    if n_values.is_empty() || kappa_values.is_empty() || kinds.is_empty() {
        return Err(CliError::Config("sweep needs at least one value for --N, --kappa and --kinds".into()));
    }
    let mut cfg = load_config(config)?;
    let dir = resolve_output_dir(&mut cfg, out)?;
    let path = dir.join("sweep.csv");
    let mut partial = SweepResult::default();
    let mut write_err = None;
    let threads = cfg.training.threads;
    let result = with_threads(threads, || {
        sweep_elements(&cfg, n_values, kappa_values, kinds, |row| {
            progress(row);
            partial.rows.push(row.clone());
            if let Err(e) = write(&path, &partial.to_csv()) {
                write_err.get_or_insert(e);
            }
        })
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write(&path, &result.to_csv())?;
    Ok(result)
}

/// Amplitude grids of saved parameters on one channel draw, written to
/// `heatmap.csv`.
pub fn cmd_heatmap(
    params_path: &Path,
    config: &Path,
    seed: u64,
    symbols: &[u8],
    verbose: bool,
    out: Option<&Path>,
) -> CliResult<Vec<HeatmapRecord>> {
    let mut cfg = load_config(config)?;
    let params = load_params(params_path, &cfg)?;
    let dir = resolve_output_dir(&mut cfg, out)?;
    let scn = scenario(cfg)?;
    let records = amplitude_heatmap(&scn, &params, seed, symbols, verbose)?;
    write(&dir.join("heatmap.csv"), &heatmap_csv(&records))?;
    Ok(records)
}

/// Finite-difference check at N=16, L=2 on the config's other settings.
pub fn gradcheck_report(cfg: &ExperimentConfig, params_sampled: usize, step: f64) -> CliResult<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.geometry.cells_per_layer = 16;
    cfg.geometry.layers_per_sis = 2;
    Ok(finite_difference_check(&cfg, params_sampled, step)?)
}

/// Run the gradient check, write `gradcheck.csv`, and fail with exit code 3
/// when the worst relative error reaches [`GRADCHECK_TOLERANCE`].
pub fn cmd_gradcheck(config: &Path, params_sampled: usize, step: f64, out: Option<&Path>) -> CliResult<GradCheckReport> {
    let mut cfg = load_config(config)?;
    let dir = resolve_output_dir(&mut cfg, out)?;
    let report = gradcheck_report(&cfg, params_sampled, step)?;
    write(&dir.join("gradcheck.csv"), &report.to_csv())?;
    if !(report.max_rel_err < GRADCHECK_TOLERANCE) {
        return Err(CliError::Acceptance(format!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_err
        )));
    }
    Ok(report)
}
