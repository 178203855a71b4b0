//! Monte Carlo SER estimation, the closed-form QPSK reference, amplitude
//! heatmaps and the element-count sweep.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::lattice_shape;
use crate::gradients::forward_batch;
use crate::rng::{Purpose, StreamId};
use crate::surface::{end_to_end_forward, ActivationKind, SisParams, Side, Smoothing};
use crate::training::{
    detect_symbols, draw_transmissions, fit_equalizer, generate_batch, train, Equalizer, LearningCurve, Scenario,
    SymbolBatch, TrainOutcome, CONSTELLATION,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerEstimate {
    pub ser: f64,
    pub errors: usize,
    /// Symbol decisions counted.
    pub trials: usize,
    pub ci95_halfwidth: f64,
}

impl SerEstimate {
    pub fn from_counts(errors: usize, trials: usize) -> Self {
        let ser = errors as f64 / trials as f64;
        Self { ser, errors, trials, ci95_halfwidth: 1.96 * (ser * (1.0 - ser) / trials as f64).sqrt() }
    }

    /// Binomial standard deviation of the estimate at a reference rate `p`.
    pub fn sigma_at(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Symbol error probability of 4-QAM on an AWGN channel at symbol SNR `gamma`.
pub fn qpsk_awgn_oracle(gamma: f64) -> f64 {
    assert!(gamma >= 0.0, "SNR must be nonnegative");
    let q = q_function(gamma.sqrt());
    2.0 * q - q * q
}

const EVAL_BLOCK: usize = 4096;

/// Count decision errors over `trials` symbol decisions, drawing transmissions
/// in blocks and mapping each block to received vectors with `forward`.
/// Decisions are counted in (sample, antenna) order; the last transmission may
/// be partially counted so exactly `trials` decisions enter the estimate.
pub fn monte_carlo_ser<F>(
    antennas: usize,
    symbol_power: f64,
    noise_power: f64,
    eq: Equalizer,
    trials: usize,
    stream: StreamId,
    mut forward: F,
) -> Result<SerEstimate>
where
    F: FnMut(&SymbolBatch) -> Result<Array2<Complex64>>,
{
    if trials == 0 {
        return Err(Error::InvalidConfig("SER estimate needs at least one trial".into()));
    }
    let transmissions = trials.div_ceil(antennas);
    let mut errors = 0usize;
    let mut counted = 0usize;
    let mut start = 0usize;
    while start < transmissions {
        let size = EVAL_BLOCK.min(transmissions - start);
        let batch = draw_transmissions(antennas, antennas, symbol_power, noise_power, size, stream, start as u64);
        let y = forward(&batch)?;
        let decided = detect_symbols(&y, eq, symbol_power);
        for b in 0..size {
            for k in 0..antennas {
                if counted == trials {
                    break;
                }
                counted += 1;
                if decided[[k, b]] != batch.labels[[k, b]] {
                    errors += 1;
                }
            }
        }
        start += size;
    }
    Ok(SerEstimate::from_counts(errors, counted))
}

/// SER of the trained link on fresh draws with a frozen equalizer (hard forward).
pub fn estimate_ser(
    scn: &Scenario,
    params: &SisParams,
    eq: Equalizer,
    trials: usize,
    stream: StreamId,
) -> Result<SerEstimate> {
    if !stream.purpose.is_evaluation() {
        return Err(Error::InvalidConfig(format!(
            "SER estimates must use an evaluation stream, got {:?}",
            stream.purpose
        )));
    }
    monte_carlo_ser(scn.antennas(), scn.symbol_power, scn.noise_power, eq, trials, stream, |batch| {
        Ok(forward_batch(&scn.model, params, batch, Smoothing::Hard, false)?.y)
    })
}

/// Detector pipeline on an identity channel with AWGN at symbol SNR `gamma`.
pub fn awgn_bypass_ser(gamma: f64, trials: usize, stream: StreamId) -> Result<SerEstimate> {
    let p = 1.0;
    let eq = Equalizer { g: Complex64::new(1.0, 0.0) };
    monte_carlo_ser(4, p, p / gamma, eq, trials, stream, |batch| Ok(&batch.x + &batch.noise))
}

/// Fit a fresh equalizer and estimate SER with the configured evaluation budget.
pub fn evaluate(scn: &Scenario, params: &SisParams, trials: usize) -> Result<(Equalizer, SerEstimate)> {
    let eq = fit_equalizer(
        scn,
        params,
        scn.config.evaluation.equalizer_samples,
        scn.stream(Purpose::EvalEqualizer, 0),
    )?;
    let est = estimate_ser(scn, params, eq, trials, scn.stream(Purpose::Evaluation, 0))?;
    Ok((eq, est))
}

/// Result of a train-then-test run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub equalizer: Equalizer,
    pub estimate: SerEstimate,
}

impl RunResult {
    pub fn curve(&self) -> &LearningCurve {
        &self.outcome.curve
    }
}

pub fn train_and_evaluate(scn: &Scenario) -> Result<RunResult> {
    let outcome = train(scn)?;
    let (equalizer, estimate) = crate::training::with_threads(scn.config.training.threads, || {
        evaluate(scn, &outcome.params, scn.config.evaluation.trials)
    })?;
    Ok(RunResult { outcome, equalizer, estimate })
}

/// Amplitude stage exported for heatmaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapStage {
    TxIn,
    TxOut,
    RxIn,
    RxOut,
}

impl HeatmapStage {
    pub fn name(self) -> &'static str {
        match self {
            HeatmapStage::TxIn => "tx_in",
            HeatmapStage::TxOut => "tx_out",
            HeatmapStage::RxIn => "rx_in",
            HeatmapStage::RxOut => "rx_out",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRecord {
    pub stage: HeatmapStage,
    /// 1-based layer index within its stack.
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub amplitude: f64,
}

/// Amplitude grids of one transmission over one fixed channel realization.
///
/// Exports the input of the first and output of the last layer of both
/// stacks; with `all_layers` every layer's input and output is included.
pub fn amplitude_heatmap(
    scn: &Scenario,
    params: &SisParams,
    channel_seed: u64,
    labels: &[u8],
    all_layers: bool,
) -> Result<Vec<HeatmapRecord>> {
    if labels.len() != scn.antennas() || labels.iter().any(|&l| l > 3) {
        return Err(Error::InvalidConfig(format!(
            "heatmap needs {} symbol indices in 0..=3, got {labels:?}",
            scn.antennas()
        )));
    }
    let model = &scn.model;
    let channel = model.draw_realization(&mut StreamId::new(channel_seed, Purpose::Heatmap, 0, 0).rng());
    let x: Array1<Complex64> = labels.iter().map(|&l| CONSTELLATION[l as usize] * scn.symbol_power.sqrt()).collect();
    let noise = Array1::zeros(model.rx_antennas());
    let (_, trace) = end_to_end_forward(&x, params, &model.hops.tx, &model.hops.rx, &channel.h, &noise, Smoothing::Hard)?;
    let layers = params.layers();
    let (_, cols) = lattice_shape(params.cells());
    let mut stages: Vec<(HeatmapStage, Side, usize, bool)> = vec![
        (HeatmapStage::TxIn, Side::Tx, 0, true),
        (HeatmapStage::TxOut, Side::Tx, layers - 1, false),
        (HeatmapStage::RxIn, Side::Rx, 0, true),
        (HeatmapStage::RxOut, Side::Rx, layers - 1, false),
    ];
    if all_layers {
        stages.clear();
        for (side, pre_stage, post_stage) in [
            (Side::Tx, HeatmapStage::TxIn, HeatmapStage::TxOut),
            (Side::Rx, HeatmapStage::RxIn, HeatmapStage::RxOut),
        ] {
            for l in 0..layers {
                stages.push((pre_stage, side, l, true));
                stages.push((post_stage, side, l, false));
            }
        }
    }
    let mut out = Vec::new();
    for (stage, side, layer, pre) in stages {
        for (k, amplitude) in trace.amplitudes(side, layer, pre).into_iter().enumerate() {
            out.push(HeatmapRecord { stage, layer: layer + 1, row: k / cols, col: k % cols, amplitude });
        }
    }
    Ok(out)
}

pub fn heatmap_csv(records: &[HeatmapRecord]) -> String {
    let mut s = String::from("stage,layer,row,col,amplitude\n");
    for r in records {
        s.push_str(&format!("{},{},{},{},{:.10e}\n", r.stage.name(), r.layer, r.row, r.col, r.amplitude));
    }
    s
}

/// Fraction of cells whose amplitude exceeds `factor` times the median.
pub fn bright_fraction(amplitudes: &[f64], factor: f64) -> f64 {
    let mut sorted = amplitudes.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let med = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    amplitudes.iter().filter(|&&a| a > factor * med).count() as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub kappa: f64,
    pub kind: ActivationKind,
    pub ser: f64,
    pub ci95: f64,
    pub iterations: usize,
    pub seed: u64,
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,kappa,kind,ser,ci95,iterations,seed,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.10e},{:.10e},{},{},{}\n",
                r.n, r.kappa, r.kind, r.ser, r.ci95, r.iterations, r.seed, r.status
            ));
        }
        s
    }

    pub fn get(&self, n: usize, kappa: f64, kind: ActivationKind) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n == n && r.kappa == kappa && r.kind == kind)
    }
}

/// Seed of one sweep combination. Kinds at the same `(N, kappa)` share it so
/// their comparison uses common random numbers.
pub fn sweep_seed(master_seed: u64, n: usize, kappa: f64) -> u64 {
    StreamId::new(master_seed, Purpose::Sweep, n as u64, kappa.to_bits()).rng().next_u64()
}

/// Retrain and test every `(N, kappa, kind)` combination, N-major.
pub fn sweep_elements<F>(
    base: &ExperimentConfig,
    n_values: &[usize],
    kappa_values: &[f64],
    kinds: &[ActivationKind],
    mut on_row: F,
) -> Result<SweepResult>
where
    F: FnMut(&SweepRow),
{
    let master = base.master_seed()?;
    let mut result = SweepResult::default();
    for &n in n_values {
        for &kappa in kappa_values {
            for &kind in kinds {
                let seed = sweep_seed(master, n, kappa);
                let mut cfg = base.clone();
                cfg.geometry.cells_per_layer = n;
                cfg.channel.kappa = kappa;
                cfg.surface.kind = kind;
                cfg.training.master_seed = Some(seed);
                let row = match Scenario::new(cfg).and_then(|scn| train_and_evaluate(&scn)) {
                    Ok(run) => SweepRow {
                        n,
                        kappa,
                        kind,
                        ser: run.estimate.ser,
                        ci95: run.estimate.ci95_halfwidth,
                        iterations: run.outcome.losses.len(),
                        seed,
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        n,
                        kappa,
                        kind,
                        ser: f64::NAN,
                        ci95: f64::NAN,
                        iterations: 0,
                        seed,
                        status: format!("error: {}", e.to_string().replace(',', ";")),
                    },
                };
                on_row(&row);
                result.rows.push(row);
            }
        }
    }
    Ok(result)
}

/// SER estimate for a batch already pushed through a link (no channel redraw).
pub fn ser_of_batch(batch: &SymbolBatch, y: &Array2<Complex64>, eq: Equalizer, symbol_power: f64) -> SerEstimate {
    let decided = detect_symbols(y, eq, symbol_power);
    let errors = decided.iter().zip(batch.labels.iter()).filter(|(a, b)| a != b).count();
    SerEstimate::from_counts(errors, decided.len())
}

/// Fresh evaluation batch, for callers that need the raw draws.
pub fn evaluation_batch(scn: &Scenario, size: usize, a: u64) -> SymbolBatch {
    generate_batch(scn, size, scn.stream(Purpose::Evaluation, a), 0)
}
