//! Statistical-CSI training: symbol batches, the frozen scalar equalizer,
//! the differentiable SER surrogate, and the Adam loop.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;

use crate::config::{ExperimentConfig, LossKind, TrainingConfig};
use crate::error::{Error, Result};
use crate::evaluation::estimate_ser;
use crate::gradients::{backward, forward_batch};
use crate::link::LinkModel;
use crate::propagation::{dbm_to_watts, noise_power, sample_noise};
use crate::rng::{Purpose, StreamId};
use crate::surface::{stack_forward_batch, ActivationKind, SisParams, Side, Smoothing, Thresholds};

/// 4-QAM alphabet in detection tie-break order.
pub const CONSTELLATION: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

/// A resolved experiment: link model plus the derived power levels.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub model: LinkModel,
    /// Symbol power per Tx antenna (W).
    pub symbol_power: f64,
    /// Receiver noise power per antenna (W).
    pub noise_power: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = LinkModel::from_config(&config.geometry, config.channel.kappa, config.channel.mode)?;
        Ok(Self {
            symbol_power: dbm_to_watts(config.channel.tx_power_dbm) / config.geometry.tx_antennas as f64,
            noise_power: noise_power(&config.channel.noise),
            seed: config.master_seed()?,
            model,
            config,
        })
    }

    pub fn kind(&self) -> ActivationKind {
        self.config.surface.kind
    }

    pub fn antennas(&self) -> usize {
        self.model.tx_antennas()
    }

    pub fn surrogate_beta(&self) -> f64 {
        self.config.surface.beta_temp
    }

    pub fn stream(&self, purpose: Purpose, a: u64) -> StreamId {
        StreamId::new(self.seed, purpose, a, 0)
    }
}

/// Transmitted symbols with their matching channel and noise draws.
#[derive(Clone, Debug)]
pub struct SymbolBatch {
    /// `tx_antennas x batch`, scaled to the per-antenna symbol power.
    pub x: Array2<Complex64>,
    /// Constellation index of every entry of `x`.
    pub labels: Array2<u8>,
    /// `rx_antennas x batch` receiver noise.
    pub noise: Array2<Complex64>,
    /// Stream for each element's channel draw.
    pub channel_streams: Vec<StreamId>,
}

impl SymbolBatch {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch with explicit symbols and noise; channel streams derive from `stream`.
    pub fn from_labels(
        labels: Array2<u8>,
        symbol_power: f64,
        noise: Array2<Complex64>,
        stream: StreamId,
    ) -> Self {
        let amp = symbol_power.sqrt();
        let x = labels.mapv(|l| CONSTELLATION[l as usize] * amp);
        let channel_streams = (0..labels.ncols() as u64).map(|b| stream.with_b(2 * b + 1)).collect();
        Self { x, labels, noise, channel_streams }
    }
}

/// Draw `size` independent transmissions. Element `e` (counted from
/// `first_element`) takes its symbols and noise from sub-stream `2e` and its
/// channel from sub-stream `2e + 1` of `stream`.
pub fn generate_batch(scn: &Scenario, size: usize, stream: StreamId, first_element: u64) -> SymbolBatch {
    draw_transmissions(
        scn.antennas(),
        scn.model.rx_antennas(),
        scn.symbol_power,
        scn.noise_power,
        size,
        stream,
        first_element,
    )
}

/// Link-independent core of [`generate_batch`].
pub fn draw_transmissions(
    tx_antennas: usize,
    rx_antennas: usize,
    symbol_power: f64,
    noise_power: f64,
    size: usize,
    stream: StreamId,
    first_element: u64,
) -> SymbolBatch {
    let amp = symbol_power.sqrt();
    let mut labels = Array2::zeros((tx_antennas, size));
    let mut x = Array2::zeros((tx_antennas, size));
    let mut noise = Array2::zeros((rx_antennas, size));
    let mut channel_streams = Vec::with_capacity(size);
    for b in 0..size {
        let e = first_element + b as u64;
        let mut rng = stream.with_b(2 * e).rng();
        for k in 0..tx_antennas {
            let l: u8 = rng.gen_range(0..4);
            labels[[k, b]] = l;
            x[[k, b]] = CONSTELLATION[l as usize] * amp;
        }
        noise.column_mut(b).assign(&sample_noise(rx_antennas, noise_power, &mut rng));
        channel_streams.push(stream.with_b(2 * e + 1));
    }
    SymbolBatch { x, labels, noise, channel_streams }
}

/// Frozen complex gain compensating the average end-to-end response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Equalizer {
    pub g: Complex64,
}

impl Equalizer {
    /// Least-squares scalar fit `g = sum(conj(x) y) / sum(|x|^2)`.
    pub fn fit(x: &Array2<Complex64>, y: &Array2<Complex64>) -> Result<Self> {
        let num: Complex64 = x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum();
        let den: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        let g = num / den;
        if !(g.norm() >= 1e-30) || !g.is_finite() {
            return Err(Error::DegenerateEqualizer(g.norm()));
        }
        Ok(Self { g })
    }
}

/// Fit the equalizer over `samples` fresh transmissions (hard forward).
pub fn fit_equalizer(scn: &Scenario, params: &SisParams, samples: usize, stream: StreamId) -> Result<Equalizer> {
    if samples == 0 {
        return Err(Error::InvalidConfig("equalizer calibration needs at least one sample".into()));
    }
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    let block = 4096;
    let mut start = 0;
    while start < samples {
        let size = block.min(samples - start);
        let batch = generate_batch(scn, size, stream, start as u64);
        let tape = forward_batch(&scn.model, params, &batch, Smoothing::Hard, false)?;
        num += batch.x.iter().zip(tape.y.iter()).map(|(a, b)| a.conj() * b).sum::<Complex64>();
        den += batch.x.iter().map(|a| a.norm_sqr()).sum::<f64>();
        start += size;
    }
    let g = num / den;
    if !(g.norm() >= 1e-30) || !g.is_finite() {
        return Err(Error::DegenerateEqualizer(g.norm()));
    }
    Ok(Equalizer { g })
}

/// Mean surrogate loss over every (antenna, sample) entry and its adjoint
/// with respect to `y`. The equalizer is treated as a constant.
pub fn loss_and_adjoint(
    y: &Array2<Complex64>,
    labels: &Array2<u8>,
    eq: Equalizer,
    loss_kind: LossKind,
    temp: f64,
    symbol_power: f64,
) -> (f64, Array2<Complex64>) {
    let count = y.len() as f64;
    let points: Vec<Complex64> = CONSTELLATION.iter().map(|&s| eq.g * symbol_power.sqrt() * s).collect();
    let scale = eq.g.norm_sqr() * symbol_power;
    let mut adj = Array2::zeros(y.raw_dim());
    let mut total = 0.0;
    match loss_kind {
        LossKind::SoftmaxCe => {
            let d = temp * scale;
            for ((a, &yi), &lab) in adj.iter_mut().zip(y.iter()).zip(labels.iter()) {
                // Logits relative to the true symbol. Expanding the squared
                // distances avoids cancelling two large numbers when y sits
                // far from every constellation point.
                let t = points[lab as usize];
                let rel: [f64; 4] = std::array::from_fn(|k| {
                    let delta = points[k] - t;
                    (t.norm_sqr() - points[k].norm_sqr() + 2.0 * (yi.conj() * delta).re) / d
                });
                let m = rel.iter().copied().fold(0.0, f64::max);
                let z: f64 = rel.iter().map(|r| (r - m).exp()).sum();
                total += m + z.ln();
                let mut g = Complex64::new(0.0, 0.0);
                for k in 0..4 {
                    g += (points[k] - t) * (2.0 * (rel[k] - m).exp() / z / d);
                }
                *a = g / count;
            }
        }
        LossKind::Mse => {
            for ((a, &yi), &lab) in adj.iter_mut().zip(y.iter()).zip(labels.iter()) {
                let e = yi - points[lab as usize];
                total += e.norm_sqr() / scale;
                *a = e * (2.0 / scale / count);
            }
        }
    }
    (total / count, adj)
}

pub fn surrogate_loss(
    y: &Array2<Complex64>,
    labels: &Array2<u8>,
    eq: Equalizer,
    loss_kind: LossKind,
    temp: f64,
    symbol_power: f64,
) -> f64 {
    loss_and_adjoint(y, labels, eq, loss_kind, temp, symbol_power).0
}

/// Nearest power-scaled constellation point per antenna; ties resolve to the
/// earlier point in [`CONSTELLATION`].
pub fn detect_symbols(y: &Array2<Complex64>, eq: Equalizer, symbol_power: f64) -> Array2<u8> {
    let points: Vec<Complex64> = CONSTELLATION.iter().map(|&s| eq.g * symbol_power.sqrt() * s).collect();
    y.mapv(|yi| {
        let mut best = 0u8;
        let mut best_d = (yi - points[0]).norm_sqr();
        for (k, p) in points.iter().enumerate().skip(1) {
            let d = (yi - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = k as u8;
            }
        }
        best
    })
}

/// Rescale `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, cfg: &TrainingConfig) -> Self {
        Self::with_hyper(dim, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn with_hyper(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            if self.lr == 0.0 {
                continue;
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Set each layer's reference amplitude to the median input amplitude seen on
/// `samples` transmissions through the stacks with thresholds disabled.
pub fn calibrate_reference_amplitudes(scn: &Scenario, params: &mut SisParams, samples: usize, stream: StreamId) -> Result<()> {
    let mut probe = params.clone();
    probe.kind = ActivationKind::Linear;
    probe.tx.rho = Thresholds::None;
    probe.rx.rho = Thresholds::None;
    let batch = generate_batch(scn, samples, stream, 0);
    let model = &scn.model;
    let tx = stack_forward_batch(&batch.x, &probe.tx, Side::Tx, &model.hops.tx, Smoothing::Hard, true)?;
    let tape = forward_batch(model, &probe, &batch, Smoothing::Hard, true)?;
    for l in 0..params.layers() {
        let mut amps: Vec<f64> = tx.pre[l].iter().map(|z| z.norm()).collect();
        params.tx.a_ref[l] = median(&mut amps);
        let mut amps: Vec<f64> = (0..tape.batch_size()).flat_map(|b| {
            let (pre, _, _) = tape.rx_column(b);
            pre[l].iter().map(|z| z.norm()).collect::<Vec<_>>()
        }).collect();
        params.rx.a_ref[l] = median(&mut amps);
    }
    for (side, a) in [("tx", &params.tx.a_ref), ("rx", &params.rx.a_ref)] {
        if let Some(l) = a.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite { stage: format!("{side} layer {} reference amplitude", l + 1) });
        }
    }
    Ok(())
}

/// Uniform random phases, `rho_init` thresholds, calibrated reference amplitudes.
pub fn init_params(scn: &Scenario) -> Result<SisParams> {
    let cfg = &scn.config;
    let mut params = SisParams::zeros(cfg.surface.kind, cfg.geometry.cells_per_layer, cfg.geometry.layers_per_sis, cfg.surface.rho_init);
    params.seed = scn.seed;
    let mut rng = scn.stream(Purpose::Init, 0).rng();
    for s in [&mut params.tx, &mut params.rx] {
        s.theta.mapv_inplace(|_| rng.gen_range(0.0..2.0 * PI));
    }
    calibrate_reference_amplitudes(scn, &mut params, cfg.surface.a_ref_samples, scn.stream(Purpose::Calibration, 0))?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// 1-based iteration count at which the point was recorded.
    pub iteration: usize,
    pub loss: f64,
    pub ser: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,ser\n");
        for p in &self.points {
            s.push_str(&format!("{},{:.10e},{:.10e}\n", p.iteration, p.loss, p.ser));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: SisParams,
    pub curve: LearningCurve,
    /// Equalizer in use at the end of training (`None` when no step ran).
    pub equalizer: Option<Equalizer>,
    /// Training loss of every iteration.
    pub losses: Vec<f64>,
}

/// Run `f` on a pool of `threads` workers; 0 keeps the global pool.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// One gradient evaluation on a batch: returns `(loss, gradient, tape)`.
pub fn loss_gradient(
    scn: &Scenario,
    params: &SisParams,
    batch: &SymbolBatch,
    eq: Option<Equalizer>,
    smoothing: Smoothing,
) -> Result<(f64, Vec<f64>, Equalizer)> {
    let tape = forward_batch(&scn.model, params, batch, smoothing, true)?;
    let eq = match eq {
        Some(e) => e,
        None => Equalizer::fit(&batch.x, &tape.y)?,
    };
    let t = &scn.config.training;
    let (loss, adj) = loss_and_adjoint(&tape.y, &batch.labels, eq, t.loss_kind, t.softmax_temp_scale, scn.symbol_power);
    if !loss.is_finite() {
        return Err(Error::NonFinite { stage: "loss".into() });
    }
    let grad = backward(&scn.model, params, &tape, &adj, scn.surrogate_beta())?;
    Ok((loss, grad, eq))
}

/// Train from freshly initialised parameters.
pub fn train(scn: &Scenario) -> Result<TrainOutcome> {
    with_threads(scn.config.training.threads, || {
        let params = init_params(scn)?;
        train_from(scn, params)
    })
}

/// Train starting from `params`.
pub fn train_from(scn: &Scenario, mut params: SisParams) -> Result<TrainOutcome> {
    let t = &scn.config.training;
    let smoothing = scn.config.surface.training_smoothing();
    let mut adam = Adam::new(params.num_trainable(), t);
    let mut flat = params.to_vec();
    let mut eq: Option<Equalizer> = None;
    let mut curve = LearningCurve::default();
    let mut losses = Vec::with_capacity(t.iterations);
    for it in 0..t.iterations {
        let batch = generate_batch(scn, t.batch_size, scn.stream(Purpose::TrainBatch, it as u64), 0);
        let refresh = it % t.equalizer_refresh_every == 0;
        let (loss, mut grad, used) = loss_gradient(scn, &params, &batch, if refresh { None } else { eq }, smoothing)?;
        eq = Some(used);
        clip_gradient(&mut grad, t.grad_clip_norm);
        adam.step(&mut flat, &grad);
        params.set_from_slice(&flat);
        losses.push(loss);
        let done = it + 1;
        if done % t.eval_every == 0 || done == t.iterations {
            let est = estimate_ser(
                scn,
                &params,
                used,
                t.eval_samples * scn.antennas(),
                scn.stream(Purpose::TrainEval, it as u64),
            )?;
            curve.points.push(CurvePoint { iteration: done, loss, ser: est.ser });
        }
    }
    Ok(TrainOutcome { params, curve, equalizer: eq, losses })
}

/// Per-antenna symbol power of `labels` scaled like a batch, for tests and tools.
pub fn symbols(labels: &Array1<u8>, symbol_power: f64) -> Array1<Complex64> {
    labels.mapv(|l| CONSTELLATION[l as usize] * symbol_power.sqrt())
}
