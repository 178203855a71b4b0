//! Reverse-mode gradients of a real loss through the batched end-to-end
//! model.
//!
//! Complex fields are treated as pairs of reals. The adjoint of a complex
//! value `z` is `dL/dRe(z) + j dL/dIm(z)`, so a first-order loss change is
//! `Re(conj(adj) * dz)`. Hard amplitude steps use a straight-through rule:
//! the forward keeps the 0/1 gate, the backward differentiates a logistic
//! relaxation of it.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::link::{ChannelMode, LinkModel};
use crate::rng::StreamId;
use crate::surface::{
    gate, logistic, stack_forward_batch, LayerActivation, SisParams, Side, Smoothing, StackParams, StackTrace,
    Thresholds,
};
use crate::training::SymbolBatch;

/// Columns per work unit. Fixed so results do not depend on thread count.
pub const CHUNK_COLUMNS: usize = 64;

#[derive(Clone, Debug)]
struct ChunkTape {
    range: Range<usize>,
    u: Array2<Complex64>,
    /// Reparameterised scattered directions (one column per sample).
    w: Option<Array2<Complex64>>,
    rx: StackTrace,
}

/// Recorded forward evaluation of one batch.
#[derive(Clone, Debug)]
pub struct GradientTape {
    /// Unique transmit column each batch column maps to.
    unique_of: Vec<usize>,
    tx: StackTrace,
    chunks: Vec<ChunkTape>,
    channel_streams: Vec<StreamId>,
    smoothing: Smoothing,
    /// Received vectors, one column per batch element.
    pub y: Array2<Complex64>,
}

impl GradientTape {
    pub fn batch_size(&self) -> usize {
        self.y.ncols()
    }

    pub fn unique_transmissions(&self) -> usize {
        self.tx.output.ncols()
    }

    /// Transmit-stack trace of batch column `b` (one column per layer).
    pub fn tx_trace(&self) -> &StackTrace {
        &self.tx
    }

    pub fn unique_index(&self, b: usize) -> usize {
        self.unique_of[b]
    }

    /// Receive-stack trace and channel input of batch column `b`.
    pub fn rx_column(&self, b: usize) -> (Vec<Array1<Complex64>>, Vec<Array1<Complex64>>, Array1<Complex64>) {
        let chunk = self.chunks.iter().find(|c| c.range.contains(&b)).expect("column in range");
        let k = b - chunk.range.start;
        (
            chunk.rx.pre.iter().map(|a| a.column(k).to_owned()).collect(),
            chunk.rx.post.iter().map(|a| a.column(k).to_owned()).collect(),
            chunk.u.column(k).to_owned(),
        )
    }
}

fn column_key(col: ndarray::ArrayView1<Complex64>) -> Vec<u64> {
    col.iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect()
}

/// Apply the inter-stack channel to a chunk of transmit outputs.
fn apply_channel(
    model: &LinkModel,
    u: &Array2<Complex64>,
    streams: &[StreamId],
) -> (Array2<Complex64>, Option<Array2<Complex64>>) {
    match model.channel_mode {
        ChannelMode::Reparameterized => {
            let mut r = model.los.dot(u);
            let mut w = Array2::zeros(u.raw_dim());
            for (k, id) in streams.iter().enumerate() {
                let dir = model.draw_scattered_direction(&mut id.rng());
                let norm = u.column(k).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                let scale = model.scattered_scale * norm;
                Zip::from(r.column_mut(k)).and(&dir).for_each(|r, &d| *r += d * scale);
                w.column_mut(k).assign(&dir);
            }
            (r, Some(w))
        }
        ChannelMode::Materialized => {
            let mut r = Array2::zeros(u.raw_dim());
            for (k, id) in streams.iter().enumerate() {
                let ch = model.draw_realization(&mut id.rng());
                r.column_mut(k).assign(&ch.h.dot(&u.column(k)));
            }
            (r, None)
        }
    }
}

/// Run a batch through the full link, keeping what backward needs when
/// `keep_tape` is set.
pub fn forward_batch(
    model: &LinkModel,
    params: &SisParams,
    batch: &SymbolBatch,
    smoothing: Smoothing,
    keep_tape: bool,
) -> Result<GradientTape> {
    let bsize = batch.x.ncols();
    if batch.channel_streams.len() != bsize || batch.noise.ncols() != bsize {
        return Err(Error::Dimension { context: "batch columns", expected: bsize, found: batch.channel_streams.len() });
    }

    // distinct transmit vectors share one pass through the (noise-free) transmit stack
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut unique_of = Vec::with_capacity(bsize);
    let mut first_col = Vec::new();
    for b in 0..bsize {
        let key = column_key(batch.x.column(b));
        let next = index.len();
        let u = *index.entry(key).or_insert_with(|| {
            first_col.push(b);
            next
        });
        unique_of.push(u);
    }
    let x_unique = batch.x.select(Axis(1), &first_col);
    let tx = stack_forward_batch(&x_unique, &params.tx, Side::Tx, &model.hops.tx, smoothing, keep_tape)?;

    let ranges: Vec<Range<usize>> =
        (0..bsize).step_by(CHUNK_COLUMNS).map(|s| s..(s + CHUNK_COLUMNS).min(bsize)).collect();
    let results: Vec<Result<(ChunkTape, Array2<Complex64>)>> = ranges
        .into_par_iter()
        .map(|range| {
            let cols: Vec<usize> = range.clone().map(|b| unique_of[b]).collect();
            let u = tx.output.select(Axis(1), &cols);
            let (r, w) = apply_channel(model, &u, &batch.channel_streams[range.clone()]);
            let rx = stack_forward_batch(&r, &params.rx, Side::Rx, &model.hops.rx, smoothing, keep_tape)?;
            let y = &rx.output + &batch.noise.slice(s![.., range.clone()]);
            let tape = if keep_tape {
                ChunkTape { range, u, w, rx }
            } else {
                ChunkTape { range, u: Array2::zeros((0, 0)), w: None, rx: StackTrace::default() }
            };
            Ok((tape, y))
        })
        .collect();

    let mut y = Array2::zeros((model.rx_antennas(), bsize));
    let mut chunks = Vec::with_capacity(results.len());
    for res in results {
        let (tape, yc) = res?;
        y.slice_mut(s![.., tape.range.clone()]).assign(&yc);
        chunks.push(tape);
    }
    Ok(GradientTape {
        unique_of,
        tx,
        chunks,
        channel_streams: batch.channel_streams.clone(),
        smoothing,
        y,
    })
}

/// Adjoints produced by one amplitude-step cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepAdjoints {
    pub s: Complex64,
    pub theta: f64,
    pub tau: f64,
    pub rho: f64,
}

/// Core per-cell backward rule shared by all activation kinds.
///
/// `g` is the gate used in the forward pass; the amplitude and threshold
/// derivatives come from the logistic relaxation with temperature `beta`.
#[inline]
fn cell_backward(
    s: Complex64,
    phasor: Complex64,
    g: f64,
    tau: f64,
    a_ref: f64,
    beta: f64,
    adj: Complex64,
) -> (Complex64, f64, f64) {
    let sp = s * phasor;
    let out = sp * g;
    let d_theta = (adj * out.conj()).im;
    let c = (adj.conj() * sp).re;
    let a = s.norm();
    let sig = logistic(beta * (a - tau) / a_ref);
    let dg = beta / a_ref * sig * (1.0 - sig);
    let mut adj_s = phasor.conj() * adj * g;
    if a > 0.0 {
        adj_s += s * (c * dg / a);
    }
    (adj_s, d_theta, -c * dg)
}

/// Straight-through backward of one hard amplitude-step cell.
///
/// The forward gate is `1[|s| >= tau]`; its derivatives with respect to the
/// amplitude and the threshold are replaced by those of
/// `logistic(beta_temp (|s| - tau) / a_ref)`. The phase adjoint is exact.
/// `tau = softplus(rho) a_ref`.
pub fn surrogate_step_backward(
    s: Complex64,
    theta: f64,
    rho: f64,
    a_ref: f64,
    beta_temp: f64,
    upstream: Complex64,
) -> StepAdjoints {
    let tau = crate::surface::softplus(rho) * a_ref;
    let g = gate(s.norm(), tau, Smoothing::Hard, a_ref);
    let (adj_s, d_theta, d_tau) = cell_backward(s, Complex64::from_polar(1.0, theta), g, tau, a_ref, beta_temp, upstream);
    StepAdjoints { s: adj_s, theta: d_theta, tau: d_tau, rho: d_tau * logistic(rho) * a_ref }
}

struct LayerGrad {
    theta: Array1<f64>,
    tau: Option<Array1<f64>>,
}

fn activation_backward(
    pre: &Array2<Complex64>,
    adj_post: &Array2<Complex64>,
    act: &LayerActivation,
    surrogate_beta: f64,
) -> (Array2<Complex64>, LayerGrad) {
    let cells = pre.nrows();
    let mut adj_pre = Array2::zeros(pre.raw_dim());
    let mut d_theta = Array1::zeros(cells);
    let mut d_tau = act.tau.as_ref().map(|_| Array1::zeros(cells));
    let beta = match act.smoothing {
        Smoothing::Smooth { beta_temp } => beta_temp,
        Smoothing::Hard => surrogate_beta,
    };
    for i in 0..cells {
        let phasor = Complex64::from_polar(1.0, act.theta[i]);
        let (pre_row, adj_row) = (pre.row(i), adj_post.row(i));
        let mut out_row = adj_pre.row_mut(i);
        match &act.tau {
            None => {
                let mut acc = 0.0;
                for ((o, &s), &adj) in out_row.iter_mut().zip(pre_row).zip(adj_row) {
                    *o = phasor.conj() * adj;
                    acc += (adj * (s * phasor).conj()).im;
                }
                d_theta[i] = acc;
            }
            Some(tau) => {
                let t = tau[i];
                let (mut acc_theta, mut acc_tau) = (0.0, 0.0);
                for ((o, &s), &adj) in out_row.iter_mut().zip(pre_row).zip(adj_row) {
                    let g = gate(s.norm(), t, act.smoothing, act.a_ref);
                    let (a_s, dth, dt) = cell_backward(s, phasor, g, t, act.a_ref, beta, adj);
                    *o = a_s;
                    acc_theta += dth;
                    acc_tau += dt;
                }
                d_theta[i] = acc_theta;
                if let Some(d) = d_tau.as_mut() {
                    d[i] = acc_tau;
                }
            }
        }
    }
    (adj_pre, LayerGrad { theta: d_theta, tau: d_tau })
}

fn ensure_finite(stage: impl FnOnce() -> String, a: &Array2<Complex64>) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage() })
    }
}

/// Per-layer gradients of one stack.
struct StackGrad {
    theta: Array2<f64>,
    tau: Option<Array2<f64>>,
}

impl StackGrad {
    fn zeros(layers: usize, cells: usize, thresholds: bool) -> Self {
        Self {
            theta: Array2::zeros((layers, cells)),
            tau: thresholds.then(|| Array2::zeros((layers, cells))),
        }
    }

    fn add_layer(&mut self, layer: usize, g: LayerGrad) {
        self.theta.row_mut(layer).assign(&g.theta);
        if let (Some(t), Some(gt)) = (self.tau.as_mut(), g.tau) {
            t.row_mut(layer).assign(&gt);
        }
    }

    fn accumulate(&mut self, other: &StackGrad) {
        self.theta += &other.theta;
        if let (Some(t), Some(o)) = (self.tau.as_mut(), other.tau.as_ref()) {
            *t += o;
        }
    }

    /// Append `d/dtheta` then `d/drho` in parameter order.
    fn flatten_into(&self, stack: &StackParams, out: &mut Vec<f64>) {
        out.extend(self.theta.iter().copied());
        let tau = match &self.tau {
            Some(t) => t,
            None => return,
        };
        match &stack.rho {
            Thresholds::None => {}
            Thresholds::PerUnit(rho) => {
                for l in 0..rho.nrows() {
                    let a = stack.a_ref[l];
                    out.extend(rho.row(l).iter().zip(tau.row(l)).map(|(&r, &d)| d * logistic(r) * a));
                }
            }
            Thresholds::PerLayer(rho) => {
                for (l, &r) in rho.iter().enumerate() {
                    let d: f64 = tau.row(l).iter().sum();
                    out.push(d * logistic(r) * stack.a_ref[l]);
                }
            }
        }
    }
}

/// Pull `adj_y` back to every trainable parameter.
///
/// Returns gradients in [`SisParams::to_vec`] order.
pub fn backward(
    model: &LinkModel,
    params: &SisParams,
    tape: &GradientTape,
    adj_y: &Array2<Complex64>,
    surrogate_beta: f64,
) -> Result<Vec<f64>> {
    let layers = params.layers();
    let cells = params.cells();
    let thresholds = params.kind.is_nonlinear();
    if tape.chunks.first().is_some_and(|c| c.rx.pre.is_empty()) {
        return Err(Error::InvalidConfig("backward needs a tape recorded with keep_tape = true".into()));
    }
    ensure_finite(|| "loss adjoint".into(), adj_y)?;

    type ChunkGrad = (Range<usize>, Array2<Complex64>, StackGrad);
    let partials: Vec<Result<ChunkGrad>> = tape
        .chunks
        .par_iter()
        .map(|chunk| {
            let mut grad = StackGrad::zeros(layers, cells, thresholds);
            let adj_out = adj_y.slice(s![.., chunk.range.clone()]);
            let mut adj = model.rx_adjoint[layers - 1].dot(&adj_out);
            ensure_finite(|| "rx exit hop".into(), &adj)?;
            for l in (0..layers).rev() {
                let act = LayerActivation::new(&params.rx, l, tape.smoothing);
                let (adj_pre, g) = activation_backward(&chunk.rx.pre[l], &adj, &act, surrogate_beta);
                ensure_finite(|| format!("rx layer {} activation", l + 1), &adj_pre)?;
                grad.add_layer(l, g);
                adj = if l > 0 { model.rx_adjoint[l - 1].dot(&adj_pre) } else { adj_pre };
            }
            let adj_u = channel_backward(model, chunk, &adj, &tape.channel_streams[chunk.range.clone()]);
            ensure_finite(|| "channel".into(), &adj_u)?;
            Ok((chunk.range.clone(), adj_u, grad))
        })
        .collect();

    let mut rx_grad = StackGrad::zeros(layers, cells, thresholds);
    let mut adj_tx = Array2::<Complex64>::zeros((cells, tape.unique_transmissions()));
    for p in partials {
        let (range, adj_u, grad) = p?;
        rx_grad.accumulate(&grad);
        for (k, b) in range.enumerate() {
            let mut col = adj_tx.column_mut(tape.unique_of[b]);
            col += &adj_u.column(k);
        }
    }

    let mut tx_grad = StackGrad::zeros(layers, cells, thresholds);
    let mut adj = adj_tx;
    for l in (0..layers).rev() {
        let act = LayerActivation::new(&params.tx, l, tape.smoothing);
        let (adj_pre, g) = activation_backward(&tape.tx.pre[l], &adj, &act, surrogate_beta);
        ensure_finite(|| format!("tx layer {} activation", l + 1), &adj_pre)?;
        tx_grad.add_layer(l, g);
        if l > 0 {
            adj = model.tx_adjoint[l].dot(&adj_pre);
        }
    }

    let mut out = Vec::with_capacity(params.num_trainable());
    tx_grad.flatten_into(&params.tx, &mut out);
    rx_grad.flatten_into(&params.rx, &mut out);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: format!("parameter gradient {}", params.param_label(i)) });
    }
    Ok(out)
}

fn channel_backward(model: &LinkModel, chunk: &ChunkTape, adj_r: &Array2<Complex64>, streams: &[StreamId]) -> Array2<Complex64> {
    match model.channel_mode {
        ChannelMode::Reparameterized => {
            let mut adj_u = model.los_adjoint.dot(adj_r);
            let w = chunk.w.as_ref().expect("reparameterised draws recorded");
            for k in 0..adj_u.ncols() {
                let u = chunk.u.column(k);
                let norm = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let proj: f64 = adj_r.column(k).iter().zip(w.column(k)).map(|(a, d)| (a.conj() * d).re).sum();
                let coef = model.scattered_scale * proj / norm;
                Zip::from(adj_u.column_mut(k)).and(&u).for_each(|a, &uz| *a += uz * coef);
            }
            adj_u
        }
        ChannelMode::Materialized => {
            let mut adj_u = Array2::zeros(chunk.u.raw_dim());
            for (k, id) in streams.iter().enumerate() {
                let ch = model.draw_realization(&mut id.rng());
                let h_adj = ch.h.t().mapv(|z| z.conj());
                adj_u.column_mut(k).assign(&h_adj.dot(&adj_r.column(k)));
            }
            adj_u
        }
    }
}

/// One row of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub parameter_id: usize,
    pub label: String,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

pub const REL_ERR_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_ERR_FLOOR)
}

impl GradCheckReport {
    pub fn from_pairs(pairs: Vec<(usize, String, f64, f64)>) -> Self {
        let entries: Vec<GradCheckEntry> = pairs
            .into_iter()
            .map(|(parameter_id, label, analytic, fd)| GradCheckEntry {
                parameter_id,
                label,
                analytic,
                fd,
                rel_err: relative_error(analytic, fd),
            })
            .collect();
        let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        Self { entries, max_rel_err }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter_id,analytic,fd,rel_err\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:.17e},{:.17e},{:.6e}\n", e.parameter_id, e.analytic, e.fd, e.rel_err));
        }
        s
    }
}

/// Compare backward against central finite differences of the training loss
/// on one frozen batch.
///
/// Parameters start from the configured initialisation with thresholds
/// redrawn uniformly in `[-3, 1]` so the gates sit in their sensitive range.
/// The step for parameter `p` is `fd_step * max(|p|, 1)`.
pub fn finite_difference_check(
    config: &crate::config::ExperimentConfig,
    n_params_sampled: usize,
    fd_step: f64,
) -> Result<GradCheckReport> {
    use crate::rng::Purpose;
    use crate::training::{generate_batch, init_params, loss_and_adjoint, Equalizer, Scenario};
    use rand::seq::index::sample;
    use rand::Rng;

    if !(fd_step > 0.0) || !fd_step.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {fd_step}")));
    }
    let scn = Scenario::new(config.clone())?;
    let smoothing = scn.config.surface.training_smoothing();
    if scn.kind().is_nonlinear() && smoothing == Smoothing::Hard {
        return Err(Error::InvalidConfig(
            "gradient check needs surface.smoothing = \"smooth\": the hard step is not differentiable".into(),
        ));
    }
    let mut params = init_params(&scn)?;
    let mut rng = scn.stream(Purpose::GradCheck, 1).rng();
    for stack in [&mut params.tx, &mut params.rx] {
        match &mut stack.rho {
            Thresholds::None => {}
            Thresholds::PerUnit(r) => r.mapv_inplace(|_| rng.gen_range(-3.0..1.0)),
            Thresholds::PerLayer(r) => r.mapv_inplace(|_| rng.gen_range(-3.0..1.0)),
        }
    }
    let mut batch = generate_batch(&scn, scn.config.training.batch_size, scn.stream(Purpose::GradCheck, 0), 0);
    // Receiver noise does not depend on the parameters. At realistic link
    // budgets it dwarfs the signal and inflates the logits until the finite
    // differences are pure roundoff, so the frozen batch is noise-free.
    batch.noise.fill(Complex64::new(0.0, 0.0));
    let t = &scn.config.training;
    let tape = forward_batch(&scn.model, &params, &batch, smoothing, true)?;
    let eq = Equalizer::fit(&batch.x, &tape.y)?;
    let loss_at = |p: &SisParams| -> Result<f64> {
        let tape = forward_batch(&scn.model, p, &batch, smoothing, false)?;
        Ok(loss_and_adjoint(&tape.y, &batch.labels, eq, t.loss_kind, t.softmax_temp_scale, scn.symbol_power).0)
    };
    let (_, adj) = loss_and_adjoint(&tape.y, &batch.labels, eq, t.loss_kind, t.softmax_temp_scale, scn.symbol_power);
    let analytic = backward(&scn.model, &params, &tape, &adj, scn.surrogate_beta())?;

    let total = params.num_trainable();
    let mut picked = sample(&mut rng, total, n_params_sampled.min(total)).into_vec();
    picked.sort_unstable();
    let base = params.to_vec();
    let mut pairs = Vec::with_capacity(picked.len());
    for i in picked {
        let h = fd_step * base[i].abs().max(1.0);
        let mut probe = params.clone();
        let mut v = base.clone();
        v[i] = base[i] + h;
        probe.set_from_slice(&v);
        let up = loss_at(&probe)?;
        v[i] = base[i] - h;
        probe.set_from_slice(&v);
        let down = loss_at(&probe)?;
        pairs.push((i, params.param_label(i), analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(GradCheckReport::from_pairs(pairs))
}
