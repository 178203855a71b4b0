//! Forward model of the surface stacks: phase-only cells, amplitude-step
//! cells, and the end-to-end map `y = P(H Q(x)) + n`.
//!
//! Batched routines hold one sample per column of an `(elements, batch)`
//! array so every free-space hop is a single matrix product.

mod params;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;

pub use params::{
    logistic, param_count, softplus, ActivationKind, SisParams, Smoothing, StackParams, Thresholds,
    PARAMS_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::propagation::DiffractionMatrix;

/// Transmission gate of one cell for incident amplitude `a`.
///
/// Hard mode transmits on the boundary `a == tau`.
#[inline]
pub fn gate(a: f64, tau: f64, smoothing: Smoothing, a_ref: f64) -> f64 {
    match smoothing {
        Smoothing::Hard => {
            if a >= tau {
                1.0
            } else {
                0.0
            }
        }
        Smoothing::Smooth { beta_temp } => logistic(beta_temp * (a - tau) / a_ref),
    }
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { context, expected, found });
    }
    Ok(())
}

fn check_tau(tau: ArrayView1<f64>) -> Result<()> {
    if let Some((index, &value)) = tau.iter().enumerate().find(|(_, &t)| !(t >= 0.0)) {
        return Err(Error::NegativeThreshold { index, value });
    }
    Ok(())
}

pub fn phase_forward(s: &Array1<Complex64>, theta: &Array1<f64>) -> Result<Array1<Complex64>> {
    check_len("phase_forward", s.len(), theta.len())?;
    Ok(s.iter().zip(theta).map(|(&v, &t)| v * Complex64::from_polar(1.0, t)).collect())
}

/// Hard amplitude step: `1[|s| >= tau] s exp(j theta)`.
pub fn amplitude_step_forward(
    s: &Array1<Complex64>,
    theta: &Array1<f64>,
    tau: &Array1<f64>,
) -> Result<Array1<Complex64>> {
    check_len("amplitude_step_forward", s.len(), theta.len())?;
    check_len("amplitude_step_forward", s.len(), tau.len())?;
    check_tau(tau.view())?;
    Ok(s.iter()
        .zip(theta)
        .zip(tau)
        .map(|((&v, &t), &th)| {
            if v.norm() >= th {
                v * Complex64::from_polar(1.0, t)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect())
}

/// Logistic relaxation of the amplitude step.
pub fn smooth_step_forward(
    s: &Array1<Complex64>,
    theta: &Array1<f64>,
    tau: &Array1<f64>,
    beta_temp: f64,
    a_ref: f64,
) -> Result<Array1<Complex64>> {
    check_len("smooth_step_forward", s.len(), theta.len())?;
    check_len("smooth_step_forward", s.len(), tau.len())?;
    check_tau(tau.view())?;
    if !(beta_temp > 0.0) || !(a_ref > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "smooth step needs beta_temp > 0 and a_ref > 0, got {beta_temp} and {a_ref}"
        )));
    }
    let sm = Smoothing::Smooth { beta_temp };
    Ok(s.iter()
        .zip(theta)
        .zip(tau)
        .map(|((&v, &t), &th)| v * Complex64::from_polar(gate(v.norm(), th, sm, a_ref), t))
        .collect())
}

/// Which end of the link a stack sits on.
///
/// A transmit stack applies a hop before every layer; a receive stack takes
/// the channel output as its first layer input and applies a hop after every
/// layer, the last one landing on the antennas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Tx,
    Rx,
}

/// Activation settings for one layer.
pub(crate) struct LayerActivation<'a> {
    pub theta: ArrayView1<'a, f64>,
    pub tau: Option<Array1<f64>>,
    pub smoothing: Smoothing,
    pub a_ref: f64,
}

impl<'a> LayerActivation<'a> {
    pub fn new(stack: &'a StackParams, layer: usize, smoothing: Smoothing) -> Self {
        Self {
            theta: stack.theta.row(layer),
            tau: stack.layer_thresholds(layer),
            smoothing,
            a_ref: stack.a_ref[layer],
        }
    }

    /// Apply in place to every column of `field`.
    pub fn apply(&self, field: &mut Array2<Complex64>) {
        let phasors: Vec<Complex64> = self.theta.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
        match &self.tau {
            None => {
                for (mut row, &p) in field.axis_iter_mut(Axis(0)).zip(&phasors) {
                    row.mapv_inplace(|v| v * p);
                }
            }
            Some(tau) => {
                for ((mut row, &p), &t) in field.axis_iter_mut(Axis(0)).zip(&phasors).zip(tau) {
                    row.mapv_inplace(|v| {
                        let g = gate(v.norm(), t, self.smoothing, self.a_ref);
                        if g == 1.0 {
                            v * p
                        } else {
                            v * p * g
                        }
                    });
                }
            }
        }
    }
}

/// Fields recorded while a batch passes through one stack.
#[derive(Clone, Debug, Default)]
pub struct StackTrace {
    /// Input of each layer (before its activation).
    pub pre: Vec<Array2<Complex64>>,
    /// Output of each layer (after its activation).
    pub post: Vec<Array2<Complex64>>,
    pub output: Array2<Complex64>,
}

/// Propagate a batch (one sample per column) through one stack.
///
/// `hops` must hold exactly one matrix per layer, ordered as described on
/// [`Side`]. When `keep_trace` is false only `output` is filled.
pub fn stack_forward_batch(
    input: &Array2<Complex64>,
    stack: &StackParams,
    side: Side,
    hops: &[DiffractionMatrix],
    smoothing: Smoothing,
    keep_trace: bool,
) -> Result<StackTrace> {
    let layers = stack.layers();
    check_len("stack hop count", layers, hops.len())?;
    let mut trace = StackTrace::default();
    let mut field = match side {
        Side::Tx => {
            check_len("stack entry hop", hops[0].cols(), input.nrows())?;
            hops[0].entries.dot(input)
        }
        Side::Rx => {
            check_len("stack input", stack.cells(), input.nrows())?;
            input.clone()
        }
    };
    for layer in 0..layers {
        if layer > 0 {
            let hop = match side {
                Side::Tx => &hops[layer],
                Side::Rx => &hops[layer - 1],
            };
            check_len("inter-layer hop", hop.cols(), field.nrows())?;
            field = hop.entries.dot(&field);
        }
        check_len("layer width", stack.cells(), field.nrows())?;
        if keep_trace {
            trace.pre.push(field.clone());
        }
        LayerActivation::new(stack, layer, smoothing).apply(&mut field);
        if keep_trace {
            trace.post.push(field.clone());
        }
    }
    if side == Side::Rx {
        let exit = &hops[layers - 1];
        check_len("exit hop", exit.cols(), field.nrows())?;
        field = exit.entries.dot(&field);
    }
    trace.output = field;
    Ok(trace)
}

/// Single-sample stack forward returning the output and the per-layer trace.
pub fn sis_stack_forward(
    input: &Array1<Complex64>,
    stack: &StackParams,
    side: Side,
    hops: &[DiffractionMatrix],
    smoothing: Smoothing,
) -> Result<(Array1<Complex64>, StackTrace)> {
    let col = input.clone().insert_axis(Axis(1));
    let trace = stack_forward_batch(&col, stack, side, hops, smoothing, true)?;
    Ok((trace.output.column(0).to_owned(), trace))
}

/// Every intermediate field of one end-to-end evaluation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tx: StackTrace,
    pub channel_input: Array1<Complex64>,
    pub channel_output: Array1<Complex64>,
    pub rx: StackTrace,
    pub received: Array1<Complex64>,
}

impl ForwardTrace {
    /// `|field|` of a stack layer's input (`pre = true`) or output.
    pub fn amplitudes(&self, side: Side, layer: usize, pre: bool) -> Vec<f64> {
        let st = match side {
            Side::Tx => &self.tx,
            Side::Rx => &self.rx,
        };
        let f = if pre { &st.pre[layer] } else { &st.post[layer] };
        f.column(0).iter().map(|z| z.norm()).collect()
    }
}

/// `y = rx_stack(H tx_stack(x)) + noise` for one transmission.
pub fn end_to_end_forward(
    x: &Array1<Complex64>,
    params: &SisParams,
    tx_hops: &[DiffractionMatrix],
    rx_hops: &[DiffractionMatrix],
    h: &Array2<Complex64>,
    noise: &Array1<Complex64>,
    smoothing: Smoothing,
) -> Result<(Array1<Complex64>, ForwardTrace)> {
    let (u, tx) = sis_stack_forward(x, &params.tx, Side::Tx, tx_hops, smoothing)?;
    check_len("channel input", h.ncols(), u.len())?;
    let r = h.dot(&u);
    let (out, rx) = sis_stack_forward(&r, &params.rx, Side::Rx, rx_hops, smoothing)?;
    check_len("noise", out.len(), noise.len())?;
    let y = &out + noise;
    Ok((
        y.clone(),
        ForwardTrace { tx, channel_input: u, channel_output: r, rx, received: y },
    ))
}
