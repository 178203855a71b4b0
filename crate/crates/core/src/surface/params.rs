//! Trainable surface parameters and their text persistence format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Unit-cell behaviour of both stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    /// Phase-only cells.
    #[serde(rename = "linear")]
    Linear,
    /// Amplitude step with an independent threshold per cell.
    #[serde(rename = "nl_unit")]
    NonlinearPerUnit,
    /// Amplitude step with one threshold shared by a whole layer.
    #[serde(rename = "nl_layer")]
    NonlinearPerLayer,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [
        ActivationKind::Linear,
        ActivationKind::NonlinearPerUnit,
        ActivationKind::NonlinearPerLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::NonlinearPerUnit => "nl_unit",
            ActivationKind::NonlinearPerLayer => "nl_layer",
        }
    }

    pub fn is_nonlinear(self) -> bool {
        self != ActivationKind::Linear
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown kind '{s}' (expected linear, nl_unit or nl_layer)")))
    }
}

/// How the amplitude gate is evaluated in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothing {
    Hard,
    /// Logistic gate with temperature relative to the layer reference amplitude.
    Smooth { beta_temp: f64 },
}

/// Number of real trainable values across both stacks.
pub fn param_count(kind: ActivationKind, cells: usize, layers: usize) -> usize {
    match kind {
        ActivationKind::Linear => cells * layers * 2,
        ActivationKind::NonlinearPerUnit => 2 * cells * layers * 2,
        ActivationKind::NonlinearPerLayer => (cells + 1) * layers * 2,
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Threshold parameters of one stack, before the softplus map.
#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    None,
    PerUnit(Array2<f64>),
    PerLayer(Array1<f64>),
}

impl Thresholds {
    pub fn len(&self) -> usize {
        match self {
            Thresholds::None => 0,
            Thresholds::PerUnit(a) => a.len(),
            Thresholds::PerLayer(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw threshold parameter driving cell `cell` of layer `layer`.
    pub fn rho(&self, layer: usize, cell: usize) -> Option<f64> {
        match self {
            Thresholds::None => None,
            Thresholds::PerUnit(a) => Some(a[[layer, cell]]),
            Thresholds::PerLayer(a) => Some(a[layer]),
        }
    }
}

/// Parameters of one surface stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackParams {
    /// Phase shifts, `layers x cells`, radians.
    pub theta: Array2<f64>,
    pub rho: Thresholds,
    /// Per-layer reference amplitude, frozen after initialisation.
    pub a_ref: Array1<f64>,
}

impl StackParams {
    pub fn layers(&self) -> usize {
        self.theta.nrows()
    }

    pub fn cells(&self) -> usize {
        self.theta.ncols()
    }

    /// Effective nonnegative thresholds of one layer, `softplus(rho) * a_ref`.
    pub fn layer_thresholds(&self, layer: usize) -> Option<Array1<f64>> {
        let a = self.a_ref[layer];
        match &self.rho {
            Thresholds::None => None,
            Thresholds::PerUnit(r) => Some(r.row(layer).mapv(|x| softplus(x) * a)),
            Thresholds::PerLayer(r) => Some(Array1::from_elem(self.cells(), softplus(r[layer]) * a)),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.theta.len() + self.rho.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SisParams {
    pub kind: ActivationKind,
    pub tx: StackParams,
    pub rx: StackParams,
    /// Master seed the parameters were trained with (informational).
    pub seed: u64,
}

impl SisParams {
    /// Zero phases, thresholds set to `rho_init`, unit reference amplitudes.
    pub fn zeros(kind: ActivationKind, cells: usize, layers: usize, rho_init: f64) -> Self {
        let stack = || StackParams {
            theta: Array2::zeros((layers, cells)),
            rho: match kind {
                ActivationKind::Linear => Thresholds::None,
                ActivationKind::NonlinearPerUnit => Thresholds::PerUnit(Array2::from_elem((layers, cells), rho_init)),
                ActivationKind::NonlinearPerLayer => Thresholds::PerLayer(Array1::from_elem(layers, rho_init)),
            },
            a_ref: Array1::ones(layers),
        };
        Self { kind, tx: stack(), rx: stack(), seed: 0 }
    }

    pub fn cells(&self) -> usize {
        self.tx.cells()
    }

    pub fn layers(&self) -> usize {
        self.tx.layers()
    }

    pub fn num_trainable(&self) -> usize {
        self.tx.num_trainable() + self.rx.num_trainable()
    }

    /// Flatten trainable values in the fixed order
    /// `theta_tx, rho_tx, theta_rx, rho_rx` (row-major).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for s in [&self.tx, &self.rx] {
            out.extend(s.theta.iter().copied());
            match &s.rho {
                Thresholds::None => {}
                Thresholds::PerUnit(r) => out.extend(r.iter().copied()),
                Thresholds::PerLayer(r) => out.extend(r.iter().copied()),
            }
        }
        out
    }

    /// Inverse of [`SisParams::to_vec`].
    pub fn set_from_slice(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_trainable(), "parameter vector length");
        let mut it = values.iter().copied();
        for s in [&mut self.tx, &mut self.rx] {
            s.theta.iter_mut().for_each(|v| *v = it.next().unwrap());
            match &mut s.rho {
                Thresholds::None => {}
                Thresholds::PerUnit(r) => r.iter_mut().for_each(|v| *v = it.next().unwrap()),
                Thresholds::PerLayer(r) => r.iter_mut().for_each(|v| *v = it.next().unwrap()),
            }
        }
    }

    /// Human-readable name of flattened parameter `index`.
    pub fn param_label(&self, index: usize) -> String {
        let mut offset = 0;
        for (side, s) in [("tx", &self.tx), ("rx", &self.rx)] {
            let n = s.theta.len();
            if index < offset + n {
                let k = index - offset;
                return format!("theta_{side}[{}][{}]", k / s.cells(), k % s.cells());
            }
            offset += n;
            let n = s.rho.len();
            if index < offset + n {
                let k = index - offset;
                return match s.rho {
                    Thresholds::PerLayer(_) => format!("rho_{side}[{k}]"),
                    _ => format!("rho_{side}[{}][{}]", k / s.cells(), k % s.cells()),
                };
            }
            offset += n;
        }
        format!("out_of_range[{index}]")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version {PARAMS_FORMAT_VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        let _ = writeln!(out, "N {}", self.cells());
        let _ = writeln!(out, "L {}", self.layers());
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "trainable {}", self.num_trainable());
        for (side, s) in [("tx", &self.tx), ("rx", &self.rx)] {
            write_matrix(&mut out, &format!("theta_{side}"), &s.theta);
            match &s.rho {
                Thresholds::None => {
                    let _ = writeln!(out, "rho_{side} 0");
                }
                Thresholds::PerUnit(r) => write_matrix(&mut out, &format!("rho_{side}"), r),
                Thresholds::PerLayer(r) => write_vector(&mut out, &format!("rho_{side}"), r),
            }
            write_vector(&mut out, &format!("a_ref_{side}"), &s.a_ref);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Parser { lines: text.lines().enumerate().peekable() };
        let version: u32 = p.header("version")?;
        if version != PARAMS_FORMAT_VERSION {
            return Err(Error::Parse { line: 1, message: format!("unsupported version {version}") });
        }
        let kind: ActivationKind = p.header("kind")?;
        let cells: usize = p.header("N")?;
        let layers: usize = p.header("L")?;
        let seed: u64 = p.header("seed")?;
        let (trainable_line, trainable): (usize, usize) = p.header_with_line("trainable")?;
        let mut stacks = Vec::new();
        for side in ["tx", "rx"] {
            let theta = p.matrix(&format!("theta_{side}"), layers, cells)?;
            let rho = match kind {
                ActivationKind::Linear => {
                    p.vector(&format!("rho_{side}"), 0)?;
                    Thresholds::None
                }
                ActivationKind::NonlinearPerUnit => Thresholds::PerUnit(p.matrix(&format!("rho_{side}"), layers, cells)?),
                ActivationKind::NonlinearPerLayer => Thresholds::PerLayer(p.vector(&format!("rho_{side}"), layers)?),
            };
            let a_ref = p.vector(&format!("a_ref_{side}"), layers)?;
            stacks.push(StackParams { theta, rho, a_ref });
        }
        if let Some((i, l)) = p.lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse { line: i + 1, message: format!("unexpected trailing content '{l}'") });
        }
        let rx = stacks.pop().unwrap();
        let tx = stacks.pop().unwrap();
        let params = SisParams { kind, tx, rx, seed };
        if params.num_trainable() != trainable {
            return Err(Error::Parse {
                line: trainable_line,
                message: format!("declared {trainable} trainable values, blocks hold {}", params.num_trainable()),
            });
        }
        Ok(params)
    }

    /// Check that the parameters fit a configuration.
    pub fn check_shape(&self, kind: ActivationKind, cells: usize, layers: usize) -> Result<()> {
        if self.kind != kind || self.cells() != cells || self.layers() != layers {
            return Err(Error::ParamShape {
                expected: format!("kind={kind} N={cells} L={layers}"),
                found: format!("kind={} N={} L={}", self.kind, self.cells(), self.layers()),
            });
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn write_vector(out: &mut String, name: &str, v: &Array1<f64>) {
    let _ = writeln!(out, "{name} {}", v.len());
    if !v.is_empty() {
        let line: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

struct Parser<'a, I: Iterator<Item = (usize, &'a str)>> {
    lines: std::iter::Peekable<I>,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Parser<'a, I> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        for (i, l) in self.lines.by_ref() {
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(Error::Parse { line: 0, message: format!("unexpected end of file, expected {what}") })
    }

    fn header_with_line<T: FromStr>(&mut self, key: &str) -> Result<(usize, T)> {
        let (line, l) = self.next_line(key)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Parse { line, message: format!("expected '{key}' header, found '{l}'") });
        }
        let value = parts.next().ok_or_else(|| Error::Parse { line, message: format!("missing value for '{key}'") })?;
        if parts.next().is_some() {
            return Err(Error::Parse { line, message: format!("trailing tokens after '{key}'") });
        }
        let parsed = value
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("invalid value '{value}' for '{key}'") })?;
        Ok((line, parsed))
    }

    fn header<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.header_with_line(key).map(|(_, v)| v)
    }

    fn block_header(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        let (line, l) = self.next_line(name)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(name) {
            return Err(Error::Parse { line, message: format!("expected block '{name}', found '{l}'") });
        }
        let found: Vec<&str> = parts.collect();
        let expected: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        if found != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Parse {
                line,
                message: format!("block '{name}' has dimensions {found:?}, expected {expected:?}"),
            });
        }
        Ok(())
    }

    fn row(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (line, l) = self.next_line(name)?;
        let values = l
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, message: format!("invalid number '{t}' in block '{name}'") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != len {
            return Err(Error::Parse {
                line,
                message: format!("block '{name}' row has {} values, expected {len}", values.len()),
            });
        }
        Ok(values)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        self.block_header(name, &[rows, cols])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row(name, cols)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        self.block_header(name, &[len])?;
        if len == 0 {
            return Ok(Array1::zeros(0));
        }
        Ok(Array1::from(self.row(name, len)?))
    }
}
