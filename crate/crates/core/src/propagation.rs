//! Free-space couplings between planes, the Rician inter-stack channel, and
//! receiver noise.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, SystemGeometry};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Discretised first Rayleigh-Sommerfeld coupling from a radiating cell at
/// `src` to an observation point `dst`.
///
/// `w = (A cos(chi) / r) (1/(2 pi r) - j/lambda) exp(j 2 pi r / lambda)` where
/// `cos(chi)` is measured against the plane normal.
pub fn rs_coefficient(src: Point3, dst: Point3, cell_area: f64, wavelength: f64, normal: Point3) -> Result<Complex64> {
    let d = dst - src;
    let r = d.norm();
    if !(r > 0.0) {
        return Err(Error::Coincident(r));
    }
    let cos_chi = d.dot(normal).abs() / (r * normal.norm());
    let amp = cell_area * cos_chi / r;
    let k = 2.0 * PI / wavelength;
    let bracket = Complex64::new(1.0 / (2.0 * PI * r), -1.0 / wavelength);
    Ok(bracket * amp * Complex64::from_polar(1.0, k * r))
}

/// Coupling matrix between two point sets; entry `(m, n)` maps source `n` to
/// destination `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionMatrix {
    pub entries: Array2<Complex64>,
}

impl DiffractionMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    /// Conjugate transpose, used to pull adjoints back through the hop.
    pub fn adjoint(&self) -> Array2<Complex64> {
        self.entries.t().mapv(|z| z.conj())
    }
}

pub fn diffraction_matrix(
    src_points: &[Point3],
    dst_points: &[Point3],
    cell_area: f64,
    wavelength: f64,
    normal: Point3,
) -> Result<DiffractionMatrix> {
    if src_points.is_empty() || dst_points.is_empty() {
        return Err(Error::InvalidConfig("diffraction between empty point sets".into()));
    }
    let mut entries = Array2::zeros((dst_points.len(), src_points.len()));
    for (m, &dst) in dst_points.iter().enumerate() {
        for (n, &src) in src_points.iter().enumerate() {
            entries[[m, n]] = rs_coefficient(src, dst, cell_area, wavelength, normal)?;
        }
    }
    Ok(DiffractionMatrix { entries })
}

/// Every deterministic free-space hop of the link, in propagation order.
#[derive(Clone, Debug)]
pub struct LinkHops {
    /// `tx[0]` maps Tx antennas to Tx layer 1; `tx[l]` maps layer `l` to `l + 1`.
    pub tx: Vec<DiffractionMatrix>,
    /// `rx[l]` for `l < L - 1` maps Rx layer `l + 1` to `l + 2`; `rx[L - 1]` maps
    /// the last Rx layer to the Rx antennas.
    pub rx: Vec<DiffractionMatrix>,
}

impl LinkHops {
    pub fn from_geometry(geom: &SystemGeometry) -> Result<Self> {
        let (a, lam, nrm) = (geom.cell_area, geom.wavelength, geom.layer_normal);
        let mut tx = vec![diffraction_matrix(&geom.tx_antenna_positions, &geom.tx_sis_layer_positions[0], a, lam, nrm)?];
        for pair in geom.tx_sis_layer_positions.windows(2) {
            tx.push(diffraction_matrix(&pair[0], &pair[1], a, lam, nrm)?);
        }
        let mut rx = Vec::new();
        for pair in geom.rx_sis_layer_positions.windows(2) {
            rx.push(diffraction_matrix(&pair[0], &pair[1], a, lam, nrm)?);
        }
        let last = geom.rx_sis_layer_positions.last().expect("at least one layer");
        rx.push(diffraction_matrix(last, &geom.rx_antenna_positions, a, lam, nrm)?);
        Ok(Self { tx, rx })
    }
}

/// One draw of the inter-stack channel.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    pub h: Array2<Complex64>,
    pub h_los: Array2<Complex64>,
    /// The standard complex Gaussian scattered component that produced `h`.
    pub h_scattered: Array2<Complex64>,
    pub kappa: f64,
    pub beta: f64,
}

/// `(sqrt(kappa/(kappa+1)), sqrt(1/(kappa+1)))`; `kappa = inf` is pure LOS.
pub fn rician_weights(kappa: f64) -> (f64, f64) {
    if kappa.is_infinite() {
        (1.0, 0.0)
    } else {
        ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt())
    }
}

pub fn free_space_path_gain(wavelength: f64, distance: f64) -> f64 {
    (wavelength / (4.0 * PI * distance)).powi(2)
}

pub fn standard_complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Fixed statistics of the Rician channel between the last Tx layer and the
/// first Rx layer: the deterministic LOS matrix, the mixing weights and the
/// path gain.
#[derive(Clone, Debug)]
pub struct RicianModel {
    pub h_los: Array2<Complex64>,
    pub kappa: f64,
    pub beta: f64,
}

impl RicianModel {
    pub fn new(geom: &SystemGeometry, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::InvalidConfig(format!("channel.kappa must be >= 0, got {kappa}")));
        }
        let src = geom.tx_sis_layer_positions.last().expect("at least one layer");
        let dst = &geom.rx_sis_layer_positions[0];
        let k = 2.0 * PI / geom.wavelength;
        let h_los = Array2::from_shape_fn((dst.len(), src.len()), |(m, n)| {
            Complex64::from_polar(1.0, -k * src[n].distance(dst[m]))
        });
        Ok(Self {
            h_los,
            kappa,
            beta: free_space_path_gain(geom.wavelength, geom.link_distance),
        })
    }

    pub fn weights(&self) -> (f64, f64) {
        rician_weights(self.kappa)
    }

    /// Deterministic part `sqrt(beta) sqrt(kappa/(kappa+1)) H_los`.
    pub fn scaled_los(&self) -> Array2<Complex64> {
        let (los, _) = self.weights();
        self.h_los.mapv(|z| z * (self.beta.sqrt() * los))
    }

    pub fn assemble(&self, h_scattered: &Array2<Complex64>) -> Array2<Complex64> {
        let (los, nlos) = self.weights();
        let s = self.beta.sqrt();
        let mut h = Array2::zeros(self.h_los.raw_dim());
        ndarray::Zip::from(&mut h)
            .and(&self.h_los)
            .and(h_scattered)
            .for_each(|h, &l, &w| *h = (l * los + w * nlos) * s);
        h
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let h_scattered = Array2::from_shape_simple_fn(self.h_los.raw_dim(), || standard_complex_normal(rng));
        ChannelRealization {
            h: self.assemble(&h_scattered),
            h_los: self.h_los.clone(),
            h_scattered,
            kappa: self.kappa,
            beta: self.beta,
        }
    }
}

pub fn sample_rician<R: Rng + ?Sized>(geom: &SystemGeometry, kappa: f64, rng: &mut R) -> Result<ChannelRealization> {
    Ok(RicianModel::new(geom, kappa)?.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub psd_dbm_per_hz: f64,
    pub bandwidth_hz: f64,
    pub override_noise_power_dbm: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            psd_dbm_per_hz: -120.0,
            bandwidth_hz: 1e7,
            override_noise_power_dbm: None,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "channel.noise.bandwidth_hz must be positive, got {}",
                self.bandwidth_hz
            )));
        }
        Ok(())
    }
}

/// Noise power in watts.
pub fn noise_power(cfg: &NoiseConfig) -> f64 {
    match cfg.override_noise_power_dbm {
        Some(dbm) => dbm_to_watts(dbm),
        None => dbm_to_watts(cfg.psd_dbm_per_hz + 10.0 * cfg.bandwidth_hz.log10()),
    }
}

/// `dim` circularly-symmetric complex Gaussians with `E|n_i|^2 = power`.
pub fn sample_noise<R: Rng + ?Sized>(dim: usize, power: f64, rng: &mut R) -> Array1<Complex64> {
    if power == 0.0 {
        return Array1::zeros(dim);
    }
    let s = power.sqrt();
    Array1::from_shape_simple_fn(dim, || standard_complex_normal(rng) * s)
}
