//! Precomputed deterministic parts of a link: free-space hops, their
//! adjoints, and the Rician channel statistics.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{build_geometry, GeometryConfig, SystemGeometry};
use crate::propagation::{standard_complex_normal, ChannelRealization, LinkHops, RicianModel};

/// How the scattered part of the inter-stack channel is drawn inside the
/// batched trainer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Draw `H_w u` as `||u|| w` with `w ~ CN(0, I)`. Exactly the same
    /// distribution as the materialised product for every fixed `u`, at
    /// O(N) instead of O(N^2) cost per sample.
    #[default]
    Reparameterized,
    /// Draw the full `N x N` scattered matrix for every sample.
    Materialized,
}

#[derive(Clone, Debug)]
pub struct LinkModel {
    pub geometry: SystemGeometry,
    pub hops: LinkHops,
    pub tx_adjoint: Vec<Array2<Complex64>>,
    pub rx_adjoint: Vec<Array2<Complex64>>,
    pub rician: RicianModel,
    /// `sqrt(beta) sqrt(kappa/(kappa+1)) H_los`.
    pub los: Array2<Complex64>,
    pub los_adjoint: Array2<Complex64>,
    /// `sqrt(beta) sqrt(1/(kappa+1))`.
    pub scattered_scale: f64,
    pub channel_mode: ChannelMode,
}

impl LinkModel {
    pub fn new(geometry: SystemGeometry, kappa: f64, channel_mode: ChannelMode) -> Result<Self> {
        let hops = LinkHops::from_geometry(&geometry)?;
        let rician = RicianModel::new(&geometry, kappa)?;
        let los = rician.scaled_los();
        let (_, nlos) = rician.weights();
        Ok(Self {
            tx_adjoint: hops.tx.iter().map(|h| h.adjoint()).collect(),
            rx_adjoint: hops.rx.iter().map(|h| h.adjoint()).collect(),
            los_adjoint: los.t().mapv(|z| z.conj()),
            los,
            scattered_scale: rician.beta.sqrt() * nlos,
            hops,
            rician,
            geometry,
            channel_mode,
        })
    }

    pub fn from_config(cfg: &GeometryConfig, kappa: f64, channel_mode: ChannelMode) -> Result<Self> {
        Self::new(build_geometry(cfg)?, kappa, channel_mode)
    }

    pub fn cells(&self) -> usize {
        self.geometry.cells_per_layer()
    }

    pub fn layers(&self) -> usize {
        self.geometry.layers()
    }

    pub fn tx_antennas(&self) -> usize {
        self.geometry.tx_antennas()
    }

    pub fn rx_antennas(&self) -> usize {
        self.geometry.rx_antennas()
    }

    /// Scattered-component draw for one sample in reparameterised mode.
    pub fn draw_scattered_direction<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<Complex64> {
        Array1::from_shape_simple_fn(self.cells(), || standard_complex_normal(rng))
    }

    /// Full channel draw for one sample in materialised mode.
    pub fn draw_realization<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        self.rician.sample(rng)
    }
}
