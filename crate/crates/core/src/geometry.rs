//! Deterministic 3-D layout of the link: antenna arrays, surface layer planes
//! and unit-cell lattices.
//!
//! The link axis is `+z`. The Tx antenna array sits in the `z = 0` plane and
//! the Rx array in the `z = link_distance` plane; the receive-side stack is the
//! mirror image of the transmit-side stack about the link midpoint.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (other - self).norm()
    }

    pub fn normalized(self) -> Point3 {
        self * (1.0 / self.norm())
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Row/column shape of the near-square lattice used for `n` points.
///
/// `rows = floor(sqrt(n))`, `cols = ceil(n / rows)`; points fill row-major so
/// only the last row may be partial.
pub fn lattice_shape(n: usize) -> (usize, usize) {
    assert!(n >= 1, "lattice needs at least one point");
    let mut rows = (n as f64).sqrt().floor() as usize;
    // guard against sqrt rounding on large perfect squares
    while (rows + 1) * (rows + 1) <= n {
        rows += 1;
    }
    while rows * rows > n {
        rows -= 1;
    }
    let cols = n.div_ceil(rows);
    (rows, cols)
}

/// In-plane orthonormal basis `(u, v)` for a plane with the given normal.
///
/// For `normal = +z` this is `(+x, +y)`.
fn plane_basis(normal: Point3) -> (Point3, Point3) {
    let n = normal.normalized();
    let helper = if n.x.abs() < 0.9 {
        Point3::new(1.0, 0.0, 0.0)
    } else {
        Point3::new(0.0, 1.0, 0.0)
    };
    let u = (helper - n * helper.dot(n)).normalized();
    let v = n.cross(u);
    (u, v)
}

/// Lay out `n` points on a square-pitch lattice centred on `center` in the
/// plane orthogonal to `normal`.
///
/// The centroid of the returned points equals `center`, including when the
/// last row is only partially filled.
pub fn grid_positions(n: usize, cell_size: f64, center: Point3, normal: Point3) -> Result<Vec<Point3>> {
    if n == 0 {
        return Err(Error::InvalidConfig("grid needs at least one point".into()));
    }
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::InvalidConfig(format!("cell size must be positive, got {cell_size}")));
    }
    let (u, v) = plane_basis(normal);
    let (_, cols) = lattice_shape(n);
    let raw: Vec<(f64, f64)> = (0..n)
        .map(|k| ((k % cols) as f64 * cell_size, (k / cols) as f64 * cell_size))
        .collect();
    let mean_u = raw.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mean_v = raw.iter().map(|p| p.1).sum::<f64>() / n as f64;
    Ok(raw
        .into_iter()
        .map(|(a, b)| center + u * (a - mean_u) + v * (b - mean_v))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Carrier frequency in Hz.
    pub carrier_frequency: f64,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    /// Antenna pitch, in wavelengths.
    pub antenna_spacing: f64,
    /// Distance from an antenna array to the nearest layer of its stack, in wavelengths.
    pub sis_standoff: f64,
    /// Axial extent of one stack from first to last layer, in wavelengths.
    pub sis_thickness: f64,
    /// Overrides the derived inter-layer spacing (in wavelengths).
    pub layer_spacing: Option<f64>,
    pub layers_per_sis: usize,
    pub cells_per_layer: usize,
    /// Unit-cell edge length, in wavelengths.
    pub cell_size: f64,
    /// Tx array to Rx array distance in meters.
    pub link_distance: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            carrier_frequency: 2.8e10,
            tx_antennas: 4,
            rx_antennas: 4,
            antenna_spacing: 1.0,
            sis_standoff: 4.0,
            sis_thickness: 2.5,
            layer_spacing: None,
            layers_per_sis: 4,
            cells_per_layer: 400,
            cell_size: 0.5,
            link_distance: 50.0,
        }
    }
}

impl GeometryConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Axial gap between adjacent layers of one stack, in meters.
    pub fn layer_gap(&self) -> f64 {
        let lambda = self.wavelength();
        match self.layer_spacing {
            Some(s) => s * lambda,
            None if self.layers_per_sis > 1 => {
                self.sis_thickness * lambda / (self.layers_per_sis - 1) as f64
            }
            None => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("geometry.carrier_frequency", self.carrier_frequency),
            ("geometry.antenna_spacing", self.antenna_spacing),
            ("geometry.sis_standoff", self.sis_standoff),
            ("geometry.sis_thickness", self.sis_thickness),
            ("geometry.cell_size", self.cell_size),
            ("geometry.link_distance", self.link_distance),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{key} must be positive and finite, got {v}")));
            }
        }
        if let Some(s) = self.layer_spacing {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "geometry.layer_spacing must be positive, got {s}"
                )));
            }
        }
        for (key, v) in [
            ("geometry.tx_antennas", self.tx_antennas),
            ("geometry.rx_antennas", self.rx_antennas),
            ("geometry.layers_per_sis", self.layers_per_sis),
            ("geometry.cells_per_layer", self.cells_per_layer),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{key} must be at least 1")));
            }
        }
        for (key, v) in [
            ("geometry.tx_antennas", self.tx_antennas),
            ("geometry.rx_antennas", self.rx_antennas),
        ] {
            if perfect_square_side(v).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "{key} = {v} is not a perfect square; antenna arrays are square lattices"
                )));
            }
        }
        let extent = self.layer_gap() * (self.layers_per_sis - 1) as f64
            + self.sis_standoff * self.wavelength();
        if 2.0 * extent >= self.link_distance {
            return Err(Error::InvalidConfig(
                "geometry.link_distance too short: the two stacks overlap".into(),
            ));
        }
        Ok(())
    }
}

fn perfect_square_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

/// Resolved positions of every radiating point in the link.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemGeometry {
    pub tx_antenna_positions: Vec<Point3>,
    /// Transmit stack layers, ordered from the antennas outwards.
    pub tx_sis_layer_positions: Vec<Vec<Point3>>,
    /// Receive stack layers, ordered in propagation order (channel side first).
    pub rx_sis_layer_positions: Vec<Vec<Point3>>,
    pub rx_antenna_positions: Vec<Point3>,
    pub layer_normal: Point3,
    /// Unit-cell area in m².
    pub cell_area: f64,
    pub wavelength: f64,
    pub link_distance: f64,
}

impl SystemGeometry {
    pub fn cells_per_layer(&self) -> usize {
        self.tx_sis_layer_positions[0].len()
    }

    pub fn layers(&self) -> usize {
        self.tx_sis_layer_positions.len()
    }

    pub fn tx_antennas(&self) -> usize {
        self.tx_antenna_positions.len()
    }

    pub fn rx_antennas(&self) -> usize {
        self.rx_antenna_positions.len()
    }

    /// Copy with every point shifted by `offset`.
    pub fn translated(&self, offset: Point3) -> SystemGeometry {
        let shift = |pts: &Vec<Point3>| pts.iter().map(|&p| p + offset).collect::<Vec<_>>();
        SystemGeometry {
            tx_antenna_positions: shift(&self.tx_antenna_positions),
            tx_sis_layer_positions: self.tx_sis_layer_positions.iter().map(shift).collect(),
            rx_sis_layer_positions: self.rx_sis_layer_positions.iter().map(shift).collect(),
            rx_antenna_positions: shift(&self.rx_antenna_positions),
            ..self.clone()
        }
    }
}

pub fn build_geometry(cfg: &GeometryConfig) -> Result<SystemGeometry> {
    cfg.validate()?;
    let lambda = cfg.wavelength();
    let normal = Point3::new(0.0, 0.0, 1.0);
    let d = cfg.link_distance;
    let cell = cfg.cell_size * lambda;
    let gap = cfg.layer_gap();
    let standoff = cfg.sis_standoff * lambda;
    let pitch = cfg.antenna_spacing * lambda;

    let tx_antenna_positions = grid_positions(cfg.tx_antennas, pitch, Point3::ORIGIN, normal)?;
    let rx_antenna_positions = grid_positions(cfg.rx_antennas, pitch, Point3::new(0.0, 0.0, d), normal)?;

    let layer = |z: f64| grid_positions(cfg.cells_per_layer, cell, Point3::new(0.0, 0.0, z), normal);
    let l = cfg.layers_per_sis;
    let tx_sis_layer_positions = (0..l)
        .map(|k| layer(standoff + k as f64 * gap))
        .collect::<Result<Vec<_>>>()?;
    // mirror image: processing order runs from the channel towards the Rx array
    let rx_sis_layer_positions = (0..l)
        .rev()
        .map(|k| layer(d - (standoff + k as f64 * gap)))
        .collect::<Result<Vec<_>>>()?;

    Ok(SystemGeometry {
        tx_antenna_positions,
        tx_sis_layer_positions,
        rx_sis_layer_positions,
        rx_antenna_positions,
        layer_normal: normal,
        cell_area: cell * cell,
        wavelength: lambda,
        link_distance: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const Z: Point3 = Point3::new(0.0, 0.0, 1.0);

    fn centroid(pts: &[Point3]) -> Point3 {
        pts.iter().fold(Point3::ORIGIN, |a, &p| a + p) * (1.0 / pts.len() as f64)
    }

    #[test]
    fn two_by_two_lattice_is_symmetric() {
        let pts = grid_positions(4, 1.0, Point3::ORIGIN, Z).unwrap();
        let mut got: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.x, p.y, p.z)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            got,
            vec![(-0.5, -0.5, 0.0), (-0.5, 0.5, 0.0), (0.5, -0.5, 0.0), (0.5, 0.5, 0.0)]
        );
    }

    #[test]
    fn single_point_sits_at_center() {
        let c = Point3::new(1.0, -2.0, 3.0);
        assert_eq!(grid_positions(1, 0.3, c, Z).unwrap(), vec![c]);
    }

    #[test]
    fn partial_last_row_layout() {
        let (rows, cols) = lattice_shape(116);
        assert_eq!((rows, cols), (10, 12));
        let c = Point3::new(0.2, 0.1, 7.0);
        let pts = grid_positions(116, 0.005, c, Z).unwrap();
        assert_eq!(pts.len(), 116);
        // row-major fill: nine full rows of 12, last row holds 116 - 108 = 8
        let last_row_y = pts[115].y;
        let in_last_row = pts.iter().filter(|p| (p.y - last_row_y).abs() < 1e-12).count();
        assert_eq!(in_last_row, 8);
        let m = centroid(&pts);
        assert!((m - c).norm() < 1e-12);
    }

    #[test]
    fn lattice_shape_handles_squares() {
        assert_eq!(lattice_shape(1), (1, 1));
        assert_eq!(lattice_shape(400), (20, 20));
        assert_eq!(lattice_shape(484), (22, 22));
        assert_eq!(lattice_shape(100), (10, 10));
        assert_eq!(lattice_shape(3), (1, 3));
    }

    #[test]
    fn tilted_plane_points_are_orthogonal_to_normal() {
        let n = Point3::new(1.0, 2.0, -0.5).normalized();
        let c = Point3::new(0.3, 0.0, 1.0);
        let pts = grid_positions(30, 0.1, c, n).unwrap();
        for p in &pts {
            assert!((*p - c).dot(n).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_grid_inputs() {
        assert!(grid_positions(0, 1.0, Point3::ORIGIN, Z).is_err());
        assert!(grid_positions(4, 0.0, Point3::ORIGIN, Z).is_err());
    }

    #[test]
    fn default_layout_matches_link_description() {
        let cfg = GeometryConfig::default();
        let g = build_geometry(&cfg).unwrap();
        let lambda = cfg.wavelength();
        assert!((lambda - 0.010_706_873).abs() < 1e-8);
        let first_tx = g.tx_sis_layer_positions[0][0].z;
        assert!((first_tx - 4.0 * lambda).abs() < 1e-15);
        assert!((first_tx - 0.0428).abs() < 1e-4);
        let gap = g.tx_sis_layer_positions[1][0].z - first_tx;
        assert!((gap / lambda - 2.5 / 3.0).abs() < 1e-12);
        assert!((g.cell_area - (0.5 * lambda).powi(2)).abs() < 1e-18);
        assert_eq!(g.tx_antennas(), 4);
        assert_eq!(g.layers(), 4);
        assert_eq!(g.cells_per_layer(), 400);
    }

    #[test]
    fn receive_stack_mirrors_transmit_stack() {
        let cfg = GeometryConfig::default();
        let g = build_geometry(&cfg).unwrap();
        let l = g.layers();
        // Rx first layer (channel side) mirrors the Tx last layer
        let tx_last_to_array = g.tx_sis_layer_positions[l - 1][0].z;
        let rx_first_to_array = cfg.link_distance - g.rx_sis_layer_positions[0][0].z;
        assert!((tx_last_to_array - rx_first_to_array).abs() < 1e-12);
        let tx_first = g.tx_sis_layer_positions[0][0].z;
        let rx_last = cfg.link_distance - g.rx_sis_layer_positions[l - 1][0].z;
        assert!((tx_first - rx_last).abs() < 1e-12);
    }

    #[test]
    fn stack_extent_equals_thickness() {
        for layers in [2, 3, 4, 7] {
            let cfg = GeometryConfig { layers_per_sis: layers, cells_per_layer: 9, ..Default::default() };
            let g = build_geometry(&cfg).unwrap();
            let lambda = cfg.wavelength();
            for stack in [&g.tx_sis_layer_positions, &g.rx_sis_layer_positions] {
                let extent = (stack[layers - 1][0].z - stack[0][0].z).abs();
                assert!((extent - 2.5 * lambda).abs() < 1e-12);
                for plane in stack.iter() {
                    assert!(plane.iter().all(|p| p.z == plane[0].z));
                }
            }
        }
    }

    #[test]
    fn layer_spacing_override() {
        let cfg = GeometryConfig { layer_spacing: Some(0.625), ..Default::default() };
        let g = build_geometry(&cfg).unwrap();
        let gap = g.tx_sis_layer_positions[1][0].z - g.tx_sis_layer_positions[0][0].z;
        assert!((gap - 0.625 * cfg.wavelength()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_square_antenna_counts() {
        for bad in [2, 3, 5, 8] {
            let cfg = GeometryConfig { tx_antennas: bad, ..Default::default() };
            assert!(build_geometry(&cfg).is_err(), "tx={bad}");
            let cfg = GeometryConfig { rx_antennas: bad, ..Default::default() };
            assert!(build_geometry(&cfg).is_err(), "rx={bad}");
        }
        let cfg = GeometryConfig { tx_antennas: 9, rx_antennas: 1, cells_per_layer: 16, ..Default::default() };
        assert!(build_geometry(&cfg).is_ok());
    }

    #[test]
    fn rejects_nonpositive_lengths() {
        let cfg = GeometryConfig { cell_size: -0.5, ..Default::default() };
        assert!(build_geometry(&cfg).is_err());
        let cfg = GeometryConfig { layers_per_sis: 0, ..Default::default() };
        assert!(build_geometry(&cfg).is_err());
    }
}
