//! Sample statistics of the random parts of the link.

use ndarray::Array2;
use num_complex::Complex64;
use sislink_core::gradients::forward_batch;
use sislink_core::propagation::{sample_noise, sample_rician};
use sislink_core::rng::{Purpose, StreamId};
use sislink_core::training::{draw_transmissions, SymbolBatch};
use sislink_core::*;

fn small_geometry(cells: usize, layers: usize) -> GeometryConfig {
    GeometryConfig { cells_per_layer: cells, layers_per_sis: layers, ..GeometryConfig::default() }
}

#[test]
fn rician_entries_have_expected_mean_and_variance() {
    let geom = build_geometry(&small_geometry(4, 1)).unwrap();
    let kappa = 3.0;
    let mut rng = StreamId::new(11, Purpose::Sweep, 0, 0).rng();
    let draws = 20_000;
    let first = sample_rician(&geom, kappa, &mut rng).unwrap();
    let mut mean = Array2::<Complex64>::zeros(first.h.raw_dim());
    let mut power = Array2::<f64>::zeros(first.h.raw_dim());
    for _ in 0..draws {
        let ch = sample_rician(&geom, kappa, &mut rng).unwrap();
        mean += &ch.h;
        power += &ch.h.mapv(|z| z.norm_sqr());
    }
    let beta = first.beta;
    let los = (kappa / (kappa + 1.0)).sqrt() * beta.sqrt();
    for ((m, p), l) in mean.iter().zip(power.iter()).zip(first.h_los.iter()) {
        let m = m / draws as f64;
        let p = p / draws as f64;
        // total power is beta; the mean is the scaled LOS term
        assert!((p / beta - 1.0).abs() < 0.03, "E|h|^2 = {p}, beta = {beta}");
        assert!((m - l * los).norm() < 0.03 * beta.sqrt(), "mean {m} vs {}", l * los);
    }
}

#[test]
fn rician_draws_are_reproducible() {
    let geom = build_geometry(&small_geometry(9, 1)).unwrap();
    let id = StreamId::new(5, Purpose::TrainBatch, 2, 3);
    let a = sample_rician(&geom, 10.0, &mut id.rng()).unwrap();
    let b = sample_rician(&geom, 10.0, &mut id.rng()).unwrap();
    assert_eq!(a.h, b.h);
    let c = sample_rician(&geom, 10.0, &mut id.with_b(4).rng()).unwrap();
    assert_ne!(a.h, c.h);
}

#[test]
fn noise_has_configured_power_split_evenly() {
    let power = 1e-8;
    let n = sample_noise(100_000, power, &mut StreamId::new(1, Purpose::TrainBatch, 0, 0).rng());
    let total: f64 = n.iter().map(|z| z.norm_sqr()).sum::<f64>() / n.len() as f64;
    let re: f64 = n.iter().map(|z| z.re * z.re).sum::<f64>() / n.len() as f64;
    let mean: Complex64 = n.iter().sum::<Complex64>() / n.len() as f64;
    assert!((total / power - 1.0).abs() < 0.02, "{total}");
    assert!((re / (power / 2.0) - 1.0).abs() < 0.02, "{re}");
    assert!(mean.norm() < 0.02 * power.sqrt());
}

#[test]
fn symbols_are_uniform_and_carry_transmit_power() {
    let p_total = 10f64.powf((1.0 - 30.0) / 10.0);
    let batch = draw_transmissions(4, 4, p_total / 4.0, 0.0, 250_000, StreamId::new(2, Purpose::TrainBatch, 0, 0), 0);
    let mut counts = [0usize; 4];
    for &l in batch.labels.iter() {
        counts[l as usize] += 1;
    }
    let n = batch.labels.len() as f64;
    for c in counts {
        assert!((c as f64 / n - 0.25).abs() < 0.01 * 0.25, "{counts:?}");
    }
    let energy: f64 = batch.x.iter().map(|z| z.norm_sqr()).sum::<f64>() / batch.len() as f64;
    assert!((energy / 1.259e-3 - 1.0).abs() < 0.01, "E|x|^2 = {energy}");
}

#[test]
fn batches_are_stream_addressed() {
    let id = StreamId::new(9, Purpose::TrainBatch, 1, 0);
    let a = draw_transmissions(4, 4, 1.0, 1.0, 8, id, 0);
    let b = draw_transmissions(4, 4, 1.0, 1.0, 8, id, 0);
    assert_eq!(a.x, b.x);
    assert_eq!(a.noise, b.noise);
    // element 5 of a batch equals element 0 of a batch started at 5
    let c = draw_transmissions(4, 4, 1.0, 1.0, 3, id, 5);
    assert_eq!(a.x.column(5), c.x.column(0));
    let d = draw_transmissions(4, 4, 1.0, 1.0, 8, StreamId::new(9, Purpose::TrainBatch, 2, 0), 0);
    assert_ne!(a.noise, d.noise);
}

/// Received-power statistics agree between the two ways of drawing the
/// scattered channel.
#[test]
fn reparameterised_channel_matches_materialised() {
    let samples = 3000;
    let labels = Array2::from_shape_fn((4, samples), |(k, _)| k as u8);
    let noise = Array2::zeros((4, samples));
    let mut stats = Vec::new();
    for mode in [ChannelMode::Materialized, ChannelMode::Reparameterized] {
        let mut cfg = ExperimentConfig::with_seed(4);
        cfg.geometry = small_geometry(16, 1);
        cfg.channel.kappa = 1.0;
        cfg.channel.mode = mode;
        let scn = Scenario::new(cfg).unwrap();
        let mut params = SisParams::zeros(ActivationKind::Linear, 16, 1, 0.0);
        params.tx.theta.iter_mut().enumerate().for_each(|(i, t)| *t = 0.7 * i as f64);
        let batch = SymbolBatch::from_labels(labels.clone(), scn.symbol_power, noise.clone(), scn.stream(Purpose::Sweep, 0));
        let y = forward_batch(&scn.model, &params, &batch, Smoothing::Hard, false).unwrap().y;
        let mean: Vec<Complex64> = y.rows().into_iter().map(|r| r.sum() / samples as f64).collect();
        let var: Vec<f64> = y
            .rows()
            .into_iter()
            .zip(&mean)
            .map(|(r, m)| r.iter().map(|z| (z - m).norm_sqr()).sum::<f64>() / samples as f64)
            .collect();
        stats.push((mean, var));
    }
    let (m0, v0) = &stats[0];
    let (m1, v1) = &stats[1];
    for k in 0..4 {
        // relative standard error of a variance estimate is about sqrt(1/samples)
        assert!((v0[k] / v1[k] - 1.0).abs() < 0.12, "antenna {k}: {} vs {}", v0[k], v1[k]);
        let tol = 4.0 * (v0[k] / samples as f64).sqrt();
        assert!((m0[k] - m1[k]).norm() < tol, "antenna {k}: mean {} vs {}", m0[k], m1[k]);
    }
}
