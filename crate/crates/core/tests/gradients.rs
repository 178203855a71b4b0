//! Gradient engine against finite differences and structural identities.

use num_complex::Complex64;
use sislink_core::gradients::{backward, finite_difference_check, forward_batch, surrogate_step_backward};
use sislink_core::rng::Purpose;
use sislink_core::surface::Thresholds;
use sislink_core::training::{generate_batch, init_params, train};
use sislink_core::*;

fn check_config(kind: ActivationKind, mode: ChannelMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(1);
    cfg.geometry.cells_per_layer = 16;
    cfg.geometry.layers_per_sis = 2;
    cfg.surface.kind = kind;
    cfg.surface.smoothing = SmoothingMode::Smooth;
    cfg.channel.mode = mode;
    cfg.training.batch_size = 64;
    cfg
}

#[test]
fn linear_gradients_match_finite_differences() {
    for mode in [ChannelMode::Reparameterized, ChannelMode::Materialized] {
        let r = finite_difference_check(&check_config(ActivationKind::Linear, mode), 200, 1e-6).unwrap();
        assert_eq!(r.entries.len(), 64);
        assert!(r.max_rel_err < 1e-6, "{mode:?}: {}", r.max_rel_err);
    }
}

#[test]
fn smooth_nonlinear_gradients_match_finite_differences() {
    for kind in [ActivationKind::NonlinearPerUnit, ActivationKind::NonlinearPerLayer] {
        for mode in [ChannelMode::Reparameterized, ChannelMode::Materialized] {
            let r = finite_difference_check(&check_config(kind, mode), 200, 1e-6).unwrap();
            assert!(r.max_rel_err < 1e-4, "{kind} {mode:?}: {}", r.max_rel_err);
        }
    }
}

#[test]
fn gradient_check_preconditions() {
    let cfg = check_config(ActivationKind::NonlinearPerUnit, ChannelMode::Reparameterized);
    assert!(finite_difference_check(&cfg, 10, 0.0).is_err());
    let mut hard = cfg;
    hard.surface.smoothing = SmoothingMode::Hard;
    let err = finite_difference_check(&hard, 10, 1e-6).unwrap_err().to_string();
    assert!(err.contains("smooth"), "{err}");
}

#[test]
fn gradient_report_csv() {
    let r = finite_difference_check(&check_config(ActivationKind::Linear, ChannelMode::Reparameterized), 5, 1e-6).unwrap();
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("parameter_id,analytic,fd,rel_err"));
    assert_eq!(lines.count(), 5);
}

fn tape_setup(kind: ActivationKind) -> (Scenario, SisParams, SymbolBatch) {
    let mut cfg = check_config(kind, ChannelMode::Reparameterized);
    cfg.surface.smoothing = SmoothingMode::Hard;
    cfg.surface.rho_init = -0.5;
    let scn = Scenario::new(cfg).unwrap();
    let params = init_params(&scn).unwrap();
    let batch = generate_batch(&scn, 32, scn.stream(Purpose::GradCheck, 9), 0);
    (scn, params, batch)
}

#[test]
fn backward_is_linear_in_the_upstream_adjoint() {
    let (scn, params, batch) = tape_setup(ActivationKind::NonlinearPerUnit);
    let tape = forward_batch(&scn.model, &params, &batch, Smoothing::Hard, true).unwrap();
    let a1 = tape.y.mapv(|z| z.conj() * 1e5);
    let a2 = tape.y.mapv(|z| Complex64::new(z.im, 0.3 * z.re) * 1e5);
    let sum = &a1 + &a2.mapv(|z| z * 2.0);
    let g1 = backward(&scn.model, &params, &tape, &a1, 25.0).unwrap();
    let g2 = backward(&scn.model, &params, &tape, &a2, 25.0).unwrap();
    let gs = backward(&scn.model, &params, &tape, &sum, 25.0).unwrap();
    let scale = gs.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for ((a, b), s) in g1.iter().zip(&g2).zip(&gs) {
        assert!((a + 2.0 * b - s).abs() <= 1e-10 * scale);
    }
}

#[test]
fn per_layer_gradient_is_sum_of_tied_per_unit_gradients() {
    let (scn_u, mut unit, batch) = tape_setup(ActivationKind::NonlinearPerUnit);
    for (i, v) in unit.tx.theta.iter_mut().enumerate() {
        *v = 0.1 * i as f64;
    }
    let rho = [-0.7, 0.2];
    let mut layer = unit.clone();
    layer.kind = ActivationKind::NonlinearPerLayer;
    for s in [&mut unit.tx, &mut unit.rx] {
        s.rho = Thresholds::PerUnit(ndarray::Array2::from_shape_fn((2, 16), |(l, _)| rho[l]));
    }
    for s in [&mut layer.tx, &mut layer.rx] {
        s.rho = Thresholds::PerLayer(ndarray::Array1::from(rho.to_vec()));
    }
    let mut cfg = scn_u.config.clone();
    cfg.surface.kind = ActivationKind::NonlinearPerLayer;
    let scn_l = Scenario::new(cfg).unwrap();

    let tu = forward_batch(&scn_u.model, &unit, &batch, Smoothing::Hard, true).unwrap();
    let tl = forward_batch(&scn_l.model, &layer, &batch, Smoothing::Hard, true).unwrap();
    assert_eq!(tu.y, tl.y);
    let adj = tu.y.mapv(|z| z * 1e4);
    let gu = backward(&scn_u.model, &unit, &tu, &adj, 25.0).unwrap();
    let gl = backward(&scn_l.model, &layer, &tl, &adj, 25.0).unwrap();
    // layout: theta_tx (32), rho_tx, theta_rx (32), rho_rx
    let (nt, nu) = (32, 32);
    for side in 0..2 {
        let off_u = side * (nt + nu);
        let off_l = side * (nt + 2);
        for k in 0..nt {
            assert!((gu[off_u + k] - gl[off_l + k]).abs() <= 1e-12 * gu[off_u + k].abs().max(1e-300));
        }
        for l in 0..2 {
            let tied: f64 = gu[off_u + nt + 16 * l..off_u + nt + 16 * (l + 1)].iter().sum();
            let got = gl[off_l + nt + l];
            assert!((tied - got).abs() <= 1e-9 * tied.abs().max(got.abs()), "side {side} layer {l}: {tied} vs {got}");
        }
    }
}

#[test]
fn surrogate_raises_threshold_against_a_harmful_cell() {
    // upstream adjoint aligned with the output: the loss grows with this
    // cell's output, so the threshold gradient must be negative
    let s = Complex64::new(0.9, 0.2);
    let theta = 0.4;
    let out = s * Complex64::from_polar(1.0, theta);
    let a = surrogate_step_backward(s, theta, 0.0, 1.0, 25.0, out);
    assert!(a.tau < 0.0 && a.rho < 0.0, "{a:?}");
    let b = surrogate_step_backward(s, theta, 0.0, 1.0, 25.0, -out);
    assert!(b.tau > 0.0 && b.rho > 0.0, "{b:?}");
}

#[test]
fn training_is_identical_across_thread_counts() {
    let run = |threads: usize| {
        let mut cfg = ExperimentConfig::with_seed(21);
        cfg.geometry.cells_per_layer = 36;
        cfg.geometry.layers_per_sis = 2;
        cfg.training.batch_size = 200;
        cfg.training.iterations = 4;
        cfg.training.eval_samples = 256;
        cfg.training.threads = threads;
        train(&Scenario::new(cfg).unwrap()).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve.to_csv(), b.curve.to_csv());
}
