//! Recovery-threshold machinery: the stability operator against stub
//! tensors with known spectra, an exhaustive grid search over the
//! positive-semidefinite cone as an independent oracle for the power
//! iteration, block-diagonality of the derivative tensor, the reference
//! thresholds of the depth-2 softmax model, and the escape of the overlap
//! iteration from zero on either side of the weak-recovery threshold.

use std::f64::consts::{PI, SQRT_2};

use seqamp_core::channel::{g_tensor_at, ChannelParams, GTensor};
use seqamp_core::se::{se_iterate_with_pool, SeConfig, SePool};
use seqamp_core::thresholds::{alpha1, phase_diagram, stability_operator_at, StabilityOperator};
use seqamp_core::{Activation, Error, ModelConfig, RngStream, SymMatrix};

fn softmax2() -> ModelConfig {
    ModelConfig::rank_one(2, 2, 1.0, Activation::Softmax)
}

/// A single-sample tensor whose only nonzero token slice is the identity,
/// so the operator it generates is the identity map.
fn identity_tensor(p: usize, m: usize) -> GTensor {
    let mut t = GTensor::zeros(p, m);
    for l in 0..p {
        t.set(l, l, 0, 0, 1.0);
    }
    t
}

/// Coordinates of a symmetric 2x2 matrix in the orthonormal basis
/// `(E11, (E12 + E21)/sqrt 2, E22)` of the trace inner product.
fn coords(x: &SymMatrix) -> [f64; 3] {
    [x.get(0, 0), SQRT_2 * x.get(0, 1), x.get(1, 1)]
}

fn from_coords(v: [f64; 3]) -> SymMatrix {
    SymMatrix::from_fn(2, |i, j| if i == j { v[2 * i] } else { v[1] / SQRT_2 })
}

#[test]
fn identity_stub_has_unit_radius_and_isotropic_eigenmatrix() {
    let op = StabilityOperator::new(vec![identity_tensor(2, 2)], SymMatrix::zeros(2)).unwrap();
    let (rho, x) = op.spectral_radius_psd(50, 1e-12).unwrap();
    assert!((rho - 1.0).abs() < 1e-14, "rho = {rho}");
    let iso = 1.0 / SQRT_2;
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { iso } else { 0.0 };
            assert!((x.get(i, j) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn diagonal_stub_recovers_the_larger_rate_and_its_layer() {
    // One sample with a single active token pair and a diagonal slice
    // diag(sqrt r1, sqrt r2): diagonal overlaps are scaled entrywise by
    // (r1, r2), so the cone spectral radius is max(r1, r2).
    let (r1, r2) = (0.3_f64, 0.7_f64);
    let mut t = GTensor::zeros(2, 2);
    t.set(0, 0, 0, 0, r1.sqrt());
    t.set(1, 1, 0, 0, r2.sqrt());
    let op = StabilityOperator::new(vec![t], SymMatrix::zeros(2)).unwrap();

    let rates = op.diagonal_rates();
    assert!((rates[0] - r1).abs() < 1e-14 && (rates[1] - r2).abs() < 1e-14, "{rates:?}");

    let (rho, x) = op.spectral_radius_psd(500, 1e-12).unwrap();
    assert!((rho - r2).abs() < 1e-9, "rho = {rho}");
    assert!(x.get(1, 1) > 1.0 - 1e-4 && x.get(0, 0).abs() < 1e-4, "eigenmatrix {x:?}");
}

#[test]
fn zero_stub_reports_a_vanishing_radius() {
    let op = StabilityOperator::new(vec![GTensor::zeros(2, 2)], SymMatrix::zeros(2)).unwrap();
    let (rho, x) = op.spectral_radius_psd(10, 1e-12).unwrap();
    assert_eq!(rho, 0.0);
    assert!((x.get(0, 0) - 1.0 / SQRT_2).abs() < 1e-15);
}

#[test]
fn operator_rejects_malformed_inputs() {
    let q0 = SymMatrix::zeros(2);
    assert!(matches!(StabilityOperator::new(vec![], q0.clone()), Err(Error::InvalidArgument(_))));
    let mixed = vec![identity_tensor(2, 2), identity_tensor(3, 2)];
    assert!(matches!(StabilityOperator::new(mixed, q0.clone()), Err(Error::InvalidArgument(_))));
    assert!(matches!(
        StabilityOperator::new(vec![identity_tensor(2, 2)], SymMatrix::zeros(3)),
        Err(Error::InvalidArgument(_))
    ));
    let op = StabilityOperator::new(vec![identity_tensor(2, 2)], q0).unwrap();
    assert!(matches!(op.spectral_radius_psd(0, 1e-12), Err(Error::InvalidArgument(_))));
}

#[test]
fn operator_is_linear_and_preserves_positivity_on_frozen_samples() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let op =
        stability_operator_at(&cfg, &SymMatrix::zeros(2), &ch, 200, RngStream::new(50)).unwrap();

    let mut rng = RngStream::new(51).rng();
    let a = seqamp_core::smallmat::gaussian_matrix(&mut rng, 2, 2);
    let b = seqamp_core::smallmat::gaussian_matrix(&mut rng, 2, 2);
    let x = SymMatrix::from_fn(2, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let y = SymMatrix::from_fn(2, |i, j| 0.5 * (b[(i, j)] + b[(j, i)]));
    let combo = SymMatrix::from_fn(2, |i, j| 2.0 * x.get(i, j) - 3.0 * y.get(i, j));

    let lhs = op.apply(&combo);
    let fx = op.apply(&x);
    let fy = op.apply(&y);
    let scale = lhs.m().abs().max().max(1.0);
    for i in 0..2 {
        for j in 0..2 {
            let rhs = 2.0 * fx.get(i, j) - 3.0 * fy.get(i, j);
            assert!((lhs.get(i, j) - rhs).abs() < 1e-12 * scale);
        }
    }

    // Each sample contributes Gram sandwiches, so positive inputs map to
    // positive outputs exactly, not just in expectation.
    let psd = SymMatrix::from_fn(2, |i, j| {
        (0..2).map(|k| a[(i, k)] * a[(j, k)]).sum::<f64>()
    });
    let fp = op.apply(&psd);
    let eig = fp.m().clone().symmetric_eigen();
    let scale = fp.m().abs().max().max(1e-12);
    assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-12 * scale), "{:?}", eig.eigenvalues);
}

#[test]
fn derivative_tensor_is_layerwise_block_diagonal_at_zero_overlap() {
    // The attention link is even in each projected index separately (each
    // layer's weights enter only through their own Gram matrix), so the
    // posterior cross-layer correlations vanish for every label draw, not
    // just on average. The derivative tensor inherits this pointwise.
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let tensors =
        g_tensor_at(&cfg, &SymMatrix::zeros(2), &ch, 300, RngStream::new(52)).unwrap();
    let mut worst = 0.0_f64;
    let mut scale = 0.0_f64;
    for t in &tensors {
        for a in 0..t.m() {
            for b in 0..t.m() {
                worst = worst.max(t.get(0, 1, a, b).abs()).max(t.get(1, 0, a, b).abs());
                scale = scale.max(t.get(0, 0, a, b).abs()).max(t.get(1, 1, a, b).abs());
            }
        }
    }
    assert!(worst <= 1e-5 * scale, "off-diagonal {worst:.3e} vs diagonal scale {scale:.3e}");

    // Consequently the operator maps diagonal overlaps to diagonal ones.
    let op = StabilityOperator::new(tensors, SymMatrix::zeros(2)).unwrap();
    for x in [SymMatrix::from_diagonal(&[1.0, 0.0]), SymMatrix::from_diagonal(&[0.3, 0.7])] {
        let fx = op.apply(&x);
        let diag = fx.get(0, 0).abs().max(fx.get(1, 1).abs());
        assert!(fx.get(0, 1).abs() <= 1e-5 * diag, "{fx:?}");
    }
}

#[test]
fn power_iteration_matches_an_exhaustive_cone_search() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let op =
        stability_operator_at(&cfg, &SymMatrix::zeros(2), &ch, 1200, RngStream::new(42)).unwrap();
    let (rho, _) = op.spectral_radius_psd(500, 1e-12).unwrap();

    // The operator is linear, so three applications determine its matrix in
    // the orthonormal symmetric basis; the oracle then scans the whole unit
    // Frobenius sphere and keeps the positive-semidefinite points.
    let cols: Vec<[f64; 3]> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        .into_iter()
        .map(|e| coords(&op.apply(&from_coords(e))))
        .collect();

    let mut best = 0.0_f64;
    for i in 0..=400 {
        let phi = PI * i as f64 / 400.0;
        for j in 0..800 {
            let psi = 2.0 * PI * j as f64 / 800.0;
            let v = [phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos()];
            let (x11, x12, x22) = (v[0], v[1] / SQRT_2, v[2]);
            if x11 < 0.0 || x22 < 0.0 || x11 * x22 < x12 * x12 {
                continue;
            }
            let mut norm2 = 0.0;
            for k in 0..3 {
                let fk = cols[0][k] * v[0] + cols[1][k] * v[1] + cols[2][k] * v[2];
                norm2 += fk * fk;
            }
            best = best.max(norm2.sqrt());
        }
    }
    assert!(
        (best - rho).abs() <= 0.01 * rho,
        "cone search {best:.6} vs power iteration {rho:.6}"
    );
}

#[test]
fn reference_model_thresholds_match_the_known_values() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let points = phase_diagram(&cfg, &[1.0], &ch, 2000, RngStream::new(70)).unwrap();
    assert_eq!(points.len(), 1);
    let a1 = points[0].alpha1.as_ref().unwrap();
    let a2 = points[0].alpha2.as_ref().unwrap();

    assert_eq!(a1.maximizing_layer, 2, "rates {:?}", a1.rates);
    assert!(a1.alpha < a2.alpha);

    // The block-diagonal structure makes the cone spectral radius coincide
    // with the larger per-layer diagonal rate.
    let max_rate = a1.rates.iter().cloned().fold(f64::MIN, f64::max);
    assert!((1.0 / max_rate - a1.alpha).abs() <= 1e-3 * a1.alpha);

    let ok1 = (a1.alpha - 0.14).abs() <= 0.02;
    let ok2 = (a2.alpha - 0.79).abs() <= 0.05;
    assert!(
        ok1 && ok2,
        "published values missed: alpha1 = {:.4} +- {:.4} vs 0.14 +- 0.02 ({}), \
         alpha2 = {:.4} +- {:.4} vs 0.79 +- 0.05 ({})",
        a1.alpha,
        a1.stderr,
        if ok1 { "ok" } else { "out" },
        a2.alpha,
        a2.stderr,
        if ok2 { "ok" } else { "out" },
    );
}

#[test]
fn empty_skip_grid_is_rejected() {
    let cfg = softmax2();
    assert!(matches!(
        phase_diagram(&cfg, &[], &ChannelParams::default(), 10, RngStream::new(0)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn threshold_curves_are_continuous_in_the_skip_strength() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let grid: Vec<f64> = (0..9).map(|i| 0.5 + 1.5 * f64::from(i) / 8.0).collect();
    let points = phase_diagram(&cfg, &grid, &ch, 500, RngStream::new(71)).unwrap();

    let a1: Vec<f64> = points.iter().map(|p| p.alpha1.as_ref().unwrap().alpha).collect();
    let a2: Vec<f64> = points.iter().map(|p| p.alpha2.as_ref().unwrap().alpha).collect();
    assert!(a1.iter().chain(&a2).all(|a| a.is_finite()));
    for (lo, hi) in a1.iter().zip(&a2) {
        assert!(lo < hi, "threshold ordering flipped: {lo:.4} vs {hi:.4}");
    }
    for w in a1.windows(2) {
        assert!((w[1] - w[0]).abs() < 0.2, "alpha1 jump {:?}", w);
    }
    for w in a2.windows(2) {
        assert!((w[1] - w[0]).abs() < 0.2, "alpha2 jump {:?}", w);
    }
}

#[test]
fn alpha1_uncertainty_shrinks_as_root_sample_count() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let coarse = alpha1(&cfg, &ch, 400, RngStream::new(800 + seed)).unwrap();
        let fine = alpha1(&cfg, &ch, 800, RngStream::new(900 + seed)).unwrap();
        ratios.push(coarse.stderr / fine.stderr);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - SQRT_2).abs() < 0.15, "mean stderr ratio {mean:.3}");
}

#[test]
fn overlap_iteration_escapes_zero_only_above_the_weak_threshold() {
    let cfg = softmax2();
    let ch = ChannelParams::default();
    let est = alpha1(&cfg, &ch, 1200, RngStream::new(60)).unwrap();

    let pool = SePool::draw(2, 2, 480, RngStream::new(61));
    let se = SeConfig { n_mc: 480, lambda: 1e-3, t_max: 80, tol: 1e-6, ..SeConfig::default() };
    let trace_at = |alpha: f64| {
        let run = se_iterate_with_pool(&SymMatrix::zeros(2), &cfg, alpha, &ch, &se, &pool)
            .unwrap();
        run.q.get(0, 0) + run.q.get(1, 1)
    };
    let below = trace_at(0.75 * est.alpha);
    let above = trace_at(1.25 * est.alpha);
    assert!(below < 0.02, "trace below threshold: {below:.4}");
    assert!(above > 0.05, "trace above threshold: {above:.4}");
}
