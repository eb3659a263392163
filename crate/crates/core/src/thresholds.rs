//! Weak-recovery thresholds from the stability of state-evolution fixed
//! points.
//!
//! Linearizing the state evolution around a fixed overlap `Q_fix` gives the
//! linear operator on symmetric matrices
//!
//! ```text
//! F(X) = E_Y[ sum_{a,b} M_ab X M_abT ],   M_ab[l, l'] = G[l, l', a, b],
//! ```
//!
//! where `G` is the derivative tensor of the channel denoiser at `Q_fix`.
//! The fixed point destabilizes, and recovery becomes possible, once
//! `alpha * rho(F) > 1` with `rho` the spectral radius over the PSD cone, so
//! the threshold is `alpha = 1 / rho(F)`.
//!
//! Two conditioning points matter for the depth-2 model: `Q_fix = 0` gives
//! the initial threshold (first direction to become learnable), and
//! `Q_fix = diag(0, 1)` (final layer known exactly) gives the threshold at
//! which the remaining first-layer direction destabilizes. At the latter
//! point only the first-layer diagonal entry of the operator is relevant,
//! a scalar contraction rather than an eigenproblem.
//!
//! The operator is completely positive by construction (a mean of Gram
//! sandwiches), so the spectral radius is attained on the PSD cone and plain
//! power iteration from the identity converges to it.

use rayon::prelude::*;

use crate::channel::{g_tensor_at, ChannelParams, GTensor};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::se::Overlap;
use crate::smallmat::{symmetrize, RngStream, SymMatrix};

/// The linearized state-evolution operator, frozen on a fixed set of
/// per-label derivative tensors so that it is exactly linear.
pub struct StabilityOperator {
    samples: Vec<GTensor>,
    p: usize,
    m: usize,
    q_fix: Overlap,
}

impl StabilityOperator {
    /// Wraps per-sample derivative tensors drawn at conditioning overlap
    /// `q_fix`.
    pub fn new(samples: Vec<GTensor>, q_fix: Overlap) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("stability operator needs samples".into()))?;
        let (p, m) = (first.p(), first.m());
        if samples.iter().any(|s| s.p() != p || s.m() != m) {
            return Err(Error::InvalidArgument("inconsistent tensor dimensions".into()));
        }
        if q_fix.dim() != p {
            return Err(Error::InvalidArgument(format!(
                "conditioning overlap has dimension {}, expected {}",
                q_fix.dim(),
                p
            )));
        }
        Ok(StabilityOperator { samples, p, m, q_fix })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn q_fix(&self) -> &Overlap {
        &self.q_fix
    }

    fn apply_single(sample: &GTensor, x: &SymMatrix, m: usize) -> nalgebra::DMatrix<f64> {
        let p = sample.p();
        let mut acc = nalgebra::DMatrix::zeros(p, p);
        for a in 0..m {
            for b in 0..m {
                let mab = sample.token_slice(a, b);
                acc += &mab * x.m() * mab.transpose();
            }
        }
        acc
    }

    /// `F(X)`: the sample mean of the Gram sandwiches. Maps PSD to PSD.
    pub fn apply(&self, x: &SymMatrix) -> SymMatrix {
        let mut acc = nalgebra::DMatrix::zeros(self.p, self.p);
        for s in &self.samples {
            acc += Self::apply_single(s, x, self.m);
        }
        symmetrize(&(acc / self.samples.len() as f64))
    }

    /// Per-sample Rayleigh quotients `<X, F_s(X)> / <X, X>`; their mean is
    /// the Rayleigh quotient of the full operator, their spread gives its
    /// MC standard error.
    pub fn rayleigh_per_sample(&self, x: &SymMatrix) -> Vec<f64> {
        let nrm2 = {
            let f = x.frobenius_norm();
            f * f
        };
        self.samples
            .iter()
            .map(|s| {
                let fx = Self::apply_single(s, x, self.m);
                let mut dot = 0.0;
                for i in 0..self.p {
                    for j in 0..self.p {
                        dot += x.get(i, j) * fx[(i, j)];
                    }
                }
                dot / nrm2
            })
            .collect()
    }

    /// Per-layer diagonal rates `mean_s sum_{a,b} G[l, l, a, b]^2`. For
    /// even links the off-diagonal layer blocks of `G` vanish in
    /// expectation and these rates are the operator's eigenvalues on the
    /// diagonal matrices `e_l e_lT`.
    pub fn diagonal_rates(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        (0..self.p)
            .map(|l| {
                self.samples
                    .iter()
                    .map(|s| {
                        let mut acc = 0.0;
                        for a in 0..self.m {
                            for b in 0..self.m {
                                let g = s.get(l, l, a, b);
                                acc += g * g;
                            }
                        }
                        acc
                    })
                    .sum::<f64>()
                    / n
            })
            .collect()
    }

    /// Spectral radius over the PSD cone by power iteration from
    /// `I / sqrt(P)`, with the Rayleigh value as the estimate. Returns the
    /// radius and the leading eigenmatrix; a vanishing operator returns
    /// `(0, start)`.
    pub fn spectral_radius_psd(&self, iters: usize, tol: f64) -> Result<(f64, SymMatrix)> {
        if iters == 0 {
            return Err(Error::InvalidArgument("power iteration needs iters >= 1".into()));
        }
        let mut x = SymMatrix::from_fn(self.p, |i, j| {
            if i == j {
                1.0 / (self.p as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut value = f64::NAN;
        for _ in 0..iters {
            let fx = self.apply(&x);
            let mut rayleigh = 0.0;
            for i in 0..self.p {
                for j in 0..self.p {
                    rayleigh += x.get(i, j) * fx.get(i, j);
                }
            }
            let nrm = fx.frobenius_norm();
            if nrm == 0.0 {
                return Ok((0.0, x));
            }
            let x_next = symmetrize(&(fx.m() / nrm));
            if value.is_finite() && (rayleigh - value).abs() <= tol * value.abs().max(1.0) {
                return Ok((rayleigh, x));
            }
            value = rayleigh;
            x = x_next;
        }
        Err(Error::NoConvergence { iters, residual: f64::NAN })
    }
}

/// A recovery threshold with its Monte Carlo uncertainty and the
/// diagnostics behind it.
#[derive(Debug, Clone)]
pub struct ThresholdEstimate {
    /// The threshold `1 / rho`; `+inf` when the operator vanishes.
    pub alpha: f64,
    /// Standard error of `alpha` (delta method through `1 / rho`).
    pub stderr: f64,
    /// Spectral radius (or scalar rate) that produced it.
    pub rho: f64,
    /// Per-layer diagonal rates of the operator.
    pub rates: Vec<f64>,
    /// 1-based index of the layer with the largest rate.
    pub maximizing_layer: usize,
    /// Leading eigenmatrix of the operator.
    pub eigenmatrix: SymMatrix,
}

fn estimate_from_rayleigh(
    rho: f64,
    per_sample: &[f64],
    rates: Vec<f64>,
    eigenmatrix: SymMatrix,
) -> ThresholdEstimate {
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var =
        per_sample.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let se_rho = (var / n).sqrt();
    let maximizing_layer = rates
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap_or(1);
    if rho <= 0.0 {
        return ThresholdEstimate {
            alpha: f64::INFINITY,
            stderr: f64::INFINITY,
            rho,
            rates,
            maximizing_layer,
            eigenmatrix,
        };
    }
    ThresholdEstimate {
        alpha: 1.0 / rho,
        stderr: se_rho / (rho * rho),
        rho,
        rates,
        maximizing_layer,
        eigenmatrix,
    }
}

/// Builds the stability operator at conditioning overlap `q_fix` from
/// `n_mc` label draws.
pub fn stability_operator_at(
    cfg: &ModelConfig,
    q_fix: &Overlap,
    ch: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<StabilityOperator> {
    let tensors = g_tensor_at(cfg, q_fix, ch, n_mc, stream)?;
    StabilityOperator::new(tensors, q_fix.clone())
}

/// Initial weak-recovery threshold: stability of the uninformed fixed point
/// `Q = 0`. `alpha_1 = 1 / rho(F)` with the spectral radius from power
/// iteration; the per-layer rates identify which direction destabilizes
/// first.
pub fn alpha1(
    cfg: &ModelConfig,
    ch: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<ThresholdEstimate> {
    cfg.validate()?;
    let q0 = SymMatrix::zeros(cfg.p());
    let op = stability_operator_at(cfg, &q0, ch, n_mc, stream)?;
    let (rho, eigenmatrix) = op.spectral_radius_psd(500, 1e-12)?;
    if rho == 0.0 {
        return Ok(estimate_from_rayleigh(0.0, &[0.0], op.diagonal_rates(), eigenmatrix));
    }
    let per_sample = op.rayleigh_per_sample(&eigenmatrix);
    let rates = op.diagonal_rates();
    Ok(estimate_from_rayleigh(rho, &per_sample, rates, eigenmatrix))
}

/// Threshold of the last unrecovered direction for the depth-2 rank-1
/// model: condition on the final layer being known exactly
/// (`Q_fix = diag(0, 1)`, so the channel has zero variance along it and the
/// mean carries the true final-layer index) and contract the first-layer
/// diagonal block of the derivative tensor:
/// `1 / alpha_2 = sum_{a,b} E[G[1, 1, a, b]^2]`.
pub fn alpha2_conditioned(
    cfg: &ModelConfig,
    ch: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<ThresholdEstimate> {
    cfg.validate()?;
    if cfg.depth != 2 || cfg.p_layers != [1, 1] {
        return Err(Error::InvalidArgument(
            "conditioned threshold needs the depth-2 rank-1 model".into(),
        ));
    }
    let q_fix = SymMatrix::from_diagonal(&[0.0, 1.0]);
    let tensors = g_tensor_at(cfg, &q_fix, ch, n_mc, stream)?;
    let per_sample: Vec<f64> = tensors
        .par_iter()
        .map(|t| {
            let mut acc = 0.0;
            for a in 0..t.m() {
                for b in 0..t.m() {
                    let g = t.get(0, 0, a, b);
                    acc += g * g;
                }
            }
            acc
        })
        .collect();
    let n = per_sample.len() as f64;
    let rate = per_sample.iter().sum::<f64>() / n;
    let eigen = SymMatrix::from_fn(2, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
    Ok(estimate_from_rayleigh(rate, &per_sample, vec![rate], eigen))
}

/// One row of a phase-diagram sweep.
pub struct PhasePoint {
    pub c: f64,
    pub alpha1: Result<ThresholdEstimate>,
    pub alpha2: Result<ThresholdEstimate>,
}

/// Thresholds as a function of the skip strength `c`. Per-point failures
/// are recorded in the row; the sweep continues.
pub fn phase_diagram(
    cfg_template: &ModelConfig,
    c_grid: &[f64],
    ch: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<Vec<PhasePoint>> {
    if c_grid.is_empty() {
        return Err(Error::InvalidArgument("empty skip-strength grid".into()));
    }
    Ok(c_grid
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut cfg = cfg_template.clone();
            cfg.c = c;
            let sub = stream.substream(i as u64);
            PhasePoint {
                c,
                alpha1: alpha1(&cfg, ch, n_mc, sub.substream(0)),
                alpha2: alpha2_conditioned(&cfg, ch, n_mc, sub.substream(1)),
            }
        })
        .collect())
}
