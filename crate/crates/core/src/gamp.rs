//! Generalized approximate message passing for the sequence model.
//!
//! The solver estimates the `P x D` teacher weights from `N = alpha D`
//! samples. Each iteration evaluates the channel denoiser at per-sample
//! pseudo-means `omega_mu` with a shared covariance `V`, contracts the
//! denoiser outputs into the `P x P` correction `A` and the `D x P` field
//! `B`, and resolves the Gaussian prior in closed form:
//!
//! ```text
//! omega_mu = WhatT x_mu / sqrt(D) - V g_prev_mu
//! g_mu     = g_out(y_mu, omega_mu, V)
//! A        = -(1/D) sum_mu sum_m  dg_mu[:, :, m, m]          (symmetrized)
//! B        = (1/sqrt(D)) sum_mu x_mu g_muT + What A
//! What'    = [(1-lambda) B + sqrt(lambda) ST] [I + (1-lambda) A]^{-1}
//! Chat'    = (1-lambda) [I + (1-lambda) A]^{-1}
//! ```
//!
//! `S = sqrt(lambda) W* + sqrt(1-lambda) noise` is optional side
//! information, folded in as a shifted Gaussian prior; `lambda = 0` gives
//! the plain update `What' = B (I + A)^{-1}`, and `lambda = 1` collapses
//! onto `What' = ST` exactly. The published intermediate form of this
//! update multiplies the side-information term by an extra `A` and drops
//! the `(1-lambda)` factor from `Chat`; resolving the prior exactly (as
//! above) is what reproduces the side-information state evolution
//! `F_lambda`, including its seeding of the overlap at strength `lambda`.
//!
//! Progress is tracked by the cross-overlap `W* What / D` when the teacher
//! is available, otherwise by the change in `What`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::channel::{denoise, ChannelParams, ChannelPoint, GTensor};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelConfig, WeightStack};
use crate::se::{self, Overlap};
use crate::smallmat::{gaussian_matrix, symmetrize, RngStream, SymMatrix};

/// Optional noisy observation of the teacher weights,
/// `S = sqrt(lambda) W* + sqrt(1-lambda) zeta`, `P x D`.
#[derive(Debug, Clone)]
pub struct SideInfo {
    pub lambda: f64,
    pub s: DMatrix<f64>,
}

impl SideInfo {
    /// Draws side information of strength `lambda` about `w_star`.
    pub fn sample(w_star: &DMatrix<f64>, lambda: f64, stream: RngStream) -> Result<SideInfo> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "side-information strength {lambda} outside [0, 1]"
            )));
        }
        let mut rng = stream.rng();
        let zeta = gaussian_matrix(&mut rng, w_star.nrows(), w_star.ncols());
        Ok(SideInfo { lambda, s: w_star * lambda.sqrt() + zeta * (1.0 - lambda).sqrt() })
    }
}

/// Iterate state of the solver.
#[derive(Debug, Clone)]
pub struct GampState {
    /// Weight estimate, `D x P` (row `i` is the estimate for input
    /// coordinate `i`).
    pub w_hat: DMatrix<f64>,
    /// Posterior covariance estimate, `P x P`.
    pub c_hat: SymMatrix,
    /// Channel outputs of the previous iteration (Onsager memory).
    pub g_prev: Vec<DMatrix<f64>>,
    /// Pseudo-means of the last step, one `P x M` matrix per sample.
    pub omega: Vec<DMatrix<f64>>,
    /// Covariance used in the last step.
    pub v: SymMatrix,
    /// Onsager correction of the last step.
    pub a: SymMatrix,
    /// Completed iterations.
    pub t: usize,
}

/// Solver options.
#[derive(Debug, Clone)]
pub struct GampOptions {
    pub t_max: usize,
    /// Convergence threshold on the Frobenius change of the tracked overlap
    /// (or of `What / sqrt(DP)` without a teacher).
    pub tol: f64,
    /// Convex blending of weight updates; `1` is the undamped algorithm.
    pub damping: f64,
    /// Start from the side-information matrix instead of a random draw.
    pub warm_start: bool,
    /// MC draws for the per-iteration prediction-error estimate; `0` skips
    /// it.
    pub pred_mc: usize,
}

impl Default for GampOptions {
    fn default() -> Self {
        GampOptions { t_max: 200, tol: 1e-6, damping: 1.0, warm_start: false, pred_mc: 0 }
    }
}

/// Per-iteration observables.
#[derive(Debug, Clone)]
pub struct GampMetrics {
    pub t: usize,
    /// `W* What / D`, `P x P`; rows index teacher directions.
    pub q_cross: DMatrix<f64>,
    /// `WhatT What / D`, `P x P`.
    pub q_self: SymMatrix,
    /// Per-direction cosine similarities `|<w*_l, what_l>| / (norms)`.
    pub cosines: Vec<f64>,
    /// Asymptotic prediction error at the measured self-overlap, when
    /// requested.
    pub pred_error: Option<f64>,
}

/// Fresh state: `What` standard normal (or the side-information matrix when
/// warm-starting), `Chat = I`, no channel memory.
pub fn gamp_init(
    cfg: &ModelConfig,
    data: &Dataset,
    side: Option<&SideInfo>,
    warm_start: bool,
    stream: RngStream,
) -> Result<GampState> {
    cfg.validate()?;
    let p = cfg.p();
    let d = data.d;
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let w_hat = match (warm_start, side) {
        (true, Some(si)) => si.s.transpose(),
        _ => {
            let mut rng = stream.rng();
            gaussian_matrix(&mut rng, d, p)
        }
    };
    Ok(GampState {
        w_hat,
        c_hat: SymMatrix::identity(p),
        g_prev: vec![DMatrix::zeros(p, cfg.m); n],
        omega: Vec::new(),
        v: SymMatrix::identity(p),
        a: SymMatrix::zeros(p),
        t: 0,
    })
}

/// One full iteration, mutating the state in place.
///
/// Labels that land on the measure-zero degenerate boundary of the logit
/// inversion contribute zero to this step (their denoiser is undefined
/// there), as do far-tail samples whose posterior mass escapes the fixed
/// quadrature window; more than 1% of such samples aborts the run.
pub fn gamp_step(
    cfg: &ModelConfig,
    data: &Dataset,
    state: &mut GampState,
    side: Option<&SideInfo>,
    ch: &ChannelParams,
    damping: f64,
    stream: RngStream,
) -> Result<()> {
    if !(0.0 < damping && damping <= 1.0) {
        return Err(Error::InvalidArgument(format!("damping {damping} outside (0, 1]")));
    }
    let p = cfg.p();
    let m = cfg.m;
    let d = data.d;
    let n = data.len();
    let sqrt_d = (d as f64).sqrt();
    let v = state.c_hat.clone();
    let w_hat_t = state.w_hat.transpose();

    struct SampleOut {
        omega: DMatrix<f64>,
        g: DMatrix<f64>,
        dg: Option<GTensor>,
    }
    let step_stream = stream.substream(state.t as u64);
    let outs: Vec<SampleOut> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(mu, sample)| -> Result<SampleOut> {
            let omega = &w_hat_t * &sample.x / sqrt_d - v.m() * &state.g_prev[mu];
            let pt = ChannelPoint { omega: omega.clone(), v: v.clone() };
            match denoise(cfg, &sample.y, &pt, ch, step_stream.substream(mu as u64)) {
                Ok(out) => Ok(SampleOut { omega, g: out.g, dg: Some(out.dg_domega) }),
                Err(Error::Domain(_)) | Err(Error::Quadrature(_)) => {
                    Ok(SampleOut { omega, g: DMatrix::zeros(p, m), dg: None })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n_skip = outs.iter().filter(|o| o.dg.is_none()).count();
    if n_skip * 100 > n {
        return Err(Error::Domain(format!(
            "{n_skip} of {n} labels fell outside the channel domain"
        )));
    }

    let mut a_raw = DMatrix::zeros(p, p);
    let mut b_mat = DMatrix::zeros(d, p);
    for (sample, out) in data.samples.iter().zip(&outs) {
        if let Some(dg) = &out.dg {
            a_raw -= dg.token_diagonal_sum();
        }
        b_mat += &sample.x * out.g.transpose();
    }
    let a = symmetrize(&(a_raw / d as f64));
    b_mat = b_mat / sqrt_d + &state.w_hat * a.m();

    let lambda = side.map(|si| si.lambda).unwrap_or(0.0);
    let m_lambda = {
        let mut mm = a.m() * (1.0 - lambda);
        for i in 0..p {
            mm[(i, i)] += 1.0;
        }
        symmetrize(&mm.try_inverse().ok_or_else(|| {
            Error::Domain("prior-resolution matrix I + (1 - lambda) A is singular".into())
        })?)
    };
    let mut w_new = match side {
        Some(si) if lambda > 0.0 => {
            (b_mat * (1.0 - lambda) + si.s.transpose() * lambda.sqrt()) * m_lambda.m()
        }
        _ => b_mat * m_lambda.m(),
    };
    if damping < 1.0 {
        w_new = w_new * damping + &state.w_hat * (1.0 - damping);
    }
    if !w_new.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite { context: "weight update" });
    }
    let norm_cap = 1e3 * ((d * p) as f64).sqrt();
    if w_new.norm() > norm_cap {
        return Err(Error::Diverged(format!(
            "weight norm {:.3e} exceeded {:.3e}",
            w_new.norm(),
            norm_cap
        )));
    }

    state.w_hat = w_new;
    state.c_hat = SymMatrix::from_fn(p, |i, j| (1.0 - lambda) * m_lambda.get(i, j));
    state.g_prev = outs.iter().map(|o| o.g.clone()).collect();
    state.omega = outs.into_iter().map(|o| o.omega).collect();
    state.v = v;
    state.a = a;
    state.t += 1;
    Ok(())
}

/// Overlaps and cosines of the current estimate against the teacher.
pub fn measure_overlaps(
    state: &GampState,
    w_star: &WeightStack,
    pred_mc: usize,
    cfg: &ModelConfig,
    stream: RngStream,
) -> Result<GampMetrics> {
    let stacked = w_star.stacked();
    let d = state.w_hat.nrows() as f64;
    let p = stacked.nrows();
    if stacked.ncols() != state.w_hat.nrows() || state.w_hat.ncols() != p {
        return Err(Error::InvalidArgument("estimate and teacher shapes differ".into()));
    }
    let q_cross = &stacked * &state.w_hat / d;
    let q_self = symmetrize(&(state.w_hat.transpose() * &state.w_hat / d));
    let mut cosines = Vec::with_capacity(p);
    for l in 0..p {
        let w_true = stacked.row(l);
        let w_est = state.w_hat.column(l);
        let (nt, ne) = (w_true.norm(), w_est.norm());
        if nt == 0.0 || ne == 0.0 {
            return Err(Error::ZeroNorm { context: "cosine similarity" });
        }
        cosines.push(w_true.transpose().dot(&w_est).abs() / (nt * ne));
    }
    let pred_error = if pred_mc > 0 {
        let q_proj: Overlap = q_self.clip_eigenvalues(0.0, 1.0);
        Some(se::prediction_error(&q_proj, cfg, pred_mc, stream)?)
    } else {
        None
    };
    Ok(GampMetrics { t: state.t, q_cross, q_self, cosines, pred_error })
}

/// A completed run.
#[derive(Debug)]
pub struct GampRun {
    pub state: GampState,
    /// Metrics at initialization and after every iteration (teacher runs
    /// only).
    pub metrics: Vec<GampMetrics>,
    pub converged: bool,
}

/// Runs the solver to convergence or `t_max`.
///
/// With a teacher, convergence is a Frobenius change of `Q_cross` below
/// `tol` and metrics are recorded every iteration; without one, the
/// criterion is the normalized change of `What`.
pub fn gamp_run(
    cfg: &ModelConfig,
    data: &Dataset,
    w_star: Option<&WeightStack>,
    side: Option<&SideInfo>,
    ch: &ChannelParams,
    opts: &GampOptions,
    stream: RngStream,
) -> Result<GampRun> {
    let mut state = gamp_init(cfg, data, side, opts.warm_start, stream.substream(0))?;
    let run_stream = stream.substream(1);
    let metric_stream = stream.substream(2);
    let mut metrics = Vec::new();
    if let Some(ws) = w_star {
        metrics.push(measure_overlaps(&state, ws, opts.pred_mc, cfg, metric_stream.substream(0))?);
    }
    let mut converged = false;
    let mut prev_q = metrics.last().map(|m| m.q_cross.clone());
    let mut prev_w = state.w_hat.clone();
    for t in 0..opts.t_max {
        gamp_step(cfg, data, &mut state, side, ch, opts.damping, run_stream)?;
        let resid = match (w_star, &prev_q) {
            (Some(ws), Some(pq)) => {
                let m = measure_overlaps(
                    &state,
                    ws,
                    opts.pred_mc,
                    cfg,
                    metric_stream.substream(1 + t as u64),
                )?;
                let r = (&m.q_cross - pq).norm();
                prev_q = Some(m.q_cross.clone());
                metrics.push(m);
                r
            }
            _ => {
                let r = (&state.w_hat - &prev_w).norm()
                    / ((state.w_hat.nrows() * state.w_hat.ncols()) as f64).sqrt();
                prev_w = state.w_hat.clone();
                r
            }
        };
        if resid < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(GampRun { state, metrics, converged })
}
