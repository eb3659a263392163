//! State evolution: the asymptotic description of message passing.
//!
//! As `D` grows with `alpha = N/D` fixed, the overlap `Q^t` between the
//! estimate and the teacher weights concentrates on a deterministic `P x P`
//! recursion
//!
//! ```text
//! Qhat^t = alpha * E[ g_out(Y, sqrt(Q^t) xi, I - Q^t) gT ],   (token-contracted)
//! Q^{t+1} = F_lambda(Qhat^t),
//! ```
//!
//! where `F_lambda(Qhat) = ((1-lambda) Qhat + lambda I)(I + (1-lambda) Qhat)^{-1}`
//! and `lambda` is the strength of side information about the teacher.
//!
//! The expectation is over a standard Gaussian `xi` and a label `Y` drawn
//! from the channel at overlap `Q`. It is estimated by Monte Carlo on a
//! frozen pool of draws ([`SePool`]): reusing one pool across iterations
//! makes the iteration a deterministic map (so it can
//! actually converge to `tol`), and sharing the pool across a sweep of
//! `alpha` values yields smooth threshold curves instead of MC scatter.
//!
//! The module also evaluates the scalar objective whose stationary points
//! the recursion finds ([`free_energy_objective`]) and the asymptotic
//! prediction and estimation errors at a given overlap.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::channel::{denoise_mean, zout_reduced_l2, ChannelParams, ChannelPoint};
use crate::error::{Error, Result};
use crate::model::{smi_link_eval, ModelConfig};
use crate::smallmat::{gaussian_matrix, symmetrize, RngStream, SymMatrix, PSD_CLIP_EPS};

/// Alignment of estimate and teacher, `P x P`, eigenvalues in `[0, 1]`.
pub type Overlap = SymMatrix;

/// Conjugate order parameter `Qhat`, `P x P`, positive semidefinite.
pub type ConjugateOverlap = SymMatrix;

/// Tunables of the state-evolution iteration.
#[derive(Debug, Clone)]
pub struct SeConfig {
    /// Monte Carlo draws per expectation.
    pub n_mc: usize,
    /// Iteration cap.
    pub t_max: usize,
    /// Convergence threshold on the Frobenius change of `Q`.
    pub tol: f64,
    /// Side-information strength in `[0, 1]`.
    pub lambda: f64,
    /// Re-symmetrize each iterate. The update preserves symmetry exactly
    /// (the contracted outer product is a Gram matrix), so this is a guard,
    /// not a correction.
    pub symmetrize_each_iter: bool,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig { n_mc: 1440, t_max: 200, tol: 1e-6, lambda: 0.0, symmetrize_each_iter: true }
    }
}

impl SeConfig {
    fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("state evolution needs n_mc >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "side-information strength {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A frozen pool of standard Gaussian draws `(xi, z)` plus one RNG stream
/// per item for channel routes that sample internally.
pub struct SePool {
    items: Vec<PoolItem>,
}

struct PoolItem {
    xi: DMatrix<f64>,
    z: DMatrix<f64>,
    stream: RngStream,
}

impl SePool {
    /// Draws `n` items of shape `p x m` from substreams of `stream`.
    pub fn draw(p: usize, m: usize, n: usize, stream: RngStream) -> SePool {
        let items = (0..n)
            .map(|i| {
                let sub = stream.substream(i as u64);
                let mut rng = sub.rng();
                PoolItem {
                    xi: gaussian_matrix(&mut rng, p, m),
                    z: gaussian_matrix(&mut rng, p, m),
                    stream: sub.substream(u64::MAX / 3),
                }
            })
            .collect();
        SePool { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Channel factors at overlap `Q`: `sqrt(Q)` and `V = I - Q` with its root.
struct OverlapChannel {
    sq_q: SymMatrix,
    v: SymMatrix,
    sq_v: SymMatrix,
}

fn overlap_channel(q: &Overlap, p: usize) -> Result<OverlapChannel> {
    if q.dim() != p {
        return Err(Error::InvalidArgument(format!(
            "overlap has dimension {}, expected {}",
            q.dim(),
            p
        )));
    }
    let v = &SymMatrix::identity(p) - q;
    if v.eigenvalues().into_iter().any(|e| e < -PSD_CLIP_EPS) {
        return Err(Error::DegenerateChannel);
    }
    let sq_q = q.sqrt_psd()?;
    let sq_v = v.sqrt_psd()?;
    Ok(OverlapChannel { sq_q, v, sq_v })
}

/// `F(Qhat) = (I + Qhat)^{-1} Qhat`, the zero-side-information overlap map.
/// For PSD input the result shares its eigenbasis with eigenvalues
/// `x / (1 + x) in [0, 1)`.
pub fn f_map(qhat: &ConjugateOverlap) -> Result<Overlap> {
    f_lambda_map(qhat, 0.0)
}

/// `F_lambda(Qhat) = ((1-lambda) Qhat + lambda I)(I + (1-lambda) Qhat)^{-1}`.
/// Maps `Qhat = 0` to `lambda I` exactly and everything to `I` at
/// `lambda = 1`.
pub fn f_lambda_map(qhat: &ConjugateOverlap, lambda: f64) -> Result<Overlap> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "side-information strength {lambda} outside [0, 1]"
        )));
    }
    let p = qhat.dim();
    if lambda == 1.0 {
        return Ok(SymMatrix::identity(p));
    }
    let mut num = qhat.m() * (1.0 - lambda);
    let mut den = num.clone();
    for i in 0..p {
        num[(i, i)] += lambda;
        den[(i, i)] += 1.0;
    }
    let den_inv = den
        .try_inverse()
        .ok_or_else(|| Error::Domain("I + (1 - lambda) Qhat is singular".into()))?;
    Ok(symmetrize(&(num * den_inv)))
}

/// One state-evolution expectation over a frozen pool:
/// `Qhat = alpha * mean[g_out g_outT]` at overlap `q`.
///
/// Pool items whose label falls on the measure-zero degenerate boundary of
/// the logit inversion are skipped (their posterior-mean contribution is
/// negligible), as are far-tail items whose posterior mass escapes the fixed
/// quadrature window; more than 1% skips aborts with the underlying error.
pub fn qhat_with_pool(
    cfg: &ModelConfig,
    q: &Overlap,
    alpha: f64,
    ch: &ChannelParams,
    pool: &SePool,
) -> Result<ConjugateOverlap> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty Monte Carlo pool".into()));
    }
    let p = cfg.p();
    let oc = overlap_channel(q, p)?;
    let terms: Vec<Option<DMatrix<f64>>> = pool
        .items
        .par_iter()
        .map(|item| -> Result<Option<DMatrix<f64>>> {
            let omega = oc.sq_q.m() * &item.xi;
            let z_true = &omega + oc.sq_v.m() * &item.z;
            let y = smi_link_eval(cfg, &z_true)?;
            let pt = ChannelPoint { omega, v: oc.v.clone() };
            match denoise_mean(cfg, &y, &pt, ch, item.stream) {
                Ok(g) => Ok(Some(&g * g.transpose())),
                Err(Error::Domain(_)) | Err(Error::Quadrature(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len();
    let n_skip = terms.iter().filter(|t| t.is_none()).count();
    if n_skip * 100 > n {
        return Err(Error::Domain(format!(
            "{n_skip} of {n} pool labels fell outside the channel domain"
        )));
    }
    let mut acc = DMatrix::zeros(p, p);
    for t in terms.into_iter().flatten() {
        acc += t;
    }
    Ok(symmetrize(&(acc * (alpha / n as f64))))
}

/// [`qhat_with_pool`] on a freshly drawn pool.
pub fn se_qhat(
    cfg: &ModelConfig,
    q: &Overlap,
    alpha: f64,
    ch: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<ConjugateOverlap> {
    let pool = SePool::draw(cfg.p(), cfg.m, n_mc, stream);
    qhat_with_pool(cfg, q, alpha, ch, &pool)
}

/// Outcome of a state-evolution run.
#[derive(Debug, Clone)]
pub struct SeRun {
    /// Final overlap.
    pub q: Overlap,
    /// Conjugate overlap of the last update.
    pub qhat: ConjugateOverlap,
    /// Iterations performed.
    pub iterations: usize,
    /// Whether the Frobenius residual fell below `tol`.
    pub converged: bool,
    /// `Q^0, Q^1, ...` including the initial point.
    pub trajectory: Vec<Overlap>,
    /// `||Q^{t+1} - Q^t||_F` per iteration.
    pub residuals: Vec<f64>,
}

/// Iterates `Q -> F_lambda(alpha E[g gT])` from `q0` on one frozen pool.
pub fn se_iterate(
    q0: &Overlap,
    cfg: &ModelConfig,
    alpha: f64,
    ch: &ChannelParams,
    se: &SeConfig,
    stream: RngStream,
) -> Result<SeRun> {
    se.validate()?;
    let pool = SePool::draw(cfg.p(), cfg.m, se.n_mc, stream);
    se_iterate_with_pool(q0, cfg, alpha, ch, se, &pool)
}

/// [`se_iterate`] on a caller-provided pool; sharing the pool across the
/// points of an `alpha` sweep removes sample-to-sample MC jitter from the
/// resulting curves.
pub fn se_iterate_with_pool(
    q0: &Overlap,
    cfg: &ModelConfig,
    alpha: f64,
    ch: &ChannelParams,
    se: &SeConfig,
    pool: &SePool,
) -> Result<SeRun> {
    se.validate()?;
    let mut q = q0.clone();
    let mut qhat = SymMatrix::zeros(cfg.p());
    let mut trajectory = vec![q.clone()];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..se.t_max {
        qhat = qhat_with_pool(cfg, &q, alpha, ch, pool)?;
        let mut q_next = f_lambda_map(&qhat, se.lambda)?;
        if se.symmetrize_each_iter {
            q_next = symmetrize(q_next.m());
        }
        let resid = (&q_next - &q).frobenius_norm();
        q = q_next;
        iterations += 1;
        trajectory.push(q.clone());
        residuals.push(resid);
        if resid < se.tol {
            converged = true;
            break;
        }
    }
    Ok(SeRun { q, qhat, iterations, converged, trajectory, residuals })
}

/// Asymptotic Bayes prediction error at overlap `Q`:
/// `E||g(xi)||^2 - E<g(xi), g(sqrt(Q) xi + sqrt(I - Q) Z)>` with paired
/// draws. Zero at `Q = I` (the arguments coincide) and equal to the label
/// variance at `Q = 0`.
pub fn prediction_error(
    q: &Overlap,
    cfg: &ModelConfig,
    n_mc: usize,
    stream: RngStream,
) -> Result<f64> {
    cfg.validate()?;
    let p = cfg.p();
    let oc = overlap_channel(q, p)?;
    let terms: Vec<(f64, f64)> = (0..n_mc)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = stream.substream(i as u64).rng();
            let xi = gaussian_matrix(&mut rng, p, cfg.m);
            let z = gaussian_matrix(&mut rng, p, cfg.m);
            let y_star = smi_link_eval(cfg, &xi)?;
            let coupled = oc.sq_q.m() * &xi + oc.sq_v.m() * &z;
            let y_est = smi_link_eval(cfg, &coupled)?;
            let sq = y_star.iter().map(|v| v * v).sum();
            let cross = y_star.iter().zip(y_est.iter()).map(|(a, b)| a * b).sum();
            Ok((sq, cross))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    let (sum_sq, sum_cross) = terms
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (sq, cross)| (a + sq, b + cross));
    Ok((sum_sq - sum_cross) / n)
}

/// Normalized Bayes estimation error `(P - ||Q||_F^2) / P`; `0` at `Q = I`,
/// `1` at `Q = 0`.
pub fn estimation_error(q: &Overlap) -> f64 {
    let p = q.dim() as f64;
    (p - q.m().norm_squared()) / p
}

/// Monte Carlo value of the free-energy objective with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct FreeEnergy {
    pub value: f64,
    pub mc_stderr: f64,
}

/// Per-item `ln Z_out` over a pool at overlap `q`, with labels generated at
/// the same overlap (the coupled measure the objective is defined over).
fn log_zout_over_pool(
    cfg: &ModelConfig,
    q: &Overlap,
    ch: &ChannelParams,
    pool: &SePool,
) -> Result<Vec<f64>> {
    let p = cfg.p();
    let oc = overlap_channel(q, p)?;
    pool.items
        .par_iter()
        .map(|item| -> Result<f64> {
            let omega = oc.sq_q.m() * &item.xi;
            let z_true = &omega + oc.sq_v.m() * &item.z;
            let y = smi_link_eval(cfg, &z_true)?;
            let pt = ChannelPoint { omega, v: oc.v.clone() };
            Ok(zout_reduced_l2(cfg, &y, &pt, ch)?.ln())
        })
        .collect()
}

fn entropy_bracket(q: &Overlap) -> Result<f64> {
    let p = q.dim();
    let v = &SymMatrix::identity(p) - q;
    let mut logdet = 0.0;
    for e in v.eigenvalues() {
        if e <= 0.0 {
            return Err(Error::DegenerateChannel);
        }
        logdet += e.ln();
    }
    Ok(0.5 * (logdet + q.trace()))
}

/// The scalar objective whose stationary points the state evolution finds:
/// `S(Q) = (log det(I - Q) + Tr Q) / 2 + alpha E[ln Z_out]`, with the
/// expectation over the coupled label measure at overlap `Q`. The returned
/// standard error covers only the MC part.
pub fn free_energy_objective(
    q: &Overlap,
    alpha: f64,
    cfg: &ModelConfig,
    ch: &ChannelParams,
    pool: &SePool,
) -> Result<FreeEnergy> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty Monte Carlo pool".into()));
    }
    let bracket = entropy_bracket(q)?;
    let lnz = log_zout_over_pool(cfg, q, ch, pool)?;
    let n = lnz.len() as f64;
    let mean = lnz.iter().sum::<f64>() / n;
    let var = lnz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FreeEnergy { value: bracket + alpha * mean, mc_stderr: alpha * (var / n).sqrt() })
}

/// Paired difference `S(q_a) - S(q_b)` on one pool. Common random numbers
/// make the MC error of the difference far smaller than that of either
/// value, which is what stationarity checks need.
pub fn free_energy_gap(
    q_a: &Overlap,
    q_b: &Overlap,
    alpha: f64,
    cfg: &ModelConfig,
    ch: &ChannelParams,
    pool: &SePool,
) -> Result<FreeEnergy> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty Monte Carlo pool".into()));
    }
    let bracket = entropy_bracket(q_a)? - entropy_bracket(q_b)?;
    let la = log_zout_over_pool(cfg, q_a, ch, pool)?;
    let lb = log_zout_over_pool(cfg, q_b, ch, pool)?;
    let n = la.len() as f64;
    let diffs: Vec<f64> = la.iter().zip(&lb).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var =
        diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FreeEnergy { value: bracket + alpha * mean, mc_stderr: alpha * (var / n).sqrt() })
}
