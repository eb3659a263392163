//! Posterior-mean denoiser of the index matrix given a label.
//!
//! The estimation channel observes `Y = g(Z)` where, conditionally on the
//! data and the running estimate, each token column of `Z in R^{P x M}` is
//! Gaussian with mean column `omega_m` and common covariance `V`. The
//! denoiser is
//!
//! ```text
//! g_out(Y, omega, V) = E[ V^{-1} (Z - omega) | g(Z) = Y ],
//! ```
//!
//! together with its derivative tensor `d g_out / d omega`, which drives both
//! message passing (Onsager term) and the recovery thresholds.
//!
//! For a depth-2, rank-1, two-token model the conditioning event can be
//! resolved exactly: given the first-layer index `Z_1`, the final-layer index
//! has exactly two solutions `Z_2^T = +/- B(Z_1)^{-T} gamma(Y)`, where
//! `gamma` inverts the output nonlinearity and `B(Z_1)` is the first mixing
//! matrix. What remains is a two-dimensional integral over `Z_1`, done by
//! adaptive quadrature ([`gout_reduced_l2`]). For deeper rank-1 stacks the
//! outer integral is estimated by Monte Carlo over the prefix indices with
//! the final layer still solved analytically ([`gout_reduced_deep`]).
//!
//! An implementation-independent reference is [`mc_denoiser_oracle`]: plain
//! importance sampling against a slightly smoothed observation kernel. It is
//! deliberately kept free of the reduction machinery so the two routes check
//! each other.
//!
//! Numerical conventions used throughout (shared with the published
//! reference values): the covariance gets `reg_v` added to its diagonal
//! before inversion, the square-root argument inside `gamma` gets
//! `reg_sqrt`, quadrature runs on `[quad_lo, quad_hi]^2`, and the Jacobian
//! uses centered finite differences with step `fd_step` evaluated on shared
//! quadrature nodes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{mixing_prefix, smi_link_eval, Activation, ModelConfig};
use crate::quad::{adaptive_2d, QuadOptions};
use crate::smallmat::{gaussian_matrix, RngStream, SymMatrix};

/// Tunables of the channel evaluation. Defaults reproduce the reference
/// numerical setup.
#[derive(Debug, Clone)]
pub struct ChannelParams {
    /// Quadrature domain per axis.
    pub quad_lo: f64,
    pub quad_hi: f64,
    /// Absolute tolerance of the adaptive quadrature.
    pub quad_abs_tol: f64,
    /// Added to the diagonal of `V` before inversion.
    pub reg_v: f64,
    /// Added to the square-root argument inside the logit inversion.
    pub reg_sqrt: f64,
    /// Centered finite-difference step for the Jacobian.
    pub fd_step: f64,
    /// Quadrature points where `|det B|` falls below this contribute zero.
    pub det_floor: f64,
    /// Baseline initial subdivision depth of the quadrature grid; raised
    /// automatically when a small observation variance narrows the
    /// integrand to a ridge.
    pub min_depth: u32,
    /// Panel budget of the adaptive quadrature.
    pub max_cells: usize,
    /// Monte Carlo samples used by the deep-channel denoiser.
    pub deep_n_mc: usize,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            quad_lo: -3.0,
            quad_hi: 3.0,
            quad_abs_tol: 1e-8,
            reg_v: 1e-3,
            reg_sqrt: 1e-6,
            fd_step: 1e-5,
            det_floor: 1e-12,
            min_depth: 2,
            max_cells: 32768,
            deep_n_mc: 2000,
        }
    }
}

/// Location of the channel: per-token mean columns `omega` (`P x M`) and the
/// common covariance `V` (`P x P`).
#[derive(Debug, Clone)]
pub struct ChannelPoint {
    pub omega: DMatrix<f64>,
    pub v: SymMatrix,
}

impl ChannelPoint {
    fn validate(&self, p: usize, m: usize) -> Result<()> {
        if self.omega.nrows() != p || self.omega.ncols() != m {
            return Err(Error::InvalidArgument(format!(
                "omega has shape {}x{}, expected {}x{}",
                self.omega.nrows(),
                self.omega.ncols(),
                p,
                m
            )));
        }
        if self.v.dim() != p {
            return Err(Error::InvalidArgument(format!(
                "V has dimension {}, expected {}",
                self.v.dim(),
                p
            )));
        }
        if self.omega.iter().any(|v| !v.is_finite()) || self.v.m().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "channel point" });
        }
        Ok(())
    }
}

/// Derivative tensor `G[l, l', a, b] = d g_out[l, a] / d omega[l', b]`.
#[derive(Debug, Clone)]
pub struct GTensor {
    p: usize,
    m: usize,
    data: Vec<f64>,
}

impl GTensor {
    pub fn zeros(p: usize, m: usize) -> Self {
        GTensor { p, m, data: vec![0.0; p * p * m * m] }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    fn idx(&self, l: usize, lp: usize, a: usize, b: usize) -> usize {
        ((l * self.p + lp) * self.m + a) * self.m + b
    }

    pub fn get(&self, l: usize, lp: usize, a: usize, b: usize) -> f64 {
        self.data[self.idx(l, lp, a, b)]
    }

    pub fn set(&mut self, l: usize, lp: usize, a: usize, b: usize, v: f64) {
        let i = self.idx(l, lp, a, b);
        self.data[i] = v;
    }

    /// The `P x P` slice at token pair `(a, b)`; entry `(l, l')`.
    pub fn token_slice(&self, a: usize, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |l, lp| self.get(l, lp, a, b))
    }

    /// Sum over the token diagonal, `sum_m G[:, :, m, m]`; the Onsager term
    /// of message passing contracts exactly this.
    pub fn token_diagonal_sum(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.p);
        for m in 0..self.m {
            out += self.token_slice(m, m);
        }
        out
    }
}

/// Posterior mean and its derivative at a channel point.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// `g_out`, `P x M`.
    pub g: DMatrix<f64>,
    /// `d g_out / d omega`.
    pub dg_domega: GTensor,
}

/// Observation kernel with variance `delta` on every label entry; the
/// smoothed link is `g_delta(z) = g(z) + sqrt(delta) * noise`.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedChannel {
    pub delta: f64,
}

impl SmoothedChannel {
    pub fn new(delta: f64) -> Self {
        SmoothedChannel { delta }
    }

    /// Draws a label from the smoothed link at index matrix `z`.
    pub fn sample_label(
        &self,
        cfg: &ModelConfig,
        z: &DMatrix<f64>,
        rng: &mut impl Rng,
    ) -> Result<DMatrix<f64>> {
        let clean = smi_link_eval(cfg, z)?;
        let noise = gaussian_matrix(rng, cfg.m, cfg.m);
        Ok(clean + noise * self.delta.sqrt())
    }

    /// Log kernel weight of an observed informative-coordinate discrepancy.
    pub fn log_kernel(&self, d1: f64, d2: f64) -> f64 {
        -(d1 * d1 + d2 * d2) / (2.0 * self.delta)
    }
}

/// Result of the sampling-based reference denoiser.
#[derive(Debug, Clone)]
pub struct McOracleOutput {
    pub g: DMatrix<f64>,
    /// Effective sample size of the importance weights.
    pub ess: f64,
}

const LABEL_TOL: f64 = 1e-8;

/// Inverts a two-token softmax label to the final-layer logit vector.
///
/// For logits `u u^T` with `u in R^2`, the off-diagonal label entries
/// determine `u` up to sign:
///
/// ```text
/// gamma = ( -ln(1/y12 - 1), ln(1/y21 - 1) ) / sqrt(ln((1/y12 - 1)(1/y21 - 1)) + reg)
/// ```
///
/// Valid labels satisfy `y12, y21 in (0, 1)` and `y12 + y21 < 1`; on the
/// boundary `y12 + y21 = 1` the two logits coincide and the inversion
/// degenerates, reported as a domain error.
pub fn gamma_inverse(y12: f64, y21: f64, reg_sqrt: f64) -> Result<[f64; 2]> {
    let s = check_softmax_pair(y12, y21)?;
    let a = (1.0 / y12 - 1.0).ln();
    let b = (1.0 / y21 - 1.0).ln();
    let denom = (s + reg_sqrt).sqrt();
    Ok([-a / denom, b / denom])
}

/// Change-of-variables density factor of the softmax label map: the inverse
/// absolute Jacobian determinant of `u -> (y12, y21)` evaluated at the
/// solutions `u = +/- gamma`, namely
/// `1 / (2 y12 y21 (1 - y12)(1 - y21) |ln((1/y12 - 1)(1/y21 - 1))|)`.
pub fn jacobian_softmax_inverse(y12: f64, y21: f64) -> Result<f64> {
    let s = check_softmax_pair(y12, y21)?;
    Ok(1.0 / (2.0 * y12 * y21 * (1.0 - y12) * (1.0 - y21) * s))
}

/// Shared domain checks; returns `ln((1/y12 - 1)(1/y21 - 1)) > 0`.
fn check_softmax_pair(y12: f64, y21: f64) -> Result<f64> {
    if !y12.is_finite() || !y21.is_finite() {
        return Err(Error::NonFinite { context: "softmax label pair" });
    }
    if !(0.0 < y12 && y12 < 1.0 && 0.0 < y21 && y21 < 1.0) {
        return Err(Error::Domain(format!(
            "label pair ({y12}, {y21}) outside the open unit interval"
        )));
    }
    if y12 + y21 > 1.0 + 1e-12 {
        return Err(Error::Domain(format!(
            "label pair ({y12}, {y21}) violates y12 + y21 <= 1"
        )));
    }
    let s = ((1.0 / y12 - 1.0) * (1.0 / y21 - 1.0)).ln();
    if s <= 0.0 {
        return Err(Error::Domain(format!(
            "label pair ({y12}, {y21}) lies on the degenerate boundary y12 + y21 = 1"
        )));
    }
    Ok(s)
}

/// The informative label coordinates: off-diagonal entries for softmax
/// (rows sum to one), first row for the symmetric rank-1 linear label.
fn informative_pair(activation: Activation, y: &DMatrix<f64>) -> (f64, f64) {
    match activation {
        Activation::Softmax => (y[(0, 1)], y[(1, 0)]),
        Activation::Linear => (y[(0, 0)], y[(0, 1)]),
    }
}

/// Validates the redundant label coordinates without consuming them.
fn validate_label(activation: Activation, y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != 2 || y.ncols() != 2 {
        return Err(Error::InvalidArgument(format!(
            "label has shape {}x{}, expected 2x2",
            y.nrows(),
            y.ncols()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "label" });
    }
    match activation {
        Activation::Softmax => {
            for r in 0..2 {
                let s = y[(r, 0)] + y[(r, 1)];
                if (s - 1.0).abs() > LABEL_TOL {
                    return Err(Error::Domain(format!(
                        "softmax label row {r} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Activation::Linear => {
            let (y11, y12, y21, y22) = (y[(0, 0)], y[(0, 1)], y[(1, 0)], y[(1, 1)]);
            if (y12 - y21).abs() > LABEL_TOL * (1.0 + y12.abs()) {
                return Err(Error::Domain(format!(
                    "linear label is not symmetric: y12 = {y12}, y21 = {y21}"
                )));
            }
            if (y11 * y22 - y12 * y12).abs() > LABEL_TOL * (1.0 + y11.abs() * y22.abs()) {
                return Err(Error::Domain("linear label is not rank one".into()));
            }
        }
    }
    Ok(())
}

/// Final-layer logit solution and label-space density factor.
fn label_solution(
    activation: Activation,
    y: &DMatrix<f64>,
    reg_sqrt: f64,
) -> Result<([f64; 2], f64)> {
    validate_label(activation, y)?;
    let (c1, c2) = informative_pair(activation, y);
    match activation {
        Activation::Softmax => {
            let gamma = gamma_inverse(c1, c2, reg_sqrt)?;
            let jac = jacobian_softmax_inverse(c1, c2)?;
            Ok((gamma, jac))
        }
        Activation::Linear => {
            // Logits u u^T observed directly: u = (sqrt(y11), y12 / sqrt(y11)).
            if c1 <= 0.0 {
                return Err(Error::Domain(format!(
                    "linear label needs y11 > 0, got {c1}"
                )));
            }
            let r = c1.sqrt();
            Ok(([r, c2 / r], 1.0 / (2.0 * c1)))
        }
    }
}

/// Ensures the architecture admits the depth-2 quadrature reduction.
fn check_l2_config(cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.depth != 2 || cfg.m != 2 || cfg.p_layers != [1, 1] {
        return Err(Error::InvalidArgument(
            "quadrature denoiser needs depth 2, two tokens and rank-1 layers".into(),
        ));
    }
    Ok(())
}

/// Regularized covariance pieces used by every denoiser route.
struct RegV {
    v_reg: SymMatrix,
    v_inv: SymMatrix,
    det: f64,
    min_eig: f64,
}

fn regularize_v(v: &SymMatrix, reg: f64) -> Result<RegV> {
    let p = v.dim();
    let mut v_reg = v.clone();
    for i in 0..p {
        v_reg.set(i, i, v.get(i, i) + reg);
    }
    let eigs = v_reg.eigenvalues();
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        return Err(Error::Domain(format!(
            "regularized covariance is not positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    let det = eigs.iter().product();
    let v_inv = v_reg.try_inverse()?;
    Ok(RegV { v_reg, v_inv, det, min_eig })
}

/// Initial quadrature depth: a small observation variance concentrates the
/// integrand on a ridge of width ~sqrt(min eigenvalue); the starting grid
/// must place nodes within that width or the adaptive error estimate never
/// sees the ridge.
fn auto_depth(params: &ChannelParams, min_eig: f64) -> u32 {
    let width = params.quad_hi - params.quad_lo;
    let sigma = min_eig.max(1e-300).sqrt();
    let needed = (width / (7.0 * sigma)).log2().ceil();
    let needed = if needed.is_finite() && needed > 0.0 { needed as u32 } else { 0 };
    needed.clamp(params.min_depth, 6)
}

struct L2Pass {
    g: DMatrix<f64>,
    dg: Option<GTensor>,
    zout: f64,
}

/// One quadrature pass over the first-layer index. With `with_jacobian` the
/// integrals at all shifted means are accumulated on the same nodes, so the
/// finite differences downstream subtract correlated quadrature errors.
fn reduced_l2_pass(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
    with_jacobian: bool,
) -> Result<L2Pass> {
    check_l2_config(cfg)?;
    pt.validate(2, 2)?;
    let (target, jac_y) = label_solution(cfg.activation, y, params.reg_sqrt)?;
    let reg = regularize_v(&pt.v, params.reg_v)?;
    let (vi11, vi12, vi22) = (reg.v_inv.get(0, 0), reg.v_inv.get(0, 1), reg.v_inv.get(1, 1));
    let (w00, w01) = (pt.omega[(0, 0)], pt.omega[(0, 1)]);
    let (w10, w11) = (pt.omega[(1, 0)], pt.omega[(1, 1)]);
    let c = cfg.c;
    let activation = cfg.activation;
    let det_floor = params.det_floor;
    let h = params.fd_step;
    let hvi11 = h * vi11;
    let hvi12 = h * vi12;
    let hvi22 = h * vi22;
    let kk0 = (-0.5 * h * h * vi11).exp();
    let kk1 = (-0.5 * h * h * vi22).exp();
    let (t1, t2) = (target[0], target[1]);
    let n_variants = if with_jacobian { 9 } else { 1 };
    let n_comp = 5 * n_variants;

    let integrand = move |za: f64, zb: f64, out: &mut [f64]| {
        let s11 = za * za;
        let s12 = za * zb;
        let s22 = zb * zb;
        let (a11, a12, a21, a22) = match activation {
            Activation::Softmax => {
                // Row softmax of [[s11, s12], [s12, s22]] via stable sigmoids.
                let p12 = stable_sigmoid(s12 - s11);
                let p21 = stable_sigmoid(s12 - s22);
                (1.0 - p12, p12, p21, 1.0 - p21)
            }
            Activation::Linear => (s11, s12, s12, s22),
        };
        let b11 = c + a11;
        let b22 = c + a22;
        let det = b11 * b22 - a12 * a21;
        if det.abs() < det_floor {
            return;
        }
        let inv_absdet = 1.0 / det.abs();
        // Solve B^T u = target for the final-layer index column.
        let u1 = (b22 * t1 - a21 * t2) / det;
        let u2 = (-a12 * t1 + b11 * t2) / det;
        for sgn in [1.0_f64, -1.0] {
            let z2a = sgn * u1;
            let z2b = sgn * u2;
            let d00 = za - w00;
            let d10 = z2a - w10;
            let d01 = zb - w01;
            let d11 = z2b - w11;
            let xi00 = vi11 * d00 + vi12 * d10;
            let xi10 = vi12 * d00 + vi22 * d10;
            let xi01 = vi11 * d01 + vi12 * d11;
            let xi11 = vi12 * d01 + vi22 * d11;
            let q = d00 * xi00 + d10 * xi10 + d01 * xi01 + d11 * xi11;
            let w = (-0.5 * q).exp() * inv_absdet;
            out[0] += w;
            out[1] += w * xi00;
            out[2] += w * xi10;
            out[3] += w * xi01;
            out[4] += w * xi11;
            if !with_jacobian {
                continue;
            }
            // Shifted-mean variants share every set-up above; shifting
            // omega[l', b] by +/- h rescales the Gaussian weight by
            // exp(+/- h xi[l', b] - h^2 Vinv[l', l'] / 2) and shifts the
            // token-b column of xi by -/+ h Vinv[:, l'].
            let mut emit = |v: usize, w: f64, x00: f64, x10: f64, x01: f64, x11: f64| {
                let base = 5 * v;
                out[base] += w;
                out[base + 1] += w * x00;
                out[base + 2] += w * x10;
                out[base + 3] += w * x01;
                out[base + 4] += w * x11;
            };
            let e = (h * xi00).exp();
            emit(1, w * e * kk0, xi00 - hvi11, xi10 - hvi12, xi01, xi11);
            emit(2, w * kk0 / e, xi00 + hvi11, xi10 + hvi12, xi01, xi11);
            let e = (h * xi10).exp();
            emit(3, w * e * kk1, xi00 - hvi12, xi10 - hvi22, xi01, xi11);
            emit(4, w * kk1 / e, xi00 + hvi12, xi10 + hvi22, xi01, xi11);
            let e = (h * xi01).exp();
            emit(5, w * e * kk0, xi00, xi10, xi01 - hvi11, xi11 - hvi12);
            emit(6, w * kk0 / e, xi00, xi10, xi01 + hvi11, xi11 + hvi12);
            let e = (h * xi11).exp();
            emit(7, w * e * kk1, xi00, xi10, xi01 - hvi12, xi11 - hvi22);
            emit(8, w * kk1 / e, xi00, xi10, xi01 + hvi12, xi11 + hvi22);
        }
    };

    let opts = QuadOptions {
        abs_tol: params.quad_abs_tol,
        min_depth: auto_depth(params, reg.min_eig),
        max_cells: params.max_cells,
    };
    let result = adaptive_2d(&integrand, params.quad_lo, params.quad_hi, n_comp, &opts);
    let vals = &result.value;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "denoiser quadrature" });
    }
    let den = vals[0];
    if den < 1e-300 {
        return Err(Error::Quadrature(format!(
            "posterior normalizer underflowed ({den:.3e})"
        )));
    }
    let g_of = |v: usize, i: usize| vals[5 * v + 1 + i] / vals[5 * v];
    let g = DMatrix::from_fn(2, 2, |l, m| g_of(0, l + 2 * m));
    let dg = if with_jacobian {
        for v in 1..9 {
            if vals[5 * v] < 1e-300 {
                return Err(Error::Quadrature(
                    "posterior normalizer underflowed at a shifted mean".into(),
                ));
            }
        }
        let mut t = GTensor::zeros(2, 2);
        for (k, (lp, b)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let vp = 1 + 2 * k;
            let vm = 2 + 2 * k;
            for l in 0..2 {
                for a in 0..2 {
                    let i = l + 2 * a;
                    t.set(l, lp, a, b, (g_of(vp, i) - g_of(vm, i)) / (2.0 * h));
                }
            }
        }
        Some(t)
    } else {
        None
    };
    // Normalizer of the label density over the informative coordinates:
    // Gaussian constants, then the label-space change of variables.
    let two_pi = 2.0 * std::f64::consts::PI;
    let zout = den * jac_y * two_pi.powi(-2) / reg.det;
    Ok(L2Pass { g, dg, zout })
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Quadrature denoiser for the depth-2, rank-1, two-token channel: posterior
/// mean and centered finite-difference Jacobian.
pub fn gout_reduced_l2(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
) -> Result<DenoiserOutput> {
    let pass = reduced_l2_pass(cfg, y, pt, params, true)?;
    Ok(DenoiserOutput { g: pass.g, dg_domega: pass.dg.expect("jacobian requested") })
}

/// Posterior mean only; used where the Jacobian is not needed.
pub fn gout_reduced_l2_mean(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
) -> Result<DMatrix<f64>> {
    Ok(reduced_l2_pass(cfg, y, pt, params, false)?.g)
}

/// Density of the informative label coordinates under the channel at `pt`
/// (the normalizer of the posterior). This is the quantity whose log enters
/// the free-energy objective.
pub fn zout_reduced_l2(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
) -> Result<f64> {
    Ok(reduced_l2_pass(cfg, y, pt, params, false)?.zout)
}

struct DeepGeometry {
    k: usize,
    m: usize,
    chol_l: Option<DMatrix<f64>>,
    k_vec: DVector<f64>,
    var_cond: f64,
    v_inv: SymMatrix,
}

fn deep_geometry(p: usize, m: usize, reg: &RegV) -> Result<DeepGeometry> {
    let k = p - 1;
    let v = reg.v_reg.m();
    let (chol_l, k_vec, var_cond) = if k == 0 {
        (None, DVector::zeros(0), v[(0, 0)])
    } else {
        let v_sub = v.view((0, 0), (k, k)).clone_owned();
        let chol = v_sub
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("prefix covariance is not positive definite".into()))?;
        let v_cross = v.view((0, k), (k, 1)).clone_owned();
        let k_vec = chol.solve(&v_cross).column(0).clone_owned();
        let var_cond = v[(k, k)] - v_cross.column(0).dot(&k_vec);
        if var_cond <= 0.0 {
            return Err(Error::Domain(
                "conditional variance of the final layer is not positive".into(),
            ));
        }
        (Some(chol.l()), k_vec, var_cond)
    };
    Ok(DeepGeometry { k, m, chol_l, k_vec, var_cond, v_inv: reg.v_inv.clone() })
}

/// One weighted pass of the deep reduction at a given mean matrix, reusing
/// the standard-normal draws `raws` (common random numbers keep the finite
/// differences smooth).
fn deep_pass(
    cfg: &ModelConfig,
    geo: &DeepGeometry,
    target: [f64; 2],
    omega: &DMatrix<f64>,
    raws: &[DMatrix<f64>],
    det_floor: f64,
) -> (f64, DMatrix<f64>, f64) {
    let k = geo.k;
    let m = geo.m;
    let p = k + 1;
    let mut den = 0.0;
    let mut den_sq = 0.0;
    let mut num = DMatrix::zeros(p, m);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * geo.var_cond).sqrt();
    for raw in raws {
        // Prefix draw Z_prefix = omega_prefix + chol * raw.
        let z_prefix = if k == 0 {
            DMatrix::zeros(0, m)
        } else {
            let mut z = geo.chol_l.as_ref().unwrap() * raw;
            for a in 0..m {
                for l in 0..k {
                    z[(l, a)] += omega[(l, a)];
                }
            }
            z
        };
        let blocks: Vec<DMatrix<f64>> = (0..k)
            .map(|l| DMatrix::from_fn(1, m, |_, a| z_prefix[(l, a)]))
            .collect();
        let b = mixing_prefix(cfg, &blocks);
        let det = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
        if det.abs() < det_floor {
            continue;
        }
        let u1 = (b[(1, 1)] * target[0] - b[(1, 0)] * target[1]) / det;
        let u2 = (-b[(0, 1)] * target[0] + b[(0, 0)] * target[1]) / det;
        // Conditional mean of the final row given the prefix.
        let mut mu = [0.0; 2];
        for a in 0..m {
            let mut acc = omega[(k, a)];
            for l in 0..k {
                acc += geo.k_vec[l] * (z_prefix[(l, a)] - omega[(l, a)]);
            }
            mu[a] = acc;
        }
        for sgn in [1.0_f64, -1.0] {
            let zl = [sgn * u1, sgn * u2];
            let mut logw = 0.0;
            for a in 0..m {
                let d = zl[a] - mu[a];
                logw -= d * d / (2.0 * geo.var_cond);
            }
            let w = logw.exp() * norm * norm / det.abs();
            if w == 0.0 {
                continue;
            }
            den += w;
            den_sq += w * w;
            // xi = Vinv (Z - omega), token by token.
            for a in 0..m {
                for l in 0..p {
                    let mut acc = 0.0;
                    for lp in 0..p {
                        let z_la = if lp < k { z_prefix[(lp, a)] } else { zl[a] };
                        acc += geo.v_inv.get(l, lp) * (z_la - omega[(lp, a)]);
                    }
                    num[(l, a)] += w * acc;
                }
            }
        }
    }
    (den, num, den_sq)
}

/// Monte Carlo denoiser for rank-1 stacks of any depth with two tokens: the
/// prefix indices are sampled from their Gaussian marginal, the final layer
/// is solved through the logit inversion and reweighted by its conditional
/// density. Deterministic for a fixed stream; the Jacobian reuses the same
/// draws at shifted means.
pub fn gout_reduced_deep(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<DenoiserOutput> {
    cfg.validate()?;
    if cfg.m != 2 || cfg.p_layers.iter().any(|&p| p != 1) {
        return Err(Error::InvalidArgument(
            "deep denoiser needs two tokens and rank-1 layers".into(),
        ));
    }
    let p = cfg.p();
    pt.validate(p, 2)?;
    let (target, _jac) = label_solution(cfg.activation, y, params.reg_sqrt)?;
    let reg = regularize_v(&pt.v, params.reg_v)?;
    let geo = deep_geometry(p, 2, &reg)?;
    let n_draws = if geo.k == 0 { 1 } else { n_mc.max(1) };
    let mut rng = stream.rng();
    let raws: Vec<DMatrix<f64>> =
        (0..n_draws).map(|_| gaussian_matrix(&mut rng, geo.k, 2)).collect();

    let (den, num, den_sq) = deep_pass(cfg, &geo, target, &pt.omega, &raws, params.det_floor);
    if den <= 0.0 {
        return Err(Error::McDegenerate { ess: 0.0, n: n_draws });
    }
    let ess = den * den / den_sq;
    if geo.k > 0 && ess < n_draws as f64 / 100.0 {
        return Err(Error::McDegenerate { ess, n: n_draws });
    }
    let g = &num / den;

    let h = params.fd_step;
    let mut dg = GTensor::zeros(p, 2);
    for lp in 0..p {
        for b in 0..2 {
            let mut omega_p = pt.omega.clone();
            omega_p[(lp, b)] += h;
            let (den_p, num_p, _) =
                deep_pass(cfg, &geo, target, &omega_p, &raws, params.det_floor);
            let mut omega_m = pt.omega.clone();
            omega_m[(lp, b)] -= h;
            let (den_m, num_m, _) =
                deep_pass(cfg, &geo, target, &omega_m, &raws, params.det_floor);
            if den_p <= 0.0 || den_m <= 0.0 {
                return Err(Error::McDegenerate { ess: 0.0, n: n_draws });
            }
            for l in 0..p {
                for a in 0..2 {
                    let gp = num_p[(l, a)] / den_p;
                    let gm = num_m[(l, a)] / den_m;
                    dg.set(l, lp, a, b, (gp - gm) / (2.0 * h));
                }
            }
        }
    }
    Ok(DenoiserOutput { g, dg_domega: dg })
}

/// Reference denoiser by smoothed importance sampling: draw `Z` from the
/// channel Gaussian, weight by a Gaussian observation kernel of variance
/// `delta` on the informative label coordinates. Shares nothing with the
/// reduction routes except the channel definition itself; `reg_v` must match
/// the regularization of the route under test so both target the same
/// posterior.
pub fn mc_denoiser_oracle(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    smoothing: &SmoothedChannel,
    reg_v: f64,
    n_samples: usize,
    stream: RngStream,
) -> Result<McOracleOutput> {
    cfg.validate()?;
    if cfg.m != 2 {
        return Err(Error::InvalidArgument("oracle denoiser needs two tokens".into()));
    }
    let p = cfg.p();
    pt.validate(p, 2)?;
    validate_label(cfg.activation, y)?;
    let (y1, y2) = informative_pair(cfg.activation, y);
    let reg = regularize_v(&pt.v, reg_v)?;
    let chol = reg
        .v_reg
        .m()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("channel covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = stream.rng();
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut num = DMatrix::zeros(p, 2);
    // Log-weights are shifted by their running maximum for stability.
    let mut samples = Vec::with_capacity(n_samples);
    let mut max_logw = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let raw = gaussian_matrix(&mut rng, p, 2);
        let z = &pt.omega + &l * raw;
        let lab = smi_link_eval(cfg, &z)?;
        let (l1, l2) = informative_pair(cfg.activation, &lab);
        let logw = smoothing.log_kernel(l1 - y1, l2 - y2);
        max_logw = max_logw.max(logw);
        samples.push((z, logw));
    }
    if !max_logw.is_finite() {
        return Err(Error::McDegenerate { ess: 0.0, n: n_samples });
    }
    for (z, logw) in &samples {
        let w = (logw - max_logw).exp();
        sum_w += w;
        sum_w2 += w * w;
        let diff = z - &pt.omega;
        let xi = reg.v_inv.m() * diff;
        num += xi * w;
    }
    if sum_w <= 0.0 {
        return Err(Error::McDegenerate { ess: 0.0, n: n_samples });
    }
    Ok(McOracleOutput { g: num / sum_w, ess: sum_w * sum_w / sum_w2 })
}

/// Channel route selection for a model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Depth-2 rank-1 two-token channel: adaptive quadrature.
    Quadrature,
    /// Deeper rank-1 two-token stacks: Monte Carlo reduction.
    DeepMc,
}

/// Picks the denoiser route for `cfg`.
pub fn channel_kind(cfg: &ModelConfig) -> Result<ChannelKind> {
    cfg.validate()?;
    if cfg.depth == 2 && cfg.m == 2 && cfg.p_layers == [1, 1] {
        Ok(ChannelKind::Quadrature)
    } else if cfg.m == 2 && cfg.p_layers.iter().all(|&p| p == 1) {
        Ok(ChannelKind::DeepMc)
    } else {
        Err(Error::InvalidArgument(
            "no denoiser available for this architecture (need two tokens, rank-1 layers)"
                .into(),
        ))
    }
}

/// Posterior mean and Jacobian through the appropriate route. The stream is
/// consumed only by the Monte Carlo route.
pub fn denoise(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
    stream: RngStream,
) -> Result<DenoiserOutput> {
    match channel_kind(cfg)? {
        ChannelKind::Quadrature => gout_reduced_l2(cfg, y, pt, params),
        ChannelKind::DeepMc => gout_reduced_deep(cfg, y, pt, params, params.deep_n_mc, stream),
    }
}

/// Posterior mean only through the appropriate route.
pub fn denoise_mean(
    cfg: &ModelConfig,
    y: &DMatrix<f64>,
    pt: &ChannelPoint,
    params: &ChannelParams,
    stream: RngStream,
) -> Result<DMatrix<f64>> {
    match channel_kind(cfg)? {
        ChannelKind::Quadrature => gout_reduced_l2_mean(cfg, y, pt, params),
        ChannelKind::DeepMc => {
            gout_reduced_deep(cfg, y, pt, params, params.deep_n_mc, stream).map(|d| d.g)
        }
    }
}

/// Draws labels from the channel conditioned at overlap `q_fix` and returns
/// the per-sample derivative tensors of the denoiser.
///
/// The channel at overlap `Q` has means `omega = sqrt(Q) xi` and covariance
/// `V = I - Q`; the true index behind each label is `omega + sqrt(V) z`. At
/// `Q = I` the label determines the index and no denoiser exists.
pub fn g_tensor_at(
    cfg: &ModelConfig,
    q_fix: &SymMatrix,
    params: &ChannelParams,
    n_mc: usize,
    stream: RngStream,
) -> Result<Vec<GTensor>> {
    cfg.validate()?;
    let p = cfg.p();
    if q_fix.dim() != p {
        return Err(Error::InvalidArgument(format!(
            "overlap has dimension {}, expected {}",
            q_fix.dim(),
            p
        )));
    }
    let sq_q = q_fix.sqrt_psd()?;
    let v = &SymMatrix::identity(p) - q_fix;
    let max_eig = v.eigenvalues().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max_eig < 1e-10 {
        return Err(Error::DegenerateChannel);
    }
    let sq_v = v.sqrt_psd()?;
    (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let sub = stream.substream(i as u64);
            let mut rng = sub.rng();
            let xi = gaussian_matrix(&mut rng, p, cfg.m);
            let z = gaussian_matrix(&mut rng, p, cfg.m);
            let omega = sq_q.m() * &xi;
            let z_true = &omega + sq_v.m() * &z;
            let y = smi_link_eval(cfg, &z_true)?;
            let pt = ChannelPoint { omega, v: v.clone() };
            denoise(cfg, &y, &pt, params, sub.substream(u64::MAX / 2)).map(|d| d.dg_domega)
        })
        .collect()
}
