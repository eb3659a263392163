//! Minibatch SGD on the squared label loss, the gradient-descent baseline
//! against which message passing is compared.
//!
//! The model is the tied attention network itself (weights enter both sides
//! of each logit product), so the gradients are hand-derived reverse-mode
//! passes through the layer recursion:
//!
//! ```text
//! x_l = x_{l-1} (c I + act(z_lT z_l)),   z_l = w_l x_{l-1} / sqrt(D),
//! yhat = act(z_LT z_L),
//! ```
//!
//! with the tied occurrences of `z_l` in `z_lT z_l` contributing
//! `z_l (dS + dST)` to the logit gradient. The update is plain SGD with
//! decoupled weight decay,
//!
//! ```text
//! w <- w - eta * grad - wd * w,
//! ```
//!
//! where `grad` is the batch-mean gradient, and each batch is reused for a
//! fixed number of consecutive steps before the sampler moves on.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Activation, Dataset, ModelConfig, SequenceSample, WeightStack};
use crate::smallmat::{gaussian_matrix, RngStream};

/// Optimizer settings. Defaults follow the reference experiment
/// (`eta = 15`, weight decay `1.4e-4`, batch 200 reused 3 times).
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub eta: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Consecutive gradient steps per batch.
    pub reuse: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { eta: 15.0, weight_decay: 1.4e-4, batch_size: 200, reuse: 3, epochs: 40 }
    }
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate and weight decay must be nonnegative".into(),
            ));
        }
        if self.batch_size == 0 || self.reuse == 0 {
            return Err(Error::InvalidArgument("batch size and reuse must be >= 1".into()));
        }
        Ok(())
    }
}

/// One recorded step.
#[derive(Debug, Clone)]
pub struct SgdRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch-mean loss at the weights before the step.
    pub loss: f64,
    /// Per-layer cosine similarity to the teacher after the step.
    pub cosines: Vec<f64>,
}

/// A finished run: the trajectory and the final weights.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub records: Vec<SgdRecord>,
    pub weights: Vec<DMatrix<f64>>,
}

fn activation_backward(act: Activation, act_out: &DMatrix<f64>, up: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Linear => up.clone(),
        Activation::Softmax => {
            let mut out = DMatrix::zeros(up.nrows(), up.ncols());
            for r in 0..up.nrows() {
                let mut dot = 0.0;
                for k in 0..up.ncols() {
                    dot += up[(r, k)] * act_out[(r, k)];
                }
                for j in 0..up.ncols() {
                    out[(r, j)] = act_out[(r, j)] * (up[(r, j)] - dot);
                }
            }
            out
        }
    }
}

/// Forward pass through the network recursion plus the squared loss and its
/// gradient for one sample.
fn sample_loss_and_grads(
    cfg: &ModelConfig,
    w: &[DMatrix<f64>],
    sample: &SequenceSample,
) -> (f64, Vec<DMatrix<f64>>) {
    let depth = cfg.depth;
    let sd = (sample.x.nrows() as f64).sqrt();
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    let mut zs: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    xs.push(sample.x.clone());
    for l in 0..depth {
        let z = &w[l] * &xs[l] / sd;
        let logits = z.transpose() * &z;
        let a = cfg.activation.apply(&logits);
        zs.push(z);
        if l + 1 < depth {
            let mut b = a.clone();
            for i in 0..cfg.m {
                b[(i, i)] += cfg.c;
            }
            xs.push(&xs[l] * &b);
        }
        acts.push(a);
    }
    let y_hat = &acts[depth - 1];
    let resid = y_hat - &sample.y;
    let loss = resid.iter().map(|v| v * v).sum::<f64>();

    let mut grads: Vec<DMatrix<f64>> = w.iter().map(|wl| DMatrix::zeros(wl.nrows(), wl.ncols())).collect();
    let d_y = resid * 2.0;
    let d_s = activation_backward(cfg.activation, y_hat, &d_y);
    let d_z = &zs[depth - 1] * (&d_s + d_s.transpose());
    grads[depth - 1] += &d_z * xs[depth - 1].transpose() / sd;
    let mut d_x = w[depth - 1].transpose() * &d_z / sd;
    for l in (0..depth - 1).rev() {
        // x_{l+1} = xs[l] * (c I + acts[l]); incoming d_x is w.r.t. x_{l+1}.
        let d_b = xs[l].transpose() * &d_x;
        let mut b = acts[l].clone();
        for i in 0..cfg.m {
            b[(i, i)] += cfg.c;
        }
        let mut d_x_lower = &d_x * b.transpose();
        let d_s = activation_backward(cfg.activation, &acts[l], &d_b);
        let d_z = &zs[l] * (&d_s + d_s.transpose());
        grads[l] += &d_z * xs[l].transpose() / sd;
        d_x_lower += w[l].transpose() * &d_z / sd;
        d_x = d_x_lower;
    }
    (loss, grads)
}

/// Batch-summed loss and gradients for the current weights.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    w: &[DMatrix<f64>],
    batch: &[&SequenceSample],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    cfg.validate()?;
    if w.len() != cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "expected {} weight blocks, got {}",
            cfg.depth,
            w.len()
        )));
    }
    for (l, wl) in w.iter().enumerate() {
        if wl.nrows() != cfg.p_layers[l] {
            return Err(Error::InvalidArgument(format!(
                "weight block {} has {} rows, expected {}",
                l + 1,
                wl.nrows(),
                cfg.p_layers[l]
            )));
        }
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<DMatrix<f64>>)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(cfg, w, s))
        .collect();
    let mut loss = 0.0;
    let mut grads: Vec<DMatrix<f64>> =
        w.iter().map(|wl| DMatrix::zeros(wl.nrows(), wl.ncols())).collect();
    for (l_s, g_s) in parts {
        loss += l_s;
        for (g, gs) in grads.iter_mut().zip(g_s) {
            *g += gs;
        }
    }
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { context: "loss and gradients" });
    }
    Ok((loss, grads))
}

fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { context: "cosine similarity" });
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot.abs() / (na * nb))
}

/// Runs minibatch SGD with weight decay and batch reuse, recording the loss
/// and the per-layer teacher cosines after every step. Weights start as
/// i.i.d. standard normals, matching the scale of the generative prior.
pub fn sgd_run(
    cfg: &ModelConfig,
    data: &Dataset,
    w_star: &WeightStack,
    sgd: &SgdConfig,
    stream: RngStream,
) -> Result<SgdRun> {
    cfg.validate()?;
    sgd.validate()?;
    if data.len() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = stream.substream(0).rng();
    let mut w: Vec<DMatrix<f64>> = cfg
        .p_layers
        .iter()
        .map(|&pl| gaussian_matrix(&mut rng, pl, data.d))
        .collect();
    let mut records = Vec::new();
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..sgd.epochs {
        let mut shuffle_rng = stream.substream(1 + epoch as u64).rng();
        for i in (1..indices.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            indices.swap(i, j);
        }
        for chunk in indices.chunks(sgd.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            for _ in 0..sgd.reuse {
                let (loss_sum, grads) = loss_and_grads(cfg, &w, &batch)?;
                let loss = loss_sum / batch.len() as f64;
                if loss > 1e6 {
                    return Err(Error::Diverged(format!("batch loss {loss:.3e} at step {step}")));
                }
                let scale = sgd.eta / batch.len() as f64;
                for (wl, gl) in w.iter_mut().zip(&grads) {
                    *wl -= gl * scale + &*wl * sgd.weight_decay;
                }
                step += 1;
                let cosines = w
                    .iter()
                    .zip(&w_star.layers)
                    .map(|(est, tr)| cosine(est, tr))
                    .collect::<Result<Vec<f64>>>()?;
                records.push(SgdRecord { step, epoch, loss, cosines });
            }
        }
    }
    Ok(SgdRun { records, weights: w })
}
