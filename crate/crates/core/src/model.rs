//! Tied-attention networks and their sequence multi-index form.
//!
//! A depth-`L` tied attention network maps `x in R^{D x M}` through
//!
//! ```text
//! x_0 = x
//! x_l = x_{l-1} (c I_M + act(x_{l-1}^T w_l^T w_l x_{l-1} / D)),  l < L
//! y   = act(x_{L-1}^T w_L^T w_L x_{L-1} / D)
//! ```
//!
//! where each layer's `w_l in R^{P_l x D}` plays both the query and the key
//! role and `c` is the skip-connection strength. Writing `Z_l = w_l x /
//! sqrt(D)`, the output depends on `x` only through the stacked index matrix
//! `Z in R^{P x M}`: `y = B_L(Z_1, ..., Z_L)` with the mixing recursion
//!
//! ```text
//! B_0 = I_M
//! B_l = B_{l-1} (c I_M + act(B_{l-1}^T Z_l^T Z_l B_{l-1})),  l < L
//! B_L = act(B_{L-1}^T Z_L^T Z_L B_{L-1})
//! ```
//!
//! [`deep_attention_forward`] evaluates the network recursion on data and
//! [`smi_link_eval`] evaluates the mixing recursion on an index matrix; the
//! two agree to floating-point accuracy, which the integration tests pin
//! down. All estimation code in the other modules works with the link form.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::smallmat::{gaussian_matrix, row_softmax, RngStream};

/// Per-layer attention nonlinearity applied to the M x M logit matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Row-wise softmax (standard attention).
    Softmax,
    /// Identity; keeps the logits as they are.
    Linear,
}

impl Activation {
    pub fn apply(&self, logits: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Softmax => row_softmax(logits),
            Activation::Linear => logits.clone(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Activation::Softmax),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?} (expected \"softmax\" or \"linear\")"
            ))),
        }
    }
}

/// Architecture of a tied attention network / sequence multi-index model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of attention layers `L`.
    pub depth: usize,
    /// Tokens per sequence `M`.
    pub m: usize,
    /// Per-layer ranks `P_l`; length must equal `depth`.
    pub p_layers: Vec<usize>,
    /// Skip-connection strength `c`.
    pub c: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// Rank-1 layers at depth `L` with `M` tokens; the setting used by the
    /// closed-form channel and all experiments.
    pub fn rank_one(depth: usize, m: usize, c: f64, activation: Activation) -> Self {
        ModelConfig { depth, m, p_layers: vec![1; depth], c, activation }
    }

    /// Total index rank `P = sum_l P_l`.
    pub fn p(&self) -> usize {
        self.p_layers.iter().sum()
    }

    /// Output dimension `K = M^2` when the label matrix is flattened.
    pub fn k(&self) -> usize {
        self.m * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        if self.m < 2 {
            return Err(Error::InvalidArgument("token count M must be at least 2".into()));
        }
        if self.p_layers.len() != self.depth {
            return Err(Error::InvalidArgument(format!(
                "p_layers has {} entries for depth {}",
                self.p_layers.len(),
                self.depth
            )));
        }
        if self.p_layers.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArgument("per-layer ranks must be positive".into()));
        }
        if !self.c.is_finite() || self.c < 0.0 {
            return Err(Error::InvalidArgument("skip strength c must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Row ranges of each layer's block inside the stacked `P x D` weights.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.depth);
        let mut start = 0;
        for &p in &self.p_layers {
            out.push(start..start + p);
            start += p;
        }
        out
    }
}

/// The per-layer weights `w_l in R^{P_l x D}` of a tied attention network.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    pub layers: Vec<DMatrix<f64>>,
}

impl WeightStack {
    /// Independent standard normal entries for every layer.
    pub fn sample(cfg: &ModelConfig, d: usize, rng: &mut impl rand::Rng) -> Self {
        let layers = cfg.p_layers.iter().map(|&p| gaussian_matrix(rng, p, d)).collect();
        WeightStack { layers }
    }

    pub fn d(&self) -> usize {
        self.layers.first().map_or(0, |w| w.ncols())
    }

    /// All layers stacked into one `P x D` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let d = self.d();
        let p: usize = self.layers.iter().map(|w| w.nrows()).sum();
        let mut out = DMatrix::zeros(p, d);
        let mut row = 0;
        for w in &self.layers {
            out.view_mut((row, 0), (w.nrows(), d)).copy_from(w);
            row += w.nrows();
        }
        out
    }
}

/// The stacked index matrix `Z = W x / sqrt(D)`, of shape `P x M`.
pub type IndexMatrix = DMatrix<f64>;

/// One observed sequence and its label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Input sequence, `D x M`.
    pub x: DMatrix<f64>,
    /// Label `y = g(W* x / sqrt(D))`, `M x M`.
    pub y: DMatrix<f64>,
}

/// A labelled synthetic dataset drawn from a teacher network.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub d: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the dataset as CSV: a one-line `#` header recording the
    /// generating configuration, then one row per sample holding the
    /// flattened input (column-major) followed by the flattened label.
    pub fn export_csv(
        &self,
        cfg: &ModelConfig,
        seed: u64,
        out: &mut impl Write,
    ) -> std::io::Result<()> {
        let act = match cfg.activation {
            Activation::Softmax => "softmax",
            Activation::Linear => "linear",
        };
        writeln!(
            out,
            "# D={} M={} L={} P_layers={:?} c={} activation={} seed={}",
            self.d, cfg.m, cfg.depth, cfg.p_layers, cfg.c, act, seed
        )?;
        for s in &self.samples {
            let mut fields: Vec<String> = Vec::with_capacity(s.x.len() + s.y.len());
            fields.extend(s.x.iter().map(|v| format!("{v}")));
            fields.extend(s.y.iter().map(|v| format!("{v}")));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Advances the mixing recursion through the given index blocks using the
/// inner (skip-connected) rule only; with `k` blocks this yields `B_k` for
/// `k < L`. Called with all but the final block it produces the `B_{L-1}`
/// needed by the channel reduction.
pub fn mixing_prefix(cfg: &ModelConfig, z_blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut b = DMatrix::identity(cfg.m, cfg.m);
    for z in z_blocks {
        let zb = z * &b;
        let logits = zb.transpose() * &zb;
        b = &b * (DMatrix::identity(cfg.m, cfg.m) * cfg.c + cfg.activation.apply(&logits));
    }
    b
}

/// Full mixing recursion `B_L(Z_1, ..., Z_L)`: inner rule for layers
/// `1..L-1`, then the final layer applies the activation without skip.
pub fn mixing_recursion(cfg: &ModelConfig, z_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if z_blocks.len() != cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "expected {} index blocks, got {}",
            cfg.depth,
            z_blocks.len()
        )));
    }
    for (l, z) in z_blocks.iter().enumerate() {
        if z.nrows() != cfg.p_layers[l] || z.ncols() != cfg.m {
            return Err(Error::InvalidArgument(format!(
                "index block {} has shape {}x{}, expected {}x{}",
                l + 1,
                z.nrows(),
                z.ncols(),
                cfg.p_layers[l],
                cfg.m
            )));
        }
    }
    let b_prev = mixing_prefix(cfg, &z_blocks[..cfg.depth - 1]);
    let z_last = &z_blocks[cfg.depth - 1];
    let zb = z_last * &b_prev;
    Ok(cfg.activation.apply(&(zb.transpose() * &zb)))
}

/// Evaluates the link `g(Z)` on a stacked `P x M` index matrix by splitting
/// rows into per-layer blocks and running the mixing recursion.
pub fn smi_link_eval(cfg: &ModelConfig, z: &IndexMatrix) -> Result<DMatrix<f64>> {
    if z.nrows() != cfg.p() || z.ncols() != cfg.m {
        return Err(Error::InvalidArgument(format!(
            "index matrix has shape {}x{}, expected {}x{}",
            z.nrows(),
            z.ncols(),
            cfg.p(),
            cfg.m
        )));
    }
    let blocks: Vec<DMatrix<f64>> = cfg
        .layer_ranges()
        .into_iter()
        .map(|r| z.rows(r.start, r.end - r.start).clone_owned())
        .collect();
    mixing_recursion(cfg, &blocks)
}

/// Evaluates the network recursion on raw data: `y = g_W(x)` for
/// `x in R^{D x M}`.
pub fn deep_attention_forward(
    cfg: &ModelConfig,
    w: &WeightStack,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if w.layers.len() != cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "weight stack has {} layers for depth {}",
            w.layers.len(),
            cfg.depth
        )));
    }
    let d = x.nrows();
    if x.ncols() != cfg.m {
        return Err(Error::InvalidArgument(format!(
            "input has {} tokens, expected {}",
            x.ncols(),
            cfg.m
        )));
    }
    let mut xl = x.clone();
    for l in 0..cfg.depth - 1 {
        let t = &w.layers[l] * &xl;
        let logits = t.transpose() * &t / d as f64;
        xl = &xl * (DMatrix::identity(cfg.m, cfg.m) * cfg.c + cfg.activation.apply(&logits));
    }
    let t = &w.layers[cfg.depth - 1] * &xl;
    Ok(cfg.activation.apply(&(t.transpose() * &t / d as f64)))
}

/// Draws a teacher `W*` and `N = round(alpha * D)` labelled sequences with
/// standard normal inputs. Rounding is half away from zero, so
/// `alpha = 0.5, D = 101` gives `N = 51`.
pub fn sample_dataset(
    cfg: &ModelConfig,
    d: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<(WeightStack, Dataset)> {
    cfg.validate()?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be finite and positive".into()));
    }
    let n = (alpha * d as f64).round() as usize;
    let w = WeightStack::sample(cfg, d, &mut stream.substream(0).rng());
    let sqrt_d = (d as f64).sqrt();
    let w_stacked = w.stacked();
    let mut samples = Vec::with_capacity(n);
    for mu in 0..n {
        let mut rng = stream.substream(1 + mu as u64).rng();
        let x = gaussian_matrix(&mut rng, d, cfg.m);
        let z = &w_stacked * &x / sqrt_d;
        let y = smi_link_eval(cfg, &z)?;
        samples.push(SequenceSample { x, y });
    }
    Ok((w, Dataset { samples, d }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn softmax_cfg(depth: usize, c: f64) -> ModelConfig {
        ModelConfig::rank_one(depth, 2, c, Activation::Softmax)
    }

    #[test]
    fn zero_index_matrix_gives_uniform_attention() {
        // With Z = 0 every logit matrix vanishes: the first layer mixes with
        // c I + uniform(1/M) and the final softmax outputs all entries 1/M.
        let cfg = softmax_cfg(2, 1.0);
        let z = DMatrix::zeros(2, 2);
        let y = smi_link_eval(&cfg, &z).unwrap();
        for v in y.iter() {
            assert_relative_eq!(*v, 0.5, epsilon = 1e-15);
        }
        let b1 = mixing_prefix(&cfg, &[DMatrix::zeros(1, 2)]);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.5 } else { 0.5 };
                assert_relative_eq!(b1[(i, j)], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn depth_one_reduces_to_single_softmax_layer() {
        let cfg = softmax_cfg(1, 0.7);
        let z = DMatrix::from_row_slice(1, 2, &[0.3, -1.1]);
        let y = smi_link_eval(&cfg, &z).unwrap();
        let logits = z.transpose() * &z;
        assert_relative_eq!(y, row_softmax(&logits), epsilon = 1e-15);
    }

    #[test]
    fn label_rows_sum_to_one_under_softmax() {
        let cfg = softmax_cfg(3, 0.8);
        let mut rng = RngStream::new(5).rng();
        let z = gaussian_matrix(&mut rng, 3, 2);
        let y = smi_link_eval(&cfg, &z).unwrap();
        for r in 0..2 {
            let s: f64 = (0..2).map(|c| y[(r, c)]).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dataset_size_rounds_half_away_from_zero() {
        let cfg = softmax_cfg(2, 1.0);
        let (_, data) = sample_dataset(&cfg, 101, 0.5, RngStream::new(0)).unwrap();
        assert_eq!(data.len(), 51);
        let (_, data) = sample_dataset(&cfg, 10, 1.2, RngStream::new(0)).unwrap();
        assert_eq!(data.len(), 12);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let cfg = softmax_cfg(2, 1.0);
        let z = DMatrix::zeros(3, 2);
        assert!(smi_link_eval(&cfg, &z).is_err());
        let blocks = vec![DMatrix::zeros(1, 2)];
        assert!(mixing_recursion(&cfg, &blocks).is_err());
    }
}
