//! Experiment configuration: a TOML document with one section per concern.
//!
//! Every key has a default, so an empty file is a valid configuration;
//! unknown keys are hard errors so that typos cannot silently fall back to
//! defaults. The effective (post-default) document is echoed into every
//! output file, which is enough to re-run the experiment exactly.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Deserializer, Serialize};
use seqamp_core::channel::ChannelParams;
use seqamp_core::se::SeConfig;
use seqamp_core::sgd::SgdConfig;
use seqamp_core::{Activation, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub gamp: GampSection,
    pub se: SeSection,
    pub quad: QuadSection,
    pub fd: FdSection,
    pub threshold: ThresholdSection,
    pub sgd: SgdSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// Per-layer ranks; must have length `L`.
    #[serde(rename = "P")]
    pub p_layers: Vec<usize>,
    pub c: f64,
    pub activation: ActivationKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            depth: 2,
            m: 2,
            p_layers: vec![1, 1],
            c: 1.0,
            activation: ActivationKind::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Softmax,
    Linear,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Activation {
        match k {
            ActivationKind::Softmax => Activation::Softmax,
            ActivationKind::Linear => Activation::Linear,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(rename = "D")]
    pub d: usize,
    /// Sample-complexity sweep; a bare number is read as a one-point sweep.
    #[serde(deserialize_with = "number_or_list")]
    pub alpha: Vec<f64>,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { d: 1000, alpha: vec![1.0], seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GampSection {
    pub t_max: usize,
    pub tol: f64,
    pub damping: f64,
    pub side_lambda: f64,
    pub runs: usize,
}

impl Default for GampSection {
    fn default() -> Self {
        GampSection { t_max: 200, tol: 1e-6, damping: 1.0, side_lambda: 1e-3, runs: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeSection {
    pub n_mc: usize,
    pub t_max: usize,
    pub tol: f64,
    pub lambda: f64,
}

impl Default for SeSection {
    fn default() -> Self {
        SeSection { n_mc: 1440, t_max: 200, tol: 1e-6, lambda: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadSection {
    pub lo: f64,
    pub hi: f64,
    pub abs_tol: f64,
    pub reg_v: f64,
    pub reg_sqrt: f64,
}

impl Default for QuadSection {
    fn default() -> Self {
        QuadSection { lo: -3.0, hi: 3.0, abs_tol: 1e-8, reg_v: 1e-3, reg_sqrt: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdSection {
    pub step: f64,
}

impl Default for FdSection {
    fn default() -> Self {
        FdSection { step: 1e-5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    pub c_grid: Vec<f64>,
    pub n_mc: usize,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection { c_grid: vec![1.0], n_mc: 1440 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub eta: f64,
    pub wd: f64,
    pub batch: usize,
    pub reuse: usize,
    pub epochs: usize,
    pub seeds: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdSection { eta: 15.0, wd: 1.4e-4, batch: 200, reuse: 3, epochs: 40, seeds: 8 }
    }
}

fn number_or_list<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumberOrList {
        Number(f64),
        List(Vec<f64>),
    }
    Ok(match NumberOrList::deserialize(de)? {
        NumberOrList::Number(x) => vec![x],
        NumberOrList::List(v) => v,
    })
}

impl ExperimentConfig {
    pub fn load(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid configuration")?;
        if cfg.model.p_layers.len() != cfg.model.depth {
            bail!(
                "model.P lists {} ranks but model.L = {}",
                cfg.model.p_layers.len(),
                cfg.model.depth
            );
        }
        if cfg.data.alpha.is_empty() {
            bail!("data.alpha must contain at least one point");
        }
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            depth: self.model.depth,
            m: self.model.m,
            p_layers: self.model.p_layers.clone(),
            c: self.model.c,
            activation: self.model.activation.into(),
        }
    }

    pub fn channel(&self) -> ChannelParams {
        ChannelParams {
            quad_lo: self.quad.lo,
            quad_hi: self.quad.hi,
            quad_abs_tol: self.quad.abs_tol,
            reg_v: self.quad.reg_v,
            reg_sqrt: self.quad.reg_sqrt,
            fd_step: self.fd.step,
            ..ChannelParams::default()
        }
    }

    pub fn se(&self) -> SeConfig {
        SeConfig {
            n_mc: self.se.n_mc,
            t_max: self.se.t_max,
            tol: self.se.tol,
            lambda: self.se.lambda,
            ..SeConfig::default()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            eta: self.sgd.eta,
            weight_decay: self.sgd.wd,
            batch_size: self.sgd.batch,
            reuse: self.sgd.reuse,
            epochs: self.sgd.epochs,
        }
    }

    /// The effective document, one `# `-prefixed line per TOML line.
    pub fn echo_comment(&self, command: &str) -> Result<String> {
        let doc = toml::to_string(self).context("serializing effective configuration")?;
        let mut out = format!("# seqamp {command}\n");
        for line in doc.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        Ok(out)
    }
}
