//! The five experiment subcommands.
//!
//! Every command is a pure function of the effective configuration and the
//! seed, deterministically mapping them to CSV bytes at the output path.
//! Metadata (the effective-config echo, summary statistics, and per-point
//! failure notes) rides along as `#`-prefixed comment lines so the files
//! stay trivially parseable by plotting scripts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use seqamp_core::gamp::{gamp_init, gamp_step, measure_overlaps, SideInfo};
use seqamp_core::model::sample_dataset;
use seqamp_core::se::{
    estimation_error, free_energy_objective, prediction_error, se_iterate_with_pool, SePool,
};
use seqamp_core::sgd::loss_and_grads;
use seqamp_core::smallmat::gaussian_matrix;
use seqamp_core::thresholds::phase_diagram;
use seqamp_core::{Error as CoreError, RngStream, SymMatrix};

use crate::config::ExperimentConfig;

/// A problem with the invocation or the configuration file, as opposed to a
/// numerical failure during the experiment. Mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// Shortest round-trip decimal form, so reruns are byte-comparable and the
/// values re-parse exactly.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Serialized CSV writer: comment lines, one header, data rows.
struct CsvOut {
    w: BufWriter<File>,
}

impl CsvOut {
    fn create(path: &Path, echo: &str, header: &str) -> Result<CsvOut> {
        let file = File::create(path)
            .with_context(|| format!("cannot create output file {}", path.display()))?;
        let mut w = BufWriter::new(file);
        w.write_all(echo.as_bytes())?;
        writeln!(w, "{header}")?;
        Ok(CsvOut { w })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    fn comment(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "# {line}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Upper-triangle column names `Q11,Q12,...` for a `P x P` symmetric matrix.
fn upper_tri_header(p: usize) -> String {
    let mut s = String::new();
    for i in 0..p {
        for j in i..p {
            write!(s, ",Q{}{}", i + 1, j + 1).unwrap();
        }
    }
    s
}

fn upper_tri_cells(q: &SymMatrix) -> String {
    let mut s = String::new();
    for i in 0..q.dim() {
        for j in i..q.dim() {
            write!(s, ",{}", fmt(q.m()[(i, j)])).unwrap();
        }
    }
    s
}

/// Thresholds at the single configured skip strength.
pub fn cmd_threshold(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let grid = vec![cfg.model.c];
    phase_points(cfg, &grid, out, "threshold")
}

/// Thresholds across the configured grid of skip strengths.
pub fn cmd_phase(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.threshold.c_grid.is_empty() {
        return Err(UsageError("threshold.c_grid is empty; nothing to sweep".into()).into());
    }
    let grid = cfg.threshold.c_grid.clone();
    phase_points(cfg, &grid, out, "phase")
}

fn phase_points(cfg: &ExperimentConfig, grid: &[f64], out: &Path, name: &str) -> Result<()> {
    let model = cfg.model();
    let ch = cfg.channel();
    let stream = RngStream::new(cfg.data.seed);
    let points = phase_diagram(&model, grid, &ch, cfg.threshold.n_mc, stream)?;

    let header = "c,alpha1,alpha1_stderr,alpha2,alpha2_stderr,maximizing_layer";
    let mut csv = CsvOut::create(out, &cfg.echo_comment(name)?, header)?;
    for pt in &points {
        let (a1, a1_se, layer) = match &pt.alpha1 {
            Ok(est) if est.alpha.is_finite() => {
                (fmt(est.alpha), fmt(est.stderr), est.maximizing_layer.to_string())
            }
            Ok(est) => (String::new(), String::new(), est.maximizing_layer.to_string()),
            Err(e) => {
                csv.comment(&format!("c={}: alpha1 failed: {e}", fmt(pt.c)))?;
                (String::new(), String::new(), String::new())
            }
        };
        let (a2, a2_se) = match &pt.alpha2 {
            Ok(est) if est.alpha.is_finite() => (fmt(est.alpha), fmt(est.stderr)),
            Ok(_) => (String::new(), String::new()),
            Err(e) => {
                csv.comment(&format!("c={}: alpha2 failed: {e}", fmt(pt.c)))?;
                (String::new(), String::new())
            }
        };
        csv.row(&format!("{},{a1},{a1_se},{a2},{a2_se},{layer}", fmt(pt.c)))?;
    }
    csv.finish()
}

/// State-evolution sweep over `data.alpha`, warm-starting each point from
/// the previous fixed point and sharing one Monte Carlo pool so the curve
/// has no sample-to-sample jitter.
pub fn cmd_se(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.model();
    let ch = cfg.channel();
    let se = cfg.se();
    let p = model.p();
    let stream = RngStream::new(cfg.data.seed);
    let pool = SePool::draw(p, model.m, se.n_mc, stream.substream(0));

    let header = format!(
        "alpha,c,t_converged{},pred_error,est_error,free_energy",
        upper_tri_header(p)
    );
    let mut csv = CsvOut::create(out, &cfg.echo_comment("se")?, &header)?;
    let blank_q: String = ",".repeat(p * (p + 1) / 2);

    let mut q = SymMatrix::zeros(p);
    for (i, &alpha) in cfg.data.alpha.iter().enumerate() {
        match se_iterate_with_pool(&q, &model, alpha, &ch, &se, &pool) {
            Ok(run) => {
                q = run.q.clone();
                let t_conv =
                    if run.converged { run.iterations.to_string() } else { String::new() };
                if !run.converged {
                    csv.comment(&format!(
                        "alpha={}: no convergence in {} iterations (residual {})",
                        fmt(alpha),
                        run.iterations,
                        fmt(*run.residuals.last().unwrap_or(&f64::NAN)),
                    ))?;
                }
                let pred =
                    prediction_error(&run.q, &model, se.n_mc, stream.substream(1000 + i as u64))?;
                let est = estimation_error(&run.q);
                let fe = free_energy_objective(&run.q, alpha, &model, &ch, &pool)?;
                csv.row(&format!(
                    "{},{},{t_conv}{},{},{},{}",
                    fmt(alpha),
                    fmt(model.c),
                    upper_tri_cells(&run.q),
                    fmt(pred),
                    fmt(est),
                    fmt(fe.value),
                ))?;
            }
            Err(e) => {
                csv.comment(&format!("alpha={}: {e}", fmt(alpha)))?;
                csv.row(&format!("{},{},{blank_q},,,", fmt(alpha), fmt(model.c)))?;
            }
        }
    }
    csv.finish()
}

/// Message-passing runs: fresh teacher and data per run, per-iteration
/// overlap rows, and a per-alpha summary of the converged runs.
pub fn cmd_gamp(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.model();
    let ch = cfg.channel();
    let p = model.p();
    let gamp = &cfg.gamp;
    let base = RngStream::new(cfg.data.seed);

    let mut header = String::from("alpha,run_id,t");
    for i in 0..p {
        for j in 0..p {
            write!(header, ",Q{}{}", i + 1, j + 1).unwrap();
        }
    }
    for l in 0..p {
        write!(header, ",C{}", l + 1).unwrap();
    }
    header.push_str(",pred_error");
    let mut csv = CsvOut::create(out, &cfg.echo_comment("gamp")?, &header)?;

    let mut first_failure: Option<anyhow::Error> = None;
    'sweep: for (ai, &alpha) in cfg.data.alpha.iter().enumerate() {
        let mut finals: Vec<(DMatrix<f64>, Option<f64>)> = Vec::new();
        let mut n_converged = 0usize;
        for run_id in 0..gamp.runs {
            let inst = base.substream(ai as u64).substream(run_id as u64);
            let (w_star, data) = sample_dataset(&model, cfg.data.d, alpha, inst.substream(0))?;
            let side = if gamp.side_lambda > 0.0 {
                Some(SideInfo::sample(
                    &w_star.stacked(),
                    gamp.side_lambda,
                    inst.substream(1),
                )?)
            } else {
                None
            };
            let warm = side.is_some();
            let mut state =
                gamp_init(&model, &data, side.as_ref(), warm, inst.substream(2))?;
            let run_stream = inst.substream(3);
            let metric_stream = inst.substream(4);

            let pred_mc = cfg.se.n_mc;
            let write_metrics = |state: &seqamp_core::gamp::GampState,
                                     csv: &mut CsvOut,
                                     ms: RngStream|
             -> Result<(DMatrix<f64>, Option<f64>)> {
                let m = measure_overlaps(state, &w_star, pred_mc, &model, ms)?;
                let mut line = format!("{},{run_id},{}", fmt(alpha), m.t);
                for i in 0..p {
                    for j in 0..p {
                        write!(line, ",{}", fmt(m.q_cross[(i, j)])).unwrap();
                    }
                }
                for c in &m.cosines {
                    write!(line, ",{}", fmt(*c)).unwrap();
                }
                write!(line, ",{}", m.pred_error.map(fmt).unwrap_or_default()).unwrap();
                csv.row(&line)?;
                Ok((m.q_cross, m.pred_error))
            };

            let (mut prev_q, mut last_pred) =
                write_metrics(&state, &mut csv, metric_stream.substream(0))?;
            let mut converged = false;
            let mut run_error: Option<anyhow::Error> = None;
            for t in 0..gamp.t_max {
                if let Err(e) =
                    gamp_step(&model, &data, &mut state, side.as_ref(), &ch, gamp.damping, run_stream)
                {
                    csv.comment(&format!(
                        "alpha={} run={run_id}: aborted at iteration {}: {e}",
                        fmt(alpha),
                        t + 1
                    ))?;
                    run_error = Some(e.into());
                    break;
                }
                let (q, pred) =
                    write_metrics(&state, &mut csv, metric_stream.substream(1 + t as u64))?;
                let resid = (&q - &prev_q).norm();
                prev_q = q;
                last_pred = pred;
                if resid < gamp.tol {
                    converged = true;
                    break;
                }
            }
            if let Some(e) = run_error {
                first_failure = Some(e);
                break 'sweep;
            }
            if converged {
                n_converged += 1;
                finals.push((prev_q, last_pred));
            }
        }
        let mut summary = format!(
            "summary alpha={}: converged {}/{} runs",
            fmt(alpha),
            n_converged,
            gamp.runs
        );
        if !finals.is_empty() {
            for l in 0..p {
                let vals: Vec<f64> = finals.iter().map(|(q, _)| q[(l, l)]).collect();
                let (mean, se) = mean_stderr(&vals);
                write!(summary, ", Q{}{} {} +- {}", l + 1, l + 1, fmt(mean), fmt(se)).unwrap();
            }
            let preds: Vec<f64> = finals.iter().filter_map(|(_, p)| *p).collect();
            if !preds.is_empty() {
                let (mean, se) = mean_stderr(&preds);
                write!(summary, ", pred_error {} +- {}", fmt(mean), fmt(se)).unwrap();
            }
        }
        csv.comment(&summary)?;
    }
    csv.finish()?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Minibatch SGD trajectories over several seeds, each with a fresh teacher
/// and dataset; a step-0 row records the loss and cosines at initialization.
pub fn cmd_sgd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.model();
    let sgd = cfg.sgd();
    if cfg.data.alpha.len() != 1 {
        return Err(UsageError(format!(
            "sgd runs at a single sample ratio; data.alpha has {} entries",
            cfg.data.alpha.len()
        ))
        .into());
    }
    let alpha = cfg.data.alpha[0];
    let depth = model.depth;

    let mut header = String::from("seed,step,epoch,loss");
    for l in 0..depth {
        write!(header, ",C{}", l + 1).unwrap();
    }
    header.push_str(",status");
    let mut csv = CsvOut::create(out, &cfg.echo_comment("sgd")?, &header)?;

    for seed_idx in 0..cfg.sgd.seeds {
        let st = RngStream::new(cfg.data.seed).substream(seed_idx as u64);
        let (w_star, data) = sample_dataset(&model, cfg.data.d, alpha, st.substream(0))?;
        let run_stream = st.substream(1);

        // The run initializes its weights from substream 0 of its stream as
        // documented; replay that draw to report the starting point.
        let mut init_rng = run_stream.substream(0).rng();
        let w0: Vec<DMatrix<f64>> = model
            .p_layers
            .iter()
            .map(|&pl| gaussian_matrix(&mut init_rng, pl, data.d))
            .collect();
        let batch: Vec<&seqamp_core::SequenceSample> = data.samples.iter().collect();
        let (loss_sum, _) = loss_and_grads(&model, &w0, &batch)?;
        let mut line = format!("{seed_idx},0,0,{}", fmt(loss_sum / batch.len() as f64));
        for (est, truth) in w0.iter().zip(&w_star.layers) {
            let dot: f64 = est.iter().zip(truth.iter()).map(|(a, b)| a * b).sum();
            write!(line, ",{}", fmt(dot.abs() / (est.norm() * truth.norm()))).unwrap();
        }
        line.push_str(",ok");
        csv.row(&line)?;

        match seqamp_core::sgd::sgd_run(&model, &data, &w_star, &sgd, run_stream) {
            Ok(run) => {
                for r in &run.records {
                    let mut line =
                        format!("{seed_idx},{},{},{}", r.step, r.epoch, fmt(r.loss));
                    for c in &r.cosines {
                        write!(line, ",{}", fmt(*c)).unwrap();
                    }
                    line.push_str(",ok");
                    csv.row(&line)?;
                }
            }
            Err(CoreError::Diverged(msg)) => {
                csv.comment(&format!("seed {seed_idx} diverged: {msg}"))?;
                let blanks = ",".repeat(depth + 2);
                csv.row(&format!("{seed_idx},{blanks},diverged"))?;
            }
            Err(e) => {
                csv.finish()?;
                return Err(e.into());
            }
        }
    }
    csv.finish()
}
