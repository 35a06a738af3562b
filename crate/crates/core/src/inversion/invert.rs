use std::fmt;

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{InversionConfig, Mode};
use super::cost::{CostProgram, CostTerms, Search};
use super::optim::{scheduled_lr, Adam};
use super::task::InversionTask;
use crate::error::{Error, Result};
use crate::models::GeneratorModel;

/// Costs above this abort a restart, unless the phase already started
/// higher (a heavy penalty on the starting point is not a blow-up).
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    X,
    Z,
    W,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::X => "x",
            Phase::Z => "z",
            Phase::W => "w",
        })
    }
}

/// One cost evaluation. Iterations count from 0 within a phase; the entry
/// at `iteration == n` is the cost at the phase's end point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub restart: usize,
    pub iteration: usize,
    pub phase: Phase,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartRecord {
    pub restart: usize,
    pub seed: u64,
    pub final_cost: Option<f64>,
    pub error: Option<String>,
}

/// The reconstruction chosen among restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEstimate {
    /// Reconstructed images, clamped to `[0, 1]`.
    pub images: Vec<Tensor>,
    /// `[B, k]` latent codes in generator modes.
    pub latents: Option<Tensor>,
    /// Per-instance generator parameters after parameter search.
    pub weights: Option<Vec<Vec<Tensor>>>,
    pub final_cost: f64,
    /// Cost curve of the chosen restart.
    pub curve: Vec<CurvePoint>,
    /// Index of the chosen restart.
    pub restart: usize,
    pub restarts: Vec<RestartRecord>,
    /// Curves of every restart that ran, including aborted ones.
    pub all_curves: Vec<CurvePoint>,
}

impl BatchEstimate {
    /// Final cost of each phase of the chosen restart, in order.
    pub fn phase_ends(&self) -> Vec<(Phase, f64)> {
        let mut out: Vec<(Phase, f64)> = Vec::new();
        for p in &self.curve {
            match out.last_mut() {
                Some(last) if last.0 == p.phase => last.1 = p.cost,
                _ => out.push((p.phase, p.cost)),
            }
        }
        out
    }
}

/// Summed cost over several programs sharing one set of variables.
pub(crate) fn evaluate_sum(progs: &[CostProgram], vars: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for p in progs {
        let (c, g) = p.evaluate(vars)?;
        total += c;
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                        *u += v;
                    }
                }
                a
            }
        });
    }
    Ok((total, acc.unwrap_or_default()))
}

fn check_cost(c: f64, start: f64) -> Result<()> {
    if c.is_finite() && c <= DIVERGENCE_LIMIT.max(start) {
        Ok(())
    } else {
        Err(Error::Diverged(c))
    }
}

/// Runs Adam with the step schedule for `iterations` steps, appending
/// `iterations + 1` cost evaluations to `curve`.
pub(crate) fn run_phase(
    progs: &[CostProgram],
    vars: &mut [Tensor],
    lr: f64,
    iterations: usize,
    tag: (usize, Phase),
    curve: &mut Vec<CurvePoint>,
) -> Result<f64> {
    let mut opt = Adam::new(vars);
    let mut start = f64::NEG_INFINITY;
    for it in 0..=iterations {
        let (c, g) = if it == iterations {
            (progs.iter().map(|p| p.cost(vars)).sum::<Result<f64>>()?, Vec::new())
        } else {
            evaluate_sum(progs, vars)?
        };
        curve.push(CurvePoint { restart: tag.0, iteration: it, phase: tag.1, cost: c });
        if it == 0 {
            start = c;
        }
        check_cost(c, start)?;
        if it == iterations {
            return Ok(c);
        }
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(f64::NAN));
        }
        opt.step(vars, &g, scheduled_lr(lr, it, iterations));
    }
    unreachable!("loop returns at the last iteration")
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

fn programs(tasks: &[InversionTask], search: &Search, terms: &CostTerms) -> Result<Vec<CostProgram>> {
    tasks.iter().map(|t| CostProgram::new(t, search.clone(), terms)).collect()
}

struct Outcome {
    images: Tensor,
    latents: Option<Tensor>,
    weights: Option<Vec<Vec<Tensor>>>,
    final_cost: f64,
}

fn run_restart(
    tasks: &[InversionTask],
    cfg: &InversionConfig,
    generator: Option<&GeneratorModel>,
    restart: usize,
    curve: &mut Vec<CurvePoint>,
) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
    let terms = CostTerms::from_config(cfg);
    let b = tasks[0].batch();
    let m = tasks[0].model.input_dim();
    let gen = || generator.ok_or_else(|| Error::MissingGenerator(cfg.mode.to_string()));

    if cfg.mode == Mode::X {
        let data = (0..b * m).map(|_| rng.random::<f64>()).collect();
        let mut vars = vec![Tensor::new(vec![b, m], data)?];
        let progs = programs(tasks, &Search::Input, &terms)?;
        let c = run_phase(&progs, &mut vars, cfg.eta_x, cfg.iterations, (restart, Phase::X), curve)?;
        let images = vars.pop().expect("one variable");
        return Ok(Outcome { images, latents: None, weights: None, final_cost: c });
    }

    let g = gen()?;
    let mut z = gaussian(&mut rng, &[b, g.latent_dim()]);
    if cfg.mode != Mode::W {
        let progs = programs(tasks, &Search::Latent(g.clone()), &terms)?;
        let mut vars = vec![z];
        let final_cost = run_phase(&progs, &mut vars, cfg.eta_z, cfg.z_iterations, (restart, Phase::Z), curve)?;
        z = vars.pop().expect("one variable");
        if cfg.mode == Mode::Z {
            let images = progs[0].images(&[z.clone()])?;
            return Ok(Outcome { images, latents: Some(z), weights: None, final_cost });
        }
    }
    match cfg.mode {
        Mode::ZX => {
            let decoded = g.generate(&z)?;
            let progs = programs(tasks, &Search::Input, &terms)?;
            let mut vars = vec![decoded];
            let final_cost = run_phase(&progs, &mut vars, cfg.eta_x, cfg.iterations, (restart, Phase::X), curve)?;
            let images = vars.pop().expect("one variable");
            Ok(Outcome { images, latents: Some(z), weights: None, final_cost })
        }
        Mode::ZW | Mode::W => {
            let search = Search::PerInstanceWeights(g.clone(), z.clone());
            let progs = programs(tasks, &search, &terms)?;
            let mut vars: Vec<Tensor> = (0..b).flat_map(|_| g.params().iter().cloned()).collect();
            let final_cost = run_phase(&progs, &mut vars, cfg.eta_w, cfg.iterations, (restart, Phase::W), curve)?;
            let images = progs[0].images(&vars)?;
            let weights = vars.chunks(g.params().len()).map(<[Tensor]>::to_vec).collect();
            Ok(Outcome { images, latents: Some(z), weights: Some(weights), final_cost })
        }
        Mode::X | Mode::Z => unreachable!("handled above"),
    }
}

fn clamp_rows(images: &Tensor) -> Vec<Tensor> {
    let (b, m) = (images.shape()[0], images.shape()[1]);
    (0..b)
        .map(|j| {
            let row = images.data()[j * m..(j + 1) * m].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Tensor::new(vec![m], row).expect("finite")
        })
        .collect()
}

/// Reconstructs the batch behind one task's gradient, keeping the restart
/// with the smallest final cost.
pub fn invert(task: &InversionTask, cfg: &InversionConfig, generator: Option<&GeneratorModel>) -> Result<BatchEstimate> {
    invert_multi(std::slice::from_ref(task), cfg, generator)
}

/// Reconstructs one batch observed through several gradients by minimizing
/// the sum of the per-task costs.
pub fn invert_multi(
    tasks: &[InversionTask],
    cfg: &InversionConfig,
    generator: Option<&GeneratorModel>,
) -> Result<BatchEstimate> {
    let errs = cfg.validate("");
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let first = tasks.first().ok_or(Error::EmptyBatch)?;
    for t in tasks {
        t.validate()?;
        if t.batch() != first.batch() || t.labels != first.labels {
            return Err(Error::Shape("tasks must share batch size and labels".into()));
        }
        if t.model.input_dim() != first.model.input_dim() {
            return Err(Error::Shape("tasks must share the input dimension".into()));
        }
    }
    if cfg.mode.needs_generator() && generator.is_none() {
        return Err(Error::MissingGenerator(cfg.mode.to_string()));
    }

    let runs: Vec<(Result<Outcome>, Vec<CurvePoint>)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut curve = Vec::new();
            let out = run_restart(tasks, cfg, generator, r, &mut curve);
            (out, curve)
        })
        .collect();

    let mut records = Vec::new();
    let mut best: Option<(usize, Outcome)> = None;
    let mut all_curves = Vec::new();
    let mut curves = Vec::new();
    for (r, (out, curve)) in runs.into_iter().enumerate() {
        let seed = cfg.seed.wrapping_add(r as u64);
        all_curves.extend_from_slice(&curve);
        curves.push(curve);
        match out {
            Ok(o) => {
                records.push(RestartRecord { restart: r, seed, final_cost: Some(o.final_cost), error: None });
                if best.as_ref().is_none_or(|(_, b)| o.final_cost < b.final_cost) {
                    best = Some((r, o));
                }
            }
            Err(Error::Diverged(c)) => {
                log::warn!("restart {r} diverged (cost {c})");
                records.push(RestartRecord { restart: r, seed, final_cost: None, error: Some(format!("diverged: {c}")) });
            }
            Err(e) => return Err(e),
        }
    }
    let (restart, o) = best.ok_or(Error::AllRestartsDiverged)?;
    Ok(BatchEstimate {
        images: clamp_rows(&o.images),
        latents: o.latents,
        weights: o.weights,
        final_cost: o.final_cost,
        curve: std::mem::take(&mut curves[restart]),
        restart,
        restarts: records,
        all_curves,
    })
}
