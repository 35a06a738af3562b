//! Meta-learning a generator from gradient-inversion tasks alone.
//!
//! Each outer step samples `N` tasks, fits latent codes for each under the
//! current generator with an `ℓ2` penalty on the codes, takes `τ` plain
//! gradient steps on the generator weights with the codes frozen, then
//! moves the weights part of the way toward the adapted copy (Reptile).

use std::path::Path;

use autodiff::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::{derive_seed, TaskSet};
use crate::image::ImageShape;
use crate::inversion::{evaluate_sum, gaussian, run_phase, sgd_step, CostProgram, CostTerms, DiscrepancyKind};
use crate::inversion::{InversionTask, Phase, Search};
use crate::metrics::{encode_pnm, num};
use crate::models::GeneratorModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Tasks sampled per outer step (`N`).
    pub task_batch: usize,
    /// Data batch size every task must have (`B`).
    pub batch_size: usize,
    /// Local parameter steps (`τ`).
    pub local_steps: usize,
    /// Latent penalty `λ`.
    pub lambda: f64,
    /// Local step size `α`.
    pub alpha: f64,
    /// Interpolation factor `β`.
    pub beta: f64,
    pub outer_steps: usize,
    pub latent_iterations: usize,
    pub eta_z: f64,
    pub discrepancy: DiscrepancyKind,
    pub lambda_tv: f64,
    /// Fixed latent codes whose samples are logged.
    pub probes: usize,
    /// Probe samples are recorded every this many outer steps.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            task_batch: 8,
            batch_size: 4,
            local_steps: 5,
            lambda: 1e-3,
            alpha: 1e-3,
            beta: 0.5,
            outer_steps: 300,
            latent_iterations: 300,
            eta_z: 3e-2,
            discrepancy: DiscrepancyKind::NegCosine,
            lambda_tv: 1e-4,
            probes: 16,
            probe_every: 50,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(format!("{prefix}{msg}"));
            }
        };
        check(self.beta > 0.0 && self.beta <= 1.0, "beta must lie in (0, 1]");
        check(self.local_steps >= 1, "local_steps must be at least 1");
        check(self.task_batch >= 1, "task_batch must be at least 1");
        check(self.batch_size >= 1, "batch_size must be at least 1");
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be finite and non-negative");
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be finite and non-negative");
        check(self.eta_z > 0.0, "eta_z must be positive");
        check(self.lambda_tv >= 0.0, "lambda_tv must be non-negative");
        check(self.probe_every >= 1, "probe_every must be at least 1");
        errs
    }

    fn terms(&self, lambda_z: f64) -> CostTerms {
        CostTerms { lambda_z, lambda_tv: self.lambda_tv, ..CostTerms::plain(self.discrepancy) }
    }
}

/// Fits latent codes `[B, k]` for one task under a fixed generator,
/// minimizing the inversion cost plus `λ·Σ_j‖z_j‖`. Returns the codes and
/// the final penalized cost.
pub fn regularized_latent_search(
    task: &InversionTask,
    generator: &GeneratorModel,
    lambda: f64,
    iterations: usize,
    eta: f64,
    terms: &CostTerms,
    seed: u64,
) -> Result<(Tensor, f64)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("latent penalty {lambda} must be non-negative")));
    }
    let terms = CostTerms { lambda_z: lambda, ..terms.clone() };
    let prog = CostProgram::new(task, Search::Latent(generator.clone()), &terms)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = vec![gaussian(&mut rng, &[task.batch(), generator.latent_dim()])];
    let mut curve = Vec::new();
    let c = run_phase(std::slice::from_ref(&prog), &mut vars, eta, iterations, (0, Phase::Z), &mut curve)?;
    Ok((vars.pop().expect("one variable"), c))
}

/// `τ` plain gradient-descent steps on generator weights shared by all
/// tasks, each task's codes held fixed. Returns the adapted generator and
/// the summed cost before each step and after the last.
pub fn meta_param_step(
    generator: &GeneratorModel,
    tasks: &[(&InversionTask, &Tensor)],
    alpha: f64,
    steps: usize,
    terms: &CostTerms,
) -> Result<(GeneratorModel, Vec<f64>)> {
    let progs: Vec<CostProgram> = tasks
        .iter()
        .map(|(t, z)| CostProgram::new(t, Search::SharedWeights(generator.clone(), (*z).clone()), terms))
        .collect::<Result<_>>()?;
    let mut w = generator.params().to_vec();
    let mut trajectory = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (c, g) = evaluate_sum(&progs, &w)?;
        if !c.is_finite() || g.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(c));
        }
        trajectory.push(c);
        sgd_step(&mut w, &g, alpha);
    }
    let last = progs.iter().map(|p| p.cost(&w)).sum::<Result<f64>>()?;
    trajectory.push(last);
    Ok((generator.with_params(w)?, trajectory))
}

/// `(1−β)·w + β·w'`, entrywise.
pub fn reptile_update(w: &[Tensor], adapted: &[Tensor], beta: f64) -> Result<Vec<Tensor>> {
    if w.len() != adapted.len() {
        return Err(Error::Shape(format!("{} vs {} parameter tensors", w.len(), adapted.len())));
    }
    w.iter().zip(adapted).map(|(a, b)| Ok(a.zip_map(b, |x, y| (1.0 - beta) * x + beta * y)?)).collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub outer_step: usize,
    /// Summed cost of the sampled tasks after the local steps.
    pub summed_cost: f64,
    pub mean_z_norm: f64,
    pub eval_psnr: Option<f64>,
    /// Set when the step was skipped.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// The probe codes, `[P, k]`.
    pub probe_codes: Option<Tensor>,
    /// `(outer step, G_w(probes))`, including step 0 and the final step.
    pub probes: Vec<(usize, Tensor)>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("outer_step,summed_cost,mean_z_norm,eval_psnr,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.outer_step,
                num(r.summed_cost),
                num(r.mean_z_norm),
                r.eval_psnr.map(num).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes one `probes_<step>.pgm` grid per recorded checkpoint.
    pub fn write_probe_grids(&self, dir: &Path, shape: ImageShape) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (step, samples) in &self.probes {
            let m = shape.len();
            let rows: Vec<Tensor> = samples
                .data()
                .chunks(m)
                .map(|c| Tensor::new(vec![m], c.to_vec()))
                .collect::<std::result::Result<_, _>>()?;
            let refs: Vec<&Tensor> = rows.iter().collect();
            let path = dir.join(format!("probes_{step:05}.pgm"));
            std::fs::write(&path, encode_pnm(&refs, shape)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Tasks stripped of ground truth: training never holds the sealed images.
fn blind_tasks(set: &TaskSet, batch: usize) -> Result<Vec<InversionTask>> {
    (0..set.len())
        .map(|i| {
            let mut t = set.inversion_task(i)?;
            t.truth = None;
            if t.batch() != batch {
                return Err(Error::Config(format!("task {i} has batch size {}, expected {batch}", t.batch())));
            }
            Ok(t)
        })
        .collect()
}

/// Trains `init` on the task set. See [`giml_with`] for evaluation hooks.
pub fn giml(set: &TaskSet, cfg: &MetaConfig, init: &GeneratorModel) -> Result<(GeneratorModel, TrainingLog)> {
    giml_with(set, cfg, init, |_, _| None)
}

/// Like [`giml`], calling `eval(step, generator)` after every outer step;
/// a returned value is logged as that step's evaluation PSNR.
pub fn giml_with(
    set: &TaskSet,
    cfg: &MetaConfig,
    init: &GeneratorModel,
    mut eval: impl FnMut(usize, &GeneratorModel) -> Option<f64>,
) -> Result<(GeneratorModel, TrainingLog)> {
    let errs = cfg.validate("");
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if set.is_empty() {
        return Err(Error::Config("empty task set".into()));
    }
    let tasks = blind_tasks(set, cfg.batch_size)?;
    let search_terms = cfg.terms(cfg.lambda);
    let step_terms = cfg.terms(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX]));
    let probe_codes = gaussian(&mut probe_rng, &[cfg.probes.max(1), init.latent_dim()]);

    let mut gen = init.clone();
    let mut log = TrainingLog { probe_codes: Some(probe_codes.clone()), ..TrainingLog::default() };
    log.probes.push((0, gen.generate(&probe_codes)?));
    for step in 1..=cfg.outer_steps {
        let mut picked = sample(&mut rng, tasks.len(), cfg.task_batch.min(tasks.len())).into_vec();
        picked.sort_unstable();
        let outcome = outer_step(&gen, &tasks, &picked, cfg, &search_terms, &step_terms, step);
        let row = match outcome {
            Ok((next, summed, znorm)) => {
                gen = next;
                LogRow { outer_step: step, summed_cost: summed, mean_z_norm: znorm, eval_psnr: None, error: None }
            }
            Err(e) => {
                log::warn!("outer step {step} skipped: {e}");
                LogRow {
                    outer_step: step,
                    summed_cost: f64::NAN,
                    mean_z_norm: f64::NAN,
                    eval_psnr: None,
                    error: Some(e.to_string()),
                }
            }
        };
        log.rows.push(LogRow { eval_psnr: eval(step, &gen), ..row });
        if step % cfg.probe_every == 0 || step == cfg.outer_steps {
            log.probes.push((step, gen.generate(&probe_codes)?));
        }
    }
    Ok((gen, log))
}

fn outer_step(
    gen: &GeneratorModel,
    tasks: &[InversionTask],
    picked: &[usize],
    cfg: &MetaConfig,
    search_terms: &CostTerms,
    step_terms: &CostTerms,
    step: usize,
) -> Result<(GeneratorModel, f64, f64)> {
    let codes: Vec<Tensor> = picked
        .par_iter()
        .map(|&i| {
            let seed = derive_seed(cfg.seed, &[step as u64, i as u64]);
            regularized_latent_search(&tasks[i], gen, cfg.lambda, cfg.latent_iterations, cfg.eta_z, search_terms, seed)
                .map(|(z, _)| z)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&InversionTask, &Tensor)> = picked.iter().map(|&i| &tasks[i]).zip(&codes).collect();
    let (adapted, trajectory) = meta_param_step(gen, &pairs, cfg.alpha, cfg.local_steps, step_terms)?;
    let w = reptile_update(gen.params(), adapted.params(), cfg.beta)?;
    let rows: usize = codes.iter().map(|z| z.shape()[0]).sum();
    let znorm = codes
        .iter()
        .flat_map(|z| z.data().chunks(z.shape()[1]).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .sum::<f64>()
        / rows as f64;
    Ok((gen.with_params(w)?, *trajectory.last().expect("nonempty"), znorm))
}
