use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Command, ExperimentConfig, GeneratorSource};
use crate::error::{Error, Result};
use crate::flsim::{
    apply_defense, defend_noise, derive_seed, prototype_distance, simulate_rounds, DatasetRecipe, Family, SimConfig,
    SyntheticDataset, TaskSet,
};
use crate::inversion::{invert, invert_multi, InversionConfig, InversionTask, Mode};
use crate::meta::giml;
use crate::metrics::{csv_err, csv_writer, num, score, write_outputs, MetricsRecord};
use crate::models::{batch_gradient, fit_generator, ClassifierModel, DefenseConfig, GeneratorModel};
use crate::rgap::{rgap_generative, rgap_recursive};

/// A header and string rows, written as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Parsed numeric values of one column.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else { return Vec::new() };
        self.rows.iter().filter_map(|r| r.get(c)?.parse().ok()).collect()
    }

    /// The table as CSV text with LF line endings.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for r in std::iter::once(&self.header).chain(&self.rows) {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(&self.header).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(|e| csv_err(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }
}

/// Contents of `fingerprint.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub config: String,
    pub data: String,
    pub version: String,
    pub command: String,
    /// Attack label, e.g. `GI-z/w` or `GI-x+BN`.
    pub method: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Table,
    pub fingerprint: Fingerprint,
}

fn method_label(cfg: &ExperimentConfig) -> String {
    let bn = if cfg.simulation.with_bn && cfg.inversion.lambda_bn > 0.0 { "+BN" } else { "" };
    format!("GI-{}{bn}", cfg.inversion.mode)
}

/// Runs an experiment into `out`, writing `resolved-config.toml`,
/// `fingerprint.json`, `summary.csv` and the command's artifacts.
///
/// `jobs` bounds the worker threads; `None` uses the global pool.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<RunOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Invalid(errs));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut resolved = cfg.clone();
    resolved.out = Some(out.to_path_buf());
    let cfg_path = out.join("resolved-config.toml");
    fs::write(&cfg_path, resolved.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let fingerprint = Fingerprint {
        config: cfg.fingerprint(),
        data: cfg.data_fingerprint(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cfg.command.as_str().into(),
        method: method_label(cfg),
    };
    let fp_path = out.join("fingerprint.json");
    let fp_text = serde_json::to_string_pretty(&fingerprint).expect("serializable");
    fs::write(&fp_path, fp_text).map_err(|e| Error::io(&fp_path, e))?;

    let work = || match cfg.command {
        Command::Invert => run_invert(cfg, out),
        Command::Sweep => run_sweep(cfg, out),
        Command::Multigrad => run_multigrad(cfg, out),
        Command::Rgap => run_rgap(cfg, out),
        Command::Giml => run_giml(cfg, out),
    };
    let summary = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    summary.write(&out.join("summary.csv"))?;
    Ok(RunOutcome { dir: out.to_path_buf(), summary, fingerprint })
}

/// Machine-readable description of a failed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub status: String,
    pub kind: String,
    pub message: String,
    /// One entry per violated configuration field.
    pub fields: Vec<String>,
}

impl ErrorReport {
    pub fn from_error(e: &Error) -> Self {
        let fields = match e {
            Error::Invalid(f) => f.clone(),
            _ => Vec::new(),
        };
        Self { status: "error".into(), kind: e.kind().into(), message: e.to_string(), fields }
    }
}

/// Writes `error.json` into `dir`.
pub fn write_error_report(dir: &Path, e: &Error) -> Result<()> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let path = dir.join("error.json");
    let text = serde_json::to_string_pretty(&ErrorReport::from_error(e)).expect("serializable");
    fs::write(&path, text).map_err(|err| Error::io(&path, err))
}

fn generator(source: &GeneratorSource) -> Result<GeneratorModel> {
    match source {
        GeneratorSource::PresetUntrained { seed } => Ok(GeneratorModel::dec16(*seed)),
        GeneratorSource::File { path } => GeneratorModel::load(path),
        GeneratorSource::GimlOutput { .. } => GeneratorModel::load(&source.file().expect("file source")),
        GeneratorSource::Fitted { dataset, fit, seed } => {
            let data = dataset.build()?;
            Ok(fit_generator(&GeneratorModel::dec16(*seed), &data.images, fit)?.0)
        }
    }
}

fn needs_generator(cfg: &ExperimentConfig) -> bool {
    match cfg.command {
        Command::Giml => true,
        Command::Rgap => !cfg.rgap.replace.is_empty(),
        _ => cfg.inversion.mode.needs_generator(),
    }
}

fn simulate(cfg: &ExperimentConfig, data: &SyntheticDataset, seed: u64, defense: DefenseConfig) -> Result<TaskSet> {
    let model = ClassifierModel::preset(&cfg.model.preset, cfg.model.seed)?;
    let sim = SimConfig {
        nodes: cfg.simulation.nodes,
        rounds: cfg.simulation.rounds,
        defense,
        schedule: cfg.simulation.schedule,
        with_bn: cfg.simulation.with_bn,
        seed,
    };
    simulate_rounds(data, &model, &sim)
}

fn attack_config(cfg: &InversionConfig, ids: &[u64]) -> InversionConfig {
    InversionConfig { seed: derive_seed(cfg.seed, ids), ..cfg.clone() }
}

/// Inverts one task and scores it against its sealed truth.
fn attack(
    task: &InversionTask,
    cfg: &InversionConfig,
    gen: Option<&GeneratorModel>,
    dir: Option<&Path>,
) -> Result<MetricsRecord> {
    let est = invert(task, cfg, gen)?;
    let truth = task.truth.as_ref().ok_or_else(|| Error::Config("task has no ground truth to score".into()))?;
    let truth = truth.reveal();
    let record = score(&est.images, truth, cfg.image, est.final_cost)?;
    if let Some(dir) = dir {
        write_outputs(&record, &est.images, &est.curve, truth, cfg.image, dir)?;
    }
    Ok(record)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run_invert(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let data = cfg.dataset.build()?;
    let gen = needs_generator(cfg).then(|| generator(&cfg.generator)).transpose()?;
    let mut table = Table::new(&[
        "seed", "task", "round", "node", "method", "psnr_mean", "psnr_best", "ssim_mean", "ssim_best", "final_cost",
    ]);
    let method = method_label(cfg);
    for &seed in &cfg.seeds {
        let set = simulate(cfg, &data, seed, cfg.defense.clone())?;
        let rows = (0..set.len())
            .into_par_iter()
            .map(|i| {
                let task = set.inversion_task(i)?;
                let icfg = attack_config(&cfg.inversion, &[seed, i as u64]);
                let dir = out.join(format!("seed_{seed}")).join(format!("task_{i:03}"));
                let r = attack(&task, &icfg, gen.as_ref(), Some(&dir))?;
                let rec = &set.tasks[i];
                Ok(vec![
                    seed.to_string(),
                    i.to_string(),
                    rec.round.to_string(),
                    rec.node.to_string(),
                    method.clone(),
                    num(r.psnr_mean),
                    num(r.psnr_best),
                    num(r.ssim_mean),
                    num(r.ssim_best),
                    num(r.final_cost),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        table.rows.extend(rows);
    }
    Ok(table)
}

fn run_sweep(cfg: &ExperimentConfig, _out: &Path) -> Result<Table> {
    let data = cfg.dataset.build()?;
    let gen = needs_generator(cfg).then(|| generator(&cfg.generator)).transpose()?;
    let points = cfg.sweep.points();
    let rows = points
        .par_iter()
        .enumerate()
        .map(|(p, defense)| {
            let mut records = Vec::new();
            for &seed in &cfg.seeds {
                let set = simulate(cfg, &data, seed, defense.clone())?;
                for i in 0..set.len() {
                    let task = set.inversion_task(i)?;
                    let icfg = attack_config(&cfg.inversion, &[seed, i as u64]);
                    records.push(attack(&task, &icfg, gen.as_ref(), None)?);
                }
            }
            let col = |f: fn(&MetricsRecord) -> f64| mean(&records.iter().map(f).collect::<Vec<_>>());
            Ok(vec![
                p.to_string(),
                num(defense.sparsity),
                num(defense.noise),
                defense.batch_size.to_string(),
                records.len().to_string(),
                num(col(|r| r.psnr_mean)),
                num(col(|r| r.psnr_best)),
                num(col(|r| r.ssim_mean)),
                num(col(|r| r.ssim_best)),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&[
        "point", "sparsity", "noise", "batch_size", "tasks", "psnr_mean", "psnr_best", "ssim_mean", "ssim_best",
    ]);
    table.rows = rows;
    Ok(table)
}

/// Index of the image attacked for `seed`.
fn pick(data: &SyntheticDataset, seed: u64) -> usize {
    (derive_seed(seed, &[0x1Du64]) % data.len() as u64) as usize
}

fn run_multigrad(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let data = cfg.dataset.build()?;
    let gen = needs_generator(cfg).then(|| generator(&cfg.generator)).transpose()?;
    let specs = ClassifierModel::preset(&cfg.model.preset, cfg.model.seed)?.specs();
    let max_t = *cfg.multigrad.counts.iter().max().expect("validated nonempty");
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let j = pick(&data, seed);
            let (x, y) = (data.images[j].clone(), data.labels[j]);
            let tasks = (0..max_t)
                .map(|t| {
                    let model = ClassifierModel::init(specs.clone(), derive_seed(seed, &[t as u64]))?;
                    let report = batch_gradient(&model, &[x.clone()], &[y], cfg.simulation.with_bn)?;
                    let report = apply_defense(&report, &cfg.defense, derive_seed(seed, &[t as u64, 1]));
                    Ok(InversionTask::from_report(model, report)?.with_truth(vec![x.clone()]))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for &t in &cfg.multigrad.counts {
                let icfg = attack_config(&cfg.inversion, &[seed, t as u64]);
                let est = invert_multi(&tasks[..t], &icfg, gen.as_ref())?;
                let truth = [x.clone()];
                let r = score(&est.images, &truth, icfg.image, est.final_cost)?;
                let dir = out.join(format!("seed_{seed}")).join(format!("count_{t:03}"));
                write_outputs(&r, &est.images, &est.curve, &truth, icfg.image, &dir)?;
                rows.push(vec![seed.to_string(), t.to_string(), num(r.psnr_mean), num(r.ssim_mean), num(r.final_cost)]);
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["seed", "count", "psnr", "ssim", "final_cost"]);
    table.rows = per_seed.into_iter().flatten().collect();
    Ok(table)
}

fn run_rgap(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let data = cfg.dataset.build()?;
    let r = &cfg.rgap;
    if r.widths[0] != data.shape.len() {
        return Err(Error::Invalid(vec![format!(
            "rgap.widths[0] must equal the image size {}, got {}",
            data.shape.len(),
            r.widths[0]
        )]));
    }
    let gen = needs_generator(cfg).then(|| generator(&cfg.generator)).transpose()?;
    let replace: BTreeSet<usize> = r.replace.iter().copied().collect();
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let model = ClassifierModel::dense_stack(&r.widths, r.activation, seed)?;
            let j = pick(&data, seed);
            let x = &data.images[j];
            let mut report = batch_gradient(&model, &[x.clone()], &[data.labels[j]], false)?;
            if r.noise > 0.0 {
                report = defend_noise(&report, r.noise, derive_seed(seed, &[1]));
            }
            for &l in &r.frozen {
                let w = model.layers()[..l - 1].iter().map(|l| 1 + usize::from(l.bias.is_some())).sum::<usize>();
                report.gradients[w] = Tensor::zeros(report.gradients[w].shape());
            }
            let (method, result) = match &gen {
                Some(g) => {
                    let fit = crate::rgap::LatentFit { seed: derive_seed(r.latent.seed, &[seed]), ..r.latent.clone() };
                    ("generative", rgap_generative(&model, &report, g, &replace, &fit)?)
                }
                None => ("recursive", rgap_recursive(&model, &report)?),
            };
            let errors = result.layer_errors(&model, x)?;
            let dir = out.join(format!("seed_{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            result.write_csv(&dir.join("layers.csv"), Some(&errors))?;
            let estimate = result.input().map(|v| v.clamp(0.0, 1.0));
            let truth = [x.clone()];
            let rec = score(std::slice::from_ref(&estimate), &truth, data.shape, f64::NAN)?;
            write_outputs(&rec, &[estimate], &[], &truth, data.shape, &dir)?;
            Ok(vec![
                seed.to_string(),
                method.to_string(),
                num(rec.psnr_mean),
                format!("{:.6e}", errors.last().copied().unwrap_or(f64::NAN)),
                result.warnings.len().to_string(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["seed", "method", "input_psnr", "input_error", "warnings"]);
    table.rows = per_seed;
    Ok(table)
}

fn run_giml(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let data = cfg.dataset.build()?;
    let init = generator(&cfg.generator)?;
    let baseline = cfg.giml.baseline.as_ref().map(generator).transpose()?;
    let two_cluster = cfg.dataset.family == Family::TwoCluster;
    let mut table =
        Table::new(&["seed", "generator", "psnr_mean", "psnr_best", "ssim_mean", "ssim_best", "probe_distance"]);
    for &seed in &cfg.seeds {
        let set = simulate(cfg, &data, seed, cfg.defense.clone())?;
        let meta = crate::meta::MetaConfig { seed: derive_seed(cfg.meta.seed, &[seed]), ..cfg.meta.clone() };
        let (trained, log) = giml(&set, &meta, &init)?;
        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        trained.save(&dir.join("generator.gen"))?;
        log.write_csv(&dir.join("training_log.csv"))?;
        log.write_probe_grids(&dir.join("probes"), data.shape)?;

        let held = if cfg.giml.eval_tasks > 0 {
            let recipe = DatasetRecipe { seed: cfg.giml.eval_dataset_seed, ..cfg.dataset.clone() };
            let sim = ExperimentConfig {
                simulation: crate::experiment::SimulationSection {
                    nodes: cfg.giml.eval_tasks,
                    rounds: 1,
                    ..cfg.simulation.clone()
                },
                ..cfg.clone()
            };
            Some(simulate(&sim, &recipe.build()?, derive_seed(seed, &[2]), cfg.defense.clone())?)
        } else {
            None
        };
        let probes = log.probe_codes.as_ref().expect("giml records probe codes");
        let mut rivals = vec![("initial", &init), ("trained", &trained)];
        if let Some(b) = &baseline {
            rivals.push(("baseline", b));
        }
        for (name, g) in rivals {
            let dist = if two_cluster { num(prototype_distance(&g.generate(probes)?)?) } else { "n/a".into() };
            let mut row = vec![seed.to_string(), name.to_string()];
            match &held {
                Some(set) => {
                    let icfg = InversionConfig { mode: Mode::Z, ..cfg.inversion.clone() };
                    let recs = (0..set.len())
                        .into_par_iter()
                        .map(|i| attack(&set.inversion_task(i)?, &attack_config(&icfg, &[seed, i as u64]), Some(g), None))
                        .collect::<Result<Vec<_>>>()?;
                    let col = |f: fn(&MetricsRecord) -> f64| num(mean(&recs.iter().map(f).collect::<Vec<_>>()));
                    row.extend([
                        col(|r| r.psnr_mean),
                        col(|r| r.psnr_best),
                        col(|r| r.ssim_mean),
                        col(|r| r.ssim_best),
                    ]);
                }
                None => row.extend(std::iter::repeat_n("n/a".to_string(), 4)),
            }
            row.push(dist);
            table.rows.push(row);
        }
    }
    Ok(table)
}

/// Consolidates completed `invert` runs into one table with a row per run:
/// `method,run,psnr_mean,psnr_best,ssim_mean,ssim_best,lpips`.
///
/// Runs must share a data fingerprint (same dataset, model, simulation,
/// defense and seeds).
pub fn compare(dirs: &[PathBuf]) -> Result<Table> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut table = Table::new(&["method", "run", "psnr_mean", "psnr_best", "ssim_mean", "ssim_best", "lpips"]);
    let mut data: Option<String> = None;
    for dir in dirs {
        let fp_path = dir.join("fingerprint.json");
        let text = fs::read_to_string(&fp_path).map_err(|e| Error::io(&fp_path, e))?;
        let fp: Fingerprint = serde_json::from_str(&text).map_err(|e| Error::format(&fp_path, e.to_string()))?;
        if fp.command != Command::Invert.as_str() {
            return Err(Error::Incompatible(format!("{} is a `{}` run, not `invert`", dir.display(), fp.command)));
        }
        match &data {
            Some(d) if *d != fp.data => {
                return Err(Error::Incompatible(format!(
                    "{} has data fingerprint {}, expected {d}",
                    dir.display(),
                    fp.data
                )))
            }
            Some(_) => {}
            None => data = Some(fp.data.clone()),
        }
        let summary = Table::read(&dir.join("summary.csv"))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        table.rows.push(vec![
            fp.method,
            name,
            num(mean(&summary.numbers("psnr_mean"))),
            num(mean(&summary.numbers("psnr_best"))),
            num(mean(&summary.numbers("ssim_mean"))),
            num(mean(&summary.numbers("ssim_best"))),
            "n/a".into(),
        ]);
    }
    Ok(table)
}
