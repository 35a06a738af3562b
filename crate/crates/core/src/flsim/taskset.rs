use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::simulate::ThetaSchedule;
use crate::error::{Error, Result};
use crate::inversion::InversionTask;
use crate::models::container::Container;
use crate::models::{ClassifierModel, DefenseConfig, GradientReport};
use crate::sealed::Sealed;

/// One node's report in one round.
#[derive(Clone, Debug)]
pub struct TaskRecord {
    pub round: usize,
    pub node: usize,
    /// Fingerprint of the parameter snapshot.
    pub snapshot: String,
    pub report: GradientReport,
    /// The batch that produced the report, for scoring only.
    pub truth: Option<Sealed<Vec<Tensor>>>,
    /// Dataset indices of the batch.
    pub indices: Vec<usize>,
}

/// A collection of gradient-inversion tasks and the model snapshots they
/// reference.
#[derive(Clone, Debug)]
pub struct TaskSet {
    pub snapshots: BTreeMap<String, ClassifierModel>,
    pub tasks: Vec<TaskRecord>,
    pub defense: DefenseConfig,
    pub schedule: ThetaSchedule,
}

#[derive(Serialize, Deserialize)]
struct ManifestTask {
    round: usize,
    node: usize,
    file: String,
    truth: Option<String>,
    snapshot: String,
    batch_size: usize,
    shapes: Vec<Vec<usize>>,
    indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    defense: DefenseConfig,
    schedule: ThetaSchedule,
    snapshots: BTreeMap<String, String>,
    tasks: Vec<ManifestTask>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn model(&self, record: &TaskRecord) -> Result<&ClassifierModel> {
        self.snapshots
            .get(&record.snapshot)
            .ok_or_else(|| Error::Shape(format!("unknown snapshot {}", record.snapshot)))
    }

    /// The inversion problem for task `i`; its sealed truth shares the
    /// record's read counter.
    pub fn inversion_task(&self, i: usize) -> Result<InversionTask> {
        let rec = self.tasks.get(i).ok_or_else(|| Error::Config(format!("no task {i}")))?;
        let mut task = InversionTask::from_report(self.model(rec)?.clone(), rec.report.clone())?;
        task.truth = rec.truth.clone();
        Ok(task)
    }

    /// Checks every report against its snapshot.
    pub fn validate(&self) -> Result<()> {
        for rec in &self.tasks {
            rec.report.check_shapes(&self.model(rec)?.param_shapes())?;
        }
        Ok(())
    }

    /// Total ground-truth reads across all records.
    pub fn truth_reads(&self) -> usize {
        self.tasks.iter().filter_map(|t| t.truth.as_ref()).map(Sealed::reads).sum()
    }

    /// Writes `tasks/<round>/<node>.grad`, `snapshots/<id>.params`,
    /// `truth/<round>/<node>.truth` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut snaps = BTreeMap::new();
        for (id, model) in &self.snapshots {
            let file = format!("snapshots/{id}.params");
            model.save(&dir.join(&file))?;
            snaps.insert(id.clone(), file);
        }
        let mut tasks = Vec::new();
        for rec in &self.tasks {
            let file = format!("tasks/{}/{}.grad", rec.round, rec.node);
            rec.report.save(&dir.join(&file))?;
            let truth = match &rec.truth {
                Some(t) => {
                    let tfile = format!("truth/{}/{}.truth", rec.round, rec.node);
                    let tensors = t.reveal().iter().enumerate().map(|(i, x)| (format!("x{i}"), x.clone())).collect();
                    Container { meta: serde_json::json!({ "kind": "truth" }), tensors }.write(&dir.join(&tfile))?;
                    Some(tfile)
                }
                None => None,
            };
            tasks.push(ManifestTask {
                round: rec.round,
                node: rec.node,
                file,
                truth,
                snapshot: rec.snapshot.clone(),
                batch_size: rec.report.batch_size,
                shapes: rec.report.gradients.iter().map(|g| g.shape().to_vec()).collect(),
                indices: rec.indices.clone(),
            });
        }
        let manifest = Manifest { version: 1, defense: self.defense, schedule: self.schedule, snapshots: snaps, tasks };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut snapshots = BTreeMap::new();
        for (id, file) in &manifest.snapshots {
            snapshots.insert(id.clone(), ClassifierModel::load(&dir.join(file))?);
        }
        let mut tasks = Vec::new();
        for t in manifest.tasks {
            let report = GradientReport::load(&dir.join(&t.file))?;
            let truth = match &t.truth {
                Some(f) => {
                    let c = Container::read(&dir.join(f))?;
                    Some(Sealed::new(c.tensors.into_iter().map(|(_, x)| x).collect()))
                }
                None => None,
            };
            tasks.push(TaskRecord { round: t.round, node: t.node, snapshot: t.snapshot, report, truth, indices: t.indices });
        }
        let set = Self { snapshots, tasks, defense: manifest.defense, schedule: manifest.schedule };
        set.validate()?;
        Ok(set)
    }
}
