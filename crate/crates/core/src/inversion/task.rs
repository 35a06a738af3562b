use autodiff::Tensor;

use crate::error::{Error, Result};
use crate::models::{BnStats, ClassifierModel, GradientReport};
use crate::sealed::Sealed;

/// One inversion problem: the model snapshot, the observed gradient and the
/// labels. Ground truth, when present, is sealed and used only for scoring.
#[derive(Clone, Debug)]
pub struct InversionTask {
    pub model: ClassifierModel,
    pub report: GradientReport,
    pub labels: Vec<usize>,
    pub bn_stats: Option<BnStats>,
    pub truth: Option<Sealed<Vec<Tensor>>>,
}

impl InversionTask {
    /// Takes labels and statistics from the report.
    pub fn from_report(model: ClassifierModel, report: GradientReport) -> Result<Self> {
        let labels = report
            .labels
            .clone()
            .ok_or_else(|| Error::Config("report carries no labels; recover or supply them".into()))?;
        let bn_stats = report.bn_stats.clone();
        let task = Self { model, report, labels, bn_stats, truth: None };
        task.validate()?;
        Ok(task)
    }

    pub fn with_truth(mut self, truth: Vec<Tensor>) -> Self {
        self.truth = Some(Sealed::new(truth));
        self
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.report.check_shapes(&self.model.param_shapes())?;
        if self.labels.len() != self.report.batch_size {
            return Err(Error::Shape(format!(
                "{} labels for batch size {}",
                self.labels.len(),
                self.report.batch_size
            )));
        }
        let l = self.model.label_count();
        if let Some(&y) = self.labels.iter().find(|&&y| y >= l) {
            return Err(Error::LabelOutOfRange { label: y, classes: l });
        }
        if let Some(bn) = &self.bn_stats {
            bn.validate()?;
            if bn.layers() != self.model.hidden_layers() {
                return Err(Error::Shape(format!(
                    "{} BN layers for {} hidden layers",
                    bn.layers(),
                    self.model.hidden_layers()
                )));
            }
        }
        Ok(())
    }
}
