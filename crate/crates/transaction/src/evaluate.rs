//! Ensemble evaluation of one split.

use transaction_core::data::{partition_eval, ModalitySample, Split};
use transaction_core::loss::SampleTargets;
use transaction_core::metrics::{evaluate_scores, ActionMode, EvalReport, TaskScores};
use transaction_core::model::ModelParams;
use transaction_core::Real;

use crate::dataset::Dataset;
use crate::ensemble;
use crate::error::{AppError, Result};
use crate::train::{check_vocab, metric_k};

pub struct Evaluation {
    pub report: EvalReport,
    pub scores: TaskScores,
}

/// Averages the members' probabilities over `split` and scores every task × partition.
pub fn evaluate<S: Real>(
    members: &[ModelParams<f32>],
    dataset: &Dataset,
    split: Split,
    mode: ActionMode,
) -> Result<Evaluation> {
    let samples: Vec<ModalitySample> = dataset.samples.iter().filter(|s| s.split == split).cloned().collect();
    if samples.is_empty() {
        return Err(AppError::Data(format!("{} split is empty", split.name())));
    }
    for m in members {
        check_vocab(m, &dataset.space)?;
    }
    let refs: Vec<&ModalitySample> = samples.iter().collect();
    let scores = ensemble::ensemble_predict::<S>(members, &refs)?;
    let scores = ensemble::with_action_mode(scores, mode, &dataset.space);
    let labels: Vec<SampleTargets> = samples.iter().map(|s| s.targets()).collect();
    let parts = partition_eval(&samples, &dataset.space);
    let report = evaluate_scores(&scores, &labels, &parts, &dataset.space, metric_k(&dataset.space))?;
    Ok(Evaluation { report, scores })
}
