//! Post-training evaluation: accuracy, PGD robust accuracy and the metric
//! suite on a fixed slice of the test split.

use serde::{Deserialize, Serialize};

use crate::baselines::robust_accuracy;
use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Splits};
use crate::harness::train::accuracy;
use crate::metrics::{evaluate_suite_with, MetricReport, MetricSelection};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean_acc: f64,
    /// Present when the config has a `pgd` block.
    pub robust_acc: Option<f64>,
    pub report: MetricReport,
}

/// Evaluates on the whole test split; metrics use its first
/// `cfg.eval_samples` rows.
pub fn evaluate(
    cfg: &ExperimentConfig,
    splits: &Splits,
    model: &Model,
    method: &str,
    selection: MetricSelection,
) -> Result<Evaluation> {
    let test = &splits.test;
    let clean_acc = accuracy(model, test)?;
    let robust_acc = match &cfg.pgd {
        Some(pgd) => Some(robust_accuracy(model, &test.inputs, &test.labels, pgd, cfg.seed)?),
        None => None,
    };
    let n = cfg.eval_samples.min(test.len());
    let subset = test.inputs.slice_rows(0, n)?;
    let explainer = cfg.explainer.build(&splits.train.inputs, cfg.seed);
    let mut report = evaluate_suite_with(model, explainer.as_ref(), &subset, &cfg.metrics, selection)?;
    report.dataset = format!("test[0..{n}]");
    report.model = method.to_string();
    Ok(Evaluation {
        clean_acc,
        robust_acc,
        report,
    })
}
