//! Explanation-quality metrics: max/avg sensitivity, local Lipschitz
//! estimate, faithfulness correlation and estimate, complexity, sparseness.
//!
//! The model output `f` used by the faithfulness metrics is the logit of the
//! explained class, which is the class the model predicts for the clean input.

use rand::distr::{Distribution, Uniform};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::attribution::Explainer;
use crate::error::{Error, Result};
use crate::model::ModelFn;
use crate::rng::{rng_from, stream, unit_direction, Rng};
use crate::tensor::{argmax, Tensor};

pub const MAX_SENS: &str = "max_sens";
pub const AVG_SENS: &str = "avg_sens";
pub const LIPSCHITZ: &str = "lipschitz";
pub const FAITH_CORR: &str = "faith_corr";
pub const FAITH_EST: &str = "faith_est";
pub const COMPLEXITY: &str = "complexity";
pub const SPARSENESS: &str = "sparseness";

/// Metric names in report column order.
pub const METRIC_NAMES: [&str; 7] = [MAX_SENS, AVG_SENS, LIPSCHITZ, FAITH_CORR, FAITH_EST, COMPLEXITY, SPARSENESS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Sensitivity radius. `None` means `0.02 · input_range · sqrt(d)`.
    pub radius: Option<f64>,
    pub input_range: f64,
    /// Neighborhood draws per sample for the sensitivity metrics.
    pub samples: usize,
    /// Value occluded features are set to.
    pub baseline: f64,
    /// Features per occluded subset, capped at `d`.
    pub subset_size: usize,
    /// Occlusion trials per sample for faithfulness correlation.
    pub runs: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            radius: None,
            input_range: 1.0,
            samples: 10,
            baseline: 0.0,
            subset_size: 16,
            runs: 20,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn radius_for(&self, dim: usize) -> f64 {
        self.radius
            .unwrap_or(0.02 * self.input_range * (dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("metric radius must be positive, got {r}")));
            }
        }
        if !(self.input_range > 0.0 && self.input_range.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "input range must be positive, got {}",
                self.input_range
            )));
        }
        if self.samples == 0 || self.subset_size == 0 || self.runs == 0 {
            return Err(Error::InvalidArgument(format!(
                "metric counts must be at least 1, got samples={} subset_size={} runs={}",
                self.samples, self.subset_size, self.runs
            )));
        }
        Ok(())
    }
}

/// A value that may be undefined for a sample, e.g. a correlation of
/// constant series. Degenerate values are reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn ok(value: f64) -> Self {
        Scored {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Scored {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Pearson correlation, `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn pearson_scored(a: &[f64], b: &[f64]) -> Scored {
    pearson(a, b).map_or_else(Scored::degenerate, Scored::ok)
}

/// Entropy of `|Φ_i| / Σ|Φ_j|` in nats.
pub fn complexity(map: &[f64]) -> Scored {
    let total: f64 = map.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Scored::degenerate();
    }
    let h = map
        .iter()
        .map(|v| v.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>();
    Scored::ok(h.clamp(0.0, (map.len() as f64).ln()))
}

/// Gini index of `|Φ|`.
pub fn sparseness(map: &[f64]) -> Scored {
    let mut a: Vec<f64> = map.iter().map(|v| v.abs()).collect();
    let total: f64 = a.iter().sum();
    if total == 0.0 {
        return Scored::degenerate();
    }
    a.sort_by(f64::total_cmp);
    let d = a.len() as f64;
    let g = a
        .iter()
        .enumerate()
        .map(|(i, &v)| (2.0 * (i + 1) as f64 - d - 1.0) * v)
        .sum::<f64>()
        / (d * total);
    Scored::ok(g.clamp(0.0, 1.0))
}

/// `n` points drawn uniformly from the L2 ball of radius `r` in `dim`
/// dimensions. Each draw consumes a direction then a radial uniform.
pub fn ball_draws(rng: &mut Rng, dim: usize, radius: f64, n: usize) -> Vec<Vec<f64>> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    (0..n)
        .map(|_| {
            let dir = unit_direction(rng, dim);
            let u: f64 = unit.sample(rng);
            let rho = radius * u.powf(1.0 / dim as f64);
            dir.into_iter().map(|v| v * rho).collect()
        })
        .collect()
}

/// `runs` random feature subsets of `size` distinct indices out of `dim`.
pub fn random_subsets(rng: &mut Rng, dim: usize, size: usize, runs: usize) -> Vec<Vec<usize>> {
    let size = size.min(dim);
    (0..runs).map(|_| sample_indices(rng, dim, size).into_vec()).collect()
}

fn row_tensor(x: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![1, x.len()], x.to_vec())
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Explanation stability over one set of class-preserving neighborhood draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityScores {
    pub max: f64,
    pub avg: f64,
    pub lipschitz: f64,
    /// Draws that kept the predicted class.
    pub kept: usize,
}

/// Everything the suite needs for one sample, sharing explanations between
/// metrics.
struct SampleContext {
    target: usize,
    clean_output: f64,
    map: Vec<f64>,
    sensitivity: Option<SensitivityScores>,
}

fn sample_context(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
    with_sensitivity: bool,
) -> Result<SampleContext> {
    let d = x.len();
    let clean_logits = model.logits(&row_tensor(x)?)?;
    let target = argmax(clean_logits.row(0));
    let clean_output = clean_logits.row(0)[target];

    let deltas = if with_sensitivity {
        ball_draws(rng, d, cfg.radius_for(d), cfg.samples)
    } else {
        Vec::new()
    };
    let mut kept = Vec::new();
    if !deltas.is_empty() {
        let rows: Vec<Vec<f64>> = deltas
            .iter()
            .map(|delta| x.iter().zip(delta).map(|(a, b)| a + b).collect())
            .collect();
        let preds = model.logits(&Tensor::from_rows(&rows)?)?.argmax_rows();
        for (k, row) in rows.into_iter().enumerate() {
            if preds[k] == target {
                kept.push((k, row));
            }
        }
    }

    let mut batch = vec![x.to_vec()];
    batch.extend(kept.iter().map(|(_, r)| r.clone()));
    let maps = explainer.explain_rows(model, &Tensor::from_rows(&batch)?, &vec![target; batch.len()])?;
    let map = maps.row(0).to_vec();

    let sensitivity = if kept.is_empty() {
        None
    } else {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut lipschitz = 0.0f64;
        for (j, (k, _)) in kept.iter().enumerate() {
            let diff = l2_diff(maps.row(j + 1), &map);
            let norm = deltas[*k].iter().map(|v| v * v).sum::<f64>().sqrt();
            max = max.max(diff);
            sum += diff;
            if norm > 0.0 {
                lipschitz = lipschitz.max(diff / norm);
            }
        }
        Some(SensitivityScores {
            max,
            avg: sum / kept.len() as f64,
            lipschitz,
            kept: kept.len(),
        })
    };
    Ok(SampleContext {
        target,
        clean_output,
        map,
        sensitivity,
    })
}

/// Max/avg sensitivity and the local Lipschitz estimate over one shared set
/// of draws. `None` when every draw changes the predicted class.
pub fn sensitivity_scores(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Option<SensitivityScores>> {
    cfg.validate()?;
    Ok(sample_context(explainer, model, x, cfg, rng, true)?.sensitivity)
}

pub fn max_sensitivity(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    Ok(sensitivity_scores(explainer, model, x, cfg, rng)?.map(|s| s.max))
}

pub fn avg_sensitivity(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    Ok(sensitivity_scores(explainer, model, x, cfg, rng)?.map(|s| s.avg))
}

pub fn local_lipschitz(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    Ok(sensitivity_scores(explainer, model, x, cfg, rng)?.map(|s| s.lipschitz))
}

fn occluded_outputs(
    model: &dyn ModelFn,
    x: &[f64],
    subsets: &[Vec<usize>],
    baseline: f64,
    target: usize,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = subsets
        .iter()
        .map(|s| {
            let mut row = x.to_vec();
            for &i in s {
                row[i] = baseline;
            }
            row
        })
        .collect();
    let logits = model.logits(&Tensor::from_rows(&rows)?)?;
    Ok((0..rows.len()).map(|r| logits.row(r)[target]).collect())
}

fn faith_corr_from(
    model: &dyn ModelFn,
    x: &[f64],
    ctx: &SampleContext,
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Scored> {
    let subsets = random_subsets(rng, x.len(), cfg.subset_size, cfg.runs);
    let outputs = occluded_outputs(model, x, &subsets, cfg.baseline, ctx.target)?;
    let mass: Vec<f64> = subsets.iter().map(|s| s.iter().map(|&i| ctx.map[i]).sum()).collect();
    let drops: Vec<f64> = outputs.iter().map(|o| ctx.clean_output - o).collect();
    Ok(pearson_scored(&mass, &drops))
}

fn faith_est_from(model: &dyn ModelFn, x: &[f64], ctx: &SampleContext, baseline: f64) -> Result<Scored> {
    // Occluding a feature already at the baseline leaves the input unchanged.
    let moved: Vec<usize> = (0..x.len()).filter(|&i| x[i] != baseline).collect();
    let mut drops = vec![0.0; x.len()];
    if !moved.is_empty() {
        let subsets: Vec<Vec<usize>> = moved.iter().map(|&i| vec![i]).collect();
        let outputs = occluded_outputs(model, x, &subsets, baseline, ctx.target)?;
        for (&i, o) in moved.iter().zip(outputs) {
            drops[i] = ctx.clean_output - o;
        }
    }
    Ok(pearson_scored(&ctx.map, &drops))
}

pub fn faithfulness_correlation(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
    rng: &mut Rng,
) -> Result<Scored> {
    cfg.validate()?;
    let ctx = sample_context(explainer, model, x, cfg, rng, false)?;
    faith_corr_from(model, x, &ctx, cfg, rng)
}

pub fn faithfulness_estimate(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    cfg: &MetricConfig,
) -> Result<Scored> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed, &[stream::METRICS]);
    let ctx = sample_context(explainer, model, x, cfg, &mut rng, false)?;
    faith_est_from(model, x, &ctx, cfg.baseline)
}

/// Which metric groups the suite computes. Skipped metrics are reported as
/// missing for every sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSelection {
    /// Max/avg sensitivity and local Lipschitz.
    pub sensitivity: bool,
    pub faith_corr: bool,
    pub faith_est: bool,
    /// Complexity and sparseness.
    pub map_shape: bool,
}

impl MetricSelection {
    pub const ALL: MetricSelection = MetricSelection {
        sensitivity: true,
        faith_corr: true,
        faith_est: true,
        map_shape: true,
    };

    /// Max-sensitivity, faithfulness estimate and sparseness.
    pub const SNAPSHOT: MetricSelection = MetricSelection {
        sensitivity: true,
        faith_corr: false,
        faith_est: true,
        map_shape: true,
    };
}

/// All metric values for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub values: [Option<f64>; 7],
    pub degenerate: [bool; 7],
}

/// Evaluates the selected metrics for one sample. The sample's RNG stream is
/// derived from `cfg.seed` and `index`.
pub fn evaluate_sample(
    explainer: &dyn Explainer,
    model: &dyn ModelFn,
    x: &[f64],
    index: u64,
    cfg: &MetricConfig,
    selection: MetricSelection,
) -> Result<SampleMetrics> {
    let mut rng = rng_from(cfg.seed, &[stream::METRICS, index]);
    let ctx = sample_context(explainer, model, x, cfg, &mut rng, selection.sensitivity)?;
    let mut out = SampleMetrics::default();
    if let Some(s) = &ctx.sensitivity {
        out.values[0] = Some(s.max);
        out.values[1] = Some(s.avg);
        out.values[2] = Some(s.lipschitz);
    }
    let mut put = |slot: usize, s: Scored| {
        out.values[slot] = Some(s.value);
        out.degenerate[slot] = s.degenerate;
    };
    if selection.faith_corr {
        put(3, faith_corr_from(model, x, &ctx, cfg, &mut rng)?);
    }
    if selection.faith_est {
        put(4, faith_est_from(model, x, &ctx, cfg.baseline)?);
    }
    if selection.map_shape {
        put(5, complexity(&ctx.map));
        put(6, sparseness(&ctx.map));
    }
    Ok(out)
}

/// Aggregate of one metric over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    /// Mean over samples with a value; `None` if there are none.
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub std: Option<f64>,
    pub values: Vec<Option<f64>>,
    pub missing: usize,
    pub degenerate: usize,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: Vec<Option<f64>>, degenerate: usize) -> Self {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, std) = if present.is_empty() {
            (None, None)
        } else {
            let n = present.len() as f64;
            let mean = present.iter().sum::<f64>() / n;
            let std = if present.len() > 1 {
                (present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(std))
        };
        MetricSummary {
            name: name.to_string(),
            mean,
            std,
            missing: values.len() - present.len(),
            values,
            degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub explainer: String,
    pub metrics: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|m| m.mean)
    }

    pub fn sample_count(&self) -> usize {
        self.metrics.first().map_or(0, |m| m.values.len())
    }
}

/// Runs the selected metrics over every row of `inputs` (`[n, d]`).
pub fn evaluate_suite_with(
    model: &dyn ModelFn,
    explainer: &dyn Explainer,
    inputs: &Tensor,
    cfg: &MetricConfig,
    selection: MetricSelection,
) -> Result<MetricReport> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.rank() != 2 {
        return Err(Error::InvalidArgument(
            "metric evaluation needs a non-empty [n, d] input batch".into(),
        ));
    }
    let samples = (0..inputs.rows())
        .map(|i| evaluate_sample(explainer, model, inputs.row(i), i as u64, cfg, selection))
        .collect::<Result<Vec<_>>>()?;
    let metrics = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(slot, name)| {
            let values = samples.iter().map(|s| s.values[slot]).collect();
            let degenerate = samples.iter().filter(|s| s.degenerate[slot]).count();
            MetricSummary::from_values(name, values, degenerate)
        })
        .collect();
    Ok(MetricReport {
        dataset: String::new(),
        model: String::new(),
        explainer: explainer.name().to_string(),
        metrics,
    })
}

pub fn evaluate_suite(
    model: &dyn ModelFn,
    explainer: &dyn Explainer,
    inputs: &Tensor,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    evaluate_suite_with(model, explainer, inputs, cfg, MetricSelection::ALL)
}
