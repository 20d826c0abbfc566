//! Gradient-based attribution: Integrated Gradients, Gradient SHAP, and PGM
//! export of attribution maps.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{target_input_gradients, ModelFn};
use crate::rng::{rng_from, standard_normal, stream, Rng};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IntegratedGradients,
    GradientShap,
}

/// Per-feature importance scores for one sample and one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// Same shape as the explained input.
    pub scores: Tensor,
    pub target: usize,
    pub method: Method,
    pub baseline: String,
}

fn flat_row(x: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![1, x.len()], x.data().to_vec())
}

fn resolve_target(model: &dyn ModelFn, x: &Tensor, target: Option<usize>) -> Result<usize> {
    match target {
        Some(t) => Ok(t),
        None => Ok(argmax(model.logits(&flat_row(x)?)?.row(0))),
    }
}

/// Midpoint-rule Integrated Gradients for a batch of `[d]`-rows.
///
/// Row `r` gets `(x_r − x'_r) · (1/S) Σ_t ∇f_target(x'_r + (t−½)/S·(x_r − x'_r))`.
/// All path points of all rows are evaluated in one forward/backward pass.
pub fn integrated_gradients_rows(
    model: &dyn ModelFn,
    inputs: &Tensor,
    baselines: &Tensor,
    steps: usize,
    targets: &[usize],
) -> Result<Tensor> {
    if inputs.shape() != baselines.shape() {
        return Err(Error::shape("integrated_gradients", inputs.shape(), baselines.shape()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    if inputs.rank() != 2 || inputs.rows() != targets.len() {
        return Err(Error::shape("integrated_gradients", inputs.shape(), &[targets.len()]));
    }
    let (n, d) = (inputs.rows(), inputs.row_len());
    let mut path = Vec::with_capacity(n * steps * d);
    let mut path_targets = Vec::with_capacity(n * steps);
    for r in 0..n {
        let (x, b) = (inputs.row(r), baselines.row(r));
        for t in 0..steps {
            let alpha = (t as f64 + 0.5) / steps as f64;
            path.extend(x.iter().zip(b).map(|(&xi, &bi)| bi + alpha * (xi - bi)));
            path_targets.push(targets[r]);
        }
    }
    let path = Tensor::new(vec![n * steps, d], path)?;
    let (grads, _) = target_input_gradients(model, &path, &path_targets)?;
    let mut out = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let acc = out.row_mut(r);
        for t in 0..steps {
            for (a, g) in acc.iter_mut().zip(grads.row(r * steps + t)) {
                *a += g;
            }
        }
        let (x, b) = (inputs.row(r), baselines.row(r));
        for ((a, &xi), &bi) in acc.iter_mut().zip(x).zip(b) {
            *a = (xi - bi) * (*a / steps as f64);
        }
    }
    Ok(out)
}

/// Integrated Gradients for one input of any shape. The target defaults to
/// the predicted class.
pub fn integrated_gradients(
    model: &dyn ModelFn,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    target: Option<usize>,
) -> Result<AttributionMap> {
    if x.shape() != baseline.shape() {
        return Err(Error::shape("integrated_gradients", x.shape(), baseline.shape()));
    }
    let target = resolve_target(model, x, target)?;
    let scores = integrated_gradients_rows(model, &flat_row(x)?, &flat_row(baseline)?, steps, &[target])?;
    let baseline_desc = if baseline.data().iter().all(|&v| v == 0.0) {
        "zeros".to_string()
    } else {
        "custom".to_string()
    };
    Ok(AttributionMap {
        scores: scores.reshape(x.shape())?,
        target,
        method: Method::IntegratedGradients,
        baseline: baseline_desc,
    })
}

/// Gradient SHAP settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientShapConfig {
    pub n_samples: usize,
    /// Standard deviation of the Gaussian noise added to the input.
    pub sigma: f64,
}

impl Default for GradientShapConfig {
    fn default() -> Self {
        GradientShapConfig {
            n_samples: 50,
            sigma: 0.09,
        }
    }
}

/// Gradient SHAP for a batch of rows; each row draws its samples from `rng`
/// in order.
///
/// Per sample: pick a baseline `x'` uniformly from `baselines`, draw
/// `α ~ U(0,1)`, form `z = x' + α·((x + N(0, σ²)) − x')` and accumulate
/// `(x − x') ⊙ ∇f_target(z)`. The output is the sample mean.
pub fn gradient_shap_rows(
    model: &dyn ModelFn,
    inputs: &Tensor,
    baselines: &[Vec<f64>],
    cfg: &GradientShapConfig,
    targets: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    if cfg.n_samples == 0 || !(cfg.sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gradient shap needs n_samples >= 1 and sigma >= 0, got {cfg:?}"
        )));
    }
    if baselines.is_empty() {
        return Err(Error::InvalidArgument("gradient shap needs at least one baseline".into()));
    }
    if inputs.rank() != 2 || inputs.rows() != targets.len() {
        return Err(Error::shape("gradient_shap", inputs.shape(), &[targets.len()]));
    }
    let (n, d) = (inputs.rows(), inputs.row_len());
    if let Some(b) = baselines.iter().find(|b| b.len() != d) {
        return Err(Error::shape("gradient_shap", &[d], &[b.len()]));
    }
    let s = cfg.n_samples;
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut points = Vec::with_capacity(n * s * d);
    let mut chosen = Vec::with_capacity(n * s);
    let mut point_targets = Vec::with_capacity(n * s);
    for r in 0..n {
        let x = inputs.row(r);
        for _ in 0..s {
            let bi = if baselines.len() == 1 {
                0
            } else {
                rng.random_range(0..baselines.len())
            };
            let alpha: f64 = unit.sample(rng);
            let b = &baselines[bi];
            if cfg.sigma > 0.0 {
                let noise = standard_normal(rng, d);
                points.extend(
                    x.iter()
                        .zip(b)
                        .zip(noise)
                        .map(|((&xi, &bv), e)| bv + alpha * (xi + cfg.sigma * e - bv)),
                );
            } else {
                points.extend(x.iter().zip(b).map(|(&xi, &bv)| bv + alpha * (xi - bv)));
            }
            chosen.push(bi);
            point_targets.push(targets[r]);
        }
    }
    let points = Tensor::new(vec![n * s, d], points)?;
    let (grads, _) = target_input_gradients(model, &points, &point_targets)?;
    let mut out = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let x = inputs.row(r).to_vec();
        let acc = out.row_mut(r);
        for k in 0..s {
            let idx = r * s + k;
            let b = &baselines[chosen[idx]];
            for (((a, g), &xi), &bv) in acc.iter_mut().zip(grads.row(idx)).zip(&x).zip(b) {
                *a += (xi - bv) * g;
            }
        }
        acc.iter_mut().for_each(|a| *a /= s as f64);
    }
    Ok(out)
}

/// Gradient SHAP for one input of any shape. Baselines are flattened rows.
pub fn gradient_shap(
    model: &dyn ModelFn,
    x: &Tensor,
    baselines: &[Vec<f64>],
    cfg: &GradientShapConfig,
    target: Option<usize>,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    let target = resolve_target(model, x, target)?;
    let scores = gradient_shap_rows(model, &flat_row(x)?, baselines, cfg, &[target], rng)?;
    Ok(AttributionMap {
        scores: scores.reshape(x.shape())?,
        target,
        method: Method::GradientShap,
        baseline: format!("{} baselines", baselines.len()),
    })
}

/// Something that produces one attribution row per input row.
pub trait Explainer {
    fn name(&self) -> &str;

    /// `inputs` is `[n, d]`; returns `[n, d]` scores for the given targets.
    fn explain_rows(&self, model: &dyn ModelFn, inputs: &Tensor, targets: &[usize]) -> Result<Tensor>;
}

/// Integrated Gradients from an all-zeros baseline.
#[derive(Clone, Debug)]
pub struct IntegratedGradients {
    pub steps: usize,
}

impl Default for IntegratedGradients {
    fn default() -> Self {
        IntegratedGradients { steps: 64 }
    }
}

impl Explainer for IntegratedGradients {
    fn name(&self) -> &str {
        "integrated_gradients"
    }

    fn explain_rows(&self, model: &dyn ModelFn, inputs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let zeros = Tensor::zeros(inputs.shape());
        integrated_gradients_rows(model, inputs, &zeros, self.steps, targets)
    }
}

/// Gradient SHAP with a fixed baseline pool. Every call reseeds from `seed`,
/// so explaining the same inputs twice gives identical maps.
#[derive(Clone, Debug)]
pub struct GradientShap {
    pub config: GradientShapConfig,
    pub baselines: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GradientShap {
    /// Baselines drawn uniformly from `pool` (up to `count` rows) plus the
    /// zero input.
    pub fn with_pool(config: GradientShapConfig, pool: &Tensor, count: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[stream::EXPLAIN, 0]);
        let mut baselines = vec![vec![0.0; pool.row_len()]];
        for _ in 0..count.min(pool.rows()) {
            baselines.push(pool.row(rng.random_range(0..pool.rows())).to_vec());
        }
        GradientShap {
            config,
            baselines,
            seed,
        }
    }
}

impl Explainer for GradientShap {
    fn name(&self) -> &str {
        "gradient_shap"
    }

    fn explain_rows(&self, model: &dyn ModelFn, inputs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let mut rng = rng_from(self.seed, &[stream::EXPLAIN, 1]);
        gradient_shap_rows(model, inputs, &self.baselines, &self.config, targets, &mut rng)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `round(255·(a − min)/(max − min))`.
    #[default]
    MinMax,
    /// The same rule applied to `|a|`.
    AbsMinMax,
}

/// 8-bit grayscale pixels of a map. 3-D `[C, H, W]` maps are summed over
/// channels; 1-D maps become a single row. A constant map renders black.
pub fn attribution_pixels(scores: &Tensor, normalization: Normalization) -> Result<(usize, usize, Vec<u8>)> {
    let s = scores.shape();
    let (h, w, values): (usize, usize, Vec<f64>) = match s.len() {
        1 => (1, s[0], scores.data().to_vec()),
        2 => (s[0], s[1], scores.data().to_vec()),
        3 => {
            let plane = s[1] * s[2];
            let mut sum = vec![0.0; plane];
            for c in scores.data().chunks(plane) {
                for (a, &v) in sum.iter_mut().zip(c) {
                    *a += v;
                }
            }
            (s[1], s[2], sum)
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot render a map of shape {s:?} as an image"
            )))
        }
    };
    let values: Vec<f64> = match normalization {
        Normalization::MinMax => values,
        Normalization::AbsMinMax => values.iter().map(|v| v.abs()).collect(),
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if max > min {
        values
            .iter()
            .map(|&v| (255.0 * (v - min) / (max - min)).round() as u8)
            .collect()
    } else {
        vec![0; values.len()]
    };
    Ok((w, h, pixels))
}

/// Binary PGM ("P5") bytes for a map.
pub fn encode_pgm(scores: &Tensor, normalization: Normalization) -> Result<Vec<u8>> {
    let (w, h, pixels) = attribution_pixels(scores, normalization)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_attribution_pgm(map: &AttributionMap, path: impl AsRef<Path>, normalization: Normalization) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(&map.scores, normalization)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM header and returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("malformed PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}
