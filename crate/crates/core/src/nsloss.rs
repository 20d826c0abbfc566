//! Neuron-sensitivity regularization.
//!
//! For a batch `X`, `N` perturbed copies are drawn on the L2 sphere of radius
//! `eps_ns` around every sample. For neuron `j` of traced layer `i`:
//!
//! ```text
//! MA_ij = mean_m |M_ij(X[m])|
//! MD_ij = mean_{k,m} |M_ij(X[m]) - M_ij(X_p^(k)[m])|
//! NS_ij = MD_ij / (eps_ns · |M_i| · MA_ij)
//! NsLoss = Σ_i Σ_j NS_ij · MA_ij
//! ```
//!
//! The MA factors cancel, so `NsLoss = Σ_i Σ_j MD_ij / (eps_ns·|M_i|)`
//! whenever every `MA_ij > 0`. Neurons with `MA_ij = 0` contribute through
//! that cancelled form, which keeps the loss finite for dead units and equal
//! to the weighted form everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, Model, TracedModel};
use crate::rng::{rng_from, stream, unit_direction, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of binary-search probes used by [`select_lambda`].
pub const LAMBDA_PROBES: usize = 6;

fn default_n_perturb() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsConfig {
    /// L2 radius of the perturbation sphere, in input units.
    pub eps_ns: f64,
    /// Perturbations drawn per sample.
    #[serde(default = "default_n_perturb")]
    pub n_perturb: usize,
    /// Weight of the regularizer in the total loss.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NsConfig {
    pub fn new(eps_ns: f64, lambda: f64) -> Self {
        NsConfig {
            eps_ns,
            n_perturb: default_n_perturb(),
            lambda,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_ns > 0.0 && self.eps_ns.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps_ns must be positive, got {}",
                self.eps_ns
            )));
        }
        if self.n_perturb == 0 {
            return Err(Error::InvalidArgument("n_perturb must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Draws `n_perturb` perturbed copies of a `[B, ...]` batch. Each row of
/// each copy differs from the original row by a vector of L2 norm exactly
/// `eps_ns` with uniformly distributed direction. No clipping is applied.
pub fn sample_sphere(x: &Tensor, eps_ns: f64, n_perturb: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    if x.is_empty() || x.row_len() == 0 {
        return Err(Error::InvalidArgument("cannot perturb an empty input".into()));
    }
    if !(eps_ns > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_ns must be positive, got {eps_ns}"
        )));
    }
    let d = x.row_len();
    let mut out = Vec::with_capacity(n_perturb);
    for _ in 0..n_perturb {
        let mut p = x.clone();
        for m in 0..x.rows() {
            let dir = unit_direction(rng, d);
            for (v, u) in p.row_mut(m).iter_mut().zip(dir) {
                *v += eps_ns * u;
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// `MA` per traced layer.
pub fn mean_abs_activation(trace: &ActivationTrace) -> Vec<Vec<f64>> {
    trace
        .layers()
        .iter()
        .map(|layer| {
            let w = layer.row_len();
            let mut ma = vec![0.0; w];
            for row in layer.data().chunks(w) {
                for (acc, &a) in ma.iter_mut().zip(row) {
                    *acc += a.abs();
                }
            }
            let inv = 1.0 / layer.rows() as f64;
            ma.iter_mut().for_each(|v| *v *= inv);
            ma
        })
        .collect()
}

/// `MD` per traced layer.
pub fn mean_abs_diff(trace: &ActivationTrace, perturbed: &[ActivationTrace]) -> Result<Vec<Vec<f64>>> {
    if perturbed.is_empty() {
        return Err(Error::InvalidArgument("no perturbed traces supplied".into()));
    }
    for p in perturbed {
        if p.len() != trace.len() {
            return Err(Error::CountMismatch(format!(
                "perturbed trace has {} layers, original has {}",
                p.len(),
                trace.len()
            )));
        }
        for (a, b) in trace.layers().iter().zip(p.layers()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("mean_abs_diff", a.shape(), b.shape()));
            }
        }
    }
    let scale = 1.0 / (perturbed.len() * trace.batch_size()) as f64;
    Ok(trace
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let w = layer.row_len();
            let mut md = vec![0.0; w];
            for p in perturbed {
                for (orig, pert) in layer.data().chunks(w).zip(p.layer(i).data().chunks(w)) {
                    for ((acc, &a), &b) in md.iter_mut().zip(orig).zip(pert) {
                        *acc += (a - b).abs();
                    }
                }
            }
            md.iter_mut().for_each(|v| *v *= scale);
            md
        })
        .collect())
}

/// `NS` for one layer. Dead neurons (`MA = 0`) report `MD / (eps·|M_i|)`.
pub fn neuron_sensitivity(md: &[f64], ma: &[f64], eps_ns: f64, layer_width: usize) -> Vec<f64> {
    let norm = eps_ns * layer_width as f64;
    md.iter()
        .zip(ma)
        .map(|(&d, &a)| if a > 0.0 { d / (norm * a) } else { d / norm })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSensitivity {
    pub ma: Vec<f64>,
    pub md: Vec<f64>,
    pub ns: Vec<f64>,
}

/// MA, MD and NS for every traced layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityStats {
    pub layers: Vec<LayerSensitivity>,
    pub eps_ns: f64,
}

impl SensitivityStats {
    pub fn from_traces(trace: &ActivationTrace, perturbed: &[ActivationTrace], eps_ns: f64) -> Result<Self> {
        let ma = mean_abs_activation(trace);
        let md = mean_abs_diff(trace, perturbed)?;
        let layers = ma
            .into_iter()
            .zip(md)
            .map(|(ma, md)| {
                let ns = neuron_sensitivity(&md, &ma, eps_ns, ma.len());
                LayerSensitivity { ma, md, ns }
            })
            .collect();
        Ok(SensitivityStats { layers, eps_ns })
    }

    /// Σ NS·MA, with dead neurons contributing through the cancelled form.
    pub fn nsloss(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.ns.iter()
                    .zip(&l.ma)
                    .map(|(&ns, &ma)| if ma > 0.0 { ns * ma } else { ns })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Σ MD/(eps·|M_i|).
    pub fn nsloss_cancelled(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.md.iter().sum::<f64>() / (self.eps_ns * l.md.len() as f64))
            .sum()
    }
}

/// Runs the model on a batch and its perturbations and gathers the stats.
pub fn sensitivity_stats(model: &Model, x: &Tensor, cfg: &NsConfig, rng: &mut Rng) -> Result<SensitivityStats> {
    cfg.validate()?;
    let perturbed = sample_sphere(x, cfg.eps_ns, cfg.n_perturb, rng)?;
    let (_, trace) = model.forward_traced_values(x)?;
    let traces = perturbed
        .iter()
        .map(|p| model.forward_traced_values(p).map(|(_, t)| t))
        .collect::<Result<Vec<_>>>()?;
    SensitivityStats::from_traces(&trace, &traces, cfg.eps_ns)
}

/// How the per-neuron terms are combined on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// `Σ NS·MA` with `NS = MD/(eps·|M_i|·MA)`.
    Weighted,
    /// `Σ MD/(eps·|M_i|)`.
    Cancelled,
}

/// Differentiable NsLoss plus the clean-batch outputs of the same forward.
#[derive(Clone, Debug)]
pub struct NsLossTerms {
    pub loss: Var,
    /// Logits of the unperturbed batch.
    pub clean_logits: Var,
}

/// Builds NsLoss on `tape`. The clean batch and all perturbations go through
/// one stacked forward pass, so parameter gradients flow through both.
pub fn nsloss_on_tape(
    model: &dyn TracedModel,
    tape: &mut Tape,
    x: &Tensor,
    cfg: &NsConfig,
    rng: &mut Rng,
) -> Result<NsLossTerms> {
    nsloss_on_tape_with(model, tape, x, cfg, rng, Aggregation::Weighted)
}

pub fn nsloss_on_tape_with(
    model: &dyn TracedModel,
    tape: &mut Tape,
    x: &Tensor,
    cfg: &NsConfig,
    rng: &mut Rng,
    aggregation: Aggregation,
) -> Result<NsLossTerms> {
    cfg.validate()?;
    let b = x.rows();
    let n = cfg.n_perturb;
    let perturbed = sample_sphere(x, cfg.eps_ns, n, rng)?;
    let mut parts = vec![x];
    parts.extend(perturbed.iter());
    let stacked = tape.constant(Tensor::concat_rows(&parts)?);
    let out = model.forward_traced(tape, stacked)?;

    let mut total: Option<Var> = None;
    for &layer in &out.layers {
        let width = tape.shape(layer)[1];
        let norm = 1.0 / (cfg.eps_ns * width as f64);
        let clean = tape.slice_rows(layer, 0, b)?;

        let mut md_sum: Option<Var> = None;
        for k in 1..=n {
            let pert = tape.slice_rows(layer, k * b, (k + 1) * b)?;
            let diff = tape.sub(clean, pert)?;
            let abs = tape.abs(diff);
            let mean = tape.mean_rows(abs)?;
            md_sum = Some(match md_sum {
                Some(acc) => tape.add(acc, mean)?,
                None => mean,
            });
        }
        let md = tape.scale(md_sum.expect("n_perturb >= 1"), 1.0 / n as f64);

        let term = match aggregation {
            Aggregation::Cancelled => {
                let s = tape.sum(md);
                tape.scale(s, norm)
            }
            Aggregation::Weighted => {
                let abs_clean = tape.abs(clean);
                let ma = tape.mean_rows(abs_clean)?;
                // Dead neurons get MA replaced by 1, which reduces their term
                // to the cancelled form.
                let floor = tape.value(ma).map(|v| if v > 0.0 { 0.0 } else { 1.0 });
                let floor = tape.constant(floor);
                let safe_ma = tape.add(ma, floor)?;
                let ratio = tape.div(md, safe_ma)?;
                let ns = tape.scale(ratio, norm);
                let weighted = tape.mul(ns, safe_ma)?;
                tape.sum(weighted)
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let clean_logits = tape.slice_rows(out.logits, 0, b)?;
    Ok(NsLossTerms {
        loss: total.expect("at least the logit layer is traced"),
        clean_logits,
    })
}

/// NsLoss value for a fixed model.
pub fn nsloss(model: &dyn TracedModel, x: &Tensor, cfg: &NsConfig, rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let terms = nsloss_on_tape(model, &mut tape, x, cfg, rng)?;
    tape.value(terms.loss).item()
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    /// `CE + λ·NsLoss`.
    pub loss: Var,
    pub ce: Var,
    /// Absent when `λ = 0`, in which case the loss is exactly the CE.
    pub nsloss: Option<Var>,
}

/// `CE + λ·NsLoss` on a labelled batch.
pub fn total_loss(
    model: &dyn TracedModel,
    tape: &mut Tape,
    x: &Tensor,
    labels: &[usize],
    cfg: &NsConfig,
    rng: &mut Rng,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        let xv = tape.constant(x.clone());
        let logits = model.forward(tape, xv)?;
        let ce = tape.cross_entropy(logits, labels)?;
        return Ok(TotalLoss {
            loss: ce,
            ce,
            nsloss: None,
        });
    }
    let terms = nsloss_on_tape(model, tape, x, cfg, rng)?;
    let ce = tape.cross_entropy(terms.clean_logits, labels)?;
    let reg = tape.scale(terms.loss, cfg.lambda);
    let loss = tape.add(ce, reg)?;
    Ok(TotalLoss {
        loss,
        ce,
        nsloss: Some(terms.loss),
    })
}

/// `λ0 = log2(C) / NsLoss0`.
pub fn initial_lambda(nsloss0: f64, num_classes: usize) -> f64 {
    (num_classes as f64).log2() / nsloss0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaProbe {
    pub lambda: f64,
    /// Training cross-entropy the probe reported.
    pub ce: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub nsloss0: f64,
    pub lambda0: f64,
    pub probes: Vec<LambdaProbe>,
    pub lambda: f64,
}

/// Bisection (in log space) over `[λ0/√10, λ0·√10]`.
///
/// `probe(λ)` trains a copy of the model for one epoch with weight `λ` and
/// returns the training cross-entropy it reached; a probe is rejected when
/// that value reaches `log2(C)`. Returns the largest accepted λ.
pub fn search_lambda<P>(lambda0: f64, num_classes: usize, mut probe: P) -> Result<(Vec<LambdaProbe>, f64)>
where
    P: FnMut(f64) -> Result<f64>,
{
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::LambdaSearch(format!("initial lambda {lambda0} is not usable")));
    }
    let limit = (num_classes as f64).log2();
    let half_decade = 10f64.sqrt();
    let (mut lo, mut hi) = ((lambda0 / half_decade).ln(), (lambda0 * half_decade).ln());
    let mut probes = Vec::with_capacity(LAMBDA_PROBES);
    let mut best: Option<f64> = None;
    for i in 0..LAMBDA_PROBES {
        let lambda = if i == 0 { lambda0 } else { ((lo + hi) / 2.0).exp() };
        let ce = probe(lambda)?;
        let accepted = ce.is_finite() && ce < limit;
        probes.push(LambdaProbe { lambda, ce, accepted });
        if accepted {
            best = Some(best.map_or(lambda, |b: f64| b.max(lambda)));
            lo = lambda.ln();
        } else {
            hi = lambda.ln();
        }
    }
    match best {
        Some(lambda) => Ok((probes, lambda)),
        None => Err(Error::LambdaSearch(format!(
            "every probed lambda drove the training cross-entropy to log2({num_classes}); \
             smallest probe was {:.6}",
            probes.iter().map(|p| p.lambda).fold(f64::INFINITY, f64::min)
        ))),
    }
}

/// Full lambda-selection protocol on a pretrained model.
///
/// 1. average NsLoss over `batches` gives `NsLoss0`;
/// 2. `λ0 = log2(C)/NsLoss0`;
/// 3. [`search_lambda`] around `λ0` with the caller's one-epoch `probe`.
pub fn select_lambda<P>(
    model: &dyn TracedModel,
    batches: &[Tensor],
    cfg: &NsConfig,
    num_classes: usize,
    probe: P,
) -> Result<LambdaSelection>
where
    P: FnMut(f64) -> Result<f64>,
{
    if batches.is_empty() {
        return Err(Error::InvalidArgument("lambda selection needs at least one batch".into()));
    }
    let mut total = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        let mut rng = rng_from(cfg.seed, &[stream::LAMBDA, i as u64]);
        total += nsloss(model, batch, cfg, &mut rng)?;
    }
    let nsloss0 = total / batches.len() as f64;
    if nsloss0 <= 0.0 {
        return Err(Error::AlreadyInsensitive);
    }
    let lambda0 = initial_lambda(nsloss0, num_classes);
    let (probes, lambda) = search_lambda(lambda0, num_classes, probe)?;
    Ok(LambdaSelection {
        nsloss0,
        lambda0,
        probes,
        lambda,
    })
}
