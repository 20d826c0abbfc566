//! Robustness baselines: finite-difference Jacobian regularization, L∞ PGD
//! attacks, adversarial training steps and PGD robust accuracy.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{target_input_gradients, Model, ModelFn};
use crate::optim::{ce_gradients, Sgd};
use crate::rng::{rng_from, stream, unit_direction, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn default_n_proj() -> usize {
    1
}

fn default_fd_step() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobRegConfig {
    /// Weight of the Jacobian penalty.
    pub weight: f64,
    #[serde(default = "default_n_proj")]
    pub n_proj: usize,
    /// Central-difference step along each projection direction.
    #[serde(default = "default_fd_step")]
    pub h: f64,
}

impl JacobRegConfig {
    pub fn new(weight: f64) -> Self {
        JacobRegConfig {
            weight,
            n_proj: default_n_proj(),
            h: default_fd_step(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || self.n_proj == 0 || !(self.h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "jacobian regularization needs weight >= 0, n_proj >= 1 and h > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Projection directions for the Jacobian estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projections {
    /// `n` independent uniform unit vectors per sample.
    Random(usize),
    /// The standard basis; exact for models linear in their input.
    Basis,
}

/// Random-projection estimate of the squared Frobenius norm of the
/// input-to-logit Jacobian, averaged over the batch.
///
/// For a unit direction `v`, `‖Jv‖²` is estimated by the central difference
/// `(M(x+hv) − M(x−hv)) / 2h` and scaled by the input dimension `d`, which
/// makes the estimate unbiased for `‖J‖²_F` up to the finite-difference
/// error. Differentiable with respect to any model parameters on the tape.
pub fn jacobian_penalty_fd(
    model: &dyn ModelFn,
    tape: &mut Tape,
    x: &Tensor,
    n_proj: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<Var> {
    jacobian_penalty_fd_with(model, tape, x, Projections::Random(n_proj), h, rng)
}

pub fn jacobian_penalty_fd_with(
    model: &dyn ModelFn,
    tape: &mut Tape,
    x: &Tensor,
    projections: Projections,
    h: f64,
    rng: &mut Rng,
) -> Result<Var> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let (b, d) = (x.rows(), x.row_len());
    let n_proj = match projections {
        Projections::Random(0) => {
            return Err(Error::InvalidArgument("n_proj must be at least 1".into()));
        }
        Projections::Random(n) => n,
        Projections::Basis => d,
    };
    let mut shifted = Vec::with_capacity(2 * n_proj);
    for k in 0..n_proj {
        let mut plus = x.clone();
        let mut minus = x.clone();
        for m in 0..b {
            let dir = match projections {
                Projections::Random(_) => unit_direction(rng, d),
                Projections::Basis => {
                    let mut e = vec![0.0; d];
                    e[k] = 1.0;
                    e
                }
            };
            for ((p, q), v) in plus.row_mut(m).iter_mut().zip(minus.row_mut(m)).zip(&dir) {
                *p += h * v;
                *q -= h * v;
            }
        }
        shifted.push(plus);
        shifted.push(minus);
    }
    let refs: Vec<&Tensor> = shifted.iter().collect();
    let input = tape.constant(Tensor::concat_rows(&refs)?);
    let out = model.forward(tape, input)?;

    let mut total: Option<Var> = None;
    for k in 0..n_proj {
        let plus = tape.slice_rows(out, 2 * k * b, (2 * k + 1) * b)?;
        let minus = tape.slice_rows(out, (2 * k + 1) * b, (2 * k + 2) * b)?;
        let diff = tape.sub(plus, minus)?;
        let jv = tape.scale(diff, 1.0 / (2.0 * h));
        let sq = tape.mul(jv, jv)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("n_proj >= 1");
    Ok(tape.scale(total, d as f64 / (n_proj * b) as f64))
}

/// `Σ_c ‖∇_x logit_c(x)‖²` from one backward pass per class.
pub fn jacobian_frobenius_exact(model: &dyn ModelFn, x: &[f64]) -> Result<f64> {
    let probe = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let classes = model.logits(&probe)?.row_len();
    let rows: Vec<&[f64]> = vec![x; classes];
    let stacked = Tensor::from_rows(&rows)?;
    let targets: Vec<usize> = (0..classes).collect();
    let (grads, _) = target_input_gradients(model, &stacked, &targets)?;
    Ok(grads.data().iter().map(|g| g * g).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
}

fn default_random_init() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    #[serde(default)]
    pub norm: Norm,
    /// Perturbation budget.
    pub eps: f64,
    /// Step size; defaults to `2.5·eps/steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_random_init")]
    pub random_init: bool,
}

impl PgdConfig {
    pub fn new(eps: f64, steps: usize) -> Self {
        PgdConfig {
            norm: Norm::Linf,
            eps,
            step_size: None,
            steps,
            random_init: true,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.eps / self.steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || self.steps == 0 || !(self.alpha() >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pgd needs eps >= 0, steps >= 1 and a non-negative step size, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L∞ projected gradient ascent on the cross-entropy, projected onto the
/// intersection of the eps-ball around `x` and `[0,1]^d` after every step.
pub fn pgd_attack(
    model: &dyn ModelFn,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.rank() != 2 || x.rows() != labels.len() {
        return Err(Error::shape("pgd_attack", x.shape(), &[labels.len()]));
    }
    let eps = cfg.eps;
    let project = |adv: &mut Tensor| {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    };
    let mut adv = x.clone();
    if cfg.random_init && eps > 0.0 {
        let dist = Uniform::new_inclusive(-eps, eps).expect("finite eps");
        for v in adv.data_mut() {
            *v += dist.sample(rng);
        }
        project(&mut adv);
    }
    let alpha = cfg.alpha();
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let input = tape.leaf(adv.clone());
        let logits = model.forward(&mut tape, input)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let grad = tape.backward(ce)?.take(input);
        for (a, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += alpha * sign(*g);
        }
        project(&mut adv);
    }
    Ok(adv)
}

/// One SGD step on the cross-entropy of PGD examples crafted against the
/// current parameters. Returns the cross-entropy at the attacked inputs.
pub fn adv_training_step(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    optimizer: &mut Sgd,
    rng: &mut Rng,
) -> Result<f64> {
    let adv = pgd_attack(model, x, labels, cfg, rng)?;
    let (ce, grads) = ce_gradients(model, &adv, labels)?;
    optimizer.step(model, &grads)?;
    Ok(ce)
}

/// Fraction of samples still classified correctly after [`pgd_attack`].
/// Samples are attacked in chunks of `batch` rows, each with its own stream
/// derived from `seed`.
pub fn robust_accuracy(
    model: &dyn ModelFn,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    seed: u64,
) -> Result<f64> {
    const CHUNK: usize = 256;
    if labels.is_empty() || x.rows() != labels.len() {
        return Err(Error::InvalidArgument(
            "robust accuracy needs a non-empty dataset with one label per sample".into(),
        ));
    }
    let n = labels.len();
    let mut correct = 0usize;
    for (chunk, start) in (0..n).step_by(CHUNK).enumerate() {
        let end = (start + CHUNK).min(n);
        let xb = x.slice_rows(start, end)?;
        let yb = &labels[start..end];
        let mut rng = rng_from(seed, &[stream::EVAL, chunk as u64]);
        let adv = pgd_attack(model, &xb, yb, cfg, &mut rng)?;
        let pred = model.logits(&adv)?.argmax_rows();
        correct += pred.iter().zip(yb).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / n as f64)
}
