//! Training loop for the four regimes, per-epoch logging and the
//! harness side of lambda selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{adv_training_step, jacobian_penalty_fd};
use crate::checkpoint::load_checkpoint_for;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Regime, Splits};
use crate::metrics::{evaluate_suite_with, MetricSelection, MAX_SENS, FAITH_EST, SPARSENESS};
use crate::model::{Model, ModelFn};
use crate::nsloss::{nsloss, select_lambda, total_loss, LambdaSelection, NsConfig};
use crate::optim::{ce_gradients, Sgd};
use crate::rng::{rng_from, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Number of batches averaged for the initial NsLoss of lambda selection.
pub const LAMBDA_BATCHES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub max_sens: Option<f64>,
    pub faith_est: Option<f64>,
    pub sparseness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based; 0 describes the model before training.
    pub epoch: usize,
    /// Mean per-batch training cross-entropy (nats). For epoch 0, the
    /// cross-entropy of the untouched model on the training set.
    pub train_ce: f64,
    /// Accuracy on the test split.
    pub val_acc: f64,
    /// NsLoss on the fixed evaluation subset, when an `ns` block is set.
    pub nsloss: Option<f64>,
    pub snapshot: Option<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// State before the first update.
    pub initial: EpochLog,
    /// One entry per completed epoch.
    pub logs: Vec<EpochLog>,
}

/// Per-batch cross-entropy summary of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_ce: f64,
    pub max_ce: f64,
}

/// Fresh parameters from `cfg.seed`, or the configured starting checkpoint.
pub fn initial_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let spec = cfg.model_spec(data)?;
    match &cfg.init_checkpoint {
        Some(path) => load_checkpoint_for(path, &spec),
        None => Model::init(spec, cfg.seed),
    }
}

pub fn accuracy(model: &dyn ModelFn, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let mut correct = 0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x = data.inputs.slice_rows(start, end)?;
        let pred = model.logits(&x)?.argmax_rows();
        correct += pred
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn mean_ce(model: &Model, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x = data.inputs.slice_rows(start, end)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.forward(&mut tape, xv)?;
        let ce = tape.cross_entropy(logits, &data.labels[start..end])?;
        total += tape.value(ce).item()? * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

fn batch_gradients(
    cfg: &ExperimentConfig,
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    epoch: usize,
    batch: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let path = [epoch as u64, batch as u64];
    match cfg.regime {
        Regime::Standard | Regime::Advtrain => ce_gradients(model, x, labels),
        Regime::Nsloss => {
            let ns = cfg.ns_config()?;
            if ns.lambda == 0.0 {
                return ce_gradients(model, x, labels);
            }
            let mut rng = rng_from(cfg.seed, &[stream::NSLOSS, ns.seed, path[0], path[1]]);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = total_loss(&bound, &mut tape, x, labels, ns, &mut rng)?;
            let mut grads = tape.backward(loss.loss)?;
            let g = bound.params.iter().map(|&p| grads.take(p)).collect();
            Ok((tape.value(loss.ce).item()?, g))
        }
        Regime::Jacobreg => {
            let jr = cfg
                .jacobreg
                .as_ref()
                .ok_or_else(|| Error::Config("regime jacobreg needs a \"jacobreg\" block".into()))?;
            if jr.weight == 0.0 {
                return ce_gradients(model, x, labels);
            }
            let mut rng = rng_from(cfg.seed, &[stream::JACOBIAN, path[0], path[1]]);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let logits = bound.forward(&mut tape, xv)?;
            let ce = tape.cross_entropy(logits, labels)?;
            let penalty = jacobian_penalty_fd(&bound, &mut tape, x, jr.n_proj, jr.h, &mut rng)?;
            let weighted = tape.scale(penalty, jr.weight);
            let loss = tape.add(ce, weighted)?;
            let mut grads = tape.backward(loss)?;
            let g = bound.params.iter().map(|&p| grads.take(p)).collect();
            Ok((tape.value(ce).item()?, g))
        }
    }
}

/// One pass over `data` in the shuffled order of `epoch` (0-based).
pub fn train_epoch(
    cfg: &ExperimentConfig,
    model: &mut Model,
    optimizer: &mut Sgd,
    data: &Dataset,
    epoch: usize,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
    let limit = 10.0 * (data.num_classes as f64).log2();
    let (mut sum, mut max, mut count) = (0.0, f64::NEG_INFINITY, 0usize);
    for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, labels) = data.batch(idx)?;
        let ce = match (cfg.regime, &cfg.pgd) {
            (Regime::Advtrain, Some(pgd)) => {
                let mut rng = rng_from(cfg.seed, &[stream::PGD, epoch as u64, batch as u64]);
                adv_training_step(model, &x, &labels, pgd, optimizer, &mut rng)?
            }
            (Regime::Advtrain, None) => {
                return Err(Error::Config("regime advtrain needs a \"pgd\" block".into()))
            }
            _ => {
                let (ce, grads) = batch_gradients(cfg, model, &x, &labels, epoch, batch)?;
                if ce.is_finite() && ce <= limit {
                    optimizer.step(model, &grads)?;
                }
                ce
            }
        };
        if !(ce.is_finite() && ce <= limit) {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch,
                ce,
                limit,
            });
        }
        sum += ce;
        max = max.max(ce);
        count += 1;
    }
    Ok(EpochStats {
        mean_ce: sum / count as f64,
        max_ce: max,
    })
}

fn eval_subset(cfg: &ExperimentConfig, splits: &Splits) -> Result<Tensor> {
    let n = cfg.snapshot_samples.min(splits.test.len());
    splits.test.inputs.slice_rows(0, n)
}

fn eval_nsloss(model: &Model, subset: &Tensor, ns: &NsConfig, seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[stream::NSLOSS, u64::MAX]);
    nsloss(model, subset, ns, &mut rng)
}

fn describe(cfg: &ExperimentConfig, splits: &Splits, model: &Model, epoch: usize, train_ce: f64) -> Result<EpochLog> {
    let subset = eval_subset(cfg, splits)?;
    let nsloss = match &cfg.ns {
        Some(ns) => Some(eval_nsloss(model, &subset, ns, cfg.seed)?),
        None => None,
    };
    let snapshot = if cfg.snapshot_metrics {
        let explainer = cfg.explainer.build(&splits.train.inputs, cfg.seed);
        let report = evaluate_suite_with(model, explainer.as_ref(), &subset, &cfg.metrics, MetricSelection::SNAPSHOT)?;
        Some(Snapshot {
            max_sens: report.mean(MAX_SENS),
            faith_est: report.mean(FAITH_EST),
            sparseness: report.mean(SPARSENESS),
        })
    } else {
        None
    };
    Ok(EpochLog {
        epoch,
        train_ce,
        val_acc: accuracy(model, &splits.test)?,
        nsloss,
        snapshot,
    })
}

/// Trains `model` for `cfg.epochs` epochs with a fresh optimizer.
pub fn train_model(cfg: &ExperimentConfig, splits: &Splits, mut model: Model) -> Result<TrainOutcome> {
    cfg.validate()?;
    let initial = describe(cfg, splits, &model, 0, mean_ce(&model, &splits.train)?)?;
    let mut optimizer = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(cfg, &mut model, &mut optimizer, &splits.train, epoch)?;
        logs.push(describe(cfg, splits, &model, epoch + 1, stats.mean_ce)?);
    }
    Ok(TrainOutcome { model, initial, logs })
}

/// Builds the starting model from the config and trains it.
pub fn train(cfg: &ExperimentConfig, splits: &Splits) -> Result<TrainOutcome> {
    let model = initial_model(cfg, &splits.train)?;
    train_model(cfg, splits, model)
}

/// Lambda selection for a pretrained model.
///
/// NsLoss0 is averaged over [`LAMBDA_BATCHES`] random training batches. Each
/// probe trains a copy of `model` for one epoch with the probed λ and
/// reports the highest per-batch cross-entropy of that epoch in bits, so a
/// probe is rejected once any batch does as badly as a uniform guess.
pub fn select_lambda_for(cfg: &ExperimentConfig, splits: &Splits, model: &Model) -> Result<LambdaSelection> {
    let ns = cfg.ns_config()?.clone();
    let data = &splits.train;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(cfg.seed, &[stream::LAMBDA, u64::MAX]));
    let batches = order
        .chunks(cfg.batch_size)
        .take(LAMBDA_BATCHES)
        .map(|idx| data.batch(idx).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    let probe_cfg = |lambda: f64| {
        let mut c = cfg.clone();
        c.regime = Regime::Nsloss;
        c.ns = Some(NsConfig { lambda, ..ns.clone() });
        c
    };
    select_lambda(model, &batches, &ns, data.num_classes, |lambda| {
        let c = probe_cfg(lambda);
        let mut copy = model.clone();
        let mut optimizer = Sgd::new(c.learning_rate, c.momentum);
        match train_epoch(&c, &mut copy, &mut optimizer, data, 0) {
            Ok(stats) => Ok(stats.max_ce / std::f64::consts::LN_2),
            Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    })
}
