//! SGD with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `v ← μ·v + g; θ ← θ − lr·v`, one velocity buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let params = &mut model.params.tensors;
        if grads.len() != params.len() {
            return Err(Error::CountMismatch(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd step", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of a labelled batch and its parameter gradients.
pub fn ce_gradients(model: &Model, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let logits = model.spec.apply(&mut tape, &bound.params, xv)?.logits;
    let ce = tape.cross_entropy(logits, labels)?;
    let mut grads = tape.backward(ce)?;
    let g = bound.params.iter().map(|&p| grads.take(p)).collect();
    Ok((tape.value(ce).item()?, g))
}
