//! Linear probe on frozen, pooled fundus embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result, Shape};
use crate::matrix::{argmax, Matrix};
use crate::model::Model;
use crate::tape::Tape;

use super::train::sgd_step;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    /// `d x C`.
    pub weight: Matrix,
    /// `1 x C`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1.0,
        }
    }
}

impl ProbeHead {
    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        features.matmul(&self.weight)?.add_row(&self.bias)
    }

    /// Argmax class per feature row, lowest id on ties.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

/// Full-batch softmax regression from a zero start.
pub fn fit_probe(features: &Matrix, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    if labels.len() != features.rows() {
        return Err(Error::Shape {
            op: "fit_probe",
            left: features.shape(),
            right: Shape(labels.len(), 1),
        });
    }
    if num_classes == 0 {
        return Err(contract("probe needs at least one class"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(contract(format!("label {l} out of range for {num_classes} classes")));
    }
    let mut head = ProbeHead {
        weight: Matrix::zeros(features.cols(), num_classes),
        bias: Matrix::zeros(1, num_classes),
    };
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.param(&head.weight);
        let b = tape.param(&head.bias);
        let xw = tape.matmul(x, w)?;
        let logits = tape.add_row(xw, b)?;
        let loss = tape.cross_entropy_rows(logits, labels)?;
        tape.backward(loss)?;
        let grads = [tape.grad(w), tape.grad(b)];
        sgd_step(&mut [&mut head.weight, &mut head.bias], &grads, cfg.learning_rate)?;
    }
    Ok(head)
}

/// Stacked pooled fundus embeddings of `raws`.
pub fn fundus_features(model: &Model, raws: &[&Matrix]) -> Result<Matrix> {
    if raws.is_empty() {
        return Err(contract("no samples to embed"));
    }
    let rows = raws.iter().map(|r| model.fundus_embedding(r)).collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&rows.iter().collect::<Vec<_>>())
}

/// Trains a probe with every model tensor frozen. `model` is only read.
pub fn fine_tune_probe(
    model: &Model,
    samples: &[(Matrix, usize)],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeHead> {
    let raws: Vec<&Matrix> = samples.iter().map(|(m, _)| m).collect();
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();
    fit_probe(&fundus_features(model, &raws)?, &labels, num_classes, cfg)
}
