use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::LossConfig;
use crate::objectives::LossWeights;

/// How the query source for a class prototype is obtained when no paired
/// OCT is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OctStrategy {
    /// One randomly drawn OCT sample of the class, encoded and gated.
    RandomSelection,
    /// Mean encoded OCT over a pool of class samples, gated.
    AverageLatent,
    /// `sigmoid(P)`; no OCT at all.
    LatentP,
}

impl OctStrategy {
    pub const ALL: [OctStrategy; 3] = [OctStrategy::RandomSelection, OctStrategy::AverageLatent, OctStrategy::LatentP];

    pub fn name(self) -> &'static str {
        match self {
            OctStrategy::RandomSelection => "RandomSelection",
            OctStrategy::AverageLatent => "AverageLatent",
            OctStrategy::LatentP => "LatentP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub oct_strategy: OctStrategy,
    /// Triplets per epoch; the set is drawn once per run and revisited.
    pub samples_per_epoch: usize,
    pub symmetric: bool,
    pub aux_weight: f64,
    /// Class sample pool used by the OCT-based strategies.
    pub substitute_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 10,
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 0,
            tau: 0.07,
            lambda1: 0.4,
            lambda2: 0.6,
            oct_strategy: OctStrategy::LatentP,
            samples_per_epoch: 64,
            symmetric: false,
            aux_weight: 0.0,
            substitute_pool: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(contract(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(contract(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(contract(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.samples_per_epoch < self.batch_size {
            return Err(contract(format!(
                "samples_per_epoch ({}) is smaller than one batch ({})",
                self.samples_per_epoch, self.batch_size
            )));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(contract(format!("aux_weight must be >= 0, got {}", self.aux_weight)));
        }
        if self.substitute_pool == 0 {
            return Err(contract("substitute_pool must be >= 1"));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            symmetric: self.symmetric,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.loss_weights(),
            aux_weight: self.aux_weight,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }
}
