//! Training loop, checkpoints, linear probing and OCT substitutes.

mod checkpoint;
mod config;
mod probe;
mod substitute;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{OctStrategy, TrainConfig};
pub use probe::{fine_tune_probe, fit_probe, fundus_features, ProbeConfig, ProbeHead};
pub use substitute::{average_latent, oct_substitute, query_source};
pub use train::{save_loss_csv, sgd_step, train, train_from, training_batches, warmup_lr, write_loss_csv, TrainOutcome};
