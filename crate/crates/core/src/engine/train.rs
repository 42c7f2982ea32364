use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result, Shape};
use crate::matrix::Matrix;
use crate::model::{seeded_stream, streams, Model};
use crate::tape::Tape;
use crate::world::{sample_batch_with, TripletBatch, World};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;

/// Linear ramp `base_lr · min(1, step / warmup_steps)`; `base_lr` when there
/// is no warmup.
pub fn warmup_lr(step: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

/// `p ← p − lr · g` for every pair.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(crate::error::contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, dx) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * dx;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every epoch, measured before each step's update.
    pub epoch_losses: Vec<f64>,
}

/// The fixed training set of one run: `steps_per_epoch` batches drawn once
/// from the run's data stream.
pub fn training_batches(world: &World, cfg: &TrainConfig) -> Result<Vec<TripletBatch>> {
    let mut rng = seeded_stream(cfg.seed, streams::DATA);
    (0..cfg.steps_per_epoch())
        .map(|_| sample_batch_with(world, cfg.batch_size, &mut rng))
        .collect()
}

pub fn train(world: &World, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::init(world, cfg.seed);
    train_from(world, model, cfg)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_from(world: &World, mut model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.n() != world.n || model.d() != world.d {
        return Err(Error::Shape {
            op: "train",
            left: Shape(model.n(), model.d()),
            right: Shape(world.n, world.d),
        });
    }
    let batches = training_batches(world, cfg)?;
    let loss_cfg = cfg.loss_config();
    let warmup_steps = cfg.warmup_epochs * batches.len();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let loss = match model.batch_loss(&mut tape, &vars, batch, &loss_cfg) {
                Ok(l) => l,
                // Overflowed embeddings after an update are a blow-up, not bad input.
                Err(Error::DegenerateVector(_)) if step > 0 => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Matrix> = vars.all().iter().map(|&v| tape.grad(v)).collect();
            let lr = warmup_lr(step, warmup_steps, cfg.learning_rate);
            sgd_step(&mut model.tensors_mut(), &grads, lr)?;
            if model.tensors().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Diverged { step, loss: value });
            }
            total += value;
            step += 1;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    let classes = world.classes.iter().map(|c| c.name.clone()).collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.clone(), model, classes),
        epoch_losses,
    })
}

/// `epoch,mean_loss` rows, 1-based epochs, with a header.
pub fn write_loss_csv<W: Write>(losses: &[f64], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    write_loss_csv(losses, std::fs::File::create(path)?)
}
