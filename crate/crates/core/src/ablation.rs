//! Strategy × seed comparison of the ways to stand in for missing OCT.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{query_source, train, OctStrategy, TrainConfig};
use crate::error::{contract, Result};
use crate::inference::{evaluate, prototypes_from, Evaluation};
use crate::metrics::{format_mean_std, seed_average};
use crate::model::{seeded_stream, streams, Model};
use crate::world::{sample_batch_with, Sample, World, WorldConfig, EXEMPLAR_TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out fundus images per evaluation.
    pub test_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_size: 200,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_size < 2 {
            return Err(contract(format!("test_size must be >= 2, got {}", self.test_size)));
        }
        if self.seeds.is_empty() {
            return Err(contract("eval.seeds is empty"));
        }
        Ok(())
    }
}

/// Class-balanced held-out split from the evaluation stream of `seed`.
pub fn test_split(world: &World, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = seeded_stream(seed, streams::EVAL);
    Ok(sample_batch_with(world, size, &mut rng)?.samples)
}

/// Prototypes for every class of `world` under `strategy`, exemplar prompts.
pub fn strategy_prototypes(
    model: &Model,
    world: &World,
    strategy: OctStrategy,
    pool_size: usize,
    seed: u64,
) -> Result<Vec<crate::inference::ClassPrototype>> {
    let mut rng = seeded_stream(seed, streams::SUBSTITUTE);
    let mut prompts = Vec::with_capacity(world.num_classes());
    let mut queries = Vec::with_capacity(world.num_classes());
    for c in &world.classes {
        prompts.push(crate::world::render_prompt(EXEMPLAR_TEMPLATE, &c.name, &c.abbr)?);
        queries.push(query_source(strategy, world, model, c.class_id, pool_size, &mut rng)?);
    }
    prototypes_from(model, &prompts, &queries)
}

pub fn evaluate_strategy(
    model: &Model,
    world: &World,
    strategy: OctStrategy,
    pool_size: usize,
    test: &[Sample],
    seed: u64,
) -> Result<Evaluation> {
    let protos = strategy_prototypes(model, world, strategy, pool_size, seed)?;
    evaluate(model, &protos, test)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub strategy: OctStrategy,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_auroc: f64,
    pub macro_auprc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: OctStrategy,
    pub mean_roc: f64,
    pub std_roc: f64,
    pub mean_prc: f64,
    pub std_prc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// One row per strategy, in [`OctStrategy::ALL`] order.
    pub fn rows(&self) -> Result<Vec<AblationRow>> {
        OctStrategy::ALL
            .iter()
            .map(|&strategy| {
                let cells: Vec<&AblationCell> = self.cells.iter().filter(|c| c.strategy == strategy).collect();
                let roc: Vec<f64> = cells.iter().map(|c| c.macro_auroc).collect();
                let prc: Vec<f64> = cells.iter().map(|c| c.macro_auprc).collect();
                let (mean_roc, std_roc) = seed_average(&roc)?;
                let (mean_prc, std_prc) = seed_average(&prc)?;
                Ok(AblationRow {
                    strategy,
                    mean_roc,
                    std_roc,
                    mean_prc,
                    std_prc,
                })
            })
            .collect()
    }

    pub fn row(&self, strategy: OctStrategy) -> Result<AblationRow> {
        Ok(self.rows()?.into_iter().find(|r| r.strategy == strategy).expect("every strategy has a row"))
    }

    /// `strategy,mean_roc,std_roc,mean_prc,std_prc`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["strategy", "mean_roc", "std_roc", "mean_prc", "std_prc"])?;
        for r in self.rows()? {
            w.write_record([
                r.strategy.name().to_owned(),
                r.mean_roc.to_string(),
                r.std_roc.to_string(),
                r.mean_prc.to_string(),
                r.std_prc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> Result<String> {
        let mut s = format!("{:<16} {:>13} {:>13}\n", "strategy", "ROC", "PRC");
        for r in self.rows()? {
            s.push_str(&format!(
                "{:<16} {:>13} {:>13}\n",
                r.strategy.name(),
                format_mean_std(r.mean_roc, r.std_roc),
                format_mean_std(r.mean_prc, r.std_prc)
            ));
        }
        Ok(s)
    }
}

/// Seed `s` builds its world with seed `world.seed + s` and trains with seed
/// `s`; every strategy then shares that model and test split.
pub fn run_ablation(world: &WorldConfig, train_cfg: &TrainConfig, eval: &EvalConfig) -> Result<AblationReport> {
    eval.validate()?;
    train_cfg.validate()?;
    let mut cells = Vec::new();
    for &seed in &eval.seeds {
        let w = WorldConfig {
            seed: world.seed.wrapping_add(seed),
            ..world.clone()
        }
        .build()?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let model = train(&w, &cfg)?.checkpoint.model;
        let test = test_split(&w, eval.test_size, seed)?;
        for strategy in OctStrategy::ALL {
            let e = evaluate_strategy(&model, &w, strategy, cfg.substitute_pool, &test, seed)?;
            cells.push(AblationCell {
                strategy,
                seed,
                accuracy: e.accuracy,
                macro_auroc: e.macro_auroc,
                macro_auprc: e.macro_auprc,
            });
        }
    }
    Ok(AblationReport { cells })
}
