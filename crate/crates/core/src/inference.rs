//! OCT-free zero-shot classification against text prototypes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::inference_query;
use crate::engine::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::matrix::{argmax, cosine_sim, Matrix};
use crate::metrics::{accuracy, auprc, auroc, macro_over_classes, one_vs_rest};
use crate::model::Model;
use crate::world::{render_prompt, Sample, World, EXEMPLAR_TEMPLATE, SITE_TEMPLATE};

/// A candidate class as named in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLabel {
    pub name: String,
    pub abbr: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    /// Pooled `1 x d` refined text cue.
    pub refined_text: Matrix,
}

/// Prototypes for `classes` from `template`, queried by `sigmoid(P)`.
pub fn build_prototypes(model: &Model, classes: &[ClassLabel], template: &str) -> Result<Vec<ClassPrototype>> {
    let prompts = classes
        .iter()
        .map(|c| render_prompt(template, &c.name, &c.abbr))
        .collect::<Result<Vec<_>>>()?;
    let query = inference_query(&model.predilection);
    let queries = vec![query; prompts.len()];
    prototypes_from(model, &prompts, &queries)
}

/// One prototype per `(prompt, query source)` pair, numbered in order.
pub fn prototypes_from(model: &Model, prompts: &[String], queries: &[Matrix]) -> Result<Vec<ClassPrototype>> {
    if prompts.is_empty() {
        return Err(contract("no candidate classes"));
    }
    if prompts.len() != queries.len() {
        return Err(contract(format!("{} prompts but {} query sources", prompts.len(), queries.len())));
    }
    prompts
        .iter()
        .zip(queries)
        .enumerate()
        .map(|(class_id, (prompt, q))| {
            let text = model.text_tokens(prompt)?;
            Ok(ClassPrototype {
                class_id,
                refined_text: model.prototype(q, &text)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    /// Cosine similarity to each prototype, by class id.
    pub scores: Vec<f64>,
}

/// Highest-similarity prototype for one fundus image; lowest id wins ties.
pub fn classify(model: &Model, prototypes: &[ClassPrototype], fundus_raw: &Matrix) -> Result<Prediction> {
    if prototypes.is_empty() {
        return Err(contract("no prototypes to classify against"));
    }
    let f = model.fundus_embedding(fundus_raw)?;
    let scores = prototypes
        .iter()
        .map(|p| cosine_sim(f.row(0), p.refined_text.row(0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        class_id: argmax(&scores),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub truth: Vec<usize>,
    pub accuracy: f64,
    pub per_class_auroc: Vec<f64>,
    pub per_class_auprc: Vec<f64>,
    pub macro_auroc: f64,
    pub macro_auprc: f64,
}

pub fn score_matrix(predictions: &[Prediction]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = predictions.iter().map(|p| p.scores.clone()).collect();
    Matrix::from_rows(&rows)
}

/// Classifies every sample and summarizes with accuracy and one-vs-rest
/// AUROC/AUPRC.
pub fn evaluate(model: &Model, prototypes: &[ClassPrototype], samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(contract("no samples to evaluate"));
    }
    let predictions = samples
        .iter()
        .map(|s| classify(model, prototypes, &s.fundus_raw))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    summarize(predictions, truth)
}

pub fn summarize(predictions: Vec<Prediction>, truth: Vec<usize>) -> Result<Evaluation> {
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class_id).collect();
    let sets = one_vs_rest(&score_matrix(&predictions)?, &truth)?;
    let per_class_auroc = sets.iter().map(auroc).collect::<Result<Vec<_>>>()?;
    let per_class_auprc = sets.iter().map(auprc).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        accuracy: accuracy(&predicted, &truth)?,
        macro_auroc: macro_over_classes(&sets, auroc)?,
        macro_auprc: macro_over_classes(&sets, auprc)?,
        per_class_auroc,
        per_class_auprc,
        predictions,
        truth,
    })
}

/// Prototypes for a world's own classes from the exemplar template.
pub fn exemplar_prototypes(model: &Model, world: &World) -> Result<Vec<ClassPrototype>> {
    let labels: Vec<ClassLabel> = world
        .classes
        .iter()
        .map(|c| ClassLabel {
            name: c.name.clone(),
            abbr: c.abbr.clone(),
        })
        .collect();
    build_prototypes(model, &labels, EXEMPLAR_TEMPLATE)
}

/// Zero-shot evaluation on classes absent from training. Prompts spell out
/// each class's sites, since its name is unknown to the vocabulary.
pub fn zero_shot_unseen(ckpt: &Checkpoint, unseen: &World, test: &[Sample]) -> Result<Evaluation> {
    if let Some(c) = unseen.classes.iter().find(|c| ckpt.classes.contains(&c.name)) {
        return Err(contract(format!("class {:?} was seen in training", c.name)));
    }
    let prompts = unseen
        .classes
        .iter()
        .map(|c| render_prompt(&crate::world::fill_sites(SITE_TEMPLATE, &c.site_description()), &c.name, &c.abbr))
        .collect::<Result<Vec<_>>>()?;
    let query = inference_query(&ckpt.model.predilection);
    let prototypes = prototypes_from(&ckpt.model, &prompts, &vec![query; prompts.len()])?;
    evaluate(&ckpt.model, &prototypes, test)
}

/// `sample_id,true_class,predicted_class,score_<name>...` with classes by
/// name; `true_class` is empty when unknown.
pub fn write_predictions_csv<W: Write>(
    predictions: &[Prediction],
    truth: Option<&[usize]>,
    class_names: &[String],
    out: W,
) -> Result<()> {
    if let Some(t) = truth {
        if t.len() != predictions.len() {
            return Err(contract(format!("{} labels for {} predictions", t.len(), predictions.len())));
        }
        if let Some(bad) = t.iter().find(|&&c| c >= class_names.len()) {
            return Err(contract(format!("label {bad} out of range for {} classes", class_names.len())));
        }
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["sample_id".to_owned(), "true_class".to_owned(), "predicted_class".to_owned()];
    header.extend(class_names.iter().map(|n| format!("score_{n}")));
    w.write_record(&header)?;
    for (i, p) in predictions.iter().enumerate() {
        if p.scores.len() != class_names.len() {
            return Err(Error::Contract(format!(
                "prediction {i} has {} scores for {} classes",
                p.scores.len(),
                class_names.len()
            )));
        }
        let mut row = vec![
            i.to_string(),
            truth.map(|t| class_names[t[i]].clone()).unwrap_or_default(),
            class_names[p.class_id].clone(),
        ];
        row.extend(p.scores.iter().map(|s| s.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
