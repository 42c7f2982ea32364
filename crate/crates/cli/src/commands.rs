use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use predilect::ablation::{run_ablation, test_split};
use predilect::engine::{save_loss_csv, train, Checkpoint};
use predilect::inference::{build_prototypes, classify, write_predictions_csv, ClassLabel, Prediction};
use predilect::metrics::{accuracy, auprc, auroc, one_vs_rest};
use predilect::model::{pipeline_gradcheck, GRADCHECK_TOLERANCE};
use predilect::tape::Fault;
use predilect::verifier::{noise_sweep, random_sigmoid_outputs, squaring_violations};
use predilect::world::EXEMPLAR_TEMPLATE;
use predilect::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

/// Values sampled for the squaring check run alongside the noise sweep.
const SQUARING_SAMPLES: usize = 10_000;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    serde_json::to_writer_pretty(create(path)?, value)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

/// `run.ckpt` keeps its losses in `run.loss.csv`.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn train_cmd(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let world = cfg.world.build()?;
    let outcome = train(&world, &cfg.train)?;
    outcome.checkpoint.save(out)?;
    let losses = loss_csv_path(out);
    save_loss_csv(&outcome.epoch_losses, &losses)?;
    if let (Some(first), Some(last)) = (outcome.epoch_losses.first(), outcome.epoch_losses.last()) {
        println!("epochs: {}  loss: {first:.4} -> {last:.4}", outcome.epoch_losses.len());
    }
    println!("checkpoint: {}", out.display());
    println!("losses: {}", losses.display());
    Ok(())
}

pub fn ablate_cmd(config: &Path, out_dir: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", out_dir.display())))?;
    let report = run_ablation(&cfg.world, &cfg.train, &cfg.eval)?;
    let path = out_dir.join("ablation.csv");
    report.write_csv(create(&path)?)?;
    print!("{}", report.table()?);
    println!("table: {}", path.display());
    Ok(())
}

pub fn verify_cmd(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let report = noise_sweep(&cfg.verify)?;
    report.write_csv(create(out)?)?;
    print!("{}", report.table());
    let monotone = report.non_increasing_within(2.0);
    println!("mean tau non-increasing within 2 pooled SE: {}", if monotone { "yes" } else { "no" });
    let violations = squaring_violations(&random_sigmoid_outputs(SQUARING_SAMPLES, cfg.verify.seed))?;
    println!("squaring order violations over {SQUARING_SAMPLES} sigmoid outputs: {violations}");
    if violations > 0 {
        return Err(Failure::verification("squaring did not preserve order on sigmoid outputs"));
    }
    Ok(())
}

/// One entry of a classify input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// `n x d` raw fundus features, row-major.
    pub fundus: Vec<Vec<f64>>,
    /// True class name, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Accuracy plus AUROC/AUPRC averaged over the classes that have both
/// positives and negatives among the labelled samples.
fn summary_lines(predictions: &[Prediction], truth: &[usize]) -> Result<Vec<String>, Failure> {
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class_id).collect();
    let scores = Matrix::from_rows(&predictions.iter().map(|p| p.scores.clone()).collect::<Vec<_>>())?;
    let sets = one_vs_rest(&scores, truth)?;
    let scorable: Vec<_> = sets.iter().filter(|s| s.positives() > 0 && s.negatives() > 0).collect();
    let mut lines = vec![format!("accuracy,{}", accuracy(&predicted, truth)?)];
    if scorable.is_empty() {
        lines.push("macro_auroc,n/a".into());
        lines.push("macro_auprc,n/a".into());
    } else {
        let k = scorable.len() as f64;
        let roc = scorable.iter().map(|s| auroc(s)).sum::<predilect::Result<f64>>()? / k;
        let prc = scorable.iter().map(|s| auprc(s)).sum::<predilect::Result<f64>>()? / k;
        lines.push(format!("macro_auroc,{roc}"));
        lines.push(format!("macro_auprc,{prc}"));
    }
    Ok(lines)
}

pub fn classify_cmd(ckpt: &Path, classes: &Path, samples: &Path, out: &Path, template: Option<&str>) -> Result<(), Failure> {
    let checkpoint = Checkpoint::load(ckpt).map_err(|e| Failure::input(format!("{}: {e}", ckpt.display())))?;
    let labels: Vec<ClassLabel> = read_json(classes, "classes file")?;
    let records: Vec<SampleRecord> = read_json(samples, "samples file")?;
    if records.is_empty() {
        return Err(Failure::input(format!("samples file {} has no samples", samples.display())));
    }
    let model = &checkpoint.model;
    let names: Vec<String> = labels.iter().map(|c| c.name.clone()).collect();
    let prototypes = build_prototypes(model, &labels, template.unwrap_or(EXEMPLAR_TEMPLATE))?;

    let mut predictions = Vec::with_capacity(records.len());
    let mut truth = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let raw = Matrix::from_rows(&r.fundus).map_err(|e| Failure::input(format!("sample {i}, field fundus: {e}")))?;
        if (raw.rows(), raw.cols()) != (model.n(), model.d()) {
            return Err(Failure::input(format!(
                "sample {i}, field fundus: expected {}x{}, got {}x{}",
                model.n(),
                model.d(),
                raw.rows(),
                raw.cols()
            )));
        }
        predictions.push(classify(model, &prototypes, &raw)?);
        if let Some(label) = &r.label {
            let id = names
                .iter()
                .position(|n| n == label)
                .ok_or_else(|| Failure::input(format!("sample {i}, field label: unknown class {label:?}")))?;
            truth.push(id);
        }
    }
    let labelled = match truth.len() {
        0 => None,
        k if k == records.len() => Some(truth.as_slice()),
        k => return Err(Failure::input(format!("{k} of {} samples are labelled; label all or none", records.len()))),
    };

    write_predictions_csv(&predictions, labelled, &names, create(out)?)?;
    println!("predictions: {}", out.display());
    if let Some(t) = labelled {
        for line in summary_lines(&predictions, t)? {
            println!("{line}");
        }
    }
    Ok(())
}

pub fn gradcheck_cmd(corrupt_backward: bool) -> Result<(), Failure> {
    let fault = corrupt_backward.then_some(Fault::SigmoidGrad);
    let report = pipeline_gradcheck(fault)?;
    for t in &report.tensors {
        println!("{:<16} {:.3e}", t.name, t.max_relative_error);
    }
    let worst = report.max_relative_error();
    println!("max relative error: {worst:.3e}");
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::verification(format!(
            "gradient check failed: {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

pub fn export_world_cmd(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    write_json(out, &cfg.world.build()?.to_document())
}

/// Held-out samples of the configured world in the classify input format,
/// plus the matching classes file.
pub fn make_samples_cmd(
    config: &Path,
    count: usize,
    seed: u64,
    classes_out: &Path,
    samples_out: &Path,
    unlabelled: bool,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let world = cfg.world.build()?;
    let labels: Vec<ClassLabel> = world
        .classes
        .iter()
        .map(|c| ClassLabel {
            name: c.name.clone(),
            abbr: c.abbr.clone(),
        })
        .collect();
    let records: Vec<SampleRecord> = test_split(&world, count, seed)?
        .into_iter()
        .map(|s| SampleRecord {
            fundus: (0..s.fundus_raw.rows()).map(|i| s.fundus_raw.row(i).to_vec()).collect(),
            label: (!unlabelled).then(|| labels[s.class_id].name.clone()),
        })
        .collect();
    write_json(classes_out, &labels)?;
    write_json(samples_out, &records)
}
