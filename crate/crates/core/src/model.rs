//! The full trainable parameter set and the batch forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attend, cross_attend_tracked, gate_tracked, AttentionHead, HeadVars, PredilectionMatrix};
use crate::encoders::{encode_text, encode_text_tracked, Encoder, EncoderVars, Modality, TextVocabulary};
use crate::error::{contract, Result};
use crate::gradcheck::{finite_diff_grad, relative_error};
use crate::matrix::Matrix;
use crate::objectives::{contrastive_loss_tracked, total_loss_tracked, LossWeights};
use crate::tape::{Fault, Tape, Var};
use crate::world::{make_world, sample_batch, TripletBatch, World};

/// Independent ChaCha stream `stream` under `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used when deriving generators from one run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const SUBSTITUTE: u64 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fundus: Encoder,
    pub oct: Encoder,
    pub vocab: TextVocabulary,
    pub predilection: PredilectionMatrix,
    pub head: AttentionHead,
}

/// Objective settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Weight of the optional fundus ↔ refined-cue term; 0 disables it.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            aux_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub fundus: EncoderVars,
    pub oct: EncoderVars,
    pub text: Var,
    pub predilection: Var,
    pub head: HeadVars,
}

impl ModelVars {
    /// Same order as [`Model::tensors`].
    pub fn all(&self) -> [Var; 9] {
        [
            self.fundus.weight,
            self.fundus.bias,
            self.oct.weight,
            self.oct.bias,
            self.text,
            self.predilection,
            self.head.w_q,
            self.head.w_k,
            self.head.w_v,
        ]
    }
}

pub const TENSOR_NAMES: [&str; 9] = [
    "fundus.weight",
    "fundus.bias",
    "oct.weight",
    "oct.bias",
    "text.embedding",
    "predilection",
    "attention.w_q",
    "attention.w_k",
    "attention.w_v",
];

impl Model {
    /// Fresh parameters for `world`; the vocabulary covers every prompt in
    /// the world's banks.
    pub fn init(world: &World, seed: u64) -> Self {
        let mut rng = seeded_stream(seed, streams::INIT);
        let d = world.d;
        let prompts = world.classes.iter().flat_map(|c| c.prompt_bank.iter().map(String::as_str));
        let vocab = TextVocabulary::build(prompts, d, &mut rng);
        Self {
            fundus: Encoder::init(Modality::Fundus, d, &mut rng),
            oct: Encoder::init(Modality::Oct, d, &mut rng),
            vocab,
            predilection: PredilectionMatrix::init(world.n, d, &mut rng),
            head: AttentionHead::init(d, &mut rng),
        }
    }

    pub fn n(&self) -> usize {
        self.predilection.logits.rows()
    }

    pub fn d(&self) -> usize {
        self.predilection.logits.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 9] {
        [
            (TENSOR_NAMES[0], &self.fundus.weight),
            (TENSOR_NAMES[1], &self.fundus.bias),
            (TENSOR_NAMES[2], &self.oct.weight),
            (TENSOR_NAMES[3], &self.oct.bias),
            (TENSOR_NAMES[4], &self.vocab.embedding),
            (TENSOR_NAMES[5], &self.predilection.logits),
            (TENSOR_NAMES[6], &self.head.w_q),
            (TENSOR_NAMES[7], &self.head.w_k),
            (TENSOR_NAMES[8], &self.head.w_v),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.fundus.weight,
            &mut self.fundus.bias,
            &mut self.oct.weight,
            &mut self.oct.bias,
            &mut self.vocab.embedding,
            &mut self.predilection.logits,
            &mut self.head.w_q,
            &mut self.head.w_k,
            &mut self.head.w_v,
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            fundus: self.fundus.register(tape, trainable),
            oct: self.oct.register(tape, trainable),
            text: self.vocab.register(tape, trainable),
            predilection: self.predilection.register(tape, trainable),
            head: self.head.register(tape, trainable),
        }
    }

    /// Pooled `1 x d` fundus embedding.
    pub fn fundus_embedding(&self, raw: &Matrix) -> Result<Matrix> {
        Ok(self.fundus.encode(raw)?.mean_rows())
    }

    /// Token-level `n x d` OCT embedding, ungated.
    pub fn oct_tokens(&self, raw: &Matrix) -> Result<Matrix> {
        self.oct.encode(raw)
    }

    pub fn text_tokens(&self, prompt: &str) -> Result<Matrix> {
        encode_text(&self.vocab, prompt, self.n())
    }

    /// Accentuated prototype `mean_rows(F_OT ⊙ query_source)` for a text
    /// embedding. Text rows are identical, so attention alone cannot make the
    /// refined cue depend on the query; the element-wise product is what lets
    /// the query's location emphasis reach the prototype.
    pub fn prototype(&self, query_source: &Matrix, text: &Matrix) -> Result<Matrix> {
        let fused = cross_attend(&self.head, query_source, text)?;
        Ok(fused.refined.hadamard(query_source)?.mean_rows())
    }

    /// Scalar training objective for one batch on `tape`.
    pub fn batch_loss(&self, tape: &mut Tape, vars: &ModelVars, batch: &TripletBatch, cfg: &LossConfig) -> Result<Var> {
        if batch.len() < 2 {
            return Err(contract(format!("batch size must be >= 2, got {}", batch.len())));
        }
        let n = self.n();
        let mut fundus = Vec::with_capacity(batch.len());
        let mut oct = Vec::with_capacity(batch.len());
        let mut text = Vec::with_capacity(batch.len());
        let mut refined = Vec::new();
        for s in &batch.samples {
            let f_raw = tape.constant(s.fundus_raw.clone());
            let f = vars.fundus.encode(tape, f_raw)?;
            fundus.push(tape.mean_rows(f));

            let o_raw = tape.constant(s.oct_raw.clone());
            let o = vars.oct.encode(tape, o_raw)?;
            let op = gate_tracked(tape, vars.predilection, o)?;
            oct.push(tape.mean_rows(op));

            let t = encode_text_tracked(tape, &self.vocab, vars.text, &s.prompt, n)?;
            text.push(tape.mean_rows(t));

            if cfg.aux_weight > 0.0 {
                let fused = cross_attend_tracked(tape, vars.head, op, t)?;
                let accent = tape.hadamard(fused.refined, op)?;
                refined.push(tape.mean_rows(accent));
            }
        }
        let f = tape.vstack(&fundus)?;
        let o = tape.vstack(&oct)?;
        let t = tape.vstack(&text)?;
        let main = total_loss_tracked(tape, f, o, t, &cfg.weights)?;
        if refined.is_empty() {
            return Ok(main);
        }
        let r = tape.vstack(&refined)?;
        let aux = contrastive_loss_tracked(tape, f, r, cfg.weights.tau)?;
        let aux = tape.scale(aux, cfg.aux_weight);
        tape.add(main, aux)
    }

    /// Loss value with every parameter held constant.
    pub fn evaluate_loss(&self, batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let loss = self.batch_loss(&mut tape, &vars, batch, cfg)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Analytic gradients of the batch loss, in [`Model::tensors`] order.
    pub fn gradients(&self, batch: &TripletBatch, cfg: &LossConfig, fault: Option<Fault>) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        let vars = self.register(&mut tape, true);
        let loss = self.batch_loss(&mut tape, &vars, batch, cfg)?;
        tape.backward(loss)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, vars.all().iter().map(|&v| tape.grad(v)).collect()))
    }
}

/// Largest relative error found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        let worst = self.max_relative_error();
        worst.is_finite() && worst < tolerance
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Compares backprop against central differences for every parameter tensor
/// on a fixed `B = 2, n = 2, d = 4` instance, with the auxiliary term on so
/// the attention projections are exercised.
pub fn pipeline_gradcheck(fault: Option<Fault>) -> Result<GradcheckReport> {
    let world = make_world(2, 2, 4, 17)?;
    let batch = sample_batch(&world, 2, 0.25, 3)?;
    let model = Model::init(&world, 5);
    let cfg = LossConfig {
        weights: LossWeights::default(),
        aux_weight: 0.5,
    };
    gradcheck_model(&model, &batch, &cfg, fault)
}

pub fn gradcheck_model(model: &Model, batch: &TripletBatch, cfg: &LossConfig, fault: Option<Fault>) -> Result<GradcheckReport> {
    let (_, analytic) = model.gradients(batch, cfg, fault)?;
    let mut tensors = Vec::with_capacity(analytic.len());
    for (k, grad) in analytic.iter().enumerate() {
        let (name, x) = model.tensors()[k];
        let f = |m: &Matrix| {
            let mut probe = model.clone();
            *probe.tensors_mut()[k] = m.clone();
            probe.evaluate_loss(batch, cfg).unwrap_or(f64::NAN)
        };
        let numeric = finite_diff_grad(f, x, GRADCHECK_STEP);
        tensors.push(TensorCheck {
            name,
            max_relative_error: relative_error(grad, &numeric),
        });
    }
    Ok(GradcheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let report = pipeline_gradcheck(None).unwrap();
        assert_eq!(report.tensors.len(), 9);
        for t in &report.tensors {
            assert!(t.max_relative_error < GRADCHECK_TOLERANCE, "{}: {}", t.name, t.max_relative_error);
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = pipeline_gradcheck(Some(Fault::SigmoidGrad)).unwrap();
        assert!(!report.passes(GRADCHECK_TOLERANCE));
    }

    #[test]
    fn several_random_instances_pass() {
        for seed in 0..5 {
            let world = make_world(3, 2, 4, seed).unwrap();
            let batch = sample_batch(&world, 3, 0.2, seed + 10).unwrap();
            let model = Model::init(&world, seed + 20);
            let cfg = LossConfig {
                weights: LossWeights {
                    symmetric: seed % 2 == 0,
                    ..LossWeights::default()
                },
                aux_weight: 0.3,
            };
            let report = gradcheck_model(&model, &batch, &cfg, None).unwrap();
            assert!(report.passes(GRADCHECK_TOLERANCE), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn without_aux_the_head_gets_no_gradient() {
        let world = make_world(2, 2, 4, 1).unwrap();
        let batch = sample_batch(&world, 2, 0.2, 1).unwrap();
        let model = Model::init(&world, 1);
        let (_, grads) = model.gradients(&batch, &LossConfig::default(), None).unwrap();
        for g in &grads[6..] {
            assert_eq!(g, &Matrix::zeros(4, 4));
        }
        assert!(grads[5].frobenius_norm() > 0.0);
    }

    #[test]
    fn init_is_deterministic_and_near_identity() {
        let world = make_world(4, 4, 16, 0).unwrap();
        let a = Model::init(&world, 3);
        assert_eq!(a, Model::init(&world, 3));
        assert_ne!(a, Model::init(&world, 4));
        assert!(a.fundus.weight.max_abs_diff(&Matrix::identity(16)).unwrap() < 0.2);
        assert!(a.predilection.logits.data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!((a.n(), a.d()), (4, 16));
    }

    #[test]
    fn single_row_prototype_is_value_times_query() {
        let world = make_world(2, 1, 4, 0).unwrap();
        let model = Model::init(&world, 0);
        let q = model.predilection.gated();
        let t = model.text_tokens(&world.classes[0].prompt_bank[0]).unwrap();
        let expected = t.matmul(&model.head.w_v).unwrap().hadamard(&q).unwrap();
        assert!(model.prototype(&q, &t).unwrap().max_abs_diff(&expected).unwrap() < 1e-15);
    }
}
