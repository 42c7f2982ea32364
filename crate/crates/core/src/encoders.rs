//! Toy trainable encoders: an affine+tanh map per image modality and a
//! mean-pooled embedding table for text.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result, Shape};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fundus,
    Oct,
    Text,
}

/// `tanh(raw · weight + bias)`, applied row by row. Shape-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub modality: Modality,
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Std of the perturbation added to the identity at initialization, before
/// dividing by `sqrt(d)`.
const INIT_PERTURBATION: f64 = 0.1;

impl Encoder {
    pub fn new(modality: Modality, weight: Matrix, bias: Matrix) -> Result<Self> {
        let d = weight.rows();
        if weight.cols() != d {
            return Err(contract(format!("encoder weight must be square, got {}", weight.shape())));
        }
        if bias.shape() != Shape(1, d) {
            return Err(Error::Shape {
                op: "encoder bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self { modality, weight, bias })
    }

    /// Near-identity start: `I + N(0, 0.01/d)` weights and zero bias, so the
    /// embedding keeps the raw grid's layout until training moves it.
    pub fn init<R: Rng + ?Sized>(modality: Modality, d: usize, rng: &mut R) -> Self {
        let noise = Matrix::gaussian(d, d, INIT_PERTURBATION / (d as f64).sqrt(), rng);
        Self {
            modality,
            weight: Matrix::identity(d).add(&noise).expect("square"),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let (weight, bias) = if trainable {
            (tape.param(&self.weight), tape.param(&self.bias))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        EncoderVars {
            weight,
            bias,
            width: self.width(),
        }
    }

    pub fn encode(&self, raw: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(raw.clone());
        let out = vars.encode(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub weight: Var,
    pub bias: Var,
    width: usize,
}

impl EncoderVars {
    pub fn encode(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let shape = tape.value(raw).shape();
        if shape.1 != self.width {
            return Err(Error::Shape {
                op: "encode",
                left: Shape(self.width, self.width),
                right: shape,
            });
        }
        let lin = tape.matmul(raw, self.weight)?;
        let shifted = tape.add_row(lin, self.bias)?;
        Ok(tape.tanh(shifted))
    }
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Std of freshly initialized token embeddings.
const EMBEDDING_INIT_STD: f64 = 0.5;

/// Whitespace tokens, lowercased, with surrounding punctuation trimmed.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Token table plus trainable `V x d` embedding. Row 0 is the unknown token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub embedding: Matrix,
}

impl TextVocabulary {
    pub fn from_parts(tokens: Vec<String>, embedding: Matrix) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(contract(format!("vocabulary must start with {UNKNOWN_TOKEN}")));
        }
        if embedding.rows() != tokens.len() {
            return Err(Error::Shape {
                op: "vocabulary",
                left: Shape(tokens.len(), embedding.cols()),
                right: embedding.shape(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index, embedding })
    }

    /// Vocabulary over every token of `prompts`, in first-seen order.
    pub fn build<'a, R: Rng + ?Sized>(prompts: impl IntoIterator<Item = &'a str>, d: usize, rng: &mut R) -> Self {
        let mut tokens = vec![UNKNOWN_TOKEN.to_owned()];
        let mut seen: HashMap<String, usize> = HashMap::new();
        seen.insert(UNKNOWN_TOKEN.to_owned(), 0);
        for prompt in prompts {
            for t in tokenize(prompt) {
                if !seen.contains_key(&t) {
                    seen.insert(t.clone(), tokens.len());
                    tokens.push(t);
                }
            }
        }
        let embedding = Matrix::gaussian(tokens.len(), d, EMBEDDING_INIT_STD, rng);
        Self {
            tokens,
            index: seen,
            embedding,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn indices(&self, prompt: &str) -> Result<Vec<usize>> {
        let toks = tokenize(prompt);
        if toks.is_empty() {
            return Err(contract("cannot encode an empty prompt"));
        }
        Ok(toks.iter().map(|t| self.lookup(t)).collect())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Var {
        if trainable {
            tape.param(&self.embedding)
        } else {
            tape.constant(self.embedding.clone())
        }
    }
}

/// Mean of the prompt's token embeddings, tiled to `n` identical rows.
pub fn encode_text(vocab: &TextVocabulary, prompt: &str, n: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let table = vocab.register(&mut tape, false);
    let out = encode_text_tracked(&mut tape, vocab, table, prompt, n)?;
    Ok(tape.value(out).clone())
}

pub fn encode_text_tracked(tape: &mut Tape, vocab: &TextVocabulary, table: Var, prompt: &str, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(contract("text embedding needs n >= 1 rows"));
    }
    let idx = vocab.indices(prompt)?;
    let rows = tape.gather_rows(table, &idx)?;
    let pooled = tape.mean_rows(rows);
    tape.tile_rows(pooled, n)
}
