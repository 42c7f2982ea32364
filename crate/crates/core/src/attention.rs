//! Sigmoid-gated predilection weighting of OCT features and the
//! single-head cross-attention that fuses a query source with text.
//!
//! During training the query source is the gated OCT embedding
//! `F_O ⊙ sigmoid(P)`; at inference, with no OCT available, it is
//! `sigmoid(P)` itself. Both paths share `W_q`, `W_k`, `W_v`.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Learnable `n x d` logits; `sigmoid` of them is the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct PredilectionMatrix {
    pub logits: Matrix,
}

impl PredilectionMatrix {
    pub fn new(logits: Matrix) -> Self {
        Self { logits }
    }

    /// I.i.d. `U[-0.1, 0.1]` logits, so the gate starts near 0.5.
    pub fn init<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        Self {
            logits: Matrix::uniform(n, d, -0.1, 0.1, rng),
        }
    }

    pub fn gated(&self) -> Matrix {
        self.logits.sigmoid()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Var {
        if trainable {
            tape.param(&self.logits)
        } else {
            tape.constant(self.logits.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionHead {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.rows() != d || w.cols() != d {
                return Err(contract(format!("{name} must be {d}x{d}, got {}", w.shape())));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Projections start at the identity plus `N(0, 0.01/d)` noise.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 0.1 / (d as f64).sqrt();
        let mut near_identity = || Matrix::identity(d).add(&Matrix::gaussian(d, d, std, rng)).expect("square");
        Self {
            w_q: near_identity(),
            w_k: near_identity(),
            w_v: near_identity(),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut reg = |m: &Matrix| if trainable { tape.param(m) } else { tape.constant(m.clone()) };
        HeadVars {
            w_q: reg(&self.w_q),
            w_k: reg(&self.w_k),
            w_v: reg(&self.w_v),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// The `n x d` query source the head attended from.
    pub query_source: Matrix,
    /// `n x n`, row-stochastic.
    pub attention: Matrix,
    /// `F_OT = Att · V`, `n x d`.
    pub refined: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub attention: Var,
    pub refined: Var,
}

/// `F_O ⊙ sigmoid(P)`.
pub fn gate(p: &PredilectionMatrix, f_o: &Matrix) -> Result<Matrix> {
    f_o.hadamard(&p.gated()).map_err(|_| Error::Shape {
        op: "gate",
        left: p.logits.shape(),
        right: f_o.shape(),
    })
}

pub fn gate_tracked(tape: &mut Tape, p: Var, f_o: Var) -> Result<Var> {
    let (ps, fs) = (tape.value(p).shape(), tape.value(f_o).shape());
    if ps != fs {
        return Err(Error::Shape {
            op: "gate",
            left: ps,
            right: fs,
        });
    }
    let g = tape.sigmoid(p);
    tape.hadamard(f_o, g)
}

/// Query source used while OCT is available.
pub fn training_query(p: &PredilectionMatrix, f_o: &Matrix) -> Result<Matrix> {
    gate(p, f_o)
}

/// Query source used without OCT: `sigmoid(P)`, as a plain value that no
/// tape can push gradients into.
pub fn inference_query(p: &PredilectionMatrix) -> Matrix {
    p.gated()
}

pub fn cross_attend(head: &AttentionHead, query_src: &Matrix, f_t: &Matrix) -> Result<FusionOutput> {
    let mut tape = Tape::new();
    let vars = head.register(&mut tape, false);
    let q = tape.constant(query_src.clone());
    let t = tape.constant(f_t.clone());
    let out = cross_attend_tracked(&mut tape, vars, q, t)?;
    Ok(FusionOutput {
        query_source: query_src.clone(),
        attention: tape.value(out.attention).clone(),
        refined: tape.value(out.refined).clone(),
    })
}

/// `Att = softmax_rows((Q_src W_q)(F_T W_k)ᵀ / sqrt(d))`, `F_OT = Att (F_T W_v)`.
pub fn cross_attend_tracked(tape: &mut Tape, head: HeadVars, query_src: Var, f_t: Var) -> Result<FusionVars> {
    let (qs, ts) = (tape.value(query_src).shape(), tape.value(f_t).shape());
    if qs != ts {
        return Err(Error::Shape {
            op: "cross_attend",
            left: qs,
            right: ts,
        });
    }
    let d = qs.1 as f64;
    let q = tape.matmul(query_src, head.w_q)?;
    let k = tape.matmul(f_t, head.w_k)?;
    let v = tape.matmul(f_t, head.w_v)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / d.sqrt());
    let attention = tape.softmax_rows(scaled);
    let refined = tape.matmul(attention, v)?;
    Ok(FusionVars { attention, refined })
}
