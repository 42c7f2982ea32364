//! In-batch contrastive objectives and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the fundus ↔ gated-OCT term.
    pub lambda1: f64,
    /// Weight of the fundus ↔ text term.
    pub lambda2: f64,
    pub tau: f64,
    /// Average each term with its target→anchor mirror.
    pub symmetric: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.6,
            tau: 0.07,
            symmetric: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0 && self.tau > 0.0;
        if !ok || !self.tau.is_finite() {
            return Err(contract(format!(
                "need lambda1, lambda2 >= 0 with positive sum and tau > 0; got {}, {}, {}",
                self.lambda1, self.lambda2, self.tau
            )));
        }
        Ok(())
    }
}

/// One pooled `1 x d` row per sample for each modality, stacked to `B x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub fundus: Matrix,
    pub gated_oct: Matrix,
    pub text: Matrix,
}

/// Mean over the token rows.
pub fn pool(tokens: &Matrix) -> Matrix {
    tokens.mean_rows()
}

fn check_pair(a: crate::error::Shape, t: crate::error::Shape, tau: f64) -> Result<()> {
    if a != t {
        return Err(Error::Shape {
            op: "contrastive_loss",
            left: a,
            right: t,
        });
    }
    if a.0 < 2 {
        return Err(contract(format!("contrastive loss needs a batch of at least 2, got {}", a.0)));
    }
    if !(tau > 0.0) {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `mean_i -log softmax_j(sim(a_i, t_j) / tau)[i]`, anchors to targets only.
pub fn contrastive_loss(anchors: &Matrix, targets: &Matrix, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let t = tape.constant(targets.clone());
    let loss = contrastive_loss_tracked(&mut tape, a, t, tau)?;
    Ok(tape.value(loss).get(0, 0))
}

pub fn contrastive_loss_tracked(tape: &mut Tape, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    let shape = tape.value(anchors).shape();
    check_pair(shape, tape.value(targets).shape(), tau)?;
    let a = tape.normalize_rows(anchors)?;
    let t = tape.normalize_rows(targets)?;
    let tt = tape.transpose(t);
    let sims = tape.matmul(a, tt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let diagonal: Vec<usize> = (0..shape.0).collect();
    tape.cross_entropy_rows(logits, &diagonal)
}

fn directional(tape: &mut Tape, a: Var, t: Var, w: &LossWeights) -> Result<Var> {
    let forward = contrastive_loss_tracked(tape, a, t, w.tau)?;
    if !w.symmetric {
        return Ok(forward);
    }
    let backward = contrastive_loss_tracked(tape, t, a, w.tau)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

/// `lambda1 · L(F_F, F_OP) + lambda2 · L(F_F, F_T)`.
pub fn total_loss(batch: &BatchEmbeddings, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(batch.fundus.clone());
    let o = tape.constant(batch.gated_oct.clone());
    let t = tape.constant(batch.text.clone());
    let loss = total_loss_tracked(&mut tape, f, o, t, w)?;
    Ok(tape.value(loss).get(0, 0))
}

pub fn total_loss_tracked(tape: &mut Tape, fundus: Var, gated_oct: Var, text: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let oct_term = directional(tape, fundus, gated_oct, w)?;
    let text_term = directional(tape, fundus, text, w)?;
    let a = tape.scale(oct_term, w.lambda1);
    let b = tape.scale(text_term, w.lambda2);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pooling_cases() {
        let r = rows(&[&[1.0, -2.0]]);
        assert_eq!(pool(&r), r);
        assert_eq!(pool(&rows(&[&[1.0, -2.0], &[1.0, -2.0]])), r);
        assert_eq!(pool(&rows(&[&[1.0, -2.0], &[-1.0, 2.0]])), Matrix::zeros(1, 2));
    }

    #[test]
    fn identity_similarity_closed_form() {
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // -log(e / (e + 1)) = ln(1 + e^-1)
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((expected - 0.31326).abs() < 1e-5);
        assert!((contrastive_loss(&e, &e, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_batch() {
        let anchors = rows(&[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]);
        let targets = rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 3.0]]);
        let loss = contrastive_loss(&anchors, &targets, 0.07).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_drives_aligned_loss_to_zero() {
        let e = rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let taus = [1.0, 0.5, 0.1, 0.05, 0.01];
        let losses: Vec<f64> = taus.iter().map(|&t| contrastive_loss(&e, &e, t).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[4] < 1e-40);
    }

    #[test]
    fn contrastive_errors() {
        let one = rows(&[&[1.0, 0.0]]);
        assert!(matches!(contrastive_loss(&one, &one, 1.0), Err(Error::Contract(_))));
        let z = rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(contrastive_loss(&z, &z, 1.0), Err(Error::DegenerateVector(_))));
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(contrastive_loss(&e, &e, 0.0).is_err());
        assert!(matches!(contrastive_loss(&e, &Matrix::ones(3, 2), 1.0), Err(Error::Shape { .. })));
    }

    fn random_batch(seed: u64) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BatchEmbeddings {
            fundus: Matrix::uniform(4, 5, -1.0, 1.0, &mut rng),
            gated_oct: Matrix::uniform(4, 5, -1.0, 1.0, &mut rng),
            text: Matrix::uniform(4, 5, -1.0, 1.0, &mut rng),
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let b = random_batch(1);
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2), (0.4, 0.6));
        let oct = contrastive_loss(&b.fundus, &b.gated_oct, w.tau).unwrap();
        let text = contrastive_loss(&b.fundus, &b.text, w.tau).unwrap();
        assert!((total_loss(&b, &w).unwrap() - (0.4 * oct + 0.6 * text)).abs() < 1e-12);

        let text_only = LossWeights { lambda1: 0.0, ..w };
        assert!((total_loss(&b, &text_only).unwrap() - 0.6 * text).abs() < 1e-12);
    }

    #[test]
    fn total_loss_at_uniform_logits() {
        let anchors = rows(&[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]);
        let others = rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 3.0]]);
        let b = BatchEmbeddings {
            fundus: anchors,
            gated_oct: others.clone(),
            text: others,
        };
        let w = LossWeights::default();
        assert!((total_loss(&b, &w).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_flag_averages_directions() {
        let b = random_batch(2);
        let w = LossWeights {
            symmetric: true,
            ..LossWeights::default()
        };
        let sym = |x: &Matrix, y: &Matrix| {
            0.5 * (contrastive_loss(x, y, w.tau).unwrap() + contrastive_loss(y, x, w.tau).unwrap())
        };
        let expected = 0.4 * sym(&b.fundus, &b.gated_oct) + 0.6 * sym(&b.fundus, &b.text);
        assert!((total_loss(&b, &w).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        let b = random_batch(3);
        for bad in [
            LossWeights { lambda1: -0.1, ..Default::default() },
            LossWeights { lambda1: 0.0, lambda2: 0.0, ..Default::default() },
            LossWeights { tau: 0.0, ..Default::default() },
        ] {
            assert!(total_loss(&b, &bad).is_err());
        }
    }

    proptest! {
        #[test]
        fn loss_positive_permutation_equivariant_scale_invariant(
            seed in any::<u64>(),
            b in 2usize..7,
            alpha in 0.05f64..20.0,
            which in 0usize..7,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::uniform(b, 4, -1.0, 1.0, &mut rng);
            let t = Matrix::uniform(b, 4, -1.0, 1.0, &mut rng);
            let base = contrastive_loss(&a, &t, 0.2).unwrap();
            prop_assert!(base > 0.0);

            // Joint permutation: reverse the row order.
            let rev = |m: &Matrix| Matrix::from_fn(b, 4, |i, j| m.get(b - 1 - i, j));
            prop_assert!((contrastive_loss(&rev(&a), &rev(&t), 0.2).unwrap() - base).abs() < 1e-12);

            let row = which % b;
            let scaled = Matrix::from_fn(b, 4, |i, j| if i == row { alpha * a.get(i, j) } else { a.get(i, j) });
            prop_assert!((contrastive_loss(&scaled, &t, 0.2).unwrap() - base).abs() < 1e-9);
        }
    }
}
