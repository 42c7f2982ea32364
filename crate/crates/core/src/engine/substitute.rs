//! Stand-ins for the OCT embedding of a class when no paired scan exists.

use rand::Rng;

use crate::attention::{inference_query, training_query};
use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::world::World;

use super::config::OctStrategy;

/// `n x d` substitute. The OCT-based strategies return an ungated encoded
/// OCT embedding; `LatentP` returns `sigmoid(P)` and ignores `class_id`.
pub fn oct_substitute<R: Rng + ?Sized>(
    strategy: OctStrategy,
    world: &World,
    model: &Model,
    class_id: usize,
    pool_size: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if strategy == OctStrategy::LatentP {
        return Ok(inference_query(&model.predilection));
    }
    if pool_size == 0 {
        return Err(contract("OCT substitute pool is empty"));
    }
    let pool = (0..pool_size)
        .map(|_| world.oct_sample(class_id, rng))
        .collect::<Result<Vec<_>>>()?;
    match strategy {
        OctStrategy::RandomSelection => {
            let pick = rng.random_range(0..pool.len());
            model.oct_tokens(&pool[pick])
        }
        _ => average_latent(model, &pool),
    }
}

/// Mean of the encoded OCT embeddings of `pool`.
pub fn average_latent(model: &Model, pool: &[Matrix]) -> Result<Matrix> {
    let first = pool.first().ok_or_else(|| contract("OCT substitute pool is empty"))?;
    let mut acc = model.oct_tokens(first)?;
    for raw in &pool[1..] {
        acc = acc.add(&model.oct_tokens(raw)?)?;
    }
    Ok(acc.scale(1.0 / pool.len() as f64))
}

/// The matrix the attention head queries from under `strategy`: the gated
/// substitute for the OCT-based strategies, `sigmoid(P)` for `LatentP`.
pub fn query_source<R: Rng + ?Sized>(
    strategy: OctStrategy,
    world: &World,
    model: &Model,
    class_id: usize,
    pool_size: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let sub = oct_substitute(strategy, world, model, class_id, pool_size, rng)?;
    match strategy {
        OctStrategy::LatentP => Ok(sub),
        _ => training_query(&model.predilection, &sub),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::make_world;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (World, Model) {
        let world = make_world(3, 2, 8, 2).unwrap();
        let model = Model::init(&world, 2);
        (world, model)
    }

    #[test]
    fn latent_p_is_class_agnostic() {
        let (world, model) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = oct_substitute(OctStrategy::LatentP, &world, &model, 0, 64, &mut rng).unwrap();
        for c in 1..3 {
            assert_eq!(oct_substitute(OctStrategy::LatentP, &world, &model, c, 64, &mut rng).unwrap(), a);
        }
        assert_eq!(a, model.predilection.gated());
    }

    #[test]
    fn average_of_identical_samples_is_that_embedding() {
        let (world, model) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = world.oct_sample(1, &mut rng).unwrap();
        let avg = average_latent(&model, &[raw.clone(), raw.clone(), raw.clone()]).unwrap();
        assert!(avg.max_abs_diff(&model.oct_tokens(&raw).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn noiseless_pool_average_equals_single_draw() {
        let (mut world, model) = setup();
        world.noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let avg = oct_substitute(OctStrategy::AverageLatent, &world, &model, 2, 16, &mut rng).unwrap();
        let one = oct_substitute(OctStrategy::RandomSelection, &world, &model, 2, 1, &mut rng).unwrap();
        assert!(avg.max_abs_diff(&one).unwrap() < 1e-12);
    }

    #[test]
    fn random_selection_with_one_sample_is_deterministic() {
        let (world, model) = setup();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            oct_substitute(OctStrategy::RandomSelection, &world, &model, 0, 1, &mut rng).unwrap()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn empty_pool_is_contract_error() {
        let (world, model) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [OctStrategy::RandomSelection, OctStrategy::AverageLatent] {
            assert!(oct_substitute(s, &world, &model, 0, 0, &mut rng).is_err());
        }
        assert!(average_latent(&model, &[]).is_err());
    }

    #[test]
    fn query_sources_are_gated_for_oct_strategies() {
        let (world, model) = setup();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let q = query_source(OctStrategy::AverageLatent, &world, &model, 1, 8, &mut a).unwrap();
        let sub = oct_substitute(OctStrategy::AverageLatent, &world, &model, 1, 8, &mut b).unwrap();
        assert_eq!(q, sub.hadamard(&model.predilection.gated()).unwrap());
    }
}
