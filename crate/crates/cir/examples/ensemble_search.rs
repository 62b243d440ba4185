//! TPE weight search over a score-matrix pool, then iterative best-score
//! accumulation: the fused matrix re-enters the pool as a candidate and the
//! round objectives never decrease.
//!
//! Run with: cargo run --release --example ensemble_search

use cir::datastore::{Category, ScoreMatrix};
use cir::ensemble::{iterative_ensemble, tpe_optimize, EnsemblePool, TpeSettings};
use cir::metrics::GroundTruth;
use cir::rng::Rng;

/// One informative member (high score planted on the true target) plus pure
/// noise members.
fn planted_pool(seed: u64) -> Result<(EnsemblePool, GroundTruth), Box<dyn std::error::Error>> {
    let (q, g) = (36, 60);
    let mut rng = Rng::new(seed);
    let mut truth = GroundTruth::new();
    let mut informative = vec![0.0; q * g];
    for i in 0..q {
        let target = rng.index(g);
        truth.insert(&format!("q{i}"), &format!("g{target}"), Category::ALL[i % 3]);
        for j in 0..g {
            informative[i * g + j] =
                if j == target { 0.6 + 0.1 * rng.normal() } else { 0.25 * rng.normal() };
        }
    }
    let matrix = |vals: Vec<f64>| {
        ScoreMatrix::new(
            (0..q).map(|i| format!("q{i}")).collect(),
            (0..g).map(|j| format!("g{j}")).collect(),
            vals,
        )
    };
    let pool = EnsemblePool::new(vec![
        ("informative".into(), matrix(informative)?),
        ("noise_a".into(), matrix((0..q * g).map(|_| rng.normal()).collect())?),
        ("noise_b".into(), matrix((0..q * g).map(|_| rng.normal()).collect())?),
    ])?;
    Ok((pool, truth))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (pool, truth) = planted_pool(3)?;
    let settings = TpeSettings::default();

    let result = tpe_optimize(&pool, &truth, (10, 20), 150, 7, &settings, &[])?;
    println!("single search: objective {:.3}", result.best_objective);
    for (name, w) in pool.names().iter().zip(&result.best_weights.0) {
        println!("  {name:<12} weight {w:.3}");
    }

    let iter = iterative_ensemble(&pool, &truth, (10, 20), 3, 150, 0.05, 7, &settings)?;
    println!("iterative accumulation:");
    for round in &iter.rounds {
        println!(
            "  round {}: objective {:.3} over a pool of {}",
            round.round, round.objective, round.pool_size
        );
    }
    println!("final objective {:.3}", iter.final_objective);
    Ok(())
}
