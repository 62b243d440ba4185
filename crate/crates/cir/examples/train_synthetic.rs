//! End-to-end miniature: synthesize a dataset, train RTIC with batch-hard
//! triplets, and watch recall climb on held-out queries.
//!
//! Run with: cargo run --release --example train_synthetic

use cir::datastore::{synth_dataset, Split, SynthSpec};
use cir::metrics::{build_score_matrix, recall_at_k, EvalContext, QuerySet};
use cir::model::{Model, ModelConfig};
use cir::textprep::{build_vocab, tokenize};
use cir::training::{train_run, TrainConfig, TrainContext};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec { n_items: 450, n_triplets: 260, ..SynthSpec::default() };
    let data = synth_dataset(7, &spec)?;
    let train: Vec<_> =
        data.triplets.iter().filter(|t| t.split == Split::Train).cloned().collect();
    println!(
        "dataset: {} items, {} train / {} val triplets",
        data.features.len(),
        train.len(),
        data.triplets.len() - train.len()
    );

    let tokens: Vec<String> =
        train.iter().flat_map(|t| t.captions.iter()).flat_map(|c| tokenize(c)).collect();
    let vocab = build_vocab(tokens.iter().map(String::as_str), 1, None);

    let mut model = Model::init(
        ModelConfig::default(),
        &vocab,
        data.features.dim().unwrap(),
        None,
        7,
    )?;
    let train_cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
    let ctx = TrainContext {
        features: &data.features,
        ir_features: Some(&data.ir_features),
        triplets: &train,
        vocab: &vocab,
        spell_correct: true,
        overrides: None,
        seed: 7,
    };
    let logs = train_run(&mut model, &ctx, &train_cfg)?;
    for epoch in [0, 4, 9, 14, 19] {
        let losses: Vec<f64> =
            logs.iter().filter(|l| l.epoch == epoch).map(|l| l.loss).collect();
        println!(
            "epoch {epoch:>2}: mean loss {:.4}",
            losses.iter().sum::<f64>() / losses.len() as f64
        );
    }

    let queries = QuerySet::from_triplets(&data.triplets, Split::Val);
    let truth = queries.ground_truth();
    let ctx = EvalContext {
        features: &data.features,
        ir_features: Some(&data.ir_features),
        vocab: &vocab,
        spell_correct: true,
        overrides: None,
    };
    let matrix = build_score_matrix(&model, &queries, &ctx)?;
    for k in [1, 10, 50] {
        println!("R@{k:<3} = {:.2}%", recall_at_k(&matrix, &truth, k)?);
    }
    Ok(())
}
