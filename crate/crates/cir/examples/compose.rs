//! The four composition heads side by side, plus RTIC's gate-closure
//! contract: a zero attention bank passes the candidate through untouched.
//!
//! Run with: cargo run --release --example compose

use cir::composers::{
    compose_rtic, compose_rtic_with_attention, ComposerKind, RticConfig,
};
use cir::encoders::{TextEncoderConfig, TextEncoderVariant};
use cir::model::{Model, ModelConfig};
use cir::numkernel::{ParamBinding, Tape, Tensor};
use cir::rng::Rng;
use cir::textprep::{build_vocab, TokenSequence, CLS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let vocab = build_vocab(["red", "longer", "striped"], 1, None);
    let config = |kind| ModelConfig {
        encoder: TextEncoderConfig {
            variant: TextEncoderVariant::LstmPlusGru,
            e_word: 8,
            hidden: 12,
            layers: 2,
            out_dim: 8,
        },
        image_hidden: 16,
        composer: kind,
        rtic: RticConfig { blocks: 2, block_hidden: 16 },
    };
    let mut rng = Rng::new(11);
    let candidate: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
    let seq = TokenSequence { tokens: vec![CLS, 4, 5], source_captions: 1 };

    for kind in [
        ComposerKind::TextOnly,
        ComposerKind::Tirg,
        ComposerKind::Rtic,
        ComposerKind::IrMatch,
    ] {
        let model = Model::init(config(kind), &vocab, candidate.len(), None, 5)?;
        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &model.params)?;
        let composed = model.query_embedding(&tape, &bind, &seq, &candidate)?;
        println!("{:<10} -> {:?}", kind.as_str(), &tape.value(composed).data()[..4]);
    }

    // RTIC internals: the attention bank and the residual decomposition.
    let model = Model::init(config(ComposerKind::Rtic), &vocab, candidate.len(), None, 5)?;
    let tape = Tape::new();
    let bind = ParamBinding::bind(&tape, &model.params)?;
    let f_i = model.project_feature(&tape, &bind, &candidate)?;
    let f_t = cir::encoders::text_encode(&tape, &bind, &seq, &model.config.encoder)?;
    let out = compose_rtic(&tape, &bind, f_i, f_t, &model.config.rtic)?;
    let bank = out.attention.unwrap();
    println!("attention bank (d x N) first rows:");
    for row in 0..3 {
        println!(
            "  channel {row}: {:?}",
            (0..model.config.rtic.blocks).map(|b| bank.values.at2(row, b)).collect::<Vec<_>>()
        );
    }
    println!("residual:  {:?}", &tape.value(out.residual).data()[..4]);

    // Force every gate shut: composed output equals the candidate exactly.
    let zeros = tape.constant(Tensor::zeros(&[8 * model.config.rtic.blocks]))?;
    let (closed, residual) =
        compose_rtic_with_attention(&tape, &bind, f_i, f_t, zeros, &model.config.rtic)?;
    println!(
        "gates closed: composed == candidate? {}   residual norm = {}",
        tape.value(closed) == tape.value(f_i),
        tape.value(residual).data().iter().map(|x| x * x).sum::<f64>().sqrt()
    );
    Ok(())
}
