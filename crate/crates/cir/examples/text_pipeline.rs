//! Caption preparation: tokenizing, vocabulary building, spell correction,
//! and the [CLS]/[SEP]/[UNK] joining protocol.
//!
//! Run with: cargo run --release --example text_pipeline

use cir::textprep::{
    build_vocab, damerau_levenshtein, encode_captions, spell_correct, tokenize,
};

fn main() {
    let corpus = [
        "Is solid white and longer",
        "has white stripes",
        "is more blue with a v-neck",
        "white collar, shorter sleeves",
    ];
    let tokens: Vec<String> = corpus.iter().flat_map(|c| tokenize(c)).collect();
    println!("tokenized: {:?}", tokenize(corpus[2]));

    let vocab = build_vocab(tokens.iter().map(String::as_str), 1, None);
    println!("vocab: {} entries (4 reserved)", vocab.len());
    for (word, freq) in vocab.words().take(5) {
        println!("  {:>2}  {word} ({freq})", vocab.index_of(word).unwrap());
    }

    // The misspelling example the preprocessing stage exists for.
    for typo in ["whtie", "bleu", "sholter", "qzxv"] {
        let fixed = spell_correct(typo, &vocab);
        println!(
            "correct({typo}) = {fixed}   (distance {})",
            damerau_levenshtein(typo, &fixed)
        );
    }

    // Captions join as [CLS] c1 [SEP] c2; a seed shuffles caption order.
    let captions = vec!["is whtie and longer".to_string(), "has stripes".to_string()];
    let seq = encode_captions(&captions, &vocab, true, None, None);
    let rendered: Vec<&str> = seq.tokens.iter().map(|&ix| vocab.token(ix).unwrap()).collect();
    println!("encoded:  {rendered:?}");
    let shuffled = encode_captions(&captions, &vocab, true, None, Some(3));
    let rendered: Vec<&str> =
        shuffled.tokens.iter().map(|&ix| vocab.token(ix).unwrap()).collect();
    println!("shuffled: {rendered:?}");
}
