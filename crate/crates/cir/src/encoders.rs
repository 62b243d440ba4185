//! Text and image encoders: embedding lookup, SWEM, stacked GRU/LSTM, their
//! concatenation, and the MLP projector over precomputed image features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, ParamBinding, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::textprep::{TokenSequence, Vocabulary, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderVariant {
    Swem,
    Lstm,
    Gru,
    LstmPlusGru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub variant: TextEncoderVariant,
    /// Word-embedding width.
    pub e_word: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Width of the projected sentence embedding; composers operate in this
    /// dimension.
    pub out_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            variant: TextEncoderVariant::LstmPlusGru,
            e_word: 32,
            hidden: 64,
            layers: 2,
            out_dim: 64,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.e_word == 0 || self.hidden == 0 || self.layers == 0 || self.out_dim == 0 {
            return Err(KernelError::Numeric {
                op: "text_encoder_config",
                detail: "e_word, hidden, layers and out_dim must be positive".into(),
            });
        }
        Ok(())
    }

    /// Width of the encoding before the final projection.
    pub fn pre_projection_width(&self) -> usize {
        match self.variant {
            TextEncoderVariant::Swem => 2 * self.e_word,
            TextEncoderVariant::Lstm | TextEncoderVariant::Gru => self.hidden,
            TextEncoderVariant::LstmPlusGru => 2 * self.hidden,
        }
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight init.
pub fn init_linear(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

/// External word vectors: TSV `word<TAB>v1,...,ve`.
pub fn load_embedding_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (word, vals) = match (fields.next(), fields.next()) {
            (Some(w), Some(v)) => (w, v),
            _ => return Err(format!("{}:{}: expected word<TAB>values", path.display(), idx + 1)),
        };
        let values: Vec<f64> = vals
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| format!("{}:{}: {e}", path.display(), idx + 1)))
            .collect::<Result<_, _>>()?;
        rows.push((word.to_string(), values));
    }
    Ok(rows)
}

/// Builds the trainable embedding table.
///
/// With an external table, matching rows are copied in and the remainder is
/// uniform(-0.05, 0.05), i.e. small against the pretrained rows. Training
/// fully from scratch instead uses uniform(-0.5, 0.5) so word identities are
/// separable from the first step.
pub fn build_embedding_table(
    vocab: &Vocabulary,
    e_word: usize,
    external: Option<&[(String, Vec<f64>)]>,
    rng: &mut Rng,
) -> Result<Tensor, KernelError> {
    let v = vocab.len();
    let scale = if external.is_some() { 0.05 } else { 0.5 };
    let mut data: Vec<f64> = (0..v * e_word).map(|_| rng.uniform_in(-scale, scale)).collect();
    if let Some(rows) = external {
        for (word, values) in rows {
            if let Some(ix) = vocab.index_of(word) {
                if values.len() != e_word {
                    return Err(KernelError::Shape {
                        op: "embedding_table",
                        detail: format!(
                            "external row `{word}` has {} values, table width is {e_word}",
                            values.len()
                        ),
                    });
                }
                data[ix * e_word..(ix + 1) * e_word].copy_from_slice(values);
            }
        }
    }
    Tensor::matrix(v, e_word, data)
}

fn register_rnn_layer(
    params: &mut ParamSet,
    prefix: &str,
    gates: &[&str],
    in_dim: usize,
    hidden: usize,
    rng: &mut Rng,
) {
    for gate in gates {
        params.insert(&format!("{prefix}.w_i{gate}"), init_linear(rng, hidden, in_dim));
        params.insert(&format!("{prefix}.w_h{gate}"), init_linear(rng, hidden, hidden));
        params.insert(&format!("{prefix}.b_i{gate}"), Tensor::zeros(&[hidden]));
        params.insert(&format!("{prefix}.b_h{gate}"), Tensor::zeros(&[hidden]));
    }
}

/// Registers every text-encoder parameter under the `text.` prefix.
pub fn register_text_params(
    params: &mut ParamSet,
    cfg: &TextEncoderConfig,
    vocab: &Vocabulary,
    external: Option<&[(String, Vec<f64>)]>,
    rng: &mut Rng,
) -> Result<(), KernelError> {
    cfg.validate()?;
    params.insert("text.embed", build_embedding_table(vocab, cfg.e_word, external, rng)?);
    let needs_gru = matches!(cfg.variant, TextEncoderVariant::Gru | TextEncoderVariant::LstmPlusGru);
    let needs_lstm =
        matches!(cfg.variant, TextEncoderVariant::Lstm | TextEncoderVariant::LstmPlusGru);
    for layer in 0..cfg.layers {
        let in_dim = if layer == 0 { cfg.e_word } else { cfg.hidden };
        if needs_lstm {
            register_rnn_layer(params, &format!("text.lstm{layer}"), &["i", "f", "g", "o"], in_dim, cfg.hidden, rng);
        }
        if needs_gru {
            register_rnn_layer(params, &format!("text.gru{layer}"), &["r", "z", "n"], in_dim, cfg.hidden, rng);
        }
    }
    params.insert(
        "text.proj.w",
        init_linear(rng, cfg.out_dim, cfg.pre_projection_width()),
    );
    params.insert("text.proj.b", Tensor::zeros(&[cfg.out_dim]));
    Ok(())
}

/// Registers the image projector (a 2-layer relu MLP) under `image_proj.`.
/// This prefix is the differential-learning-rate group.
pub fn register_image_params(
    params: &mut ParamSet,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut Rng,
) {
    params.insert("image_proj.w1", init_linear(rng, hidden, in_dim));
    params.insert("image_proj.b1", Tensor::zeros(&[hidden]));
    params.insert("image_proj.w2", init_linear(rng, out_dim, hidden));
    params.insert("image_proj.b2", Tensor::zeros(&[out_dim]));
}

fn linear(tape: &Tape, w: Var, x: Var, b: Var) -> Result<Var, KernelError> {
    tape.add(tape.matmul(w, x)?, b)
}

/// Embedding lookup: row t of the output is the table row for token t.
pub fn embed(tape: &Tape, binding: &ParamBinding, seq: &TokenSequence) -> Result<Var, KernelError> {
    tape.gather_rows(binding.var("text.embed")?, &seq.tokens)
}

fn unmasked(seq: &TokenSequence) -> Vec<bool> {
    seq.tokens.iter().map(|&t| t != PAD).collect()
}

/// Concatenation of the average pool and the max pool over unmasked rows.
pub fn swem_encode(tape: &Tape, embedded: Var, mask: &[bool]) -> Result<Var, KernelError> {
    let mean = tape.colwise_mean_masked(embedded, mask)?;
    let max = tape.colwise_max_masked(embedded, mask)?;
    tape.concat(mean, max, 0)
}

fn rnn_inputs(
    tape: &Tape,
    embedded: Var,
    mask: &[bool],
) -> Result<Vec<Var>, KernelError> {
    let e = tape.shape_of(embedded)[1];
    let mut xs = Vec::new();
    for (t, &keep) in mask.iter().enumerate() {
        if keep {
            let row = tape.slice(embedded, 0, t, 1)?;
            xs.push(tape.reshape(row, &[e])?);
        }
    }
    if xs.is_empty() {
        return Err(KernelError::Numeric { op: "rnn", detail: "all positions masked".into() });
    }
    Ok(xs)
}

/// Stacked GRU; returns the top layer's hidden state at the last unmasked
/// step. Masked steps carry state through unchanged.
pub fn gru_forward(
    tape: &Tape,
    binding: &ParamBinding,
    embedded: Var,
    mask: &[bool],
    hidden: usize,
    layers: usize,
) -> Result<Var, KernelError> {
    let xs = rnn_inputs(tape, embedded, mask)?;
    let zero = tape.constant(Tensor::zeros(&[hidden]))?;
    let mut states = vec![zero; layers];
    for x in xs {
        let mut input = x;
        for (layer, state) in states.iter_mut().enumerate() {
            let p = |name: &str| binding.var(&format!("text.gru{layer}.{name}"));
            let h = *state;
            let r = tape.sigmoid(tape.add(
                linear(tape, p("w_ir")?, input, p("b_ir")?)?,
                linear(tape, p("w_hr")?, h, p("b_hr")?)?,
            )?)?;
            let z = tape.sigmoid(tape.add(
                linear(tape, p("w_iz")?, input, p("b_iz")?)?,
                linear(tape, p("w_hz")?, h, p("b_hz")?)?,
            )?)?;
            let n = tape.tanh(tape.add(
                linear(tape, p("w_in")?, input, p("b_in")?)?,
                tape.hadamard(r, linear(tape, p("w_hn")?, h, p("b_hn")?)?)?,
            )?)?;
            // h' = (1 - z) * n + z * h
            let new_h = tape.add(tape.sub(n, tape.hadamard(z, n)?)?, tape.hadamard(z, h)?)?;
            *state = new_h;
            input = new_h;
        }
    }
    Ok(states[layers - 1])
}

/// Stacked LSTM; same masking and return contract as [`gru_forward`].
pub fn lstm_forward(
    tape: &Tape,
    binding: &ParamBinding,
    embedded: Var,
    mask: &[bool],
    hidden: usize,
    layers: usize,
) -> Result<Var, KernelError> {
    let xs = rnn_inputs(tape, embedded, mask)?;
    let zero = tape.constant(Tensor::zeros(&[hidden]))?;
    let mut h_states = vec![zero; layers];
    let mut c_states = vec![zero; layers];
    for x in xs {
        let mut input = x;
        for layer in 0..layers {
            let p = |name: &str| binding.var(&format!("text.lstm{layer}.{name}"));
            let (h, c) = (h_states[layer], c_states[layer]);
            let gate = |wi: &str, bi: &str, wh: &str, bh: &str| -> Result<Var, KernelError> {
                tape.add(
                    linear(tape, p(wi)?, input, p(bi)?)?,
                    linear(tape, p(wh)?, h, p(bh)?)?,
                )
            };
            let i = tape.sigmoid(gate("w_ii", "b_ii", "w_hi", "b_hi")?)?;
            let f = tape.sigmoid(gate("w_if", "b_if", "w_hf", "b_hf")?)?;
            let g = tape.tanh(gate("w_ig", "b_ig", "w_hg", "b_hg")?)?;
            let o = tape.sigmoid(gate("w_io", "b_io", "w_ho", "b_ho")?)?;
            let new_c = tape.add(tape.hadamard(f, c)?, tape.hadamard(i, g)?)?;
            let new_h = tape.hadamard(o, tape.tanh(new_c)?)?;
            h_states[layer] = new_h;
            c_states[layer] = new_c;
            input = new_h;
        }
    }
    Ok(h_states[layers - 1])
}

/// Full text path: variant-dispatched encoding, then a linear projection to
/// `out_dim`.
pub fn text_encode(
    tape: &Tape,
    binding: &ParamBinding,
    seq: &TokenSequence,
    cfg: &TextEncoderConfig,
) -> Result<Var, KernelError> {
    let embedded = embed(tape, binding, seq)?;
    let mask = unmasked(seq);
    let encoded = match cfg.variant {
        TextEncoderVariant::Swem => swem_encode(tape, embedded, &mask)?,
        TextEncoderVariant::Gru => {
            gru_forward(tape, binding, embedded, &mask, cfg.hidden, cfg.layers)?
        }
        TextEncoderVariant::Lstm => {
            lstm_forward(tape, binding, embedded, &mask, cfg.hidden, cfg.layers)?
        }
        TextEncoderVariant::LstmPlusGru => {
            let l = lstm_forward(tape, binding, embedded, &mask, cfg.hidden, cfg.layers)?;
            let g = gru_forward(tape, binding, embedded, &mask, cfg.hidden, cfg.layers)?;
            tape.concat(l, g, 0)?
        }
    };
    linear(tape, binding.var("text.proj.w")?, encoded, binding.var("text.proj.b")?)
}

/// Image projector: relu MLP, then linear to the composed dimension.
pub fn image_project(tape: &Tape, binding: &ParamBinding, x: Var) -> Result<Var, KernelError> {
    let h = tape.relu(linear(tape, binding.var("image_proj.w1")?, x, binding.var("image_proj.b1")?)?)?;
    linear(tape, binding.var("image_proj.w2")?, h, binding.var("image_proj.b2")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::finite_diff_check;
    use crate::textprep::{build_vocab, CLS};

    fn tiny_vocab() -> Vocabulary {
        build_vocab(["blue", "long", "red", "short"], 1, None)
    }

    fn seq(tokens: Vec<usize>) -> TokenSequence {
        TokenSequence { tokens, source_captions: 1 }
    }

    #[test]
    fn swem_hand_example() {
        let tape = Tape::new();
        let e = tape
            .leaf(Tensor::matrix(2, 2, vec![1.0, 3.0, 2.0, 0.0]).unwrap())
            .unwrap();
        let out = swem_encode(&tape, e, &[true, true]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn swem_single_row_duplicates() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let out = swem_encode(&tape, e, &[true]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn swem_excludes_masked_rows() {
        let tape = Tape::new();
        let e = tape
            .leaf(Tensor::matrix(3, 1, vec![1.0, 100.0, 3.0]).unwrap())
            .unwrap();
        let out = swem_encode(&tape, e, &[true, false, true]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0]);
        assert!(matches!(
            swem_encode(&tape, e, &[false, false, false]),
            Err(KernelError::Numeric { .. })
        ));
    }

    #[test]
    fn gru_all_zero_params_stays_at_zero() {
        let vocab = tiny_vocab();
        let cfg = TextEncoderConfig {
            variant: TextEncoderVariant::Gru,
            e_word: 3,
            hidden: 4,
            layers: 2,
            out_dim: 2,
        };
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
        for (name, t) in params.iter_mut() {
            if name.contains("gru") {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &params).unwrap();
        let embedded = embed(&tape, &bind, &seq(vec![CLS, 4, 5])).unwrap();
        let h = gru_forward(&tape, &bind, embedded, &[true, true, true], 4, 2).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn gru_one_step_matches_hand_evaluation() {
        // Scalar GRU, one step: evaluate the three gate equations directly.
        let vocab = build_vocab(["x"], 1, None);
        let cfg = TextEncoderConfig {
            variant: TextEncoderVariant::Gru,
            e_word: 1,
            hidden: 1,
            layers: 1,
            out_dim: 1,
        };
        let mut params = ParamSet::new();
        let mut rng = Rng::new(2);
        register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
        let x = 0.7;
        let sets: [(&str, f64); 10] = [
            ("text.embed", 0.0), // row for token 4 set below
            ("text.gru0.w_ir", 0.5),
            ("text.gru0.b_ir", 0.1),
            ("text.gru0.w_hr", 0.3),
            ("text.gru0.w_iz", -0.4),
            ("text.gru0.b_iz", 0.2),
            ("text.gru0.w_hz", 0.9),
            ("text.gru0.w_in", 0.8),
            ("text.gru0.b_in", -0.1),
            ("text.gru0.w_hn", 0.6),
        ];
        for (name, v) in sets {
            params.get_mut(name).unwrap().data_mut().fill(v);
        }
        params.get_mut("text.gru0.b_hn").unwrap().data_mut().fill(0.05);
        params.get_mut("text.gru0.b_hr").unwrap().data_mut().fill(0.0);
        params.get_mut("text.gru0.b_hz").unwrap().data_mut().fill(0.0);
        let embed_row = vocab.index_of("x").unwrap();
        params.get_mut("text.embed").unwrap().data_mut()[embed_row] = x;

        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &params).unwrap();
        let embedded = embed(&tape, &bind, &seq(vec![embed_row])).unwrap();
        let h = gru_forward(&tape, &bind, embedded, &[true], 1, 1).unwrap();

        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sigma(0.5 * x + 0.1 + 0.3 * 0.0);
        let z = sigma(-0.4 * x + 0.2 + 0.9 * 0.0);
        let n = (0.8 * x - 0.1 + r * (0.6 * 0.0 + 0.05)).tanh();
        let expected = (1.0 - z) * n + z * 0.0;
        assert!((tape.value(h).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn recurrent_states_stay_in_unit_interval() {
        let vocab = tiny_vocab();
        for variant in [TextEncoderVariant::Gru, TextEncoderVariant::Lstm] {
            let cfg = TextEncoderConfig { variant, e_word: 4, hidden: 6, layers: 2, out_dim: 3 };
            let mut params = ParamSet::new();
            let mut rng = Rng::new(8);
            register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
            // Exaggerate weights to push toward saturation.
            for (name, t) in params.iter_mut() {
                if name.contains("w_") {
                    for v in t.data_mut() {
                        *v *= 30.0;
                    }
                }
            }
            let tape = Tape::new();
            let bind = ParamBinding::bind(&tape, &params).unwrap();
            let s = seq(vec![CLS, 4, 5, 6, 7, 4, 5]);
            let embedded = embed(&tape, &bind, &s).unwrap();
            let mask = vec![true; s.tokens.len()];
            let h = match variant {
                TextEncoderVariant::Gru => {
                    gru_forward(&tape, &bind, embedded, &mask, 6, 2).unwrap()
                }
                _ => lstm_forward(&tape, &bind, embedded, &mask, 6, 2).unwrap(),
            };
            for &v in tape.value(h).data() {
                assert!(v > -1.0 && v < 1.0, "{variant:?}: {v}");
            }
        }
    }

    #[test]
    fn pad_positions_do_not_change_any_encoder() {
        let vocab = tiny_vocab();
        for variant in [
            TextEncoderVariant::Swem,
            TextEncoderVariant::Gru,
            TextEncoderVariant::Lstm,
            TextEncoderVariant::LstmPlusGru,
        ] {
            let cfg = TextEncoderConfig { variant, e_word: 4, hidden: 5, layers: 2, out_dim: 3 };
            let mut params = ParamSet::new();
            let mut rng = Rng::new(21);
            register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
            let variants = [
                vec![CLS, 4, 5, 6],
                vec![CLS, 4, PAD, 5, 6],
                vec![CLS, PAD, 4, 5, PAD, 6, PAD],
            ];
            let mut outputs = Vec::new();
            for tokens in variants {
                let tape = Tape::new();
                let bind = ParamBinding::bind(&tape, &params).unwrap();
                let out = text_encode(&tape, &bind, &seq(tokens), &cfg).unwrap();
                outputs.push(tape.value(out));
            }
            assert_eq!(outputs[0], outputs[1], "{variant:?}");
            assert_eq!(outputs[0], outputs[2], "{variant:?}");
        }
    }

    #[test]
    fn embed_gradient_counts_row_uses() {
        let vocab = tiny_vocab();
        let cfg = TextEncoderConfig {
            variant: TextEncoderVariant::Swem,
            e_word: 2,
            hidden: 2,
            layers: 1,
            out_dim: 2,
        };
        let mut params = ParamSet::new();
        let mut rng = Rng::new(3);
        register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &params).unwrap();
        // Token 4 used twice, token 5 once.
        let embedded = embed(&tape, &bind, &seq(vec![4, 5, 4])).unwrap();
        let e = tape.value(embedded);
        assert_eq!(e.shape(), &[3, 2]);
        // A repeated token yields identical rows.
        assert_eq!(&e.data()[0..2], &e.data()[4..6]);
        let loss = tape.sum(embedded).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(bind.var("text.embed").unwrap()).unwrap();
        let ev = |row: usize, col: usize| g.data()[row * 2 + col];
        assert_eq!(ev(4, 0), 2.0);
        assert_eq!(ev(4, 1), 2.0);
        assert_eq!(ev(5, 0), 1.0);
        assert_eq!(ev(3, 0), 0.0);
    }

    #[test]
    fn text_encode_widths_and_variant_dispatch() {
        let vocab = tiny_vocab();
        for (variant, pre) in [
            (TextEncoderVariant::LstmPlusGru, 10),
            (TextEncoderVariant::Swem, 6),
        ] {
            let cfg = TextEncoderConfig { variant, e_word: 3, hidden: 5, layers: 2, out_dim: 4 };
            assert_eq!(cfg.pre_projection_width(), pre);
            let mut params = ParamSet::new();
            let mut rng = Rng::new(5);
            register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
            assert_eq!(params.get("text.proj.w").unwrap().shape(), &[4, pre]);
            let tape = Tape::new();
            let bind = ParamBinding::bind(&tape, &params).unwrap();
            let out = text_encode(&tape, &bind, &seq(vec![CLS, 4, 5]), &cfg).unwrap();
            assert_eq!(tape.shape_of(out), vec![4]);
        }
    }

    #[test]
    fn external_embeddings_seed_matching_rows() {
        let vocab = tiny_vocab(); // blue, long, red, short at indices 4..8
        let external = vec![
            ("red".to_string(), vec![1.0, 2.0, 3.0]),
            ("unknown".to_string(), vec![9.0, 9.0, 9.0]),
        ];
        let mut rng = Rng::new(30);
        let table = build_embedding_table(&vocab, 3, Some(&external), &mut rng).unwrap();
        let red = vocab.index_of("red").unwrap();
        assert_eq!(&table.data()[red * 3..(red + 1) * 3], &[1.0, 2.0, 3.0]);
        // Rows without an external entry stay inside the small-init band.
        let blue = vocab.index_of("blue").unwrap();
        for &v in &table.data()[blue * 3..(blue + 1) * 3] {
            assert!(v.abs() <= 0.05);
        }
        // A width mismatch is rejected.
        let bad = vec![("red".to_string(), vec![1.0, 2.0])];
        assert!(build_embedding_table(&vocab, 3, Some(&bad), &mut rng).is_err());

        // File loading: TSV word<TAB>v1,...,ve.
        let dir = std::env::temp_dir().join(format!("cir-emb-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.tsv");
        std::fs::write(&path, "red\t1,2,3\nblue\t-0.5,0.25,0\n").unwrap();
        let rows = load_embedding_file(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], ("blue".to_string(), vec![-0.5, 0.25, 0.0]));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn image_project_zero_weights_and_shape() {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(4);
        register_image_params(&mut params, 6, 8, 4, &mut rng);
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &params).unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let out = image_project(&tape, &bind, x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn recurrent_gradients_pass_finite_difference_check() {
        let vocab = tiny_vocab();
        for variant in [TextEncoderVariant::Gru, TextEncoderVariant::Lstm] {
            let cfg = TextEncoderConfig { variant, e_word: 3, hidden: 4, layers: 2, out_dim: 3 };
            let mut params = ParamSet::new();
            let mut rng = Rng::new(6);
            register_text_params(&mut params, &cfg, &vocab, None, &mut rng).unwrap();
            let s = seq(vec![CLS, 4, 5, 6, 7]);
            let cfg2 = cfg.clone();
            let report = finite_diff_check(&mut params, 1e-6, 12, 9, move |tape, bind| {
                let out = text_encode(tape, bind, &s, &cfg2)?;
                tape.mean(tape.hadamard(out, out)?)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{variant:?}: {}", report.max_rel_err);
        }
    }
}
