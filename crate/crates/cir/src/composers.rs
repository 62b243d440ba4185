//! Multimodal composition heads.
//!
//! Four models share the interface "candidate feature + sentence embedding
//! -> composed feature": Text-only ignores the image; TIRG runs gated and
//! residual paths over the concatenated inputs; RTIC chains N residual
//! blocks behind channel-wise sigmoid gates so that a closed gate leaves a
//! channel of the candidate untouched; IR-match reuses the RTIC stack but
//! regresses onto features from an external instance-retrieval model instead
//! of ranking.

use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, ParamBinding, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;

use crate::encoders::init_linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposerKind {
    TextOnly,
    Tirg,
    Rtic,
    IrMatch,
}

impl ComposerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComposerKind::TextOnly => "text_only",
            ComposerKind::Tirg => "tirg",
            ComposerKind::Rtic => "rtic",
            ComposerKind::IrMatch => "ir_match",
        }
    }

    /// Whether composition consumes the candidate image feature.
    pub fn uses_image(&self) -> bool {
        !matches!(self, ComposerKind::TextOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RticConfig {
    /// Number of residual blocks.
    pub blocks: usize,
    /// Hidden width of each block's MLP.
    pub block_hidden: usize,
}

impl Default for RticConfig {
    fn default() -> Self {
        RticConfig { blocks: 2, block_hidden: 256 }
    }
}

impl RticConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.blocks == 0 || self.block_hidden == 0 {
            return Err(KernelError::Numeric {
                op: "rtic_config",
                detail: "blocks and block_hidden must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Channel-wise gate activations, one column per block; every entry in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank {
    /// d x N.
    pub values: Tensor,
}

/// Composition result. For RTIC, `composed = candidate + residual` exactly.
pub struct ComposerOutput {
    pub composed: Var,
    pub residual: Var,
    pub attention: Option<AttentionBank>,
}

/// Registers the parameters for one composer under `composer.`, for the
/// composed dimension `d`.
pub fn register_composer_params(
    params: &mut ParamSet,
    kind: ComposerKind,
    d: usize,
    rtic: &RticConfig,
    rng: &mut Rng,
) -> Result<(), KernelError> {
    match kind {
        ComposerKind::TextOnly => {
            let bottleneck = (d / 2).max(1);
            params.insert("composer.enc.w", init_linear(rng, bottleneck, d));
            params.insert("composer.enc.b", Tensor::zeros(&[bottleneck]));
            params.insert("composer.dec.w", init_linear(rng, d, bottleneck));
            params.insert("composer.dec.b", Tensor::zeros(&[d]));
        }
        ComposerKind::Tirg => {
            let hidden = 2 * d;
            params.insert("composer.gate1.w", init_linear(rng, hidden, 2 * d));
            params.insert("composer.gate1.b", Tensor::zeros(&[hidden]));
            params.insert("composer.gate2.w", init_linear(rng, d, hidden));
            params.insert("composer.gate2.b", Tensor::zeros(&[d]));
            params.insert("composer.res1.w", init_linear(rng, hidden, 2 * d));
            params.insert("composer.res1.b", Tensor::zeros(&[hidden]));
            params.insert("composer.res2.w", init_linear(rng, d, hidden));
            params.insert("composer.res2.b", Tensor::zeros(&[d]));
            params.insert("composer.w_gate", Tensor::new(vec![1], vec![1.0])?);
            params.insert("composer.w_res", Tensor::new(vec![1], vec![0.1])?);
        }
        ComposerKind::Rtic | ComposerKind::IrMatch => {
            rtic.validate()?;
            params.insert("composer.attn.w", init_linear(rng, d * rtic.blocks, 2 * d));
            params.insert("composer.attn.b", Tensor::zeros(&[d * rtic.blocks]));
            for i in 0..rtic.blocks {
                params.insert(
                    &format!("composer.block{i}.w1"),
                    init_linear(rng, rtic.block_hidden, 2 * d),
                );
                params.insert(&format!("composer.block{i}.b1"), Tensor::zeros(&[rtic.block_hidden]));
                params.insert(&format!("composer.block{i}.w2"), init_linear(rng, d, rtic.block_hidden));
                params.insert(&format!("composer.block{i}.b2"), Tensor::zeros(&[d]));
            }
        }
    }
    Ok(())
}

fn linear(tape: &Tape, w: Var, x: Var, b: Var) -> Result<Var, KernelError> {
    tape.add(tape.matmul(w, x)?, b)
}

/// Encoder-decoder over the sentence embedding alone; the candidate image
/// never enters.
pub fn compose_text_only(
    tape: &Tape,
    binding: &ParamBinding,
    f_text: Var,
) -> Result<Var, KernelError> {
    let hidden = tape.relu(linear(
        tape,
        binding.var("composer.enc.w")?,
        f_text,
        binding.var("composer.enc.b")?,
    )?)?;
    linear(tape, binding.var("composer.dec.w")?, hidden, binding.var("composer.dec.b")?)
}

/// Gated + residual two-path composition over `[f_image || f_text]`, blended
/// by the learnable scalars `w_gate` and `w_res`.
pub fn compose_tirg(
    tape: &Tape,
    binding: &ParamBinding,
    f_image: Var,
    f_text: Var,
) -> Result<Var, KernelError> {
    let joint = tape.concat(f_image, f_text, 0)?;
    let gate_hidden = tape.relu(linear(
        tape,
        binding.var("composer.gate1.w")?,
        joint,
        binding.var("composer.gate1.b")?,
    )?)?;
    let gate = tape.sigmoid(linear(
        tape,
        binding.var("composer.gate2.w")?,
        gate_hidden,
        binding.var("composer.gate2.b")?,
    )?)?;
    let gated = tape.hadamard(gate, f_image)?;
    let res_hidden = tape.relu(linear(
        tape,
        binding.var("composer.res1.w")?,
        joint,
        binding.var("composer.res1.b")?,
    )?)?;
    let residual = linear(
        tape,
        binding.var("composer.res2.w")?,
        res_hidden,
        binding.var("composer.res2.b")?,
    )?;
    tape.add(
        tape.scale(gated, binding.var("composer.w_gate")?)?,
        tape.scale(residual, binding.var("composer.w_res")?)?,
    )
}

/// Channel-wise attention scores for all blocks, as a flat vector laid out
/// block-major (block i occupies `[i*d, (i+1)*d)`).
pub fn rtic_attention_flat(
    tape: &Tape,
    binding: &ParamBinding,
    f_image: Var,
    f_text: Var,
) -> Result<Var, KernelError> {
    let joint = tape.concat(f_image, f_text, 0)?;
    tape.sigmoid(linear(
        tape,
        binding.var("composer.attn.w")?,
        joint,
        binding.var("composer.attn.b")?,
    )?)
}

/// The d x N attention bank for inspection.
pub fn rtic_attention(
    tape: &Tape,
    binding: &ParamBinding,
    f_image: Var,
    f_text: Var,
    cfg: &RticConfig,
) -> Result<AttentionBank, KernelError> {
    let flat = rtic_attention_flat(tape, binding, f_image, f_text)?;
    Ok(bank_from_flat(&tape.value(flat), cfg))
}

fn bank_from_flat(flat: &Tensor, cfg: &RticConfig) -> AttentionBank {
    let n = cfg.blocks;
    let d = flat.numel() / n;
    let mut values = vec![0.0; d * n];
    for i in 0..n {
        for c in 0..d {
            values[c * n + i] = flat.data()[i * d + c];
        }
    }
    AttentionBank { values: Tensor::matrix(d, n, values).expect("bank shape") }
}

/// RTIC block chain with an externally supplied attention vector (block-major
/// flat layout). Splitting this out makes the gate-closure contract directly
/// testable by injection.
pub fn compose_rtic_with_attention(
    tape: &Tape,
    binding: &ParamBinding,
    f_image: Var,
    f_text: Var,
    attention_flat: Var,
    cfg: &RticConfig,
) -> Result<(Var, Var), KernelError> {
    cfg.validate()?;
    let d = tape.shape_of(f_image)[0];
    let mut state = f_image;
    for i in 0..cfg.blocks {
        let gate = tape.slice(attention_flat, 0, i * d, d)?;
        let block_in = tape.hadamard(gate, state)?;
        let joint = tape.concat(block_in, f_text, 0)?;
        let hidden = tape.relu(linear(
            tape,
            binding.var(&format!("composer.block{i}.w1"))?,
            joint,
            binding.var(&format!("composer.block{i}.b1"))?,
        )?)?;
        let block_res = linear(
            tape,
            binding.var(&format!("composer.block{i}.w2"))?,
            hidden,
            binding.var(&format!("composer.block{i}.b2"))?,
        )?;
        state = tape.add(state, tape.hadamard(gate, block_res)?)?;
    }
    let residual = tape.sub(state, f_image)?;
    Ok((state, residual))
}

/// Residual text-image composition: `composed = candidate + h`, where each
/// block contributes to h only on the channels its gate opens.
pub fn compose_rtic(
    tape: &Tape,
    binding: &ParamBinding,
    f_image: Var,
    f_text: Var,
    cfg: &RticConfig,
) -> Result<ComposerOutput, KernelError> {
    let flat = rtic_attention_flat(tape, binding, f_image, f_text)?;
    let (composed, residual) =
        compose_rtic_with_attention(tape, binding, f_image, f_text, flat, cfg)?;
    Ok(ComposerOutput {
        composed,
        residual,
        attention: Some(bank_from_flat(&tape.value(flat), cfg)),
    })
}

/// Mean squared error between the l2-normalized composed feature and the
/// l2-normalized instance-retrieval feature.
pub fn ir_match_loss(tape: &Tape, f: Var, f_ir: Var) -> Result<Var, KernelError> {
    let a = tape.l2_normalize(f, 0)?;
    let b = tape.l2_normalize(f_ir, 0)?;
    let diff = tape.sub(a, b)?;
    tape.mean(tape.hadamard(diff, diff)?)
}
