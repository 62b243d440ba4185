//! A single retrieval model: text encoder + image projector + composer, with
//! seeded initialization and the forward passes used by training and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::composers::{
    compose_rtic, compose_text_only, compose_tirg, register_composer_params, ComposerKind,
    RticConfig,
};
use crate::encoders::{
    image_project, register_image_params, register_text_params, text_encode, TextEncoderConfig,
};
use crate::numkernel::{KernelError, ParamBinding, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::textprep::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: TextEncoderConfig,
    /// Hidden width of the image projector MLP.
    pub image_hidden: usize,
    pub composer: ComposerKind,
    pub rtic: RticConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: TextEncoderConfig::default(),
            image_hidden: 128,
            composer: ComposerKind::Rtic,
            rtic: RticConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Dimension of the composed feature space.
    pub fn out_dim(&self) -> usize {
        self.encoder.out_dim
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        self.encoder.validate()?;
        self.rtic.validate()?;
        if self.image_hidden == 0 {
            return Err(KernelError::Numeric {
                op: "model_config",
                detail: "image_hidden must be positive".into(),
            });
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Input dimension of the image projector (the precomputed feature width).
    pub feature_dim: usize,
}

impl Model {
    /// Builds and initializes all parameters from the `init` sub-stream of
    /// the given seed. Parameter registration order is fixed.
    pub fn init(
        config: ModelConfig,
        vocab: &Vocabulary,
        feature_dim: usize,
        external_embeddings: Option<&[(String, Vec<f64>)]>,
        seed: u64,
    ) -> Result<Model, KernelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init", &[]);
        let mut params = ParamSet::new();
        register_text_params(&mut params, &config.encoder, vocab, external_embeddings, &mut rng)?;
        register_image_params(
            &mut params,
            feature_dim,
            config.image_hidden,
            config.encoder.out_dim,
            &mut rng,
        );
        register_composer_params(
            &mut params,
            config.composer,
            config.encoder.out_dim,
            &config.rtic,
            &mut rng,
        )?;
        Ok(Model { config, params, feature_dim })
    }

    /// Rebuilds a model around checkpointed parameters, validating that the
    /// names and shapes match what this config would create.
    pub fn with_params(
        config: ModelConfig,
        vocab: &Vocabulary,
        feature_dim: usize,
        params: ParamSet,
    ) -> Result<Model, KernelError> {
        let skeleton = Model::init(config.clone(), vocab, feature_dim, None, 0)?;
        if skeleton.params.len() != params.len() {
            return Err(KernelError::Shape {
                op: "with_params",
                detail: format!(
                    "checkpoint has {} tensors, config expects {}",
                    params.len(),
                    skeleton.params.len()
                ),
            });
        }
        for ((en, et), (gn, gt)) in skeleton.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(KernelError::Shape {
                    op: "with_params",
                    detail: format!(
                        "checkpoint tensor `{gn}` {:?} does not match expected `{en}` {:?}",
                        gt.shape(),
                        et.shape()
                    ),
                });
            }
        }
        Ok(Model { config, params, feature_dim })
    }

    /// Composed query embedding for one (candidate, captions) pair.
    pub fn query_embedding(
        &self,
        tape: &Tape,
        binding: &ParamBinding,
        seq: &TokenSequence,
        candidate: &[f64],
    ) -> Result<Var, KernelError> {
        let f_text = text_encode(tape, binding, seq, &self.config.encoder)?;
        match self.config.composer {
            ComposerKind::TextOnly => compose_text_only(tape, binding, f_text),
            ComposerKind::Tirg => {
                let f_image = self.project_feature(tape, binding, candidate)?;
                compose_tirg(tape, binding, f_image, f_text)
            }
            ComposerKind::Rtic | ComposerKind::IrMatch => {
                let f_image = self.project_feature(tape, binding, candidate)?;
                Ok(compose_rtic(tape, binding, f_image, f_text, &self.config.rtic)?.composed)
            }
        }
    }

    /// Projects a raw image feature into the composed space.
    pub fn project_feature(
        &self,
        tape: &Tape,
        binding: &ParamBinding,
        feature: &[f64],
    ) -> Result<Var, KernelError> {
        if feature.len() != self.feature_dim {
            return Err(KernelError::Shape {
                op: "project_feature",
                detail: format!("feature dim {} vs projector input {}", feature.len(), self.feature_dim),
            });
        }
        let x = tape.constant(Tensor::vector(feature.to_vec()))?;
        image_project(tape, binding, x)
    }
}
