//! Batch-hard triplet training with AdamW, stepwise LR decay, and a reduced
//! learning rate for the image path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composers::{ir_match_loss, ComposerKind};
use crate::datastore::{DatastoreError, FeatureStore, TripletRecord};
use crate::model::Model;
use crate::numkernel::{KernelError, ParamBinding, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::textprep::{encode_captions, OverrideMap, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Learning-rate multiplier for the `image_proj.` parameter group.
    pub image_lr_factor: f64,
    pub margin: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.00011148,
            beta1: 0.47,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 80,
            lr_decay: 0.474,
            decay_every: 10,
            image_lr_factor: 0.48,
            margin: 0.2,
            optimizer: OptimizerKind::Adamw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must be in [0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2 for mining".into()));
        }
        if self.decay_every == 0 {
            return Err(TrainError::Config("decay_every must be positive".into()));
        }
        Ok(())
    }
}

/// `lr * lr_decay^floor(epoch / decay_every)`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// Cosine-distance matrix between row sets: `D[i][j] = 1 - cos(Q_i, G_j)`.
pub fn pairwise_cosine_distance(tape: &Tape, q: Var, g: Var) -> Result<Var, KernelError> {
    let qn = tape.l2_normalize(q, 1)?;
    let gn = tape.l2_normalize(g, 1)?;
    let sims = tape.matmul(qn, tape.transpose(gn)?)?;
    let shape = tape.shape_of(sims);
    let ones = tape.constant(Tensor::new(shape.clone(), vec![1.0; shape[0] * shape[1]])?)?;
    tape.sub(ones, sims)
}

/// Batch-hard triplet loss. Row i of `targets` is the positive for row i of
/// `composed`; each anchor is hinged against its hardest admissible negative.
/// Negatives sharing the anchor's target id are excluded; an anchor left with
/// no admissible negative contributes zero.
pub fn batch_hard_triplet_loss(
    tape: &Tape,
    composed: Var,
    targets: Var,
    margin: f64,
    target_ids: &[String],
) -> Result<Var, KernelError> {
    let n = tape.shape_of(composed)[0];
    if n < 2 {
        return Err(KernelError::Numeric {
            op: "batch_hard_triplet_loss",
            detail: "mining needs a batch of at least 2".into(),
        });
    }
    if target_ids.len() != n {
        return Err(KernelError::Shape {
            op: "batch_hard_triplet_loss",
            detail: format!("{} target ids for batch of {n}", target_ids.len()),
        });
    }
    let dists = pairwise_cosine_distance(tape, composed, targets)?;
    let positives = tape.diag(dists)?;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = i != j && target_ids[i] != target_ids[j];
        }
    }
    let hardest = tape.rowwise_min_masked(dists, &mask)?;
    let margins = tape.constant(Tensor::vector(vec![margin; n]))?;
    let hinge = tape.relu(tape.add(tape.sub(positives, hardest)?, margins)?)?;
    tape.mean(hinge)
}

/// Per-parameter first/second moment buffers, aligned with the parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn group_scale(name: &str, cfg: &TrainConfig) -> f64 {
    if name.starts_with("image_proj.") {
        cfg.image_lr_factor
    } else {
        1.0
    }
}

/// One decoupled-weight-decay Adam step over every parameter.
///
/// `scheduled_lr` is the epoch-scheduled base rate; each parameter group
/// additionally applies its scale (the image path uses `image_lr_factor`).
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[(String, Tensor)],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    scheduled_lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, (name, grad)) in grads.iter().enumerate() {
        let lr_eff = scheduled_lr * group_scale(name, cfg);
        let theta = params.get_mut(name).expect("grad for unknown parameter");
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for (i, (&g, th)) in grad.data().iter().zip(theta.data_mut()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *th -= lr_eff * m_hat / (v_hat.sqrt() + 1e-8) + lr_eff * cfg.weight_decay * *th;
        }
    }
}

/// Classic momentum SGD (momentum 0.9, coupled weight decay); exists for the
/// optimizer-replacement ablation axis.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[(String, Tensor)],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    scheduled_lr: f64,
) {
    state.step += 1;
    for (idx, (name, grad)) in grads.iter().enumerate() {
        let lr_eff = scheduled_lr * group_scale(name, cfg);
        let theta = params.get_mut(name).expect("grad for unknown parameter");
        let buf = state.m[idx].data_mut();
        for (i, (&g, th)) in grad.data().iter().zip(theta.data_mut()).enumerate() {
            let g = g + cfg.weight_decay * *th;
            buf[i] = 0.9 * buf[i] + g;
            *th -= lr_eff * buf[i];
        }
    }
}

/// One JSONL record of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Everything the training loop reads.
pub struct TrainContext<'a> {
    pub features: &'a FeatureStore,
    /// Required for IR-match: regression targets and evaluation gallery.
    pub ir_features: Option<&'a FeatureStore>,
    /// Training-split triplets, in file order.
    pub triplets: &'a [TripletRecord],
    pub vocab: &'a Vocabulary,
    pub spell_correct: bool,
    pub overrides: Option<&'a OverrideMap>,
    pub seed: u64,
}

/// Full training run. Deterministic in the seed: batch order, caption
/// shuffling, and every numeric op replay identically.
pub fn train_run(
    model: &mut Model,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate()?;
    let is_ir = model.config.composer == ComposerKind::IrMatch;
    let ir_store = if is_ir {
        let store = ctx.ir_features.ok_or_else(|| {
            TrainError::Config("ir_match training requires an IR feature store".into())
        })?;
        if store.dim() != Some(model.config.out_dim()) {
            return Err(TrainError::Config(format!(
                "ir feature dim {:?} must equal the composed dimension {}",
                store.dim(),
                model.config.out_dim()
            )));
        }
        Some(store)
    } else {
        None
    };
    for rec in ctx.triplets {
        ctx.features.require(&rec.candidate_id)?;
        ctx.features.require(&rec.target_id)?;
        if let Some(store) = ir_store {
            store.require(&rec.target_id)?;
        }
    }

    let n = ctx.triplets.len();
    let mut logs = Vec::new();
    let mut state = OptimizerState::new(&model.params);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(ctx.seed, "data", &[epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                break; // mining needs full batches; the short tail is dropped
            }
            let tape = Tape::new();
            let binding = ParamBinding::bind(&tape, &model.params)?;
            let mut composed_rows = Vec::with_capacity(batch.len());
            let mut target_rows = Vec::with_capacity(batch.len());
            let mut target_ids = Vec::with_capacity(batch.len());
            let mut ir_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let rec = &ctx.triplets[idx];
                let shuffle_seed =
                    crate::rng::content_hash(format!("{}:{epoch}:{idx}", ctx.seed).as_bytes());
                let seq = encode_captions(
                    &rec.captions,
                    ctx.vocab,
                    ctx.spell_correct,
                    ctx.overrides,
                    Some(shuffle_seed),
                );
                let candidate = &ctx.features.require(&rec.candidate_id)?.values;
                let composed = model.query_embedding(&tape, &binding, &seq, candidate)?;
                if let Some(store) = ir_store {
                    let ir = store.require(&rec.target_id)?;
                    let target = tape.constant(Tensor::vector(ir.values.clone()))?;
                    ir_losses.push(ir_match_loss(&tape, composed, target)?);
                } else {
                    let feat = &ctx.features.require(&rec.target_id)?.values;
                    let target = model.project_feature(&tape, &binding, feat)?;
                    composed_rows.push(composed);
                    target_rows.push(target);
                    target_ids.push(rec.target_id.clone());
                }
            }
            let loss = if is_ir {
                let mut acc = ir_losses[0];
                for &l in &ir_losses[1..] {
                    acc = tape.add(acc, l)?;
                }
                tape.scalar_mul(acc, 1.0 / ir_losses.len() as f64)?
            } else {
                let composed = tape.stack_rows(&composed_rows)?;
                let targets = tape.stack_rows(&target_rows)?;
                batch_hard_triplet_loss(&tape, composed, targets, cfg.margin, &target_ids)?
            };
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    detail: format!("loss = {loss_value}"),
                });
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                KernelError::NonFinite { op } => TrainError::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    detail: format!("non-finite gradient in {op}"),
                },
                other => TrainError::Kernel(other),
            })?;
            let grads = binding.collect(&model.params, &grads);
            match cfg.optimizer {
                OptimizerKind::Adamw => adamw_step(&mut model.params, &grads, &mut state, cfg, lr),
                OptimizerKind::Sgd => sgd_step(&mut model.params, &grads, &mut state, cfg, lr),
            }
            global_step += 1;
            logs.push(StepLog { epoch, step: global_step, loss: loss_value, lr });
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn loss_value(
        composed: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        margin: f64,
        ids: &[&str],
    ) -> f64 {
        let tape = Tape::new();
        let n = composed.len();
        let d = composed[0].len();
        let c = tape
            .leaf(Tensor::matrix(n, d, composed.into_iter().flatten().collect()).unwrap())
            .unwrap();
        let t = tape
            .leaf(Tensor::matrix(n, d, targets.into_iter().flatten().collect()).unwrap())
            .unwrap();
        let ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        let loss = batch_hard_triplet_loss(&tape, c, t, margin, &ids).unwrap();
        tape.value(loss).item()
    }

    /// Independent oracle: enumerate all (anchor, negative) pairs with plain
    /// loops and take the per-anchor hardest admissible negative.
    pub(crate) fn brute_force_triplet_loss(
        composed: &[Vec<f64>],
        targets: &[Vec<f64>],
        margin: f64,
        ids: &[String],
    ) -> f64 {
        let normalize = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(|x| x / norm).collect()
                })
                .collect()
        };
        let q = normalize(composed);
        let g = normalize(targets);
        let n = q.len();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            let mut acc = 0.0;
            for k in 0..a.len() {
                acc += a[k] * b[k];
            }
            1.0 - acc
        };
        let mut total = 0.0;
        for i in 0..n {
            let d_pos = dist(&q[i], &g[i]);
            let mut hardest: Option<f64> = None;
            for j in 0..n {
                if j == i || ids[j] == ids[i] {
                    continue;
                }
                let d = dist(&q[i], &g[j]);
                if hardest.map_or(true, |h| d < h) {
                    hardest = Some(d);
                }
            }
            if let Some(h) = hardest {
                let hinge = d_pos - h + margin;
                total += if hinge > 0.0 { hinge } else { 0.0 };
            }
        }
        total / n as f64
    }

    #[test]
    fn pairwise_distance_basic_geometry() {
        let tape = Tape::new();
        let q = tape
            .leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, -3.0, 0.0]).unwrap())
            .unwrap();
        let d = pairwise_cosine_distance(&tape, q, q).unwrap();
        let v = tape.value(d);
        // Identical rows: diagonal 0. Orthogonal: 1. Opposite: 2.
        assert!(v.at2(0, 0).abs() < 1e-15);
        assert!((v.at2(0, 1) - 1.0).abs() < 1e-15);
        assert!((v.at2(0, 2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_identity_batch_has_zero_loss() {
        // composed = targets = orthonormal rows, margin 0.2:
        // per anchor max(0, 0 - 1 + 0.2) = 0.
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let loss = loss_value(rows.clone(), rows, 0.2, &["a", "b", "c"]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn anchor_sitting_on_wrong_target_pays_the_hinge() {
        // Anchor 0 equals target 1 exactly while its own positive is
        // orthogonal: contribution max(0, 1 - 0 + 0.2) = 1.2. Anchor 1 sits
        // on its positive with the negative orthogonal: contributes 0.
        let composed = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let loss = loss_value(composed, targets, 0.2, &["a", "b"]);
        assert!((loss - 1.2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_margin_with_perfect_separation_is_zero() {
        let composed = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let loss = loss_value(composed.clone(), composed.clone(), 0.0, &["a", "b"]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn duplicate_target_ids_are_not_negatives() {
        // Both anchors share one target id; with duplicates excluded there is
        // no admissible negative, so the loss must be exactly zero even
        // though the "other" row is very close.
        let composed = vec![vec![1.0, 0.01], vec![1.0, -0.01]];
        let targets = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let loss = loss_value(composed, targets, 0.5, &["same", "same"]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn batch_of_one_is_an_error() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(batch_hard_triplet_loss(&tape, c, c, 0.2, &["x".to_string()]).is_err());
    }

    #[test]
    fn matches_brute_force_oracle_exactly_on_random_batches() {
        let mut rng = Rng::new(2024);
        for case in 0..100 {
            let n = 2 + rng.index(7); // 2..=8
            let d = 2 + rng.index(5);
            let composed: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let targets: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            // Occasional duplicate ids to exercise the exclusion rule.
            let ids: Vec<String> =
                (0..n).map(|i| format!("t{}", if rng.uniform() < 0.2 { i / 2 } else { i })).collect();
            let expected = brute_force_triplet_loss(&composed, &targets, 0.2, &ids);
            let tape = Tape::new();
            let c = tape
                .leaf(Tensor::matrix(n, d, composed.into_iter().flatten().collect()).unwrap())
                .unwrap();
            let t = tape
                .leaf(Tensor::matrix(n, d, targets.into_iter().flatten().collect()).unwrap())
                .unwrap();
            let loss = batch_hard_triplet_loss(&tape, c, t, 0.2, &ids).unwrap();
            assert_eq!(tape.value(loss).item(), expected, "case {case}");
        }
    }

    #[test]
    fn loss_gradient_passes_finite_difference_check() {
        use crate::numkernel::finite_diff_check;
        let mut rng = Rng::new(5);
        let n = 4;
        let d = 3;
        let mut params = ParamSet::new();
        params.insert(
            "composed",
            Tensor::matrix(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap(),
        );
        params.insert(
            "targets",
            Tensor::matrix(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap(),
        );
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let report = finite_diff_check(&mut params, 1e-6, 24, 6, move |tape, bind| {
            batch_hard_triplet_loss(tape, bind.var("composed")?, bind.var("targets")?, 0.2, &ids)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn one_epoch_of_64_triplets_logs_exactly_two_steps() {
        use crate::datastore::{synth_dataset, SynthSpec};
        use crate::encoders::{TextEncoderConfig, TextEncoderVariant};
        use crate::model::{Model, ModelConfig};
        use crate::textprep::{build_vocab, tokenize};

        let spec = SynthSpec {
            n_items: 90,
            n_triplets: 64,
            val_frac: 0.0,
            ..SynthSpec::default()
        };
        let data = synth_dataset(5, &spec).unwrap();
        let tokens: Vec<String> = data
            .triplets
            .iter()
            .flat_map(|t| t.captions.iter())
            .flat_map(|c| tokenize(c))
            .collect();
        let vocab = build_vocab(tokens.iter().map(String::as_str), 1, None);
        let config = ModelConfig {
            encoder: TextEncoderConfig {
                variant: TextEncoderVariant::Swem,
                e_word: 8,
                hidden: 8,
                layers: 1,
                out_dim: 16,
            },
            image_hidden: 16,
            composer: ComposerKind::Rtic,
            rtic: crate::composers::RticConfig { blocks: 1, block_hidden: 16 },
        };
        let mut model = Model::init(config, &vocab, 16, None, 5).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 32, ..TrainConfig::default() };
        let ctx = TrainContext {
            features: &data.features,
            ir_features: None,
            triplets: &data.triplets,
            vocab: &vocab,
            spell_correct: false,
            overrides: None,
            seed: 5,
        };
        let logs = train_run(&mut model, &ctx, &cfg).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.epoch == 0));
    }

    #[test]
    fn lr_schedule_matches_formula_and_is_non_increasing() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &cfg), 0.00011148);
        assert!((lr_at_epoch(10, &cfg) - 0.00011148 * 0.474).abs() < 1e-12);
        assert!((lr_at_epoch(79, &cfg) - 0.00011148 * 0.474f64.powi(7)).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for epoch in 0..120 {
            let lr = lr_at_epoch(epoch, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_derivation() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::vector(vec![1.0]));
        let grads = vec![("theta".to_string(), Tensor::vector(vec![1.0]))];
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig {
            beta1: 0.47,
            beta2: 0.999,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1);
        // m_hat = 1, v_hat = 1 after bias correction, so
        // theta = 1 - 0.1 * 1/(1 + 1e-8) - 0.1 * 0.01 * 1.
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01;
        let got = params.get("theta").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 0.899).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_grad_fresh_state_is_identity_without_decay() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::vector(vec![0.7, -0.3]));
        let grads = vec![("theta".to_string(), Tensor::vector(vec![0.0, 0.0]))];
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1);
        assert_eq!(params.get("theta").unwrap().data(), &[0.7, -0.3]);
    }

    #[test]
    fn adamw_zero_grad_with_decay_is_pure_decay() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::vector(vec![2.0]));
        let grads = vec![("theta".to_string(), Tensor::vector(vec![0.0]))];
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.5, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1);
        assert!((params.get("theta").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn image_group_uses_scaled_lr() {
        let mut params = ParamSet::new();
        params.insert("image_proj.w1", Tensor::vector(vec![1.0]));
        params.insert("text.proj.w", Tensor::vector(vec![1.0]));
        let grads = vec![
            ("image_proj.w1".to_string(), Tensor::vector(vec![1.0])),
            ("text.proj.w".to_string(), Tensor::vector(vec![1.0])),
        ];
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.0, image_lr_factor: 0.48, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1);
        let image_delta = 1.0 - params.get("image_proj.w1").unwrap().data()[0];
        let text_delta = 1.0 - params.get("text.proj.w").unwrap().data()[0];
        assert!((image_delta / text_delta - 0.48).abs() < 1e-9);
    }
}
