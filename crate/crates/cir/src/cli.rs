//! The `cir` binary: one batch subcommand per pipeline stage.
//!
//! `synth` writes a synthetic dataset; `prep` spell-corrects captions and
//! builds the vocabulary; `train` fits one model; `eval` scores a split and
//! reports recalls; `ensemble` fuses score matrices with TPE weight search;
//! `gradcheck` verifies every differentiable component against finite
//! differences. Exit codes: 0 success, 1 validation error, 2 numeric
//! failure.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composers::{compose_rtic, ir_match_loss, ComposerKind, RticConfig};
use crate::config::{ConfigError, EnsembleConfig, MetricsConfig, RunConfig};
use crate::datastore::{
    load_feature_store, load_triplets, save_feature_store, save_report, save_score_matrix,
    save_triplets, synth_dataset, DatastoreError, FeatureStore, Split, SynthSpec, TripletRecord,
};
use crate::encoders::{load_embedding_file, TextEncoderConfig, TextEncoderVariant};
use crate::ensemble::{
    iterative_ensemble, EnsembleError, EnsemblePool, TrialRecord,
};
use crate::metrics::{
    build_score_matrix, ensemble_objective, report_from_matrix, EvalContext, GroundTruth,
    MetricsError, QuerySet,
};
use crate::model::{Model, ModelConfig};
use crate::numkernel::{
    finite_diff_check, load_checkpoint, save_checkpoint, CheckpointError, KernelError, ParamSet,
    Tensor,
};
use crate::rng::{content_hash, Rng};
use crate::textprep::{
    build_vocab, correct_with_overrides, load_overrides, tokenize, OverrideMap, TextError,
    Vocabulary, CLS,
};
use crate::training::{train_run, TrainContext, TrainError};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DatastoreError> for CliError {
    fn from(e: DatastoreError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::NonFinite { .. } | KernelError::Numeric { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Kernel(k) => CliError::from(k),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Kernel(k) => CliError::from(k),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Metrics(m) => CliError::from(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

const USAGE: &str = "usage: cir <subcommand> [flags]

subcommands:
  synth      --out DIR --seed N [--items N] [--dim D] [--attrs K]
             [--triplets T] [--noise S] [--val-frac F] [--misspell F]
             [--amplitude A]
  prep       --config FILE --out DIR
  train      --config FILE --out DIR
  eval       --config FILE --checkpoint FILE --out DIR [--split val]
  ensemble   --manifest FILE --out DIR [--seed N]
  gradcheck  [--seed N]";

struct Args {
    flags: HashMap<String, String>,
}

impl Args {
    fn parse(args: &[String]) -> Result<Args, CliError> {
        let mut flags = HashMap::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument `{arg}`\n{USAGE}")))?;
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("flag --{name} needs a value")))?;
            if flags.insert(name.to_string(), value.clone()).is_some() {
                return Err(CliError::Usage(format!("flag --{name} given twice")));
            }
        }
        Ok(Args { flags })
    }

    fn required(&self, name: &str) -> Result<&str, CliError> {
        self.flags
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
    }

    fn optional(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    fn parse_opt<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, CliError> {
        match self.optional(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("flag --{name}: cannot parse `{v}`"))),
        }
    }

    fn reject_unknown(&self, allowed: &[&str]) -> Result<(), CliError> {
        for key in self.flags.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown flag --{key}\n{USAGE}")));
            }
        }
        Ok(())
    }
}

/// Entry point; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let result = match args.first().map(String::as_str) {
        Some("synth") => cmd_synth(&args[1..]),
        Some("prep") => cmd_prep(&args[1..]),
        Some("train") => cmd_train(&args[1..]),
        Some("eval") => cmd_eval(&args[1..]),
        Some("ensemble") => cmd_ensemble(&args[1..]),
        Some("gradcheck") => cmd_gradcheck(&args[1..]),
        Some(other) => Err(CliError::Usage(format!("unknown subcommand `{other}`\n{USAGE}"))),
        None => Err(CliError::Usage(USAGE.to_string())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&[
        "out", "seed", "items", "dim", "attrs", "triplets", "noise", "val-frac", "misspell",
        "amplitude",
    ])?;
    let out = PathBuf::from(args.required("out")?);
    let seed: u64 = args.parse_opt("seed", 0)?;
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        n_items: args.parse_opt("items", defaults.n_items)?,
        dim: args.parse_opt("dim", defaults.dim)?,
        n_attrs: args.parse_opt("attrs", defaults.n_attrs)?,
        n_triplets: args.parse_opt("triplets", defaults.n_triplets)?,
        noise: args.parse_opt("noise", defaults.noise)?,
        val_frac: args.parse_opt("val-frac", defaults.val_frac)?,
        misspell_frac: args.parse_opt("misspell", defaults.misspell_frac)?,
        amplitude: args.parse_opt("amplitude", defaults.amplitude)?,
    };
    let data = synth_dataset(seed, &spec)?;
    ensure_dir(&out)?;
    let hash = content_hash(format!("synth seed={seed} spec={spec:?}").as_bytes());
    save_feature_store(&out.join("features.tsv"), &data.features, hash)?;
    save_feature_store(&out.join("ir_features.tsv"), &data.ir_features, hash)?;
    save_triplets(&out.join("triplets.jsonl"), &data.triplets, hash)?;
    let train_tokens: Vec<String> = data
        .triplets
        .iter()
        .filter(|t| t.split == Split::Train)
        .flat_map(|t| t.captions.iter())
        .flat_map(|c| tokenize(c))
        .collect();
    let vocab = build_vocab(train_tokens.iter().map(String::as_str), 1, None);
    vocab.save(&out.join("vocab.tsv"), hash)?;
    println!(
        "synth: {} items (dim {}), {} triplets, vocab of {} -> {}",
        data.features.len(),
        spec.dim,
        data.triplets.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

/// Loads the data a config points at. The vocabulary comes from the vocab
/// file when given, otherwise it is built from the train-split captions.
struct LoadedData {
    features: FeatureStore,
    ir_features: Option<FeatureStore>,
    triplets: Vec<TripletRecord>,
    vocab: Vocabulary,
    overrides: Option<OverrideMap>,
    embeddings: Option<Vec<(String, Vec<f64>)>>,
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let features = load_feature_store(&cfg.data.features)?;
    if features.is_empty() {
        return Err(CliError::Validation(format!(
            "feature store {} is empty",
            cfg.data.features.display()
        )));
    }
    let ir_features = match &cfg.data.ir_features {
        Some(path) => Some(load_feature_store(path)?),
        None => None,
    };
    let triplets = load_triplets(&cfg.data.triplets)?;
    crate::datastore::validate_triplets(&features, &triplets)?;
    let embeddings = match &cfg.data.embeddings {
        Some(path) => Some(load_embedding_file(path).map_err(CliError::Validation)?),
        None => None,
    };
    let vocab = match &cfg.data.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => {
            let tokens: Vec<String> = triplets
                .iter()
                .filter(|t| t.split == Split::Train)
                .flat_map(|t| t.captions.iter())
                .flat_map(|c| tokenize(c))
                .collect();
            let external: Option<Vec<String>> = embeddings
                .as_ref()
                .map(|rows| rows.iter().map(|(w, _)| w.clone()).collect());
            build_vocab(
                tokens.iter().map(String::as_str),
                cfg.textprep.min_freq,
                external.as_deref(),
            )
        }
    };
    let overrides = match &cfg.data.overrides {
        Some(path) => Some(load_overrides(path)?),
        None => None,
    };
    Ok(LoadedData { features, ir_features, triplets, vocab, overrides, embeddings })
}

fn cmd_prep(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&["config", "out"])?;
    let cfg = RunConfig::load(Path::new(args.required("config")?))?;
    let out = PathBuf::from(args.required("out")?);
    let data = load_data(&cfg)?;
    let hash = cfg.hash();
    ensure_dir(&out)?;

    let empty = OverrideMap::new();
    let overrides = data.overrides.as_ref().unwrap_or(&empty);
    let mut corrections: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut corrected = Vec::with_capacity(data.triplets.len());
    for rec in &data.triplets {
        let mut captions = Vec::with_capacity(rec.captions.len());
        for caption in &rec.captions {
            let mut words = Vec::new();
            for token in tokenize(caption) {
                let fixed = correct_with_overrides(&token, &data.vocab, overrides);
                if fixed != token {
                    *corrections.entry((token, fixed.clone())).or_insert(0) += 1;
                }
                words.push(fixed);
            }
            captions.push(words.join(" "));
        }
        corrected.push(TripletRecord { captions, ..rec.clone() });
    }
    save_triplets(&out.join("triplets_corrected.jsonl"), &corrected, hash)?;
    data.vocab.save(&out.join("vocab.tsv"), hash)?;
    let mut report = format!("# cir-corrections config_hash={hash:016x}\n");
    for ((from, to), count) in &corrections {
        report.push_str(&format!("{from}\t{to}\t{count}\n"));
    }
    fs::write(out.join("corrections.tsv"), report)?;
    println!(
        "prep: {} records, {} distinct corrections -> {}",
        corrected.len(),
        corrections.len(),
        out.display()
    );
    for ((from, to), count) in &corrections {
        println!("  {from} -> {to} ({count}x)");
    }
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&["config", "out"])?;
    let cfg = RunConfig::load(Path::new(args.required("config")?))?;
    let out = PathBuf::from(args.required("out")?);
    let data = load_data(&cfg)?;
    let hash = cfg.hash();
    ensure_dir(&out)?;

    let train_split: Vec<TripletRecord> = data
        .triplets
        .iter()
        .filter(|t| t.split == Split::Train)
        .cloned()
        .collect();
    if train_split.is_empty() {
        return Err(CliError::Validation("no train-split triplets".into()));
    }
    let feature_dim = data.features.dim().expect("non-empty store");
    let mut model = Model::init(
        cfg.model.clone(),
        &data.vocab,
        feature_dim,
        data.embeddings.as_deref(),
        cfg.seed,
    )?;
    let ctx = TrainContext {
        features: &data.features,
        ir_features: data.ir_features.as_ref(),
        triplets: &train_split,
        vocab: &data.vocab,
        spell_correct: cfg.textprep.spell_correct,
        overrides: data.overrides.as_ref(),
        seed: cfg.seed,
    };
    let logs = train_run(&mut model, &ctx, &cfg.train)?;

    save_checkpoint(&out.join("checkpoint.ckpt"), &model.params, hash)?;
    let mut jsonl = format!("{{\"config_hash\":\"{hash:016x}\"}}\n");
    for log in &logs {
        jsonl.push_str(&serde_json::to_string(log).expect("log serialization"));
        jsonl.push('\n');
    }
    fs::write(out.join("metrics.jsonl"), jsonl)?;

    let mut by_epoch: BTreeMap<usize, (f64, usize, f64)> = BTreeMap::new();
    for log in &logs {
        let entry = by_epoch.entry(log.epoch).or_insert((0.0, 0, log.lr));
        entry.0 += log.loss;
        entry.1 += 1;
    }
    for (epoch, (sum, count, lr)) in &by_epoch {
        println!("epoch {epoch:>3}  loss {:<10.6}  lr {lr:.8}", sum / *count as f64);
    }
    println!(
        "train: {} steps, {} params -> {}",
        logs.len(),
        model.params.total_numel(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&["config", "checkpoint", "out", "split"])?;
    let cfg = RunConfig::load(Path::new(args.required("config")?))?;
    let checkpoint_path = PathBuf::from(args.required("checkpoint")?);
    let out = PathBuf::from(args.required("out")?);
    let split = match args.optional("split").unwrap_or("val") {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(CliError::Usage(format!("unknown split `{other}`"))),
    };
    let data = load_data(&cfg)?;
    let hash = cfg.hash();

    let (params, ckpt_hash) = load_checkpoint(&checkpoint_path)?;
    if ckpt_hash != hash {
        return Err(CliError::Validation(format!(
            "checkpoint {} was trained under config {ckpt_hash:016x}, supplied config hashes to {hash:016x}",
            checkpoint_path.display()
        )));
    }
    let feature_dim = data.features.dim().expect("non-empty store");
    let model = Model::with_params(cfg.model.clone(), &data.vocab, feature_dim, params)?;

    let queries = QuerySet::from_triplets(&data.triplets, split);
    if queries.is_empty() {
        return Err(CliError::Validation(format!("no {split} triplets to evaluate")));
    }
    let truth = queries.ground_truth();
    let ctx = EvalContext {
        features: &data.features,
        ir_features: data.ir_features.as_ref(),
        vocab: &data.vocab,
        spell_correct: cfg.textprep.spell_correct,
        overrides: data.overrides.as_ref(),
    };
    let matrix = build_score_matrix(&model, &queries, &ctx)?;
    let report = report_from_matrix(&matrix, &truth, cfg.metrics.ks())?;

    ensure_dir(&out)?;
    save_score_matrix(&out.join("scores.tsv"), &matrix, hash)?;
    truth.save(&out.join("truth.tsv"), hash)?;
    save_report(&out.join("report.json"), &report, hash)?;
    print!("{}", report.render_table());
    println!("objective {:.2}", ensemble_objective(&report));
    println!("eval: {} queries x {} gallery -> {}", matrix.n_queries(), matrix.n_gallery(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
}

/// Input document for the `ensemble` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub matrices: Vec<ManifestEntry>,
    pub truth: PathBuf,
    /// Optional second truth set; the final matrix is scored against both so
    /// accumulation overfitting stays visible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_truth: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

#[derive(Serialize)]
struct WeightsOut<'a> {
    config_hash: String,
    names: &'a [String],
    weights: &'a [f64],
    objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout_objective: Option<f64>,
    rounds: &'a [crate::ensemble::RoundRecord],
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    round: usize,
    trial: usize,
    weights: &'a [f64],
    objective: f64,
}

fn cmd_ensemble(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&["manifest", "out", "seed"])?;
    let manifest_path = PathBuf::from(args.required("manifest")?);
    let out = PathBuf::from(args.required("out")?);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.matrices.is_empty() {
        return Err(CliError::Validation("manifest lists no matrices".into()));
    }
    let seed: u64 = args.parse_opt("seed", manifest.seed)?;
    let hash = content_hash(format!("{text}\nseed={seed}").as_bytes());

    let mut entries = Vec::new();
    for entry in &manifest.matrices {
        let mut m = crate::datastore::load_score_matrix(&entry.path)?;
        if manifest.ensemble.zscore {
            m = crate::ensemble::zscore_rows(&m)?;
        }
        entries.push((entry.name.clone(), m));
    }
    let pool = EnsemblePool::new(entries)?;
    let truth = GroundTruth::load(&manifest.truth)?;
    let settings = manifest.ensemble.tpe_settings();
    let result = iterative_ensemble(
        &pool,
        &truth,
        manifest.metrics.ks(),
        manifest.ensemble.rounds,
        manifest.ensemble.n_trials,
        manifest.ensemble.stop_eps,
        seed,
        &settings,
    )?;

    let holdout_objective = match &manifest.holdout_truth {
        Some(path) => {
            let holdout = GroundTruth::load(path)?;
            let report = report_from_matrix(&result.final_matrix, &holdout, manifest.metrics.ks())?;
            Some(ensemble_objective(&report))
        }
        None => None,
    };

    ensure_dir(&out)?;
    let last_round = result.rounds.last().expect("at least one round");
    let weights_out = WeightsOut {
        config_hash: format!("{hash:016x}"),
        names: &result.pool_names,
        weights: &last_round.weights,
        objective: result.final_objective,
        holdout_objective,
        rounds: &result.rounds,
    };
    fs::write(
        out.join("weights.json"),
        serde_json::to_string_pretty(&weights_out).expect("weights serialization") + "\n",
    )?;
    save_score_matrix(&out.join("fused.tsv"), &result.final_matrix, hash)?;
    let mut jsonl = format!("{{\"config_hash\":\"{hash:016x}\"}}\n");
    for (round, trials) in result.history.iter().enumerate() {
        for (t, TrialRecord { weights, objective }) in trials.iter().enumerate() {
            let line = HistoryLine { round: round + 1, trial: t, weights, objective: *objective };
            jsonl.push_str(&serde_json::to_string(&line).expect("history serialization"));
            jsonl.push('\n');
        }
    }
    fs::write(out.join("history.jsonl"), jsonl)?;

    for round in &result.rounds {
        println!(
            "round {}  objective {:.4}  pool {}  weights {:?}",
            round.round, round.objective, round.pool_size, round.weights
        );
    }
    match holdout_objective {
        Some(h) => println!(
            "ensemble: objective {:.4} (holdout {h:.4}) -> {}",
            result.final_objective,
            out.display()
        ),
        None => println!("ensemble: objective {:.4} -> {}", result.final_objective, out.display()),
    }
    Ok(())
}

/// One gradient-check row: a differentiable component and its worst relative
/// error against central differences.
#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference verification of every encoder, every composer (run end
/// to end through the encoders), and both losses, at small dimensions.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<ComponentCheck>, KernelError> {
    let vocab = build_vocab(
        ["red", "blue", "long", "short", "plain", "floral"],
        1,
        None,
    );
    let feature_dim = 10;
    let make_config = |variant: TextEncoderVariant, composer: ComposerKind| ModelConfig {
        encoder: TextEncoderConfig { variant, e_word: 6, hidden: 8, layers: 2, out_dim: 8 },
        image_hidden: 8,
        composer,
        rtic: RticConfig { blocks: 2, block_hidden: 8 },
    };
    let mut rng = Rng::stream(seed, "gradcheck-data", &[]);
    let seq = crate::textprep::TokenSequence { tokens: vec![CLS, 4, 5, 6, 7, 8], source_captions: 1 };
    let feature: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
    let mut checks = Vec::new();

    // Encoders: loss = mean(f_T^2) with gradients through every text param.
    for (name, variant) in [
        ("encoder_swem", TextEncoderVariant::Swem),
        ("encoder_gru", TextEncoderVariant::Gru),
        ("encoder_lstm", TextEncoderVariant::Lstm),
        ("encoder_lstm_plus_gru", TextEncoderVariant::LstmPlusGru),
    ] {
        let config = make_config(variant, ComposerKind::TextOnly);
        let model = Model::init(config.clone(), &vocab, feature_dim, None, seed)?;
        let mut params = model.params.clone();
        let seq = seq.clone();
        let encoder = config.encoder.clone();
        let report = finite_diff_check(&mut params, 1e-6, 20, seed, move |tape, bind| {
            let out = crate::encoders::text_encode(tape, bind, &seq, &encoder)?;
            tape.mean(tape.hadamard(out, out)?)
        })?;
        checks.push(ComponentCheck { name, max_rel_err: report.max_rel_err });
    }

    // Composers end to end: tokens -> text encoder -> composer -> loss.
    for (name, composer) in [
        ("composer_text_only", ComposerKind::TextOnly),
        ("composer_tirg", ComposerKind::Tirg),
        ("composer_rtic", ComposerKind::Rtic),
    ] {
        let config = make_config(TextEncoderVariant::LstmPlusGru, composer);
        let model = Model::init(config, &vocab, feature_dim, None, seed)?;
        let mut params = model.params.clone();
        let seq = seq.clone();
        let feature = feature.clone();
        let report = finite_diff_check(&mut params, 1e-6, 20, seed, move |tape, bind| {
            let out = model.query_embedding(tape, bind, &seq, &feature)?;
            tape.mean(tape.hadamard(out, out)?)
        })?;
        checks.push(ComponentCheck { name, max_rel_err: report.max_rel_err });
    }

    // IR-match composer: RTIC stack driven by the regression loss.
    {
        let config = make_config(TextEncoderVariant::LstmPlusGru, ComposerKind::IrMatch);
        let model = Model::init(config, &vocab, feature_dim, None, seed)?;
        let mut params = model.params.clone();
        let seq = seq.clone();
        let feature = feature.clone();
        let ir_target: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let report = finite_diff_check(&mut params, 1e-6, 20, seed, move |tape, bind| {
            let out = model.query_embedding(tape, bind, &seq, &feature)?;
            let target = tape.constant(Tensor::vector(ir_target.clone()))?;
            ir_match_loss(tape, out, target)
        })?;
        checks.push(ComponentCheck { name: "composer_ir_match", max_rel_err: report.max_rel_err });
    }

    // Batch-hard triplet loss end to end through an RTIC model.
    {
        let config = make_config(TextEncoderVariant::LstmPlusGru, ComposerKind::Rtic);
        let model = Model::init(config, &vocab, feature_dim, None, seed)?;
        let mut params = model.params.clone();
        let seqs: Vec<crate::textprep::TokenSequence> = (0..3)
            .map(|i| crate::textprep::TokenSequence {
                tokens: vec![CLS, 4 + i, 5 + i, 6 + i],
                source_captions: 1,
            })
            .collect();
        let candidates: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..feature_dim).map(|_| rng.normal()).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..feature_dim).map(|_| rng.normal()).collect())
            .collect();
        let report = finite_diff_check(&mut params, 1e-6, 16, seed, move |tape, bind| {
            let mut composed = Vec::new();
            let mut target_rows = Vec::new();
            for i in 0..3 {
                composed.push(model.query_embedding(tape, bind, &seqs[i], &candidates[i])?);
                target_rows.push(model.project_feature(tape, bind, &targets[i])?);
            }
            let c = tape.stack_rows(&composed)?;
            let t = tape.stack_rows(&target_rows)?;
            let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
            crate::training::batch_hard_triplet_loss(tape, c, t, 0.2, &ids)
        })?;
        checks.push(ComponentCheck { name: "loss_batch_hard_triplet", max_rel_err: report.max_rel_err });
    }

    // IR-match loss on raw vectors.
    {
        let mut params = ParamSet::new();
        params.insert("f", Tensor::vector((0..8).map(|_| rng.normal()).collect()));
        let ir: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let report = finite_diff_check(&mut params, 1e-6, 16, seed, move |tape, bind| {
            let target = tape.constant(Tensor::vector(ir.clone()))?;
            ir_match_loss(tape, bind.var("f")?, target)
        })?;
        checks.push(ComponentCheck { name: "loss_ir_match", max_rel_err: report.max_rel_err });
    }

    // RTIC attention head in isolation.
    {
        let config = make_config(TextEncoderVariant::Swem, ComposerKind::Rtic);
        let model = Model::init(config.clone(), &vocab, feature_dim, None, seed)?;
        let mut params = model.params.clone();
        let f_i: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let f_t: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let report = finite_diff_check(&mut params, 1e-6, 16, seed, move |tape, bind| {
            let fi = tape.constant(Tensor::vector(f_i.clone()))?;
            let ft = tape.constant(Tensor::vector(f_t.clone()))?;
            let out = compose_rtic(tape, bind, fi, ft, &config.rtic)?;
            tape.mean(tape.hadamard(out.composed, out.composed)?)
        })?;
        checks.push(ComponentCheck { name: "rtic_attention_gate", max_rel_err: report.max_rel_err });
    }

    Ok(checks)
}

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    let args = Args::parse(args)?;
    args.reject_unknown(&["seed"])?;
    let seed: u64 = args.parse_opt("seed", 0)?;
    let checks = gradcheck_suite(seed)?;
    let mut failed = 0;
    println!("{:<28}{:>14}  status", "component", "max rel err");
    for check in &checks {
        let ok = check.max_rel_err < GRADCHECK_TOLERANCE;
        if !ok {
            failed += 1;
        }
        println!(
            "{:<28}{:>14.3e}  {}",
            check.name,
            check.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} component(s) exceeded the {GRADCHECK_TOLERANCE:.0e} gradient tolerance"
        )));
    }
    Ok(())
}
