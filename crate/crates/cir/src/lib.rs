//! Composed image retrieval at desk scale.
//!
//! Given a candidate image feature and a natural-language modification, the
//! models here compose a feature that should land near the target item in a
//! gallery. The crate covers the full loop: dataset synthesis and on-disk
//! formats, text preparation with spell correction, a from-scratch autodiff
//! kernel, four composition heads (Text-only, TIRG, RTIC, IR-match),
//! batch-hard triplet training with AdamW, recall@K evaluation, and
//! TPE-driven score-matrix ensembling with iterative best-score
//! accumulation.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `cir` binary, which exposes the pipeline as subcommands.

pub mod numkernel;
pub mod rng;

pub mod datastore;
pub mod textprep;

pub mod composers;
pub mod encoders;
pub mod model;

pub mod metrics;
pub mod training;

pub mod ensemble;

pub mod cli;
pub mod config;
