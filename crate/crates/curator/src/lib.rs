//! Deterministic curation of two-phase instruction-tuning datasets.
//!
//! The pipeline turns a raw JSONL pool of instruction records into two
//! curated corpora:
//!
//! * a **foundational** dataset — per-domain selection (importance
//!   resampling toward target prompt distributions, or source allow/deny
//!   rules) merged with the high-quality seed dialogs; and
//! * a **conversational** dataset — the seed dialogs plus harder variants
//!   produced by instruction evolution, verified by a judge model.
//!
//! Both datasets pass near-duplicate removal and benchmark decontamination
//! before packaging. Every stage is deterministic given the config and seed:
//! all randomness derives from stable hashes, so outputs are independent of
//! worker count, shard order, and interrupt/resume patterns. Model calls go
//! through a gateway with mock, replay, and live backends; the mock backend
//! is deterministic, which makes full end-to-end runs reproducible in tests.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod dedup;
pub mod domain_select;
pub mod dsir;
pub mod evolve;
pub mod featurizer;
pub mod gateway;
pub mod label_system;
pub mod manifest;
pub mod pipeline;
pub mod sampler;
pub mod seed_filter;
pub mod util;
