//! Contamination audit harness for multiple-choice benchmarks.
//!
//! The core idea: send each benchmark question to a model twice, once through
//! a faithful relay (the clean control) and once through one or more noisy
//! relays that degrade the question before an answering model ever sees it.
//! Information theory says the degraded runs cannot score better; when they
//! do, the answering model is recognizing the question rather than solving
//! it. This crate samples the corpus, drives the relay/worker protocol
//! against chat endpoints (live or scripted), keeps an append-only trial
//! ledger, computes the violation statistics, renders report tables, and
//! simulates the whole mechanism on synthetic worlds where the ground truth
//! is known.

pub mod config;
pub mod corpus;
pub mod detrng;
pub mod metrics;
pub mod modelio;
pub mod pipeline;
pub mod rational;
pub mod report;
pub mod simulator;
