//! Self-supervised pretraining for functional brain networks.
//!
//! The pipeline runs desk-scale and fully deterministic: synthetic BOLD cohorts
//! ([`synth`]) are loaded through manifest/scan formats ([`ingest`]), turned into
//! Pearson connectomes with pseudo-connectivity augmentation ([`connectome`]),
//! encoded by a transformer over ROI connection profiles ([`encoder`]) trained
//! with masked-ROI modeling plus bootstrapped latent alignment ([`ssl`], [`trainer`]),
//! and evaluated with a frozen-embedding linear SVM probe ([`probe`]).

pub mod connectome;
pub mod encoder;
pub mod ingest;
pub mod mat;
pub mod numerics;
pub mod probe;
pub mod ssl;
pub mod synth;
pub mod trainer;
