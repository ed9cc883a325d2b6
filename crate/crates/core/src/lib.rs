//! Hyper-parameter search engine for small convolutional classifiers.
//!
//! The pipeline: a discrete search space ([`space`]), a Gaussian-Process
//! surrogate over encoded points ([`surrogate`]), Probability-of-Improvement
//! acquisition ([`acquire`]), a resumable two-stage search loop
//! ([`optimizer`]), a from-scratch CNN trainer ([`nnet`]), a synthetic
//! volume/slice dataset generator ([`datagen`]), and top-k ensembling with
//! confusion matrices and slice-wise localization ([`ensemble`]).

pub mod acquire;
pub mod bench;
pub mod datagen;
pub mod ensemble;
pub mod imaging;
pub mod nnet;
pub mod optimizer;
pub mod seeds;
pub mod space;
pub mod surrogate;
