// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders built from proximal operators.
//!
//! The four encoder nonlinearities (soft-threshold ReLU, JumpReLU, TopK and
//! AbsTopK) are proximal operators of sparsity regularizers, and an SAE
//! encoder is one unrolled proximal-gradient step with learnable weights.
//! This crate provides the operators with brute-force oracles, an iterative
//! reference coder, the SAE model and Adam trainer, a planted-concept data
//! generator, evaluation metrics, steering interventions, a binary container
//! format, and the `proxsae` command-line tool.

// `!(x >= 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coding;
pub mod config;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod prox;
pub mod steering;
pub mod storage;
pub mod synth;
pub mod trainer;

pub use coding::{prox_grad_step, sparse_code, CoderConfig, SparseCode};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use linalg::{column_normalize, matvec, matvec_t, Matrix, Rng, RngState, Vector};
pub use model::{decode, encode, init_params, reconstruct, SaeParams, SaeVariant};
pub use prox::{prox_abs_topk, prox_jump_relu, prox_oracle, prox_relu_soft, prox_topk, ProxSpec};
pub use steering::{activation_add, dim_extract, directional_ablate, latent_clamp, ConceptVector};
pub use storage::{ActivationStore, Checkpoint, StoreMeta};
pub use synth::{generate, make_contrast_pairs, GroundTruth, SynthSpec};
pub use trainer::{train, TrainConfig, TrainReport};
