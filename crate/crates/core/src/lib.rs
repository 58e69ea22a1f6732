//! Quaternion message-passing neural networks with lottery-ticket
//! pruning.
//!
//! The crate is organized bottom-up:
//!
//! | module | contents |
//! |---|---|
//! | [`quat`] | quaternion algebra and the real block-matrix form |
//! | [`tensor`] | dense tensors and matrix kernels |
//! | [`tape`] | reverse-mode autodiff over a fixed primitive catalog |
//! | [`graph`] | loading, padding, splits, negative sampling |
//! | [`layers`] | GCN/GAT/SAGE layers in real or quaternion arithmetic |
//! | [`optim`] | Adam with decay flags and mask gating |
//! | [`metrics`] | accuracy, ROC-AUC, hits@k, paired comparisons |
//! | [`train`] | training loop with early stopping |
//! | [`pruning`] | soft-mask sparsification and ticket search |
//! | [`checkpoint`] | manifest + flat binary parameter files |
//! | [`config`] | experiment configuration schema |
//! | [`runner`] | experiment orchestration and results CSV |
//! | [`synth`] | seeded synthetic datasets for tests and demos |

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod pruning;
pub mod quat;
pub mod runner;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
