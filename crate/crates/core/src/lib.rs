//! Residual image classifiers with optional bottleneck-transformer blocks,
//! built on a small reverse-mode autodiff engine.
//!
//! The crate covers the full experiment loop: tensors and differentiable ops
//! ([`tape`]), layers ([`nn`], [`attention`], [`blocks`], [`backbone`]),
//! offline data augmentation ([`augment`]), dataset ingestion ([`data_io`]),
//! and training, evaluation and ablation runs ([`train_eval`]).

pub mod attention;
pub mod augment;
pub mod backbone;
pub mod blocks;
pub mod config;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train_eval;

pub use backbone::{ModelConfig, Network};
pub use blocks::{BlockKind, BlockVariant, ModFlags, ResidualBlock};
pub use error::{Error, Result};
pub use tape::{Mode, NormConfig, OpKind, PoolKind, RunningStats, Tape, Var};
pub use tensor::{Element, Tensor};
