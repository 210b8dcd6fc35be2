//! Temporal-spatial vision transformer (TSViT) for satellite image time
//! series, with a reverse-mode autodiff tape, the Adam optimizer, and
//! parameter-efficient fine-tuning (PEFT) surgery: BitFit, visual prompt
//! tuning, LoRA, AdaptFormer, head tuning and token tuning.
//!
//! The crate is `no_std` + `alloc`: everything in here is pure computation.
//! File formats, datasets, training loops and the CLI live in `tsvit-run`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod accounting;
pub mod adam;
pub mod error;
pub mod graph;
pub mod model;
pub mod params;
pub mod peft;
pub mod rng;
pub mod tensor;

pub use accounting::{count_params, estimate_flops, FlopReport, ParamReport};
pub use adam::{Adam, AdamState};
pub use error::CoreError;
pub use graph::{Graph, Var};
pub use model::{Forward, TsVit, TsVitConfig, REFERENCE_CONFIG_R};
pub use params::{ParamSet, Parameter};
pub use peft::{
    apply_peft, merge_lora, BiasSubset, PeftSpec, SurgeryReport, TokenMode,
};
pub use rng::Rng;
pub use tensor::Tensor;
