#![doc = include_str!("../../../book/src/introduction.md")]
//!
//! ---
//!
//! This crate holds no code of its own: each module below embeds one
//! chapter of the guide in `book/`, so `cargo test --doc -p unreid-book`
//! compiles and runs every Rust snippet the guide shows.

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/feature-extraction.md")]
pub mod feature_extraction {}

#[doc = include_str!("../../../book/src/memory-bank.md")]
pub mod memory_bank {}

#[doc = include_str!("../../../book/src/label-prediction.md")]
pub mod label_prediction {}

#[doc = include_str!("../../../book/src/reranking.md")]
pub mod reranking {}

#[doc = include_str!("../../../book/src/clustering.md")]
pub mod clustering {}

#[doc = include_str!("../../../book/src/supervised-losses.md")]
pub mod supervised_losses {}

#[doc = include_str!("../../../book/src/training-schedule.md")]
pub mod training_schedule {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
