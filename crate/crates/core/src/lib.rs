//! Linearized contrastive finetuning with self-distillation.
//!
//! The image encoder is a single matrix acting on fixed features while the
//! text encoder stays frozen. Under that model the contrastive objective
//! reduces to least squares, so direct finetuning, L2 anchoring and static
//! self-distillation all have closed forms, and a weighted-moving-average
//! teacher has an exact per-step recursion on the task subspace.

pub mod closed_form;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod gd;
pub mod matcore;
pub mod objective;
pub mod teacher;

pub use error::{Error, Result};
pub use matcore::Mat;
