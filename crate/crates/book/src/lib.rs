//! The chapters of the guide in `book/`, compiled so that `cargo test`
//! runs every code block in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/numerics.md")]
pub mod numerics {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}
#[doc = include_str!("../../../book/src/batching.md")]
pub mod batching {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/probe.md")]
pub mod probe {}
#[doc = include_str!("../../../book/src/finetuning.md")]
pub mod finetuning {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
