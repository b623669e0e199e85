//! The book, compiled.
//!
//! Each module below embeds one chapter of the `book/` guide as rustdoc,
//! so every Rust snippet in the book runs under `cargo test --doc`. If a
//! chapter drifts from the library, the build says so.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/frontend.md")]
pub mod frontend {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/codebooks.md")]
pub mod codebooks {}

#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/format.md")]
pub mod format {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
