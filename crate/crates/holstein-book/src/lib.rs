//! Compile-and-run harness for the guide under `book/`.
//!
//! Each chapter is included verbatim as the documentation of an empty module,
//! so every Rust fence in the book becomes a doc-test of this crate and runs
//! under `cargo test --workspace`.  Prose can drift freely; code that no
//! longer matches the library fails the build.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}

#[doc = include_str!("../../../book/src/datasets.md")]
pub mod datasets {}

#[doc = include_str!("../../../book/src/tensor.md")]
pub mod tensor {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
