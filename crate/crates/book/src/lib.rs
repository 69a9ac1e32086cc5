//! The guide's chapters as doc comments, so `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}
#[doc = include_str!("../../../book/src/dnet.md")]
pub mod dnet {}
#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
