//! The user guide, compiled as doc-tests.
//!
//! Each chapter under `book/src/` is included verbatim so that `cargo
//! test --doc` builds and runs every code block in the guide; the prose
//! and the library cannot drift apart silently. One module per chapter
//! keeps the failing test name pointing at the right file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/elgamal.md")]
pub mod elgamal {}

#[doc = include_str!("../../../book/src/aggregation.md")]
pub mod aggregation {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/federation.md")]
pub mod federation {}

#[doc = include_str!("../../../book/src/ledger.md")]
pub mod ledger {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
