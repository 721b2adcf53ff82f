//! The guide's code listings, compiled and run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/matrices.md")]
pub mod matrices {}

#[doc = include_str!("../../../book/src/mechanism.md")]
pub mod mechanism {}

#[doc = include_str!("../../../book/src/stacking.md")]
pub mod stacking {}

#[doc = include_str!("../../../book/src/noise.md")]
pub mod noise {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/membership.md")]
pub mod membership {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
