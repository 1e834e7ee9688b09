//! Keeps the guide in `book/` honest: every chapter is included here as
//! rustdoc, so its code blocks compile and run under `cargo test --doc`.
//! Compiled only while collecting doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/channel-model.md")]
pub mod channel_model {}

#[doc = include_str!("../../../book/src/water-filling.md")]
pub mod water_filling {}

#[doc = include_str!("../../../book/src/nash-equilibrium.md")]
pub mod nash_equilibrium {}

#[doc = include_str!("../../../book/src/conjectures.md")]
pub mod conjectures {}

#[doc = include_str!("../../../book/src/crm.md")]
pub mod crm_chapter {}

#[doc = include_str!("../../../book/src/stackelberg.md")]
pub mod stackelberg {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
