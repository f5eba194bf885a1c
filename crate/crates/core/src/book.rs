//! Book chapters, compiled as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/s4d.md")]
mod s4d {}
#[doc = include_str!("../../../book/src/conv-module.md")]
mod conv_module {}
#[doc = include_str!("../../../book/src/streaming.md")]
mod streaming {}
#[doc = include_str!("../../../book/src/training.md")]
mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
#[doc = include_str!("../../../README.md")]
mod readme {}
