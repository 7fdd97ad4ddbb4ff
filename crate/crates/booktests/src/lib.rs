//! Every chapter of the guide, compiled as doc-tests so its listings stay in
//! step with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/pointcloud.md")]
pub mod pointcloud {}

#[doc = include_str!("../../../book/src/pmpnet.md")]
pub mod pmpnet {}

#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}

#[doc = include_str!("../../../book/src/temporal.md")]
pub mod temporal {}

#[doc = include_str!("../../../book/src/head.md")]
pub mod head {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}

#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
