//! Whitened-gradient training: a reparametrization of affine layers that
//! bakes input whitening and curvature scaling into the ordinary gradient
//! update, at no extra cost per example.
//!
//! The crate has three parts:
//!
//! * a small deterministic network engine ([`nn`]): dense, convolution,
//!   pooling, batchnorm and softmax layers in plain `f64`:
//! * the update rules themselves ([`reparam`], [`stepsize`], [`curvature`]):
//!   whitening constants, the cheap reparametrized delta and its explicit
//!   matrix-form twin, trust-region stepsizes and curvature probes;
//! * a training harness ([`optim`], [`harness`]) with a CLI for running and
//!   comparing optimizers on CIFAR-10-format data.
//!
//! Everything is single threaded and bit-deterministic for a fixed seed.

pub mod curvature;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod records;
pub mod reparam;
pub mod stepsize;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;

// Every code block in the guide compiles and its assertions hold. One module
// per chapter so a failing doctest names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/reparametrization.md")]
    mod reparametrization {}
    #[doc = include_str!("../../../book/src/stepsizes.md")]
    mod stepsizes {}
    #[doc = include_str!("../../../book/src/curvature.md")]
    mod curvature {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
