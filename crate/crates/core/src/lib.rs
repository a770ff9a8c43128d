//! Change detection from the decoder features of a pretrained denoising
//! diffusion model.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor library
//! ([`tensor`], [`nn`], [`optim`]) carries the U-Net denoiser ([`unet`]), the
//! closed-form diffusion math ([`diffusion`]), feature extraction from a
//! frozen model ([`features`]), the lightweight change head ([`cd_head`]),
//! metrics, data generation and loading, and the end-to-end [`pipeline`].

pub mod baseline;
pub mod cd_head;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
