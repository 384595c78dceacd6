//! Self-distillation (DINO) pre-training of vision transformers on
//! multi-channel SAR raster tiles, with attention-map and token-embedding
//! decoders for land-cover segmentation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod decoders;
pub mod dino;
pub mod error;
pub mod experiment;
pub mod export;
pub mod geodata;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
