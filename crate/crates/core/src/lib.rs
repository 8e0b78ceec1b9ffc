//! Masked image modeling against a frozen feature tokenizer, and the
//! classification, segmentation and localization stack built on top of it.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`graph`], [`ops`]), the optimizer and schedules ([`optim`]), a
//! checkpoint container ([`checkpoint`]), the image pipeline ([`data`]), the
//! vision transformer backbone ([`vit`]), the pre-training objective
//! ([`mim`]), downstream heads ([`transfer`]), metrics ([`metrics`]) and
//! activation-map tooling ([`interpret`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod graph;
pub mod metrics;
pub mod mim;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod transfer;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{DatasetManifest, Image, Split, Task};
pub use error::{Category, Error, Result};
pub use graph::{Bound, Graph, Var};
pub use interpret::Heatmap;
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
pub use vit::{Preset, ViTConfig};
