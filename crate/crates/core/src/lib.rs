//! Attention-driven multi-scale hierarchical region-graph classification.
//!
//! The pipeline is: a small convolutional [`backbone`] produces a feature
//! map; a fixed [`regions`] hierarchy pools it into per-layer node features;
//! each layer's complete graph is refined by multi-head [`gat`] attention;
//! all nodes are softly clustered by [`pool`]; and a gated [`readout`]
//! turns cluster features into class probabilities. Everything runs on the
//! small reverse-mode [`autograd`] tape in this crate, so every component
//! can be checked against finite differences with [`gradcheck`].

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gat;
pub mod gradcheck;
pub mod hgt1;
pub mod model;
pub mod optim;
pub mod pool;
pub mod readout;
pub mod regions;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::sgd_step;
pub use regions::{enumerate_regions, region_to_feature_coords, PixelRect, RegionBox, RegionLayerSet, RegionShapeRule};
pub use tensor::Tensor;
