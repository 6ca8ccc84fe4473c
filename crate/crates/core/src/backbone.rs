//! Convolutional encoder and region feature pooling.
//!
//! The tiny encoder is a stack of 3×3 convolutions (padding 1), each
//! followed by ELU, then a half-pixel bilinear upsample. In `identity` mode
//! the input is already a feature map and passes through unchanged.

use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::regions::{region_to_feature_coords, PixelRect, RegionBox};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneMode {
    Tiny,
    Identity,
}

impl FromStr for BackboneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(BackboneMode::Tiny),
            "identity" => Ok(BackboneMode::Identity),
            other => Err(Error::Config(format!("backbone.mode `{other}`: expected tiny|identity"))),
        }
    }
}

impl BackboneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneMode::Tiny => "tiny",
            BackboneMode::Identity => "identity",
        }
    }
}

/// Static shape of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub mode: BackboneMode,
    pub in_channels: usize,
    /// Output channels per conv block (tiny), or the feature channel count
    /// (identity, single entry).
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub upsample: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            mode: BackboneMode::Tiny,
            in_channels: 3,
            channels: vec![16, 32, 32],
            strides: vec![2, 2, 1],
            upsample: 2,
        }
    }
}

impl BackboneSpec {
    pub fn out_channels(&self) -> usize {
        match self.mode {
            BackboneMode::Tiny => *self.channels.last().unwrap_or(&self.in_channels),
            BackboneMode::Identity => self.channels[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            BackboneMode::Tiny => {
                if self.channels.is_empty() || self.channels.len() != self.strides.len() {
                    return Err(Error::Config(format!(
                        "backbone: {} channel entries but {} strides",
                        self.channels.len(),
                        self.strides.len()
                    )));
                }
                if self.channels.contains(&0) || self.strides.contains(&0) || self.upsample == 0 {
                    return Err(Error::Config("backbone: channels, strides and upsample must be positive".into()));
                }
            }
            BackboneMode::Identity => {
                if self.channels.len() != 1 || self.channels[0] == 0 {
                    return Err(Error::Config(
                        "backbone.channels must be a single positive count in identity mode".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Spatial size of the feature map for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.mode {
            BackboneMode::Identity => (h, w),
            BackboneMode::Tiny => {
                let pad = KERNEL / 2;
                let (mut h, mut w) = (h, w);
                for &s in &self.strides {
                    h = (h + 2 * pad - KERNEL) / s + 1;
                    w = (w + 2 * pad - KERNEL) / s + 1;
                }
                (h * self.upsample, w * self.upsample)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    /// `(cout, cin, 3, 3)`
    pub weight: T,
    /// `(cout)`
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T> BackboneParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> BackboneParams<U> {
        BackboneParams {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| ConvBlock {
                    weight: f(format!("backbone.{i}.weight"), &b.weight),
                    bias: f(format!("backbone.{i}.bias"), &b.bias),
                })
                .collect(),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("backbone.{i}.weight"), &mut b.weight);
            f(format!("backbone.{i}.bias"), &mut b.bias);
        }
    }
}

impl BackboneParams<Tensor> {
    /// Zero-filled parameters with the shapes `spec` calls for.
    pub fn zeros(spec: &BackboneSpec) -> Self {
        let blocks = match spec.mode {
            BackboneMode::Identity => Vec::new(),
            BackboneMode::Tiny => {
                let mut cin = spec.in_channels;
                spec.channels
                    .iter()
                    .map(|&cout| {
                        let block = ConvBlock {
                            weight: Tensor::zeros(&[cout, cin, KERNEL, KERNEL]),
                            bias: Tensor::zeros(&[cout]),
                        };
                        cin = cout;
                        block
                    })
                    .collect()
            }
        };
        BackboneParams { blocks }
    }
}

/// Records the encoder on `tape`; returns the `(c, h, w)` feature map.
pub fn encode_on_tape(tape: &mut Tape, image: Var, params: &BackboneParams<Var>, spec: &BackboneSpec) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    let expected = match spec.mode {
        BackboneMode::Tiny => spec.in_channels,
        BackboneMode::Identity => spec.channels[0],
    };
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::shape(
            "encode",
            format!("expected ({expected}, h, w) input, got {shape:?}"),
        ));
    }
    if spec.mode == BackboneMode::Identity {
        return Ok(image);
    }
    let mut x = image;
    for (block, &stride) in params.blocks.iter().zip(&spec.strides) {
        let y = tape.conv2d(x, block.weight, Some(block.bias), stride, KERNEL / 2)?;
        x = tape.elu(y)?;
    }
    if spec.upsample > 1 {
        x = tape.bilinear_upsample(x, spec.upsample)?;
    }
    Ok(x)
}

/// Runs the encoder without recording gradients.
pub fn encode(image: &Tensor, params: &BackboneParams<Tensor>, spec: &BackboneSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let vars = params.map(&mut |_, t| tape.constant(t.clone()));
    let y = encode_on_tape(&mut tape, x, &vars, spec)?;
    Ok(tape.value(y).clone())
}

pub fn feature_rects(boxes: &[RegionBox], grid: usize, feat_h: usize, feat_w: usize) -> Result<Vec<PixelRect>> {
    if feat_h < grid || feat_w < grid {
        return Err(Error::Config(format!(
            "feature map {feat_h}x{feat_w} is smaller than the {grid}x{grid} region grid"
        )));
    }
    Ok(boxes.iter().map(|b| region_to_feature_coords(b, grid, feat_h, feat_w)).collect())
}

/// Average-pools `fmap` over each box; returns `(boxes, channels)`.
pub fn pool_regions_on_tape(tape: &mut Tape, fmap: Var, boxes: &[RegionBox], grid: usize) -> Result<Var> {
    let shape = tape.value(fmap).shape().to_vec();
    let &[_, h, w] = &shape[..] else {
        return Err(Error::shape("region_pool", format!("expected (c,h,w), got {shape:?}")));
    };
    let rects = feature_rects(boxes, grid, h, w)?;
    tape.region_means(fmap, rects)
}

/// Per-channel mean of `fmap` over one region.
pub fn region_pool(fmap: &Tensor, b: &RegionBox, grid: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(fmap.clone());
    let y = pool_regions_on_tape(&mut tape, f, std::slice::from_ref(b), grid)?;
    let c = fmap.shape()[0];
    tape.value(y).clone().reshape(&[c])
}
