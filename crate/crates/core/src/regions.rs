//! Multi-scale hierarchical regions on a square cell grid.
//!
//! Each layer of the hierarchy is described by a handful of shape rules: a
//! box of `width × height` cells placed at every stride offset that keeps it
//! fully inside the grid. Rules in one layer share the same area and differ
//! in aspect ratio, so a layer looks at the image through several
//! equally-sized but differently-shaped windows. The top layer may also carry
//! the full-grid box.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Placement rule for one region shape within a layer (layers are 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegionShapeRule {
    pub layer: usize,
    pub width: usize,
    pub height: usize,
    pub stride_x: usize,
    pub stride_y: usize,
}

impl RegionShapeRule {
    pub fn new(layer: usize, width: usize, height: usize, stride_x: usize, stride_y: usize) -> Self {
        RegionShapeRule {
            layer,
            width,
            height,
            stride_x,
            stride_y,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Parses `WxH@SXxSY`, e.g. `9x1@3x3`.
    pub fn parse(layer: usize, text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("region shape `{text}`: expected WxH@SXxSY"));
        let (size, stride) = text.trim().split_once('@').ok_or_else(bad)?;
        let pair = |s: &str| -> Result<(usize, usize)> {
            let (a, b) = s.split_once('x').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        };
        let (width, height) = pair(size)?;
        let (stride_x, stride_y) = pair(stride)?;
        if [width, height, stride_x, stride_y].contains(&0) {
            return Err(Error::Config(format!("region shape `{text}`: all extents must be positive")));
        }
        Ok(RegionShapeRule::new(layer, width, height, stride_x, stride_y))
    }

    /// Parses a semicolon-separated list of rules for one layer.
    pub fn parse_layer(layer: usize, text: &str) -> Result<Vec<Self>> {
        text.split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| RegionShapeRule::parse(layer, s))
            .collect()
    }
}

impl fmt::Display for RegionShapeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}x{}", self.width, self.height, self.stride_x, self.stride_y)
    }
}

impl FromStr for RegionShapeRule {
    type Err = Error;

    /// Parses a layer-1 rule; use [`RegionShapeRule::parse`] for other layers.
    fn from_str(s: &str) -> Result<Self> {
        RegionShapeRule::parse(1, s)
    }
}

/// A box of cells `[x0, x0+w) × [y0, y0+h)` in layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionBox {
    pub layer: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)` on a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// The enumerated hierarchy: one ordered box list per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLayerSet {
    grid_size: usize,
    layers: Vec<Vec<RegionBox>>,
}

impl RegionLayerSet {
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Boxes of layer `l` (0-based index into the hierarchy).
    pub fn layer(&self, l: usize) -> &[RegionBox] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<RegionBox>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegionBox> {
        self.layers.iter().flatten()
    }

    /// Keeps only the first `n` layers.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::Config(format!(
                "cannot use {n} layers from a hierarchy of {}",
                self.layers.len()
            )));
        }
        Ok(RegionLayerSet {
            grid_size: self.grid_size,
            layers: self.layers[..n].to_vec(),
        })
    }

    /// Reorders boxes within each layer: `perms[l][i]` is the old index of
    /// the box placed at position `i`.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.layers.len() {
            return Err(Error::Config("one permutation per layer required".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (boxes, perm) in self.layers.iter().zip(perms) {
            let mut seen = vec![false; boxes.len()];
            if perm.len() != boxes.len() || perm.iter().any(|&i| i >= boxes.len() || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::Config("not a permutation of the layer".into()));
            }
            layers.push(perm.iter().map(|&i| boxes[i]).collect());
        }
        Ok(RegionLayerSet {
            grid_size: self.grid_size,
            layers,
        })
    }
}

/// The desk-scale hierarchy on a 12×12 grid: layer sizes (32, 21, 5).
pub fn default_rules() -> Vec<RegionShapeRule> {
    let r = RegionShapeRule::new;
    vec![
        r(1, 3, 3, 3, 3),
        r(1, 1, 9, 3, 3),
        r(1, 9, 1, 3, 3),
        r(2, 6, 6, 3, 3),
        r(2, 4, 9, 4, 3),
        r(2, 9, 4, 3, 4),
        r(3, 12, 12, 12, 12),
        r(3, 12, 6, 12, 6),
        r(3, 6, 12, 6, 12),
    ]
}

pub const DEFAULT_GRID_SIZE: usize = 12;

/// Enumerates every fully-inside stride placement of every rule.
///
/// Ordering is layer, then rule order, then row-major offset. A box produced
/// by two rules of the same layer is kept once, at its first occurrence.
pub fn enumerate_regions(rules: &[RegionShapeRule], grid: usize) -> Result<RegionLayerSet> {
    if grid == 0 {
        return Err(Error::Config("grid size must be positive".into()));
    }
    let num_layers = rules.iter().map(|r| r.layer).max().unwrap_or(0);
    if num_layers == 0 {
        return Err(Error::Config("no region rules given".into()));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for layer in 1..=num_layers {
        let layer_rules: Vec<&RegionShapeRule> = rules.iter().filter(|r| r.layer == layer).collect();
        if layer_rules.is_empty() {
            return Err(Error::Config(format!("layer {layer} has no region rules")));
        }
        check_layer_areas(layer, &layer_rules, grid, layer == num_layers)?;
        let mut seen = HashSet::new();
        let mut boxes = Vec::new();
        for rule in layer_rules {
            if rule.width > grid || rule.height > grid {
                return Err(Error::Config(format!(
                    "layer {layer}: region {}x{} exceeds the {grid}x{grid} grid",
                    rule.width, rule.height
                )));
            }
            if rule.stride_x == 0 || rule.stride_y == 0 {
                return Err(Error::Config(format!("layer {layer}: stride must be positive")));
            }
            for y0 in (0..=grid - rule.height).step_by(rule.stride_y) {
                for x0 in (0..=grid - rule.width).step_by(rule.stride_x) {
                    let b = RegionBox {
                        layer,
                        x0,
                        y0,
                        w: rule.width,
                        h: rule.height,
                    };
                    if seen.insert(b) {
                        boxes.push(b);
                    }
                }
            }
        }
        layers.push(boxes);
    }
    Ok(RegionLayerSet {
        grid_size: grid,
        layers,
    })
}

fn check_layer_areas(layer: usize, rules: &[&RegionShapeRule], grid: usize, top: bool) -> Result<()> {
    let is_full = |r: &&&RegionShapeRule| top && r.width == grid && r.height == grid;
    let mut areas = rules.iter().filter(|r| !is_full(r)).map(|r| r.area());
    if let Some(first) = areas.next() {
        if let Some(other) = areas.find(|&a| a != first) {
            return Err(Error::Config(format!(
                "layer {layer}: region areas differ ({first} vs {other} cells)"
            )));
        }
    }
    Ok(())
}

/// Maps a cell box onto a `feat_h × feat_w` feature map by floor scaling.
pub fn region_to_feature_coords(b: &RegionBox, grid: usize, feat_h: usize, feat_w: usize) -> PixelRect {
    debug_assert!(feat_h >= grid && feat_w >= grid);
    PixelRect {
        row0: b.y0 * feat_h / grid,
        row1: (b.y0 + b.h) * feat_h / grid,
        col0: b.x0 * feat_w / grid,
        col1: (b.x0 + b.w) * feat_w / grid,
    }
}
