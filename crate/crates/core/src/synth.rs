//! Synthetic 4-class datasets on a 64×64 canvas.
//!
//! `relational`: two fixed 8×8 texture patches A and B; the class is the
//! quadrant of B relative to A. `local`: one patch whose texture is the
//! class, placed anywhere. Channels 0 and 1 hold the pixel's `x` and `y`
//! scaled to `[0, 1]` everywhere; patches are drawn into channel 2, which is
//! zero elsewhere.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::hgt1::{self, Dtype};
use crate::tensor::Tensor;

pub const CANVAS: usize = 64;
pub const PATCH: usize = 8;
pub const CLASSES: usize = 4;
/// Minimum centre distance between the two relational patches.
pub const MIN_DISTANCE: f64 = 24.0;
/// Minimum centre separation along each axis, so every class is unambiguous.
pub const MIN_AXIS_GAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Relational,
    Local,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relational" => Ok(Task::Relational),
            "local" => Ok(Task::Local),
            other => Err(Error::Config(format!("unknown synthetic task `{other}`: expected relational|local"))),
        }
    }
}

/// Texture `t` at patch pixel `(y, x)`.
fn texel(t: usize, y: usize, x: usize) -> f64 {
    let on = match t {
        // Checkerboard.
        0 => (y + x).is_multiple_of(2),
        // Horizontal stripes, three rows on and one off.
        1 => y % 4 != 3,
        // Vertical stripes.
        2 => (x / 2).is_multiple_of(2),
        // Ring.
        _ => y == 0 || x == 0 || y == PATCH - 1 || x == PATCH - 1,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

fn background() -> Tensor {
    let n = CANVAS * CANVAS;
    let mut data = vec![0.0; 3 * n];
    let scale = (CANVAS - 1) as f64;
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            data[y * CANVAS + x] = x as f64 / scale;
            data[n + y * CANVAS + x] = y as f64 / scale;
        }
    }
    Tensor::new(vec![3, CANVAS, CANVAS], data).expect("canvas shape")
}

fn stamp(img: &mut Tensor, texture: usize, top: usize, left: usize) {
    let n = CANVAS * CANVAS;
    let data = img.data_mut();
    for y in 0..PATCH {
        for x in 0..PATCH {
            data[2 * n + (top + y) * CANVAS + left + x] = texel(texture, y, x);
        }
    }
}

/// Top-left corners `(top, left)` of patches A and B for relational class
/// `label`: bit 0 set means B is left of A, bit 1 set means B is above A.
/// Class 0 thus has A's centre left of and above B's.
pub fn relational_layout(label: usize, rng: &mut impl Rng) -> ((usize, usize), (usize, usize)) {
    let span = CANVAS - PATCH;
    loop {
        let a = (rng.gen_range(0..=span), rng.gen_range(0..=span));
        let b = (rng.gen_range(0..=span), rng.gen_range(0..=span));
        let (dy, dx) = (b.0 as f64 - a.0 as f64, b.1 as f64 - a.1 as f64);
        if dy.hypot(dx) < MIN_DISTANCE || a.0.abs_diff(b.0) < MIN_AXIS_GAP || a.1.abs_diff(b.1) < MIN_AXIS_GAP {
            continue;
        }
        let b_left = b.1 < a.1;
        let b_above = b.0 < a.0;
        if (b_left as usize) | ((b_above as usize) << 1) == label {
            return (a, b);
        }
    }
}

/// Renders one sample of `task` with class `label`.
pub fn render(task: Task, label: usize, rng: &mut impl Rng) -> Tensor {
    let mut img = background();
    match task {
        Task::Relational => {
            let (a, b) = relational_layout(label, rng);
            stamp(&mut img, 0, a.0, a.1);
            stamp(&mut img, 1, b.0, b.1);
        }
        Task::Local => {
            let span = CANVAS - PATCH;
            let (top, left) = (rng.gen_range(0..=span), rng.gen_range(0..=span));
            stamp(&mut img, label, top, left);
        }
    }
    img
}

/// Paths of the generated manifests.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes `n_per_class` images per class under `out/images` plus
/// `train.csv` and `test.csv` (the first 80% of each class trains).
pub fn generate(task: Task, n_per_class: usize, seed: u64, out: impl AsRef<Path>) -> Result<SynthOutput> {
    if n_per_class < 5 {
        return Err(Error::Config(format!("n_per_class must be at least 5, got {n_per_class}")));
    }
    let out = out.as_ref();
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = n_per_class * 4 / 5;
    let mut train = Manifest { root: out.to_path_buf(), rows: Vec::new() };
    let mut test = Manifest { root: out.to_path_buf(), rows: Vec::new() };
    for i in 0..n_per_class {
        for label in 0..CLASSES {
            let img = render(task, label, &mut rng);
            let name = format!("images/c{label}_{i:05}.hgt");
            hgt1::save(out.join(&name), &img, Dtype::F32)?;
            let split = if i < n_train { &mut train } else { &mut test };
            split.rows.push((name, label));
        }
    }
    let paths = SynthOutput { train: out.join("train.csv"), test: out.join("test.csv") };
    for (m, p) in [(&train, &paths.train), (&test, &paths.test)] {
        std::fs::write(p, m.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}
