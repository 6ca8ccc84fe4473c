//! Finite-difference gradient suites for every primitive, every model
//! component and the whole micro-instance model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Primitive, Tape, Var};
use crate::backbone::{BackboneMode, BackboneSpec};
use crate::error::{Error, Result};
use crate::gat::{self, GatSettings, GraphLayerParams, Pass};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{Model, ModelMode, ModelParams, ModelSpec};
use crate::pool::{self, PoolParams, PoolSettings};
use crate::readout::{self, ReadoutParams};
use crate::regions::{PixelRect, RegionShapeRule};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MODULES: [&str; 5] = ["primitives", "gat", "pool", "readout", "model"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= TOLERANCE
    }
}

/// The small full model used for whole-model gradient checks: 3×8×8
/// images, one conv block upsampled to 16×16, a 4×4 grid with two layers
/// of four regions, 2 heads of width 4, 2 clusters and 3 classes.
pub fn micro_spec() -> ModelSpec {
    ModelSpec {
        mode: ModelMode::Full,
        classes: 3,
        backbone: BackboneSpec {
            mode: BackboneMode::Tiny,
            in_channels: 3,
            channels: vec![4],
            strides: vec![1],
            upsample: 2,
        },
        grid_size: 4,
        rules: vec![
            RegionShapeRule::new(1, 2, 2, 2, 2),
            RegionShapeRule::new(2, 4, 2, 4, 2),
            RegionShapeRule::new(2, 2, 4, 2, 4),
        ],
        layers: 2,
        gat: GatSettings { heads: 2, dim_per_head: 4, dropout: 0.0, ..GatSettings::default() },
        pool: PoolSettings { k: 2, ..PoolSettings::default() },
        scalar_gate: false,
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Contracts any output with fixed random weights into a scalar.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.hadamard(y, w)?;
    tape.sum_all(p)
}

fn check<F>(name: &str, f: F, params: &[Tensor]) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(CheckResult { name: name.to_string(), report: grad_check(f, params, EPS)? })
}

fn check_primitive(prim: Primitive, inputs: Vec<Tensor>) -> Result<CheckResult> {
    let name = format!("primitive/{}", prim.name());
    check(
        &name,
        |tape, vars| {
            let y = tape.op_forward(prim.clone(), vars)?;
            weighted_sum(tape, y, 99)
        },
        &inputs,
    )
}

pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| random_tensor(&mut rng, s, -2.0, 2.0);
    let denom = Tensor::new(vec![3, 1], vec![1.5, -1.2, 2.0])?;
    let rects = vec![
        PixelRect { row0: 0, row1: 2, col0: 1, col1: 4 },
        PixelRect { row0: 1, row1: 5, col0: 0, col1: 5 },
    ];
    let cases = vec![
        (Primitive::MatMul, vec![r(&[3, 4]), r(&[4, 2])]),
        (Primitive::Add, vec![r(&[3, 4]), r(&[4])]),
        (Primitive::Sub, vec![r(&[3, 4]), r(&[3, 1])]),
        (Primitive::Hadamard, vec![r(&[3, 4]), r(&[3, 4])]),
        (Primitive::Div, vec![r(&[3, 2]), denom]),
        (Primitive::Scale(-1.7), vec![r(&[5])]),
        (Primitive::AddScalar(0.3), vec![r(&[5])]),
        (Primitive::Concat { axis: 1 }, vec![r(&[2, 3]), r(&[2, 2])]),
        (Primitive::RowSoftmax, vec![r(&[3, 4])]),
        (Primitive::LeakyRelu { slope: 0.2 }, vec![r(&[4, 5])]),
        (Primitive::Elu, vec![r(&[3, 4])]),
        (Primitive::Sigmoid, vec![r(&[3, 4])]),
        (Primitive::MeanOverAxis { axis: 0 }, vec![r(&[3, 4])]),
        (Primitive::SumAll, vec![r(&[3, 4])]),
        (Primitive::Conv2d { stride: 2, pad: 1 }, vec![r(&[2, 5, 6]), r(&[3, 2, 3, 3]), r(&[3])]),
        (Primitive::BilinearUpsample { factor: 2 }, vec![r(&[2, 3, 4])]),
        (Primitive::CrossEntropy { target: 1 }, vec![r(&[1, 5])]),
        (Primitive::Dropout { rate: 0.3, seed: 9, train: true }, vec![r(&[4, 4])]),
        (Primitive::Transpose, vec![r(&[3, 4])]),
        (Primitive::GatherRows { indices: vec![2, 0, 2] }, vec![r(&[3, 4])]),
        (Primitive::FrobeniusNorm, vec![r(&[3, 4])]),
        (Primitive::Trace, vec![r(&[4, 4])]),
        (Primitive::Reshape { shape: vec![6, 2] }, vec![r(&[3, 4])]),
        (Primitive::RegionMeans { rects }, vec![r(&[2, 5, 5])]),
    ];
    cases.into_iter().map(|(p, inputs)| check_primitive(p, inputs)).collect()
}

/// Rebuilds a parameter tree from the flat variable list grad_check hands out.
fn rebind<P: Clone, Q>(vars: &[Var], template: &P, map: impl FnOnce(&P, &mut dyn FnMut() -> Var) -> Q) -> Q {
    let mut it = vars.iter().copied();
    map(template, &mut || it.next().expect("one variable per tensor"))
}

pub fn gat_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (label, settings) in [
        ("gat/concat", GatSettings { heads: 2, dim_per_head: 3, dropout: 0.0, ..GatSettings::default() }),
        (
            "gat/average",
            GatSettings { heads: 2, dim_per_head: 3, dropout: 0.0, aggregation: gat::Aggregation::Average, ..GatSettings::default() },
        ),
        ("gat/shared_score", GatSettings { heads: 2, dim_per_head: 3, dropout: 0.0, shared_score_w: true, ..GatSettings::default() }),
        ("gat/gcn", GatSettings { heads: 2, dim_per_head: 3, dropout: 0.0, layer_type: gat::LayerType::Gcn, ..GatSettings::default() }),
    ] {
        let mut params = GraphLayerParams::zeros(&settings, 4);
        params.visit_mut("g", &mut |_, t| *t = random_tensor(&mut rng, t.shape(), -1.0, 1.0));
        let mut tensors = vec![random_tensor(&mut rng, &[5, 4], -1.0, 1.0)];
        tensors.extend(params.map("g", &mut |_, t| t.clone()).flatten());
        out.push(check(
            label,
            |tape, vars| {
                let p = rebind(&vars[1..], &params, |t, next| t.map("g", &mut |_, _| next()));
                let y = gat::layer_on_tape(tape, vars[0], &p, &settings, Pass::EVAL)?;
                weighted_sum(tape, y, 7)
            },
            &tensors,
        )?);
    }
    Ok(out)
}

impl<T: Clone> GraphLayerParams<T> {
    fn flatten(&self) -> Vec<T> {
        let mut v = Vec::new();
        self.map("g", &mut |_, t| v.push(t.clone()));
        v
    }
}

pub fn pool_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [3usize, 2, 2];
    let adjacency = pool::block_adjacency(&sizes);
    let f = random_tensor(&mut rng, &[7, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3], -1.0, 1.0);
    let mut out = Vec::new();
    for normalize in [true, false] {
        let name = if normalize { "pool/features" } else { "pool/features_unnormalized" };
        out.push(check(
            name,
            |tape, v| {
                let s = pool::soft_assign_on_tape(tape, v[0], &PoolParams { w: v[1], b: v[2] })?;
                let y = pool::pool_on_tape(tape, s, v[0], normalize)?;
                weighted_sum(tape, y, 3)
            },
            &[f.clone(), w.clone(), b.clone()],
        )?);
    }
    for (name, pick) in [("pool/mincut", 0usize), ("pool/orthogonality", 1)] {
        out.push(check(
            name,
            |tape, v| {
                let s = pool::soft_assign_on_tape(tape, v[0], &PoolParams { w: v[1], b: v[2] })?;
                let a = tape.constant(adjacency.clone());
                let (cut, ortho) = pool::mincut_on_tape(tape, s, a)?;
                Ok(if pick == 0 { cut } else { ortho })
            },
            &[f.clone(), w.clone(), b.clone()],
        )?);
    }
    Ok(out)
}

pub fn readout_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, scalar) in [("readout/gated_ce", false), ("readout/scalar_gate_ce", true)] {
        let mut params = ReadoutParams::zeros(3, 4, true, scalar);
        params.visit_mut(&mut |_, t| *t = random_tensor(&mut rng, t.shape(), -1.0, 1.0));
        let mut tensors = vec![random_tensor(&mut rng, &[2, 4], -1.0, 1.0)];
        params.map(&mut |_, t| tensors.push(t.clone()));
        out.push(check(
            name,
            |tape, v| {
                let p = rebind(&v[1..], &params, |t, next| t.map(&mut |_, _| next()));
                let z = readout::gated_logits_on_tape(tape, v[0], &p)?;
                tape.cross_entropy(z, 2)
            },
            &tensors,
        )?);
    }
    Ok(out)
}

/// Whole-model loss (cross-entropy plus both auxiliary terms) of one image.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in [
        ("model/micro_full", micro_spec()),
        ("model/micro_baseline", ModelSpec { mode: ModelMode::Baseline, ..micro_spec() }),
    ] {
        let model = Model::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init_params(&mut rng);
        let image = random_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        out.push(check(
            name,
            |tape, v| {
                let p: ModelParams<Var> = rebind(v, &params, |t, next| t.map(&mut |_, _| next()));
                let x = tape.constant(image.clone());
                let fw = model.forward_on_tape(tape, x, &p, Pass::EVAL)?;
                Ok(model.loss_on_tape(tape, &fw, 1)?.0)
            },
            &tensors,
        )?);
    }
    Ok(out)
}

/// Runs one named suite, or every suite for `all`.
pub fn run(module: &str, seed: u64) -> Result<Vec<CheckResult>> {
    match module {
        "primitives" => primitive_suite(seed),
        "gat" => gat_suite(seed),
        "pool" => pool_suite(seed),
        "readout" => readout_suite(seed),
        "model" => model_suite(seed),
        "all" => {
            let mut all = Vec::new();
            for m in MODULES {
                all.extend(run(m, seed)?);
            }
            Ok(all)
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck module `{other}`: expected all|{}",
            MODULES.join("|")
        ))),
    }
}
