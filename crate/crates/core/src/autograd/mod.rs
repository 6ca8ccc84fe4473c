//! Reverse-mode differentiation over an append-only tape of tensor
//! primitives.
//!
//! Every value produced during a forward pass lives on a [`Tape`] and is
//! addressed by a [`Var`]. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Tape::backward`]
//! visits each node exactly once, newest first. Gradient contributions at
//! fan-out points are summed in that fixed order, which keeps repeated runs
//! bit-identical.
//!
//! ```
//! use hiergraph_core::autograd::Tape;
//! use hiergraph_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
//! let sq = tape.hadamard(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub(crate) mod kernels;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::regions::PixelRect;
use crate::tensor::Tensor;
use kernels::{bilinear_taps, col2im, gemm, im2col, sigmoid, softmax_row, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// The primitive catalog. Attributes are carried inline.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    /// Elementwise with 2-D broadcasting (extents equal or 1).
    Add,
    Sub,
    Hadamard,
    Div,
    Scale(f64),
    AddScalar(f64),
    Concat { axis: usize },
    /// Softmax over the last axis.
    RowSoftmax,
    LeakyRelu { slope: f64 },
    Elu,
    Sigmoid,
    /// Mean over one axis; the axis is removed from the shape.
    MeanOverAxis { axis: usize },
    SumAll,
    /// Inputs: `x (cin,h,w)`, `w (cout,cin,kh,kw)`, optional `b (cout)`.
    Conv2d { stride: usize, pad: usize },
    /// Half-pixel bilinear resampling of `(c,h,w)` by an integer factor.
    BilinearUpsample { factor: usize },
    /// Negative log-softmax of a logit vector at `target`.
    CrossEntropy { target: usize },
    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    Dropout { rate: f64, seed: u64, train: bool },
    Transpose,
    GatherRows { indices: Vec<usize> },
    FrobeniusNorm,
    Trace,
    Reshape { shape: Vec<usize> },
    /// Per-channel means of `(c,h,w)` over each rectangle; output `(n,c)`.
    RegionMeans { rects: Vec<PixelRect> },
}

/// Attribute value for string-keyed primitive construction.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Float(f64),
    Int(i64),
    Bool(bool),
    Ints(Vec<usize>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

fn attr_f64(attrs: &Attrs, key: &str, default: Option<f64>) -> Result<f64> {
    match attrs.get(key) {
        Some(AttrValue::Float(v)) => Ok(*v),
        Some(AttrValue::Int(v)) => Ok(*v as f64),
        Some(other) => Err(Error::Config(format!("attribute `{key}`: expected number, got {other:?}"))),
        None => default.ok_or_else(|| Error::Config(format!("missing attribute `{key}`"))),
    }
}

fn attr_usize(attrs: &Attrs, key: &str, default: Option<usize>) -> Result<usize> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        Some(other) => Err(Error::Config(format!(
            "attribute `{key}`: expected non-negative integer, got {other:?}"
        ))),
        None => default.ok_or_else(|| Error::Config(format!("missing attribute `{key}`"))),
    }
}

fn attr_ints(attrs: &Attrs, key: &str) -> Result<Vec<usize>> {
    match attrs.get(key) {
        Some(AttrValue::Ints(v)) => Ok(v.clone()),
        other => Err(Error::Config(format!(
            "attribute `{key}`: expected integer list, got {other:?}"
        ))),
    }
}

impl Primitive {
    /// Resolves a primitive by its catalog id.
    pub fn from_id(id: &str, attrs: &Attrs) -> Result<Self> {
        Ok(match id {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "hadamard" => Primitive::Hadamard,
            "div" => Primitive::Div,
            "scale" => Primitive::Scale(attr_f64(attrs, "factor", None)?),
            "add_scalar" => Primitive::AddScalar(attr_f64(attrs, "value", None)?),
            "concat" => Primitive::Concat {
                axis: attr_usize(attrs, "axis", Some(0))?,
            },
            "row_softmax" => Primitive::RowSoftmax,
            "leaky_relu" => Primitive::LeakyRelu {
                slope: attr_f64(attrs, "slope", Some(DEFAULT_LEAKY_SLOPE))?,
            },
            "elu" => Primitive::Elu,
            "sigmoid" => Primitive::Sigmoid,
            "mean_over_axis" => Primitive::MeanOverAxis {
                axis: attr_usize(attrs, "axis", None)?,
            },
            "sum" => Primitive::SumAll,
            "conv2d" => Primitive::Conv2d {
                stride: attr_usize(attrs, "stride", Some(1))?,
                pad: attr_usize(attrs, "pad", Some(0))?,
            },
            "bilinear_upsample" => Primitive::BilinearUpsample {
                factor: attr_usize(attrs, "factor", None)?,
            },
            "cross_entropy" => Primitive::CrossEntropy {
                target: attr_usize(attrs, "target", None)?,
            },
            "dropout" => Primitive::Dropout {
                rate: attr_f64(attrs, "rate", None)?,
                seed: attr_usize(attrs, "seed", Some(0))? as u64,
                train: match attrs.get("train") {
                    Some(AttrValue::Bool(b)) => *b,
                    None => false,
                    Some(other) => {
                        return Err(Error::Config(format!(
                            "attribute `train`: expected bool, got {other:?}"
                        )))
                    }
                },
            },
            "transpose" => Primitive::Transpose,
            "gather_rows" => Primitive::GatherRows {
                indices: attr_ints(attrs, "indices")?,
            },
            "frobenius_norm" => Primitive::FrobeniusNorm,
            "trace" => Primitive::Trace,
            "reshape" => Primitive::Reshape {
                shape: attr_ints(attrs, "shape")?,
            },
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Hadamard => "hadamard",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Concat { .. } => "concat",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Elu => "elu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MeanOverAxis { .. } => "mean_over_axis",
            Primitive::SumAll => "sum",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::BilinearUpsample { .. } => "bilinear_upsample",
            Primitive::CrossEntropy { .. } => "cross_entropy",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Transpose => "transpose",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::FrobeniusNorm => "frobenius_norm",
            Primitive::Trace => "trace",
            Primitive::Reshape { .. } => "reshape",
            Primitive::RegionMeans { .. } => "region_means",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Hadamard
            | Primitive::Div => 2..=2,
            Primitive::Concat { .. } => 1..=usize::MAX,
            Primitive::Conv2d { .. } => 2..=3,
            _ => 1..=1,
        }
    }
}

enum Saved {
    None,
    Cols(Vec<f64>),
    Mask(Vec<f64>),
    Probs(Vec<f64>),
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Saved,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: Vec<i8>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for values that do
    /// not require gradients or do not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        let requires_grad = value.requires_grad();
        self.push(value, None, Vec::new(), requires_grad, Saved::None)
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(true);
        self.push(value, None, Vec::new(), true, Saved::None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.clear_grad();
        value.set_requires_grad(false);
        self.push(value, None, Vec::new(), false, Saved::None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Signs (-1, 0, +1) of every leaky-ReLU input seen so far, in tape
    /// order. Used by gradient checking to detect non-differentiable points.
    pub fn kink_signature(&self) -> &[i8] {
        &self.kinks
    }

    fn push(
        &mut self,
        value: Tensor,
        prim: Option<Primitive>,
        inputs: Vec<usize>,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        self.nodes.push(Node {
            value,
            prim,
            inputs,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `prim` on `inputs` and records the result.
    pub fn op_forward(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if !prim.arity().contains(&inputs.len()) {
            return Err(Error::shape(
                prim.name(),
                format!("wrong number of inputs: {}", inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::shape(prim.name(), format!("unknown value {bad:?}")));
        }
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&prim, &vals)?
        };
        if let Primitive::LeakyRelu { .. } = prim {
            let x = &self.nodes[inputs[0].0].value;
            self.kinks.extend(x.data().iter().map(|&v| {
                if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                }
            }));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Some(prim), ids, requires_grad, saved))
    }

    /// Propagates d(loss)/d(value) to every differentiable value on the
    /// tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::shape("backward", "loss is not on this tape"))?;
        if node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let contributions = backward(prim, &inputs, &node.value, &node.saved, &g, &needs);
            for (&input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    // Convenience constructors for each primitive.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_forward(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_forward(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_forward(Primitive::Sub, &[a, b])
    }
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_forward(Primitive::Hadamard, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_forward(Primitive::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.op_forward(Primitive::Scale(factor), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        self.op_forward(Primitive::AddScalar(value), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.op_forward(Primitive::Concat { axis }, parts)
    }
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::RowSoftmax, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.op_forward(Primitive::LeakyRelu { slope }, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::Elu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::Sigmoid, &[a])
    }
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.op_forward(Primitive::MeanOverAxis { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::SumAll, &[a])
    }
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let prim = Primitive::Conv2d { stride, pad };
        match b {
            Some(b) => self.op_forward(prim, &[x, w, b]),
            None => self.op_forward(prim, &[x, w]),
        }
    }
    pub fn bilinear_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        self.op_forward(Primitive::BilinearUpsample { factor }, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.op_forward(Primitive::CrossEntropy { target }, &[logits])
    }
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64, train: bool) -> Result<Var> {
        self.op_forward(Primitive::Dropout { rate, seed, train }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::Transpose, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.op_forward(Primitive::GatherRows { indices }, &[a])
    }
    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::FrobeniusNorm, &[a])
    }
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        self.op_forward(Primitive::Trace, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.op_forward(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn region_means(&mut self, fmap: Var, rects: Vec<PixelRect>) -> Result<Var> {
        self.op_forward(Primitive::RegionMeans { rects }, &[fmap])
    }
}

/// 2-D broadcast plan for elementwise binary primitives.
struct Broadcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
    shape: Vec<usize>,
    flat: bool,
}

fn view2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [n] => Some((1, n)),
        [r, c] => Some((r, c)),
        _ if shape.iter().product::<usize>() == 1 => Some((1, 1)),
        _ => None,
    }
}

fn broadcast(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<Broadcast> {
    if sa == sb {
        let n = sa.iter().product();
        return Ok(Broadcast {
            rows: 1,
            cols: n,
            a: (1, n),
            b: (1, n),
            shape: sa.to_vec(),
            flat: true,
        });
    }
    let err = || Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}"));
    let (a, b) = (view2(sa).ok_or_else(err)?, view2(sb).ok_or_else(err)?);
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    let rows = dim(a.0, b.0).ok_or_else(err)?;
    let cols = dim(a.1, b.1).ok_or_else(err)?;
    let shape = if (rows, cols) == a {
        sa.to_vec()
    } else if (rows, cols) == b {
        sb.to_vec()
    } else {
        vec![rows, cols]
    };
    Ok(Broadcast {
        rows,
        cols,
        a,
        b,
        shape,
        flat: false,
    })
}

impl Broadcast {
    #[inline]
    fn ia(&self, i: usize, j: usize) -> usize {
        idx_b(self.a, i, j)
    }
    #[inline]
    fn ib(&self, i: usize, j: usize) -> usize {
        idx_b(self.b, i, j)
    }

    fn apply(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        if self.flat {
            return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(f(a[self.ia(i, j)], b[self.ib(i, j)]));
            }
        }
        out
    }

    /// Reduces an output-shaped gradient onto each operand:
    /// `ga[ia] += g·da(x,y)`, `gb[ib] += g·db(x,y)`.
    #[allow(clippy::type_complexity)]
    fn reduce(
        &self,
        a: &[f64],
        b: &[f64],
        g: &[f64],
        needs: &[bool],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) -> Vec<Option<Vec<f64>>> {
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let (ia, ib) = if self.flat {
                    (j, j)
                } else {
                    (self.ia(i, j), self.ib(i, j))
                };
                let go = g[i * self.cols + j];
                let (x, y) = (a[ia], b[ib]);
                if let Some(ga) = &mut ga {
                    ga[ia] += go * da(x, y);
                }
                if let Some(gb) = &mut gb {
                    gb[ib] += go * db(x, y);
                }
            }
        }
        vec![ga, gb]
    }
}

#[inline]
fn idx_b((r, c): (usize, usize), i: usize, j: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn out(shape: Vec<usize>, data: Vec<f64>) -> Result<(Tensor, Saved)> {
    Ok((Tensor::new(shape, data)?, Saved::None))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = prim.name();
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::Div => {
            let bc = broadcast(name, x[0].shape(), x[1].shape())?;
            let data = match prim {
                Primitive::Add => bc.apply(x[0].data(), x[1].data(), |a, b| a + b),
                Primitive::Sub => bc.apply(x[0].data(), x[1].data(), |a, b| a - b),
                Primitive::Hadamard => bc.apply(x[0].data(), x[1].data(), |a, b| a * b),
                _ => bc.apply(x[0].data(), x[1].data(), |a, b| a / b),
            };
            out(bc.shape, data)
        }
        Primitive::MatMul => {
            let (m, k) = x[0].dims2()?;
            let (k2, n) = x[1].dims2()?;
            if k != k2 {
                return Err(Error::shape(
                    name,
                    format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
                ));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, x[0].data(), false, x[1].data(), false, &mut c, false);
            out(vec![m, n], c)
        }
        Primitive::Scale(f) => out(x[0].shape().to_vec(), x[0].data().iter().map(|v| v * f).collect()),
        Primitive::AddScalar(c) => out(x[0].shape().to_vec(), x[0].data().iter().map(|v| v + c).collect()),
        Primitive::Concat { axis } => {
            let first = x[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape(name, format!("axis {axis} out of range for {first:?}")));
            }
            let mut shape = first.to_vec();
            shape[*axis] = 0;
            for t in x {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, format!("cannot concat {first:?} with {s:?} on axis {axis}")));
                }
                shape[*axis] += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in x {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            out(shape, data)
        }
        Primitive::RowSoftmax => {
            let c = *x[0].shape().last().unwrap();
            let mut data = vec![0.0; x[0].numel()];
            for (src, dst) in x[0].data().chunks(c).zip(data.chunks_mut(c)) {
                softmax_row(src, dst);
            }
            out(x[0].shape().to_vec(), data)
        }
        Primitive::LeakyRelu { slope } => out(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        ),
        Primitive::Elu => out(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect(),
        ),
        Primitive::Sigmoid => out(x[0].shape().to_vec(), x[0].data().iter().map(|&v| sigmoid(v)).collect()),
        Primitive::MeanOverAxis { axis } => {
            let s = x[0].shape();
            if *axis >= s.len() {
                return Err(Error::shape(name, format!("axis {axis} out of range for {s:?}")));
            }
            let (outer, n, inner) = split_axis(s, *axis);
            let mut data = vec![0.0; outer * inner];
            let src = x[0].data();
            for o in 0..outer {
                for j in 0..n {
                    let row = &src[(o * n + j) * inner..][..inner];
                    data[o * inner..][..inner].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
            data.iter_mut().for_each(|d| *d /= n as f64);
            let mut shape: Vec<usize> = s.to_vec();
            shape.remove(*axis);
            if shape.is_empty() {
                shape.push(1);
            }
            out(shape, data)
        }
        Primitive::SumAll => out(vec![1], vec![x[0].data().iter().sum()]),
        Primitive::Conv2d { stride, pad } => {
            let (xs, ws) = (x[0].shape(), x[1].shape());
            let (&[cin, h, w], &[cout, wcin, kh, kw]) = (xs, ws) else {
                return Err(Error::shape(name, format!("expected (c,h,w) input and (o,c,kh,kw) kernel, got {xs:?} and {ws:?}")));
            };
            if cin != wcin {
                return Err(Error::shape(name, format!("input has {cin} channels, kernel expects {wcin}")));
            }
            if let Some(b) = x.get(2) {
                if b.shape() != [cout] {
                    return Err(Error::shape(name, format!("bias shape {:?}, expected [{cout}]", b.shape())));
                }
            }
            let g = ConvGeom::new(cin, h, w, kh, kw, *stride, *pad)
                .ok_or_else(|| Error::shape(name, format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}, stride {stride}")))?;
            let cols = im2col(x[0].data(), &g);
            let n = g.out_len();
            let mut data = vec![0.0; cout * n];
            if let Some(b) = x.get(2) {
                for (o, &bv) in b.data().iter().enumerate() {
                    data[o * n..(o + 1) * n].fill(bv);
                }
            }
            gemm(cout, g.patch_len(), n, x[1].data(), false, &cols, false, &mut data, true);
            Ok((Tensor::new(vec![cout, g.ho, g.wo], data)?, Saved::Cols(cols)))
        }
        Primitive::BilinearUpsample { factor } => {
            let &[c, h, w] = x[0].shape() else {
                return Err(Error::shape(name, format!("expected (c,h,w), got {:?}", x[0].shape())));
            };
            if *factor == 0 {
                return Err(Error::shape(name, "factor must be positive"));
            }
            let (ty, tx) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
            let (ho, wo) = (h * factor, w * factor);
            let src = x[0].data();
            let mut data = vec![0.0; c * ho * wo];
            for ch in 0..c {
                let plane = &src[ch * h * w..][..h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
                    let dst = &mut data[(ch * ho + oy) * wo..][..wo];
                    for (d, &(x0, x1, wx0, wx1)) in dst.iter_mut().zip(&tx) {
                        *d = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                    }
                }
            }
            out(vec![c, ho, wo], data)
        }
        Primitive::CrossEntropy { target } => {
            let z = x[0];
            let c = z.numel();
            if z.rank() > 2 || (z.rank() == 2 && z.shape()[0] != 1) {
                return Err(Error::shape(name, format!("expected a single logit row, got {:?}", z.shape())));
            }
            if *target >= c {
                return Err(Error::shape(name, format!("target {target} out of range for {c} classes")));
            }
            let mut p = vec![0.0; c];
            softmax_row(z.data(), &mut p);
            let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok((Tensor::scalar(lse - z.data()[*target]), Saved::Probs(p)))
        }
        Primitive::Dropout { rate, seed, train } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
            if !train || *rate == 0.0 {
                return out(x[0].shape().to_vec(), x[0].data().to_vec());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x[0].numel())
                .map(|_| if rng.gen::<f64>() >= *rate { keep } else { 0.0 })
                .collect();
            let data = x[0].data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Ok((Tensor::new(x[0].shape().to_vec(), data)?, Saved::Mask(mask)))
        }
        Primitive::Transpose => {
            let (r, c) = x[0].dims2()?;
            let src = x[0].data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            out(vec![c, r], data)
        }
        Primitive::GatherRows { indices } => {
            let (r, c) = x[0].dims2()?;
            if indices.is_empty() {
                return Err(Error::shape(name, "no rows selected"));
            }
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= r {
                    return Err(Error::shape(name, format!("row {i} out of range for {r} rows")));
                }
                data.extend_from_slice(x[0].row(i));
            }
            out(vec![indices.len(), c], data)
        }
        Primitive::FrobeniusNorm => out(vec![1], vec![x[0].data().iter().map(|v| v * v).sum::<f64>().sqrt()]),
        Primitive::Trace => {
            let (r, c) = x[0].dims2()?;
            if r != c {
                return Err(Error::shape(name, format!("trace of non-square {r}x{c}")));
            }
            out(vec![1], vec![(0..r).map(|i| x[0].data()[i * c + i]).sum()])
        }
        Primitive::Reshape { shape } => Ok((x[0].clone().reshape(shape)?, Saved::None)),
        Primitive::RegionMeans { rects } => {
            let &[c, h, w] = x[0].shape() else {
                return Err(Error::shape(name, format!("expected (c,h,w), got {:?}", x[0].shape())));
            };
            if rects.is_empty() {
                return Err(Error::shape(name, "no regions"));
            }
            let src = x[0].data();
            let mut data = Vec::with_capacity(rects.len() * c);
            for r in rects {
                if r.row0 >= r.row1 || r.col0 >= r.col1 || r.row1 > h || r.col1 > w {
                    return Err(Error::shape(name, format!("rectangle {r:?} invalid for {h}x{w} map")));
                }
                let area = r.area() as f64;
                for ch in 0..c {
                    let plane = &src[ch * h * w..][..h * w];
                    let s: f64 = (r.row0..r.row1)
                        .map(|y| plane[y * w + r.col0..y * w + r.col1].iter().sum::<f64>())
                        .sum();
                    data.push(s / area);
                }
            }
            out(vec![rects.len(), c], data)
        }
    }
}

fn backward(
    prim: &Primitive,
    x: &[&Tensor],
    y: &Tensor,
    saved: &Saved,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let only = |v: Vec<f64>| vec![needs[0].then_some(v)];
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::Div => {
            let bc = broadcast("backward", x[0].shape(), x[1].shape()).expect("checked in forward");
            let (a, b) = (x[0].data(), x[1].data());
            match prim {
                Primitive::Add => bc.reduce(a, b, g, needs, |_, _| 1.0, |_, _| 1.0),
                Primitive::Sub => bc.reduce(a, b, g, needs, |_, _| 1.0, |_, _| -1.0),
                Primitive::Hadamard => bc.reduce(a, b, g, needs, |_, y| y, |x, _| x),
                _ => bc.reduce(a, b, g, needs, |_, y| 1.0 / y, |x, y| -x / (y * y)),
            }
        }
        Primitive::MatMul => {
            let (m, k) = x[0].dims2().unwrap();
            let n = x[1].shape()[1];
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, x[1].data(), true, &mut da, false);
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, x[0].data(), true, g, false, &mut db, false);
                db
            });
            vec![da, db]
        }
        Primitive::Scale(f) => only(g.iter().map(|v| v * f).collect()),
        Primitive::AddScalar(_) | Primitive::Reshape { .. } => only(g.to_vec()),
        Primitive::Concat { axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.shape()[*axis] * inner;
            let mut offset = 0;
            x.iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let block = t.shape()[*axis] * inner;
                    let part = need.then(|| {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..][..block]);
                        }
                        d
                    });
                    offset += block;
                    part
                })
                .collect()
        }
        Primitive::RowSoftmax => {
            let c = *y.shape().last().unwrap();
            let mut d = vec![0.0; g.len()];
            for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            only(d)
        }
        Primitive::LeakyRelu { slope } => only(
            x[0].data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv }).collect(),
        ),
        Primitive::Elu => only(
            x[0].data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&v, &yv), &gv)| if v > 0.0 { gv } else { gv * (yv + 1.0) })
                .collect(),
        ),
        Primitive::Sigmoid => only(y.data().iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect()),
        Primitive::MeanOverAxis { axis } => {
            let (outer, n, inner) = split_axis(x[0].shape(), *axis);
            let mut d = vec![0.0; x[0].numel()];
            let inv = 1.0 / n as f64;
            for o in 0..outer {
                for j in 0..n {
                    d[(o * n + j) * inner..][..inner]
                        .iter_mut()
                        .zip(&g[o * inner..][..inner])
                        .for_each(|(dv, gv)| *dv = gv * inv);
                }
            }
            only(d)
        }
        Primitive::SumAll => only(vec![g[0]; x[0].numel()]),
        Primitive::Conv2d { stride, pad } => {
            let Saved::Cols(cols) = saved else { unreachable!("conv saves its columns") };
            let &[cin, h, w] = x[0].shape() else { unreachable!() };
            let &[cout, _, kh, kw] = x[1].shape() else { unreachable!() };
            let geom = ConvGeom::new(cin, h, w, kh, kw, *stride, *pad).unwrap();
            let (p, n) = (geom.patch_len(), geom.out_len());
            let dx = needs[0].then(|| {
                let mut dcols = vec![0.0; p * n];
                gemm(p, cout, n, x[1].data(), true, g, false, &mut dcols, false);
                let mut dx = vec![0.0; x[0].numel()];
                col2im(&dcols, &geom, &mut dx);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; cout * p];
                gemm(cout, n, p, g, false, cols, true, &mut dw, false);
                dw
            });
            let mut res = vec![dx, dw];
            if x.len() == 3 {
                res.push(needs[2].then(|| g.chunks(n).map(|r| r.iter().sum()).collect()));
            }
            res
        }
        Primitive::BilinearUpsample { factor } => {
            let &[c, h, w] = x[0].shape() else { unreachable!() };
            let (ty, tx) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
            let (ho, wo) = (h * factor, w * factor);
            let mut d = vec![0.0; x[0].numel()];
            for ch in 0..c {
                let plane = &mut d[ch * h * w..][..h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let src = &g[(ch * ho + oy) * wo..][..wo];
                    for (&gv, &(x0, x1, wx0, wx1)) in src.iter().zip(&tx) {
                        plane[y0 * w + x0] += gv * wy0 * wx0;
                        plane[y0 * w + x1] += gv * wy0 * wx1;
                        plane[y1 * w + x0] += gv * wy1 * wx0;
                        plane[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            only(d)
        }
        Primitive::CrossEntropy { target } => {
            let Saved::Probs(p) = saved else { unreachable!("cross entropy saves probabilities") };
            let mut d: Vec<f64> = p.iter().map(|v| v * g[0]).collect();
            d[*target] -= g[0];
            only(d)
        }
        Primitive::Dropout { .. } => match saved {
            Saved::Mask(mask) => only(g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            _ => only(g.to_vec()),
        },
        Primitive::Transpose => {
            let (r, c) = x[0].dims2().unwrap();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            only(d)
        }
        Primitive::GatherRows { indices } => {
            let c = x[0].shape()[1];
            let mut d = vec![0.0; x[0].numel()];
            for (k, &i) in indices.iter().enumerate() {
                d[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
            }
            only(d)
        }
        Primitive::FrobeniusNorm => {
            let norm = y.data()[0];
            only(if norm > 0.0 {
                x[0].data().iter().map(|v| g[0] * v / norm).collect()
            } else {
                vec![0.0; x[0].numel()]
            })
        }
        Primitive::Trace => {
            let n = x[0].shape()[0];
            let mut d = vec![0.0; n * n];
            (0..n).for_each(|i| d[i * n + i] = g[0]);
            only(d)
        }
        Primitive::RegionMeans { rects } => {
            let &[c, h, w] = x[0].shape() else { unreachable!() };
            let mut d = vec![0.0; x[0].numel()];
            for (k, r) in rects.iter().enumerate() {
                let inv = 1.0 / r.area() as f64;
                for ch in 0..c {
                    let gv = g[k * c + ch] * inv;
                    let plane = &mut d[ch * h * w..][..h * w];
                    for yy in r.row0..r.row1 {
                        plane[yy * w + r.col0..yy * w + r.col1].iter_mut().for_each(|v| *v += gv);
                    }
                }
            }
            only(d)
        }
    }
}
