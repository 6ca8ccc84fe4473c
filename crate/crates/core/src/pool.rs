//! Soft cluster pooling of all region nodes, with MinCut-style auxiliary
//! losses over the block-diagonal layer adjacency.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to each cluster's assignment mass before normalizing.
pub const MASS_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolSettings {
    pub k: usize,
    pub lambda_cut: f64,
    pub lambda_ortho: f64,
    /// Mass-normalized cluster means when true, plain `Sᵀ F` otherwise.
    pub normalize: bool,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings { k: 8, lambda_cut: 0.5, lambda_ortho: 0.5, normalize: true }
    }
}

impl PoolSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("pool.k must be positive".into()));
        }
        if !(self.lambda_cut.is_finite() && self.lambda_ortho.is_finite()) {
            return Err(Error::Config("pool loss weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams<T> {
    /// `(k, d)`
    pub w: T,
    /// `(k)`
    pub b: T,
}

impl<T> PoolParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> PoolParams<U> {
        PoolParams { w: f("pool.w".into(), &self.w), b: f("pool.b".into(), &self.b) }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("pool.w".into(), &mut self.w);
        f("pool.b".into(), &mut self.b);
    }
}

impl PoolParams<Tensor> {
    pub fn zeros(k: usize, d: usize) -> Self {
        PoolParams { w: Tensor::zeros(&[k, d]), b: Tensor::zeros(&[k]) }
    }
}

/// Row-stochastic soft assignment `S` of shape `(R, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment(pub Tensor);

impl Assignment {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// Adjacency of the union of per-layer complete graphs: ones within a layer,
/// zero across layers and on the diagonal.
pub fn block_adjacency(layer_sizes: &[usize]) -> Tensor {
    let r: usize = layer_sizes.iter().sum();
    let mut a = Tensor::zeros(&[r, r]);
    let mut start = 0;
    for &n in layer_sizes {
        for i in start..start + n {
            for j in start..start + n {
                if i != j {
                    a.data_mut()[i * r + j] = 1.0;
                }
            }
        }
        start += n;
    }
    a
}

pub fn soft_assign_on_tape(tape: &mut Tape, features: Var, params: &PoolParams<Var>) -> Result<Var> {
    let (fs, ws) = (tape.value(features).shape().to_vec(), tape.value(params.w).shape().to_vec());
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(Error::shape("soft_assign", format!("features {fs:?} vs weights {ws:?}")));
    }
    let wt = tape.transpose(params.w)?;
    let logits = tape.matmul(features, wt)?;
    let logits = tape.add(logits, params.b)?;
    tape.row_softmax(logits)
}

pub fn pool_on_tape(tape: &mut Tape, s: Var, features: Var, normalize: bool) -> Result<Var> {
    let (r, _) = tape.value(s).dims2()?;
    let (rf, _) = tape.value(features).dims2()?;
    if r != rf {
        return Err(Error::shape("pool_features", format!("assignment has {r} rows, features {rf}")));
    }
    let st = tape.transpose(s)?;
    let pooled = tape.matmul(st, features)?;
    if !normalize {
        return Ok(pooled);
    }
    let ones = tape.constant(Tensor::full(&[r, 1], 1.0));
    let mass = tape.matmul(st, ones)?;
    let mass = tape.add_scalar(mass, MASS_EPS)?;
    tape.div(pooled, mass)
}

/// `(L_cut, L_ortho)` as scalar nodes.
pub fn mincut_on_tape(tape: &mut Tape, s: Var, adjacency: Var) -> Result<(Var, Var)> {
    let (r, k) = tape.value(s).dims2()?;
    let a = tape.value(adjacency);
    if a.shape() != [r, r] {
        return Err(Error::shape("mincut_losses", format!("adjacency {:?} for {r} nodes", a.shape())));
    }
    let degree: Vec<f64> = (0..r).map(|i| a.row(i).iter().sum()).collect();
    if degree.iter().all(|&d| d == 0.0) {
        return Err(Error::Numeric("Tr(SᵀDS) is zero: adjacency has no edges".into()));
    }
    let degree = tape.constant(Tensor::new(vec![r, 1], degree)?);

    let st = tape.transpose(s)?;
    let as_ = tape.matmul(adjacency, s)?;
    let num = tape.matmul(st, as_)?;
    let num = tape.trace(num)?;
    let ds = tape.hadamard(degree, s)?;
    let den = tape.matmul(st, ds)?;
    let den = tape.trace(den)?;
    let ratio = tape.div(num, den)?;
    let cut = tape.scale(ratio, -1.0)?;

    let sts = tape.matmul(st, s)?;
    let norm = tape.frobenius_norm(sts)?;
    let unit = tape.div(sts, norm)?;
    let target = tape.constant(Tensor::eye(k).reshape(&[k, k])?);
    let target = tape.scale(target, 1.0 / (k as f64).sqrt())?;
    let diff = tape.sub(unit, target)?;
    let ortho = tape.frobenius_norm(diff)?;
    Ok((cut, ortho))
}

pub fn soft_assign(features: &Tensor, params: &PoolParams<Tensor>) -> Result<Assignment> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = params.map(&mut |_, t| tape.constant(t.clone()));
    let s = soft_assign_on_tape(&mut tape, f, &p)?;
    Ok(Assignment(tape.value(s).clone()))
}

pub fn pool_features(s: &Assignment, features: &Tensor, normalize: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.0.clone());
    let f = tape.constant(features.clone());
    let y = pool_on_tape(&mut tape, sv, f, normalize)?;
    Ok(tape.value(y).clone())
}

pub fn mincut_losses(s: &Assignment, adjacency: &Tensor) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.0.clone());
    let a = tape.constant(adjacency.clone());
    let (cut, ortho) = mincut_on_tape(&mut tape, sv, a)?;
    Ok((tape.value(cut).data()[0], tape.value(ortho).data()[0]))
}
