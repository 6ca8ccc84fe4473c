//! Gated readout: per-cluster class logits `β_k = W1 f_k + b1`, gated by
//! `g_k = sigmoid(W2 f_k + b2)` and summed over clusters before the final
//! softmax.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    /// `(C, d)`, or `(1, d)` for a scalar gate per node.
    pub w2: T,
    /// `(C)` or `(1)`.
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams<T> {
    /// `(C, d)`
    pub w1: T,
    /// `(C)`
    pub b1: T,
    /// Absent in baseline mode.
    pub gate: Option<GateParams<T>>,
}

impl<T> ReadoutParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> ReadoutParams<U> {
        ReadoutParams {
            w1: f("readout.w1".into(), &self.w1),
            b1: f("readout.b1".into(), &self.b1),
            gate: self.gate.as_ref().map(|g| GateParams {
                w2: f("readout.w2".into(), &g.w2),
                b2: f("readout.b2".into(), &g.b2),
            }),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("readout.w1".into(), &mut self.w1);
        f("readout.b1".into(), &mut self.b1);
        if let Some(g) = &mut self.gate {
            f("readout.w2".into(), &mut g.w2);
            f("readout.b2".into(), &mut g.b2);
        }
    }
}

impl ReadoutParams<Tensor> {
    pub fn zeros(classes: usize, d: usize, gate: bool, scalar_gate: bool) -> Self {
        let gc = if scalar_gate { 1 } else { classes };
        ReadoutParams {
            w1: Tensor::zeros(&[classes, d]),
            b1: Tensor::zeros(&[classes]),
            gate: gate.then(|| GateParams { w2: Tensor::zeros(&[gc, d]), b2: Tensor::zeros(&[gc]) }),
        }
    }
}

fn affine(tape: &mut Tape, f: Var, w: Var, b: Var, op: &'static str) -> Result<Var> {
    let (fs, ws) = (tape.value(f).shape().to_vec(), tape.value(w).shape().to_vec());
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(Error::shape(op, format!("features {fs:?} vs weights {ws:?}")));
    }
    let wt = tape.transpose(w)?;
    let z = tape.matmul(f, wt)?;
    tape.add(z, b)
}

/// `β` for every node: `(K, d) → (K, C)`.
pub fn confidence_on_tape(tape: &mut Tape, nodes: Var, params: &ReadoutParams<Var>) -> Result<Var> {
    affine(tape, nodes, params.w1, params.b1, "node_confidence")
}

/// Per-node gates `(K, C)` or `(K, 1)`.
pub fn gate_on_tape(tape: &mut Tape, nodes: Var, gate: &GateParams<Var>) -> Result<Var> {
    let z = affine(tape, nodes, gate.w2, gate.b2, "gate")?;
    tape.sigmoid(z)
}

/// Pre-softmax class scores `(1, C)`: `Σ_k β_k ⊙ g_k`.
pub fn gated_logits_on_tape(tape: &mut Tape, nodes: Var, params: &ReadoutParams<Var>) -> Result<Var> {
    let (k, _) = tape.value(nodes).dims2()?;
    if k == 0 {
        return Err(Error::shape("gated_aggregate", "no cluster nodes"));
    }
    let gate = params
        .gate
        .as_ref()
        .ok_or_else(|| Error::Config("gated readout requires gate parameters".into()))?;
    let beta = confidence_on_tape(tape, nodes, params)?;
    let g = gate_on_tape(tape, nodes, gate)?;
    let gated = tape.hadamard(beta, g)?;
    let ones = tape.constant(Tensor::full(&[1, k], 1.0));
    tape.matmul(ones, gated)
}

pub fn node_confidence(f: &Tensor, params: &ReadoutParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = f.numel();
    let fv = tape.constant(f.clone().reshape(&[1, d])?);
    let p = params.map(&mut |_, t| tape.constant(t.clone()));
    let beta = confidence_on_tape(&mut tape, fv, &p)?;
    let c = tape.value(beta).numel();
    tape.value(beta).clone().reshape(&[c])
}

/// Class distribution `y (C)` from cluster features `(K, d)`.
pub fn gated_aggregate(nodes: &Tensor, params: &ReadoutParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(nodes.clone());
    let p = params.map(&mut |_, t| tape.constant(t.clone()));
    let z = gated_logits_on_tape(&mut tape, f, &p)?;
    let y = tape.row_softmax(z)?;
    let c = tape.value(y).numel();
    tape.value(y).clone().reshape(&[c])
}
