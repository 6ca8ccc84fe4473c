//! Multi-head attention over the complete region graph of one layer.
//!
//! For a head with projection `W`, attention vector `a = [a_src; a_dst]`
//! and bias `b`, node `r` scores every node `r'` of its layer (itself
//! included) as `e = LeakyReLU(a_src·W f_r + a_dst·W f_r')`, normalizes the
//! scores per row with a softmax, and aggregates
//! `ELU(Σ_r' α_{r,r'} W f_r' + b)`. Heads are concatenated (or averaged).
//! Parameters belong to one layer and are shared by all of its nodes.

use std::str::FromStr;

use crate::autograd::{Tape, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Concat,
    Average,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Aggregation::Concat),
            "average" => Ok(Aggregation::Average),
            other => Err(Error::Config(format!("gat.aggregation `{other}`: expected concat|average"))),
        }
    }
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Concat => "concat",
            Aggregation::Average => "average",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerType {
    Attention,
    Gcn,
}

impl FromStr for LayerType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(LayerType::Attention),
            "gcn" => Ok(LayerType::Gcn),
            other => Err(Error::Config(format!("gat.layer_type `{other}`: expected attention|gcn"))),
        }
    }
}

impl LayerType {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::Attention => "attention",
            LayerType::Gcn => "gcn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatSettings {
    pub heads: usize,
    pub dim_per_head: usize,
    pub aggregation: Aggregation,
    /// Dropout rate on the normalized attention coefficients.
    pub dropout: f64,
    pub leaky_slope: f64,
    pub layer_type: LayerType,
    /// Score with one projection shared by all heads instead of each head's
    /// own `W`.
    pub shared_score_w: bool,
}

impl Default for GatSettings {
    fn default() -> Self {
        GatSettings {
            heads: 3,
            dim_per_head: 32,
            aggregation: Aggregation::Concat,
            dropout: 0.2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            layer_type: LayerType::Attention,
            shared_score_w: false,
        }
    }
}

impl GatSettings {
    /// Width of a layer's output node features.
    pub fn output_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Concat => self.heads * self.dim_per_head,
            Aggregation::Average => self.dim_per_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim_per_head == 0 {
            return Err(Error::Config("gat.heads and gat.dim_per_head must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("gat.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Whether stochastic layers are active, and the seed that fixes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub train: bool,
    pub seed: Option<u64>,
}

impl Pass {
    pub const EVAL: Pass = Pass { train: false, seed: None };

    pub fn train(seed: u64) -> Self {
        Pass { train: true, seed: Some(seed) }
    }

    fn dropout_seed(&self, tag: u64) -> Result<u64> {
        match (self.train, self.seed) {
            (false, _) => Ok(0),
            (true, Some(s)) => Ok(derive_seed(s, tag)),
            (true, None) => Err(Error::Config("training pass requires a dropout seed".into())),
        }
    }

    /// A pass for a sub-component, with an independent seed stream.
    pub fn fork(&self, tag: u64) -> Pass {
        Pass {
            train: self.train,
            seed: self.seed.map(|s| derive_seed(s, tag)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatHead<T> {
    /// `(dim_per_head, d_in)`
    pub w: T,
    /// `(2, dim_per_head)`: source half then neighbour half.
    pub a: T,
    /// `(dim_per_head)`
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    pub heads: Vec<GatHead<T>>,
    /// `(dim_per_head, d_in)`, present iff scoring uses a shared projection.
    pub score_w: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphLayerParams<T> {
    Attention(GatLayerParams<T>),
    /// Plain propagation: `w` is `(output_dim, d_in)`.
    Gcn { w: T },
}

impl<T> GraphLayerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T) -> U) -> GraphLayerParams<U> {
        match self {
            GraphLayerParams::Attention(p) => GraphLayerParams::Attention(GatLayerParams {
                heads: p
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(h, head)| GatHead {
                        w: f(format!("{prefix}.h{h}.w"), &head.w),
                        a: f(format!("{prefix}.h{h}.a"), &head.a),
                        b: f(format!("{prefix}.h{h}.b"), &head.b),
                    })
                    .collect(),
                score_w: p.score_w.as_ref().map(|w| f(format!("{prefix}.score_w"), w)),
            }),
            GraphLayerParams::Gcn { w } => GraphLayerParams::Gcn {
                w: f(format!("{prefix}.gcn_w"), w),
            },
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        match self {
            GraphLayerParams::Attention(p) => {
                for (h, head) in p.heads.iter_mut().enumerate() {
                    f(format!("{prefix}.h{h}.w"), &mut head.w);
                    f(format!("{prefix}.h{h}.a"), &mut head.a);
                    f(format!("{prefix}.h{h}.b"), &mut head.b);
                }
                if let Some(w) = &mut p.score_w {
                    f(format!("{prefix}.score_w"), w);
                }
            }
            GraphLayerParams::Gcn { w } => f(format!("{prefix}.gcn_w"), w),
        }
    }
}

impl GraphLayerParams<Tensor> {
    pub fn zeros(settings: &GatSettings, d_in: usize) -> Self {
        let d = settings.dim_per_head;
        match settings.layer_type {
            LayerType::Attention => GraphLayerParams::Attention(GatLayerParams {
                heads: (0..settings.heads)
                    .map(|_| GatHead {
                        w: Tensor::zeros(&[d, d_in]),
                        a: Tensor::zeros(&[2, d]),
                        b: Tensor::zeros(&[d]),
                    })
                    .collect(),
                score_w: settings.shared_score_w.then(|| Tensor::zeros(&[d, d_in])),
            }),
            LayerType::Gcn => GraphLayerParams::Gcn {
                w: Tensor::zeros(&[settings.output_dim(), d_in]),
            },
        }
    }
}

/// Normalized attention coefficients and raw scores of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub alpha: Tensor,
    pub scores: Tensor,
}

/// `f · wᵀ`
fn project(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let (fw, ww) = (tape.value(f).shape().to_vec(), tape.value(w).shape().to_vec());
    if fw.len() != 2 || ww.len() != 2 || fw[1] != ww[1] {
        return Err(Error::shape(
            "gat",
            format!("node features {fw:?} do not match projection {ww:?}"),
        ));
    }
    let wt = tape.transpose(w)?;
    tape.matmul(f, wt)
}

struct HeadOut {
    alpha: Var,
    scores: Var,
    projected: Var,
}

fn head_attention(tape: &mut Tape, f: Var, head: &GatHead<Var>, score_w: Option<Var>, slope: f64) -> Result<HeadOut> {
    let projected = project(tape, f, head.w)?;
    let scored = match score_w {
        Some(sw) => project(tape, f, sw)?,
        None => projected,
    };
    // (R×d)·(d×2): column 0 scores a node as source, column 1 as neighbour.
    let at = tape.transpose(head.a)?;
    let halves = tape.matmul(scored, at)?;
    let halves_t = tape.transpose(halves)?;
    let src = tape.gather_rows(halves_t, vec![0])?;
    let dst = tape.gather_rows(halves_t, vec![1])?;
    let src_col = tape.transpose(src)?;
    let raw = tape.add(src_col, dst)?;
    let scores = tape.leaky_relu(raw, slope)?;
    let alpha = tape.row_softmax(scores)?;
    Ok(HeadOut { alpha, scores, projected })
}

/// Attention coefficients of one head on the tape: `(alpha, scores)`.
pub fn attention_on_tape(
    tape: &mut Tape,
    features: Var,
    head: &GatHead<Var>,
    score_w: Option<Var>,
    slope: f64,
) -> Result<(Var, Var)> {
    let out = head_attention(tape, features, head, score_w, slope)?;
    Ok((out.alpha, out.scores))
}

/// One graph layer on the tape: `(R, d_in) → (R, output_dim)`.
pub fn layer_on_tape(
    tape: &mut Tape,
    features: Var,
    params: &GraphLayerParams<Var>,
    settings: &GatSettings,
    pass: Pass,
) -> Result<Var> {
    match params {
        GraphLayerParams::Gcn { w } => gcn_on_tape(tape, features, *w),
        GraphLayerParams::Attention(p) => {
            let mut outs = Vec::with_capacity(p.heads.len());
            for (h, head) in p.heads.iter().enumerate() {
                let seed = pass.dropout_seed(h as u64)?;
                let HeadOut { alpha, projected, .. } =
                    head_attention(tape, features, head, p.score_w, settings.leaky_slope)?;
                let alpha = tape.dropout(alpha, settings.dropout, seed, pass.train)?;
                let agg = tape.matmul(alpha, projected)?;
                let biased = tape.add(agg, head.b)?;
                outs.push(tape.elu(biased)?);
            }
            match settings.aggregation {
                Aggregation::Concat => tape.concat(&outs, 1),
                Aggregation::Average => {
                    let mut acc = outs[0];
                    for &o in &outs[1..] {
                        acc = tape.add(acc, o)?;
                    }
                    tape.scale(acc, 1.0 / outs.len() as f64)
                }
            }
        }
    }
}

/// Symmetric-normalized propagation on the complete graph with self loops:
/// every normalized edge weight is `1/R`, so all nodes receive
/// `ELU(mean(f) · wᵀ)`.
pub fn gcn_on_tape(tape: &mut Tape, features: Var, w: Var) -> Result<Var> {
    let (rows, d_in) = tape.value(features).dims2()?;
    let mean = tape.mean_over_axis(features, 0)?;
    let mean = tape.reshape(mean, &[1, d_in])?;
    let z = project(tape, mean, w)?;
    let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
    let spread = tape.matmul(ones, z)?;
    tape.elu(spread)
}

fn constants(tape: &mut Tape, head: &GatHead<Tensor>) -> GatHead<Var> {
    GatHead {
        w: tape.constant(head.w.clone()),
        a: tape.constant(head.a.clone()),
        b: tape.constant(head.b.clone()),
    }
}

pub fn attention_coefficients(features: &Tensor, head: &GatHead<Tensor>, slope: f64) -> Result<AttentionMatrix> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let h = constants(&mut tape, head);
    let (alpha, scores) = attention_on_tape(&mut tape, f, &h, None, slope)?;
    Ok(AttentionMatrix {
        alpha: tape.value(alpha).clone(),
        scores: tape.value(scores).clone(),
    })
}

pub fn gat_layer_forward(
    features: &Tensor,
    params: &GraphLayerParams<Tensor>,
    settings: &GatSettings,
    pass: Pass,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.map("gat", &mut |_, t| tape.constant(t.clone()));
    let y = layer_on_tape(&mut tape, f, &vars, settings, pass)?;
    Ok(tape.value(y).clone())
}

pub fn gcn_layer_forward(features: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let w = tape.constant(w.clone());
    let y = gcn_on_tape(&mut tape, f, w)?;
    Ok(tape.value(y).clone())
}
