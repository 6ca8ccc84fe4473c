//! End-to-end model: backbone, region hierarchy, per-layer graph attention,
//! soft cluster pooling and gated readout (or the global-average baseline).

use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::backbone::{self, BackboneParams, BackboneSpec};
use crate::error::{Error, Result};
use crate::gat::{self, GatSettings, GraphLayerParams, Pass};
use crate::pool::{self, PoolParams, PoolSettings};
use crate::readout::{self, ReadoutParams};
use crate::regions::{enumerate_regions, RegionLayerSet, RegionShapeRule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Full,
    Baseline,
}

impl FromStr for ModelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelMode::Full),
            "baseline" => Ok(ModelMode::Baseline),
            other => Err(Error::Config(format!("model.mode `{other}`: expected full|baseline"))),
        }
    }
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Full => "full",
            ModelMode::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub mode: ModelMode,
    pub classes: usize,
    pub backbone: BackboneSpec,
    pub grid_size: usize,
    pub rules: Vec<RegionShapeRule>,
    /// Number of hierarchy layers used, counted from the bottom.
    pub layers: usize,
    pub gat: GatSettings,
    pub pool: PoolSettings,
    pub scalar_gate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    pub layers: Vec<GraphLayerParams<T>>,
    pub pool: Option<PoolParams<T>>,
    pub readout: ReadoutParams<T>,
}

impl<T> ModelParams<T> {
    /// Applies `f` to every tensor in the fixed parameter order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.map(f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, p)| p.map(&format!("layer{l}"), f))
                .collect(),
            pool: self.pool.as_ref().map(|p| p.map(f)),
            readout: self.readout.map(f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        self.backbone.visit_mut(f);
        for (l, p) in self.layers.iter_mut().enumerate() {
            p.visit_mut(&format!("layer{l}"), f);
        }
        if let Some(p) = &mut self.pool {
            p.visit_mut(f);
        }
        self.readout.visit_mut(f);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name, t)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn to_named(&self) -> IndexMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Fills parameters shaped for `spec` from a name → tensor map.
    pub fn from_named(spec: &ModelSpec, tensors: &IndexMap<String, Tensor>) -> Result<Self> {
        let mut params = Model::new(spec.clone())?.zero_params();
        let mut err = None;
        params.visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            match tensors.get(&name) {
                None => err = Some(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
                Some(t) if t.shape() != slot.shape() => {
                    err = Some(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Some(t) => *slot = t.clone(),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(params)
    }
}

/// Values recorded by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(1, C)` pre-softmax class scores.
    pub logits: Var,
    /// Soft assignment `(R, K)`; full mode only.
    pub assignment: Option<Var>,
    /// Cluster features `(K, D)`; full mode only.
    pub clusters: Option<Var>,
    pub cut: Option<Var>,
    pub ortho: Option<Var>,
}

/// Scalar loss components of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub cut: f64,
    pub ortho: f64,
    pub total: f64,
}

impl LossTerms {
    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("cross_entropy", self.cross_entropy),
            ("mincut", self.cut),
            ("orthogonality", self.ortho),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-sample readout internals used by cluster export.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub probs: Tensor,
    /// `(K, C)`
    pub beta: Tensor,
    /// `(K, C)` or `(K, 1)`
    pub gate: Tensor,
    pub assignment: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    regions: RegionLayerSet,
    adjacency: Tensor,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.backbone.validate()?;
        if spec.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
        }
        if spec.layers == 0 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        spec.gat.validate()?;
        spec.pool.validate()?;
        let regions = enumerate_regions(&spec.rules, spec.grid_size)?;
        if regions.num_layers() < spec.layers {
            return Err(Error::Config(format!(
                "model.layers = {} but only {} region layers are configured",
                spec.layers,
                regions.num_layers()
            )));
        }
        let regions = regions.truncated(spec.layers)?;
        let adjacency = pool::block_adjacency(&regions.layer_sizes());
        Ok(Model { spec, regions, adjacency })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn regions(&self) -> &RegionLayerSet {
        &self.regions
    }

    /// Width of every graph-layer output and cluster feature.
    pub fn node_dim(&self) -> usize {
        self.spec.gat.output_dim()
    }

    pub fn zero_params(&self) -> ModelParams<Tensor> {
        let s = &self.spec;
        let c = s.backbone.out_channels();
        let backbone = BackboneParams::zeros(&s.backbone);
        match s.mode {
            ModelMode::Baseline => ModelParams {
                backbone,
                layers: Vec::new(),
                pool: None,
                readout: ReadoutParams::zeros(s.classes, c, false, false),
            },
            ModelMode::Full => {
                let d = self.node_dim();
                ModelParams {
                    backbone,
                    layers: (0..s.layers).map(|_| GraphLayerParams::zeros(&s.gat, c)).collect(),
                    pool: Some(PoolParams::zeros(s.pool.k, d)),
                    readout: ReadoutParams::zeros(s.classes, d, true, s.scalar_gate),
                }
            }
        }
    }

    /// Draws every tensor from `uniform(-1/√fan_in, 1/√fan_in)` in parameter
    /// order. A bias uses the fan-in of the weight it follows.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ModelParams<Tensor> {
        let mut params = self.zero_params();
        let mut fan_in = 1usize;
        params.visit_mut(&mut |name, t| {
            let shape = t.shape();
            if name.ends_with(".a") {
                fan_in = t.numel();
            } else if shape.len() >= 2 {
                fan_in = shape[1..].iter().product();
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
        params
    }

    /// Records the forward pass of one `(ch, h, w)` image.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &ModelParams<Var>,
        pass: Pass,
    ) -> Result<ForwardVars> {
        self.forward_with_regions(tape, image, params, pass, &self.regions)
    }

    /// As [`forward_on_tape`](Self::forward_on_tape) with an explicit
    /// enumeration of the same regions (used for order-invariance checks).
    pub fn forward_with_regions(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &ModelParams<Var>,
        pass: Pass,
        regions: &RegionLayerSet,
    ) -> Result<ForwardVars> {
        let fmap = backbone::encode_on_tape(tape, image, &params.backbone, &self.spec.backbone)?;
        if self.spec.mode == ModelMode::Baseline {
            let (c, h, w) = match *tape.value(fmap).shape() {
                [c, h, w] => (c, h, w),
                ref s => return Err(Error::shape("baseline", format!("feature map {s:?}"))),
            };
            let flat = tape.reshape(fmap, &[c, h * w])?;
            let gap = tape.mean_over_axis(flat, 1)?;
            let gap = tape.reshape(gap, &[1, c])?;
            let logits = readout::confidence_on_tape(tape, gap, &params.readout)?;
            return Ok(ForwardVars { logits, assignment: None, clusters: None, cut: None, ortho: None });
        }
        if regions.layer_sizes() != self.regions.layer_sizes() {
            return Err(Error::shape("forward", "region set does not match the model hierarchy"));
        }
        let mut nodes = Vec::with_capacity(params.layers.len());
        for (l, layer) in params.layers.iter().enumerate() {
            let feats = backbone::pool_regions_on_tape(tape, fmap, regions.layer(l), self.spec.grid_size)?;
            nodes.push(gat::layer_on_tape(tape, feats, layer, &self.spec.gat, pass.fork(l as u64))?);
        }
        let all = if nodes.len() == 1 { nodes[0] } else { tape.concat(&nodes, 0)? };
        let pool_params = params
            .pool
            .as_ref()
            .ok_or_else(|| Error::Config("full mode requires pooling parameters".into()))?;
        let s = pool::soft_assign_on_tape(tape, all, pool_params)?;
        let clusters = pool::pool_on_tape(tape, s, all, self.spec.pool.normalize)?;
        let logits = readout::gated_logits_on_tape(tape, clusters, &params.readout)?;
        let adjacency = tape.constant(self.adjacency.clone());
        let (cut, ortho) = pool::mincut_on_tape(tape, s, adjacency)?;
        Ok(ForwardVars {
            logits,
            assignment: Some(s),
            clusters: Some(clusters),
            cut: Some(cut),
            ortho: Some(ortho),
        })
    }

    /// Total training loss of one labelled sample as a scalar node.
    pub fn loss_on_tape(&self, tape: &mut Tape, out: &ForwardVars, label: usize) -> Result<(Var, LossTerms)> {
        let ce = tape.cross_entropy(out.logits, label)?;
        let mut total = ce;
        let mut terms = LossTerms {
            cross_entropy: tape.value(ce).data()[0],
            cut: 0.0,
            ortho: 0.0,
            total: 0.0,
        };
        if let (Some(cut), Some(ortho)) = (out.cut, out.ortho) {
            terms.cut = tape.value(cut).data()[0];
            terms.ortho = tape.value(ortho).data()[0];
            if self.spec.pool.lambda_cut != 0.0 {
                let c = tape.scale(cut, self.spec.pool.lambda_cut)?;
                total = tape.add(total, c)?;
            }
            if self.spec.pool.lambda_ortho != 0.0 {
                let o = tape.scale(ortho, self.spec.pool.lambda_ortho)?;
                total = tape.add(total, o)?;
            }
        }
        terms.total = tape.value(total).data()[0];
        Ok((total, terms))
    }

    /// Loss and per-parameter gradients (in parameter order) of one sample.
    pub fn sample_gradients(
        &self,
        params: &ModelParams<Tensor>,
        image: &Tensor,
        label: usize,
        pass: Pass,
    ) -> Result<(LossTerms, Vec<f64>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = params.map(&mut |_, t| tape.param(t));
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, x, &vars, pass)?;
        let (loss, terms) = self.loss_on_tape(&mut tape, &out, label)?;
        let probs = softmax(tape.value(out.logits).data());
        if terms.non_finite().is_some() {
            return Ok((terms, probs, Vec::new()));
        }
        let mut grads: Gradients = tape.backward(loss)?;
        let order = vars.named();
        let mut flat = Vec::with_capacity(order.len());
        for (name, v) in order {
            let g = grads.take(*v).ok_or(Error::MissingGradient(name))?;
            flat.push(g);
        }
        Ok((terms, probs, flat))
    }

    /// Class probabilities `(C)` in evaluation mode.
    pub fn predict(&self, params: &ModelParams<Tensor>, image: &Tensor) -> Result<Tensor> {
        self.predict_with_regions(params, image, &self.regions)
    }

    pub fn predict_with_regions(
        &self,
        params: &ModelParams<Tensor>,
        image: &Tensor,
        regions: &RegionLayerSet,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.map(&mut |_, t| tape.constant(t.clone()));
        let x = tape.constant(image.clone());
        let out = self.forward_with_regions(&mut tape, x, &vars, Pass::EVAL, regions)?;
        Ok(Tensor::vector(softmax(tape.value(out.logits).data())))
    }

    /// Readout internals of one image (full mode only).
    pub fn inspect(&self, params: &ModelParams<Tensor>, image: &Tensor) -> Result<Inspection> {
        if self.spec.mode != ModelMode::Full {
            return Err(Error::Config("cluster inspection requires model.mode=full".into()));
        }
        let mut tape = Tape::new();
        let vars = params.map(&mut |_, t| tape.constant(t.clone()));
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, x, &vars, Pass::EVAL)?;
        let clusters = out.clusters.expect("full mode");
        let beta = readout::confidence_on_tape(&mut tape, clusters, &vars.readout)?;
        let gate = readout::gate_on_tape(&mut tape, clusters, vars.readout.gate.as_ref().expect("full mode"))?;
        Ok(Inspection {
            probs: Tensor::vector(softmax(tape.value(out.logits).data())),
            beta: tape.value(beta).clone(),
            gate: tape.value(gate).clone(),
            assignment: tape.value(out.assignment.expect("full mode")).clone(),
        })
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
