//! Top-N accuracy and per-cluster contribution export.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;

/// Zero-based rank of class `target`: classes scoring higher, plus tied
/// classes with a lower index, come first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

pub fn topn_hit(scores: &[f64], target: usize, n: usize) -> bool {
    rank_of(scores, target) < n
}

/// Percent of `(scores, label)` pairs hit at each N, in the order given.
pub fn topn_accuracy(predictions: &[(Vec<f64>, usize)], ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    if predictions.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let classes = predictions[0].0.len();
    if let Some(&n) = ns.iter().find(|&&n| n == 0 || n > classes) {
        return Err(Error::Config(format!("top-{n} requested for {classes} classes")));
    }
    let ranks: Vec<usize> = predictions.iter().map(|(s, t)| rank_of(s, *t)).collect();
    Ok(ns
        .iter()
        .map(|&n| {
            let hits = ranks.iter().filter(|&&r| r < n).count();
            (n, 100.0 * hits as f64 / ranks.len() as f64)
        })
        .collect())
}

pub fn predict_all(model: &Model, params: &ModelParams<Tensor>, data: &Dataset) -> Result<Vec<(Vec<f64>, usize)>> {
    data.images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| Ok((model.predict(params, img)?.into_data(), label)))
        .collect()
}

pub fn evaluate_topn(
    model: &Model,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    topn_accuracy(&predict_all(model, params, data)?, ns)
}

pub const CLUSTER_CSV_NOTE: &str = "# entry(k,c) = mean over samples with label c of |beta[k,c] * gate[k,c]|; \
beta = W1 f_k + b1, gate = sigmoid(W2 f_k + b2) (column 0 when the gate is scalar); \
rows are clusters, columns are classes";

/// `(K, C)` mean contribution magnitudes; classes without samples stay 0.
pub fn cluster_contributions(model: &Model, params: &ModelParams<Tensor>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::Data("cannot export from an empty dataset".into()));
    }
    let k = model.spec().pool.k;
    let c = model.spec().classes;
    let inspections: Vec<_> = data
        .images
        .par_iter()
        .map(|img| model.inspect(params, img))
        .collect::<Result<_>>()?;
    let mut sums = vec![vec![0.0; c]; k];
    let mut counts = vec![0usize; c];
    for (ins, &label) in inspections.iter().zip(&data.labels) {
        counts[label] += 1;
        let gate_cols = ins.gate.shape()[1];
        for (kk, row) in sums.iter_mut().enumerate() {
            let g = ins.gate.at2(kk, if gate_cols == 1 { 0 } else { label });
            row[label] += (ins.beta.at2(kk, label) * g).abs();
        }
    }
    for row in &mut sums {
        for (v, &n) in row.iter_mut().zip(&counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    Ok(sums)
}

pub fn cluster_csv(table: &[Vec<f64>]) -> String {
    let classes = table.first().map_or(0, Vec::len);
    let mut s = format!("{CLUSTER_CSV_NOTE}\ncluster");
    for c in 0..classes {
        let _ = write!(s, ",class{c}");
    }
    s.push('\n');
    for (k, row) in table.iter().enumerate() {
        let _ = write!(s, "{k}");
        for v in row {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    s
}
