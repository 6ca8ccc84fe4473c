//! Straight-line reference implementations used by the integration tests.
//! None of these touch the tape.

#![allow(dead_code)]

use std::collections::BTreeSet;

use hiergraph_core::gat::{Aggregation, GatHead, GatSettings, GraphLayerParams};
use hiergraph_core::readout::ReadoutParams;
use hiergraph_core::{RegionBox, RegionShapeRule, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Every box inside a `grid × grid` board, kept when some rule of its layer
/// has the same extents and the offsets fall on that rule's strides.
pub fn brute_force_regions(rules: &[RegionShapeRule], grid: usize) -> Vec<BTreeSet<RegionBox>> {
    let layers = rules.iter().map(|r| r.layer).max().unwrap_or(0);
    let mut out = vec![BTreeSet::new(); layers];
    for y0 in 0..grid {
        for x0 in 0..grid {
            for h in 1..=grid - y0 {
                for w in 1..=grid - x0 {
                    for r in rules {
                        if r.width == w && r.height == h && x0 % r.stride_x == 0 && y0 % r.stride_y == 0 {
                            out[r.layer - 1].insert(RegionBox { layer: r.layer, x0, y0, w, h });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Random rule set on a random grid: every layer's shapes share one area.
pub fn random_rules(rng: &mut ChaCha8Rng) -> (Vec<RegionShapeRule>, usize) {
    let grid = rng.gen_range(2..=16);
    let layers = rng.gen_range(1..=3);
    let mut rules = Vec::new();
    for layer in 1..=layers {
        let (w, h) = (rng.gen_range(1..=grid), rng.gen_range(1..=grid));
        let area = w * h;
        let mut shapes: Vec<(usize, usize)> = (1..=grid)
            .filter(|d| area % d == 0 && area / d <= grid)
            .map(|d| (d, area / d))
            .collect();
        let keep = rng.gen_range(1..=shapes.len().min(3));
        while shapes.len() > keep {
            let i = rng.gen_range(0..shapes.len());
            shapes.remove(i);
        }
        for (w, h) in shapes {
            rules.push(RegionShapeRule::new(layer, w, h, rng.gen_range(1..=4), rng.gen_range(1..=4)));
        }
    }
    (rules, grid)
}

fn head_oracle(f: &Mat, head: &GatHead<Tensor>, slope: f64) -> (Mat, Mat) {
    let w = rows(&head.w);
    let a = rows(&head.a);
    let b = head.b.data();
    let z: Mat = f.iter().map(|fi| w.iter().map(|wr| dot(wr, fi)).collect()).collect();
    let n = f.len();
    let mut alpha = vec![vec![0.0; n]; n];
    for i in 0..n {
        let e: Vec<f64> = (0..n).map(|j| leaky(dot(&a[0], &z[i]) + dot(&a[1], &z[j]), slope)).collect();
        alpha[i] = softmax(&e);
    }
    let d = w.len();
    let out = (0..n)
        .map(|i| (0..d).map(|c| elu((0..n).map(|j| alpha[i][j] * z[j][c]).sum::<f64>() + b[c])).collect())
        .collect();
    (alpha, out)
}

/// Attention coefficients of one head.
pub fn attention_oracle(f: &Mat, head: &GatHead<Tensor>, slope: f64) -> Mat {
    head_oracle(f, head, slope).0
}

/// Evaluation-mode attention layer without a shared score projection.
pub fn gat_oracle(f: &Mat, params: &GraphLayerParams<Tensor>, settings: &GatSettings) -> Mat {
    let GraphLayerParams::Attention(p) = params else { panic!("attention layer expected") };
    assert!(p.score_w.is_none());
    let outs: Vec<Mat> = p.heads.iter().map(|h| head_oracle(f, h, settings.leaky_slope).1).collect();
    (0..f.len())
        .map(|i| match settings.aggregation {
            Aggregation::Concat => outs.iter().flat_map(|o| o[i].clone()).collect(),
            Aggregation::Average => {
                let d = outs[0][i].len();
                (0..d).map(|c| outs.iter().map(|o| o[i][c]).sum::<f64>() / outs.len() as f64).collect()
            }
        })
        .collect()
}

/// Cluster features `Σ_i S_ik f_i`, divided by the cluster mass when `normalize`.
pub fn pool_oracle(s: &Mat, f: &Mat, normalize: bool, eps: f64) -> Mat {
    let k = s[0].len();
    let d = f[0].len();
    (0..k)
        .map(|c| {
            let mass: f64 = s.iter().map(|r| r[c]).sum();
            (0..d)
                .map(|j| {
                    let v: f64 = s.iter().zip(f).map(|(sr, fr)| sr[c] * fr[j]).sum();
                    if normalize {
                        v / (mass + eps)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

/// `(L_cut, L_ortho)` written out as explicit sums.
pub fn mincut_oracle(s: &Mat, adj: &Mat) -> (f64, f64) {
    let n = s.len();
    let k = s[0].len();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            num += adj[i][j] * dot(&s[i], &s[j]);
        }
    }
    let den: f64 = (0..n).map(|i| adj[i].iter().sum::<f64>() * dot(&s[i], &s[i])).sum();
    let mut sts = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            sts[a][b] = (0..n).map(|i| s[i][a] * s[i][b]).sum();
        }
    }
    let norm = sts.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let target = 1.0 / (k as f64).sqrt();
    let mut ortho = 0.0;
    for a in 0..k {
        for b in 0..k {
            let t = if a == b { target } else { 0.0 };
            ortho += (sts[a][b] / norm - t).powi(2);
        }
    }
    (-num / den, ortho.sqrt())
}

/// Class distribution of the gated readout.
pub fn readout_oracle(nodes: &Mat, p: &ReadoutParams<Tensor>) -> Vec<f64> {
    let w1 = rows(&p.w1);
    let b1 = p.b1.data();
    let gate = p.gate.as_ref().expect("gated readout");
    let w2 = rows(&gate.w2);
    let b2 = gate.b2.data();
    let logits: Vec<f64> = (0..w1.len())
        .map(|c| {
            let g = if w2.len() == 1 { 0 } else { c };
            nodes.iter().map(|f| (dot(&w1[c], f) + b1[c]) * sigmoid(dot(&w2[g], f) + b2[g])).sum()
        })
        .collect();
    softmax(&logits)
}

/// Top-N hit by full sort: stable descending order, ties keep index order.
pub fn sort_topn_hit(scores: &[f64], target: usize, n: usize) -> bool {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx[..n].contains(&target)
}

/// Random row-stochastic matrix.
pub fn random_stochastic(rng: &mut ChaCha8Rng, r: usize, k: usize) -> Mat {
    (0..r)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Uniform permutation of `0..n`.
pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Zero-based rank of the target in each of `topn_fixtures`.
pub const TOPN_PLANTED_RANKS: [usize; 10] = [0, 1, 2, 3, 0, 1, 2, 4, 5, 6];

/// Score vectors with planted ties and orderings.
pub fn topn_fixtures() -> Vec<(Vec<f64>, usize)> {
    vec![
        (vec![0.1, 0.7, 0.2], 1),
        (vec![0.1, 0.7, 0.2], 2),
        (vec![0.1, 0.7, 0.2], 0),
        (vec![0.25, 0.25, 0.25, 0.25], 3),
        (vec![0.25, 0.25, 0.25, 0.25], 0),
        (vec![0.4, 0.1, 0.4, 0.1], 2),
        (vec![0.05, 0.15, 0.3, 0.2, 0.1, 0.2], 5),
        (vec![0.05, 0.15, 0.3, 0.2, 0.1, 0.2], 4),
        (vec![0.9, 0.02, 0.02, 0.02, 0.02, 0.02], 5),
        (vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 6),
    ]
}
