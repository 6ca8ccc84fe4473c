mod common;

use common::*;
use hiergraph_core::eval::{rank_of, topn_hit};
use hiergraph_core::gat::{self, GatHead, GatLayerParams, GatSettings, GraphLayerParams, Pass};
use hiergraph_core::hgt1::{self, Dtype};
use hiergraph_core::pool::{self, Assignment, PoolParams};
use hiergraph_core::{enumerate_regions, region_to_feature_coords, RegionShapeRule, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(prop::collection::vec(-scale..scale, cols), rows)
}

fn sized_matrix(max_rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Mat> {
    (1..=max_rows).prop_flat_map(move |r| matrix(r, cols, scale))
}

fn stochastic(max_rows: usize, k: usize) -> impl Strategy<Value = Mat> {
    (1..=max_rows).prop_flat_map(move |r| stochastic_rows(r, k))
}

fn stochastic_rows(r: usize, k: usize) -> impl Strategy<Value = Mat> {
    matrix(r, k, 1.0).prop_map(|m| {
        m.into_iter()
            .map(|r| {
                let e: Vec<f64> = r.iter().map(|v| (3.0 * v).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

fn head(d_in: usize, d: usize) -> impl Strategy<Value = GatHead<Tensor>> {
    (matrix(d, d_in, 2.0), matrix(2, d, 2.0), matrix(1, d, 1.0)).prop_map(|(w, a, b)| GatHead {
        w: tensor(&w),
        a: tensor(&a),
        b: Tensor::vector(b[0].clone()),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(f in sized_matrix(8, 3, 4.0), h in head(3, 2)) {
        let att = gat::attention_coefficients(&tensor(&f), &h, 0.2).unwrap();
        for row in rows(&att.alpha) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_nodes_attend_uniformly(row in prop::collection::vec(-3.0..3.0f64, 3), n in 1usize..7, h in head(3, 2)) {
        let f = vec![row; n];
        let att = gat::attention_coefficients(&tensor(&f), &h, 0.2).unwrap();
        for v in att.alpha.data() {
            prop_assert!((v - 1.0 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn gat_is_equivariant(f in sized_matrix(7, 3, 2.0), h0 in head(3, 2), h1 in head(3, 2), seed in any::<u64>()) {
        use rand::SeedableRng;
        let settings = GatSettings { heads: 2, dim_per_head: 2, ..GatSettings::default() };
        let params = GraphLayerParams::Attention(GatLayerParams { heads: vec![h0, h1], score_w: None });
        let perm = random_perm(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), f.len());
        let pf: Mat = perm.iter().map(|&i| f[i].clone()).collect();
        let y = rows(&gat::gat_layer_forward(&tensor(&f), &params, &settings, Pass::EVAL).unwrap());
        let py = rows(&gat::gat_layer_forward(&tensor(&pf), &params, &settings, Pass::EVAL).unwrap());
        let want: Mat = perm.iter().map(|&i| y[i].clone()).collect();
        prop_assert!(max_abs_diff(&py, &want) <= 1e-12);
    }

    #[test]
    fn assignment_rows_are_distributions(f in sized_matrix(9, 4, 3.0), w in matrix(3, 4, 1.0), b in matrix(1, 3, 1.0)) {
        let p = PoolParams { w: tensor(&w), b: Tensor::vector(b[0].clone()) };
        let s = pool::soft_assign(&tensor(&f), &p).unwrap();
        for row in rows(s.matrix()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pooling_constant_features_returns_them(s in stochastic(8, 3), value in prop::collection::vec(-5.0..5.0f64, 2)) {
        let f = vec![value.clone(); s.len()];
        let y = rows(&pool::pool_features(&Assignment(tensor(&s)), &tensor(&f), true).unwrap());
        for row in y {
            for (a, b) in row.iter().zip(&value) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn mincut_losses_are_bounded((s, first) in (2usize..12).prop_flat_map(|r| (stochastic_rows(r, 4), 1..r))) {
        let r = s.len();
        let sizes = if first >= 2 && r - first >= 2 { vec![first, r - first] } else { vec![r] };
        let (cut, ortho) = pool::mincut_losses(&Assignment(tensor(&s)), &pool::block_adjacency(&sizes)).unwrap();
        prop_assert!((-1.0 - 1e-12..=1e-12).contains(&cut));
        prop_assert!((-1e-12..=2f64.sqrt() + 1e-12).contains(&ortho));
    }

    #[test]
    fn topn_is_monotone_in_n(scores in prop::collection::vec(0.0..1.0f64, 2..8), t in 0usize..8) {
        let t = t % scores.len();
        let r = rank_of(&scores, t);
        prop_assert!(r < scores.len());
        for n in 1..=scores.len() {
            prop_assert_eq!(topn_hit(&scores, t, n), sort_topn_hit(&scores, t, n));
            if n < scores.len() {
                prop_assert!(!topn_hit(&scores, t, n) || topn_hit(&scores, t, n + 1));
            }
        }
        prop_assert!(topn_hit(&scores, t, scores.len()));
    }

    #[test]
    fn regions_lie_inside_the_grid(grid in 2usize..16, w in 1usize..16, h in 1usize..16, sx in 1usize..5, sy in 1usize..5) {
        let (w, h) = (w.min(grid), h.min(grid));
        let rules = [RegionShapeRule::new(1, w, h, sx, sy), RegionShapeRule::new(1, h, w, sy, sx)];
        let set = enumerate_regions(&rules, grid).unwrap();
        let mut seen = std::collections::HashSet::new();
        for b in set.iter() {
            prop_assert!(b.x0 + b.w <= grid && b.y0 + b.h <= grid);
            prop_assert_eq!(b.w * b.h, w * h);
            prop_assert!(seen.insert(*b));
            let rect = region_to_feature_coords(b, grid, 2 * grid, 3 * grid);
            prop_assert!(rect.area() > 0 && rect.row1 <= 2 * grid && rect.col1 <= 3 * grid);
        }
    }

    #[test]
    fn hgt1_round_trips(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1e6..1e6)).collect()).unwrap();
        let bytes = hgt1::encode(&t, Dtype::F64);
        prop_assert_eq!(hgt1::decode(&bytes).unwrap(), t);
    }
}
