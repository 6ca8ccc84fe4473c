//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criterion 6 trains two desk-scale models and takes a few minutes.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use hiergraph_core::checkpoint::Checkpoint;
use hiergraph_core::checks::{self, micro_spec, random_tensor};
use hiergraph_core::config::RunConfig;
use hiergraph_core::eval::{evaluate_topn, rank_of, topn_accuracy, topn_hit};
use hiergraph_core::gat::{self, Aggregation, GatHead, GatLayerParams, GatSettings, GraphLayerParams, Pass};
use hiergraph_core::hgt1::{self, Dtype};
use hiergraph_core::model::{Model, ModelMode};
use hiergraph_core::optim::OptimizerKind;
use hiergraph_core::pool::{self, Assignment, PoolParams, MASS_EPS};
use hiergraph_core::readout::{self, GateParams, ReadoutParams};
use hiergraph_core::regions::{default_rules, DEFAULT_GRID_SIZE};
use hiergraph_core::synth::{self, Task};
use hiergraph_core::train::{self, RunData, CHECKPOINT_FILE, METRICS_FILE};
use hiergraph_core::{enumerate_regions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_head(rng: &mut ChaCha8Rng, d_in: usize, d: usize, scale: f64) -> GatHead<Tensor> {
    GatHead {
        w: tensor(&random_mat(rng, d, d_in, scale)),
        a: tensor(&random_mat(rng, 2, d, scale)),
        b: Tensor::vector(random_mat(rng, 1, d, 1.0).remove(0)),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = checks::run("all", 1).map_err(fail)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        return Err(format!("{} has max rel error {:e}", bad.name, bad.report.max_rel_error));
    }
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} checks, max rel error {worst:.2e}, {secs:.1} s", results.len()))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, d_in, d, k) = (rng.gen_range(1..=10), rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(2..=5));
        let f = tensor(&random_mat(&mut rng, r, d_in, 3.0));
        let att = gat::attention_coefficients(&f, &random_head(&mut rng, d_in, d, 2.0), 0.2).map_err(fail)?;
        let p = PoolParams {
            w: tensor(&random_mat(&mut rng, k, d_in, 1.0)),
            b: Tensor::vector(random_mat(&mut rng, 1, k, 1.0).remove(0)),
        };
        let s = pool::soft_assign(&f, &p).map_err(fail)?;
        for row in rows(&att.alpha).iter().chain(rows(s.matrix()).iter()) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("row sum off by {worst:e}"))?;
    let model = Model::new(micro_spec()).map_err(fail)?;
    let mut y_worst: f64 = 0.0;
    for _ in 0..100 {
        let params = model.init_params(&mut rng);
        let y = model.predict(&params, &random_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0)).map_err(fail)?;
        y_worst = y_worst.max((y.data().iter().sum::<f64>() - 1.0).abs());
    }
    ensure(y_worst <= 1e-12, || format!("class distribution sums off by {y_worst:e}"))?;
    Ok(format!("rows within {worst:.1e}, y within {y_worst:.1e}"))
}

fn permutations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let aggregation = if trial % 2 == 0 { Aggregation::Concat } else { Aggregation::Average };
        let settings = GatSettings { heads: 2, dim_per_head: 3, aggregation, ..GatSettings::default() };
        let (r, d_in) = (rng.gen_range(2..=9), 4);
        let params = GraphLayerParams::Attention(GatLayerParams {
            heads: (0..2).map(|_| random_head(&mut rng, d_in, 3, 1.0)).collect(),
            score_w: None,
        });
        let f = random_mat(&mut rng, r, d_in, 2.0);
        let perm = random_perm(&mut rng, r);
        let pf: Mat = perm.iter().map(|&i| f[i].clone()).collect();
        let y = rows(&gat::gat_layer_forward(&tensor(&f), &params, &settings, Pass::EVAL).map_err(fail)?);
        let py = rows(&gat::gat_layer_forward(&tensor(&pf), &params, &settings, Pass::EVAL).map_err(fail)?);
        let want: Mat = perm.iter().map(|&i| y[i].clone()).collect();
        worst = worst.max(max_abs_diff(&py, &want));
    }
    let model = Model::new(micro_spec()).map_err(fail)?;
    let params = model.init_params(&mut rng);
    let image = random_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let y = model.predict(&params, &image).map_err(fail)?;
    let mut region_worst: f64 = 0.0;
    for _ in 0..20 {
        let perms: Vec<Vec<usize>> = model.regions().layer_sizes().iter().map(|&n| random_perm(&mut rng, n)).collect();
        let regions = model.regions().permuted(&perms).map_err(fail)?;
        let py = model.predict_with_regions(&params, &image, &regions).map_err(fail)?;
        region_worst = region_worst.max(y.max_abs_diff(&py));
    }
    ensure(worst <= 1e-9, || format!("attention layer deviates by {worst:e}"))?;
    ensure(region_worst <= 1e-9, || format!("region order changes y by {region_worst:e}"))?;
    Ok(format!("layer {worst:.1e}, end to end {region_worst:.1e}"))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..50 {
        let (rules, grid) = random_rules(&mut rng);
        let set = enumerate_regions(&rules, grid).map_err(fail)?;
        for (l, want) in brute_force_regions(&rules, grid).iter().enumerate() {
            let mut got = set.layer(l).to_vec();
            got.sort();
            ensure(got.iter().eq(want.iter()), || format!("layer {} differs for {rules:?} on grid {grid}", l + 1))?;
        }
    }
    let counts = enumerate_regions(&default_rules(), DEFAULT_GRID_SIZE).map_err(fail)?.layer_sizes();
    ensure(counts == [32, 21, 5], || format!("default layer counts {counts:?}"))?;

    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let (r, d_in, d, heads) = (rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let aggregation = if case % 2 == 0 { Aggregation::Concat } else { Aggregation::Average };
        let settings = GatSettings { heads, dim_per_head: d, aggregation, ..GatSettings::default() };
        let params = GraphLayerParams::Attention(GatLayerParams {
            heads: (0..heads).map(|_| random_head(&mut rng, d_in, d, 1.0)).collect(),
            score_w: None,
        });
        let f = random_mat(&mut rng, r, d_in, 2.0);
        let got = gat::gat_layer_forward(&tensor(&f), &params, &settings, Pass::EVAL).map_err(fail)?;
        worst = worst.max(max_abs_diff(&rows(&got), &gat_oracle(&f, &params, &settings)));

        let (r, k, d) = (rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=5));
        let s = random_stochastic(&mut rng, r, k);
        let f = random_mat(&mut rng, r, d, 3.0);
        let got = pool::pool_features(&Assignment(tensor(&s)), &tensor(&f), true).map_err(fail)?;
        worst = worst.max(max_abs_diff(&rows(&got), &pool_oracle(&s, &f, true, MASS_EPS)));

        let sizes: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=4)).collect();
        let k = rng.gen_range(1..=4);
        let s = random_stochastic(&mut rng, sizes.iter().sum(), k);
        let adj = pool::block_adjacency(&sizes);
        let (cut, ortho) = pool::mincut_losses(&Assignment(tensor(&s)), &adj).map_err(fail)?;
        let (want_cut, want_ortho) = mincut_oracle(&s, &rows(&adj));
        worst = worst.max((cut - want_cut).abs()).max((ortho - want_ortho).abs());

        let (k, d, c) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(2..=5));
        let p = ReadoutParams {
            w1: tensor(&random_mat(&mut rng, c, d, 1.0)),
            b1: Tensor::vector(random_mat(&mut rng, 1, c, 1.0).remove(0)),
            gate: Some(GateParams {
                w2: tensor(&random_mat(&mut rng, c, d, 1.0)),
                b2: Tensor::vector(random_mat(&mut rng, 1, c, 1.0).remove(0)),
            }),
        };
        let nodes = random_mat(&mut rng, k, d, 2.0);
        let got = readout::gated_aggregate(&tensor(&nodes), &p).map_err(fail)?;
        let err = got.data().iter().zip(readout_oracle(&nodes, &p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    ensure(worst <= 1e-10, || format!("component oracle deviation {worst:e}"))?;
    Ok(format!("50 region configs exact, counts {counts:?}, components within {worst:.1e}"))
}

fn loss_ranges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut cut_lo, mut cut_hi, mut ortho_lo, mut ortho_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for _ in 0..1000 {
        let sizes: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=6)).collect();
        let k = rng.gen_range(1..=6);
        let s = random_stochastic(&mut rng, sizes.iter().sum(), k);
        let (cut, ortho) = pool::mincut_losses(&Assignment(tensor(&s)), &pool::block_adjacency(&sizes)).map_err(fail)?;
        (cut_lo, cut_hi) = (cut_lo.min(cut), cut_hi.max(cut));
        (ortho_lo, ortho_hi) = (ortho_lo.min(ortho), ortho_hi.max(ortho));
    }
    let tol = 1e-12;
    ensure(cut_lo >= -1.0 - tol && cut_hi <= tol, || format!("L_cut spans [{cut_lo}, {cut_hi}]"))?;
    ensure(ortho_lo >= -tol && ortho_hi <= 2f64.sqrt() + tol, || format!("L_ortho spans [{ortho_lo}, {ortho_hi}]"))?;
    let sizes = [32, 21, 5];
    let mut s = Vec::new();
    for (l, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let mut row = vec![0.0; sizes.len()];
            row[l] = 1.0;
            s.push(row);
        }
    }
    let (cut, _) = pool::mincut_losses(&Assignment(tensor(&s)), &pool::block_adjacency(&sizes)).map_err(fail)?;
    ensure((cut + 1.0).abs() <= tol, || format!("hard partition gives L_cut {cut}"))?;
    Ok(format!("L_cut in [{cut_lo:.3}, {cut_hi:.3}], L_ortho in [{ortho_lo:.3}, {ortho_hi:.3}], hard partition {cut}"))
}

struct DeskRun {
    final_test: f64,
    secs: f64,
}

fn desk_run(data: &RunData, base: &RunConfig, mode: ModelMode) -> Result<DeskRun, String> {
    let mut cfg = base.clone();
    cfg.mode = mode;
    let start = Instant::now();
    let outcome = train::train(&cfg, data, None).map_err(fail)?;
    let last = outcome.metrics.last().ok_or("no epochs ran")?;
    Ok(DeskRun { final_test: last.test_acc.ok_or("no test split")?, secs: start.elapsed().as_secs_f64() })
}

fn desk_scale(dir: &Path) -> Outcome {
    let out = synth::generate(Task::Relational, 250, 7, dir.join("relational")).map_err(fail)?;
    let cfg = RunConfig {
        manifest: Some(out.train.to_string_lossy().into_owned()),
        test_manifest: Some(out.test.to_string_lossy().into_owned()),
        seed: 7,
        epochs: 60,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        base_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let data = RunData::load(&cfg).map_err(fail)?;
    ensure(data.train.len() == 800 && data.test.as_ref().map_or(0, |t| t.len()) == 200, || "split is not 200/50 per class".into())?;
    let full = desk_run(&data, &cfg, ModelMode::Full)?;
    let base = desk_run(&data, &cfg, ModelMode::Baseline)?;
    let summary = format!(
        "full {:.1}% in {:.0} s, baseline {:.1}% in {:.0} s, margin {:.1} pp",
        full.final_test,
        full.secs,
        base.final_test,
        base.secs,
        full.final_test - base.final_test
    );
    ensure(full.final_test >= 95.0, || summary.clone())?;
    ensure(full.final_test - base.final_test >= 10.0, || summary.clone())?;
    ensure(full.secs < 900.0 && base.secs < 900.0, || summary.clone())?;
    Ok(summary)
}

fn hiergraph(args: &[&str], dir: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_hiergraph")).args(args).current_dir(dir).output().map_err(fail)?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("`hiergraph {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn layer_sweep(dir: &Path) -> Outcome {
    hiergraph(&["synth", "--task", "relational", "--n", "5", "--seed", "3", "--out", "data"], dir)?;
    fs::write(
        dir.join("sweep.cfg"),
        "data.manifest=data/train.csv\ndata.test_manifest=data/test.csv\ntrain.epochs=1\ntrain.out_dir=sweep\n",
    )
    .map_err(fail)?;
    hiergraph(&["sweep", "-c", "sweep.cfg", "--key", "model.layers", "--values", "1,2,3"], dir)?;
    for l in 1..=3 {
        let path = dir.join(format!("sweep/model.layers={l}/{METRICS_FILE}"));
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(text.lines().count() == 2, || format!("{} has {} lines", path.display(), text.lines().count()))?;
    }
    Ok("three runs, one metrics CSV each".into())
}

fn top_n(dir: &Path) -> Outcome {
    let fixtures = topn_fixtures();
    for ((scores, target), want) in fixtures.iter().zip(TOPN_PLANTED_RANKS) {
        ensure(rank_of(scores, *target) == want, || format!("rank of {target} in {scores:?}"))?;
        for n in 1..=scores.len() {
            ensure(topn_hit(scores, *target, n) == sort_topn_hit(scores, *target, n), || {
                format!("top-{n} of {target} in {scores:?}")
            })?;
        }
    }
    let wide: Vec<_> = fixtures.iter().filter(|(s, _)| s.len() >= 5).cloned().collect();
    let six: Vec<_> = wide.iter().filter(|(s, _)| s.len() == 6).cloned().collect();
    let acc = topn_accuracy(&six, &[1, 2, 5]).map_err(fail)?;
    ensure(acc[0].1 <= acc[1].1 && acc[1].1 <= acc[2].1, || format!("fixture accuracies {acc:?}"))?;

    hiergraph(&["synth", "--task", "local", "--n", "5", "--seed", "8", "--out", "local"], dir)?;
    let cfg = RunConfig {
        manifest: Some("local/train.csv".into()),
        test_manifest: Some("local/test.csv".into()),
        epochs: 2,
        base_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let data = RunData::load(&cfg).map_err(fail)?;
    let outcome = train::train(&cfg, &data, None).map_err(fail)?;
    for split in [Some(&data.train), data.test.as_ref()].into_iter().flatten() {
        let acc = evaluate_topn(&outcome.model, &outcome.params, split, &[1, 2, 3, 4]).map_err(fail)?;
        ensure(acc.windows(2).all(|w| w[0].1 <= w[1].1), || format!("evaluation {acc:?}"))?;
        ensure(acc[3].1 == 100.0, || format!("top-4 of 4 classes is {}", acc[3].1))?;
    }
    Ok(format!("{} fixtures match the sort oracle, top-1 <= top-2 <= top-5 {acc:?}", fixtures.len()))
}

fn determinism(dir: &Path) -> Outcome {
    hiergraph(&["synth", "--task", "relational", "--n", "5", "--seed", "9", "--out", "det"], dir)?;
    let run = |seed: u64, out: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let cfg = RunConfig {
            manifest: Some("det/train.csv".into()),
            test_manifest: Some("det/test.csv".into()),
            epochs: 2,
            seed,
            base_dir: dir.to_path_buf(),
            ..RunConfig::default()
        };
        let data = RunData::load(&cfg).map_err(fail)?;
        let out = dir.join(out);
        train::train(&cfg, &data, Some(&out)).map_err(fail)?;
        Ok((fs::read(out.join(METRICS_FILE)).map_err(fail)?, fs::read(out.join(CHECKPOINT_FILE)).map_err(fail)?))
    };
    let (m1, c1) = run(4, "a")?;
    let (m2, c2) = run(4, "b")?;
    ensure(m1 == m2, || "metrics differ between identical runs".into())?;
    ensure(c1 == c2, || "checkpoints differ between identical runs".into())?;
    let (_, c3) = run(5, "c")?;
    ensure(c1 != c3, || "a different seed gave the same checkpoint".into())?;

    let ckpt = Checkpoint::from_bytes(&c1).map_err(fail)?;
    ensure(ckpt.to_bytes().map_err(fail)? == c1, || "HGC1 re-encoding differs".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for shape in [vec![1], vec![3, 5], vec![2, 3, 4], vec![3, 64, 64]] {
        let t = random_tensor(&mut rng, &shape, -1e3, 1e3);
        for dtype in [Dtype::F64, Dtype::F32] {
            let bytes = hgt1::encode(&t, dtype);
            let back = hgt1::decode(&bytes).map_err(fail)?;
            ensure(hgt1::encode(&back, dtype) == bytes, || format!("HGT1 {dtype:?} {shape:?} re-encoding differs"))?;
            if dtype == Dtype::F64 {
                ensure(back == t, || format!("HGT1 f64 {shape:?} changed values"))?;
            }
        }
    }
    Ok(format!("bit-identical reruns, HGC1 of {} bytes and HGT1 round trips exact", c1.len()))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("normalization invariants", Box::new(normalization)),
        ("permutation suite", Box::new(permutations)),
        ("oracle equivalence", Box::new(oracles)),
        ("loss ranges", Box::new(loss_ranges)),
        ("desk-scale relational", Box::new(|| desk_scale(d))),
        ("layer sweep", Box::new(|| layer_sweep(d))),
        ("top-N", Box::new(|| top_n(d))),
        ("determinism and serialization", Box::new(|| determinism(d))),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
