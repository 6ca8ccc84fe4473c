use std::fs;
use std::path::Path;

use hiergraph_core::checkpoint::Checkpoint;
use hiergraph_core::checks::{micro_spec, random_tensor};
use hiergraph_core::config::RunConfig;
use hiergraph_core::eval;
use hiergraph_core::hgt1::{self, Dtype};
use hiergraph_core::model::Model;
use hiergraph_core::pool::PoolSettings;
use hiergraph_core::train::{self, RunData, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MICRO_CFG: &str = "\
grid_size=4
layer1.shapes=2x2@2x2
layer2.shapes=4x2@4x2;2x4@2x4
layer3.shapes=
backbone.channels=4
backbone.strides=1
backbone.upsample=2
gat.heads=2
gat.dim_per_head=4
pool.k=2
model.layers=2
data.manifest=train.csv
data.test_manifest=train.csv
train.epochs=3
train.batch=4
train.lr=0.05
train.seed=5
";

/// Writes twelve random 3×8×8 images and a manifest into `dir`.
fn write_micro_data(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut csv = String::from("path,label\n");
    for i in 0..12 {
        let name = format!("img{i}.hgt");
        hgt1::save(dir.join(&name), &random_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0), Dtype::F64).unwrap();
        csv.push_str(&format!("{name},{}\n", i % 3));
    }
    fs::write(dir.join("train.csv"), csv).unwrap();
}

fn run(dir: &Path, out: &str, extra: &[(&str, &str)]) -> (Vec<u8>, Vec<u8>) {
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, MICRO_CFG).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    for (k, v) in extra {
        cfg.set(k, v).unwrap();
    }
    let data = RunData::load(&cfg).unwrap();
    let out = dir.join(out);
    train::train(&cfg, &data, Some(&out)).unwrap();
    (fs::read(out.join(METRICS_FILE)).unwrap(), fs::read(out.join(CHECKPOINT_FILE)).unwrap())
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_data(dir.path());
    let (m1, c1) = run(dir.path(), "a", &[]);
    let (m2, c2) = run(dir.path(), "b", &[]);
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    let text = String::from_utf8(m1).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    let (_, c3) = run(dir.path(), "c", &[("train.seed", "6")]);
    assert_ne!(c1, c3);
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_data(dir.path());
    let (metrics, ckpt) = run(dir.path(), "z", &[("train.epochs", "0")]);
    assert_eq!(String::from_utf8(metrics).unwrap(), format!("{METRICS_HEADER}\n"));
    let ckpt = Checkpoint::from_bytes(&ckpt).unwrap();
    assert_eq!(ckpt.epoch, 0);
    let (cfg, model, _) = train::restore(&ckpt).unwrap();
    let init = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    assert_eq!(ckpt.tensors, init.to_named());
}

#[test]
fn checkpoint_restores_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_data(dir.path());
    let (_, bytes) = run(dir.path(), "r", &[]);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    assert_eq!(ckpt.epoch, 3);
    let (cfg, model, params) = train::restore(&ckpt).unwrap();
    assert_eq!(cfg.classes, Some(3));
    let reloaded = cfg.snapshot();
    assert_eq!(RunConfig::parse(&reloaded).unwrap(), cfg);
    let data = RunData::load(&cfg).unwrap();
    let acc = eval::evaluate_topn(&model, &params, &data.train, &[1, 2, 3]).unwrap();
    assert!(acc[0].1 <= acc[1].1 && acc[1].1 <= acc[2].1);
    assert_eq!(acc[2].1, 100.0);
}

#[test]
fn hgt1_round_trips_byte_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for shape in [vec![1], vec![3, 5], vec![2, 3, 4], vec![1, 1, 1, 7]] {
        let t = random_tensor(&mut rng, &shape, -1e3, 1e3);
        let bytes = hgt1::encode(&t, Dtype::F64);
        let back = hgt1::decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(hgt1::encode(&back, Dtype::F64), bytes);

        let bytes32 = hgt1::encode(&t, Dtype::F32);
        let back32 = hgt1::decode(&bytes32).unwrap();
        assert_eq!(hgt1::encode(&back32, Dtype::F32), bytes32);
        assert!(t.max_abs_diff(&back32) <= 1e-3 * 1e3);
    }
}

#[test]
fn export_of_zero_weight_model_is_flat() {
    let mut spec = micro_spec();
    spec.pool = PoolSettings { k: 1, ..spec.pool };
    let model = Model::new(spec).unwrap();
    let params = model.zero_params();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let data = hiergraph_core::data::Dataset {
        images: (0..6).map(|_| random_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0)).collect(),
        labels: vec![0, 1, 2, 0, 1, 2],
        classes: 3,
    };
    let table = eval::cluster_contributions(&model, &params, &data).unwrap();
    assert_eq!(table.len(), 1);
    assert!(table[0].iter().all(|&v| v == table[0][0]), "{table:?}");
    let csv = eval::cluster_csv(&table);
    assert!(csv.starts_with('#'));
    assert_eq!(csv.lines().nth(1), Some("cluster,class0,class1,class2"));
    assert_eq!(csv.lines().count(), 3);
}
