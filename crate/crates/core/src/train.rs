//! Mini-batch SGD training with per-epoch metrics and a final checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::eval;
use crate::gat::Pass;
use crate::model::{Model, ModelParams};
use crate::optim::{sgd_step, Adam, OptimizerKind};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.hgc";

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent of training samples classified correctly during the epoch.
    pub train_acc: f64,
    /// Top-1 percent on the test split, if one was given.
    pub test_acc: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let test = self.test_acc.map(|a| format!("{a:.4}")).unwrap_or_default();
        format!("{},{:.6},{:.4},{}", self.epoch, self.train_loss, self.train_acc, test)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ModelParams<Tensor>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// Datasets named by a config, with the class count settled.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub classes: usize,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.manifest is required".into()))?;
        let train_m = Manifest::load(cfg.resolve(path))?;
        if train_m.is_empty() {
            return Err(Error::Data("training manifest is empty".into()));
        }
        let test_m = cfg.test_manifest.as_deref().map(|p| Manifest::load(cfg.resolve(p))).transpose()?;
        let inferred = train_m
            .inferred_classes()
            .max(test_m.as_ref().map_or(0, Manifest::inferred_classes));
        let classes = cfg.classes.unwrap_or(inferred.max(2));
        let train = Dataset::load(&train_m, classes)?;
        let test = test_m.map(|m| Dataset::load(&m, classes)).transpose()?;
        Ok(RunData { train, test, classes })
    }
}

/// Copy of `cfg` with data paths made absolute and the class count fixed,
/// so a checkpoint can be evaluated on its own.
pub fn settled_config(cfg: &RunConfig, classes: usize) -> RunConfig {
    let mut c = cfg.clone();
    let abs = |p: &String| {
        let r = cfg.resolve(p);
        fs::canonicalize(&r).unwrap_or(r).to_string_lossy().into_owned()
    };
    c.manifest = cfg.manifest.as_ref().map(abs);
    c.test_manifest = cfg.test_manifest.as_ref().map(abs);
    c.classes = Some(classes);
    c
}

fn check_image_shape(model: &Model, image: &Tensor) -> Result<()> {
    let spec = &model.spec().backbone;
    let &[ch, h, w] = image.shape() else {
        return Err(Error::Data(format!("images must be (ch,h,w), got {:?}", image.shape())));
    };
    let want = match spec.mode {
        crate::backbone::BackboneMode::Tiny => spec.in_channels,
        crate::backbone::BackboneMode::Identity => spec.channels[0],
    };
    if ch != want {
        return Err(Error::Config(format!("images have {ch} channels, backbone expects {want}")));
    }
    let (fh, fw) = spec.output_size(h, w);
    let g = model.spec().grid_size;
    if model.spec().mode == crate::model::ModelMode::Full && (fh < g || fw < g) {
        return Err(Error::Config(format!("feature map {fh}x{fw} is smaller than the {g}x{g} region grid")));
    }
    Ok(())
}

/// Trains from the config's seed. With `out_dir`, writes the metrics CSV
/// after every epoch and the checkpoint at the end.
pub fn train(cfg: &RunConfig, data: &RunData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let settled = settled_config(cfg, data.classes);
    let model = Model::new(settled.model_spec(data.classes))?;
    check_image_shape(&model, &data.train.images[0])?;
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG));
    let mut adam = Adam::default();

    let metrics_path: Option<PathBuf> = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            fs::write(&p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_seed = derive_seed(derive_seed(cfg.seed, DROPOUT_TAG), epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let pass = Pass::train(derive_seed(epoch_seed, i as u64));
                    model.sample_gradients(&params, &data.train.images[i], data.train.labels[i], pass)
                })
                .collect();
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (terms, probs, grads) = r?;
                if let Some(term) = terms.non_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite {term} loss at epoch {epoch}, batch {b}, sample {i} \
                         (cross_entropy={}, mincut={}, orthogonality={})",
                        terms.cross_entropy, terms.cut, terms.ortho
                    )));
                }
                loss_sum += terms.total;
                if eval::rank_of(&probs, data.train.labels[i]) == 0 {
                    correct += 1;
                }
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.expect("non-empty batch").into_iter();
            let mut set_err = None;
            params.visit_mut(&mut |_, t| {
                let mut g = grads.next().expect("one gradient per parameter");
                g.iter_mut().for_each(|v| *v *= scale);
                if let Err(e) = t.set_grad(g) {
                    set_err.get_or_insert(e);
                }
            });
            if let Some(e) = set_err {
                return Err(e);
            }
            let mut named = Vec::new();
            params.visit_mut(&mut |name, t| named.push((name, t)));
            let named = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t));
            match cfg.optimizer {
                OptimizerKind::Sgd => sgd_step(named, cfg.lr)?,
                OptimizerKind::Adam => adam.step(named, cfg.lr)?,
            }
            if let Some((name, _)) = params.named().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {name} became non-finite at epoch {epoch}, batch {b}"
                )));
            }
        }
        let test_acc = match &data.test {
            Some(test) => Some(eval::evaluate_topn(&model, &params, test, &[1])?[0].1),
            None => None,
        };
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: 100.0 * correct as f64 / n as f64,
            test_acc,
        };
        if let Some(p) = &metrics_path {
            let mut f = fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(p, e))?;
        }
        metrics.push(row);
    }

    let checkpoint = Checkpoint {
        tensors: params.to_named(),
        config: settled.snapshot(),
        epoch: cfg.epochs as u64,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { model, params, metrics, checkpoint })
}

/// Rebuilds the model and parameters stored in a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Model, ModelParams<Tensor>)> {
    let cfg = RunConfig::parse(&ckpt.config)?;
    let classes = cfg
        .classes
        .ok_or_else(|| Error::Format("checkpoint config lacks data.classes".into()))?;
    let spec = cfg.model_spec(classes);
    let model = Model::new(spec.clone())?;
    let params = ModelParams::from_named(&spec, &ckpt.tensors)?;
    Ok((cfg, model, params))
}
