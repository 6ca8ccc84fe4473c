//! Strict `key=value` run configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneMode, BackboneSpec};
use crate::error::{Error, Result};
use crate::gat::{Aggregation, GatSettings, LayerType};
use crate::model::{ModelMode, ModelSpec};
use crate::optim::OptimizerKind;
use crate::pool::PoolSettings;
use crate::regions::{default_rules, RegionShapeRule, DEFAULT_GRID_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid_size: usize,
    /// Region rules keyed by 1-based layer.
    pub layer_shapes: BTreeMap<usize, Vec<RegionShapeRule>>,
    pub backbone: BackboneSpec,
    pub gat: GatSettings,
    pub pool: PoolSettings,
    pub scalar_gate: bool,
    pub mode: ModelMode,
    pub layers: usize,
    pub manifest: Option<String>,
    pub test_manifest: Option<String>,
    /// Class count; inferred from the manifests when absent.
    pub classes: Option<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: String,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut layer_shapes: BTreeMap<usize, Vec<RegionShapeRule>> = BTreeMap::new();
        for r in default_rules() {
            layer_shapes.entry(r.layer).or_default().push(r);
        }
        RunConfig {
            grid_size: DEFAULT_GRID_SIZE,
            layer_shapes,
            backbone: BackboneSpec::default(),
            gat: GatSettings::default(),
            pool: PoolSettings::default(),
            scalar_gate: false,
            mode: ModelMode::Full,
            layers: 3,
            manifest: None,
            test_manifest: None,
            classes: None,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            epochs: 60,
            batch: 8,
            seed: 0,
            out_dir: "run".into(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true|false, got `{other}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid_size" => self.grid_size = parse_num(key, value)?,
            "backbone.mode" => self.backbone.mode = BackboneMode::from_str(value)?,
            "backbone.channels" => self.backbone.channels = parse_list(key, value)?,
            "backbone.strides" => self.backbone.strides = parse_list(key, value)?,
            "backbone.upsample" => self.backbone.upsample = parse_num(key, value)?,
            "gat.heads" => self.gat.heads = parse_num(key, value)?,
            "gat.dim_per_head" => self.gat.dim_per_head = parse_num(key, value)?,
            "gat.aggregation" => self.gat.aggregation = Aggregation::from_str(value)?,
            "gat.dropout" => self.gat.dropout = parse_num(key, value)?,
            "gat.layer_type" => self.gat.layer_type = LayerType::from_str(value)?,
            "gat.leaky_slope" => self.gat.leaky_slope = parse_num(key, value)?,
            "gat.shared_score_W" => self.gat.shared_score_w = parse_bool(key, value)?,
            "pool.k" => self.pool.k = parse_num(key, value)?,
            "pool.lambda_cut" => self.pool.lambda_cut = parse_num(key, value)?,
            "pool.lambda_ortho" => self.pool.lambda_ortho = parse_num(key, value)?,
            "pool.normalize" => self.pool.normalize = parse_bool(key, value)?,
            "readout.scalar_gate" => self.scalar_gate = parse_bool(key, value)?,
            "model.mode" => self.mode = ModelMode::from_str(value)?,
            "model.layers" => self.layers = parse_num(key, value)?,
            "data.manifest" => self.manifest = Some(value.to_string()),
            "data.test_manifest" => self.test_manifest = Some(value.to_string()),
            "data.classes" => self.classes = Some(parse_num(key, value)?),
            "train.optimizer" => self.optimizer = OptimizerKind::from_str(value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.batch" => self.batch = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.out_dir" => self.out_dir = value.to_string(),
            _ => {
                let layer = key
                    .strip_prefix("layer")
                    .and_then(|k| k.strip_suffix(".shapes"))
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                let rules = RegionShapeRule::parse_layer(layer, value)?;
                if rules.is_empty() {
                    self.layer_shapes.remove(&layer);
                } else {
                    self.layer_shapes.insert(layer, rules);
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return Err(Error::Config("data.classes must be at least 2".into()));
            }
        }
        if !(self.gat.leaky_slope.is_finite()) {
            return Err(Error::Config("gat.leaky_slope must be finite".into()));
        }
        self.backbone.validate()?;
        self.gat.validate()?;
        self.pool.validate()
    }

    /// Canonical text listing every key; parses back to an equal config.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("grid_size", self.grid_size.to_string());
        for layer in RunConfig::default().layer_shapes.keys() {
            if !self.layer_shapes.contains_key(layer) {
                kv(&format!("layer{layer}.shapes"), String::new());
            }
        }
        for (layer, rules) in &self.layer_shapes {
            let text = rules.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";");
            kv(&format!("layer{layer}.shapes"), text);
        }
        kv("backbone.mode", self.backbone.mode.as_str().into());
        kv("backbone.channels", join(&self.backbone.channels));
        kv("backbone.strides", join(&self.backbone.strides));
        kv("backbone.upsample", self.backbone.upsample.to_string());
        kv("gat.heads", self.gat.heads.to_string());
        kv("gat.dim_per_head", self.gat.dim_per_head.to_string());
        kv("gat.aggregation", self.gat.aggregation.as_str().into());
        kv("gat.dropout", self.gat.dropout.to_string());
        kv("gat.layer_type", self.gat.layer_type.as_str().into());
        kv("gat.leaky_slope", self.gat.leaky_slope.to_string());
        kv("gat.shared_score_W", self.gat.shared_score_w.to_string());
        kv("pool.k", self.pool.k.to_string());
        kv("pool.lambda_cut", self.pool.lambda_cut.to_string());
        kv("pool.lambda_ortho", self.pool.lambda_ortho.to_string());
        kv("pool.normalize", self.pool.normalize.to_string());
        kv("readout.scalar_gate", self.scalar_gate.to_string());
        kv("model.mode", self.mode.as_str().into());
        kv("model.layers", self.layers.to_string());
        if let Some(m) = &self.manifest {
            kv("data.manifest", m.clone());
        }
        if let Some(m) = &self.test_manifest {
            kv("data.test_manifest", m.clone());
        }
        if let Some(c) = self.classes {
            kv("data.classes", c.to_string());
        }
        kv("train.optimizer", self.optimizer.as_str().into());
        kv("train.lr", self.lr.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.out_dir", self.out_dir.clone());
        s
    }

    pub fn rules(&self) -> Vec<RegionShapeRule> {
        self.layer_shapes.values().flatten().copied().collect()
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        ModelSpec {
            mode: self.mode,
            classes,
            backbone: self.backbone.clone(),
            grid_size: self.grid_size,
            rules: self.rules(),
            layers: self.layers,
            gat: self.gat.clone(),
            pool: self.pool.clone(),
            scalar_gate: self.scalar_gate,
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.grid_size, c.layers, c.pool.k, c.batch, c.epochs), (12, 3, 8, 8, 60));
        assert_eq!((c.gat.heads, c.gat.dim_per_head), (3, 32));
        assert_eq!(c.lr, 1e-2);
        assert_eq!(c.gat.dropout, 0.2);
        assert_eq!(c.rules(), default_rules());
    }

    #[test]
    fn parses_comments_and_values() {
        let text = "# run\npool.k = 4  # clusters\ngat.aggregation=average\nlayer1.shapes=2x2@2x2\ngat.shared_score_W=true\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.pool.k, 4);
        assert_eq!(c.gat.aggregation, Aggregation::Average);
        assert_eq!(c.layer_shapes[&1], vec![RegionShapeRule::new(1, 2, 2, 2, 2)]);
        assert!(c.gat.shared_score_w);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for text in ["pool.kk=3", "pool.k=3\npool.k=4", "pool.k", "pool.k=x", "model.layers=0", "layer0.shapes=1x1@1x1", "gat.aggregation=sum"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::parse("data.manifest=a/train.csv\ndata.classes=4\ntrain.lr=0.003\ngat.dropout=0.1\n").unwrap();
        c.set("layer2.shapes", "").unwrap();
        let back = RunConfig::parse(&c.snapshot()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.snapshot(), c.snapshot());
    }
}
