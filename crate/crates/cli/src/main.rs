use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hiergraph_core::checkpoint::Checkpoint;
use hiergraph_core::checks;
use hiergraph_core::config::RunConfig;
use hiergraph_core::data::{Dataset, Manifest};
use hiergraph_core::eval;
use hiergraph_core::model::Model;
use hiergraph_core::synth::{self, Task};
use hiergraph_core::train::{self, RunData};
use hiergraph_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hiergraph", version, about = "Hierarchical region-graph attention classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and model.hgc into train.out_dir.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set model.mode=baseline`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report top-N accuracy of a checkpoint.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        topn: Vec<usize>,
        /// Manifest to evaluate; defaults to data.test_manifest, then data.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the region hierarchy as CSV.
    Regions {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        task: String,
        /// Samples per class (80% train, 20% test).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-cluster, per-class contribution magnitudes as CSV.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint's test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train once per value of a config key; each run gets its own out dir.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(cfg: &RunConfig) -> Result<()> {
    let data = RunData::load(cfg)?;
    let out = cfg.resolve(&cfg.out_dir);
    let outcome = train::train(cfg, &data, Some(&out))?;
    if let Some(last) = outcome.metrics.last() {
        let test = last.test_acc.map(|a| format!(" test_acc={a:.2}%")).unwrap_or_default();
        println!(
            "epoch {} train_loss={:.4} train_acc={:.2}%{test}",
            last.epoch, last.train_loss, last.train_acc
        );
    }
    println!("wrote {}", out.join(train::METRICS_FILE).display());
    println!("wrote {}", out.join(train::CHECKPOINT_FILE).display());
    Ok(())
}

fn load_dataset(manifest: &Path, classes: usize) -> Result<Dataset> {
    let m = Manifest::load(manifest)?;
    if m.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", manifest.display())));
    }
    Dataset::load(&m, classes)
}

fn restore(path: &Path) -> Result<(RunConfig, Model, hiergraph_core::model::ModelParams<hiergraph_core::Tensor>)> {
    train::restore(&Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => run_training(&load_config(&config, &overrides)?),
        Command::Eval { config, ckpt, topn, manifest } => {
            let cfg = load_config(&config, &[])?;
            let (_, model, params) = restore(&ckpt)?;
            let path = match manifest {
                Some(p) => p,
                None => cfg
                    .test_manifest
                    .as_deref()
                    .or(cfg.manifest.as_deref())
                    .map(|p| cfg.resolve(p))
                    .ok_or_else(|| Error::Config("no manifest to evaluate".into()))?,
            };
            let data = load_dataset(&path, model.spec().classes)?;
            for (n, acc) in eval::evaluate_topn(&model, &params, &data, &topn)? {
                println!("top-{n}: {acc:.2}%");
            }
            Ok(())
        }
        Command::Regions { config } => {
            let cfg = load_config(&config, &[])?;
            let set = hiergraph_core::enumerate_regions(&cfg.rules(), cfg.grid_size)?;
            println!("layer,x0,y0,w,h");
            for b in set.iter() {
                println!("{},{},{},{},{}", b.layer, b.x0, b.y0, b.w, b.h);
            }
            Ok(())
        }
        Command::Synth { task, n, seed, out } => {
            let task: Task = task.parse()?;
            let paths = synth::generate(task, n, seed, &out)?;
            println!("wrote {} and {}", paths.train.display(), paths.test.display());
            Ok(())
        }
        Command::Gradcheck { module, seed } => {
            let results = checks::run(&module, seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<32} max_rel_error={:.3e} checked={} kink_skipped={}",
                    r.name, r.report.max_rel_error, r.report.checked, r.report.kink_skipped
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed} gradient check(s) exceeded {:e}",
                    checks::TOLERANCE
                )));
            }
            Ok(())
        }
        Command::Export { ckpt, out, manifest } => {
            let (cfg, model, params) = restore(&ckpt)?;
            let path = match manifest {
                Some(p) => p,
                None => cfg
                    .test_manifest
                    .as_deref()
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config("checkpoint has no test manifest; pass --manifest".into()))?,
            };
            let data = load_dataset(&path, model.spec().classes)?;
            let table = eval::cluster_contributions(&model, &params, &data)?;
            fs::write(&out, eval::cluster_csv(&table)).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Sweep { config, key, values } => {
            let base = load_config(&config, &[])?;
            if values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            for v in &values {
                let mut cfg = base.clone();
                cfg.set(&key, v)?;
                cfg.out_dir = Path::new(&base.out_dir).join(format!("{key}={v}")).to_string_lossy().into_owned();
                cfg.validate()?;
                println!("{key}={v}");
                run_training(&cfg)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
