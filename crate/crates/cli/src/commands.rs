use anyhow::Context;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use imn_core::channel::{received_sequence, ComplexSequence, NoiseSpec};
use imn_core::dataset::{self, DatasetManifest};
use imn_core::evalbench::{self, Prediction};
use imn_core::model::{Checkpoint, CheckpointMeta, ModelConfig, Task};
use imn_core::training::{fit, init_model, stl_lambdas, EpochMetrics, SplitTag, TrainConfig};
use num_complex::Complex64;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Mtl,
    Stl(Task),
}

impl TrainMode {
    pub fn parse(s: &str) -> anyhow::Result<TrainMode> {
        match s {
            "mtl" => Ok(TrainMode::Mtl),
            "stl-p" => Ok(TrainMode::Stl(Task::P)),
            "stl-r" => Ok(TrainMode::Stl(Task::R)),
            "stl-gamma" => Ok(TrainMode::Stl(Task::Gamma)),
            other => Err(ConfigError(format!(
                "unknown mode '{other}' (expected mtl, stl-p, stl-r or stl-gamma)"
            ))
            .into()),
        }
    }

    pub fn label(self) -> String {
        match self {
            TrainMode::Mtl => "mtl".into(),
            TrainMode::Stl(t) => format!("stl-{t}"),
        }
    }
}

pub fn default_dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("dataset.imn")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "{:<5} nmse_p {:>8}  nmse_r {:>8}  acc_gamma {:>8}  loss_gamma {:>8}  joint {:.4}",
        m.split.to_string(),
        fmt_opt(m.nmse_p),
        fmt_opt(m.nmse_r),
        fmt_opt(m.acc_gamma),
        fmt_opt(m.loss_gamma),
        m.loss_joint
    )
}

pub fn generate(cfg: &RunConfig, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let path = out.unwrap_or_else(|| default_dataset_path(cfg));
    println!("# resolved configuration\n{}", cfg.to_toml());
    let grid = cfg.dataset.grid()?;
    println!("{} configurations, {} sequences each", grid.len(), cfg.dataset.n_per_config);
    for g in &grid {
        println!(
            "  [{:>2}] p = {:<5} R = {:<6} Γ = {:<5} {:>8} sequences",
            g.index, g.spec.p, g.spec.r, g.spec.gamma, cfg.dataset.n_per_config
        );
    }
    let ds = dataset::build(&cfg.dataset, cfg.split, None)?;
    dataset::save(&ds, &path)?;
    let s = ds.manifest.split_sizes;
    println!(
        "{} sequences written to {} (train {}, val {}, test {})",
        s.total(),
        path.display(),
        s.train,
        s.val,
        s.test
    );
    println!("manifest hash {}", ds.manifest.hash());
    Ok(path)
}

/// Architecture settings with the input shape and class count taken from the dataset.
pub fn model_config_for(cfg: &RunConfig, manifest: &DatasetManifest) -> ModelConfig {
    ModelConfig {
        input_len: manifest.config.seq_len,
        input_channels: manifest.feature_channels,
        num_classes: manifest.class_map.num_classes(),
        ..cfg.model.clone()
    }
}

pub fn train(cfg: &RunConfig, data: &Path, mode: TrainMode, run_dir: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let label = mode.label();
    let dir = run_dir.unwrap_or_else(|| cfg.out_dir.join(&label));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ds = dataset::load(data)?;
    let hash = ds.manifest.hash();
    let base = model_config_for(cfg, &ds.manifest);
    let (model_cfg, train_cfg) = match mode {
        TrainMode::Mtl => (base, cfg.train.clone()),
        TrainMode::Stl(task) => (
            base.stl(task),
            TrainConfig {
                lambdas: stl_lambdas(task),
                ..cfg.train.clone()
            },
        ),
    };
    let l = train_cfg.lambdas;
    println!("training {label} on {} (manifest {hash})", data.display());
    println!("λ = ({}, {}, {}), seed {}", l[0], l[1], l[2], train_cfg.seed);

    let mut model = init_model(&model_cfg, &train_cfg)?;
    let splits = ds.splits();
    let report = fit(&mut model, &splits, &train_cfg)?;
    for m in &report.history {
        println!("epoch {:>3} {}", m.epoch, metrics_line(m));
    }

    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            manifest_hash: hash.clone(),
            label: label.clone(),
            lambdas: l,
            train_seconds: report.train_seconds,
            epochs_run: report.epochs_run,
            best_epoch: report.best_epoch,
        },
        model,
    };
    let ckpt_path = dir.join("model.ckpt");
    let bytes = ckpt.save(&ckpt_path)?;
    let csv = evalbench::export_curves(&report.history, &dir, &label, l, true)?;
    fs::write(dir.join("run.toml"), cfg.to_toml()).context("writing run.toml")?;

    let mut log = String::new();
    let _ = writeln!(log, "mode = {label}");
    let _ = writeln!(log, "dataset = {}", data.display());
    let _ = writeln!(log, "manifest_hash = {hash}");
    let _ = writeln!(log, "seed = {}", train_cfg.seed);
    let _ = writeln!(log, "lambdas = ({}, {}, {})", l[0], l[1], l[2]);
    let _ = writeln!(log, "trainable_parameters = {}", ckpt.model.num_trainable());
    let _ = writeln!(log, "checkpoint = {} ({bytes} bytes)", ckpt_path.display());
    let _ = writeln!(log, "metrics = {}", csv.display());
    let _ = writeln!(
        log,
        "epochs_run = {}, best_epoch = {}, best_val_joint = {}, stopped_early = {}",
        report.epochs_run, report.best_epoch, report.best_val_loss, report.stopped_early
    );
    let _ = writeln!(log, "train_seconds = {:.3}", report.train_seconds);
    let _ = writeln!(log, "\n# resolved configuration\n{}", cfg.to_toml());
    fs::write(dir.join("run.log"), log).context("writing run.log")?;
    println!(
        "best epoch {} of {}; checkpoint {}",
        report.best_epoch,
        report.epochs_run,
        ckpt_path.display()
    );
    Ok(dir)
}

fn split_tag(s: &str) -> anyhow::Result<SplitTag> {
    s.parse::<SplitTag>().map_err(|e| ConfigError(e.to_string()).into())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: &str) -> anyhow::Result<EpochMetrics> {
    let split = split_tag(split)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = dataset::load(data)?;
    let settings = evalbench::loss_settings(&ds, &cfg.train, ckpt.meta.lambdas)?;
    let m = evalbench::evaluate(&ckpt.model, &ckpt.meta.manifest_hash, &ds, split, &settings)?;
    println!("{} on {}:", ckpt.meta.label, data.display());
    println!("{}", metrics_line(&m));
    Ok(m)
}

pub fn bench(cfg: &RunConfig, mtl: &Path, stl: &[PathBuf], data: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let ds = dataset::load(data)?;
    let mtl = Checkpoint::load(mtl)?;
    evalbench::check_manifest(&mtl.meta.manifest_hash, &ds.manifest)?;
    let stl: Vec<Checkpoint> = stl.iter().map(|p| Checkpoint::load(p)).collect::<Result<_, _>>()?;
    let report = evalbench::benchmark(&mtl, &stl, &ds.splits().test, cfg.bench_repetitions)?;
    println!("{report}");
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("bench.csv"), report.to_csv()).context("writing bench.csv")?;
    Ok(())
}

/// One `re,im` (or whitespace separated) pair per line; `#` starts a comment.
pub fn read_sequence(path: &Path) -> anyhow::Result<ComplexSequence> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| imn_core::Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))
        };
        match parts.as_slice() {
            [re, im] => out.push(Complex64::new(parse(re)?, parse(im)?)),
            [re] => out.push(Complex64::new(parse(re)?, 0.0)),
            _ => {
                return Err(imn_core::Error::Parse(format!(
                    "{}:{}: expected `re,im`",
                    path.display(),
                    n + 1
                ))
                .into())
            }
        }
    }
    Ok(ComplexSequence(out))
}

pub struct PredictInput {
    pub input: Option<PathBuf>,
    pub p: f64,
    pub r: f64,
    pub gamma: f64,
    pub seed: u64,
}

pub fn predict(checkpoint: &Path, data: &Path, input: &PredictInput) -> anyhow::Result<Prediction> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = dataset::load_manifest(data)?;
    evalbench::check_manifest(&ckpt.meta.manifest_hash, &manifest)?;
    let y = match &input.input {
        Some(path) => read_sequence(path)?,
        None => {
            let c = &manifest.config;
            let spec = NoiseSpec::at_snr(input.p, input.r, input.gamma, c.snr_db, c.channel.snr_ref)?;
            println!(
                "generated sequence: p = {}, R = {}, Γ = {}, SNR {} dB, seed {}",
                input.p, input.r, input.gamma, c.snr_db, input.seed
            );
            received_sequence(&spec, c.seq_len, input.seed, &c.channel)?.y
        }
    };
    let pred = evalbench::predict(&ckpt.model, &y, &manifest)?;
    if let Some(p) = pred.p_hat {
        println!("p̂ = {p:.5}");
    }
    if let Some(r) = pred.r_hat {
        println!("R̂ = {r:.4}");
    }
    if let (Some(g), Some(probs)) = (pred.gamma_hat, &pred.gamma_probs) {
        println!("Γ̂ = {g}");
        for (v, q) in manifest.class_map.values().iter().zip(probs) {
            println!("  P(Γ = {v}) = {q:.4}");
        }
    }
    Ok(pred)
}
