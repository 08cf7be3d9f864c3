//! Joint loss, Adam, and the epoch loop with early stopping.

mod adam;
mod loss;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::{ExampleSet, Splits};
use crate::error::{Error, Result};
use crate::model::{Estimator, Model, ModelConfig, ModelOutput, Mode, Task};
use crate::rng::{derive_seed, derived_rng};

pub use adam::{Adam, AdamHyper};
pub use loss::{
    accuracy, argmax, joint_loss, log_softmax, lsce, lsce_with_grad, nmse, nmse_with_grad, smoothed_targets,
    validate_lambdas, Denominator, LossParts, LossSettings, NmseMode, TargetStats, Targets,
};

pub const LAMBDAS_EQUAL: [f64; 3] = [1.0, 1.0, 1.0];
pub const LAMBDAS_UNEQUAL: [f64; 3] = [0.7, 0.85, 1.0];

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const EVAL_CHUNK: usize = 512;

/// `equal`, `unequal`, or three comma-separated weights.
pub fn parse_lambdas(s: &str) -> Result<[f64; 3]> {
    let l = match s.trim() {
        "equal" => LAMBDAS_EQUAL,
        "unequal" => LAMBDAS_UNEQUAL,
        other => {
            let v: Vec<f64> = other
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad loss weights '{other}': {e}")))?;
            <[f64; 3]>::try_from(v)
                .map_err(|v| Error::Config(format!("expected 3 loss weights, got {}", v.len())))?
        }
    };
    validate_lambdas(l)?;
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambdas: [f64; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub smoothing_r: f64,
    pub patience: usize,
    pub seed: u64,
    pub nmse_normalization: NmseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: LAMBDAS_EQUAL,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            smoothing_r: 0.1,
            patience: 10,
            seed: 0x5EED,
            nmse_normalization: NmseMode::Global,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_lambdas(self.lambdas)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing_r) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing_r)));
        }
        Ok(())
    }
}

/// Seeded initialisation shared by multitask and single-task runs.
pub fn init_model(config: &ModelConfig, train: &TrainConfig) -> Result<Model> {
    Model::new(config.clone(), derive_seed(train.seed, &[TAG_INIT]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Parse(format!("unknown split '{other}'"))),
        }
    }
}

/// One row of the metrics history; task columns are empty for absent heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: SplitTag,
    pub nmse_p: Option<f64>,
    pub nmse_r: Option<f64>,
    pub acc_gamma: Option<f64>,
    pub loss_p: Option<f64>,
    pub loss_r: Option<f64>,
    pub loss_gamma: Option<f64>,
    pub loss_joint: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    /// Weighted sum of the present components.
    pub fn recombined(&self, lambdas: [f64; 3]) -> f64 {
        [self.loss_p, self.loss_r, self.loss_gamma]
            .iter()
            .zip(lambdas)
            .filter_map(|(l, w)| l.map(|l| l * w))
            .sum()
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Gather `f64` features for the given example indices.
pub fn gather_features(set: &ExampleSet, indices: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * set.feature_len);
    for &i in indices {
        out.extend(set.features_of(i).iter().map(|&v| v as f64));
    }
    out
}

struct OwnedTargets {
    p: Vec<f64>,
    logr: Vec<f64>,
    classes: Vec<u8>,
}

impl OwnedTargets {
    fn gather(set: &ExampleSet, indices: impl Iterator<Item = usize>) -> Self {
        let mut t = OwnedTargets {
            p: Vec::new(),
            logr: Vec::new(),
            classes: Vec::new(),
        };
        for i in indices {
            t.p.push(set.target_p[i] as f64);
            t.logr.push(set.target_logr[i] as f64);
            t.classes.push(set.gamma_class[i]);
        }
        t
    }

    fn view(&self) -> Targets<'_> {
        Targets {
            p: &self.p,
            logr: &self.logr,
            classes: &self.classes,
        }
    }
}

/// Inference over a whole set in fixed-size chunks, outputs concatenated in order.
pub fn infer_set(model: &dyn Estimator, set: &ExampleSet) -> Result<ModelOutput> {
    let heads = model.heads();
    let mut out = ModelOutput {
        batch: 0,
        num_classes: model.num_classes(),
        p_hat: heads.p.then(Vec::new),
        r_hat: heads.r.then(Vec::new),
        gamma_logits: heads.gamma.then(Vec::new),
    };
    let mut start = 0;
    while start < set.len() {
        let end = (start + EVAL_CHUNK).min(set.len());
        let o = model.infer(&set.feature_block(start..end), end - start)?;
        for (acc, part) in [
            (&mut out.p_hat, o.p_hat),
            (&mut out.r_hat, o.r_hat),
            (&mut out.gamma_logits, o.gamma_logits),
        ] {
            if let (Some(a), Some(p)) = (acc.as_mut(), part) {
                a.extend(p);
            }
        }
        start = end;
    }
    out.batch = set.len();
    Ok(out)
}

/// Metrics of a frozen model on a whole split in inference mode.
pub fn evaluate_set(
    model: &dyn Estimator,
    set: &ExampleSet,
    settings: &LossSettings,
    epoch: usize,
    split: SplitTag,
) -> Result<EpochMetrics> {
    if set.is_empty() {
        return Err(Error::Domain(format!("cannot evaluate an empty {split} split")));
    }
    let t0 = Instant::now();
    let out = infer_set(model, set)?;
    let targets = OwnedTargets::gather(set, 0..set.len());
    let (parts, _) = joint_loss(&out, targets.view(), settings)?;
    let acc = out
        .gamma_logits
        .as_ref()
        .map(|l| accuracy(l, out.num_classes, &targets.classes));
    Ok(EpochMetrics {
        epoch,
        split,
        nmse_p: parts.p,
        nmse_r: parts.r,
        acc_gamma: acc,
        loss_p: parts.p,
        loss_r: parts.r,
        loss_gamma: parts.gamma,
        loss_joint: parts.joint,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Shuffled minibatches; a trailing batch of one example joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().unwrap().len() == 1 {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Train, validation and (when non-empty) test rows for every epoch run.
    pub history: Vec<EpochMetrics>,
    pub epochs_run: usize,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub train_seconds: f64,
}

impl FitReport {
    pub fn rows(&self, split: SplitTag) -> impl Iterator<Item = &EpochMetrics> {
        self.history.iter().filter(move |m| m.split == split)
    }
}

#[derive(Default)]
struct RunningMetrics {
    n: usize,
    p: f64,
    r: f64,
    gamma: f64,
    joint: f64,
    correct: f64,
}

impl RunningMetrics {
    fn add(&mut self, parts: &LossParts, batch: usize, acc: Option<f64>) {
        let w = batch as f64;
        self.n += batch;
        self.p += parts.p.unwrap_or(0.0) * w;
        self.r += parts.r.unwrap_or(0.0) * w;
        self.gamma += parts.gamma.unwrap_or(0.0) * w;
        self.joint += parts.joint * w;
        self.correct += acc.unwrap_or(0.0) * w;
    }

    fn finish(&self, model: &Model, epoch: usize, seconds: f64) -> EpochMetrics {
        let h = model.config.heads;
        let n = self.n as f64;
        let p = h.p.then_some(self.p / n);
        let r = h.r.then_some(self.r / n);
        EpochMetrics {
            epoch,
            split: SplitTag::Train,
            nmse_p: p,
            nmse_r: r,
            acc_gamma: h.gamma.then_some(self.correct / n),
            loss_p: p,
            loss_r: r,
            loss_gamma: h.gamma.then_some(self.gamma / n),
            loss_joint: self.joint / n,
            seconds,
        }
    }
}

/// Train `model` in place. Parameters of the epoch with the lowest validation
/// joint loss are restored before returning.
pub fn fit(model: &mut Model, splits: &Splits, config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if splits.train.len() < 2 || splits.val.is_empty() {
        return Err(Error::Domain(format!(
            "need at least 2 training and 1 validation examples, got {} and {}",
            splits.train.len(),
            splits.val.len()
        )));
    }
    let settings = LossSettings {
        lambdas: config.lambdas,
        smoothing: config.smoothing_r,
        mode: config.nmse_normalization,
        stats: TargetStats::from_train(&splits.train)?,
    };
    let mut adam = Adam::new(&model.params, AdamHyper::with_lr(config.learning_rate));
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut running = RunningMetrics::default();
        for (b, idx) in epoch_batches(splits.train.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let x = gather_features(&splits.train, idx);
            let targets = OwnedTargets::gather(&splits.train, idx.iter().copied());
            let dropout_seed = derive_seed(config.seed, &[TAG_DROPOUT, epoch as u64, b as u64]);
            let (out, cache) = model.forward(&x, idx.len(), Mode::Train { dropout_seed })?;
            let cache = cache.expect("training forward keeps a cache");
            let (parts, grad) = joint_loss(&out, targets.view(), &settings)?;
            if !parts.joint.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {b}: loss_p={:?} loss_r={:?} loss_gamma={:?} joint={}",
                    parts.p, parts.r, parts.gamma, parts.joint
                )));
            }
            let acc = out
                .gamma_logits
                .as_ref()
                .map(|l| accuracy(l, out.num_classes, &targets.classes));
            running.add(&parts, idx.len(), acc);
            let grads = model.backward(&cache, &grad)?;
            adam.step(&mut model.params, &grads)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            model.update_running_stats(&cache);
        }
        history.push(running.finish(model, epoch, t0.elapsed().as_secs_f64()));
        let val = evaluate_set(model, &splits.val, &settings, epoch, SplitTag::Val)?;
        if !val.loss_joint.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation joint loss {}", val.loss_joint)));
        }
        let val_loss = val.loss_joint;
        history.push(val);
        if !splits.test.is_empty() {
            history.push(evaluate_set(model, &splits.test, &settings, epoch, SplitTag::Test)?);
        }
        epochs_run = epoch;
        log::info!(
            "epoch {epoch}: train joint {:.4}, val joint {val_loss:.4}",
            history.iter().rev().find(|m| m.split == SplitTag::Train).unwrap().loss_joint
        );
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.2;
    Ok(FitReport {
        history,
        epochs_run,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Weights that select a single task's loss.
pub fn stl_lambdas(task: Task) -> [f64; 3] {
    let mut l = [0.0; 3];
    l[match task {
        Task::P => 0,
        Task::R => 1,
        Task::Gamma => 2,
    }] = 1.0;
    l
}

/// Train a trunk plus the single head for `task` on the same splits.
pub fn fit_stl(task: Task, model_config: &ModelConfig, splits: &Splits, config: &TrainConfig) -> Result<(Model, FitReport)> {
    let cfg = TrainConfig {
        lambdas: stl_lambdas(task),
        ..config.clone()
    };
    let mut model = init_model(&model_config.stl(task), &cfg)?;
    let report = fit(&mut model, splits, &cfg)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build, DatasetConfig, SplitFractions};
    use crate::model::ConvSpec;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            input_len: 100,
            convs: vec![ConvSpec {
                out_channels: 4,
                kernel: 8,
                stride: 4,
            }],
            lstm_hidden: 6,
            lstm_layers: 1,
            head_r_hidden: vec![4],
            head_gamma_hidden: vec![4, 4],
            ..Default::default()
        }
    }

    fn tiny_splits() -> Splits {
        let cfg = DatasetConfig {
            n_per_config: 6,
            ..Default::default()
        };
        build(&cfg, SplitFractions::default(), None).unwrap().splits()
    }

    #[test]
    fn lambda_presets_parse() {
        assert_eq!(parse_lambdas("equal").unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(parse_lambdas("unequal").unwrap(), [0.7, 0.85, 1.0]);
        assert_eq!(parse_lambdas("0.5, 1,2").unwrap(), [0.5, 1.0, 2.0]);
        assert!(parse_lambdas("1,2").is_err());
        assert!(parse_lambdas("0,0,0").is_err());
        assert!(parse_lambdas("a,b,c").is_err());
    }

    #[test]
    fn batches_cover_the_split_once() {
        for n in [2, 65, 129, 640] {
            let b = epoch_batches(n, 64, 9, 1);
            assert!(b.iter().all(|b| b.len() >= 2));
            let mut all: Vec<usize> = b.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(epoch_batches(129, 64, 9, 1).last().unwrap().len(), 65);
        assert_ne!(epoch_batches(100, 64, 9, 1), epoch_batches(100, 64, 9, 2));
    }

    #[test]
    fn short_fit_is_deterministic_and_consistent() {
        let splits = tiny_splits();
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 16,
            lambdas: LAMBDAS_UNEQUAL,
            ..Default::default()
        };
        let run = || {
            let mut m = init_model(&tiny_model_config(), &cfg).unwrap();
            let r = fit(&mut m, &splits, &cfg).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1.params, m2.params);
        let strip = |h: &[EpochMetrics]| h.iter().map(|m| EpochMetrics { seconds: 0.0, ..m.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&r1.history), strip(&r2.history));
        assert_eq!(r1.history.len(), 6);
        for row in &r1.history {
            let want = row.recombined(cfg.lambdas);
            assert!((row.loss_joint - want).abs() <= 1e-6 * want.abs());
            assert!((0.0..=1.0).contains(&row.acc_gamma.unwrap()));
        }
        let best = r1.rows(SplitTag::Val).map(|m| m.loss_joint).fold(f64::INFINITY, f64::min);
        assert_eq!(r1.best_val_loss, best);
        let settings = LossSettings {
            lambdas: cfg.lambdas,
            smoothing: cfg.smoothing_r,
            mode: cfg.nmse_normalization,
            stats: TargetStats::from_train(&splits.train).unwrap(),
        };
        let again = evaluate_set(&m1, &splits.val, &settings, 0, SplitTag::Val).unwrap();
        assert_eq!(again.loss_joint, best);
    }

    #[test]
    fn gamma_only_weights_freeze_regression_heads() {
        let splits = tiny_splits();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 32,
            lambdas: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let mut m = init_model(&tiny_model_config(), &cfg).unwrap();
        let init = m.params.clone();
        fit(&mut m, &splits, &cfg).unwrap();
        assert_eq!(m.params.head_p, init.head_p);
        assert_eq!(m.params.head_r, init.head_r);
        assert_ne!(m.params.head_gamma, init.head_gamma);
    }

    #[test]
    fn stl_uses_single_loss_and_same_trunk_init() {
        let splits = tiny_splits();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 32,
            ..Default::default()
        };
        let (m, r) = fit_stl(Task::P, &tiny_model_config(), &splits, &cfg).unwrap();
        assert!(m.params.head_r.is_none() && m.params.head_gamma.is_none());
        for row in &r.history {
            assert_eq!(Some(row.loss_joint), row.loss_p);
            assert!(row.loss_r.is_none() && row.acc_gamma.is_none());
        }
        let mtl = init_model(&tiny_model_config(), &cfg).unwrap();
        let stl = init_model(&tiny_model_config().stl(Task::R), &cfg).unwrap();
        assert_eq!(mtl.params.convs, stl.params.convs);
        assert_eq!(mtl.params.head_r, stl.params.head_r);
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            EpochMetrics {
                epoch: 1,
                split: SplitTag::Train,
                nmse_p: Some(0.1 + 0.2),
                nmse_r: None,
                acc_gamma: Some(1.0 / 3.0),
                loss_p: Some(0.1 + 0.2),
                loss_r: None,
                loss_gamma: Some(std::f64::consts::PI),
                loss_joint: 1e-300,
                seconds: 12.5,
            },
            EpochMetrics {
                epoch: 1,
                split: SplitTag::Test,
                nmse_p: None,
                nmse_r: Some(2.0),
                acc_gamma: None,
                loss_p: None,
                loss_r: Some(2.0),
                loss_gamma: None,
                loss_joint: 2.0,
                seconds: 0.0,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "epoch,split,nmse_p,nmse_r,acc_gamma,loss_p,loss_r,loss_gamma,loss_joint,seconds\n"
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
            TrainConfig {
                smoothing_r: 1.0,
                ..Default::default()
            },
            TrainConfig {
                lambdas: [0.0; 3],
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
