//! Evaluation of trained models, curve export, raw-scale prediction and the
//! multitask versus single-task complexity comparison.

use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::channel::ComplexSequence;
use crate::dataset::{Dataset, DatasetManifest, ExampleSet};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Estimator, ModelOutput};
use crate::training::{
    argmax, evaluate_set, infer_set, log_softmax, write_metrics_csv, EpochMetrics, LossSettings, SplitTag,
    TargetStats, TrainConfig,
};

pub fn check_manifest(expected: &str, manifest: &DatasetManifest) -> Result<()> {
    let found = manifest.hash();
    if found != expected {
        return Err(Error::ManifestMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

/// Loss settings for evaluating against `dataset`, with target statistics from its training split.
pub fn loss_settings(dataset: &Dataset, train: &TrainConfig, lambdas: [f64; 3]) -> Result<LossSettings> {
    Ok(LossSettings {
        lambdas,
        smoothing: train.smoothing_r,
        mode: train.nmse_normalization,
        stats: TargetStats::from_train(&dataset.splits().train)?,
    })
}

/// Metrics of a frozen model on one split; refuses data built under another manifest.
pub fn evaluate(
    model: &dyn Estimator,
    manifest_hash: &str,
    dataset: &Dataset,
    split: SplitTag,
    settings: &LossSettings,
) -> Result<EpochMetrics> {
    check_manifest(manifest_hash, &dataset.manifest)?;
    let splits = dataset.splits();
    let set = match split {
        SplitTag::Train => &splits.train,
        SplitTag::Val => &splits.val,
        SplitTag::Test => &splits.test,
    };
    evaluate_set(model, set, settings, 0, split)
}

/// `metrics_<label>_lambda-<l1>-<l2>-<l3>.csv`.
pub fn curve_file_name(label: &str, lambdas: [f64; 3]) -> String {
    format!("metrics_{label}_lambda-{}-{}-{}.csv", lambdas[0], lambdas[1], lambdas[2])
}

/// Write a run's history as CSV (and optionally an SVG chart next to it); returns the CSV path.
pub fn export_curves(
    history: &[EpochMetrics],
    dir: &Path,
    label: &str,
    lambdas: [f64; 3],
    svg: bool,
) -> Result<PathBuf> {
    if history.is_empty() {
        return Err(Error::Domain("no metrics to export".into()));
    }
    let path = dir.join(curve_file_name(label, lambdas));
    write_metrics_csv(&path, history)?;
    if svg {
        let svg_path = path.with_extension("svg");
        let title = format!("{label}, λ = ({}, {}, {})", lambdas[0], lambdas[1], lambdas[2]);
        std::fs::write(&svg_path, render_svg(history, &title)).map_err(|e| Error::io(&svg_path, e))?;
    }
    Ok(path)
}

type Metric = (&'static str, fn(&EpochMetrics) -> Option<f64>);

const PANELS: [Metric; 4] = [
    ("NMSE p", |m| m.nmse_p),
    ("NMSE R", |m| m.nmse_r),
    ("Accuracy Γ", |m| m.acc_gamma),
    ("Joint loss", |m| Some(m.loss_joint)),
];

/// Line charts of each metric per split against epoch.
pub fn render_svg(history: &[EpochMetrics], title: &str) -> String {
    let (w, h, pad) = (320.0, 220.0, 36.0);
    let panels: Vec<&Metric> = PANELS.iter().filter(|(_, f)| history.iter().any(|m| f(m).is_some())).collect();
    let width = w * panels.len() as f64;
    let max_epoch = history.iter().map(|m| m.epoch).max().unwrap_or(1).max(2) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        h + 24.0
    );
    let _ = writeln!(s, r#"<text x="6" y="14" font-size="13">{}</text>"#, escape(title));
    for (k, (name, f)) in panels.iter().enumerate() {
        let x0 = k as f64 * w;
        let vals: Vec<f64> = history.iter().filter_map(f).filter(|v| v.is_finite()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        let px = |e: f64| x0 + pad + (e - 1.0) / (max_epoch - 1.0) * (w - 2.0 * pad);
        let py = |v: f64| 24.0 + h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
        let _ = writeln!(
            s,
            r##"<g><rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/><text x="{}" y="{}">{}</text><text x="{}" y="{}">{hi:.3}</text><text x="{}" y="{}">{lo:.3}</text></g>"##,
            x0 + pad,
            24.0 + pad,
            w - 2.0 * pad,
            h - 2.0 * pad,
            x0 + pad,
            24.0 + pad - 6.0,
            escape(name),
            x0 + 2.0,
            24.0 + pad + 4.0,
            x0 + 2.0,
            24.0 + h - pad,
        );
        for (split, colour) in [(SplitTag::Train, "#1f77b4"), (SplitTag::Val, "#ff7f0e"), (SplitTag::Test, "#2ca02c")] {
            let pts: Vec<String> = history
                .iter()
                .filter(|m| m.split == split)
                .filter_map(|m| f(m).filter(|v| v.is_finite()).map(|v| format!("{:.2},{:.2}", px(m.epoch as f64), py(v))))
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"><title>{split}</title></polyline>"#,
                    pts.join(" ")
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Raw-scale estimates for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_hat: Option<f64>,
    pub r_hat: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub gamma_probs: Option<Vec<f64>>,
}

/// Invert the target preprocessing of every row of `out`.
pub fn decode_output(out: &ModelOutput, manifest: &DatasetManifest) -> Result<Vec<Prediction>> {
    let st = &manifest.standardizer;
    let k = out.num_classes;
    if out.gamma_logits.is_some() && k != manifest.class_map.num_classes() {
        return Err(Error::Shape(format!(
            "model has {k} classes, manifest class map has {}",
            manifest.class_map.num_classes()
        )));
    }
    (0..out.batch)
        .map(|i| {
            let (gamma_hat, gamma_probs) = match &out.gamma_logits {
                Some(l) => {
                    let row = &l[i * k..(i + 1) * k];
                    let probs: Vec<f64> = log_softmax(row).iter().map(|v| v.exp()).collect();
                    (Some(manifest.class_map.decode(argmax(row) as u8)?), Some(probs))
                }
                None => (None, None),
            };
            Ok(Prediction {
                p_hat: out.p_hat.as_ref().map(|p| st.unstandardize_p(p[i])),
                r_hat: out.r_hat.as_ref().map(|r| 10f64.powf(st.unstandardize_logr(r[i]))),
                gamma_hat,
                gamma_probs,
            })
        })
        .collect()
}

/// Preprocess a received sequence exactly as the dataset pipeline does and run one forward pass.
pub fn predict(model: &dyn Estimator, y: &ComplexSequence, manifest: &DatasetManifest) -> Result<Prediction> {
    let features = manifest.preprocessor().features(y)?;
    let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    let out = model.infer(&x, 1)?;
    Ok(decode_output(&out, manifest)?.remove(0))
}

/// Predictions for every example of an already preprocessed set.
pub fn predict_set(model: &dyn Estimator, set: &ExampleSet, manifest: &DatasetManifest) -> Result<Vec<Prediction>> {
    decode_output(&infer_set(model, set)?, manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub params: usize,
    pub checkpoint_bytes: usize,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

/// Raw measurements; totals, differences and reductions are derived on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mtl: BenchRow,
    pub stl: Vec<BenchRow>,
    pub repetitions: usize,
    pub test_examples: usize,
}

/// `(STL total − MTL) / STL total × 100`.
pub fn reduction_percent(stl_total: f64, mtl: f64) -> f64 {
    (stl_total - mtl) / stl_total * 100.0
}

impl BenchReport {
    pub fn stl_total(&self) -> BenchRow {
        BenchRow {
            label: "STL Total".into(),
            params: self.stl.iter().map(|r| r.params).sum(),
            checkpoint_bytes: self.stl.iter().map(|r| r.checkpoint_bytes).sum(),
            train_seconds: self.stl.iter().map(|r| r.train_seconds).sum(),
            infer_seconds: self.stl.iter().map(|r| r.infer_seconds).sum(),
        }
    }

    /// MTL minus STL total, per column.
    pub fn difference(&self) -> [f64; 4] {
        let t = self.stl_total();
        [
            self.mtl.params as f64 - t.params as f64,
            self.mtl.checkpoint_bytes as f64 - t.checkpoint_bytes as f64,
            self.mtl.infer_seconds - t.infer_seconds,
            self.mtl.train_seconds - t.train_seconds,
        ]
    }

    pub fn reductions(&self) -> [f64; 4] {
        let t = self.stl_total();
        [
            reduction_percent(t.params as f64, self.mtl.params as f64),
            reduction_percent(t.checkpoint_bytes as f64, self.mtl.checkpoint_bytes as f64),
            reduction_percent(t.infer_seconds, self.mtl.infer_seconds),
            reduction_percent(t.train_seconds, self.mtl.train_seconds),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,params,checkpoint_bytes,inference_seconds,training_seconds\n");
        for r in self.stl.iter().chain([&self.stl_total(), &self.mtl]) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.label, r.params, r.checkpoint_bytes, r.infer_seconds, r.train_seconds
            );
        }
        let d = self.difference();
        let _ = writeln!(s, "Difference,{},{},{},{}", d[0], d[1], d[2], d[3]);
        let p = self.reductions();
        let _ = writeln!(s, "Reduction (%),{},{},{},{}", p[0], p[1], p[2], p[3]);
        s
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = "-".repeat(76);
        writeln!(
            f,
            "{:<14} {:>12} {:>16} {:>14} {:>14}",
            "Model", "Params", "Checkpoint (B)", "Inference (s)", "Training (s)"
        )?;
        writeln!(f, "{line}")?;
        let row = |f: &mut fmt::Formatter<'_>, r: &BenchRow| {
            writeln!(
                f,
                "{:<14} {:>12} {:>16} {:>14.4} {:>14.2}",
                r.label, r.params, r.checkpoint_bytes, r.infer_seconds, r.train_seconds
            )
        };
        for r in &self.stl {
            row(f, r)?;
        }
        writeln!(f, "{line}")?;
        row(f, &self.stl_total())?;
        writeln!(f, "{line}")?;
        row(f, &self.mtl)?;
        writeln!(f, "{line}")?;
        let d = self.difference();
        writeln!(
            f,
            "{:<14} {:>12} {:>16} {:>14.4} {:>14.2}",
            "Difference", d[0], d[1], d[2], d[3]
        )?;
        let p = self.reductions();
        write!(
            f,
            "{:<14} {:>11.1}% {:>15.1}% {:>13.1}% {:>13.1}%\n(inference: median of {} full passes over {} test examples)",
            "Reduction", p[0], p[1], p[2], p[3], self.repetitions, self.test_examples
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of a full inference pass over `set`.
pub fn time_inference(model: &dyn Estimator, set: &ExampleSet, repetitions: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        std::hint::black_box(infer_set(model, set)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Compare a multitask checkpoint against single-task checkpoints on the same test split.
pub fn benchmark(mtl: &Checkpoint, stl: &[Checkpoint], test: &ExampleSet, repetitions: usize) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repetitions, got {repetitions}")));
    }
    if test.is_empty() {
        return Err(Error::Domain("empty test split".into()));
    }
    for c in stl {
        if c.meta.manifest_hash != mtl.meta.manifest_hash {
            return Err(Error::ManifestMismatch {
                expected: mtl.meta.manifest_hash.clone(),
                found: c.meta.manifest_hash.clone(),
            });
        }
    }
    let row = |c: &Checkpoint| -> Result<BenchRow> {
        Ok(BenchRow {
            label: c.meta.label.to_uppercase(),
            params: c.model.num_trainable(),
            checkpoint_bytes: c.encode().len(),
            train_seconds: c.meta.train_seconds,
            infer_seconds: time_inference(&c.model, test, repetitions)?,
        })
    };
    Ok(BenchReport {
        mtl: row(mtl)?,
        stl: stl.iter().map(row).collect::<Result<_>>()?,
        repetitions,
        test_examples: test.len(),
    })
}
