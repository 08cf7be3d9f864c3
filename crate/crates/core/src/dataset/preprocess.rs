use serde::{Deserialize, Serialize};

use super::{DatasetConfig, DatasetManifest, RawExamples};
use crate::channel::ComplexSequence;
use crate::error::{Error, Result};

/// How a complex sample becomes real model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureView {
    /// `|y_i|`, one channel.
    #[default]
    Magnitude,
    /// `Re y_i`, one channel.
    Real,
    /// `Re y_i, Im y_i` interleaved per time step, two channels.
    Iq,
}

impl FeatureView {
    pub fn channels(self) -> usize {
        match self {
            FeatureView::Magnitude | FeatureView::Real => 1,
            FeatureView::Iq => 2,
        }
    }
}

pub fn featurize(y: &ComplexSequence, view: FeatureView) -> Vec<f64> {
    match view {
        FeatureView::Magnitude => y.0.iter().map(|z| z.norm()).collect(),
        FeatureView::Real => y.0.iter().map(|z| z.re).collect(),
        FeatureView::Iq => y.0.iter().flat_map(|z| [z.re, z.im]).collect(),
    }
}

/// Zero every value whose magnitude is below `eps`.
pub fn threshold_small(features: &mut [f64], eps: f64) {
    for v in features.iter_mut() {
        if v.abs() < eps {
            *v = 0.0;
        }
    }
}

pub fn max_abs_normalize(features: &mut [f64]) {
    let peak = features.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        features.iter_mut().for_each(|v| *v /= peak);
    }
}

pub fn log_transform_r(r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("log transform needs R > 0, got {r}")));
    }
    Ok(r.log10())
}

/// Training-split statistics for features and regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub p_mean: f64,
    pub p_std: f64,
    pub logr_mean: f64,
    pub logr_std: f64,
    /// Dimensions whose variance was zero and whose std was clamped to 1.
    pub clamped: Vec<String>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    /// Fit population statistics on the rows listed in `train`.
    pub fn fit(raw: &RawExamples, train: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("cannot fit a standardizer on an empty training split".into()));
        }
        let mut clamped = Vec::new();
        let mut clamp = |name: String, std: f64| {
            if std > 0.0 && std.is_finite() {
                std
            } else {
                log::warn!("zero variance in {name}; std clamped to 1");
                clamped.push(name);
                1.0
            }
        };
        let len = raw.feature_len;
        let mut feature_mean = Vec::with_capacity(len);
        let mut feature_std = Vec::with_capacity(len);
        for j in 0..len {
            let (m, s) = mean_std(train.iter().map(|&i| raw.features[i * len + j]));
            feature_mean.push(m);
            feature_std.push(clamp(format!("feature[{j}]"), s));
        }
        let (p_mean, p_std) = mean_std(train.iter().map(|&i| raw.p[i]));
        let p_std = clamp("p".into(), p_std);
        let logr: Vec<f64> = train
            .iter()
            .map(|&i| log_transform_r(raw.r[i]))
            .collect::<Result<_>>()?;
        let (logr_mean, logr_std) = mean_std(logr.iter().copied());
        let logr_std = clamp("log10(R)".into(), logr_std);
        Ok(Standardizer {
            feature_mean,
            feature_std,
            p_mean,
            p_std,
            logr_mean,
            logr_std,
            clamped,
        })
    }

    pub fn standardize_p(&self, p: f64) -> f64 {
        (p - self.p_mean) / self.p_std
    }

    pub fn unstandardize_p(&self, z: f64) -> f64 {
        z * self.p_std + self.p_mean
    }

    pub fn standardize_logr(&self, logr: f64) -> f64 {
        (logr - self.logr_mean) / self.logr_std
    }

    pub fn unstandardize_logr(&self, z: f64) -> f64 {
        z * self.logr_std + self.logr_mean
    }

    pub fn standardize_features(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unstandardize_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Ascending bijection between memory values and class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    values: Vec<f64>,
}

impl ClassMap {
    pub fn new(grid: &[f64]) -> Result<Self> {
        let mut values = grid.to_vec();
        values.sort_by(f64::total_cmp);
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate Γ values in {grid:?}")));
        }
        if values.is_empty() || values.len() > u8::MAX as usize {
            return Err(Error::Config("Γ grid must have between 1 and 255 values".into()));
        }
        Ok(ClassMap { values })
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn encode(&self, gamma: f64) -> Result<u8> {
        self.values
            .iter()
            .position(|&v| v == gamma)
            .map(|i| i as u8)
            .ok_or_else(|| Error::Domain(format!("Γ = {gamma} is not in the class map {:?}", self.values)))
    }

    pub fn decode(&self, class: u8) -> Result<f64> {
        self.values
            .get(class as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("class {class} out of range")))
    }
}

/// The stored feature pipeline, shared by dataset building and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub view: FeatureView,
    pub threshold_eps: f64,
    pub max_abs_normalize: bool,
    pub seq_len: usize,
    pub standardizer: Option<Standardizer>,
}

impl Preprocessor {
    pub(crate) fn raw(config: &DatasetConfig) -> Self {
        Preprocessor {
            view: config.feature_view,
            threshold_eps: config.threshold_eps,
            max_abs_normalize: config.max_abs_normalize,
            seq_len: config.seq_len,
            standardizer: None,
        }
    }

    pub(crate) fn new(config: &DatasetConfig, standardizer: Standardizer) -> Self {
        Preprocessor {
            standardizer: Some(standardizer),
            ..Self::raw(config)
        }
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        Self::new(&manifest.config, manifest.standardizer.clone())
    }

    /// Featurize, threshold and optionally peak-normalize.
    pub fn raw_features(&self, y: &ComplexSequence) -> Vec<f64> {
        let mut f = featurize(y, self.view);
        threshold_small(&mut f, self.threshold_eps);
        if self.max_abs_normalize {
            max_abs_normalize(&mut f);
        }
        f
    }

    pub(crate) fn standardize_features(&self, raw: &[f64]) -> Vec<f32> {
        let st = self.standardizer.as_ref().expect("fitted preprocessor");
        st.standardize_features(raw).into_iter().map(|v| v as f32).collect()
    }

    /// The full inference-time feature pipeline.
    pub fn features(&self, y: &ComplexSequence) -> Result<Vec<f32>> {
        if y.len() != self.seq_len {
            return Err(Error::Shape(format!(
                "sequence has {} samples, expected {}",
                y.len(),
                self.seq_len
            )));
        }
        if self.standardizer.is_none() {
            return Err(Error::Config("preprocessor has no fitted standardizer".into()));
        }
        Ok(self.standardize_features(&self.raw_features(y)))
    }
}
