//! Grid generation, preprocessing and persistence of training examples.
//!
//! Preprocessing runs in a fixed order which is recorded in the manifest:
//! featurize, threshold, (targets: `log10 R`), standardize, encode `Γ`.

pub(crate) mod io;
mod preprocess;
mod split;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{received_sequence, ChannelOptions, ComplexSequence, NoiseSpec};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub use io::{load, load_manifest, manifest_path, save, FORMAT_VERSION, MAGIC};
pub use preprocess::{
    featurize, log_transform_r, max_abs_normalize, threshold_small, ClassMap, FeatureView,
    Preprocessor, Standardizer,
};
pub use split::{stratified_split, SplitFractions, SplitIndices};

pub const PREPROCESSING_ORDER: [&str; 5] = [
    "featurize",
    "threshold",
    "log10(R)",
    "standardize",
    "encode(gamma)",
];

const TAG_SPLIT: u64 = 0x0053_504C_4954;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub p_grid: Vec<f64>,
    pub r_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub n_per_config: usize,
    pub seq_len: usize,
    pub snr_db: f64,
    pub master_seed: u64,
    pub threshold_eps: f64,
    pub feature_view: FeatureView,
    /// Divide each sequence by its largest absolute feature before standardizing.
    pub max_abs_normalize: bool,
    pub channel: ChannelOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            p_grid: vec![0.0, 0.1],
            r_grid: vec![1.0, 10.0, 100.0, 1000.0],
            gamma_grid: vec![1.0, 10.0, 50.0, 100.0],
            n_per_config: 40_000,
            seq_len: 100,
            snr_db: 15.0,
            master_seed: 0x1A2B_3C4D,
            threshold_eps: 1e-4,
            feature_view: FeatureView::Magnitude,
            max_abs_normalize: false,
            channel: ChannelOptions::default(),
        }
    }
}

/// One point of the `(p, R, Γ)` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub spec: NoiseSpec,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_grid.is_empty() || self.r_grid.is_empty() || self.gamma_grid.is_empty() {
            return Err(Error::Config("parameter grids must be nonempty".into()));
        }
        if self.n_per_config == 0 {
            return Err(Error::Config("n_per_config must be at least 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if !(self.threshold_eps >= 0.0) {
            return Err(Error::Config("threshold_eps must be nonnegative".into()));
        }
        ClassMap::new(&self.gamma_grid)?;
        Ok(())
    }

    pub fn num_configs(&self) -> usize {
        self.p_grid.len() * self.r_grid.len() * self.gamma_grid.len()
    }

    pub fn total_sequences(&self) -> usize {
        self.num_configs() * self.n_per_config
    }

    /// Grid points in `p`-major, `Γ`-minor order; every pair is checked for feasibility.
    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        self.validate()?;
        let mut points = Vec::with_capacity(self.num_configs());
        for &p in &self.p_grid {
            for &r in &self.r_grid {
                for &gamma in &self.gamma_grid {
                    let spec = NoiseSpec::at_snr(p, r, gamma, self.snr_db, self.channel.snr_ref)
                        .map_err(|e| Error::Domain(format!("grid point (p={p}, R={r}, Γ={gamma}): {e}")))?;
                    crate::channel::derive_transitions(&spec)?;
                    points.push(GridPoint {
                        index: points.len(),
                        spec,
                    });
                }
            }
        }
        Ok(points)
    }

    pub fn sequence_seed(&self, config_index: usize, seq_index: usize) -> u64 {
        derive_seed(self.master_seed, &[config_index as u64, seq_index as u64])
    }
}

/// A received block with the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub y: ComplexSequence,
    pub spec: NoiseSpec,
    pub config_index: usize,
}

/// Generate every received block of the grid. Intended for small grids; the
/// training pipeline featurizes on the fly instead.
pub fn generate(config: &DatasetConfig) -> Result<Vec<RawRecord>> {
    let grid = config.grid()?;
    let per = config.n_per_config;
    (0..grid.len() * per)
        .into_par_iter()
        .map(|i| {
            let point = &grid[i / per];
            let seed = config.sequence_seed(point.index, i % per);
            let rx = received_sequence(&point.spec, config.seq_len, seed, &config.channel)?;
            Ok(RawRecord {
                y: rx.y,
                spec: point.spec,
                config_index: point.index,
            })
        })
        .collect()
}

/// Featurized sequences with raw-scale labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawExamples {
    pub feature_len: usize,
    pub features: Vec<f64>,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl RawExamples {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }
}

/// Generate and featurize the whole grid without keeping complex samples.
pub fn generate_features(config: &DatasetConfig) -> Result<RawExamples> {
    let grid = config.grid()?;
    let pre = Preprocessor::raw(config);
    let per = config.n_per_config;
    let feature_len = config.seq_len * config.feature_view.channels();
    let rows: Vec<Vec<f64>> = (0..grid.len() * per)
        .into_par_iter()
        .map(|i| {
            let point = &grid[i / per];
            let seed = config.sequence_seed(point.index, i % per);
            let rx = received_sequence(&point.spec, config.seq_len, seed, &config.channel)?;
            Ok(pre.raw_features(&rx.y))
        })
        .collect::<Result<_>>()?;
    let mut out = RawExamples {
        feature_len,
        features: Vec::with_capacity(rows.len() * feature_len),
        ..Default::default()
    };
    for (i, row) in rows.into_iter().enumerate() {
        let spec = grid[i / per].spec;
        out.features.extend_from_slice(&row);
        out.p.push(spec.p);
        out.r.push(spec.r);
        out.gamma.push(spec.gamma);
    }
    Ok(out)
}

/// A fully preprocessed training record, stored as single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f32>,
    pub target_p: f32,
    pub target_logr: f32,
    pub gamma_class: u8,
}

/// Column-oriented collection of examples with a fixed feature length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleSet {
    pub feature_len: usize,
    pub features: Vec<f32>,
    pub target_p: Vec<f32>,
    pub target_logr: Vec<f32>,
    pub gamma_class: Vec<u8>,
}

impl ExampleSet {
    pub fn new(feature_len: usize) -> Self {
        ExampleSet {
            feature_len,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.target_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_p.is_empty()
    }

    pub fn features_of(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }

    pub fn get(&self, i: usize) -> Example {
        Example {
            features: self.features_of(i).to_vec(),
            target_p: self.target_p[i],
            target_logr: self.target_logr[i],
            gamma_class: self.gamma_class[i],
        }
    }

    pub fn push(&mut self, ex: &Example) -> Result<()> {
        if ex.features.len() != self.feature_len {
            return Err(Error::Shape(format!(
                "example has {} features, set expects {}",
                ex.features.len(),
                self.feature_len
            )));
        }
        self.features.extend_from_slice(&ex.features);
        self.target_p.push(ex.target_p);
        self.target_logr.push(ex.target_logr);
        self.gamma_class.push(ex.gamma_class);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> ExampleSet {
        let mut out = ExampleSet::new(self.feature_len);
        out.features.reserve(indices.len() * self.feature_len);
        for &i in indices {
            out.features.extend_from_slice(self.features_of(i));
            out.target_p.push(self.target_p[i]);
            out.target_logr.push(self.target_logr[i]);
            out.gamma_class.push(self.gamma_class[i]);
        }
        out
    }

    pub fn range(&self, range: std::ops::Range<usize>) -> ExampleSet {
        let idx: Vec<usize> = range.collect();
        self.subset(&idx)
    }

    /// Features widened to `f64` for a contiguous block of examples.
    pub fn feature_block(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        self.features[range.start * self.feature_len..range.end * self.feature_len]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &c in &self.gamma_class {
            counts[c as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Everything needed to reproduce or invert the preprocessing of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub config: DatasetConfig,
    pub split_seed: u64,
    pub fractions: SplitFractions,
    pub split_sizes: SplitSizes,
    pub class_map: ClassMap,
    pub standardizer: Standardizer,
    pub feature_channels: usize,
    pub preprocessing: Vec<String>,
}

impl DatasetManifest {
    /// SHA-256 of the canonical JSON serialisation, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor::from_manifest(self)
    }

    pub fn feature_len(&self) -> usize {
        self.config.seq_len * self.feature_channels
    }
}

/// A materialised dataset: examples ordered train, validation, test.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: ExampleSet,
    pub manifest: DatasetManifest,
}

/// The three splits of a dataset as independent sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ExampleSet,
    pub val: ExampleSet,
    pub test: ExampleSet,
}

impl Dataset {
    pub fn splits(&self) -> Splits {
        let s = self.manifest.split_sizes;
        Splits {
            train: self.examples.range(0..s.train),
            val: self.examples.range(s.train..s.train + s.val),
            test: self.examples.range(s.train + s.val..s.total()),
        }
    }
}

/// Generate, split, standardize and encode a dataset.
pub fn build(config: &DatasetConfig, fractions: SplitFractions, split_seed: Option<u64>) -> Result<Dataset> {
    let raw = generate_features(config)?;
    build_from_raw(config, &raw, fractions, split_seed)
}

pub fn build_from_raw(
    config: &DatasetConfig,
    raw: &RawExamples,
    fractions: SplitFractions,
    split_seed: Option<u64>,
) -> Result<Dataset> {
    let class_map = ClassMap::new(&config.gamma_grid)?;
    let classes: Vec<u8> = raw
        .gamma
        .iter()
        .map(|&g| class_map.encode(g))
        .collect::<Result<_>>()?;
    let split_seed = split_seed.unwrap_or_else(|| derive_seed(config.master_seed, &[TAG_SPLIT]));
    let split = stratified_split(&classes, fractions, split_seed)?;
    let standardizer = Standardizer::fit(raw, &split.train)?;
    let pre = Preprocessor::new(config, standardizer.clone());

    let mut examples = ExampleSet::new(raw.feature_len);
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        examples.features.extend(pre.standardize_features(raw.features_of(i)));
        examples.target_p.push(standardizer.standardize_p(raw.p[i]) as f32);
        examples
            .target_logr
            .push(standardizer.standardize_logr(log_transform_r(raw.r[i])?) as f32);
        examples.gamma_class.push(classes[i]);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        master_seed: config.master_seed,
        config: config.clone(),
        split_seed,
        fractions,
        split_sizes: SplitSizes {
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
        class_map,
        standardizer,
        feature_channels: config.feature_view.channels(),
        preprocessing: PREPROCESSING_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    Ok(Dataset { examples, manifest })
}
