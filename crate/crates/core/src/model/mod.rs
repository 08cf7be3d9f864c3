//! Shared CNN-attention-LSTM trunk with task heads for `p`, `R` and `Γ`.
//!
//! ```text
//! B×100 ─ conv(1→32,k8,s2) BN ReLU ─ conv(32→64,k4,s2) BN ReLU ─ conv(64→128,k4,s2) BN ReLU
//!       ─ temporal attention ─ LSTM(128→64) ─ LSTM(64→64) ─ last step (64)
//!       ├─ head p: FC 64→1
//!       ├─ head R: FC 64→64 ReLU FC 64→32 ReLU FC 32→1
//!       └─ head Γ: FC 64→64 BN ReLU dropout FC 64→32 BN ReLU FC 32→C
//! ```

mod checkpoint;
pub mod layers;
pub mod lstm;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use layers::{
    attention_backward, attention_forward, conv_output_len, dropout_mask, relu_backward, relu_inplace,
    take_last, take_last_backward, Act, BatchNorm, BnCache, Conv1d, Linear,
};
use lstm::{Lstm, LstmCache};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// One estimation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    P,
    R,
    Gamma,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::P, Task::R, Task::Gamma];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::P => "p",
            Task::R => "r",
            Task::Gamma => "gamma",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(Task::P),
            "r" => Ok(Task::R),
            "gamma" | "g" => Ok(Task::Gamma),
            other => Err(Error::Config(format!("unknown task '{other}' (expected p, r or gamma)"))),
        }
    }
}

/// Which heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub p: bool,
    pub r: bool,
    pub gamma: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        p: true,
        r: true,
        gamma: true,
    };

    pub fn only(task: Task) -> Heads {
        Heads {
            p: task == Task::P,
            r: task == Task::R,
            gamma: task == Task::Gamma,
        }
    }

    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::P => self.p,
            Task::R => self.r,
            Task::Gamma => self.gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_len: usize,
    pub convs: Vec<ConvSpec>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub head_r_hidden: Vec<usize>,
    pub head_gamma_hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub heads: Heads,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            input_len: 100,
            convs: vec![
                ConvSpec {
                    out_channels: 32,
                    kernel: 8,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 64,
                    kernel: 4,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 128,
                    kernel: 4,
                    stride: 2,
                },
            ],
            lstm_hidden: 64,
            lstm_layers: 2,
            head_r_hidden: vec![64, 32],
            head_gamma_hidden: vec![64, 32],
            num_classes: 4,
            dropout: 0.4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            heads: Heads::ALL,
        }
    }
}

impl ModelConfig {
    /// Sequence lengths through the conv stack, input first.
    pub fn time_steps(&self) -> Result<Vec<usize>> {
        let mut lens = vec![self.input_len];
        for c in &self.convs {
            lens.push(conv_output_len(*lens.last().unwrap(), c.kernel, c.stride)?);
        }
        Ok(lens)
    }

    pub fn channels(&self) -> Vec<usize> {
        std::iter::once(self.input_channels)
            .chain(self.convs.iter().map(|c| c.out_channels))
            .collect()
    }

    pub fn feature_len(&self) -> usize {
        self.input_len * self.input_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.time_steps()?;
        if self.input_channels == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config("channel, hidden and layer counts must be positive".into()));
        }
        if self.heads.gamma && (self.num_classes < 2 || self.head_gamma_hidden.is_empty()) {
            return Err(Error::Config("Γ head needs at least 2 classes and one hidden block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.heads.p || self.heads.r || self.heads.gamma) {
            return Err(Error::Config("model needs at least one head".into()));
        }
        Ok(())
    }

    pub fn stl(&self, task: Task) -> ModelConfig {
        ModelConfig {
            heads: Heads::only(task),
            ..self.clone()
        }
    }
}

/// Fully connected layer followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBn {
    pub fc: Linear,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaHead {
    pub blocks: Vec<DenseBn>,
    pub out: Linear,
}

/// All weights of the trunk and the present heads, plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub convs: Vec<Conv1d>,
    pub conv_norms: Vec<BatchNorm>,
    pub lstms: Vec<Lstm>,
    pub head_p: Option<Linear>,
    pub head_r: Option<Vec<Linear>>,
    pub head_gamma: Option<GammaHead>,
}

type Named<'a> = Vec<(String, &'a Vec<f64>)>;
type NamedMut<'a> = Vec<(String, &'a mut Vec<f64>)>;

fn push_linear<'a>(l: &'a Linear, name: &str, out: &mut Named<'a>) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_linear_mut<'a>(l: &'a mut Linear, name: &str, out: &mut NamedMut<'a>) {
    out.push((format!("{name}.weight"), &mut l.weight));
    out.push((format!("{name}.bias"), &mut l.bias));
}

fn push_bn<'a>(b: &'a BatchNorm, name: &str, buffers: bool, out: &mut Named<'a>) {
    out.push((format!("{name}.scale"), &b.scale));
    out.push((format!("{name}.shift"), &b.shift));
    if buffers {
        out.push((format!("{name}.running_mean"), &b.running_mean));
        out.push((format!("{name}.running_var"), &b.running_var));
    }
}

fn push_bn_mut<'a>(b: &'a mut BatchNorm, name: &str, buffers: bool, out: &mut NamedMut<'a>) {
    out.push((format!("{name}.scale"), &mut b.scale));
    out.push((format!("{name}.shift"), &mut b.shift));
    if buffers {
        out.push((format!("{name}.running_mean"), &mut b.running_mean));
        out.push((format!("{name}.running_var"), &mut b.running_var));
    }
}

impl ModelParams {
    /// Named tensors in a fixed order; `buffers` adds running statistics.
    pub fn tensors(&self, buffers: bool) -> Named<'_> {
        let mut out = Vec::new();
        for (i, (c, bn)) in self.convs.iter().zip(&self.conv_norms).enumerate() {
            out.push((format!("trunk.conv{i}.weight"), &c.weight));
            out.push((format!("trunk.conv{i}.bias"), &c.bias));
            push_bn(bn, &format!("trunk.bn{i}"), buffers, &mut out);
        }
        for (i, l) in self.lstms.iter().enumerate() {
            out.push((format!("trunk.lstm{i}.w_ih"), &l.w_ih));
            out.push((format!("trunk.lstm{i}.w_hh"), &l.w_hh));
            out.push((format!("trunk.lstm{i}.b_ih"), &l.b_ih));
            out.push((format!("trunk.lstm{i}.b_hh"), &l.b_hh));
        }
        if let Some(l) = &self.head_p {
            push_linear(l, "head_p.fc", &mut out);
        }
        if let Some(ls) = &self.head_r {
            for (i, l) in ls.iter().enumerate() {
                push_linear(l, &format!("head_r.fc{i}"), &mut out);
            }
        }
        if let Some(g) = &self.head_gamma {
            for (i, b) in g.blocks.iter().enumerate() {
                push_linear(&b.fc, &format!("head_gamma.fc{i}"), &mut out);
                push_bn(&b.norm, &format!("head_gamma.bn{i}"), buffers, &mut out);
            }
            push_linear(&g.out, "head_gamma.out", &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self, buffers: bool) -> NamedMut<'_> {
        let mut out = Vec::new();
        for (i, (c, bn)) in self.convs.iter_mut().zip(self.conv_norms.iter_mut()).enumerate() {
            out.push((format!("trunk.conv{i}.weight"), &mut c.weight));
            out.push((format!("trunk.conv{i}.bias"), &mut c.bias));
            push_bn_mut(bn, &format!("trunk.bn{i}"), buffers, &mut out);
        }
        for (i, l) in self.lstms.iter_mut().enumerate() {
            out.push((format!("trunk.lstm{i}.w_ih"), &mut l.w_ih));
            out.push((format!("trunk.lstm{i}.w_hh"), &mut l.w_hh));
            out.push((format!("trunk.lstm{i}.b_ih"), &mut l.b_ih));
            out.push((format!("trunk.lstm{i}.b_hh"), &mut l.b_hh));
        }
        if let Some(l) = &mut self.head_p {
            push_linear_mut(l, "head_p.fc", &mut out);
        }
        if let Some(ls) = &mut self.head_r {
            for (i, l) in ls.iter_mut().enumerate() {
                push_linear_mut(l, &format!("head_r.fc{i}"), &mut out);
            }
        }
        if let Some(g) = &mut self.head_gamma {
            for (i, b) in g.blocks.iter_mut().enumerate() {
                push_linear_mut(&mut b.fc, &format!("head_gamma.fc{i}"), &mut out);
                push_bn_mut(&mut b.norm, &format!("head_gamma.bn{i}"), buffers, &mut out);
            }
            push_linear_mut(&mut g.out, "head_gamma.out", &mut out);
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors(false).iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every trainable value (and buffer) set to zero.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut(true) {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors(true).iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout with a fixed mask seed.
    Train { dropout_seed: u64 },
    Eval,
}

/// Head outputs for a batch; absent heads are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub batch: usize,
    pub num_classes: usize,
    /// Standardized `p` estimate per example.
    pub p_hat: Option<Vec<f64>>,
    /// Standardized `log10 R` estimate per example.
    pub r_hat: Option<Vec<f64>>,
    /// `batch × num_classes` logits.
    pub gamma_logits: Option<Vec<f64>>,
}

/// Loss gradients with respect to each head output.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad {
    pub p_hat: Option<Vec<f64>>,
    pub r_hat: Option<Vec<f64>>,
    pub gamma_logits: Option<Vec<f64>>,
}

struct ConvCache {
    cols: Vec<f64>,
    in_time: usize,
    bn: BnCache,
    out: Act,
}

struct DenseCache {
    input: Vec<f64>,
    bn: Option<BnCache>,
    /// Post-activation values before dropout.
    act: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Intermediate values retained by a training-mode forward pass.
pub struct ForwardCache {
    batch: usize,
    convs: Vec<ConvCache>,
    att_in: Act,
    att_weights: Vec<f64>,
    lstms: Vec<LstmCache>,
    lstm_time: usize,
    shared: Vec<f64>,
    head_r: Vec<DenseCache>,
    head_gamma: Vec<DenseCache>,
    gamma_out_in: Vec<f64>,
    /// Attention weights per example, `batch × time`.
    pub attention: Vec<f64>,
}

/// Anything that maps a batch of features to head outputs in inference mode.
pub trait Estimator {
    fn heads(&self) -> Heads;
    fn num_classes(&self) -> usize;
    fn infer(&self, features: &[f64], batch: usize) -> Result<ModelOutput>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

const INIT_CONV: u64 = 10;
const INIT_LSTM: u64 = 20;
const INIT_HEAD_P: u64 = 30;
const INIT_HEAD_R: u64 = 40;
const INIT_HEAD_GAMMA: u64 = 50;

impl Model {
    /// Initialise a model; each layer draws from its own seeded stream so the
    /// trunk of a single-task model matches the multitask trunk for the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let mut convs = Vec::new();
        let mut conv_norms = Vec::new();
        for (i, spec) in config.convs.iter().enumerate() {
            let mut rng = derived_rng(seed, &[INIT_CONV, i as u64]);
            convs.push(Conv1d::new(ch[i], spec.out_channels, spec.kernel, spec.stride, &mut rng));
            conv_norms.push(BatchNorm::new(spec.out_channels, config.bn_eps, config.bn_momentum));
        }
        let mut lstms = Vec::new();
        let mut input = *ch.last().unwrap();
        for i in 0..config.lstm_layers {
            let mut rng = derived_rng(seed, &[INIT_LSTM, i as u64]);
            lstms.push(Lstm::new(input, config.lstm_hidden, &mut rng));
            input = config.lstm_hidden;
        }
        let h = config.lstm_hidden;
        let head_p = config
            .heads
            .p
            .then(|| Linear::new(h, 1, &mut derived_rng(seed, &[INIT_HEAD_P])));
        let head_r = config.heads.r.then(|| {
            let mut rng = derived_rng(seed, &[INIT_HEAD_R]);
            let mut dims = vec![h];
            dims.extend(&config.head_r_hidden);
            dims.push(1);
            dims.windows(2).map(|w| Linear::new(w[0], w[1], &mut rng)).collect()
        });
        let head_gamma = config.heads.gamma.then(|| {
            let mut rng = derived_rng(seed, &[INIT_HEAD_GAMMA]);
            let mut prev = h;
            let mut blocks = Vec::new();
            for &width in &config.head_gamma_hidden {
                blocks.push(DenseBn {
                    fc: Linear::new(prev, width, &mut rng),
                    norm: BatchNorm::new(width, config.bn_eps, config.bn_momentum),
                });
                prev = width;
            }
            GammaHead {
                blocks,
                out: Linear::new(prev, config.num_classes, &mut rng),
            }
        });
        Ok(Model {
            config,
            params: ModelParams {
                convs,
                conv_norms,
                lstms,
                head_p,
                head_r,
                head_gamma,
            },
        })
    }

    /// Trunk plus the single head for `task`.
    pub fn build_stl(task: Task, config: &ModelConfig, seed: u64) -> Result<Self> {
        Model::new(config.stl(task), seed)
    }

    pub fn forward(&self, features: &[f64], batch: usize, mode: Mode) -> Result<(ModelOutput, Option<ForwardCache>)> {
        let cfg = &self.config;
        let train = matches!(mode, Mode::Train { .. });
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if features.len() != batch * cfg.feature_len() {
            return Err(Error::Shape(format!(
                "expected {} features per example, got {} values for batch {batch}",
                cfg.feature_len(),
                features.len()
            )));
        }
        let p = &self.params;
        let mut x = Act::new(batch, cfg.input_len, cfg.input_channels, features.to_vec());
        let mut conv_caches = Vec::new();
        for (conv, bn) in p.convs.iter().zip(&p.conv_norms) {
            let in_time = x.time;
            let (y, cols) = conv.forward(&x)?;
            let (mut data, bn_cache) = if train {
                let (d, c) = bn.forward_train(&y.data)?;
                (d, Some(c))
            } else {
                (bn.forward_eval(&y.data), None)
            };
            relu_inplace(&mut data);
            x = Act::new(y.batch, y.time, y.channels, data);
            if let Some(bn) = bn_cache {
                conv_caches.push(ConvCache {
                    cols,
                    in_time,
                    bn,
                    out: x.clone(),
                });
            }
        }
        let (mut seq, att_weights) = attention_forward(&x);
        let att_in = x;
        let mut lstm_caches = Vec::new();
        for l in &p.lstms {
            let (y, c) = l.forward(&seq)?;
            if train {
                lstm_caches.push(c);
            }
            seq = y;
        }
        let lstm_time = seq.time;
        let shared = take_last(&seq);
        let h = cfg.lstm_hidden;

        let p_hat = p.head_p.as_ref().map(|l| l.forward(&shared, batch));

        let mut r_caches = Vec::new();
        let r_hat = p.head_r.as_ref().map(|layers| {
            let mut a = shared.clone();
            let last = layers.len() - 1;
            for (i, l) in layers.iter().enumerate() {
                let mut y = l.forward(&a, batch);
                if i < last {
                    relu_inplace(&mut y);
                }
                if train {
                    r_caches.push(DenseCache {
                        input: a,
                        bn: None,
                        act: y.clone(),
                        mask: None,
                    });
                }
                a = y;
            }
            a
        });

        let mut g_caches = Vec::new();
        let mut gamma_out_in = Vec::new();
        let gamma_logits = match &p.head_gamma {
            None => None,
            Some(g) => {
                let mut a = shared.clone();
                for (i, block) in g.blocks.iter().enumerate() {
                    let z = block.fc.forward(&a, batch);
                    let (mut y, bn) = if train {
                        let (y, c) = block.norm.forward_train(&z)?;
                        (y, Some(c))
                    } else {
                        (block.norm.forward_eval(&z), None)
                    };
                    relu_inplace(&mut y);
                    let act = y.clone();
                    let mask = match mode {
                        Mode::Train { dropout_seed } if i == 0 && cfg.dropout > 0.0 => {
                            let mut rng = derived_rng(dropout_seed, &[INIT_HEAD_GAMMA, i as u64]);
                            let m = dropout_mask(y.len(), cfg.dropout, &mut rng);
                            y.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                            Some(m)
                        }
                        _ => None,
                    };
                    if train {
                        g_caches.push(DenseCache {
                            input: a,
                            bn,
                            act,
                            mask,
                        });
                    }
                    a = y;
                }
                let logits = g.out.forward(&a, batch);
                gamma_out_in = a;
                Some(logits)
            }
        };

        let output = ModelOutput {
            batch,
            num_classes: cfg.num_classes,
            p_hat,
            r_hat,
            gamma_logits,
        };
        let cache = train.then(|| ForwardCache {
            batch,
            convs: conv_caches,
            attention: att_weights.clone(),
            att_in,
            att_weights,
            lstms: lstm_caches,
            lstm_time,
            shared: {
                debug_assert_eq!(shared.len(), batch * h);
                shared
            },
            head_r: r_caches,
            head_gamma: g_caches,
            gamma_out_in,
        });
        Ok((output, cache))
    }

    /// Reverse pass from head-output gradients to every trainable parameter.
    pub fn backward(&self, cache: &ForwardCache, dout: &OutputGrad) -> Result<ModelParams> {
        let p = &self.params;
        let batch = cache.batch;
        let h = self.config.lstm_hidden;
        let mut grads = p.zeros_like();
        let mut dshared = vec![0.0; batch * h];
        let mut add = |d: Vec<f64>| dshared.iter_mut().zip(d).for_each(|(a, b)| *a += b);

        if let (Some(l), Some(dp)) = (&p.head_p, &dout.p_hat) {
            add(l.backward(&cache.shared, batch, dp, grads.head_p.as_mut().unwrap()));
        }
        if let (Some(layers), Some(dr)) = (&p.head_r, &dout.r_hat) {
            let glayers = grads.head_r.as_mut().unwrap();
            let mut d = dr.clone();
            let last = layers.len() - 1;
            for i in (0..layers.len()).rev() {
                let c = &cache.head_r[i];
                if i < last {
                    relu_backward(&c.act, &mut d);
                }
                d = layers[i].backward(&c.input, batch, &d, &mut glayers[i]);
            }
            add(d);
        }
        if let (Some(g), Some(dl)) = (&p.head_gamma, &dout.gamma_logits) {
            let gg = grads.head_gamma.as_mut().unwrap();
            let mut d = g.out.backward(&cache.gamma_out_in, batch, dl, &mut gg.out);
            for i in (0..g.blocks.len()).rev() {
                let c = &cache.head_gamma[i];
                if let Some(m) = &c.mask {
                    d.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                relu_backward(&c.act, &mut d);
                let bn = c.bn.as_ref().expect("training cache");
                let dz = g.blocks[i].norm.backward(bn, &d, &mut gg.blocks[i].norm);
                d = g.blocks[i].fc.backward(&c.input, batch, &dz, &mut gg.blocks[i].fc);
            }
            add(d);
        }

        let mut dseq = take_last_backward(batch, cache.lstm_time, h, &dshared);
        for i in (0..p.lstms.len()).rev() {
            dseq = p.lstms[i].backward(&cache.lstms[i], &dseq, &mut grads.lstms[i]);
        }
        let mut dx = attention_backward(&cache.att_in, &cache.att_weights, &dseq);
        for i in (0..p.convs.len()).rev() {
            let c = &cache.convs[i];
            relu_backward(&c.out.data, &mut dx.data);
            let dbn = p.conv_norms[i].backward(&c.bn, &dx.data, &mut grads.conv_norms[i]);
            let dy = Act::new(dx.batch, dx.time, dx.channels, dbn);
            dx = p.convs[i].backward(&c.cols, c.in_time, &dy, &mut grads.convs[i]);
        }
        Ok(grads)
    }

    /// Fold the batch statistics of a training forward pass into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (bn, c) in self.params.conv_norms.iter_mut().zip(&cache.convs) {
            bn.update_running(&c.bn);
        }
        if let Some(g) = &mut self.params.head_gamma {
            for (block, c) in g.blocks.iter_mut().zip(&cache.head_gamma) {
                if let Some(bn) = &c.bn {
                    block.norm.update_running(bn);
                }
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Per-layer trainable counts laid out like the architecture table.
    pub fn parameter_table(&self) -> ParameterTable {
        let cfg = &self.config;
        let p = &self.params;
        let mut rows = Vec::new();
        let mut row = |block: &str, layer: String, details: String, params: usize| {
            rows.push(LayerCount {
                block: block.into(),
                layer,
                details,
                params,
            })
        };
        for (c, bn) in p.convs.iter().zip(&p.conv_norms) {
            row(
                "Shared Trunk",
                format!("Conv1D ({}→{})", c.in_channels, c.out_channels),
                format!("Kernel={}, Stride={}", c.kernel, c.stride),
                c.num_params(),
            );
            row("Shared Trunk", format!("BN ({})", bn.channels), "BatchNorm1d".into(), bn.num_params());
        }
        row("Shared Trunk", "Attention".into(), "Mean + Softmax".into(), 0);
        for (i, l) in p.lstms.iter().enumerate() {
            row(
                "Shared Trunk",
                format!("LSTM ({}→{})", l.input, l.hidden),
                format!("layer {}", i + 1),
                l.num_params(),
            );
        }
        row("Shared Feature", "Extract".into(), "x[:, -1, :]".into(), 0);
        if let Some(l) = &p.head_p {
            row("Head p", format!("FC({}→{})", l.in_dim, l.out_dim), "Regression".into(), l.num_params());
        }
        if let Some(ls) = &p.head_r {
            let last = ls.len() - 1;
            for (i, l) in ls.iter().enumerate() {
                let detail = if i < last { "ReLU" } else { "Output" };
                row("Head R", format!("FC({}→{})", l.in_dim, l.out_dim), detail.into(), l.num_params());
            }
        }
        if let Some(g) = &p.head_gamma {
            for (i, b) in g.blocks.iter().enumerate() {
                row(
                    "Head Γ",
                    format!("FC({}→{})+BN", b.fc.in_dim, b.fc.out_dim),
                    format!("ReLU, BN({})", b.norm.channels),
                    b.fc.num_params() + b.norm.num_params(),
                );
                if i == 0 && cfg.dropout > 0.0 {
                    row("Head Γ", "Dropout".into(), format!("p={}", cfg.dropout), 0);
                }
            }
            row(
                "Head Γ",
                format!("FC({}→C)", g.out.in_dim),
                format!("C = {} classes", g.out.out_dim),
                g.out.num_params(),
            );
        }
        ParameterTable { rows }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

impl Estimator for Model {
    fn heads(&self) -> Heads {
        self.config.heads
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn infer(&self, features: &[f64], batch: usize) -> Result<ModelOutput> {
        Ok(self.forward(features, batch, Mode::Eval)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub block: String,
    pub layer: String,
    pub details: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    pub rows: Vec<LayerCount>,
}

impl ParameterTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn block_total(&self, prefix: &str) -> usize {
        self.rows.iter().filter(|r| r.block.starts_with(prefix)).map(|r| r.params).sum()
    }

    pub fn trunk(&self) -> usize {
        self.block_total("Shared")
    }
}

impl fmt::Display for ParameterTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<15} {:<18} {:<22} {:>8}", "Block", "Layer", "Details", "Params")?;
        for r in &self.rows {
            writeln!(f, "{:<15} {:<18} {:<22} {:>8}", r.block, r.layer, r.details, r.params)?;
        }
        write!(f, "{:<15} {:<18} {:<22} {:>8}", "Total", "", "", self.total())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn batch_input(batch: usize, len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        layers::uniform_init(&mut rng, batch * len, 2.0)
    }

    #[test]
    fn table_rows_match_reference_counts() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        let counts: Vec<usize> = m.parameter_table().rows.iter().map(|r| r.params).collect();
        assert_eq!(
            counts,
            vec![288, 64, 8256, 128, 32896, 256, 0, 49_664, 33_280, 0, 65, 4160, 2080, 33, 4288, 0, 2144, 132]
        );
        let table = m.parameter_table();
        assert_eq!(table.total(), m.num_trainable());
        assert_eq!(table.trunk(), 124_832);
        assert_eq!(table.total(), 137_734);
    }

    #[test]
    fn shape_chain() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.time_steps().unwrap(), vec![100, 47, 22, 10]);
        assert_eq!(cfg.channels(), vec![1, 32, 64, 128]);
        let m = Model::new(cfg, 3).unwrap();
        for batch in [1, 3] {
            let out = m.infer(&batch_input(batch, 100, 2), batch).unwrap();
            assert_eq!(out.p_hat.as_ref().unwrap().len(), batch);
            assert_eq!(out.r_hat.as_ref().unwrap().len(), batch);
            assert_eq!(out.gamma_logits.as_ref().unwrap().len(), batch * 4);
        }
        assert!(m.infer(&[0.0; 99], 1).is_err());
    }

    #[test]
    fn attention_weights_normalised() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let (_, cache) = m.forward(&batch_input(5, 100, 4), 5, Mode::Train { dropout_seed: 1 }).unwrap();
        let w = cache.unwrap().attention;
        for row in w.chunks(10) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let x = batch_input(4, 100, 9);
        assert_eq!(m.infer(&x, 4).unwrap(), m.infer(&x, 4).unwrap());
        let a = m.forward(&x, 4, Mode::Train { dropout_seed: 5 }).unwrap().0;
        let b = m.forward(&x, 4, Mode::Train { dropout_seed: 5 }).unwrap().0;
        let c = m.forward(&x, 4, Mode::Train { dropout_seed: 6 }).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a.gamma_logits, c.gamma_logits);
        assert_eq!(a.p_hat, c.p_hat);
    }

    #[test]
    fn heads_share_the_trunk_only() {
        let mut m = Model::new(ModelConfig::default(), 3).unwrap();
        let x = batch_input(3, 100, 9);
        let before = m.infer(&x, 3).unwrap();
        for l in m.params.head_r.as_mut().unwrap() {
            l.weight.iter_mut().for_each(|w| *w += 0.5);
        }
        let after = m.infer(&x, 3).unwrap();
        assert_eq!(before.p_hat, after.p_hat);
        assert_eq!(before.gamma_logits, after.gamma_logits);
        assert_ne!(before.r_hat, after.r_hat);
    }

    #[test]
    fn stl_variants_partition_heads() {
        let cfg = ModelConfig::default();
        let mtl = Model::new(cfg.clone(), 1).unwrap();
        let trunk = mtl.parameter_table().trunk();
        let heads: Vec<usize> = Task::ALL
            .iter()
            .map(|&t| Model::build_stl(t, &cfg, 1).unwrap().num_trainable() - trunk)
            .collect();
        assert_eq!(heads, vec![65, 4160 + 2080 + 33, 4288 + 2144 + 132]);
        assert_eq!(heads.iter().sum::<usize>() + trunk, mtl.num_trainable());
        let stl = Model::build_stl(Task::P, &cfg, 1).unwrap();
        assert_eq!(stl.params.convs, mtl.params.convs);
        assert_eq!(stl.params.lstms, mtl.params.lstms);
        assert!("delta".parse::<Task>().is_err());
        assert_eq!("Gamma".parse::<Task>().unwrap(), Task::Gamma);
    }

    #[test]
    fn running_stats_move_only_on_update() {
        let mut m = Model::new(ModelConfig::default(), 3).unwrap();
        let x = batch_input(4, 100, 9);
        let (_, cache) = m.forward(&x, 4, Mode::Train { dropout_seed: 5 }).unwrap();
        assert_eq!(m.params.conv_norms[0].running_mean, vec![0.0; 32]);
        m.update_running_stats(&cache.unwrap());
        assert_ne!(m.params.conv_norms[0].running_mean, vec![0.0; 32]);
        assert_ne!(m.params.head_gamma.as_ref().unwrap().blocks[1].norm.running_var, vec![1.0; 32]);
    }
}
