#![allow(dead_code)]

use imn_core::model::{ConvSpec, Mode, Model, ModelConfig, ModelParams};
use imn_core::rng::rng_from_seed;
use imn_core::training::{joint_loss, LossSettings, NmseMode, TargetStats, Targets};
use rand::Rng;

pub const BATCH: usize = 4;
pub const STEP: f64 = 1e-4;
/// Central-difference roundoff is ~ε·|L|/h; gradients below `ROUNDOFF / h` are compared absolutely.
const ROUNDOFF: f64 = 1e-10;

/// conv 1→2 k=3, one LSTM layer of width 3, full heads, no dropout, T = 12.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        input_len: 12,
        input_channels: 1,
        convs: vec![ConvSpec {
            out_channels: 2,
            kernel: 3,
            stride: 1,
        }],
        lstm_hidden: 3,
        lstm_layers: 1,
        dropout: 0.0,
        ..Default::default()
    }
}

pub struct Problem {
    pub features: Vec<f64>,
    pub p: Vec<f64>,
    pub logr: Vec<f64>,
    pub classes: Vec<u8>,
    pub settings: LossSettings,
}

impl Problem {
    pub fn new(seed: u64, lambdas: [f64; 3]) -> Problem {
        let mut rng = rng_from_seed(seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.5..1.5)).collect() };
        let features = normal(BATCH * 12);
        let p = normal(BATCH);
        let logr = normal(BATCH);
        Problem {
            features,
            p,
            logr,
            classes: vec![0, 3, 1, 2],
            settings: LossSettings {
                lambdas,
                smoothing: 0.1,
                mode: NmseMode::Global,
                stats: TargetStats {
                    p_mean: 0.0,
                    p_var: 0.8,
                    logr_mean: 0.0,
                    logr_var: 1.3,
                },
            },
        }
    }

    fn targets(&self) -> Targets<'_> {
        Targets {
            p: &self.p,
            logr: &self.logr,
            classes: &self.classes,
        }
    }

    /// Training-mode joint loss; batch statistics make every example interact.
    pub fn loss(&self, model: &Model) -> f64 {
        let (out, _) = model.forward(&self.features, BATCH, Mode::Train { dropout_seed: 9 }).unwrap();
        joint_loss(&out, self.targets(), &self.settings).unwrap().0.joint
    }

    pub fn gradient(&self, model: &Model) -> ModelParams {
        let (out, cache) = model.forward(&self.features, BATCH, Mode::Train { dropout_seed: 9 }).unwrap();
        let (_, dout) = joint_loss(&out, self.targets(), &self.settings).unwrap();
        model.backward(&cache.unwrap(), &dout).unwrap()
    }
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences over every trainable scalar.
pub fn check(model: &Model, problem: &Problem) -> GradCheck {
    check_with_step(model, problem, STEP)
}

pub fn check_with_step(model: &Model, problem: &Problem, step: f64) -> GradCheck {
    let analytic = problem.gradient(model);
    let grads: Vec<(String, Vec<f64>)> = analytic
        .tensors(false)
        .into_iter()
        .map(|(n, v)| (n, v.clone()))
        .collect();
    let mut probe = model.clone();
    let mut result = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (t, (name, g)) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params.tensors_mut(false)[t].1[i];
            probe.params.tensors_mut(false)[t].1[i] = orig + step;
            let up = problem.loss(&probe);
            probe.params.tensors_mut(false)[t].1[i] = orig - step;
            let down = problem.loss(&probe);
            probe.params.tensors_mut(false)[t].1[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(g[i], numeric, ROUNDOFF / step);
            result.checked += 1;
            if e > result.max_rel {
                result.max_rel = e;
                result.worst = format!("{name}[{i}] analytic {:.6e} numeric {:.6e}", g[i], numeric);
            }
        }
    }
    result
}
