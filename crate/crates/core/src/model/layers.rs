//! Layer kernels with explicit forward caches and reverse passes.
//!
//! Activations are channel-last: a sequence batch is stored as
//! `batch × time × channels`, row `(b, t)` at offset `(b·time + t)·channels`.
//! Backward functions accumulate parameter gradients into a zero-initialised
//! layer of the same shape and return the input gradient.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_column_sums, gemm};
use crate::rng::Rng;

/// A channel-last activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn new(batch: usize, time: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), batch * time * channels);
        Act {
            batch,
            time,
            channels,
            data,
        }
    }

    pub fn zeros(batch: usize, time: usize, channels: usize) -> Self {
        Self::new(batch, time, channels, vec![0.0; batch * time * channels])
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time
    }

    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.time + t) * self.channels;
        &self.data[o..o + self.channels]
    }
}

pub(crate) fn uniform_init(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Fully connected layer, `weight` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: uniform_init(rng, in_dim * out_dim, bound),
            bias: uniform_init(rng, out_dim, bound),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(rows, self.in_dim, self.out_dim, 1.0, x, false, &self.weight, true, 1.0, &mut y);
        y
    }

    pub fn backward(&self, x: &[f64], rows: usize, dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        gemm(self.out_dim, rows, self.in_dim, 1.0, dy, true, x, false, 1.0, &mut grad.weight);
        add_column_sums(dy, rows, self.out_dim, &mut grad.bias);
        let mut dx = vec![0.0; rows * self.in_dim];
        gemm(rows, self.out_dim, self.in_dim, 1.0, dy, false, &self.weight, false, 0.0, &mut dx);
        dx
    }
}

/// Valid (unpadded) 1-D convolution; `weight` stored `out × kernel × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_output_len(time: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    if time < kernel {
        return Err(Error::Shape(format!("sequence length {time} shorter than kernel {kernel}")));
    }
    Ok((time - kernel) / stride + 1)
}

impl Conv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: uniform_init(rng, out_channels * fan_in, bound),
            bias: uniform_init(rng, out_channels, bound),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv1d {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn window(&self) -> usize {
        self.kernel * self.in_channels
    }

    /// Returns the output and the unfolded input windows needed by `backward`.
    pub fn forward(&self, x: &Act) -> Result<(Act, Vec<f64>)> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let t_out = conv_output_len(x.time, self.kernel, self.stride)?;
        let w = self.window();
        let rows = x.batch * t_out;
        let mut cols = Vec::with_capacity(rows * w);
        for b in 0..x.batch {
            for t in 0..t_out {
                let start = (b * x.time + t * self.stride) * x.channels;
                cols.extend_from_slice(&x.data[start..start + w]);
            }
        }
        let mut y = Vec::with_capacity(rows * self.out_channels);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(rows, w, self.out_channels, 1.0, &cols, false, &self.weight, true, 1.0, &mut y);
        Ok((Act::new(x.batch, t_out, self.out_channels, y), cols))
    }

    pub fn backward(&self, cols: &[f64], input_time: usize, dy: &Act, grad: &mut Conv1d) -> Act {
        let w = self.window();
        let rows = dy.rows();
        gemm(self.out_channels, rows, w, 1.0, &dy.data, true, cols, false, 1.0, &mut grad.weight);
        add_column_sums(&dy.data, rows, self.out_channels, &mut grad.bias);
        let mut dcols = vec![0.0; rows * w];
        gemm(rows, self.out_channels, w, 1.0, &dy.data, false, &self.weight, false, 0.0, &mut dcols);
        let mut dx = Act::zeros(dy.batch, input_time, self.in_channels);
        for b in 0..dy.batch {
            for t in 0..dy.time {
                let start = (b * input_time + t * self.stride) * self.in_channels;
                let src = &dcols[(b * dy.time + t) * w..][..w];
                for (d, s) in dx.data[start..start + w].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalisation over all rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub rows: usize,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            channels,
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
        }
    }

    pub fn zeros_like(&self) -> Self {
        BatchNorm {
            scale: vec![0.0; self.channels],
            shift: vec![0.0; self.channels],
            running_mean: vec![0.0; self.channels],
            running_var: vec![0.0; self.channels],
            ..*self
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward_train(&self, x: &[f64]) -> Result<(Vec<f64>, BnCache)> {
        let c = self.channels;
        let rows = x.len() / c;
        if rows < 2 {
            return Err(Error::Shape(format!(
                "batch norm in training mode needs at least 2 values per channel, got {rows}"
            )));
        }
        let n = rows as f64;
        let mut mean = vec![0.0; c];
        add_column_sums(x, rows, c, &mut mean);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for row in x.chunks_exact(c) {
            for ((v, xv), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * inv_std[j];
                normalized.push(xh);
                y.push(self.scale[j] * xh + self.shift[j]);
            }
        }
        Ok((
            y,
            BnCache {
                normalized,
                inv_std,
                mean,
                var,
                rows,
            },
        ))
    }

    pub fn forward_eval(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let coef: Vec<(f64, f64)> = (0..c)
            .map(|j| {
                let a = self.scale[j] / (self.running_var[j] + self.eps).sqrt();
                (a, self.shift[j] - a * self.running_mean[j])
            })
            .collect();
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            y.extend(row.iter().zip(&coef).map(|(v, (a, b))| a * v + b));
        }
        y
    }

    /// Fold one batch's statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        let n = cache.rows as f64;
        let m = self.momentum;
        for j in 0..self.channels {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * cache.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * cache.var[j] * n / (n - 1.0);
        }
    }

    pub fn backward(&self, cache: &BnCache, dy: &[f64], grad: &mut BatchNorm) -> Vec<f64> {
        let c = self.channels;
        let n = cache.rows as f64;
        let mut sum_dxh = vec![0.0; c];
        let mut sum_dxh_xh = vec![0.0; c];
        for (dyr, xhr) in dy.chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
            for j in 0..c {
                grad.scale[j] += dyr[j] * xhr[j];
                grad.shift[j] += dyr[j];
                let dxh = dyr[j] * self.scale[j];
                sum_dxh[j] += dxh;
                sum_dxh_xh[j] += dxh * xhr[j];
            }
        }
        let mut dx = Vec::with_capacity(dy.len());
        for (dyr, xhr) in dy.chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
            for j in 0..c {
                let dxh = dyr[j] * self.scale[j];
                dx.push(cache.inv_std[j] / n * (n * dxh - sum_dxh[j] - xhr[j] * sum_dxh_xh[j]));
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &[f64], dy: &mut [f64]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Parameter-free temporal attention: scores are channel means, weights a
/// softmax over time, and every channel is rescaled by its step's weight.
pub fn attention_forward(x: &Act) -> (Act, Vec<f64>) {
    let (bsz, t, c) = (x.batch, x.time, x.channels);
    let mut weights = vec![0.0; bsz * t];
    for b in 0..bsz {
        let w = &mut weights[b * t..(b + 1) * t];
        for (s, wt) in w.iter_mut().enumerate() {
            *wt = x.at(b, s).iter().sum::<f64>() / c as f64;
        }
        softmax_inplace(w);
    }
    let mut out = x.data.clone();
    for (row, w) in out.chunks_exact_mut(c).zip(&weights) {
        row.iter_mut().for_each(|v| *v *= w);
    }
    (Act::new(bsz, t, c, out), weights)
}

pub fn attention_backward(x: &Act, weights: &[f64], dout: &Act) -> Act {
    let (bsz, t, c) = (x.batch, x.time, x.channels);
    let mut dx = Act::zeros(bsz, t, c);
    for b in 0..bsz {
        let w = &weights[b * t..(b + 1) * t];
        let dw: Vec<f64> = (0..t)
            .map(|s| x.at(b, s).iter().zip(dout.at(b, s)).map(|(a, d)| a * d).sum())
            .collect();
        let dot: f64 = w.iter().zip(&dw).map(|(a, d)| a * d).sum();
        for s in 0..t {
            let ds = w[s] * (dw[s] - dot) / c as f64;
            let o = (b * t + s) * c;
            for (j, d) in dx.data[o..o + c].iter_mut().enumerate() {
                *d = dout.data[o + j] * w[s] + ds;
            }
        }
    }
    dx
}

pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Final time step of every sequence, `batch × channels`.
pub fn take_last(x: &Act) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.batch * x.channels);
    for b in 0..x.batch {
        out.extend_from_slice(x.at(b, x.time - 1));
    }
    out
}

pub fn take_last_backward(batch: usize, time: usize, channels: usize, dz: &[f64]) -> Act {
    let mut dx = Act::zeros(batch, time, channels);
    for b in 0..batch {
        let o = (b * time + time - 1) * channels;
        dx.data[o..o + channels].copy_from_slice(&dz[b * channels..(b + 1) * channels]);
    }
    dx
}

/// Inverted-dropout mask: zero with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Central-difference derivative of `f` with respect to `x[i]`.
    fn fd<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, f: &mut F) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        uniform_init(&mut rng, n, 1.0)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_lengths_for_the_trunk() {
        assert_eq!(conv_output_len(100, 8, 2).unwrap(), 47);
        assert_eq!(conv_output_len(47, 4, 2).unwrap(), 22);
        assert_eq!(conv_output_len(22, 4, 2).unwrap(), 10);
        assert!(conv_output_len(3, 4, 2).is_err());
    }

    #[test]
    fn identity_kernel() {
        let mut rng = rng_from_seed(0);
        let mut conv = Conv1d::new(1, 1, 1, 1, &mut rng);
        conv.weight = vec![1.0];
        conv.bias = vec![0.0];
        let x = Act::new(2, 5, 1, random_vec(10, 1));
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_window_is_dot_product() {
        let mut rng = rng_from_seed(0);
        let mut conv = Conv1d::new(1, 1, 3, 2, &mut rng);
        conv.weight = vec![0.5, -1.0, 2.0];
        conv.bias = vec![0.25];
        let x = Act::new(1, 3, 1, vec![2.0, 3.0, -1.0]);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.time, 1);
        assert_eq!(y.data, vec![0.5 * 2.0 - 3.0 - 2.0 + 0.25]);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = rng_from_seed(3);
        let conv = Conv1d::new(2, 3, 3, 2, &mut rng);
        let x = Act::new(2, 9, 2, random_vec(36, 4));
        let (y, cols) = conv.forward(&x).unwrap();
        let r = random_vec(y.data.len(), 5);
        let mut g = conv.zeros_like();
        let dx = conv.backward(&cols, 9, &Act::new(y.batch, y.time, 3, r.clone()), &mut g);
        let mut f = |xv: &[f64]| dot(&conv.forward(&Act::new(2, 9, 2, xv.to_vec())).unwrap().0.data, &r);
        for i in 0..x.data.len() {
            assert!(rel_err(dx.data[i], fd(&x.data, i, 1e-5, &mut f)) < 1e-7);
        }
        let mut fw = |w: &[f64]| {
            let mut c = conv.clone();
            c.weight = w.to_vec();
            dot(&c.forward(&x).unwrap().0.data, &r)
        };
        for i in 0..conv.weight.len() {
            assert!(rel_err(g.weight[i], fd(&conv.weight, i, 1e-5, &mut fw)) < 1e-7);
        }
        let mut fb = |bv: &[f64]| {
            let mut c = conv.clone();
            c.bias = bv.to_vec();
            dot(&c.forward(&x).unwrap().0.data, &r)
        };
        for i in 0..conv.bias.len() {
            assert!(rel_err(g.bias[i], fd(&conv.bias, i, 1e-5, &mut fb)) < 1e-7);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = rng_from_seed(9);
        let lin = Linear::new(4, 3, &mut rng);
        let x = random_vec(20, 10);
        let r = random_vec(15, 11);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, 5, &r, &mut g);
        let mut f = |xv: &[f64]| dot(&lin.forward(xv, 5), &r);
        for i in 0..x.len() {
            assert!(rel_err(dx[i], fd(&x, i, 1e-5, &mut f)) < 1e-7);
        }
        let mut fw = |w: &[f64]| {
            let mut l = lin.clone();
            l.weight = w.to_vec();
            dot(&l.forward(&x, 5), &r)
        };
        for i in 0..lin.weight.len() {
            assert!(rel_err(g.weight[i], fd(&lin.weight, i, 1e-5, &mut fw)) < 1e-7);
        }
        for (j, gb) in g.bias.iter().enumerate() {
            let want: f64 = (0..5).map(|row| r[row * 3 + j]).sum();
            assert!((gb - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_statistics() {
        let bn = BatchNorm::new(3, 1e-5, 0.1);
        let x: Vec<f64> = random_vec(60, 2).iter().map(|v| 3.0 * v + 1.5).collect();
        let (y, cache) = bn.forward_train(&x).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = y.iter().skip(j).step_by(3).copied().collect();
            let m = col.iter().sum::<f64>() / 20.0;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let mut bn2 = bn.clone();
        bn2.update_running(&cache);
        assert!((bn2.running_mean[0] - 0.1 * cache.mean[0]).abs() < 1e-12);
        assert!(bn.forward_train(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn batchnorm_eval_with_unit_stats() {
        let bn = BatchNorm::new(2, 1e-5, 0.1);
        let x = vec![1.0, -2.0, 0.5, 4.0];
        let y = bn.forward_eval(&x);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b / (1.0 + 1e-5f64).sqrt()).abs() < 1e-15);
        }
        assert_eq!(bn.num_params(), 4);
        assert_eq!(BatchNorm::new(32, 1e-5, 0.1).num_params(), 64);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn = BatchNorm::new(2, 1e-5, 0.1);
        bn.scale = vec![1.3, -0.7];
        bn.shift = vec![0.2, 0.1];
        let x = random_vec(14, 21);
        let r = random_vec(14, 22);
        let (_, cache) = bn.forward_train(&x).unwrap();
        let mut g = bn.zeros_like();
        let dx = bn.backward(&cache, &r, &mut g);
        let mut f = |xv: &[f64]| dot(&bn.forward_train(xv).unwrap().0, &r);
        for i in 0..x.len() {
            assert!(rel_err(dx[i], fd(&x, i, 1e-5, &mut f)) < 1e-6, "{i}");
        }
        let mut fs = |s: &[f64]| {
            let mut b = bn.clone();
            b.scale = s.to_vec();
            dot(&b.forward_train(&x).unwrap().0, &r)
        };
        for i in 0..2 {
            assert!(rel_err(g.scale[i], fd(&bn.scale, i, 1e-5, &mut fs)) < 1e-7);
        }
    }

    #[test]
    fn attention_weights() {
        let x = Act::new(1, 3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let (_, w) = attention_forward(&x);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = Act::new(2, 1, 3, random_vec(6, 1));
        let (out, w) = attention_forward(&single);
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(out, single);
        let ln2 = 2f64.ln();
        let x = Act::new(1, 2, 2, vec![0.0, 0.0, ln2 - 0.3, ln2 + 0.3]);
        let (_, w) = attention_forward(&x);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_gradients() {
        let x = Act::new(2, 4, 3, random_vec(24, 31));
        let r = random_vec(24, 32);
        let (_, w) = attention_forward(&x);
        let dx = attention_backward(&x, &w, &Act::new(2, 4, 3, r.clone()));
        let mut f = |xv: &[f64]| dot(&attention_forward(&Act::new(2, 4, 3, xv.to_vec())).0.data, &r);
        for i in 0..24 {
            assert!(rel_err(dx.data[i], fd(&x.data, i, 1e-5, &mut f)) < 1e-7);
        }
    }

    #[test]
    fn last_step_projection() {
        let mut x = Act::new(2, 3, 2, random_vec(12, 5));
        x.data[4..6].copy_from_slice(&[7.0, 7.0]);
        x.data[10..12].copy_from_slice(&[7.0, 7.0]);
        assert_eq!(take_last(&x), vec![7.0; 4]);
        let before = take_last(&x);
        x.data[0] += 100.0;
        x.data[6] -= 3.0;
        assert_eq!(take_last(&x), before);
        let one = Act::new(1, 1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(take_last(&one), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dropout_scaling() {
        let mut rng = rng_from_seed(1);
        let m = dropout_mask(100_000, 0.4, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
        assert!((kept - 0.6).abs() < 0.01);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-15));
        assert_eq!(dropout_mask(3, 0.0, &mut rng), vec![1.0; 3]);
    }
}
