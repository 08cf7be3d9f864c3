use serde::{Deserialize, Serialize};

use super::layers::{uniform_init, Act};
use crate::error::{Error, Result};
use crate::linalg::{add_column_sums, gemm};
use crate::rng::Rng;

/// One LSTM layer with gate blocks ordered input, forget, candidate, output.
/// Weights are stored `4h × in` and `4h × h`; two bias vectors as in the
/// usual `4h(in + h) + 8h` parameterisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

pub struct LstmCache {
    x: Vec<f64>,
    batch: usize,
    time: usize,
    /// Activated gates, `time × batch × 4h`.
    gates: Vec<f64>,
    /// Cell states, `time × batch × h`.
    cells: Vec<f64>,
    /// Hidden states, `time × batch × h`.
    hiddens: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * hidden * (input + hidden) + 8 * hidden
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b_ih = uniform_init(rng, 4 * hidden, bound);
        let mut b_hh = uniform_init(rng, 4 * hidden, bound);
        b_ih[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        b_hh[hidden..2 * hidden].iter_mut().for_each(|b| *b = 0.0);
        Lstm {
            input,
            hidden,
            w_ih: uniform_init(rng, 4 * hidden * input, bound),
            w_hh: uniform_init(rng, 4 * hidden * hidden, bound),
            b_ih,
            b_hh,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Lstm {
            input: self.input,
            hidden: self.hidden,
            w_ih: vec![0.0; self.w_ih.len()],
            w_hh: vec![0.0; self.w_hh.len()],
            b_ih: vec![0.0; self.b_ih.len()],
            b_hh: vec![0.0; self.b_hh.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b_ih.len() + self.b_hh.len()
    }

    /// Run the recurrence from zero state and return every hidden state.
    pub fn forward(&self, x: &Act) -> Result<(Act, LstmCache)> {
        if x.channels != self.input {
            return Err(Error::Shape(format!(
                "LSTM expects {} input features, got {}",
                self.input, x.channels
            )));
        }
        if x.time == 0 {
            return Err(Error::Shape("LSTM input has no time steps".into()));
        }
        let (bsz, time, h) = (x.batch, x.time, self.hidden);
        let g4 = 4 * h;
        let rows = bsz * time;
        let mut gx = vec![0.0; rows * g4];
        gemm(rows, self.input, g4, 1.0, &x.data, false, &self.w_ih, true, 0.0, &mut gx);
        let bias: Vec<f64> = self.b_ih.iter().zip(&self.b_hh).map(|(a, b)| a + b).collect();

        let mut gates = vec![0.0; time * bsz * g4];
        let mut cells = vec![0.0; time * bsz * h];
        let mut hiddens = vec![0.0; time * bsz * h];
        let mut out = Act::zeros(bsz, time, h);
        for t in 0..time {
            let gt = &mut gates[t * bsz * g4..(t + 1) * bsz * g4];
            for b in 0..bsz {
                let src = &gx[(b * time + t) * g4..][..g4];
                for ((g, s), bb) in gt[b * g4..(b + 1) * g4].iter_mut().zip(src).zip(&bias) {
                    *g = s + bb;
                }
            }
            if t > 0 {
                let h_prev = &hiddens[(t - 1) * bsz * h..t * bsz * h];
                gemm(bsz, h, g4, 1.0, h_prev, false, &self.w_hh, true, 1.0, gt);
            }
            for b in 0..bsz {
                let g = &mut gt[b * g4..(b + 1) * g4];
                for k in 0..h {
                    g[k] = sigmoid(g[k]);
                    g[h + k] = sigmoid(g[h + k]);
                    g[2 * h + k] = g[2 * h + k].tanh();
                    g[3 * h + k] = sigmoid(g[3 * h + k]);
                }
                for k in 0..h {
                    let c_prev = if t > 0 { cells[((t - 1) * bsz + b) * h + k] } else { 0.0 };
                    let c = g[h + k] * c_prev + g[k] * g[2 * h + k];
                    let hv = g[3 * h + k] * c.tanh();
                    cells[(t * bsz + b) * h + k] = c;
                    hiddens[(t * bsz + b) * h + k] = hv;
                    out.data[(b * time + t) * h + k] = hv;
                }
            }
        }
        Ok((
            out,
            LstmCache {
                x: x.data.clone(),
                batch: bsz,
                time,
                gates,
                cells,
                hiddens,
            },
        ))
    }

    pub fn backward(&self, cache: &LstmCache, dout: &Act, grad: &mut Lstm) -> Act {
        let (bsz, time, h) = (cache.batch, cache.time, self.hidden);
        let g4 = 4 * h;
        let mut dgates_all = vec![0.0; bsz * time * g4];
        let mut dgates = vec![0.0; bsz * g4];
        let mut dh_next = vec![0.0; bsz * h];
        let mut dc_next = vec![0.0; bsz * h];
        for t in (0..time).rev() {
            for b in 0..bsz {
                let g = &cache.gates[(t * bsz + b) * g4..][..g4];
                let dg = &mut dgates[b * g4..(b + 1) * g4];
                for k in 0..h {
                    let (i, f, cand, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                    let c = cache.cells[(t * bsz + b) * h + k];
                    let c_prev = if t > 0 { cache.cells[((t - 1) * bsz + b) * h + k] } else { 0.0 };
                    let tc = c.tanh();
                    let dh = dout.data[(b * time + t) * h + k] + dh_next[b * h + k];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[b * h + k];
                    dc_next[b * h + k] = dc * f;
                    dg[k] = dc * cand * i * (1.0 - i);
                    dg[h + k] = dc * c_prev * f * (1.0 - f);
                    dg[2 * h + k] = dc * i * (1.0 - cand * cand);
                    dg[3 * h + k] = dh * tc * o * (1.0 - o);
                }
                dgates_all[(b * time + t) * g4..][..g4].copy_from_slice(dg);
            }
            if t > 0 {
                let h_prev = &cache.hiddens[(t - 1) * bsz * h..t * bsz * h];
                gemm(g4, bsz, h, 1.0, &dgates, true, h_prev, false, 1.0, &mut grad.w_hh);
                gemm(bsz, g4, h, 1.0, &dgates, false, &self.w_hh, false, 0.0, &mut dh_next);
            }
        }
        let rows = bsz * time;
        gemm(g4, rows, self.input, 1.0, &dgates_all, true, &cache.x, false, 1.0, &mut grad.w_ih);
        add_column_sums(&dgates_all, rows, g4, &mut grad.b_ih);
        add_column_sums(&dgates_all, rows, g4, &mut grad.b_hh);
        let mut dx = vec![0.0; rows * self.input];
        gemm(rows, g4, self.input, 1.0, &dgates_all, false, &self.w_ih, false, 0.0, &mut dx);
        Act::new(bsz, time, self.input, dx)
    }
}
