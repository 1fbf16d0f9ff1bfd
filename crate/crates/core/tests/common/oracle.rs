//! Plain-f64 reference formulas, written without the tensor engine.

use bootifol_core::nets::{EncoderBundle, Predictor, SequenceEncoder};
use bootifol_core::tensor::{Linear, LstmCell};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn h(a: &[f64], b: &[f64], tau: f64) -> f64 {
    (dot(a, b) / (norm(a) * norm(b)) / tau).exp()
}

pub fn triplet(s: &[f64], sp: &[f64], sn: &[f64], rho: f64) -> f64 {
    sq_dist(s, sp) + (rho - sq_dist(s, sn)).max(0.0)
}

pub fn seq_contrast(z: &[f64], zp: &[f64], zn: &[Vec<f64>], tau: f64) -> f64 {
    let pos = h(z, zp, tau);
    let neg: f64 = zn.iter().map(|n| h(z, n, tau)).sum();
    -(pos / (pos + neg)).ln()
}

/// Both directions of the two-view contrast, averaged.
pub fn cmc(l: &[Vec<f64>], ab: &[Vec<f64>], tau: f64) -> f64 {
    let n = l.len();
    let direction = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..n {
            let pos = h(&a[i], &b[i], tau);
            let all: f64 = (0..n).map(|j| h(&a[i], &b[j], tau)).sum();
            acc -= (pos / all).ln();
        }
        acc / n as f64
    };
    0.5 * (direction(l, ab) + direction(ab, l))
}

/// `-(1/K) Σ_k log h(ŝ_k, s_{first+k}) / Σ_j h(ŝ_k, s_j)` for one sequence.
pub fn dpc_contrast(states: &[Vec<f64>], preds: &[Vec<f64>], first: usize, tau: f64) -> f64 {
    let mut acc = 0.0;
    for (k, p) in preds.iter().enumerate() {
        let t = first + k;
        let pos = h(p, &states[t], tau);
        let neg: f64 = (0..states.len()).filter(|&j| j != t).map(|j| h(p, &states[j], tau)).sum();
        acc += (pos / (pos + neg)).ln();
    }
    -acc / preds.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(lin: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (lin.inputs(), lin.outputs());
    assert_eq!(x.len(), n_in);
    let w = lin.weight.data();
    let mut y = lin.bias.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w[i * n_out + o];
        }
    }
    y
}

/// One cell update on single vectors; returns `(h', c')`.
pub fn lstm_cell(cell: &LstmCell<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = cell.hidden;
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let gates = affine(&cell.gates, &xh);
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hd + j]);
        let g = gates[2 * hd + j].tanh();
        let o = sigmoid(gates[3 * hd + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// Recurrent state of the reference sequence encoder.
#[derive(Clone)]
pub struct Lstm {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl Lstm {
    pub fn new(f: &SequenceEncoder<f64>) -> Self {
        let n = f.layers.len();
        Self {
            h: vec![vec![0.0; f.hidden()]; n],
            c: vec![vec![0.0; f.hidden()]; n],
        }
    }

    /// Feeds one state and returns `z`.
    pub fn step(&mut self, f: &SequenceEncoder<f64>, s: &[f64]) -> Vec<f64> {
        let mut x = s.to_vec();
        for (i, cell) in f.layers.iter().enumerate() {
            let (h, c) = lstm_cell(cell, &x, &self.h[i], &self.c[i]);
            self.h[i] = h.clone();
            self.c[i] = c;
            x = h;
        }
        affine(&f.head, &x)
    }
}

pub fn predictor(d: &Predictor<f64>, leak: f64, z: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = affine(&d.fc0, z).into_iter().map(|v| if v >= 0.0 { v } else { leak * v }).collect();
    affine(&d.fc1, &hidden)
}

/// Predictive coding of one state sequence, rolled out by hand.
pub fn dpc(bundle: &EncoderBundle<f64>, states: &[Vec<f64>], context: usize, horizon: usize, tau: f64) -> f64 {
    let mut lstm = Lstm::new(&bundle.f);
    let mut z = Vec::new();
    for s in &states[..context] {
        z = lstm.step(&bundle.f, s);
    }
    let mut preds = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let s_hat = predictor(&bundle.d, bundle.cfg.leak, &z);
        if k + 1 < horizon {
            z = lstm.step(&bundle.f, &s_hat);
        }
        preds.push(s_hat);
    }
    dpc_contrast(states, &preds, context, tau)
}
