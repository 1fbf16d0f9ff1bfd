//! Gradient, formula and color suites. Each returns one record per check
//! so tests can assert on them and the acceptance run can report them.

use super::gradcheck::{check, Forward, GradCheck, NoParams};
use super::{micro_loss, micro_net, oracle, random_sequence, uniform, vector};
use bootifol_core::config::RunConfig;
use bootifol_core::losses::{self, BatchPlan, Contrast};
use bootifol_core::nets::{AgentNets, EncoderBundle, ImageDecoder, ImageEncoder, Predictor, SequenceEncoder};
use bootifol_core::rng_from_seed;
use bootifol_core::tensor::{
    lstm_step, BatchNorm, Conv2d, ConvTranspose2d, Graph, Linear, LstmCell, Mode, Module, Tensor, Var,
};
use bootifol_core::vision::{lab_to_srgb, srgb_to_lab, LabSequence};
use bootifol_core::{Result, Rng};
use rand::Rng as _;

/// Reduces any output to a scalar with fixed, uneven weights.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v: f64| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v }).collect();
    Tensor::new(&shape, data).expect("shape")
}

struct Suite {
    rng: Rng,
    out: Vec<GradCheck>,
}

impl Suite {
    fn t(&mut self, shape: &[usize]) -> Tensor<f64> {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        uniform(&mut self.rng, shape, 0.3, 2.0)
    }

    fn op(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: &mut Forward<NoParams>) {
        self.out.push(check(name, &mut NoParams, &inputs, f));
    }

    fn module<M: Module<f64>>(&mut self, name: &str, m: &mut M, inputs: Vec<Tensor<f64>>, f: &mut Forward<M>) {
        self.out.push(check(name, m, &inputs, f));
    }
}

macro_rules! unary {
    ($s:expr, $name:expr, $input:expr, |$g:ident, $x:ident| $body:expr) => {
        $s.op($name, vec![$input], &mut |$g, _, v| {
            let $x = v[0];
            let y = $body;
            probe($g, y)
        })
    };
}

fn ops(s: &mut Suite) {
    let (a, b) = (s.t(&[3, 4]), s.t(&[3, 4]));
    s.op("add", vec![a.clone(), b.clone()], &mut |g, _, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y)
    });
    s.op("sub", vec![a.clone(), b.clone()], &mut |g, _, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y)
    });
    s.op("mul", vec![a.clone(), b], &mut |g, _, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y)
    });
    unary!(s, "scale", a.clone(), |g, x| g.scale(x, 1.7));
    unary!(s, "add_scalar", a.clone(), |g, x| {
        let y = g.add_scalar(x, 0.3);
        g.square(y)
    });
    unary!(s, "neg", a.clone(), |g, x| g.neg(x));
    let x = away_from_zero(s.t(&[4, 5]));
    unary!(s, "leaky_relu", x.clone(), |g, x| g.leaky_relu(x, 0.2));
    unary!(s, "relu", x, |g, x| g.relu(x));
    let x = s.t(&[3, 5]);
    unary!(s, "sigmoid", x.clone(), |g, x| g.sigmoid(x));
    unary!(s, "tanh", x.clone(), |g, x| g.tanh(x));
    unary!(s, "exp", x.clone(), |g, x| g.exp(x));
    unary!(s, "square", x.clone(), |g, x| g.square(x));
    let p = s.positive(&[3, 5]);
    unary!(s, "log", p.clone(), |g, x| g.log(x));
    unary!(s, "sqrt", p, |g, x| g.sqrt(x));
    unary!(s, "sum", x.clone(), |g, x| {
        let y = g.sum(x);
        g.square(y)
    });
    unary!(s, "mean", x.clone(), |g, x| {
        let y = g.mean(x);
        g.square(y)
    });
    unary!(s, "sum_cols", x.clone(), |g, x| g.sum_cols(x)?);
    unary!(s, "row_norms", x.clone(), |g, x| g.row_norms(x)?);
    unary!(s, "reshape", x.clone(), |g, x| g.reshape(x, &[5, 3])?);
    unary!(s, "narrow_cols", x.clone(), |g, x| g.narrow_cols(x, 1, 3)?);
    unary!(s, "index_rows", x.clone(), |g, x| g.index_rows(x, &[2, 0, 2, 1])?);
    unary!(s, "take", x.clone(), |g, x| g.take(x, &[5, 1, 1, 14], &[2, 2])?);
    unary!(s, "l2_normalize_rows", x.clone(), |g, x| g.l2_normalize_rows(x)?);
    unary!(s, "log_softmax_rows", x.clone(), |g, x| g.log_softmax_rows(x)?);
    let (c1, c2) = (s.t(&[3, 2]), s.t(&[3, 4]));
    s.op("concat_cols", vec![c1, c2], &mut |g, _, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        probe(g, y)
    });
    let (r1, r2) = (s.t(&[2, 3]), s.t(&[4, 3]));
    s.op("concat_rows", vec![r1, r2], &mut |g, _, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        probe(g, y)
    });
    let (x2, b2) = (s.t(&[4, 3]), s.t(&[3]));
    s.op("bias_add rows", vec![x2, b2], &mut |g, _, v| {
        let y = g.bias_add(v[0], v[1])?;
        let y = g.square(y);
        probe(g, y)
    });
    let (x4, b4) = (s.t(&[2, 3, 2, 2]), s.t(&[3]));
    s.op("bias_add channels", vec![x4, b4], &mut |g, _, v| {
        let y = g.bias_add(v[0], v[1])?;
        let y = g.square(y);
        probe(g, y)
    });
    let (m1, m2, m3) = (s.t(&[3, 4]), s.t(&[4, 2]), s.t(&[2, 4]));
    s.op("matmul", vec![m1.clone(), m2], &mut |g, _, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y)
    });
    s.op("matmul_nt", vec![m1, m3], &mut |g, _, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        probe(g, y)
    });
    for (stride, pad) in [(1, 0), (2, 1), (1, 2), (3, 1)] {
        let (x, w) = (s.t(&[2, 2, 5, 5]), s.t(&[3, 2, 3, 3]));
        s.op(&format!("conv2d s{stride} p{pad}"), vec![x, w], &mut |g, _, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            probe(g, y)
        });
    }
    for (stride, op) in [(2, 0), (2, 1), (1, 0), (3, 2)] {
        let (x, w) = (s.t(&[2, 2, 3, 3]), s.t(&[2, 3, 3, 3]));
        s.op(&format!("conv_transpose2d s{stride} op{op}"), vec![x, w], &mut |g, _, v| {
            let y = g.conv_transpose2d(v[0], v[1], stride, op)?;
            probe(g, y)
        });
    }
    for shape in [vec![3usize, 2, 2, 2], vec![5, 3]] {
        let c = shape[1];
        let (x, gm, bt) = (s.t(&shape), s.positive(&[c]), s.t(&[c]));
        s.op(&format!("batch_norm_train {shape:?}"), vec![x, gm, bt], &mut |g, _, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe(g, y)
        });
    }
    let (x, gm, bt) = (s.t(&[3, 2, 2, 2]), s.positive(&[2]), s.t(&[2]));
    s.op("batch_norm_eval", vec![x, gm, bt], &mut |g, _, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 1.7], 1e-5)?;
        probe(g, y)
    });
}

fn modules(s: &mut Suite) {
    let mut lin = Linear::<f64>::new("lin", 4, 3, &mut s.rng);
    let x = s.t(&[2, 4]);
    s.module("Linear", &mut lin, vec![x], &mut |g, m, v| {
        let y = m.forward(g, v[0])?;
        probe(g, y)
    });
    let mut conv = Conv2d::<f64>::new("conv", 2, 3, 3, 2, 1, &mut s.rng).unwrap();
    let x = s.t(&[2, 2, 5, 5]);
    s.module("Conv2d", &mut conv, vec![x], &mut |g, m, v| {
        let y = m.forward(g, v[0])?;
        probe(g, y)
    });
    let mut deconv = ConvTranspose2d::<f64>::new("deconv", 3, 2, 3, 2, 1, &mut s.rng).unwrap();
    let x = s.t(&[2, 3, 2, 2]);
    s.module("ConvTranspose2d", &mut deconv, vec![x], &mut |g, m, v| {
        let y = m.forward(g, v[0])?;
        probe(g, y)
    });
    let mut bn = BatchNorm::<f64>::new("bn", 3, 0.1, 1e-5);
    bn.gamma.data_mut().copy_from_slice(&[0.7, 1.3, -0.4]);
    bn.beta.data_mut().copy_from_slice(&[0.1, -0.2, 0.5]);
    for mode in [Mode::Train, Mode::Eval] {
        let x = s.t(&[4, 3, 2, 2]);
        s.module(&format!("BatchNorm {mode:?}"), &mut bn, vec![x], &mut |g, m, v| {
            let y = m.forward(g, v[0], mode)?;
            probe(g, y)
        });
    }
    let mut cell = LstmCell::<f64>::new("cell", 3, 4, &mut s.rng);
    let (x, h, c) = (s.t(&[2, 3]), s.t(&[2, 4]), s.t(&[2, 4]));
    s.module("lstm_step", &mut cell, vec![x, h, c], &mut |g, m, v| {
        let (h2, c2) = lstm_step(g, m, v[0], v[1], v[2])?;
        let a = probe(g, h2)?;
        let c2 = g.scale(c2, 0.5);
        let b = probe(g, c2)?;
        g.add(a, b)
    });
    let cfg = micro_net();
    let mut f = SequenceEncoder::<f64>::new("f", &cfg, &mut s.rng);
    let states = s.t(&[3, 2, cfg.state_dim]);
    s.module("SequenceEncoder unroll", &mut f, vec![states], &mut |g, m, v| {
        let mut carry = m.zero_carry(g, 2);
        let flat = g.reshape(v[0], &[6, 4])?;
        let mut z = None;
        for t in 0..3 {
            let s_t = g.index_rows(flat, &[2 * t, 2 * t + 1])?;
            z = Some(m.step(g, &mut carry, s_t)?);
        }
        probe(g, z.unwrap())
    });
    let mut d = Predictor::<f64>::new("d", &cfg, &mut s.rng);
    let z = s.t(&[3, cfg.embed_dim]);
    s.module("Predictor", &mut d, vec![z], &mut |g, m, v| {
        let y = m.forward(g, v[0])?;
        probe(g, y)
    });
    let mut enc = ImageEncoder::<f64>::new("g", 2, 2, &cfg, &mut s.rng).unwrap();
    let x = s.t(&[5, 2, 4, 4]);
    s.module("ImageEncoder", &mut enc, vec![x], &mut |g, m, v| {
        let y = m.forward(g, v[0], Mode::Train)?;
        probe(g, y)
    });
    let mut dec = ImageDecoder::<f64>::new("q", &cfg, &mut s.rng).unwrap();
    let x = s.t(&[3, cfg.state_dim]);
    s.module("ImageDecoder", &mut dec, vec![x], &mut |g, m, v| {
        let y = m.forward(g, v[0], Mode::Train)?;
        probe(g, y)
    });
    let mut ac = RunConfig::desk().agent;
    (ac.frame_stack, ac.conv_filters, ac.feature_dim, ac.hidden) = (1, 2, 3, 4);
    let mut agent = AgentNets::<f64>::new(7, 2, &ac, &mut s.rng).unwrap();
    let obs = s.t(&[2, 3, 7, 7]);
    s.module("AgentNets", &mut agent, vec![obs], &mut |g, m, v| {
        let h = m.features(g, v[0])?;
        let a = m.act(g, h)?;
        let (q1, q2) = m.critic.forward(g, h, a)?;
        let y = g.concat_cols(&[a, q1, q2])?;
        probe(g, y)
    });
}

fn loss_terms(s: &mut Suite) {
    let (a, p, n) = (s.t(&[6, 3]), s.t(&[6, 3]), s.t(&[6, 3]));
    s.op("triplet", vec![a, p, n], &mut |g, _, v| losses::triplet(g, v[0], v[1], v[2], 2.0));
    let (tgt, rec) = (s.t(&[2, 3, 4, 4]), s.t(&[2, 3, 4, 4]));
    s.op("ae", vec![tgt, rec], &mut |g, _, v| losses::ae(g, v[0], v[1]));
    let (l, ab) = (s.t(&[4, 3]), s.t(&[4, 3]));
    s.op("cmc", vec![l, ab], &mut |g, _, v| losses::cmc(g, v[0], v[1], 0.5));
    let (p0, p1, states) = (s.t(&[2, 3]), s.t(&[2, 3]), s.t(&[8, 3]));
    s.op("dpc_contrast", vec![p0, p1, states], &mut |g, _, v| {
        losses::dpc_contrast(g, &[v[0], v[1]], v[2], 2, 4, 1, 0.5)
    });
    let z = s.t(&[6, 3]);
    let items = vec![
        Contrast { anchor: 0, positive: 1, negatives: vec![3, 4] },
        Contrast { anchor: 4, positive: 5, negatives: vec![0, 2] },
        Contrast { anchor: 2, positive: 0, negatives: vec![5, 5] },
    ];
    s.op("seq_contrast", vec![z], &mut |g, _, v| losses::seq_contrast(g, v[0], &items, 0.5));

    let cfg = micro_net();
    let mut bundle = EncoderBundle::<f64>::new(&cfg, &mut s.rng).unwrap();
    let states = s.t(&[2 * 5, cfg.state_dim]);
    s.module("dpc_loss", &mut bundle, vec![states], &mut |g, m, v| {
        losses::dpc_loss(g, m, v[0], 2, 5, 2, 3, 0.5)
    });
    for (frames, horizon) in [(2, 1), (4, 2)] {
        let first: Vec<LabSequence> = (0..3).map(|_| random_sequence(&mut s.rng, 4, frames)).collect();
        let second: Vec<LabSequence> = (0..3).map(|_| random_sequence(&mut s.rng, 4, frames)).collect();
        let lc = micro_loss(horizon);
        let plan = BatchPlan::sample(3, 3, frames, &lc, &mut s.rng).unwrap();
        let (fr, sr): (Vec<&LabSequence>, Vec<&LabSequence>) = (first.iter().collect(), second.iter().collect());
        let mut bundle = EncoderBundle::<f64>::new(&cfg, &mut s.rng).unwrap();
        s.module(&format!("total_loss {frames} frames K={horizon}"), &mut bundle, vec![], &mut |g, m, _| {
            Ok(losses::total_loss(g, m, &fr, &sr, &plan, &lc, Mode::Train)?.total)
        });
    }
}

/// Every differentiable operation, module and loss against central differences.
pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let mut s = Suite {
        rng: rng_from_seed(seed),
        out: Vec::new(),
    };
    ops(&mut s);
    modules(&mut s);
    loss_terms(&mut s);
    s.out
}

/// Largest deviation of one formula-level loss from its oracle.
#[derive(Debug, Clone)]
pub struct FormulaCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs: f64,
}

fn tau(rng: &mut Rng) -> f64 {
    if rng.gen_bool(0.25) {
        0.07
    } else {
        rng.gen_range(0.05..1.0)
    }
}

/// Random micro instances of each formula-level loss against the oracle.
pub fn formula_suite(seed: u64, instances: usize) -> Vec<FormulaCheck> {
    let mut rng = rng_from_seed(seed);
    let mut record = |name, f: &mut dyn FnMut(&mut Rng) -> (f64, f64)| {
        let mut max_abs: f64 = 0.0;
        for _ in 0..instances {
            let (got, want) = f(&mut rng);
            max_abs = max_abs.max((got - want).abs());
        }
        FormulaCheck { name, instances, max_abs }
    };
    let mut out = Vec::new();
    out.push(record("triplet_loss", &mut |r| {
        let d = r.gen_range(1..9);
        let (s, p, n) = (vector(r, d), vector(r, d), vector(r, d));
        let rho = r.gen_range(0.1..3.0);
        (losses::triplet_loss(&s, &p, &n, rho).unwrap(), oracle::triplet(&s, &p, &n, rho))
    }));
    out.push(record("seq_contrast_loss", &mut |r| {
        let (d, k, t) = (r.gen_range(2..9), r.gen_range(1..9), tau(r));
        let (z, zp) = (vector(r, d), vector(r, d));
        let zn: Vec<Vec<f64>> = (0..k).map(|_| vector(r, d)).collect();
        let refs: Vec<&[f64]> = zn.iter().map(|v| v.as_slice()).collect();
        (losses::seq_contrast_loss(&z, &zp, &refs, t).unwrap(), oracle::seq_contrast(&z, &zp, &zn, t))
    }));
    out.push(record("cmc_loss", &mut |r| {
        let (d, n, t) = (r.gen_range(2..9), r.gen_range(2..7), tau(r));
        let l: Vec<Vec<f64>> = (0..n).map(|_| vector(r, d)).collect();
        let ab: Vec<Vec<f64>> = (0..n).map(|_| vector(r, d)).collect();
        let (lr, abr): (Vec<&[f64]>, Vec<&[f64]>) = (l.iter().map(|v| &v[..]).collect(), ab.iter().map(|v| &v[..]).collect());
        (losses::cmc_loss(&lr, &abr, t).unwrap(), oracle::cmc(&l, &ab, t))
    }));
    out.push(record("dpc_contrast_loss", &mut |r| {
        let (d, frames, t) = (r.gen_range(2..7), r.gen_range(2..7), tau(r));
        let first = r.gen_range(1..frames);
        let k = r.gen_range(1..=frames - first);
        let states: Vec<Vec<f64>> = (0..frames).map(|_| vector(r, d)).collect();
        let preds: Vec<Vec<f64>> = (0..k).map(|_| vector(r, d)).collect();
        let (sr, pr): (Vec<&[f64]>, Vec<&[f64]>) = (states.iter().map(|v| &v[..]).collect(), preds.iter().map(|v| &v[..]).collect());
        (losses::dpc_contrast_loss(&sr, &pr, first, t).unwrap(), oracle::dpc_contrast(&states, &preds, first, t))
    }));
    out.push(record("dpc_loss", &mut |r| {
        let mut cfg = micro_net();
        cfg.lstm_layers = r.gen_range(1..3);
        cfg.lstm_hidden = r.gen_range(2..5);
        cfg.embed_dim = r.gen_range(2..5);
        cfg.state_dim = 2 * r.gen_range(1..4);
        let bundle = EncoderBundle::<f64>::new(&cfg, r).unwrap();
        let (batch, frames, t) = (r.gen_range(1..4), r.gen_range(2..7), tau(r));
        let context = r.gen_range(1..frames);
        let horizon = r.gen_range(1..=frames - context);
        let seqs: Vec<Vec<Vec<f64>>> =
            (0..batch).map(|_| (0..frames).map(|_| vector(r, cfg.state_dim)).collect()).collect();
        let flat: Vec<f64> = seqs.iter().flatten().flatten().copied().collect();
        let mut g = Graph::<f64>::inference();
        let sv = g.constant(Tensor::new(&[batch * frames, cfg.state_dim], flat).unwrap());
        let got = losses::dpc_loss(&mut g, &bundle, sv, batch, frames, context, horizon, t).unwrap();
        let want = seqs.iter().map(|s| oracle::dpc(&bundle, s, context, horizon, t)).sum::<f64>() / batch as f64;
        (g.item(got), want)
    }));
    out
}

/// Round-trip and reference-value checks of the color conversion.
#[derive(Debug, Clone)]
pub struct ColorCheck {
    pub samples: usize,
    /// Largest per-channel byte error over the random colors.
    pub max_round_trip: u8,
    /// Grays (including black and white) that fail to round-trip or have
    /// nonzero chroma.
    pub gray_failures: usize,
    /// Largest deviation of white's and black's lightness from 100 and 0.
    pub endpoint_error: f64,
    /// Largest deviation from published primaries' Lab values.
    pub reference_error: f64,
}

/// Lab values of the sRGB primaries under D65.
const PRIMARIES: [([u8; 3], [f64; 3]); 3] = [
    ([255, 0, 0], [53.2408, 80.0925, 67.2032]),
    ([0, 255, 0], [87.7347, -86.1827, 83.1793]),
    ([0, 0, 255], [32.2970, 79.1875, -107.8602]),
];

pub fn color_suite(seed: u64, samples: usize) -> ColorCheck {
    let mut rng = rng_from_seed(seed);
    let mut max_round_trip = 0u8;
    for _ in 0..samples {
        let c: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let back = lab_to_srgb(srgb_to_lab(c));
        for i in 0..3 {
            max_round_trip = max_round_trip.max(c[i].abs_diff(back[i]));
        }
    }
    let gray_failures = (0..=255u8)
        .filter(|&v| {
            let lab = srgb_to_lab([v; 3]);
            lab[1] != 0.0 || lab[2] != 0.0 || lab_to_srgb(lab) != [v; 3]
        })
        .count();
    let endpoint_error = (srgb_to_lab([255; 3])[0] - 100.0).abs().max(srgb_to_lab([0; 3])[0].abs());
    let reference_error = PRIMARIES
        .iter()
        .flat_map(|(rgb, lab)| {
            let got = srgb_to_lab(*rgb);
            (0..3).map(move |i| (got[i] - lab[i]).abs())
        })
        .fold(0.0, f64::max);
    ColorCheck {
        samples,
        max_round_trip,
        gray_failures,
        endpoint_error,
        reference_error,
    }
}
