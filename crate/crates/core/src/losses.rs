//! Training objectives.
//!
//! Frame terms: triplet (temporal metric), reconstruction, and the two-view
//! contrast between L and ab encodings. Sequence terms: predictive coding
//! against the demonstration's own states and the contrast between sequence
//! embeddings of the two trajectory distributions.
//!
//! Each term has a graph-level form used in training and, where it helps
//! testing, a formula-level form on plain rows.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nets::{EncoderBundle, ViewBatch};
use crate::tensor::{Graph, Mode, Scalar, Tensor, Var};
use crate::vision::LabSequence;
use crate::Rng;

/// `h(a, b) = exp(cos(a, b) / tau)`.
pub fn similarity_h(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("similarity of {} and {} entries", a.len(), b.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(alloc::format!("tau must be positive, got {tau}")));
    }
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(libm::exp(dot / (na * nb) / tau))
}

fn check_rows<T: Scalar>(g: &Graph<T>, vars: &[Var], what: &str) -> Result<(usize, usize)> {
    let s = g.shape(vars[0]).to_vec();
    if s.len() != 2 || vars.iter().any(|&v| g.shape(v) != s.as_slice()) {
        return Err(dim_err!("{}: operands must share a 2-D shape", what));
    }
    Ok((s[0], s[1]))
}

/// Row mean of `‖s − s_p‖² + max(ρ − ‖s − s_n‖², 0)`.
pub fn triplet<T: Scalar>(g: &mut Graph<T>, s: Var, sp: Var, sn: Var, rho: f64) -> Result<Var> {
    let (n, _) = check_rows(g, &[s, sp, sn], "triplet")?;
    if n == 0 {
        return Err(contract_err!("triplet loss over an empty batch"));
    }
    let dp = g.sub(s, sp)?;
    let dp = g.square(dp);
    let dp = g.sum_cols(dp)?;
    let dn = g.sub(s, sn)?;
    let dn = g.square(dn);
    let dn = g.sum_cols(dn)?;
    let margin = g.neg(dn);
    let margin = g.add_scalar(margin, T::lit(rho));
    let hinge = g.relu(margin);
    let per_row = g.add(dp, hinge)?;
    Ok(g.mean(per_row))
}

/// Mean squared error over every element.
pub fn ae<T: Scalar>(g: &mut Graph<T>, target: Var, reconstruction: Var) -> Result<Var> {
    let d = g.sub(reconstruction, target)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

/// `-mean_i log softmax_j(logits[i, j])[i]` for a square logit matrix.
fn diagonal_nll<T: Scalar>(g: &mut Graph<T>, logits: Var, n: usize) -> Result<Var> {
    let ls = g.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let picked = g.take(ls, &diag, &[n])?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Temperature-scaled cosine matrix `[rows(a), rows(b)]`.
fn cosine_logits<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let sim = g.matmul_nt(an, bn)?;
    Ok(g.scale(sim, T::lit(1.0 / tau)))
}

/// Symmetric two-view InfoNCE: row `i` of `l` pairs with row `i` of `ab`.
pub fn cmc<T: Scalar>(g: &mut Graph<T>, l: Var, ab: Var, tau: f64) -> Result<Var> {
    let (n, _) = check_rows(g, &[l, ab], "cmc")?;
    if n < 2 {
        return Err(contract_err!("two-view contrast needs a batch of at least 2, got {}", n));
    }
    let fwd = cosine_logits(g, l, ab, tau)?;
    let bwd = cosine_logits(g, ab, l, tau)?;
    let a = diagonal_nll(g, fwd, n)?;
    let b = diagonal_nll(g, bwd, n)?;
    let both = g.add(a, b)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// Negated mean log-probability of the true state among the states of
/// the same sequence.
///
/// `states` is `[B * frames, D]`, sequence-major. `preds[k]` is `[B, D]`
/// and predicts frame `first + k` of each sequence.
pub fn dpc_contrast<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var],
    states: Var,
    batch: usize,
    frames: usize,
    first: usize,
    tau: f64,
) -> Result<Var> {
    if preds.is_empty() {
        return Err(contract_err!("predictive coding needs at least one prediction"));
    }
    if first + preds.len() > frames {
        return Err(contract_err!(
            "predictions reach frame {} of a {}-frame sequence",
            first + preds.len() - 1,
            frames
        ));
    }
    if g.shape(states).len() != 2 || g.shape(states)[0] != batch * frames {
        return Err(dim_err!("states must be [{} * {}, D], got {:?}", batch, frames, g.shape(states)));
    }
    let total = batch * frames;
    let own: Vec<usize> = (0..batch)
        .flat_map(|b| (0..frames).map(move |j| b * total + b * frames + j))
        .collect();
    let mut terms = Vec::with_capacity(preds.len());
    for (k, &p) in preds.iter().enumerate() {
        if g.shape(p) != [batch, g.shape(states)[1]] {
            return Err(dim_err!("prediction {} has shape {:?}", k, g.shape(p)));
        }
        let logits = cosine_logits(g, p, states, tau)?;
        let logits = g.take(logits, &own, &[batch, frames])?;
        let ls = g.log_softmax_rows(logits)?;
        let target: Vec<usize> = (0..batch).map(|b| b * frames + first + k).collect();
        let picked = g.take(ls, &target, &[batch])?;
        terms.push(g.sum(picked));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::lit(-1.0 / (batch * preds.len()) as f64)))
}

/// One sequence-contrast instance: anchor, positive and negative rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contrast {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Mean over instances of `-log h(z, z_p) / (h(z, z_p) + Σ h(z, z_n))`,
/// with all vectors given as rows of `z`.
pub fn seq_contrast<T: Scalar>(g: &mut Graph<T>, z: Var, items: &[Contrast], tau: f64) -> Result<Var> {
    if items.is_empty() {
        return Err(contract_err!("sequence contrast without instances"));
    }
    let m = g.shape(z)[0];
    let k = items[0].negatives.len();
    if k == 0 {
        return Err(contract_err!("sequence contrast needs at least one negative"));
    }
    let mut idx = Vec::with_capacity(items.len() * (k + 1));
    for it in items {
        if it.negatives.len() != k {
            return Err(contract_err!("instances must share the negative count"));
        }
        idx.push(it.anchor * m + it.positive);
        idx.extend(it.negatives.iter().map(|&n| it.anchor * m + n));
    }
    let logits = cosine_logits(g, z, z, tau)?;
    let logits = g.take(logits, &idx, &[items.len(), k + 1])?;
    let ls = g.log_softmax_rows(logits)?;
    let first: Vec<usize> = (0..items.len()).map(|i| i * (k + 1)).collect();
    let picked = g.take(ls, &first, &[items.len()])?;
    let mean = g.mean(picked);
    Ok(g.neg(mean))
}

fn rows_tensor<T: Scalar>(rows: &[&[f64]]) -> Result<Tensor<T>> {
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(dim_err!("rows differ in length"));
    }
    let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::lit(x))).collect();
    Tensor::new(&[rows.len(), d], data)
}

/// Single-instance sequence contrast on plain vectors.
pub fn seq_contrast_loss(z: &[f64], zp: &[f64], zn: &[&[f64]], tau: f64) -> Result<f64> {
    if zn.is_empty() {
        return Err(contract_err!("sequence contrast needs at least one negative"));
    }
    let mut rows = vec![z, zp];
    rows.extend_from_slice(zn);
    let mut g = Graph::<f64>::inference();
    let v = g.constant(rows_tensor(&rows)?);
    let item = Contrast {
        anchor: 0,
        positive: 1,
        negatives: (2..rows.len()).collect(),
    };
    let out = seq_contrast(&mut g, v, &[item], tau)?;
    Ok(g.item(out))
}

/// Single-instance triplet loss on plain vectors.
pub fn triplet_loss(s: &[f64], sp: &[f64], sn: &[f64], rho: f64) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(rows_tensor(&[s])?);
    let p = g.constant(rows_tensor(&[sp])?);
    let n = g.constant(rows_tensor(&[sn])?);
    let out = triplet(&mut g, a, p, n, rho)?;
    Ok(g.item(out))
}

/// Two-view contrast on plain rows.
pub fn cmc_loss(l: &[&[f64]], ab: &[&[f64]], tau: f64) -> Result<f64> {
    if l.len() < 2 || l.len() != ab.len() {
        return Err(contract_err!("two-view contrast needs two equal batches of at least 2"));
    }
    let mut g = Graph::<f64>::inference();
    let a = g.constant(rows_tensor(l)?);
    let b = g.constant(rows_tensor(ab)?);
    let out = cmc(&mut g, a, b, tau)?;
    Ok(g.item(out))
}

/// Predictive coding of one sequence's states given precomputed predictions
/// for frames `first..first + preds.len()`.
pub fn dpc_contrast_loss(states: &[&[f64]], preds: &[&[f64]], first: usize, tau: f64) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let s = g.constant(rows_tensor(states)?);
    let p: Vec<Var> = preds
        .iter()
        .map(|r| rows_tensor(&[r]).map(|t| g.constant(t)))
        .collect::<Result<_>>()?;
    let out = dpc_contrast(&mut g, &p, s, 1, states.len(), first, tau)?;
    Ok(g.item(out))
}

/// Predictive coding through the bundle: encode `states[..context]`, roll
/// out `horizon` predictions and score them against `states`.
///
/// `states` is `[B * frames, D]`, sequence-major.
#[allow(clippy::too_many_arguments)]
pub fn dpc_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &EncoderBundle<T>,
    states: Var,
    batch: usize,
    frames: usize,
    context: usize,
    horizon: usize,
    tau: f64,
) -> Result<Var> {
    if context == 0 || context + horizon > frames {
        return Err(contract_err!(
            "context {} with horizon {} does not fit {} frames",
            context,
            horizon,
            frames
        ));
    }
    let mut carry = bundle.f.zero_carry(g, batch);
    let mut z = None;
    for t in 0..context {
        let rows: Vec<usize> = (0..batch).map(|b| b * frames + t).collect();
        let s_t = g.index_rows(states, &rows)?;
        z = Some(bundle.f.step(g, &mut carry, s_t)?);
    }
    let preds = bundle.rollout(g, &mut carry, z.expect("context >= 1"), horizon)?;
    dpc_contrast(g, &preds, states, batch, frames, context, tau)
}

/// Frame indices of one temporal triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Every random choice of one loss evaluation. Sequences are indexed with
/// the first distribution first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_first: usize,
    pub n_second: usize,
    pub frames: usize,
    /// Number of context states before the first prediction.
    pub context: usize,
    pub triplets: Vec<FrameTriplet>,
    pub contrasts: Vec<Contrast>,
}

fn pick<F: Fn(usize) -> bool>(frames: usize, ok: F, rng: &mut Rng) -> Option<usize> {
    let cands: Vec<usize> = (0..frames).filter(|&j| ok(j)).collect();
    if cands.is_empty() {
        None
    } else {
        Some(cands[rng.gen_range(0..cands.len())])
    }
}

impl BatchPlan {
    pub fn sample(n_first: usize, n_second: usize, frames: usize, cfg: &LossConfig, rng: &mut Rng) -> Result<Self> {
        if n_first < 2 || n_second < 2 {
            return Err(contract_err!(
                "need at least 2 sequences per distribution, got {} and {}",
                n_first,
                n_second
            ));
        }
        if frames < cfg.horizon + 1 {
            return Err(contract_err!("{} frames cannot fit horizon {}", frames, cfg.horizon));
        }
        let context = rng.gen_range(1..=frames - cfg.horizon);
        let far = ((frames - 1) / 4).max(1);
        let w = cfg.positive_window;
        let n = n_first + n_second;
        let mut triplets = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.gen_range(0..frames);
            let positive = pick(frames, |j| j != a && j.abs_diff(a) <= w, rng).unwrap_or(a);
            let negative = pick(frames, |j| j.abs_diff(a) >= far, rng)
                .unwrap_or(if a < frames / 2 { frames - 1 } else { 0 });
            triplets.push(FrameTriplet {
                anchor: a,
                positive,
                negative,
            });
        }
        let mut contrasts = Vec::with_capacity(n);
        for i in 0..n {
            let (own, other) = if i < n_first {
                (0..n_first, n_first..n)
            } else {
                (n_first..n, 0..n_first)
            };
            let mut positive = rng.gen_range(own.start..own.end - 1);
            if positive >= i {
                positive += 1;
            }
            let pool: Vec<usize> = other.collect();
            let negatives = if cfg.negatives <= pool.len() {
                rand::seq::index::sample(rng, pool.len(), cfg.negatives)
                    .into_iter()
                    .map(|j| pool[j])
                    .collect()
            } else {
                (0..cfg.negatives).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            contrasts.push(Contrast {
                anchor: i,
                positive,
                negatives,
            });
        }
        Ok(Self {
            n_first,
            n_second,
            frames,
            context,
            triplets,
            contrasts,
        })
    }

    pub fn sequences(&self) -> usize {
        self.n_first + self.n_second
    }
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_triplet: f64,
    pub l_ae: f64,
    pub l_s: f64,
    pub l_z: f64,
    pub l_o: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn from_parts(l_triplet: f64, l_ae: f64, l_s: f64, l_z: f64, l_o: f64) -> Self {
        Self {
            l_triplet,
            l_ae,
            l_s,
            l_z,
            l_o,
            l_total: l_triplet + l_ae + l_s + l_z + l_o,
        }
    }

    pub const COLUMNS: [&'static str; 6] = ["l_triplet", "l_ae", "l_s", "l_z", "l_o", "l_total"];

    pub fn values(&self) -> [f64; 6] {
        [self.l_triplet, self.l_ae, self.l_s, self.l_z, self.l_o, self.l_total]
    }
}

/// Graph handles of every term; `total` is the differentiable sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub triplet: Var,
    pub ae: Var,
    pub s: Var,
    pub z: Var,
    pub o: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport::from_parts(
            g.item(self.triplet).as_f64(),
            g.item(self.ae).as_f64(),
            g.item(self.s).as_f64(),
            g.item(self.z).as_f64(),
            g.item(self.o).as_f64(),
        )
    }
}

/// Evaluates every term on one batch of sequences.
///
/// `first` and `second` are the two trajectory distributions (expert and
/// non-expert). Encoders run in `mode`; alignment and fine-tuning use
/// [`Mode::Train`].
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &mut EncoderBundle<T>,
    first: &[&LabSequence],
    second: &[&LabSequence],
    plan: &BatchPlan,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<LossTerms> {
    cfg.validate()?;
    if first.len() != plan.n_first || second.len() != plan.n_second {
        return Err(contract_err!("batch does not match its plan"));
    }
    if first.len() < 2 || second.len() < 2 {
        return Err(contract_err!("need at least 2 sequences per distribution"));
    }
    let frames = plan.frames;
    let seqs: Vec<&LabSequence> = first.iter().chain(second).copied().collect();
    if seqs.iter().any(|s| s.frames != frames) {
        return Err(contract_err!("every sequence must hold {} frames", frames));
    }
    let batch = ViewBatch::<T>::from_sequences(&seqs)?;
    let enc = bundle.encode_views(g, &batch, mode)?;
    let n = seqs.len();

    let row = |i: usize, j: usize| i * frames + j;
    let anchors: Vec<usize> = plan.triplets.iter().enumerate().map(|(i, t)| row(i, t.anchor)).collect();
    let positives: Vec<usize> = plan.triplets.iter().enumerate().map(|(i, t)| row(i, t.positive)).collect();
    let negatives: Vec<usize> = plan.triplets.iter().enumerate().map(|(i, t)| row(i, t.negative)).collect();

    let sa = g.index_rows(enc.s, &anchors)?;
    let sp = g.index_rows(enc.s, &positives)?;
    let sn = g.index_rows(enc.s, &negatives)?;
    let l_triplet = triplet(g, sa, sp, sn, cfg.rho)?;

    let recon = bundle.decode_state(g, sa, mode)?;
    let target = g.constant(batch.stacked(&anchors));
    let l_ae = ae(g, target, recon)?;

    let la = g.index_rows(enc.l, &anchors)?;
    let aba = g.index_rows(enc.ab, &anchors)?;
    let l_s = cmc(g, la, aba, cfg.tau)?;

    // One recurrent pass serves both sequence terms: the carry after the
    // context branches into the rollout, the full pass gives each z.
    let mut carry = bundle.f.zero_carry(g, n);
    let mut branch = None;
    let mut z_ctx = None;
    let mut z_last = None;
    for t in 0..frames {
        let rows: Vec<usize> = (0..n).map(|i| row(i, t)).collect();
        let s_t = g.index_rows(enc.s, &rows)?;
        let z = bundle.f.step(g, &mut carry, s_t)?;
        if t + 1 == plan.context {
            branch = Some(carry.clone());
            z_ctx = Some(z);
        }
        z_last = Some(z);
    }
    let mut branch = branch.ok_or_else(|| contract_err!("context {} out of range", plan.context))?;
    let preds = bundle.rollout(g, &mut branch, z_ctx.expect("set with branch"), cfg.horizon)?;
    let l_z = dpc_contrast(g, &preds, enc.s, n, frames, plan.context, cfg.tau)?;
    let l_o = seq_contrast(g, z_last.expect("frames >= 1"), &plan.contrasts, cfg.tau)?;

    let mut total = g.add(l_triplet, l_ae)?;
    for t in [l_s, l_z, l_o] {
        total = g.add(total, t)?;
    }
    Ok(LossTerms {
        triplet: l_triplet,
        ae: l_ae,
        s: l_s,
        z: l_z,
        o: l_o,
        total,
    })
}
