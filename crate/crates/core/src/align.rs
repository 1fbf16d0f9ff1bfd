//! Alignment phase: pre-train the encoders on expert versus random
//! trajectories before any agent exists.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::config::{AlignConfig, LossConfig};
use crate::env::mix_seed;
use crate::error::{contract_err, Result};
use crate::losses::{total_loss, BatchPlan, LossReport};
use crate::nets::EncoderBundle;
use crate::tensor::{Adam, AdamConfig, Graph, Mode, Module, Scalar};
use crate::vision::LabSequence;
use crate::Rng;

/// First `(1 - holdout)` of the indices train, the rest is held out.
pub fn split_indices(n: usize, holdout: f64) -> (Vec<usize>, Vec<usize>) {
    let held = libm::round(n as f64 * holdout) as usize;
    let cut = n - held.min(n);
    ((0..cut).collect(), (cut..n).collect())
}

/// `count` distinct indices below `n`, or with replacement when `n < count`.
pub fn sample_indices(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    if count <= n {
        rand::seq::index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// One optimisation step of the full objective on a sampled batch.
///
/// Without an optimiser (zero learning rate) the loss is still evaluated,
/// including batch-norm statistics updates.
#[allow(clippy::too_many_arguments)]
pub fn encoder_step<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    opt: Option<&mut Adam<T>>,
    first: &[&LabSequence],
    second: &[&LabSequence],
    loss: &LossConfig,
    rng: &mut Rng,
) -> Result<LossReport> {
    let frames = first[0].frames;
    let plan = BatchPlan::sample(first.len(), second.len(), frames, loss, rng)?;
    let mut g = Graph::new();
    let terms = total_loss(&mut g, bundle, first, second, &plan, loss, Mode::Train)?;
    let report = terms.report(&g);
    if let Some(opt) = opt {
        g.backward(terms.total)?;
        bundle.collect_grads(&g);
        opt.step(&mut [bundle as &mut dyn Module<T>])?;
    }
    Ok(report)
}

/// Runs `cfg.n_pretrain` epochs, each one batch of `cfg.batch_pairs`
/// sequences per distribution. `observe` sees every epoch's report.
pub fn run_alignment<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    expert: &[LabSequence],
    random: &[LabSequence],
    cfg: &AlignConfig,
    loss: &LossConfig,
    observe: &mut dyn FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if expert.is_empty() || random.is_empty() {
        return Err(contract_err!("alignment needs expert and random trajectories"));
    }
    let (h, w, frames) = (expert[0].height, expert[0].width, expert[0].frames);
    if expert.iter().chain(random).any(|s| s.height != h || s.width != w || s.frames != frames) {
        return Err(contract_err!("all trajectories must share frame size and length"));
    }
    if h != bundle.cfg.frame_size || w != bundle.cfg.frame_size {
        return Err(contract_err!(
            "frames are {}x{}, the encoders expect {}",
            h,
            w,
            bundle.cfg.frame_size
        ));
    }
    let mut rng = crate::rng_from_seed(mix_seed(cfg.seed, 2));
    let mut opt = if cfg.lr > 0.0 {
        Some(Adam::new(AdamConfig::with_lr(cfg.lr))?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(cfg.n_pretrain);
    for epoch in 0..cfg.n_pretrain {
        let ei = sample_indices(&mut rng, expert.len(), cfg.batch_pairs);
        let ri = sample_indices(&mut rng, random.len(), cfg.batch_pairs);
        let first: Vec<&LabSequence> = ei.iter().map(|&i| &expert[i]).collect();
        let second: Vec<&LabSequence> = ri.iter().map(|&i| &random[i]).collect();
        let report = encoder_step(bundle, opt.as_mut(), &first, &second, loss, &mut rng)?;
        observe(epoch, &report);
        reports.push(report);
    }
    Ok(reports)
}

/// Eval-mode sequence embeddings.
pub fn embed_all<T: Scalar>(bundle: &mut EncoderBundle<T>, seqs: &[&LabSequence]) -> Result<Vec<Vec<f64>>> {
    seqs.iter()
        .map(|s| Ok(bundle.embed_views(s)?.1.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Probability that a random positive scores below a random negative;
/// ties count one half.
pub fn auc_lower_is_positive(positive: &[f64], negative: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            if p < n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

/// Scores each held-out trajectory by the distance of its embedding to the
/// mean calibration expert embedding and returns the expert-vs-random AUC.
pub fn separation_score<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    calibration: &[&LabSequence],
    expert: &[&LabSequence],
    random: &[&LabSequence],
) -> Result<f64> {
    if expert.len() < 2 || random.len() < 2 || calibration.is_empty() {
        return Err(contract_err!(
            "separation needs at least 2 trajectories per set, got {} and {}",
            expert.len(),
            random.len()
        ));
    }
    let calib = embed_all(bundle, calibration)?;
    let d = calib[0].len();
    let mut center = alloc::vec![0.0; d];
    for z in &calib {
        center.iter_mut().zip(z).for_each(|(c, v)| *c += v);
    }
    center.iter_mut().for_each(|c| *c /= calib.len() as f64);
    let score = |zs: Vec<Vec<f64>>| zs.iter().map(|z| euclid(z, &center)).collect::<Vec<_>>();
    let pos = score(embed_all(bundle, expert)?);
    let neg = score(embed_all(bundle, random)?);
    Ok(auc_lower_is_positive(&pos, &neg))
}
