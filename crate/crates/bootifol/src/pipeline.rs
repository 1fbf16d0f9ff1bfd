//! Dataset-level entry points shared by the CLI and the acceptance suite.

use bootifol_core::align::{run_alignment, separation_score, split_indices};
use bootifol_core::config::RunConfig;
use bootifol_core::env::{mix_seed, Dataset, ACTION_DIM};
use bootifol_core::interact::{run_interactive, EpisodeMetrics, EvalReport};
use bootifol_core::losses::LossReport;
use bootifol_core::nets::{AgentNets, EncoderBundle};
use bootifol_core::vision::LabSequence;
use bootifol_core::{rng_from_seed, Error as CoreError};

use crate::error::Result;

pub fn lab_sequences(ds: &Dataset) -> Result<Vec<LabSequence>> {
    Ok(ds
        .trajectories
        .iter()
        .map(|t| LabSequence::from_frames(&t.frames))
        .collect::<bootifol_core::Result<_>>()?)
}

/// Checks that a dataset matches the environment and frame geometry of `cfg`.
pub fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.frame_size != cfg.net.frame_size {
        return Err(CoreError::Contract(format!(
            "dataset frames are {0}x{0}, the configuration expects {1}x{1}",
            ds.frame_size, cfg.net.frame_size
        ))
        .into());
    }
    if ds.trajectories.is_empty() {
        return Err(CoreError::Contract("dataset is empty".into()).into());
    }
    Ok(())
}

/// Points the environment section of `cfg` at the dataset's task.
pub fn adopt_dataset(cfg: &mut RunConfig, ds: &Dataset) -> Result<()> {
    check_dataset(cfg, ds)?;
    cfg.env.env = ds.env;
    cfg.env.episode_len = ds.episode_len;
    Ok(())
}

/// Train and held-out Lab sequences of both distributions.
pub struct AlignInputs {
    pub expert_train: Vec<LabSequence>,
    pub expert_held: Vec<LabSequence>,
    pub random_train: Vec<LabSequence>,
    pub random_held: Vec<LabSequence>,
}

impl AlignInputs {
    pub fn new(cfg: &RunConfig, expert: &Dataset, random: &Dataset) -> Result<Self> {
        check_dataset(cfg, expert)?;
        check_dataset(cfg, random)?;
        if expert.env != random.env || expert.episode_len != random.episode_len {
            return Err(CoreError::Contract(format!(
                "expert data is {} with T={}, random data is {} with T={}",
                expert.env, expert.episode_len, random.env, random.episode_len
            ))
            .into());
        }
        let (expert_train, expert_held) = split(lab_sequences(expert)?, cfg.align.holdout);
        let (random_train, random_held) = split(lab_sequences(random)?, cfg.align.holdout);
        Ok(Self {
            expert_train,
            expert_held,
            random_train,
            random_held,
        })
    }

    /// Held-out AUC, calibrated on the training experts.
    pub fn separation(&self, bundle: &mut EncoderBundle) -> Result<f64> {
        Ok(separation_score(
            bundle,
            &refs(&self.expert_train),
            &refs(&self.expert_held),
            &refs(&self.random_held),
        )?)
    }
}

fn refs(v: &[LabSequence]) -> Vec<&LabSequence> {
    v.iter().collect()
}

fn split(mut seqs: Vec<LabSequence>, holdout: f64) -> (Vec<LabSequence>, Vec<LabSequence>) {
    let (train, _) = split_indices(seqs.len(), holdout);
    let held = seqs.split_off(train.len());
    (seqs, held)
}

/// Encoders initialised from the alignment seed.
pub fn fresh_bundle(cfg: &RunConfig) -> Result<EncoderBundle> {
    Ok(EncoderBundle::new(&cfg.net, &mut rng_from_seed(mix_seed(cfg.align.seed, 1)))?)
}

/// Agent initialised from the interaction seed.
pub fn fresh_agent(cfg: &RunConfig) -> Result<AgentNets> {
    Ok(AgentNets::new(
        cfg.net.frame_size,
        ACTION_DIM,
        &cfg.agent,
        &mut rng_from_seed(mix_seed(cfg.interact.seed, 4)),
    )?)
}

pub struct AlignRun {
    pub bundle: EncoderBundle,
    pub reports: Vec<LossReport>,
    pub auc_initial: f64,
    pub auc_final: f64,
}

pub fn align(cfg: &RunConfig, inputs: &AlignInputs, observe: &mut dyn FnMut(usize, &LossReport)) -> Result<AlignRun> {
    let mut bundle = fresh_bundle(cfg)?;
    let auc_initial = inputs.separation(&mut bundle)?;
    let reports = run_alignment(
        &mut bundle,
        &inputs.expert_train,
        &inputs.random_train,
        &cfg.align,
        &cfg.loss,
        observe,
    )?;
    let auc_final = inputs.separation(&mut bundle)?;
    Ok(AlignRun {
        bundle,
        reports,
        auc_initial,
        auc_final,
    })
}

pub struct TrainRun {
    pub agent: AgentNets,
    pub bundle: EncoderBundle,
    pub metrics: Vec<EpisodeMetrics>,
}

impl TrainRun {
    /// The evaluation attached to the last episode.
    pub fn final_eval(&self) -> Option<EvalReport> {
        self.metrics.last().and_then(|m| m.eval)
    }
}

pub fn train(
    cfg: &RunConfig,
    mut bundle: EncoderBundle,
    expert: &[LabSequence],
    observe: &mut dyn FnMut(&EpisodeMetrics, &AgentNets, &EncoderBundle),
) -> Result<TrainRun> {
    let mut agent = fresh_agent(cfg)?;
    let metrics = run_interactive(&mut bundle, &mut agent, expert, cfg, observe)?;
    Ok(TrainRun { agent, bundle, metrics })
}
