//! The `bootifol` command line.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use bootifol_core::config::{EnvId, Profile, RunConfig};
use bootifol_core::env::{generate_dataset, Label};
use bootifol_core::interact::{eval_seed, evaluate_agent, evaluate_label, Baselines};
use bootifol_core::nets::EncoderBundle;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{self, CsvSink};
use crate::{dataset, pipeline, settings};

#[derive(Debug, Parser)]
#[command(name = "bootifol", version, about = "Bootstrapped contrastive imitation from observation")]
pub struct Cli {
    /// Directory receiving every output file.
    #[arg(long, global = true, env = "BOOTIFOL_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render expert or random trajectories into a dataset file.
    Generate(GenerateArgs),
    /// Pre-train the encoders on expert versus random trajectories.
    Align(AlignArgs),
    /// Train an agent against the learned reward.
    Train(TrainArgs),
    /// Report absolute and scaled returns of an agent or a reference policy.
    Eval(EvalArgs),
    /// Write per-trajectory sequence embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Configuration files.
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration; unspecified fields come from the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub profile: Profile,
    /// Overrides every seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => settings::load(p, self.profile)?,
            None => RunConfig::for_profile(self.profile),
        };
        if let Some(s) = self.seed {
            cfg.align.seed = s;
            cfg.interact.seed = s;
            cfg.env.seed = s;
        }
        Ok(cfg)
    }
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub env: EnvId,
    /// expert or random
    #[arg(long)]
    pub policy: Label,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Steps per trajectory.
    #[arg(long)]
    pub t: Option<usize>,
    /// Frame side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Output file; defaults to `<env>_<policy>.bifo` in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub expert: PathBuf,
    #[arg(long)]
    pub random: PathBuf,
    #[arg(long)]
    pub n_pretrain: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub expert: PathBuf,
    /// Aligned encoder checkpoint.
    #[arg(long, required_unless_present = "no_alignment", conflicts_with = "no_alignment")]
    pub checkpoint: Option<PathBuf>,
    /// Start from freshly initialised encoders.
    #[arg(long)]
    pub no_alignment: bool,
    /// Steps during which the encoders keep training.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Total agent steps.
    #[arg(long)]
    pub n_pi: Option<usize>,
    /// Write `agent_<step>.ckpt` whenever this many more steps have run.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Agent checkpoint.
    #[arg(long, required_unless_present = "policy", conflicts_with = "policy")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a reference policy instead: expert or random.
    #[arg(long)]
    pub policy: Option<Label>,
    #[arg(long)]
    pub env: Option<EnvId>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset files; may repeat.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Print or write the full configuration of a profile.
    Init {
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".bootifol.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    if let Command::Config {
        command: ConfigCommand::Init { profile, output: None },
    } = &cli.command
    {
        print!("{}", settings::to_toml(&RunConfig::for_profile(*profile))?);
        return Ok(());
    }
    let _lock = OutputLock::acquire(out)?;
    match cli.command {
        Command::Generate(a) => generate(out, a),
        Command::Align(a) => align(out, a),
        Command::Train(a) => train(out, a),
        Command::Eval(a) => eval(out, a),
        Command::ExportEmbeddings(a) => export(out, a),
        Command::Config {
            command: ConfigCommand::Init { profile, output },
        } => {
            let path = out.join(output.expect("stdout handled above"));
            write_text(&path, &settings::to_toml(&RunConfig::for_profile(profile))?)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(out: &Path, a: GenerateArgs) -> Result<()> {
    let cfg = validated(a.run.resolve()?)?;
    if a.policy == Label::Agent {
        return Err(Error::Usage("--policy must be expert or random".into()));
    }
    let n = a.n.unwrap_or(cfg.env.n_trajectories);
    let t = a.t.unwrap_or(cfg.env.episode_len);
    let size = a.size.unwrap_or(cfg.net.frame_size);
    let ds = generate_dataset(a.env, a.policy, n, t, size, cfg.env.seed, cfg.env.kp, cfg.env.kd)?;
    let path = a
        .output
        .map(|p| out.join(p))
        .unwrap_or_else(|| out.join(format!("{}_{}.bifo", a.env, a.policy.name())));
    dataset::save(&ds, &path)?;
    let mean = ds.trajectories.iter().map(|t| t.true_return).sum::<f64>() / n as f64;
    println!(
        "{} {}: N={} T={} {}x{} seed={} mean_return={:.3} -> {}",
        ds.env,
        ds.policy.name(),
        n,
        t,
        size,
        size,
        ds.seed,
        mean,
        path.display()
    );
    Ok(())
}

fn align(out: &Path, a: AlignArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(n) = a.n_pretrain {
        cfg.align.n_pretrain = n;
    }
    let cfg = validated(cfg)?;
    let expert = dataset::load(&a.expert)?;
    let random = dataset::load(&a.random)?;
    let inputs = pipeline::AlignInputs::new(&cfg, &expert, &random)?;
    let metrics_path = out.join("align_metrics.csv");
    let mut sink = CsvSink::create(&metrics_path, &[], &metrics::align_header())?;
    let mut failure = None;
    let run = pipeline::align(&cfg, &inputs, &mut |epoch, r| {
        if failure.is_none() {
            failure = sink.row(&metrics::align_row(epoch, r)).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    sink.finish()?;
    Checkpoint::capture(&[&run.bundle]).save(&out.join("bundle.ckpt"))?;
    write_text(&out.join("config.toml"), &settings::to_toml(&cfg)?)?;
    let report = format!(
        "epochs={}\nauc_initial={}\nauc_final={}\n",
        run.reports.len(),
        run.auc_initial,
        run.auc_final
    );
    write_text(&out.join("separation.txt"), &report)?;
    println!(
        "aligned {} epochs: held-out separation AUC {:.3} -> {:.3}",
        run.reports.len(),
        run.auc_initial,
        run.auc_final
    );
    Ok(())
}

fn load_bundle(cfg: &RunConfig, path: &Path) -> Result<EncoderBundle> {
    let mut bundle = pipeline::fresh_bundle(cfg)?;
    Checkpoint::load(path)?.restore(&mut [&mut bundle])?;
    Ok(bundle)
}

fn train(out: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(n) = a.n_pi {
        cfg.interact.n_pi = n;
        cfg.interact.n_train = cfg.interact.n_train.min(n);
    }
    if let Some(n) = a.n_train {
        cfg.interact.n_train = n;
    }
    let expert = dataset::load(&a.expert)?;
    pipeline::adopt_dataset(&mut cfg, &expert)?;
    let cfg = validated(cfg)?;
    let bundle = match &a.checkpoint {
        Some(p) => load_bundle(&cfg, p)?,
        None => pipeline::fresh_bundle(&cfg)?,
    };
    let (train_idx, _) = bootifol_core::align::split_indices(expert.trajectories.len(), cfg.align.holdout);
    let mut seqs = pipeline::lab_sequences(&expert)?;
    seqs.truncate(train_idx.len());

    let preamble = [
        ("no_alignment", a.no_alignment.to_string()),
        ("n_pi", cfg.interact.n_pi.to_string()),
        ("n_train", cfg.interact.n_train.to_string()),
        ("n_update", cfg.interact.n_update.to_string()),
        ("env", cfg.env.env.to_string()),
        ("seed", cfg.interact.seed.to_string()),
    ];
    let metrics_path = out.join("train_metrics.csv");
    let mut sink = CsvSink::create(&metrics_path, &preamble, &metrics::train_header())?;
    let mut failure = None;
    let mut next_ckpt = a.checkpoint_every;
    let run = pipeline::train(&cfg, bundle, &seqs, &mut |m, agent, _| {
        if failure.is_some() {
            return;
        }
        failure = sink.row(&metrics::train_row(m)).err();
        if a.checkpoint_every > 0 && m.step >= next_ckpt {
            next_ckpt += a.checkpoint_every * ((m.step - next_ckpt) / a.checkpoint_every + 1);
            let path = out.join(format!("agent_{}.ckpt", m.step));
            failure = failure
                .take()
                .or_else(|| Checkpoint::capture(&[&agent.policy, &agent.critic, &agent.critic_target]).save(&path).err());
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    sink.finish()?;
    let agent = &run.agent;
    Checkpoint::capture(&[&agent.policy, &agent.critic, &agent.critic_target]).save(&out.join("agent.ckpt"))?;
    Checkpoint::capture(&[&run.bundle]).save(&out.join("bundle_final.ckpt"))?;
    write_text(&out.join("config.toml"), &settings::to_toml(&cfg)?)?;
    match run.final_eval() {
        Some(e) => println!(
            "trained {} steps: scaled return {:.3} +- {:.3}, return {:.2} +- {:.2}",
            cfg.interact.n_pi, e.scaled_return, e.scaled_std, e.mean_return, e.std_return
        ),
        None => println!("trained {} steps", cfg.interact.n_pi),
    }
    Ok(())
}

fn eval(out: &Path, a: EvalArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(env) = a.env {
        cfg.env.env = env;
    }
    let cfg = validated(cfg)?;
    let episodes = a.episodes.unwrap_or(cfg.interact.eval_episodes);
    let seed = eval_seed(cfg.interact.seed);
    let (name, report) = match (&a.checkpoint, a.policy) {
        (Some(path), _) => {
            let mut agent = pipeline::fresh_agent(&cfg)?;
            Checkpoint::load(path)?.restore(&mut [&mut agent.policy, &mut agent.critic, &mut agent.critic_target])?;
            ("agent", evaluate_agent(&agent, &cfg.env, cfg.net.frame_size, episodes, seed)?)
        }
        (None, Some(Label::Agent)) => return Err(Error::Usage("--policy must be expert or random".into())),
        (None, Some(label)) => {
            let baselines = Baselines::measure(&cfg.env, cfg.net.frame_size, episodes, seed)?;
            let returns = evaluate_label(&cfg.env, cfg.net.frame_size, label, episodes, seed)?;
            (label.name(), baselines.report(&returns))
        }
        (None, None) => return Err(Error::Usage("pass --checkpoint or --policy".into())),
    };
    let path = out.join("eval.csv");
    let mut sink = CsvSink::create(&path, &[], &metrics::eval_header())?;
    sink.row(&metrics::eval_row(name, &report))?;
    sink.finish()?;
    println!(
        "{name} on {} over {episodes} episodes: return {:.2} +- {:.2}, scaled {:.2} +- {:.2} (expert {:.2}, random {:.2})",
        cfg.env.env,
        report.mean_return,
        report.std_return,
        report.scaled_return,
        report.scaled_std,
        report.expert_return,
        report.random_return
    );
    Ok(())
}

fn export(out: &Path, a: ExportArgs) -> Result<()> {
    let cfg = validated(a.run.resolve()?)?;
    let mut bundle = load_bundle(&cfg, &a.checkpoint)?;
    let path = a.output.map(|p| out.join(p)).unwrap_or_else(|| out.join("embeddings.csv"));
    let mut sink = CsvSink::create(&path, &[], &metrics::embedding_header(bundle.embed_dim()))?;
    let mut rows = 0;
    for p in &a.dataset {
        let ds = dataset::load(p)?;
        pipeline::check_dataset(&cfg, &ds)?;
        for seq in pipeline::lab_sequences(&ds)? {
            let (_, z) = bundle.embed_views(&seq)?;
            sink.row(&metrics::embedding_row(ds.policy.name(), &z))?;
            rows += 1;
        }
    }
    sink.finish()?;
    println!("wrote {rows} embeddings to {}", path.display());
    Ok(())
}
