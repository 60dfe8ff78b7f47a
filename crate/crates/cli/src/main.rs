use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use liam_core::envs::EnvKind;
use liam_core::io::{self, ConfigOverrides, JsonlWriter, RunConfig};
use liam_core::models::Variant;
use liam_core::pool::{build_pool, PoolMode};
use liam_core::probe::{self, RunOptions};
use liam_core::rl::{MetricsRecord, TrainHooks, Trainer};

#[derive(Parser)]
#[command(name = "liam", version, about = "Train and inspect agent models learned from local observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics and checkpoints to the run directory.
    Train(TrainArgs),
    /// Mean evaluation return of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Per-timestep reconstruction accuracy of a checkpoint as JSON Lines.
    Probe(ProbeArgs),
    /// Export embeddings at one timestep plus their 2-D projection as CSV.
    DumpEmbeddings(DumpArgs),
    /// Build a fixed-policy pool and print or write its manifest.
    MakePool(MakePoolArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dsl, lbf or pp.
    #[arg(long)]
    env: Option<String>,
    /// liam, fiam, nam, cbam, carl, liam-vae or liam-local.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr_rl: Option<f64>,
    #[arg(long)]
    lr_ed: Option<f64>,
    #[arg(long)]
    entropy_beta: Option<f64>,
    /// Parallel environments.
    #[arg(long)]
    envs: Option<usize>,
    /// Environment steps per update.
    #[arg(long)]
    update_freq: Option<usize>,
    /// paired or cartesian.
    #[arg(long)]
    pool_mode: Option<String>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step environments on one thread.
    #[arg(long)]
    deterministic: bool,
    /// Continue from a checkpoint (or a run's checkpoints directory).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory, or a checkpoints directory holding LATEST.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Evaluation seed; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write every step as JSON Lines.
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Action,
    Colour,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    kind: ProbeKind,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Colour probe only: per-episode colour-slice traces as JSON Lines.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Timestep whose embeddings are exported.
    #[arg(long, default_value_t = 20)]
    at_step: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for embeddings.csv and projection.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakePoolArgs {
    #[arg(long)]
    env: String,
    #[arg(long, default_value = "paired")]
    pool_mode: String,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Probe(a) => probe_cmd(a),
        Command::DumpEmbeddings(a) => dump(a),
        Command::MakePool(a) => make_pool(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .filter_map(|c| c.downcast_ref::<liam_core::Error>())
                .any(|c| matches!(c, liam_core::Error::Config { .. } | liam_core::Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn overrides(a: &TrainArgs) -> Result<ConfigOverrides> {
    Ok(ConfigOverrides {
        env: a.env.as_deref().map(str::parse::<EnvKind>).transpose()?,
        variant: a.variant.as_deref().map(str::parse::<Variant>).transpose()?,
        seed: a.seed,
        steps: a.steps,
        lr_rl: a.lr_rl,
        lr_ed: a.lr_ed,
        entropy_beta: a.entropy_beta,
        envs: a.envs,
        update_freq: a.update_freq,
        pool_mode: a.pool_mode.as_deref().map(str::parse::<PoolMode>).transpose()?,
        pool_size: a.pool_size,
        out: a.out.clone(),
        deterministic: a.deterministic,
    })
}

struct RunHooks {
    config: RunConfig,
    metrics: JsonlWriter,
    checkpoints: PathBuf,
    failure: PathBuf,
}

impl TrainHooks for RunHooks {
    fn on_metrics(&mut self, r: &MetricsRecord) -> liam_core::Result<()> {
        log::info!(
            "step {} episodes {} return {:.3} ± {:.3}{}",
            r.step,
            r.episodes,
            r.mean_return,
            r.stderr_return,
            r.action_recon_acc.map(|a| format!(" action acc {a:.3}")).unwrap_or_default()
        );
        self.metrics.write_metrics(r)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> liam_core::Result<()> {
        let path = io::save_checkpoint(&self.checkpoints, trainer, &self.config)?;
        log::debug!("checkpoint {}", path.display());
        Ok(())
    }

    fn on_failure(&mut self, dump: &serde_json::Value) {
        if let Err(e) = std::fs::write(&self.failure, dump.to_string()) {
            log::error!("could not write {}: {e}", self.failure.display());
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let o = overrides(&a)?;
    let (config, mut trainer) = match &a.resume {
        Some(ck) => {
            let ck = io::load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
            let mut config = ck.config.clone();
            // Only the budget and the output location may change on resume.
            if let Some(s) = o.steps {
                config.training.total_steps = s;
            }
            if let Some(out) = &o.out {
                config.out = Some(out.clone());
            }
            config.validate()?;
            let mut t = ck.into_trainer()?;
            t.cfg.total_steps = config.training.total_steps;
            (config, t)
        }
        None => {
            let config = RunConfig::load(a.config.as_deref(), &o)?;
            let pool = build_pool(&config.env, config.pool_mode, config.pool_size, config.seed)?;
            let t = Trainer::new(config.env.clone(), pool, config.model, config.training.clone(), config.seed)?;
            (config, t)
        }
    };
    let Some(out) = config.out.clone() else {
        return Err(liam_core::Error::Config { key: "out".into(), message: "required (flag or config)".into() }.into());
    };
    trainer.set_parallel(!config.deterministic);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    trainer.pool.write_manifest(&out.join("pool.toml"))?;
    let metrics_path = out.join("metrics.jsonl");
    let metrics = if a.resume.is_some() { JsonlWriter::append_to(&metrics_path)? } else { JsonlWriter::create(&metrics_path)? };
    let mut hooks = RunHooks { config: config.clone(), metrics, checkpoints: out.join("checkpoints"), failure: out.join("failure.json") };
    log::info!(
        "training {} on {} for {} steps (seed {}, {} policies)",
        config.model.variant,
        config.env.kind(),
        config.training.total_steps,
        config.seed,
        trainer.pool.len()
    );
    trainer.run(&mut hooks)?;
    log::info!("done after {} steps, {} episodes", trainer.progress.steps, trainer.progress.episodes);
    Ok(())
}

fn load(path: &Path) -> Result<(RunConfig, Trainer)> {
    let ck = io::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let config = ck.config.clone();
    Ok((config, ck.into_trainer()?))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (config, t) = load(&a.checkpoint)?;
    let opts = RunOptions {
        episodes: a.episodes,
        seed: a.seed.unwrap_or(config.seed),
        record_steps: a.trajectories.is_some(),
        decode: false,
        ..RunOptions::default()
    };
    let factory = || config.env.build();
    let traces = probe::run_episodes(&t.agent, &factory, &t.pool, &opts)?;
    let stats = probe::return_stats(&traces);
    println!("{:.4} ± {:.4} (n = {}, step {})", stats.mean, stats.stderr, stats.returns.len(), t.progress.steps);
    if let Some(p) = &a.trajectories {
        io::write_trajectories(p, &traces)?;
    }
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<()> {
    let (config, t) = load(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(config.seed);
    let factory = || config.env.build();
    let (curve, traces) = match a.kind {
        ProbeKind::Action => (probe::action_reconstruction_accuracy(&t.agent, &factory, &t.pool, a.episodes, seed)?, None),
        ProbeKind::Colour => {
            let r = probe::colour_identification_accuracy(&t.agent, &factory, &t.pool, a.episodes, seed)?;
            (r.curve, Some(r.traces))
        }
    };
    if a.traces.is_some() && traces.is_none() {
        bail!(liam_core::Error::Usage("--traces only applies to the colour probe".into()));
    }
    match &a.out {
        Some(p) => {
            let w = JsonlWriter::create(p)?;
            for pt in curve.points() {
                w.write(&pt)?;
            }
        }
        None => {
            for pt in curve.points() {
                println!("{}", serde_json::to_string(&pt)?);
            }
        }
    }
    if let (Some(p), Some(traces)) = (&a.traces, traces) {
        let w = JsonlWriter::create(p)?;
        for tr in &traces {
            w.write(tr)?;
        }
    }
    if let Some(acc) = curve.accuracy_from(10) {
        log::info!("accuracy from t = 10: {acc:.4} over {} samples", curve.samples());
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let (config, t) = load(&a.checkpoint)?;
    let factory = || config.env.build();
    let d = probe::dump_embeddings(&t.agent, &factory, &t.pool, a.episodes, a.at_step, a.seed.unwrap_or(config.seed), &a.out)?;
    let sil = d.silhouette.map_or("n/a".to_string(), |s| format!("{s:.4}"));
    println!("{} embeddings of width {} at t = {}; silhouette by policy {sil}", d.rows, d.dim, a.at_step);
    Ok(())
}

fn make_pool(a: MakePoolArgs) -> Result<()> {
    let kind: EnvKind = a.env.parse()?;
    let mode: PoolMode = a.pool_mode.parse()?;
    let mut config = RunConfig::new(kind);
    config.pool_mode = mode;
    if let Some(k) = a.pool_size {
        config.pool_size = k;
    }
    let pool = build_pool(&config.env, mode, config.pool_size, a.seed)?;
    match &a.out {
        Some(p) => {
            pool.write_manifest(p)?;
            println!("{} policies written to {}", pool.len(), p.display());
        }
        None => print!("{}", pool.manifest_toml()?),
    }
    Ok(())
}
