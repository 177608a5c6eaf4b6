use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use sharenav_core::autolabel::{build_dataset, AutolabelConfig, Captioner, Dataset, HttpCaptioner};
use sharenav_core::service::{serve, ServerConfig, SessionConfig};
use sharenav_core::shared_control::{pseudo_sim_run, SimConfig, SimMode};
use sharenav_core::training::{build_scenes, load_checkpoint, metrics_csv, save_checkpoint, train, TrainConfig};
use sharenav_core::world::{load_episode_dir, save_episode_dir};

#[derive(Parser)]
#[command(name = "sharenav", version, about = "Shared-autonomy sidewalk navigation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert episodes from the corpus section of a training config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label episodes with drafting, arrowing and texting instructions.
    Autolabel {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional interestingness captioner; overrides the config.
        #[arg(long)]
        captioner_url: Option<String>,
    },
    /// Train a policy. Without --episodes the corpus is generated from the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV; defaults to the checkpoint path with a .metrics.csv suffix.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Labeled dataset for --episodes; labeled on the fly when absent.
        #[arg(long, requires = "episodes")]
        labels: Option<PathBuf>,
    },
    /// Pseudo-simulation over logged episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        takeover_duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report; the two CSV tables are written next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve live sessions over TCP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "SHARENAV_PORT", default_value_t = 7878)]
        port: u16,
        #[arg(long, env = "SHARENAV_BIND", default_value = "127.0.0.1")]
        bind: String,
        /// Base world seed; connection n uses seed + n.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "SHARENAV_RECORD_DIR")]
        record: Option<PathBuf>,
        /// Session config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_sessions: Option<usize>,
        /// Run ticks back to back instead of at the frame rate.
        #[arg(long)]
        fast: bool,
    },
    /// Print a default config.
    Defaults {
        #[arg(value_enum)]
        which: DefaultsArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Point,
    Texting,
    Drafting,
    Arrowing,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Point => SimMode::Point,
            ModeArg::Texting => SimMode::Texting,
            ModeArg::Drafting => SimMode::Drafting,
            ModeArg::Arrowing => SimMode::Arrowing,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DefaultsArg {
    Train,
    Autolabel,
    Eval,
    Session,
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&s).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_toml(&s)?)
        }
    }
}

fn label(episodes: &[(String, sharenav_core::world::EpisodeLog)], cfg: &AutolabelConfig) -> Dataset {
    let client = HttpCaptioner::from_config(&cfg.captioner);
    build_dataset(episodes, cfg, client.as_ref().map(|c| c as &dyn Captioner))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, out } => {
            let cfg = train_config(config.as_deref())?;
            let eps = cfg.corpus.generate()?;
            save_episode_dir(&out, &eps)?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
        }
        Cmd::Autolabel { episodes, out, config, captioner_url } => {
            let mut cfg: AutolabelConfig = read_toml(config.as_deref())?;
            if captioner_url.is_some() {
                cfg.captioner.url = captioner_url;
            }
            let eps = load_episode_dir(&episodes)?;
            if eps.is_empty() {
                bail!("no episodes in {}", episodes.display());
            }
            let ds = label(&eps, &cfg);
            ds.write(&out)?;
            println!(
                "labeled {} records from {} episodes ({} skipped) into {}",
                ds.manifest.records,
                eps.len(),
                ds.manifest.skips.len(),
                out.display()
            );
        }
        Cmd::Train { config, out, metrics, episodes, labels } => {
            let cfg = train_config(config.as_deref())?;
            let eps = match &episodes {
                Some(dir) => load_episode_dir(dir)?,
                None => cfg.corpus.generate()?,
            };
            let ds = match &labels {
                Some(dir) => Dataset::load(dir)?,
                None => label(&eps, &AutolabelConfig::default()),
            };
            let scenes = build_scenes(&ds, &eps, &cfg.policy)?;
            log::info!("{} training scenes from {} episodes", scenes.len(), eps.len());
            let outcome = train(&cfg, &scenes)?;
            save_checkpoint(&outcome.model, &out)?;
            let mpath = metrics.unwrap_or_else(|| sibling(&out, ".metrics.csv"));
            std::fs::write(&mpath, metrics_csv(&outcome.metrics))?;
            println!("checkpoint {}, metrics {}", out.display(), mpath.display());
        }
        Cmd::Eval { checkpoint, episodes, mode, takeover_duration, seed, report, config } => {
            let mut cfg: SimConfig = read_toml(config.as_deref())?;
            cfg.seed = seed;
            cfg.takeover_duration = takeover_duration;
            let model = load_checkpoint(&checkpoint)?;
            let eps = load_episode_dir(&episodes)?;
            if eps.is_empty() {
                bail!("no episodes in {}", episodes.display());
            }
            let r = pseudo_sim_run(&model, &eps, mode.into(), &cfg);
            std::fs::write(&report, r.to_json() + "\n")?;
            std::fs::write(sibling(&report, ".shared_control.csv"), r.shared_control_csv())?;
            std::fs::write(sibling(&report, ".open_loop.csv"), r.open_loop_csv())?;
            println!(
                "{}: {} frames, HO {:.2}% TF {:.3}/s OF {:.3}/s at D={}s",
                r.mode.name(), r.evaluated_frames, r.metrics.ho, r.metrics.tf, r.metrics.of, r.takeover_duration
            );
        }
        Cmd::Serve { checkpoint, port, bind, seed, record, config, max_sessions, fast } => {
            let mut session = match &config {
                Some(p) => SessionConfig::from_json(&std::fs::read_to_string(p)?)?,
                None => SessionConfig::default(),
            };
            session.seed = seed;
            let model = load_checkpoint(&checkpoint)?;
            if let Some(dir) = &record {
                std::fs::create_dir_all(dir)?;
            }
            let listener = TcpListener::bind((bind.as_str(), port)).with_context(|| format!("binding {bind}:{port}"))?;
            log::info!("listening on {}", listener.local_addr()?);
            let cfg = ServerConfig { session, record_dir: record, realtime: !fast, max_sessions };
            serve(listener, Arc::new(model), cfg)?;
        }
        Cmd::Defaults { which } => {
            let text = match which {
                DefaultsArg::Train => TrainConfig::default().to_toml(),
                DefaultsArg::Autolabel => toml::to_string_pretty(&AutolabelConfig::default())?,
                DefaultsArg::Eval => toml::to_string_pretty(&SimConfig::default())?,
                DefaultsArg::Session => serde_json::to_string_pretty(&SessionConfig::default())? + "\n",
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
