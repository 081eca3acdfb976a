use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvd_core::attribution::SaliencySettings;
use mvd_core::env::WorldState;
use mvd_core::harness::{
    self, evaluate, evaluate_all_conditions, load_agent, load_agent_as, load_config, load_observation, plot_export,
    resolve, saliency_for_observation, store_observation, Checkpoint, Condition, EvalPairs, RunConfig, Trainer,
};
use mvd_core::Error;

#[derive(Parser)]
#[command(name = "mvd", version, about = "Multi-view disentanglement for pixel-based RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint; `all` also reports each camera on its own.
    Eval(EvalArgs),
    /// Expand an ablation preset and train every configured seed.
    Ablate(AblateArgs),
    /// Policy-weighted saliency maps for one observation.
    Saliency(SaliencyArgs),
    /// Aggregate metrics files into learning curves.
    Plot(PlotArgs),
    /// Render and store the observation of a world state.
    Render(RenderArgs),
}

#[derive(Args)]
struct RunOverrides {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `run.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
}

impl RunOverrides {
    fn load(&self, preset: Option<&str>) -> mvd_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path, preset)?,
            None => resolve("", "defaults", preset)?,
        };
        if let Some(s) = self.steps {
            cfg.run.total_steps = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `all` or a camera id.
    #[arg(long, default_value = "all")]
    camera: String,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Seed of the evaluation episodes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Redraw the camera pair of the `all` condition once per episode instead of every step.
    #[arg(long)]
    per_episode_pairs: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    preset: String,
    #[command(flatten)]
    run: RunOverrides,
    /// Seeds to train; defaults to `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Runs go to `<out>/<preset>/seed_<n>`; defaults to `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// World state `agent_x,agent_y,goal_x,goal_y`.
    #[arg(long, value_delimiter = ',', required_unless_present = "obs", conflicts_with = "obs")]
    state: Option<Vec<f64>>,
    /// Stored observation (`<stem>.json` written by `render` or an earlier `saliency`).
    #[arg(long)]
    obs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    distractor_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    ig_steps: usize,
    #[arg(long, default_value_t = 5)]
    smoothgrad_n: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    state: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    distractor_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn world_state(v: &[f64], distractor_seed: u64) -> mvd_core::Result<WorldState> {
    if v.len() != 4 || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(format!("state must be 4 values in [0, 1], got {v:?}")));
    }
    Ok(WorldState {
        agent: [v[0], v[1]],
        goal: [v[2], v[3]],
        step: 0,
        distractor_seed,
    })
}

fn train_seed(cfg: RunConfig, seed: u64, out: &Path) -> mvd_core::Result<()> {
    log::info!("training seed {seed} for {} steps into {}", cfg.run.total_steps, out.display());
    let outcome = harness::train_run(cfg, seed, out)?;
    println!("{}", outcome.metrics.display());
    Ok(())
}

fn run(cli: Cli) -> mvd_core::Result<()> {
    match cli.command {
        Command::Train(a) => {
            if let Some(path) = &a.resume {
                let ckpt = Checkpoint::load(path)?;
                let mut t = Trainer::resume(&ckpt, &a.out)?;
                let total = a.run.steps.unwrap_or(t.config.run.total_steps);
                log::info!("resuming at step {} until {total}", t.env_step());
                let outcome = t.run_until(total)?;
                t.checkpoint().save(&a.out.join("final.ckpt"))?;
                println!("{}", outcome.metrics.display());
                return Ok(());
            }
            train_seed(a.run.load(a.preset.as_deref())?, a.seed, &a.out)
        }
        Command::Ablate(a) => {
            let cfg = a.run.load(Some(&a.preset))?;
            let root = a.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone()).join(&a.preset);
            for seed in a.seeds.clone().unwrap_or_else(|| cfg.run.seeds.clone()) {
                train_seed(cfg.clone(), seed, &root.join(format!("seed_{seed}")))?;
            }
            Ok(())
        }
        Command::Eval(a) => {
            let (cfg, agent) = load_agent(&Checkpoint::load(&a.ckpt)?)?;
            let pairs = if a.per_episode_pairs { EvalPairs::PerEpisode } else { EvalPairs::PerStep };
            let cams = &cfg.env.cameras;
            let scores: Vec<(String, _)> = match Condition::parse(&a.camera, cams)? {
                Condition::All if a.camera == "all" && cams.len() > 1 => {
                    let rec = evaluate_all_conditions(&agent, &cfg.env.params, cams, a.episodes, pairs, a.seed)?;
                    std::iter::once(("all".to_string(), rec.all)).chain(cams.iter().cloned().zip(rec.per_camera)).collect()
                }
                cond => vec![(a.camera.clone(), evaluate(&agent, &cfg.env.params, cams, cond, a.episodes, pairs, a.seed)?)],
            };
            println!("condition,success_rate,mean_return");
            for (c, s) in scores {
                println!("{c},{},{}", s.success_rate, s.mean_return);
            }
            Ok(())
        }
        Command::Saliency(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let (cfg, agent) = load_agent_as::<f32>(&ckpt)?;
            let obs_path = match (&a.obs, &a.state) {
                (Some(p), _) => p.clone(),
                (None, Some(s)) => store_observation(&cfg, &world_state(s, a.distractor_seed)?, &a.out, "observation")?,
                (None, None) => unreachable!("clap requires --state or --obs"),
            };
            let obs = load_observation(&cfg, &obs_path)?;
            let settings = SaliencySettings {
                ig_steps: a.ig_steps,
                smoothgrad_n: a.smoothgrad_n,
                smoothgrad_sigma: a.sigma,
                ..SaliencySettings::default()
            };
            let maps = saliency_for_observation(&cfg, &agent, &obs, &settings, a.seed, &a.out)?;
            for m in maps {
                let cam = &cfg.env.cameras[m.camera];
                match m.private_max {
                    Some(p) => println!("{cam}: shared max {:.4e}, private max {p:.4e}", m.shared_max),
                    None => println!("{cam}: shared max {:.4e}", m.shared_max),
                }
            }
            Ok(())
        }
        Command::Plot(a) => {
            let agg = plot_export(&a.metrics, &a.out)?;
            for w in &agg.warnings {
                eprintln!("warning: {w}");
            }
            for (cond, pts) in &agg.conditions {
                if let Some(p) = pts.last() {
                    println!("{cond}: {:.3} ± {:.3} at step {}", p.mean, p.std, p.env_step);
                }
            }
            Ok(())
        }
        Command::Render(a) => {
            let cfg = RunOverrides { config: a.config, steps: None }.load(None)?;
            let path = store_observation(&cfg, &world_state(&a.state, a.distractor_seed)?, &a.out, "observation")?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NumericalAbort { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
