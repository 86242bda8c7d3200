use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use otrlab_core::config::{PipelineConfig, Profile};
use otrlab_core::dataset::{self, generate_corpus, strip_rewards, Dataset, RewardStatus};
use otrlab_core::env::{self, ActiveTrack, Policy, RandomPolicy, ScriptedExpert};
use otrlab_core::experiment::{self, ExperimentSpec, PolicySource, Stage};
use otrlab_core::iql::{self, IqlNets, IqlPolicy};
use otrlab_core::labeler;
use otrlab_core::ot::CostMetric;
use otrlab_core::{Error, Result};

/// Optimal-transport reward labeling and offline RL on a planar tracking task.
#[derive(Debug, Parser)]
#[command(name = "otrlab", version)]
struct Cli {
    /// Pipeline config (TOML). Without one, the selected profile's defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Defaults profile when no config file is given.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    SquaredEuclidean,
    Euclidean,
    Cosine,
}

impl From<MetricArg> for CostMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::SquaredEuclidean => CostMetric::SquaredEuclidean,
            MetricArg::Euclidean => CostMetric::Euclidean,
            MetricArg::Cosine => CostMetric::Cosine,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate expert and unlabeled corpora (rewards stripped, truth in sidecars).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        expert_episodes: Option<usize>,
        #[arg(long)]
        unlabeled_episodes: Option<usize>,
    },
    /// Remove rewards from a dataset.
    Strip {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Label an unlabeled dataset against expert demonstrations.
    Label(LabelArgs),
    /// Roll out a policy and save the episodes with their true rewards.
    Rollout {
        /// `expert`, `random`, or a checkpoint directory.
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train IQL on a labeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (or `expert` / `random`) with deterministic rollouts.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render camera and cube paths of a dataset as SVG.
    Paths {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Render only the first N episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Summarize aggregate CSV files.
    Report {
        #[arg(required = true)]
        aggregates: Vec<PathBuf>,
    },
    /// Run the multi-seed pipeline.
    Run {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of gen,label,train,eval,report.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        expert_count: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    experts: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Accepted for interface symmetry; labeling has no random component.
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the JSON labeling report (defaults to `<output>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match (&cli.config, cli.profile) {
        (Some(path), _) => PipelineConfig::load(path),
        (None, Some(ProfileArg::Paper)) => Ok(PipelineConfig::for_profile(Profile::Paper)),
        (None, _) => Ok(PipelineConfig::desk()),
    }
}

fn policy_source(spec: &str) -> PolicySource {
    match spec {
        "expert" => PolicySource::ScriptedExpert,
        "random" => PolicySource::Random,
        dir => PolicySource::Checkpoint(PathBuf::from(dir)),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let (traj, _) = dataset::dataset_paths(path);
    traj.with_extension(suffix)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen {
            out,
            seed,
            expert_episodes,
            unlabeled_episodes,
        } => {
            if let Some(n) = expert_episodes {
                cfg.corpus.expert_episodes = n;
            }
            if let Some(n) = unlabeled_episodes {
                cfg.corpus.unlabeled_episodes = n;
            }
            cfg.validate()?;
            let corpus = generate_corpus(&cfg.env, &cfg.corpus, seed.unwrap_or(cfg.experiment.corpus_seed))?;
            corpus.save(&out)?;
            println!(
                "wrote {} expert and {} unlabeled episodes to {}",
                corpus.expert.episodes.len(),
                corpus.unlabeled.episodes.len(),
                out.display()
            );
        }
        Command::Strip { input, output } => {
            let ds = Dataset::load(&input)?;
            strip_rewards(&ds).save(&output)?;
        }
        Command::Label(args) => {
            if let Some(m) = args.metric {
                cfg.label.ot.metric = m.into();
            }
            if let Some(e) = args.epsilon {
                cfg.label.ot.sinkhorn.epsilon = e;
            }
            if let Some(a) = args.alpha {
                cfg.label.alpha = a;
            }
            if let Some(b) = args.beta {
                cfg.label.beta = b;
            }
            if let Some(s) = args.seed {
                log::debug!("labeling is deterministic; seed {s} has no effect");
            }
            cfg.label.validate()?;
            let experts = Dataset::load(&args.experts)?;
            let unlabeled = Dataset::load(&args.unlabeled)?;
            let out = labeler::label_dataset(&experts, &unlabeled, &cfg.label)?;
            out.dataset.save(&args.output)?;
            let report_path = args.report.unwrap_or_else(|| with_suffix(&args.output, "report.json"));
            std::fs::write(&report_path, out.report.to_json()).map_err(|e| io_err(&report_path, e))?;
            println!(
                "labeled {} episodes ({} failed); report in {}",
                out.dataset.episodes.len(),
                out.report.failed,
                report_path.display()
            );
        }
        Command::Rollout {
            policy,
            episodes,
            seed,
            output,
        } => {
            let env = ActiveTrack::new(cfg.env.clone())?;
            let mut p: Box<dyn Policy> = match policy_source(&policy) {
                PolicySource::ScriptedExpert => Box::new(ScriptedExpert::new(&cfg.env)),
                PolicySource::Random => Box::new(RandomPolicy::new(seed, cfg.env.v_max)),
                PolicySource::Checkpoint(dir) => {
                    Box::new(IqlPolicy::new(IqlNets::load(&dir, cfg.iql.learning_rate)?, true, seed))
                }
                PolicySource::Nets(_) => unreachable!("not constructed from the command line"),
            };
            let seeds: Vec<u64> = (0..episodes as u64).map(|k| seed.wrapping_add(k)).collect();
            let trajs = seeds
                .iter()
                .enumerate()
                .map(|(k, &s)| env::rollout(&env, p.as_mut(), s, k as u64))
                .collect::<Result<Vec<_>>>()?;
            let ds = Dataset::new(env::ENV_TAG, cfg.env.horizon, RewardStatus::GroundTruth, seeds, trajs)?;
            ds.save(&output)?;
            let returns: Vec<f64> = ds.episodes.iter().filter_map(|e| e.episodic_return()).collect();
            println!(
                "mean return {:.3} over {} episodes",
                otrlab_core::stats::mean(&returns),
                returns.len()
            );
        }
        Command::Train {
            dataset,
            out,
            steps,
            seed,
        } => {
            if let Some(s) = steps {
                cfg.iql.gradient_steps = s;
            }
            if let Some(s) = seed {
                cfg.iql.seed = s;
            }
            cfg.iql.checkpoint_interval = cfg.experiment.eval_interval;
            cfg.validate()?;
            let ds = Dataset::load(&dataset)?;
            let ckpts = out.join("checkpoints");
            let outcome = iql::train(&cfg.iql, &ds, |step, nets| {
                nets.save(&ckpts.join(format!("step_{step:08}")))?;
                Ok(None)
            })?;
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, iql::metrics_csv(&outcome.metrics)?).map_err(|e| io_err(&log_path, e))?;
            outcome.nets.save(&out.join("final"))?;
            println!("trained {} steps; checkpoints in {}", cfg.iql.gradient_steps, ckpts.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let rec = experiment::evaluate_checkpoint(
                &policy_source(&checkpoint),
                &cfg.env,
                episodes.unwrap_or(cfg.experiment.eval_episodes),
                seed,
                cfg.return_scale(),
            )?;
            println!("{}", serde_json::to_string_pretty(&rec).expect("record serializes"));
        }
        Command::Paths {
            input,
            output,
            episodes,
        } => {
            let mut ds = Dataset::load(&input)?;
            if let Some(n) = episodes {
                ds.episodes.truncate(n);
            }
            let s = experiment::render_paths(&ds.episodes, &output)?;
            for (ep, d) in ds.episodes.iter().zip(&s.mean_distances) {
                println!("episode {}: mean camera-to-cube distance {d:.4}", ep.episode_id);
            }
        }
        Command::Report { aggregates } => {
            print!("{}", experiment::report(&aggregates)?);
        }
        Command::Run {
            out,
            stages,
            seeds,
            steps,
            expert_count,
        } => {
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            if let Some(s) = steps {
                cfg.iql.gradient_steps = s;
            }
            if expert_count.is_some() {
                cfg.experiment.expert_count = expert_count;
            }
            let mut spec = ExperimentSpec::new(cfg, out);
            if let Some(names) = stages {
                spec.stages = names.iter().map(|s| s.parse::<Stage>()).collect::<Result<_>>()?;
            }
            let bundle = experiment::run_experiment(&spec)?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("ran: [{}] skipped: [{}]", names(&bundle.stages_run), names(&bundle.stages_skipped));
            if let Some(text) = bundle.report_text {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
