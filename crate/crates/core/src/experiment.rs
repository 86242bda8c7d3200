//! Multi-seed pipeline: generate corpora, label, train, evaluate, report.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! config.toml
//! data/expert.{traj,manifest,truth.csv}
//! data/unlabeled.{traj,manifest,truth.csv}
//! data/labeled.{traj,manifest}     data/labeling_report.json
//! seeds/seed_<s>/train_log.csv     seeds/seed_<s>/checkpoints/step_<n>/
//! seeds/seed_<s>/metrics.csv
//! aggregate.csv                    report.txt
//! stamps/*.json
//! ```
//!
//! Every stage writes a stamp recording a digest of its inputs and the hashes
//! of its outputs; a rerun skips stages whose stamp still matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::dataset::{self, dataset_paths, generate_corpus, write_file, Dataset, GroundTruth, Trajectory};
use crate::env::{self, ActiveTrack, EnvConfig, Policy, RandomPolicy, ScriptedExpert, STATE_DIM};
use crate::error::{Error, Result};
use crate::iql::{self, IqlNets, IqlPolicy};
use crate::labeler;
use crate::stats;

/// Published reference scores (normalized return, mean and std), quoted for
/// comparison only; none of these are reproduced here.
pub const QUOTED_SCORES: [(&str, f64, f64); 3] = [("OTR", 0.81, 0.08), ("SAC", 0.79, 0.08), ("DDPG", 0.67, 0.08)];

const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Label,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Gen, Stage::Label, Stage::Train, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub stages: Vec<Stage>,
    pub config: PipelineConfig,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(config: PipelineConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            config,
            output_dir: output_dir.into(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join("seeds").join(format!("seed_{seed}"))
    }

    pub fn aggregate_path(&self) -> PathBuf {
        self.output_dir.join("aggregate.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join("report.txt")
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut sorted = self.stages.clone();
        sorted.sort();
        if sorted != self.stages || sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "stages must be listed once each, in pipeline order (gen, label, train, eval, report)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub step: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub episode_steps_mean: f64,
    pub episode_steps_min: usize,
    pub normalized_return: f64,
}

/// What to roll out in [`evaluate_checkpoint`].
#[derive(Debug, Clone)]
pub enum PolicySource {
    Checkpoint(PathBuf),
    Nets(Box<IqlNets>),
    ScriptedExpert,
    Random,
}

/// `mean / scale` clamped into `[0, 1]`.
pub fn normalize_return(mean: f64, scale: f64) -> f64 {
    (mean / scale).clamp(0.0, 1.0)
}

/// Deterministic rollouts of a policy on fresh episodes drawn from `seed`.
pub fn evaluate_checkpoint(
    source: &PolicySource,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    return_scale: f64,
) -> Result<EvalRecord> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let env = ActiveTrack::new(env_config.clone())?;
    let mut policy: Box<dyn Policy> = match source {
        PolicySource::Checkpoint(dir) => Box::new(IqlPolicy::new(load_policy_nets(dir)?, true, seed)),
        PolicySource::Nets(nets) => {
            check_policy_dims(nets)?;
            Box::new(IqlPolicy::new((**nets).clone(), true, seed))
        }
        PolicySource::ScriptedExpert => Box::new(ScriptedExpert::new(env_config)),
        PolicySource::Random => Box::new(RandomPolicy::new(seed, env_config.v_max)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let mut returns = Vec::with_capacity(episodes);
    let mut steps = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let t = env::rollout(&env, policy.as_mut(), rng.random(), k as u64)?;
        returns.push(t.episodic_return().expect("rollouts carry rewards"));
        steps.push(t.transition_count());
    }
    let return_mean = stats::mean(&returns);
    Ok(EvalRecord {
        seed,
        step: 0,
        return_mean,
        return_std: stats::std_dev(&returns),
        episode_steps_mean: steps.iter().sum::<usize>() as f64 / episodes as f64,
        episode_steps_min: steps.iter().copied().min().unwrap_or(0),
        normalized_return: normalize_return(return_mean, return_scale),
    })
}

fn check_policy_dims(nets: &IqlNets) -> Result<()> {
    if nets.state_dim() != STATE_DIM || nets.action_dim() != env::ACTION_DIM {
        return Err(Error::Dimension(format!(
            "checkpoint expects {}-d states and {}-d actions; environment has {} and {}",
            nets.state_dim(),
            nets.action_dim(),
            STATE_DIM,
            env::ACTION_DIM
        )));
    }
    Ok(())
}

fn load_policy_nets(dir: &Path) -> Result<IqlNets> {
    let nets = IqlNets::load(dir, iql::IqlConfig::default().learning_rate)?;
    check_policy_dims(&nets)?;
    Ok(nets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSummary {
    /// Mean camera-to-cube distance per trajectory, in plane units.
    pub mean_distances: Vec<f64>,
}

/// Mean distance between camera centre and cube over a trajectory's states.
pub fn mean_tracking_distance(t: &Trajectory) -> f64 {
    let [cx, cy] = env::state_index::CAMERA;
    let [bx, by] = env::state_index::CUBE;
    let d: Vec<f64> = t.states.iter().map(|s| (s[cx] - s[bx]).hypot(s[cy] - s[by])).collect();
    stats::mean(&d)
}

/// SVG with one panel per trajectory: camera centre as red circles, cube as
/// blue squares. Nothing is written on error.
pub fn render_paths(trajectories: &[Trajectory], output: &Path) -> Result<PathsSummary> {
    if trajectories.is_empty() {
        return Err(Error::Contract("no trajectories to render".into()));
    }
    for t in trajectories {
        if t.env_tag != env::ENV_TAG || t.state_dim() != STATE_DIM {
            return Err(Error::Contract(format!(
                "episode {} comes from `{}`, expected `{}`",
                t.episode_id,
                t.env_tag,
                env::ENV_TAG
            )));
        }
    }
    const PANEL: f64 = 240.0;
    const MARGIN: f64 = 20.0;
    let cols = trajectories.len().min(4);
    let rows = trajectories.len().div_ceil(cols);
    let width = cols as f64 * (PANEL + MARGIN) + MARGIN;
    let height = rows as f64 * (PANEL + MARGIN + 20.0) + MARGIN;
    let span = env::WORKSPACE_MAX - env::WORKSPACE_MIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let [cx, cy] = env::state_index::CAMERA;
    let [bx, by] = env::state_index::CUBE;
    let mut mean_distances = Vec::with_capacity(trajectories.len());
    for (k, t) in trajectories.iter().enumerate() {
        let ox = MARGIN + (k % cols) as f64 * (PANEL + MARGIN);
        let oy = MARGIN + 20.0 + (k / cols) as f64 * (PANEL + MARGIN + 20.0);
        let px = |x: f64| ox + (x - env::WORKSPACE_MIN) / span * PANEL;
        let py = |y: f64| oy + PANEL - (y - env::WORKSPACE_MIN) / span * PANEL;
        let dist = mean_tracking_distance(t);
        mean_distances.push(dist);
        let _ = writeln!(svg, r#"<g id="episode-{}">"#, t.episode_id);
        let _ = writeln!(
            svg,
            r#"<text x="{ox:.1}" y="{:.1}" font-family="sans-serif" font-size="12">episode {} (mean distance {dist:.4})</text>"#,
            oy - 6.0,
            t.episode_id
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{ox:.1}" y="{oy:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#888"/>"##
        );
        for s in &t.states {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="3" height="3" fill="blue"/>"#,
                px(s[bx]) - 1.5,
                py(s[by]) - 1.5
            );
        }
        for s in &t.states {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="none" stroke="red"/>"#,
                px(s[cx]),
                py(s[cy])
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(output, svg.as_bytes())?;
    Ok(PathsSummary { mean_distances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub statistic: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and std across seeds for every step all seeds evaluated. Inputs are
/// reduced in the given order.
pub fn aggregate(per_seed: &[Vec<EvalRecord>]) -> Vec<AggregateRow> {
    let mut by_step: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for records in per_seed {
        for r in records {
            by_step.entry(r.step).or_default().push(r);
        }
    }
    let mut rows = Vec::new();
    for (step, recs) in by_step {
        if recs.len() != per_seed.len() {
            continue;
        }
        let stats_of = |f: fn(&EvalRecord) -> f64| {
            let xs: Vec<f64> = recs.iter().map(|r| f(r)).collect();
            (stats::mean(&xs), stats::std_dev(&xs))
        };
        let columns: [(&str, fn(&EvalRecord) -> f64); 3] = [
            ("return", |r| r.return_mean),
            ("normalized_return", |r| r.normalized_return),
            ("episode_steps", |r| r.episode_steps_mean),
        ];
        for (name, f) in columns {
            let (mean, std) = stats_of(f);
            rows.push(AggregateRow {
                step,
                statistic: name.to_string(),
                mean,
                std,
                n: recs.len(),
            });
        }
    }
    rows
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8"))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetricsRow {
    pub step: usize,
    pub value_loss: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub eval_episode_steps: f64,
    pub eval_episode_steps_min: usize,
    pub normalized_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_step: usize,
    pub seeds: usize,
    pub normalized_mean: f64,
    pub normalized_std: f64,
    pub episode_steps_mean: f64,
    pub behavior_normalized_mean: Option<f64>,
}

/// Final-step summary from aggregate rows.
pub fn summarize(rows: &[AggregateRow], behavior_normalized_mean: Option<f64>) -> Result<Summary> {
    let final_step = rows
        .iter()
        .map(|r| r.step)
        .max()
        .ok_or_else(|| Error::State("no completed seeds to report".into()))?;
    let get = |name: &str| {
        rows.iter()
            .find(|r| r.step == final_step && r.statistic == name)
            .ok_or_else(|| Error::State(format!("aggregate has no `{name}` row at step {final_step}")))
    };
    let norm = get("normalized_return")?;
    Ok(Summary {
        final_step,
        seeds: norm.n,
        normalized_mean: norm.mean,
        normalized_std: norm.std,
        episode_steps_mean: get("episode_steps")?.mean,
        behavior_normalized_mean,
    })
}

pub fn format_report(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "final normalized return (step {}, {} seeds)", s.final_step, s.seeds);
    let _ = writeln!(out, "  this run     {:.3} +/- {:.3}", s.normalized_mean, s.normalized_std);
    let _ = writeln!(out, "  episode steps {:.1}", s.episode_steps_mean);
    if let Some(b) = s.behavior_normalized_mean {
        let _ = writeln!(out, "  behavior dataset mean {b:.3}");
    }
    let _ = writeln!(out, "published reference scores (quoted, not reproduced here)");
    for (name, mean, std) in QUOTED_SCORES {
        let _ = writeln!(out, "  {name:<12} {mean:.2} +/- {std:.2}");
    }
    out
}

/// Reads aggregate CSV files and prints the summary of each.
pub fn report(aggregate_paths: &[PathBuf]) -> Result<String> {
    if aggregate_paths.is_empty() {
        return Err(Error::State("no aggregate files given".into()));
    }
    let mut out = String::new();
    for p in aggregate_paths {
        let rows = read_aggregate(p)?;
        let s = summarize(&rows, None)?;
        let _ = writeln!(out, "{}", p.display());
        out.push_str(&format_report(&s));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StampFile {
    input_digest: String,
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

/// Digest of a JSON-serializable description of a stage's inputs plus the
/// contents of its input files.
fn input_digest(description: &impl Serialize, files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(description).expect("stage inputs serialize"));
    for f in files {
        h.update(file_hash(f)?.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

struct Stamps {
    dir: PathBuf,
    root: PathBuf,
}

impl Stamps {
    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn is_current(&self, key: &str, digest: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.path(key)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<StampFile>(&text) else {
            return false;
        };
        stamp.input_digest == digest
            && stamp
                .outputs
                .iter()
                .all(|(rel, hash)| file_hash(&self.root.join(rel)).is_ok_and(|h| &h == hash))
    }

    fn write(&self, key: &str, digest: &str, outputs: &[PathBuf]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut map = BTreeMap::new();
        for o in outputs {
            let rel = o.strip_prefix(&self.root).unwrap_or(o).to_string_lossy().replace('\\', "/");
            map.insert(rel, file_hash(o)?);
        }
        let stamp = StampFile {
            input_digest: digest.to_string(),
            outputs: map,
        };
        write_file(&self.path(key), serde_json::to_string_pretty(&stamp).expect("stamp serializes").as_bytes())
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub stages_run: Vec<Stage>,
    pub stages_skipped: Vec<Stage>,
    pub summary: Option<Summary>,
    pub report_text: Option<String>,
}

/// Runs the requested stages in order. Stages whose stamp matches their
/// current inputs and outputs are skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ReportBundle> {
    spec.validate()?;
    let cfg = &spec.config;
    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    write_file(&spec.output_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let stamps = Stamps {
        dir: spec.output_dir.join("stamps"),
        root: spec.output_dir.clone(),
    };
    let data = spec.data_dir();
    let expert_path = data.join("expert");
    let unlabeled_path = data.join("unlabeled");
    let labeled_path = data.join("labeled");
    let mut bundle = ReportBundle {
        stages_run: Vec::new(),
        stages_skipped: Vec::new(),
        summary: None,
        report_text: None,
    };
    let mut note = |stage: Stage, ran: bool| {
        let list = if ran {
            &mut bundle.stages_run
        } else {
            &mut bundle.stages_skipped
        };
        if !list.contains(&stage) {
            list.push(stage);
        }
    };
    let both = |p: &Path| {
        let (t, m) = dataset_paths(p);
        vec![t, m]
    };

    for &stage in &spec.stages {
        let wrap = stage_err(stage);
        match stage {
            Stage::Gen => {
                let digest = input_digest(&(&cfg.env, &cfg.corpus, cfg.experiment.corpus_seed), &[])?;
                if stamps.is_current("gen", &digest) {
                    note(stage, false);
                    continue;
                }
                log::info!("generating corpora");
                let corpus = generate_corpus(&cfg.env, &cfg.corpus, cfg.experiment.corpus_seed).map_err(&wrap)?;
                corpus.save(&data).map_err(&wrap)?;
                let mut outs = both(&expert_path);
                outs.extend(both(&unlabeled_path));
                outs.push(dataset::truth_path(&expert_path));
                outs.push(dataset::truth_path(&unlabeled_path));
                stamps.write("gen", &digest, &outs)?;
                note(stage, true);
            }
            Stage::Label => {
                let mut inputs = both(&expert_path);
                inputs.extend(both(&unlabeled_path));
                let digest = input_digest(&(&cfg.label, cfg.experiment.expert_count), &inputs).map_err(&wrap)?;
                if stamps.is_current("label", &digest) {
                    note(stage, false);
                    continue;
                }
                log::info!("labeling");
                // Only the stripped datasets are read here, never the truth sidecars.
                let mut experts = Dataset::load(&expert_path).map_err(&wrap)?;
                if let Some(k) = cfg.experiment.expert_count {
                    experts.episodes.truncate(k);
                    experts.manifest.episode_count = experts.episodes.len();
                    experts.manifest.generator_seeds.truncate(k);
                }
                let unlabeled = Dataset::load(&unlabeled_path).map_err(&wrap)?;
                let out = labeler::label_dataset(&experts, &unlabeled, &cfg.label).map_err(&wrap)?;
                out.dataset.save(&labeled_path).map_err(&wrap)?;
                let report_path = data.join("labeling_report.json");
                write_file(&report_path, out.report.to_json().as_bytes())?;
                let mut outs = both(&labeled_path);
                outs.push(report_path);
                stamps.write("label", &digest, &outs)?;
                note(stage, true);
            }
            Stage::Train => {
                for &seed in &cfg.experiment.seeds {
                    let iql_cfg = iql::IqlConfig {
                        seed,
                        checkpoint_interval: cfg.experiment.eval_interval,
                        ..cfg.iql.clone()
                    };
                    let key = format!("train_seed_{seed}");
                    let digest = input_digest(&iql_cfg, &both(&labeled_path)).map_err(&wrap)?;
                    if stamps.is_current(&key, &digest) {
                        note(stage, false);
                        continue;
                    }
                    log::info!("training seed {seed}");
                    let dir = spec.seed_dir(seed);
                    let ckpt_root = dir.join("checkpoints");
                    if ckpt_root.exists() {
                        fs::remove_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
                    }
                    let labeled = Dataset::load(&labeled_path).map_err(&wrap)?;
                    let outcome = iql::train(&iql_cfg, &labeled, |step, nets| {
                        nets.save(&ckpt_root.join(format!("step_{step:08}")))?;
                        Ok(None)
                    })
                    .map_err(&wrap)?;
                    let log_path = dir.join("train_log.csv");
                    write_file(&log_path, iql::metrics_csv(&outcome.metrics)?.as_bytes())?;
                    let mut outs = files_under(&ckpt_root)?;
                    outs.push(log_path);
                    stamps.write(&key, &digest, &outs)?;
                    note(stage, true);
                }
            }
            Stage::Eval => {
                for &seed in &cfg.experiment.seeds {
                    let dir = spec.seed_dir(seed);
                    let train_stamp = stamps.path(&format!("train_seed_{seed}"));
                    let key = format!("eval_seed_{seed}");
                    let desc = (&cfg.env, cfg.experiment.eval_episodes, cfg.return_scale());
                    let digest = input_digest(&desc, std::slice::from_ref(&train_stamp)).map_err(&wrap)?;
                    if stamps.is_current(&key, &digest) {
                        note(stage, false);
                        continue;
                    }
                    log::info!("evaluating seed {seed}");
                    let rows = evaluate_seed(cfg, &dir, seed).map_err(&wrap)?;
                    let path = dir.join("metrics.csv");
                    write_file(&path, to_csv(&rows)?.as_bytes())?;
                    stamps.write(&key, &digest, &[path])?;
                    note(stage, true);
                }
            }
            Stage::Report => {
                let mut per_seed = Vec::with_capacity(cfg.experiment.seeds.len());
                for &seed in &cfg.experiment.seeds {
                    let path = spec.seed_dir(seed).join("metrics.csv");
                    if !path.exists() {
                        log::warn!("seed {seed} has no metrics; left out of the aggregate");
                        continue;
                    }
                    let rows: Vec<SeedMetricsRow> = read_csv(&path).map_err(&wrap)?;
                    per_seed.push(
                        rows.into_iter()
                            .map(|r| EvalRecord {
                                seed,
                                step: r.step,
                                return_mean: r.eval_return_mean,
                                return_std: r.eval_return_std,
                                episode_steps_mean: r.eval_episode_steps,
                                episode_steps_min: r.eval_episode_steps_min,
                                normalized_return: r.normalized_return,
                            })
                            .collect::<Vec<_>>(),
                    );
                }
                if per_seed.is_empty() {
                    return Err(wrap(Error::State("no completed seeds to report".into())));
                }
                let rows = aggregate(&per_seed);
                write_file(&spec.aggregate_path(), to_csv(&rows)?.as_bytes())?;
                // The report may look at ground truth; the training stages never do.
                let truth_file = dataset::truth_path(&unlabeled_path);
                let behavior = if truth_file.exists() {
                    let truth = GroundTruth::load(&truth_file).map_err(&wrap)?;
                    Some(normalize_return(truth.mean_return(), cfg.return_scale()))
                } else {
                    None
                };
                let summary = summarize(&rows, behavior).map_err(&wrap)?;
                let text = format_report(&summary);
                write_file(&spec.report_path(), text.as_bytes())?;
                bundle.summary = Some(summary);
                bundle.report_text = Some(text);
                note(stage, true);
            }
        }
    }
    Ok(bundle)
}

fn evaluate_seed(cfg: &PipelineConfig, seed_dir: &Path, seed: u64) -> Result<Vec<SeedMetricsRow>> {
    let log: Vec<iql::MetricsRow> = read_csv(&seed_dir.join("train_log.csv"))?;
    let mut rows = Vec::with_capacity(log.len());
    for entry in log {
        let ckpt = seed_dir.join("checkpoints").join(format!("step_{:08}", entry.step));
        let rec = evaluate_checkpoint(
            &PolicySource::Checkpoint(ckpt),
            &cfg.env,
            cfg.experiment.eval_episodes,
            seed,
            cfg.return_scale(),
        )?;
        rows.push(SeedMetricsRow {
            step: entry.step,
            value_loss: entry.value_loss,
            critic_loss: entry.critic_loss,
            policy_loss: entry.policy_loss,
            eval_return_mean: rec.return_mean,
            eval_return_std: rec.return_std,
            eval_episode_steps: rec.episode_steps_mean,
            eval_episode_steps_min: rec.episode_steps_min,
            normalized_return: rec.normalized_return,
        });
    }
    Ok(rows)
}

/// Final-step evaluation records of each seed, in seed order.
pub fn final_records(spec: &ExperimentSpec) -> Result<Vec<EvalRecord>> {
    spec.config
        .experiment
        .seeds
        .iter()
        .map(|&seed| {
            let rows: Vec<SeedMetricsRow> = read_csv(&spec.seed_dir(seed).join("metrics.csv"))?;
            let r = rows
                .last()
                .ok_or_else(|| Error::State(format!("seed {seed} has an empty metrics file")))?;
            Ok(EvalRecord {
                seed,
                step: r.step,
                return_mean: r.eval_return_mean,
                return_std: r.eval_return_std,
                episode_steps_mean: r.eval_episode_steps,
                episode_steps_min: r.eval_episode_steps_min,
                normalized_return: r.normalized_return,
            })
        })
        .collect()
}
