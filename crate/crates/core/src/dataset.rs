//! Trajectory datasets: the in-memory model, on-disk format, corpus generation
//! and minibatch sampling.
//!
//! On disk a dataset named `<stem>` is two files: `<stem>.traj` holds
//! length-prefixed little-endian binary episode records, `<stem>.manifest` is
//! a TOML description. Ground-truth returns of generated corpora live in a
//! separate `<stem>.truth.csv` sidecar that the labeling and training stages
//! never open.
//!
//! An episode with `T` states has `T - 1` actions and, when present, `T - 1`
//! rewards (one per transition).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{self, ActiveTrack, EnvConfig, Observation, Policy, ScriptedExpert};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const TRAJ_MAGIC: &[u8; 4] = b"OTRT";
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub env_tag: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        episode_id: u64,
        env_tag: impl Into<String>,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Option<Vec<f64>>,
    ) -> Result<Self> {
        let t = Self {
            episode_id,
            env_tag: env_tag.into(),
            states,
            actions,
            rewards,
        };
        t.validate()?;
        Ok(t)
    }

    /// States only, no actions; enough for OT alignment.
    pub fn from_states(episode_id: u64, states: Vec<Vec<f64>>) -> Result<Self> {
        let n = states.len().saturating_sub(1);
        Self::new(episode_id, "states-only", states, vec![Vec::new(); n], None)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.episode_id;
        let dim = self
            .states
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Dimension(format!("episode {id} has no states")))?;
        if self.states.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension(format!("episode {id}: ragged states")));
        }
        if self.actions.len() + 1 != self.states.len() {
            return Err(Error::Dimension(format!(
                "episode {id}: {} states need {} actions, found {}",
                self.states.len(),
                self.states.len() - 1,
                self.actions.len()
            )));
        }
        let adim = self.actions.first().map(Vec::len).unwrap_or(0);
        if self.actions.iter().any(|a| a.len() != adim) {
            return Err(Error::Dimension(format!("episode {id}: ragged actions")));
        }
        if let Some(r) = &self.rewards {
            if r.len() != self.actions.len() {
                return Err(Error::Dimension(format!(
                    "episode {id}: {} rewards for {} transitions",
                    r.len(),
                    self.actions.len()
                )));
            }
        }
        let all = self
            .states
            .iter()
            .flatten()
            .chain(self.actions.iter().flatten())
            .chain(self.rewards.iter().flatten());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("episode {id} contains non-finite values")));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map(Vec::len).unwrap_or(0)
    }

    pub fn transition_count(&self) -> usize {
        self.actions.len()
    }

    pub fn episodic_return(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardStatus {
    Labeled,
    Stripped,
    GroundTruth,
}

/// How a generated corpus was produced; recorded for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub kind: String,
    pub master_seed: u64,
    pub noise_sigmas: Vec<f64>,
    pub random_fractions: Vec<f64>,
    pub random_segment_length: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingRecord {
    pub metric: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub expert_count: usize,
    pub failed_episodes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub env_tag: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_count: usize,
    pub horizon: usize,
    pub reward_status: RewardStatus,
    /// Environment reset seed of each episode, in episode order.
    pub generator_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeling: Option<LabelingRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Trajectory>,
}

/// `(<stem>.traj, <stem>.manifest)` for a path given with or without the `.traj` extension.
pub fn dataset_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "traj" || e == "manifest") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".traj"), with(".manifest"))
}

pub fn truth_path(path: &Path) -> PathBuf {
    let (traj, _) = dataset_paths(path);
    traj.with_extension("truth.csv")
}

impl Dataset {
    pub fn new(
        env_tag: &str,
        horizon: usize,
        reward_status: RewardStatus,
        generator_seeds: Vec<u64>,
        episodes: Vec<Trajectory>,
    ) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Dimension("dataset needs at least one episode".into()))?;
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            env_tag: env_tag.to_string(),
            state_dim: first.state_dim(),
            action_dim: first.action_dim(),
            episode_count: episodes.len(),
            horizon,
            reward_status,
            generator_seeds,
            generation: None,
            labeling: None,
        };
        let ds = Self { manifest, episodes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Contract(format!(
                "unsupported dataset schema version {}",
                m.schema_version
            )));
        }
        if m.episode_count != self.episodes.len() {
            return Err(Error::Contract(format!(
                "manifest lists {} episodes, file holds {}",
                m.episode_count,
                self.episodes.len()
            )));
        }
        for ep in &self.episodes {
            ep.validate()?;
            if ep.state_dim() != m.state_dim || (ep.transition_count() > 0 && ep.action_dim() != m.action_dim) {
                return Err(Error::Dimension(format!(
                    "episode {} dimensions disagree with manifest",
                    ep.episode_id
                )));
            }
            if ep.env_tag != m.env_tag {
                return Err(Error::Contract(format!(
                    "episode {} has env tag {}, manifest says {}",
                    ep.episode_id, ep.env_tag, m.env_tag
                )));
            }
            let has = ep.rewards.is_some();
            let want = m.reward_status != RewardStatus::Stripped;
            if has != want {
                return Err(Error::Contract(format!(
                    "episode {} reward presence does not match status {:?}",
                    ep.episode_id, m.reward_status
                )));
            }
        }
        Ok(())
    }

    pub fn reward_status(&self) -> RewardStatus {
        self.manifest.reward_status
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(Trajectory::transition_count).sum()
    }

    pub fn encode_records(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TRAJ_MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        for ep in &self.episodes {
            let mut rec = Vec::new();
            rec.extend_from_slice(&ep.episode_id.to_le_bytes());
            rec.extend_from_slice(&(ep.env_tag.len() as u32).to_le_bytes());
            rec.extend_from_slice(ep.env_tag.as_bytes());
            rec.extend_from_slice(&(ep.states.len() as u32).to_le_bytes());
            rec.extend_from_slice(&(ep.state_dim() as u32).to_le_bytes());
            rec.extend_from_slice(&(ep.action_dim() as u32).to_le_bytes());
            rec.push(u8::from(ep.rewards.is_some()));
            let floats = ep
                .states
                .iter()
                .flatten()
                .chain(ep.actions.iter().flatten())
                .chain(ep.rewards.iter().flatten());
            for x in floats {
                rec.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<Trajectory>> {
        let bad = |m: &str| Error::format(path, m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != TRAJ_MAGIC {
            return Err(bad("not a trajectory file"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != SCHEMA_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut episodes = Vec::new();
        while cur.pos < bytes.len() {
            let len = cur.u64().ok_or_else(|| bad("truncated record length"))? as usize;
            let rec = cur.take(len).ok_or_else(|| bad("truncated record"))?;
            let mut r = Cursor { bytes: rec, pos: 0 };
            let parse = |r: &mut Cursor| -> Option<Trajectory> {
                let episode_id = r.u64()?;
                let tag_len = r.u32()? as usize;
                let env_tag = String::from_utf8(r.take(tag_len)?.to_vec()).ok()?;
                let n = r.u32()? as usize;
                let sd = r.u32()? as usize;
                let ad = r.u32()? as usize;
                let has_rewards = r.take(1)?[0] == 1;
                let mut floats = |count: usize, width: usize| -> Option<Vec<Vec<f64>>> {
                    (0..count)
                        .map(|_| (0..width).map(|_| r.f64()).collect::<Option<Vec<_>>>())
                        .collect()
                };
                let states = floats(n, sd)?;
                let actions = floats(n.saturating_sub(1), ad)?;
                let rewards = if has_rewards {
                    Some(floats(n.saturating_sub(1), 1)?.into_iter().map(|v| v[0]).collect())
                } else {
                    None
                };
                Some(Trajectory {
                    episode_id,
                    env_tag,
                    states,
                    actions,
                    rewards,
                })
            };
            let ep = parse(&mut r).ok_or_else(|| bad("malformed episode record"))?;
            if r.pos != rec.len() {
                return Err(bad("episode record has trailing bytes"));
            }
            episodes.push(ep);
        }
        Ok(episodes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (traj, manifest) = dataset_paths(path);
        if let Some(dir) = traj.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_file(&traj, &self.encode_records())?;
        let text = toml::to_string(&self.manifest).map_err(|e| Error::format(&manifest, e.to_string()))?;
        write_file(&manifest, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (traj, manifest_path) = dataset_paths(path);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let mut bytes = Vec::new();
        File::open(&traj)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(&traj, e))?;
        let episodes = Self::decode_records(&bytes, &traj)?;
        let ds = Self { manifest, episodes };
        ds.validate()?;
        Ok(ds)
    }

    /// Human-readable JSON export of the whole dataset.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Episode<'a> {
            episode_id: u64,
            states: &'a [Vec<f64>],
            actions: &'a [Vec<f64>],
            rewards: &'a Option<Vec<f64>>,
        }
        #[derive(Serialize)]
        struct Export<'a> {
            manifest: &'a DatasetManifest,
            episodes: Vec<Episode<'a>>,
        }
        let export = Export {
            manifest: &self.manifest,
            episodes: self
                .episodes
                .iter()
                .map(|e| Episode {
                    episode_id: e.episode_id,
                    states: &e.states,
                    actions: &e.actions,
                    rewards: &e.rewards,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&export).expect("dataset export serializes")
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Drops rewards and marks the dataset stripped. A no-op (with a warning) on
/// an already stripped dataset.
pub fn strip_rewards(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    if dataset.reward_status() == RewardStatus::Stripped {
        log::warn!("dataset is already stripped; nothing to do");
        return out;
    }
    for ep in &mut out.episodes {
        ep.rewards = None;
    }
    out.manifest.reward_status = RewardStatus::Stripped;
    out
}

/// Per-episode ground-truth returns kept out of band for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub episode_id: u64,
    pub episodic_return: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn from_dataset(ds: &Dataset) -> Option<Self> {
        let records = ds
            .episodes
            .iter()
            .map(|e| {
                e.episodic_return().map(|r| TruthRecord {
                    episode_id: e.episode_id,
                    episodic_return: r,
                    steps: e.transition_count(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { records })
    }

    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.episodic_return).collect()
    }

    pub fn mean_return(&self) -> f64 {
        self.returns().iter().sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn by_episode(&self) -> BTreeMap<u64, f64> {
        self.records.iter().map(|r| (r.episode_id, r.episodic_return)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
        write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<TruthRecord>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub expert_episodes: usize,
    pub unlabeled_episodes: usize,
    /// Gaussian action noise, as a fraction of the action bound; cycled over episodes.
    pub noise_sigmas: Vec<f64>,
    /// Target fraction of steps spent in uniform-random action segments; cycled
    /// over episodes (outer to the sigma cycle).
    pub random_fractions: Vec<f64>,
    pub random_segment_length: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            expert_episodes: 10,
            unlabeled_episodes: 100,
            noise_sigmas: vec![0.1, 0.3],
            random_fractions: vec![0.0, 0.1, 0.25, 0.4, 0.6],
            random_segment_length: 20,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expert_episodes == 0 || self.unlabeled_episodes == 0 {
            return Err(Error::Config("corpus: episode counts must be >= 1".into()));
        }
        if self.noise_sigmas.is_empty() || self.random_fractions.is_empty() {
            return Err(Error::Config("corpus: noise schedule lists must be nonempty".into()));
        }
        if self.random_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::Config("corpus: random fractions must lie in [0, 1)".into()));
        }
        if self.noise_sigmas.iter().any(|s| *s < 0.0) || self.random_segment_length == 0 {
            return Err(Error::Config("corpus: invalid noise parameters".into()));
        }
        Ok(())
    }

    /// `(sigma, random_fraction)` used for unlabeled episode `k`.
    pub fn schedule(&self, k: usize) -> (f64, f64) {
        let ns = self.noise_sigmas.len();
        (
            self.noise_sigmas[k % ns],
            self.random_fractions[(k / ns) % self.random_fractions.len()],
        )
    }
}

/// Scripted expert with Gaussian action noise, interrupted by segments of
/// uniformly random actions.
pub struct MixturePolicy {
    expert: ScriptedExpert,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    start_prob: f64,
    segment_length: usize,
    remaining: usize,
    v_max: f64,
}

impl MixturePolicy {
    pub fn new(env: &EnvConfig, sigma: f64, random_fraction: f64, segment_length: usize, seed: u64) -> Self {
        // A segment of length L starting with probability p per non-random step
        // occupies a fraction p L / (1 + p L) of the episode.
        let start_prob = random_fraction / (segment_length as f64 * (1.0 - random_fraction));
        Self {
            expert: ScriptedExpert::new(env),
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: Normal::new(0.0, sigma * env.v_max).expect("sigma validated"),
            start_prob,
            segment_length,
            remaining: 0,
            v_max: env.v_max,
        }
    }
}

impl Policy for MixturePolicy {
    fn act(&mut self, obs: &Observation) -> env::Action {
        if self.remaining == 0 && self.rng.random::<f64>() < self.start_prob {
            self.remaining = self.segment_length;
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            let v = self.v_max;
            return env::Action {
                velocity: [self.rng.random_range(-v..=v), self.rng.random_range(-v..=v)],
                yaw_rate: self.rng.random_range(-v..=v),
            };
        }
        let a = self.expert.act(obs);
        env::Action {
            velocity: [
                a.velocity[0] + self.noise.sample(&mut self.rng),
                a.velocity[1] + self.noise.sample(&mut self.rng),
            ],
            yaw_rate: a.yaw_rate + self.noise.sample(&mut self.rng),
        }
    }
}

/// Expert and unlabeled corpora with their (quarantined) ground truth.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub expert: Dataset,
    pub unlabeled: Dataset,
    pub expert_truth: GroundTruth,
    pub unlabeled_truth: GroundTruth,
}

pub fn generate_corpus(env_config: &EnvConfig, corpus: &CorpusConfig, seed: u64) -> Result<Corpus> {
    corpus.validate()?;
    let env = ActiveTrack::new(env_config.clone())?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let expert_seeds: Vec<u64> = (0..corpus.expert_episodes).map(|_| master.random()).collect();
    let unlabeled_seeds: Vec<u64> = (0..corpus.unlabeled_episodes).map(|_| master.random()).collect();
    let policy_seeds: Vec<u64> = (0..corpus.unlabeled_episodes).map(|_| master.random()).collect();

    let experts = expert_seeds
        .iter()
        .enumerate()
        .map(|(k, &s)| env::rollout(&env, &mut ScriptedExpert::new(env_config), s, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = unlabeled_seeds
        .iter()
        .zip(&policy_seeds)
        .enumerate()
        .map(|(k, (&s, &ps))| {
            let (sigma, frac) = corpus.schedule(k);
            let mut policy = MixturePolicy::new(env_config, sigma, frac, corpus.random_segment_length, ps);
            env::rollout(&env, &mut policy, s, k as u64)
        })
        .collect::<Result<Vec<_>>>()?;

    let record = |kind: &str, note: &str| GenerationRecord {
        kind: kind.to_string(),
        master_seed: seed,
        noise_sigmas: corpus.noise_sigmas.clone(),
        random_fractions: corpus.random_fractions.clone(),
        random_segment_length: corpus.random_segment_length,
        note: note.to_string(),
    };
    let finish = |episodes: Vec<Trajectory>, seeds: Vec<u64>, rec: GenerationRecord| -> Result<(Dataset, GroundTruth)> {
        let mut ds = Dataset::new(env::ENV_TAG, env_config.horizon, RewardStatus::GroundTruth, seeds, episodes)?;
        let truth = GroundTruth::from_dataset(&ds).expect("rollouts carry rewards");
        ds = strip_rewards(&ds);
        ds.manifest.generation = Some(rec);
        Ok((ds, truth))
    };
    let (expert, expert_truth) = finish(
        experts,
        expert_seeds,
        record("expert", "scripted proportional controller"),
    )?;
    let (unlabeled, unlabeled_truth) = finish(
        unlabeled,
        unlabeled_seeds,
        record(
            "unlabeled",
            "synthetic stand-in for diverse suboptimal data: noisy expert with random-action segments",
        ),
    )?;
    Ok(Corpus {
        expert,
        unlabeled,
        expert_truth,
        unlabeled_truth,
    })
}

impl Corpus {
    /// Writes `expert.*` and `unlabeled.*` (plus truth sidecars) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.expert.save(&dir.join("expert"))?;
        self.expert_truth.save(&truth_path(&dir.join("expert")))?;
        self.unlabeled.save(&dir.join("unlabeled"))?;
        self.unlabeled_truth.save(&truth_path(&dir.join("unlabeled")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `1 - done` per row.
    pub fn not_done(&self) -> Array1<f64> {
        self.dones.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect()
    }
}

/// All transitions of a labeled dataset flattened for fast sampling.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    states: Array2<f64>,
    actions: Array2<f64>,
    next_states: Array2<f64>,
    rewards: Array1<f64>,
    dones: Vec<bool>,
}

impl TransitionTable {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.reward_status() != RewardStatus::Labeled {
            return Err(Error::Contract(format!(
                "training needs a labeled dataset (reward status is {:?}); run `label` first",
                ds.reward_status()
            )));
        }
        let n = ds.transition_count();
        if n == 0 {
            return Err(Error::Contract("dataset has no transitions".into()));
        }
        let (sd, ad) = (ds.manifest.state_dim, ds.manifest.action_dim);
        let mut states = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, sd));
        let mut rewards = Array1::zeros(n);
        let mut dones = vec![false; n];
        let mut row = 0;
        for ep in &ds.episodes {
            let r = ep.rewards.as_ref().expect("labeled dataset has rewards");
            let t = ep.transition_count();
            for k in 0..t {
                states.row_mut(row).assign(&ndarray::aview1(&ep.states[k]));
                next_states.row_mut(row).assign(&ndarray::aview1(&ep.states[k + 1]));
                actions.row_mut(row).assign(&ndarray::aview1(&ep.actions[k]));
                rewards[row] = r[k];
                dones[row] = k + 1 == t;
                row += 1;
            }
        }
        Ok(Self {
            states,
            actions,
            next_states,
            rewards,
            dones,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> TransitionBatch {
        TransitionBatch {
            states: self.states.select(ndarray::Axis(0), idx),
            actions: self.actions.select(ndarray::Axis(0), idx),
            next_states: self.next_states.select(ndarray::Axis(0), idx),
            rewards: self.rewards.select(ndarray::Axis(0), idx),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Result<TransitionBatch> {
        if size == 0 || size > self.len() {
            return Err(Error::Contract(format!(
                "batch size {size} must be in 1..={} (transition count)",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        Ok(self.rows(&idx))
    }
}

pub fn sample_batch(dataset: &Dataset, rng: &mut ChaCha8Rng, size: usize) -> Result<TransitionBatch> {
    TransitionTable::from_dataset(dataset)?.sample_batch(rng, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(status: RewardStatus) -> Dataset {
        let ep = |id: u64, base: f64| {
            Trajectory::new(
                id,
                "t",
                vec![vec![base], vec![base + 1.0], vec![base + 2.0]],
                vec![vec![0.5, -0.5], vec![0.25, 0.0]],
                (status != RewardStatus::Stripped).then(|| vec![base, -base]),
            )
            .unwrap()
        };
        Dataset::new("t", 2, status, vec![11, 12], vec![ep(0, 0.0), ep(1, 10.0)]).unwrap()
    }

    #[test]
    fn trajectory_length_contract() {
        assert!(Trajectory::new(0, "t", vec![vec![0.0], vec![1.0]], vec![], None).is_err());
        assert!(Trajectory::new(0, "t", vec![vec![0.0], vec![1.0]], vec![vec![1.0]], Some(vec![1.0, 2.0])).is_err());
        assert!(Trajectory::new(0, "t", vec![vec![f64::NAN]], vec![], None).is_err());
        let t = Trajectory::new(3, "t", vec![vec![0.0]], vec![], Some(vec![])).unwrap();
        assert_eq!(t.transition_count(), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(RewardStatus::GroundTruth);
        ds.episodes[0].states[1][0] = 0.1 + 0.2;
        ds.save(&dir.path().join("d")).unwrap();
        let back = Dataset::load(&dir.path().join("d.traj")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.episodes[0].states[1][0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(RewardStatus::Labeled);
        let p = dir.path().join("d");
        ds.save(&p).unwrap();
        let (traj, _) = dataset_paths(&p);
        let mut bytes = fs::read(&traj).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&traj, &bytes).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let mut ds = tiny(RewardStatus::Labeled);
        ds.manifest.episode_count = 3;
        assert!(matches!(ds.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn strip_is_idempotent_and_preserves_the_rest() {
        let ds = tiny(RewardStatus::GroundTruth);
        let s1 = strip_rewards(&ds);
        assert_eq!(s1.reward_status(), RewardStatus::Stripped);
        assert!(s1.episodes.iter().all(|e| e.rewards.is_none()));
        assert_eq!(strip_rewards(&s1), s1);
        for (a, b) in ds.episodes.iter().zip(&s1.episodes) {
            assert_eq!(a.states, b.states);
            assert_eq!(a.actions, b.actions);
        }
    }

    #[test]
    fn transition_table_marks_episode_ends() {
        let t = TransitionTable::from_dataset(&tiny(RewardStatus::Labeled)).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.dones, vec![false, true, false, true]);
        let b = t.rows(&[0, 1]);
        assert_eq!(b.next_states[[0, 0]], b.states[[1, 0]]);
        assert_eq!(b.rewards.to_vec(), vec![0.0, -0.0]);
    }

    #[test]
    fn sampling_requires_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for status in [RewardStatus::Stripped, RewardStatus::GroundTruth] {
            let err = sample_batch(&tiny(status), &mut rng, 1).unwrap_err();
            assert!(err.to_string().contains("run `label` first"), "{err}");
        }
    }

    #[test]
    fn single_transition_dataset() {
        let ep = Trajectory::new(0, "t", vec![vec![1.0], vec![2.0]], vec![vec![3.0]], Some(vec![4.0])).unwrap();
        let ds = Dataset::new("t", 1, RewardStatus::Labeled, vec![0], vec![ep]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = sample_batch(&ds, &mut rng, 1).unwrap();
        assert_eq!(b.states[[0, 0]], 1.0);
        assert_eq!(b.next_states[[0, 0]], 2.0);
        assert_eq!(b.actions[[0, 0]], 3.0);
        assert_eq!(b.rewards[0], 4.0);
        assert_eq!(b.dones, vec![true]);
        assert!(sample_batch(&ds, &mut rng, 2).is_err());
    }

    #[test]
    fn fixed_rng_gives_identical_batches() {
        let t = TransitionTable::from_dataset(&tiny(RewardStatus::Labeled)).unwrap();
        let a = t.sample_batch(&mut ChaCha8Rng::seed_from_u64(5), 3).unwrap();
        let b = t.sample_batch(&mut ChaCha8Rng::seed_from_u64(5), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform() {
        // 10 transitions, 1e5 single draws; chi-square with 9 dof.
        let states: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64]).collect();
        let actions = vec![vec![0.0]; 10];
        let ep = Trajectory::new(0, "t", states, actions, Some(vec![0.0; 10])).unwrap();
        let ds = Dataset::new("t", 10, RewardStatus::Labeled, vec![0], vec![ep]).unwrap();
        let t = TransitionTable::from_dataset(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = [0usize; 10];
        for _ in 0..10 {
            let b = t.sample_batch(&mut rng, 10).unwrap();
            let _ = b;
        }
        let draws = 100_000;
        for _ in 0..draws / 10 {
            let b = t.sample_batch(&mut rng, 10).unwrap();
            for s in b.states.column(0) {
                counts[*s as usize] += 1;
            }
        }
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square(9) is 27.88
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn corpus_counts_and_stripping() {
        let cfg = CorpusConfig {
            expert_episodes: 2,
            unlabeled_episodes: 3,
            ..CorpusConfig::default()
        };
        let env = EnvConfig {
            horizon: 20,
            ..EnvConfig::default()
        };
        let c = generate_corpus(&env, &cfg, 7).unwrap();
        assert_eq!(c.expert.manifest.episode_count, 2);
        assert_eq!(c.unlabeled.manifest.episode_count, 3);
        assert_eq!(c.unlabeled.reward_status(), RewardStatus::Stripped);
        assert!(c.unlabeled.episodes.iter().all(|e| e.rewards.is_none()));
        assert_eq!(c.unlabeled_truth.records.len(), 3);
        assert!(c.unlabeled.episodes.iter().all(|e| e.states.len() == 21));
    }

    #[test]
    fn corpus_files_are_reproducible() {
        let cfg = CorpusConfig {
            expert_episodes: 2,
            unlabeled_episodes: 4,
            ..CorpusConfig::default()
        };
        let env = EnvConfig {
            horizon: 30,
            ..EnvConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_corpus(&env, &cfg, 3).unwrap().save(a.path()).unwrap();
        generate_corpus(&env, &cfg, 3).unwrap().save(b.path()).unwrap();
        for name in [
            "expert.traj",
            "expert.manifest",
            "expert.truth.csv",
            "unlabeled.traj",
            "unlabeled.manifest",
            "unlabeled.truth.csv",
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let truth = GroundTruth::load(&truth_path(&a.path().join("unlabeled"))).unwrap();
        assert_eq!(truth.records.len(), 4);
    }

    #[test]
    fn paths_accept_either_form() {
        let (t, m) = dataset_paths(Path::new("out/x.traj"));
        assert_eq!(t, PathBuf::from("out/x.traj"));
        assert_eq!(m, PathBuf::from("out/x.manifest"));
        let (t, _) = dataset_paths(Path::new("out/x"));
        assert_eq!(t, PathBuf::from("out/x.traj"));
        assert_eq!(truth_path(Path::new("out/x")), PathBuf::from("out/x.truth.csv"));
    }
}
