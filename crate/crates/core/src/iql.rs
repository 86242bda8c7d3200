//! Implicit Q-learning on a labeled transition dataset.
//!
//! Twin critics with Polyak-averaged targets, an expectile-regression value
//! net and a Gaussian policy extracted by advantage-weighted regression.
//! Networks see standardized states and actions divided by the action bound.
//! The trainer never touches an environment.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_file, Dataset, TransitionBatch, TransitionTable};
use crate::env::{Action, Observation, Policy};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, MlpParams, DEFAULT_HIDDEN};
use crate::ot::Standardizer;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Cap on advantage weights `exp(A / temperature)`.
pub const MAX_AWR_WEIGHT: f64 = 100.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqlConfig {
    pub gamma: f64,
    pub soft_update_tau: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub expectile: f64,
    pub awr_temperature: f64,
    pub gradient_steps: usize,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    /// Steps between checkpoints (and evaluation callbacks).
    pub checkpoint_interval: usize,
    /// Largest absolute action component; actions are divided by it.
    pub action_bound: f64,
    pub standardize_states: bool,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            soft_update_tau: 0.005,
            batch_size: 256,
            learning_rate: 3e-4,
            expectile: 0.7,
            awr_temperature: 3.0,
            gradient_steps: 50_000,
            seed: 0,
            hidden_sizes: DEFAULT_HIDDEN.to_vec(),
            checkpoint_interval: 2_000,
            action_bound: 0.1,
            standardize_states: true,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("iql: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.soft_update_tau > 0.0 && self.soft_update_tau <= 1.0) {
            return bad("soft_update_tau must lie in (0, 1]");
        }
        if !(self.expectile > 0.5 && self.expectile < 1.0) {
            return bad("expectile must lie in (0.5, 1)");
        }
        if !(self.awr_temperature > 0.0) || !(self.learning_rate > 0.0) || !(self.action_bound > 0.0) {
            return bad("awr_temperature, learning_rate and action_bound must be positive");
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size and checkpoint_interval must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IqlNets {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub value: MlpParams,
    /// Outputs `[mean_raw (action_dim), log_std_raw (action_dim)]`.
    pub policy: MlpParams,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub value_opt: AdamState,
    pub policy_opt: AdamState,
    pub state_norm: Standardizer,
    pub action_bound: f64,
}

impl IqlNets {
    pub fn new(config: &IqlConfig, state_dim: usize, action_dim: usize, state_norm: Standardizer) -> Result<Self> {
        if state_norm.dim() != state_dim {
            return Err(Error::Dimension("state normalizer dimension mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = &config.hidden_sizes;
        let q1 = MlpParams::init(rng.random(), state_dim + action_dim, 1, h)?;
        let q2 = MlpParams::init(rng.random(), state_dim + action_dim, 1, h)?;
        let value = MlpParams::init(rng.random(), state_dim, 1, h)?;
        let policy = MlpParams::init(rng.random(), state_dim, 2 * action_dim, h)?;
        let lr = config.learning_rate;
        Ok(Self {
            q1_opt: AdamState::new(&q1, lr),
            q2_opt: AdamState::new(&q2, lr),
            value_opt: AdamState::new(&value, lr),
            policy_opt: AdamState::new(&policy, lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            value,
            policy,
            state_norm,
            action_bound: config.action_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.value.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.out_dim() / 2
    }

    pub fn normalize_states(&self, states: ArrayView2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.state_norm.mean.clone());
        let scale = Array1::from(self.state_norm.scale.clone());
        (&states - &mean) / &scale
    }

    pub fn normalize_actions(&self, actions: ArrayView2<f64>) -> Array2<f64> {
        actions.mapv(|a| a / self.action_bound)
    }

    fn check_batch(&self, batch: &TransitionBatch) -> Result<()> {
        if batch.states.ncols() != self.state_dim() || batch.actions.ncols() != self.action_dim() {
            return Err(Error::Dimension(format!(
                "batch has state/action dims {}/{}, networks expect {}/{}",
                batch.states.ncols(),
                batch.actions.ncols(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// `(mean, log_std)` in normalized action units.
    pub fn policy_head(&self, states_norm: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.policy.forward_batch(states_norm)?;
        let d = self.action_dim();
        Ok((
            out.slice(s![.., ..d]).mapv(f64::tanh),
            out.slice(s![.., d..]).mapv(squash_log_std),
        ))
    }

    /// Writes every network plus a metadata file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, net) in self.named() {
            net.save(&dir.join(format!("{name}.otrm")))?;
        }
        let meta = CheckpointMeta {
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            action_bound: self.action_bound,
            state_mean: self.state_norm.mean.clone(),
            state_scale: self.state_norm.scale.clone(),
        };
        let path = dir.join("meta.toml");
        let text = toml::to_string(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
        write_file(&path, text.as_bytes())
    }

    /// Loads a checkpoint written by [`IqlNets::save`]; optimizer moments start fresh.
    pub fn load(dir: &Path, learning_rate: f64) -> Result<Self> {
        let path = dir.join("meta.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let load = |n: &str| MlpParams::load(&dir.join(format!("{n}.otrm")));
        let (q1, q2, value, policy) = (load("q1")?, load("q2")?, load("value")?, load("policy")?);
        let nets = Self {
            q1_opt: AdamState::new(&q1, learning_rate),
            q2_opt: AdamState::new(&q2, learning_rate),
            value_opt: AdamState::new(&value, learning_rate),
            policy_opt: AdamState::new(&policy, learning_rate),
            q1_target: load("q1_target")?,
            q2_target: load("q2_target")?,
            q1,
            q2,
            value,
            policy,
            state_norm: Standardizer {
                mean: meta.state_mean,
                scale: meta.state_scale,
            },
            action_bound: meta.action_bound,
        };
        if nets.state_dim() != meta.state_dim
            || nets.action_dim() != meta.action_dim
            || nets.q1.in_dim() != meta.state_dim + meta.action_dim
            || nets.state_norm.dim() != meta.state_dim
        {
            return Err(Error::format(dir, "networks disagree with checkpoint metadata"));
        }
        Ok(nets)
    }

    fn named(&self) -> [(&'static str, &MlpParams); 6] {
        [
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
            ("value", &self.value),
            ("policy", &self.policy),
        ]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    state_dim: usize,
    action_dim: usize,
    action_bound: f64,
    state_mean: Vec<f64>,
    state_scale: Vec<f64>,
}

/// Maps an unbounded head output smoothly onto `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn column(a: Array2<f64>) -> Array1<f64> {
    a.index_axis_move(Axis(1), 0)
}

fn critic_input(states_norm: ArrayView2<f64>, actions_norm: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), states_norm, actions_norm]
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!("{what} loss is not finite")))
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct CriticLossGrad {
    pub loss: f64,
    pub q1: Gradients,
    pub q2: Gradients,
}

/// Batch tensors in network units.
struct Prepared {
    states: Array2<f64>,
    next_states: Array2<f64>,
    sa: Array2<f64>,
    actions: Array2<f64>,
}

fn prepare(nets: &IqlNets, batch: &TransitionBatch) -> Result<Prepared> {
    nets.check_batch(batch)?;
    let states = nets.normalize_states(batch.states.view());
    let actions = nets.normalize_actions(batch.actions.view());
    Ok(Prepared {
        sa: critic_input(states.view(), actions.view()),
        next_states: nets.normalize_states(batch.next_states.view()),
        states,
        actions,
    })
}

fn min_target_q(nets: &IqlNets, sa: ArrayView2<f64>) -> Result<Array1<f64>> {
    let a = column(nets.q1_target.forward_batch(sa)?);
    let b = column(nets.q2_target.forward_batch(sa)?);
    Ok(Zip::from(&a).and(&b).map_collect(|x, y| x.min(*y)))
}

fn value_step(value: &MlpParams, states: ArrayView2<f64>, target_q: &Array1<f64>, expectile: f64) -> Result<LossGrad> {
    let (v, cache) = value.forward_cached(states)?;
    let n = target_q.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((target_q.len(), 1));
    for (k, (&q, &v)) in target_q.iter().zip(v.column(0)).enumerate() {
        let u = q - v;
        let w = if u < 0.0 { 1.0 - expectile } else { expectile };
        loss += w * u * u / n;
        grad[[k, 0]] = -2.0 * w * u / n;
    }
    let loss = finite(loss, "value")?;
    let (grads, _) = value.backward_batch(&cache, grad.view())?;
    Ok(LossGrad { loss, grads })
}

fn critic_step(nets: &IqlNets, p: &Prepared, batch: &TransitionBatch, gamma: f64) -> Result<CriticLossGrad> {
    let v_next = column(nets.value.forward_batch(p.next_states.view())?);
    let target = &batch.rewards + &(gamma * &batch.not_done() * &v_next);
    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for q in [&nets.q1, &nets.q2] {
        let (out, cache) = q.forward_cached(p.sa.view())?;
        let diff = &out.column(0) - &target;
        loss += diff.mapv(|d| d * d).sum() / n;
        let g = diff.mapv(|d| 2.0 * d / n).insert_axis(Axis(1));
        grads.push(q.backward_batch(&cache, g.view())?.0);
    }
    let loss = finite(loss, "critic")?;
    let q2 = grads.pop().expect("two critics");
    let q1 = grads.pop().expect("two critics");
    Ok(CriticLossGrad { loss, q1, q2 })
}

/// `min(exp(advantage / temperature), MAX_AWR_WEIGHT)`.
pub fn awr_weight(advantage: f64, temperature: f64) -> f64 {
    (advantage / temperature).exp().min(MAX_AWR_WEIGHT)
}

fn policy_step(
    policy: &MlpParams,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    advantages: &Array1<f64>,
    temperature: f64,
) -> Result<LossGrad> {
    let (out, cache) = policy.forward_cached(states)?;
    let d = actions.ncols();
    let n = actions.nrows() as f64;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (k, &adv) in advantages.iter().enumerate() {
        let w = awr_weight(adv, temperature);
        let mut log_prob = 0.0;
        for j in 0..d {
            let mean = out[[k, j]].tanh();
            let t = out[[k, d + j]].tanh();
            let log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (t + 1.0);
            let z = (actions[[k, j]] - mean) * (-log_std).exp();
            log_prob += -0.5 * z * z - log_std - HALF_LN_2PI;
            // d(-w log p)/d mean = -w z / sigma; d(-w log p)/d log_std = -w (z^2 - 1)
            let d_mean = -w * z * (-log_std).exp();
            let d_log_std = -w * (z * z - 1.0);
            grad[[k, j]] = d_mean * (1.0 - mean * mean) / n;
            grad[[k, d + j]] = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t) / n;
        }
        loss -= w * log_prob / n;
    }
    let loss = finite(loss, "policy")?;
    let (grads, _) = policy.backward_batch(&cache, grad.view())?;
    Ok(LossGrad { loss, grads })
}

/// Expectile regression of `V(s)` onto `min(Q1_target, Q2_target)(s, a)`.
pub fn value_loss(nets: &IqlNets, batch: &TransitionBatch, expectile: f64) -> Result<LossGrad> {
    let p = prepare(nets, batch)?;
    let q = min_target_q(nets, p.sa.view())?;
    value_step(&nets.value, p.states.view(), &q, expectile)
}

/// Squared TD error of both critics against `r + gamma (1 - done) V(s')`.
pub fn critic_loss(nets: &IqlNets, batch: &TransitionBatch, gamma: f64) -> Result<CriticLossGrad> {
    let p = prepare(nets, batch)?;
    critic_step(nets, &p, batch, gamma)
}

/// Advantage-weighted negative log-likelihood of the dataset actions.
pub fn policy_loss(nets: &IqlNets, batch: &TransitionBatch, temperature: f64) -> Result<LossGrad> {
    let p = prepare(nets, batch)?;
    let q = min_target_q(nets, p.sa.view())?;
    let v = column(nets.value.forward_batch(p.states.view())?);
    policy_step(&nets.policy, p.states.view(), p.actions.view(), &(q - v), temperature)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub value: f64,
    pub critic: f64,
    pub policy: f64,
}

/// One gradient step: value, then critics, then policy, then target update.
pub fn update(nets: &mut IqlNets, batch: &TransitionBatch, cfg: &IqlConfig) -> Result<StepLosses> {
    let p = prepare(nets, batch)?;
    let target_q = min_target_q(nets, p.sa.view())?;

    let v = value_step(&nets.value, p.states.view(), &target_q, cfg.expectile)?;
    adam_step(&mut nets.value, &v.grads, &mut nets.value_opt)?;

    let c = critic_step(nets, &p, batch, cfg.gamma)?;
    adam_step(&mut nets.q1, &c.q1, &mut nets.q1_opt)?;
    adam_step(&mut nets.q2, &c.q2, &mut nets.q2_opt)?;

    let values = column(nets.value.forward_batch(p.states.view())?);
    let pi = policy_step(
        &nets.policy,
        p.states.view(),
        p.actions.view(),
        &(target_q - values),
        cfg.awr_temperature,
    )?;
    adam_step(&mut nets.policy, &pi.grads, &mut nets.policy_opt)?;

    nets.q1_target.soft_update_from(&nets.q1, cfg.soft_update_tau);
    nets.q2_target.soft_update_from(&nets.q2, cfg.soft_update_tau);
    Ok(StepLosses {
        value: v.loss,
        critic: c.loss,
        policy: pi.loss,
    })
}

/// Action in environment units. Deterministic mode returns the squashed mean
/// times the action bound; stochastic mode samples the Gaussian around it.
pub fn act<R: Rng + ?Sized>(nets: &IqlNets, state: &[f64], deterministic: bool, rng: &mut R) -> Result<Vec<f64>> {
    if state.len() != nets.state_dim() {
        return Err(Error::Dimension(format!(
            "state has {} entries, policy expects {}",
            state.len(),
            nets.state_dim()
        )));
    }
    let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row vector");
    let (mean, log_std) = nets.policy_head(nets.normalize_states(x.view()).view())?;
    Ok(mean
        .row(0)
        .iter()
        .zip(log_std.row(0))
        .map(|(&m, &ls)| {
            let a = if deterministic {
                m
            } else {
                m + ls.exp() * rng.sample::<f64, _>(StandardNormal)
            };
            a * nets.action_bound
        })
        .collect())
}

/// Environment-facing wrapper around a trained policy.
pub struct IqlPolicy {
    pub nets: IqlNets,
    pub deterministic: bool,
    rng: ChaCha8Rng,
}

impl IqlPolicy {
    pub fn new(nets: IqlNets, deterministic: bool, seed: u64) -> Self {
        Self {
            nets,
            deterministic,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for IqlPolicy {
    fn act(&mut self, obs: &Observation) -> Action {
        let s = crate::env::state_vector(obs);
        let a = act(&self.nets, &s, self.deterministic, &mut self.rng).expect("policy matches env state layout");
        Action::from_slice(&a).expect("policy emits three action components")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub return_mean: f64,
    pub return_std: f64,
    pub episode_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub value_loss: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub eval_episode_steps: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: IqlNets,
    pub metrics: Vec<MetricsRow>,
}

/// Runs `gradient_steps` updates. `on_checkpoint` is called with the networks
/// at step 0, every `checkpoint_interval` steps and at the final step; it may
/// save them and return an evaluation for the metrics log. Losses in each row
/// are means over the steps since the previous row.
pub fn train(
    config: &IqlConfig,
    dataset: &Dataset,
    mut on_checkpoint: impl FnMut(usize, &IqlNets) -> Result<Option<CheckpointEval>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let table = TransitionTable::from_dataset(dataset)?;
    let batch_size = config.batch_size.min(table.len());
    if batch_size < config.batch_size {
        log::warn!("dataset has {} transitions; batch size reduced to match", table.len());
    }
    let state_norm = if config.standardize_states {
        Standardizer::fit(dataset.episodes.iter().flat_map(|e| e.states.iter().map(Vec::as_slice)))?
    } else {
        Standardizer::identity(table.state_dim())
    };
    let mut nets = IqlNets::new(config, table.state_dim(), table.action_dim(), state_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut metrics = Vec::new();
    let row = |step: usize, acc: StepLosses, count: usize, eval: Option<CheckpointEval>| {
        let k = count.max(1) as f64;
        MetricsRow {
            step,
            value_loss: acc.value / k,
            critic_loss: acc.critic / k,
            policy_loss: acc.policy / k,
            eval_return_mean: eval.map(|e| e.return_mean),
            eval_return_std: eval.map(|e| e.return_std),
            eval_episode_steps: eval.map(|e| e.episode_steps),
        }
    };
    let eval = on_checkpoint(0, &nets)?;
    metrics.push(row(0, StepLosses::default(), 0, eval));
    let mut acc = StepLosses::default();
    let mut count = 0;
    for step in 1..=config.gradient_steps {
        let batch = table.sample_batch(&mut rng, batch_size)?;
        let l = update(&mut nets, &batch, config).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("gradient step {step}: {m}")),
            other => other,
        })?;
        acc.value += l.value;
        acc.critic += l.critic;
        acc.policy += l.policy;
        count += 1;
        if step % config.checkpoint_interval == 0 || step == config.gradient_steps {
            let eval = on_checkpoint(step, &nets)?;
            metrics.push(row(step, acc, count, eval));
            log::info!(
                "step {step}: value {:.4} critic {:.4} policy {:.4}",
                acc.value / count as f64,
                acc.critic / count as f64,
                acc.policy / count as f64
            );
            acc = StepLosses::default();
            count = 0;
        }
    }
    Ok(TrainOutcome { nets, metrics })
}

/// CSV form of a metrics log; missing evaluations are empty cells.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{RewardStatus, Trajectory};

    fn small_config() -> IqlConfig {
        IqlConfig {
            hidden_sizes: vec![8, 8],
            batch_size: 4,
            gradient_steps: 3,
            checkpoint_interval: 2,
            ..IqlConfig::default()
        }
    }

    fn dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<Vec<f64>> = (0..=n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let actions = (0..n).map(|_| (0..2).map(|_| rng.random_range(-0.1..0.1)).collect()).collect();
        let rewards = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let ep = Trajectory::new(0, "t", states, actions, Some(rewards)).unwrap();
        Dataset::new("t", n, RewardStatus::Labeled, vec![seed], vec![ep]).unwrap()
    }

    fn batch(nets: &IqlNets, n: usize, seed: u64) -> TransitionBatch {
        let ds = dataset(n, seed);
        let t = TransitionTable::from_dataset(&ds).unwrap();
        let _ = nets;
        t.rows(&(0..n).collect::<Vec<_>>())
    }

    fn nets() -> IqlNets {
        IqlNets::new(&small_config(), 3, 2, Standardizer::identity(3)).unwrap()
    }

    #[test]
    fn targets_start_equal_to_online() {
        let n = nets();
        assert_eq!(n.q1.to_flat(), n.q1_target.to_flat());
        assert_eq!(n.q2.to_flat(), n.q2_target.to_flat());
        assert_ne!(n.q1.to_flat(), n.q2.to_flat());
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = IqlConfig {
            gradient_steps: 0,
            ..small_config()
        };
        let ds = dataset(10, 1);
        let mut seen = Vec::new();
        let out = train(&cfg, &ds, |step, n| {
            seen.push((step, n.policy.to_flat()));
            Ok(None)
        })
        .unwrap();
        let init = IqlNets::new(&cfg, 3, 2, Standardizer::fit(ds.episodes[0].states.iter().map(Vec::as_slice)).unwrap())
            .unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(out.nets.policy.to_flat(), init.policy.to_flat());
        assert_eq!(out.nets.q1.to_flat(), init.q1.to_flat());
    }

    #[test]
    fn tau_one_copies_online_into_targets() {
        let cfg = IqlConfig {
            soft_update_tau: 1.0,
            ..small_config()
        };
        let mut n = nets();
        let b = batch(&n, 6, 2);
        update(&mut n, &b, &cfg).unwrap();
        assert_eq!(n.q1.to_flat(), n.q1_target.to_flat());
        assert_eq!(n.q2.to_flat(), n.q2_target.to_flat());
    }

    #[test]
    fn value_loss_is_zero_when_v_matches_targets() {
        let mut n = nets();
        // Zero the last layers: both Q targets and V output their (zero) bias.
        for net in [&mut n.q1_target, &mut n.q2_target, &mut n.value] {
            let last = net.layer_weights.len() - 1;
            net.layer_weights[last].fill(0.0);
            net.layer_biases[last].fill(0.7);
        }
        let b = batch(&n, 5, 3);
        assert_eq!(value_loss(&n, &b, 0.7).unwrap().loss, 0.0);
    }

    #[test]
    fn half_expectile_is_half_least_squares() {
        let n = nets();
        let b = batch(&n, 7, 4);
        let p = prepare(&n, &b).unwrap();
        let q = min_target_q(&n, p.sa.view()).unwrap();
        let v = column(n.value.forward_batch(p.states.view()).unwrap());
        let mse = (&q - &v).mapv(|u| u * u).mean().unwrap();
        let l = value_loss(&n, &b, 0.5).unwrap().loss;
        assert!((l - 0.5 * mse).abs() < 1e-12);
    }

    #[test]
    fn terminal_targets_are_rewards() {
        let mut n = nets();
        let last = n.q1.layer_weights.len() - 1;
        // Q1 outputs exactly 2.5 everywhere.
        n.q1.layer_weights[last].fill(0.0);
        n.q1.layer_biases[last].fill(2.5);
        let mut b = batch(&n, 3, 5);
        b.dones = vec![true; 3];
        b.rewards.fill(2.5);
        let c = critic_loss(&n, &b, 0.99).unwrap();
        assert_eq!(c.q1.to_flat().iter().map(|g| g.abs()).sum::<f64>(), 0.0);
        let q2 = column(n.q2.forward_batch(prepare(&n, &b).unwrap().sa.view()).unwrap());
        let expect = q2.mapv(|q| (q - 2.5).powi(2)).mean().unwrap();
        assert!((c.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_clamp() {
        assert_eq!(awr_weight(30.0, 3.0), 100.0);
        assert_eq!(awr_weight(0.0, 3.0), 1.0);
        assert!((awr_weight(-3.0, 3.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_actions_are_bounded_and_repeatable() {
        let n = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let a = act(&n, &s, true, &mut rng).unwrap();
            assert!(a.iter().all(|x| x.abs() <= n.action_bound));
            assert_eq!(a, act(&n, &s, true, &mut rng).unwrap());
        }
        assert!(matches!(act(&n, &[0.0; 4], true, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn stochastic_mean_matches_deterministic() {
        let n = nets();
        let s = [0.3, -0.2, 0.9];
        let det = act(&n, &s, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, log_std) = n.policy_head(n.normalize_states(ndarray::aview2(&[s]).view()).view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..draws {
            let a = act(&n, &s, false, &mut rng).unwrap();
            sum[0] += a[0];
            sum[1] += a[1];
        }
        for j in 0..2 {
            let sigma = log_std[[0, j]].exp() * n.action_bound;
            let err = (sum[j] / draws as f64 - det[j]).abs();
            assert!(err < 3.0 * sigma / (draws as f64).sqrt(), "dim {j}: {err} vs sigma {sigma}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n = nets();
        n.save(dir.path()).unwrap();
        let back = IqlNets::load(dir.path(), 3e-4).unwrap();
        assert_eq!(back.policy, n.policy);
        assert_eq!(back.q2_target, n.q2_target);
        assert_eq!(back.state_norm, n.state_norm);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset(30, 7);
        let run = || train(&small_config(), &ds, |_, _| Ok(None)).unwrap().metrics;
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn unlabeled_data_is_refused() {
        let mut ds = dataset(5, 0);
        ds.episodes[0].rewards = None;
        ds.manifest.reward_status = RewardStatus::Stripped;
        let err = train(&small_config(), &ds, |_, _| Ok(None)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
