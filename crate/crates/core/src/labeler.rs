//! Optimal-transport reward labeling.
//!
//! Each unlabeled episode is aligned with every expert demonstration; state
//! `t` receives `-sum_t' c(s_t, e_t') * plan[t, t']` and the expert giving the
//! highest return is kept. Rewards are then squashed with `alpha * exp(beta * r)`.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelingRecord, RewardStatus, Trajectory};
use crate::error::{Error, Result};
use crate::ot::{self, CostMatrix, CostMetric, EmpiricalDistribution, SinkhornConfig, Standardizer};

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Sinkhorn,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtConfig {
    pub metric: CostMetric,
    pub solver: SolverKind,
    pub sinkhorn: SinkhornConfig,
    /// Divide each cost matrix by its mean before solving, so `epsilon` is
    /// relative to the typical cost. Rewards always use the original costs.
    pub normalize_cost: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            metric: CostMetric::SquaredEuclidean,
            solver: SolverKind::Sinkhorn,
            sinkhorn: SinkhornConfig::default(),
            normalize_cost: true,
        }
    }
}

impl OtConfig {
    pub fn exact() -> Self {
        Self {
            solver: SolverKind::Exact,
            normalize_cost: false,
            ..Self::default()
        }
    }

    pub fn sinkhorn(epsilon: f64) -> Self {
        Self {
            sinkhorn: SinkhornConfig {
                epsilon,
                ..SinkhornConfig::default()
            },
            normalize_cost: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub ot: OtConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Standardize states with expert-set mean and std before computing costs.
    pub standardize: bool,
    /// Abort when more than this fraction of episodes fail to label.
    pub max_failure_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            ot: OtConfig::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            standardize: true,
            max_failure_fraction: 0.1,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.ot.sinkhorn.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAssignment {
    /// One reward per state.
    pub per_state_rewards: Vec<f64>,
    pub source_expert: u64,
    pub episodic_return: f64,
    pub squashed: bool,
    /// False when the sinkhorn iteration hit its cap before the tolerance.
    pub converged: bool,
}

impl RewardAssignment {
    fn raw(per_state_rewards: Vec<f64>, source_expert: u64, converged: bool) -> Self {
        let episodic_return = per_state_rewards.iter().sum();
        Self {
            per_state_rewards,
            source_expert,
            episodic_return,
            squashed: false,
            converged,
        }
    }

    /// Rewards attached to transitions: transition `t` gets the reward of
    /// `s_t`, and the reward of the final state is dropped.
    pub fn transition_rewards(&self, transitions: usize) -> Vec<f64> {
        self.per_state_rewards[..transitions].to_vec()
    }
}

/// Per-state rewards `-sum_j c[i, j] * plan[i, j]`.
pub fn rewards_from_plan(cost: &CostMatrix, plan: &ndarray::Array2<f64>) -> Vec<f64> {
    cost.entries()
        .rows()
        .into_iter()
        .zip(plan.rows())
        .map(|(c, p)| -c.iter().zip(p).map(|(c, p)| c * p).sum::<f64>())
        .collect()
}

fn solve(cost: &CostMatrix, cfg: &OtConfig) -> Result<(ndarray::Array2<f64>, bool)> {
    match cfg.solver {
        SolverKind::Exact => ot::exact_ot(cost).map(|s| (s.plan.coupling, true)),
        SolverKind::Sinkhorn => {
            let mean = cost.entries().mean().unwrap_or(0.0);
            let sol = if cfg.normalize_cost && mean > 0.0 {
                ot::sinkhorn(&cost.scaled(1.0 / mean)?, &cfg.sinkhorn)?
            } else {
                ot::sinkhorn(cost, &cfg.sinkhorn)?
            };
            Ok((sol.plan.coupling, sol.converged))
        }
    }
}

pub fn label_against_expert_with(
    unlabeled: &Trajectory,
    expert: &Trajectory,
    cfg: &OtConfig,
    standardizer: Option<&Standardizer>,
) -> Result<RewardAssignment> {
    let fail = |reason: String| Error::Labeling {
        episode_id: unlabeled.episode_id,
        reason,
    };
    let u = EmpiricalDistribution::new(unlabeled.states.clone()).map_err(|e| fail(e.to_string()))?;
    let e = EmpiricalDistribution::new(expert.states.clone()).map_err(|e| fail(e.to_string()))?;
    let cost = ot::build_cost_matrix(&u, &e, cfg.metric, standardizer).map_err(|e| fail(e.to_string()))?;
    let (plan, converged) = solve(&cost, cfg).map_err(|e| fail(e.to_string()))?;
    let rewards = rewards_from_plan(&cost, &plan);
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(fail("non-finite reward".into()));
    }
    Ok(RewardAssignment::raw(rewards, expert.episode_id, converged))
}

pub fn label_against_expert(unlabeled: &Trajectory, expert: &Trajectory, cfg: &OtConfig) -> Result<RewardAssignment> {
    label_against_expert_with(unlabeled, expert, cfg, None)
}

/// Labels against each expert and keeps the highest raw return; ties go to
/// the earliest expert. Individual expert failures are skipped.
pub fn select_best_expert_with(
    unlabeled: &Trajectory,
    experts: &[Trajectory],
    cfg: &OtConfig,
    standardizer: Option<&Standardizer>,
) -> Result<RewardAssignment> {
    let mut best: Option<RewardAssignment> = None;
    let mut last_err = None;
    for expert in experts {
        match label_against_expert_with(unlabeled, expert, cfg, standardizer) {
            Ok(a) => {
                if best.as_ref().is_none_or(|b| a.episodic_return > b.episodic_return) {
                    best = Some(a);
                }
            }
            Err(e) => {
                log::debug!("episode {}: expert {} failed: {e}", unlabeled.episode_id, expert.episode_id);
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| Error::Labeling {
        episode_id: unlabeled.episode_id,
        reason: match last_err {
            Some(e) => format!("every expert failed; last error: {e}"),
            None => "no experts given".into(),
        },
    })
}

pub fn select_best_expert(unlabeled: &Trajectory, experts: &[Trajectory], cfg: &OtConfig) -> Result<RewardAssignment> {
    select_best_expert_with(unlabeled, experts, cfg, None)
}

/// `alpha * exp(beta * r)`, kept strictly positive.
pub fn squash(r: f64, alpha: f64, beta: f64) -> f64 {
    (alpha * (beta * r).exp()).max(f64::MIN_POSITIVE)
}

pub fn squash_rewards(raw: &RewardAssignment, alpha: f64, beta: f64) -> RewardAssignment {
    let per_state_rewards: Vec<f64> = raw.per_state_rewards.iter().map(|&r| squash(r, alpha, beta)).collect();
    RewardAssignment {
        episodic_return: per_state_rewards.iter().sum(),
        per_state_rewards,
        squashed: true,
        ..raw.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLabel {
    pub episode_id: u64,
    pub source_expert: Option<u64>,
    pub raw_return: Option<f64>,
    pub squashed_return: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingReport {
    pub episodes: Vec<EpisodeLabel>,
    pub failed: usize,
}

impl LabelingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn raw_returns(&self) -> Vec<Option<f64>> {
        self.episodes.iter().map(|e| e.raw_return).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabelOutcome {
    pub dataset: Dataset,
    pub report: LabelingReport,
}

/// Labels every unlabeled episode against the experts. Episodes that fail are
/// dropped from the output (with a warning); the run aborts if the failure
/// fraction exceeds the configured limit.
pub fn label_dataset(experts: &Dataset, unlabeled: &Dataset, cfg: &LabelConfig) -> Result<LabelOutcome> {
    cfg.validate()?;
    if experts.episodes.is_empty() || unlabeled.episodes.is_empty() {
        return Err(Error::Contract("labeling needs at least one expert and one unlabeled episode".into()));
    }
    if experts.manifest.state_dim != unlabeled.manifest.state_dim {
        return Err(Error::Dimension(format!(
            "expert state dim {} != unlabeled state dim {}",
            experts.manifest.state_dim, unlabeled.manifest.state_dim
        )));
    }
    let standardizer = if cfg.standardize {
        Some(Standardizer::fit(experts.episodes.iter().flat_map(|e| e.states.iter().map(Vec::as_slice)))?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(unlabeled.episodes.len());
    let mut seeds = Vec::with_capacity(unlabeled.episodes.len());
    let mut labels = Vec::with_capacity(unlabeled.episodes.len());
    let mut failed_ids = Vec::new();
    for (k, ep) in unlabeled.episodes.iter().enumerate() {
        // Only states are read; any rewards on the input are ignored.
        match select_best_expert_with(ep, &experts.episodes, &cfg.ot, standardizer.as_ref()) {
            Ok(raw) => {
                let sq = squash_rewards(&raw, cfg.alpha, cfg.beta);
                if !raw.converged {
                    log::warn!("episode {}: sinkhorn did not reach tolerance", ep.episode_id);
                }
                labels.push(EpisodeLabel {
                    episode_id: ep.episode_id,
                    source_expert: Some(raw.source_expert),
                    raw_return: Some(raw.episodic_return),
                    squashed_return: Some(sq.episodic_return),
                    converged: raw.converged,
                    error: None,
                });
                let mut labeled = ep.clone();
                labeled.rewards = Some(sq.transition_rewards(ep.transition_count()));
                out.push(labeled);
                if let Some(s) = unlabeled.manifest.generator_seeds.get(k) {
                    seeds.push(*s);
                }
            }
            Err(e) => {
                log::warn!("skipping episode {}: {e}", ep.episode_id);
                failed_ids.push(ep.episode_id);
                labels.push(EpisodeLabel {
                    episode_id: ep.episode_id,
                    source_expert: None,
                    raw_return: None,
                    squashed_return: None,
                    converged: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let failed = failed_ids.len();
    if failed as f64 > cfg.max_failure_fraction * unlabeled.episodes.len() as f64 || out.is_empty() {
        return Err(Error::Labeling {
            episode_id: failed_ids[0],
            reason: format!(
                "{failed} of {} episodes failed, above the {:.0}% limit",
                unlabeled.episodes.len(),
                cfg.max_failure_fraction * 100.0
            ),
        });
    }

    let mut manifest = unlabeled.manifest.clone();
    manifest.reward_status = RewardStatus::Labeled;
    manifest.episode_count = out.len();
    manifest.generator_seeds = seeds;
    manifest.labeling = Some(LabelingRecord {
        metric: format!("{:?}", cfg.ot.metric),
        epsilon: cfg.ot.sinkhorn.epsilon,
        alpha: cfg.alpha,
        beta: cfg.beta,
        expert_count: experts.episodes.len(),
        failed_episodes: failed_ids,
    });
    let dataset = Dataset { manifest, episodes: out };
    dataset.validate()?;
    Ok(LabelOutcome {
        dataset,
        report: LabelingReport { episodes: labels, failed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: u64, states: &[&[f64]]) -> Trajectory {
        Trajectory::from_states(id, states.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    #[test]
    fn self_alignment_is_zero_exact() {
        let e = traj(0, &[&[0.0, 0.0], &[1.0, 0.5], &[2.0, -1.0], &[0.3, 0.3]]);
        let a = label_against_expert(&e, &e, &OtConfig::exact()).unwrap();
        assert!(a.per_state_rewards.iter().all(|&r| r == 0.0 || r == -0.0));
        assert_eq!(a.per_state_rewards.len(), 4);
    }

    #[test]
    fn self_alignment_is_near_zero_sinkhorn() {
        let e = traj(0, &[&[0.0, 0.0], &[1.0, 0.5], &[2.0, -1.0], &[0.3, 0.3]]);
        let a = label_against_expert(&e, &e, &OtConfig::sinkhorn(0.005)).unwrap();
        assert!(a.per_state_rewards.iter().all(|r| r.abs() < 1e-6), "{:?}", a.per_state_rewards);
    }

    #[test]
    fn single_states_give_negative_cost() {
        let u = traj(0, &[&[1.0, 2.0]]);
        let e = traj(1, &[&[4.0, 6.0]]);
        let a = label_against_expert(&u, &e, &OtConfig::exact()).unwrap();
        assert_eq!(a.per_state_rewards, vec![-25.0]);
        assert_eq!(a.source_expert, 1);
    }

    #[test]
    fn raw_rewards_are_nonpositive() {
        let u = traj(0, &[&[0.1], &[0.7], &[-2.0]]);
        let e = traj(1, &[&[0.0], &[1.0]]);
        for cfg in [OtConfig::exact(), OtConfig::sinkhorn(0.01), OtConfig::default()] {
            let a = label_against_expert(&u, &e, &cfg).unwrap();
            assert!(a.per_state_rewards.iter().all(|&r| r <= 0.0));
        }
    }

    #[test]
    fn best_expert_is_the_identical_one() {
        let u = traj(7, &[&[0.0], &[1.0], &[2.0]]);
        let far = traj(3, &[&[5.0], &[6.0], &[7.0]]);
        let same = traj(4, &[&[0.0], &[1.0], &[2.0]]);
        let a = select_best_expert(&u, &[far, same], &OtConfig::exact()).unwrap();
        assert_eq!(a.source_expert, 4);
        assert_eq!(a.episodic_return, 0.0);
    }

    #[test]
    fn ties_go_to_the_first_expert() {
        let u = traj(0, &[&[0.0]]);
        let a = select_best_expert(&u, &[traj(9, &[&[1.0]]), traj(2, &[&[-1.0]])], &OtConfig::exact()).unwrap();
        assert_eq!(a.source_expert, 9);
    }

    #[test]
    fn no_experts_is_a_labeling_error() {
        let u = traj(5, &[&[0.0]]);
        match select_best_expert(&u, &[], &OtConfig::exact()) {
            Err(Error::Labeling { episode_id, .. }) => assert_eq!(episode_id, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_carries_episode_id() {
        let u = traj(5, &[&[0.0]]);
        let e = traj(1, &[&[0.0, 1.0]]);
        assert!(matches!(
            label_against_expert(&u, &e, &OtConfig::exact()),
            Err(Error::Labeling { episode_id: 5, .. })
        ));
    }

    #[test]
    fn squash_defaults() {
        assert_eq!(squash(0.0, DEFAULT_ALPHA, DEFAULT_BETA), 5.0);
        assert!((squash(-1.0, 5.0, 1.0) - 1.839_397_205_857_211_6).abs() < 1e-12);
        let tiny = squash(-1e6, 5.0, 1.0);
        assert!(tiny > 0.0 && tiny < 1e-300);
    }

    #[test]
    fn transition_rewards_drop_the_last_state() {
        let a = RewardAssignment::raw(vec![-1.0, -2.0, -3.0], 0, true);
        assert_eq!(a.transition_rewards(2), vec![-1.0, -2.0]);
        assert_eq!(a.episodic_return, -6.0);
    }

    fn dataset(eps: Vec<Trajectory>) -> Dataset {
        let seeds = (0..eps.len() as u64).collect();
        Dataset::new("states-only", 2, RewardStatus::Stripped, seeds, eps).unwrap()
    }

    #[test]
    fn experts_labeled_against_themselves_get_alpha() {
        let experts = dataset(vec![
            traj(0, &[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0]]),
            traj(1, &[&[3.0, 1.0], &[1.0, 4.0], &[0.0, 2.0]]),
        ]);
        let cfg = LabelConfig {
            ot: OtConfig::exact(),
            ..LabelConfig::default()
        };
        let out = label_dataset(&experts, &experts, &cfg).unwrap();
        for (k, ep) in out.dataset.episodes.iter().enumerate() {
            assert_eq!(out.report.episodes[k].source_expert, Some(k as u64));
            assert!(ep.rewards.as_ref().unwrap().iter().all(|&r| r == 5.0));
        }
        assert_eq!(out.dataset.reward_status(), RewardStatus::Labeled);
    }

    #[test]
    fn order_is_preserved_and_deterministic() {
        let experts = dataset(vec![traj(0, &[&[0.0], &[1.0], &[2.0]])]);
        let unl = dataset(vec![traj(8, &[&[5.0], &[1.0], &[0.0]]), traj(3, &[&[0.0], &[0.5], &[1.0]])]);
        let cfg = LabelConfig::default();
        let a = label_dataset(&experts, &unl, &cfg).unwrap();
        let b = label_dataset(&experts, &unl, &cfg).unwrap();
        let ids: Vec<u64> = a.dataset.episodes.iter().map(|e| e.episode_id).collect();
        assert_eq!(ids, vec![8, 3]);
        assert_eq!(a.dataset, b.dataset);
        let r = |k: usize| a.report.episodes[k].raw_return.unwrap();
        assert!(r(1) > r(0));
    }

    #[test]
    fn too_many_failures_abort() {
        let experts = dataset(vec![traj(0, &[&[0.0], &[1.0], &[2.0]])]);
        let mut unl = dataset(vec![traj(1, &[&[0.0], &[1.0], &[2.0]]), traj(2, &[&[0.0], &[1.0], &[2.0]])]);
        // A huge coordinate overflows the squared cost.
        unl.episodes[1].states[0][0] = 1e300;
        let cfg = LabelConfig {
            standardize: false,
            ..LabelConfig::default()
        };
        assert!(matches!(label_dataset(&experts, &unl, &cfg), Err(Error::Labeling { episode_id: 2, .. })));
        let lenient = LabelConfig {
            max_failure_fraction: 0.5,
            ..cfg
        };
        let out = label_dataset(&experts, &unl, &lenient).unwrap();
        assert_eq!(out.dataset.episodes.len(), 1);
        assert_eq!(out.report.failed, 1);
        assert_eq!(out.dataset.manifest.labeling.as_ref().unwrap().failed_episodes, vec![2]);
    }
}
