//! Adaptive controllers: softmax policy-gradient agents over discrete actions.
//!
//! Each agent maps a normalized state to action preferences through a small
//! feedforward network, samples from the softmax, and follows the gradient of
//! the log-probability scaled by the advantage over a running reward mean.
//! Credit is spread across past steps with an eligibility trace decayed by the
//! agent's discount factor.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::scenario::nn::{DenseGrad, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Parameter,
    Scheduling,
    Resource,
}

impl Role {
    fn index(self) -> u64 {
        match self {
            Role::Parameter => 0,
            Role::Scheduling => 1,
            Role::Resource => 2,
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            Role::Parameter => 9,
            Role::Scheduling => 3,
            Role::Resource => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub npv: f64,
    pub constraints: f64,
    pub efficiency: f64,
    pub risk: f64,
}

impl RewardWeights {
    pub fn sum(&self) -> f64 {
        self.npv + self.constraints + self.efficiency + self.risk
    }
}

/// `R = a*delta_npv + b*constraint_sat + c*efficiency - d*risk`.
pub fn reward(delta_npv: f64, constraint_sat: f64, efficiency: f64, risk: f64, weights: &RewardWeights) -> Result<f64> {
    let all = [delta_npv, constraint_sat, efficiency, risk, weights.npv, weights.constraints, weights.efficiency, weights.risk];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgs("reward inputs must be finite".into()));
    }
    Ok(weights.npv * delta_npv + weights.constraints * constraint_sat + weights.efficiency * efficiency
        - weights.risk * risk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorMix {
    GaHeavy,
    LnsHeavy,
    Balanced,
}

/// Decoded action of any role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Parameter { cooling: f64, destroy_fraction: f64 },
    Scheduling(OperatorMix),
    Resource { capacity_slack: f64 },
}

pub const COOLING_CHOICES: [f64; 3] = [0.90, 0.95, 0.99];
pub const DESTROY_CHOICES: [f64; 3] = [0.1, 0.2, 0.3];
pub const SLACK_CHOICES: [f64; 3] = [0.95, 1.0, 1.05];

pub fn decode_action(role: Role, index: usize) -> Action {
    match role {
        Role::Parameter => {
            Action::Parameter { cooling: COOLING_CHOICES[index / 3], destroy_fraction: DESTROY_CHOICES[index % 3] }
        }
        Role::Scheduling => Action::Scheduling([OperatorMix::GaHeavy, OperatorMix::LnsHeavy, OperatorMix::Balanced][index]),
        Role::Resource => Action::Resource { capacity_slack: SLACK_CHOICES[index] },
    }
}

/// Optimizer observation, each feature in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RlState {
    pub improvement_rate: f64,
    pub violation: f64,
    pub stagnation: f64,
    pub eps: f64,
    pub temperature: f64,
    pub pool_size: f64,
}

pub const N_FEATURES: usize = 6;

impl RlState {
    pub fn features(&self) -> [f64; N_FEATURES] {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        [
            c(self.improvement_rate),
            c(self.violation),
            c(self.stagnation),
            c(self.eps),
            c(self.temperature),
            c(self.pool_size),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: Role,
    pub learning_rate: f64,
    pub discount: f64,
    pub weights: RewardWeights,
    pub hidden: Vec<usize>,
}

impl AgentSpec {
    pub fn default_for(role: Role) -> Self {
        let (lr, gamma, w, hidden) = match role {
            Role::Parameter => (0.0005, 0.95, [0.4, 0.3, 0.2, 0.1], vec![64, 32]),
            Role::Scheduling => (0.001, 0.99, [0.5, 0.3, 0.1, 0.1], vec![128, 64]),
            Role::Resource => (0.0008, 0.90, [0.3, 0.4, 0.2, 0.1], vec![64, 32]),
        };
        Self {
            role,
            learning_rate: lr,
            discount: gamma,
            weights: RewardWeights { npv: w[0], constraints: w[1], efficiency: w[2], risk: w[3] },
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgs("learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::InvalidArgs("discount must lie in [0, 1]".into()));
        }
        if (self.weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgs("reward weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub spec: AgentSpec,
    pub policy: Mlp,
    pub baseline: f64,
    pub n_rewards: usize,
    pub step: u64,
    pending: Option<([f64; N_FEATURES], usize)>,
    trace: Option<Vec<DenseGrad>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Agent {
    /// Output layer starts at zero, so the initial policy is uniform.
    pub fn new(spec: AgentSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![N_FEATURES];
        widths.extend(&spec.hidden);
        widths.push(spec.role.n_actions());
        let mut rng = substream(seed, &[tag::AGENT, spec.role.index(), u64::MAX]);
        let mut policy = Mlp::new(&widths, false, &mut rng);
        if let Some(last) = policy.layers.last_mut() {
            last.w.fill(0.0);
            last.b.fill(0.0);
        }
        Ok(Self { spec, policy, baseline: 0.0, n_rewards: 0, step: 0, pending: None, trace: None })
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    fn input(features: &[f64; N_FEATURES]) -> Array2<f64> {
        Array2::from_shape_vec((1, N_FEATURES), features.to_vec()).expect("feature row")
    }

    pub fn probabilities(&self, state: &RlState) -> Vec<f64> {
        let x = Self::input(&state.features());
        softmax(self.policy.predict(x.view()).row(0).as_slice().expect("contiguous"))
    }

    pub fn greedy_action(&self, state: &RlState) -> usize {
        let p = self.probabilities(state);
        let mut best = 0;
        for (a, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = a;
            }
        }
        best
    }

    fn log_prob_grad(&self, x: ArrayView2<f64>, action: usize) -> Vec<DenseGrad> {
        let (out, cache) = self.policy.forward(x);
        let p = softmax(out.row(0).as_slice().expect("contiguous"));
        let mut d = Array2::zeros((1, p.len()));
        for (a, &pa) in p.iter().enumerate() {
            d[[0, a]] = f64::from(u8::from(a == action)) - pa;
        }
        self.policy.backward(&cache, d).0
    }

    fn learn(&mut self, observed_reward: f64) {
        let Some((features, action)) = self.pending else { return };
        let x = Self::input(&features);
        let g = self.log_prob_grad(x.view(), action);
        let gamma = self.spec.discount;
        let trace = match self.trace.take() {
            None => g,
            Some(mut e) => {
                for (ek, gk) in e.iter_mut().zip(&g) {
                    ek.w.zip_mut_with(&gk.w, |a, &b| *a = gamma * *a + b);
                    ek.b.zip_mut_with(&gk.b, |a, &b| *a = gamma * *a + b);
                }
                e
            }
        };
        let step = self.spec.learning_rate * (observed_reward - self.baseline);
        if step != 0.0 {
            for (layer, e) in self.policy.layers.iter_mut().zip(&trace) {
                layer.w.scaled_add(step, &e.w);
                layer.b.scaled_add(step, &e.b);
            }
        }
        self.trace = Some(trace);
        self.n_rewards += 1;
        self.baseline += (observed_reward - self.baseline) / self.n_rewards as f64;
    }

    /// Credits `observed_reward` to the previous action, then samples the next one.
    pub fn step(&mut self, state: &RlState, observed_reward: f64, seed: u64) -> usize {
        self.learn(observed_reward);
        let p = self.probabilities(state);
        let mut rng = substream(seed, &[tag::AGENT, self.spec.role.index(), self.step]);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = p.len() - 1;
        for (a, &pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                action = a;
                break;
            }
        }
        self.step += 1;
        self.pending = Some((state.features(), action));
        action
    }

    /// Ends an episode: the trace and pending action are dropped.
    pub fn reset_episode(&mut self) {
        self.pending = None;
        self.trace = None;
    }
}

/// Free-function form of `Agent::step`.
pub fn agent_step(agent: &mut Agent, state: &RlState, observed_reward: f64, seed: u64) -> usize {
    agent.step(state, observed_reward, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub episode: usize,
    /// Exponential moving average (weight 0.1) of per-episode mean reward.
    pub smoothed: f64,
    /// Mean reward over steps where the sampled action was the greedy one.
    pub deterministic: f64,
}

/// The three agents of one run plus their reward history.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSet {
    pub parameter: Agent,
    pub scheduling: Agent,
    pub resource: Agent,
    pub seed: u64,
    pub episode: usize,
    pub history: Vec<RewardRow>,
    episode_rewards: Vec<f64>,
    greedy_rewards: Vec<f64>,
}

impl AgentSet {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            parameter: Agent::new(AgentSpec::default_for(Role::Parameter), seed)?,
            scheduling: Agent::new(AgentSpec::default_for(Role::Scheduling), seed)?,
            resource: Agent::new(AgentSpec::default_for(Role::Resource), seed)?,
            seed,
            episode: 0,
            history: Vec::new(),
            episode_rewards: Vec::new(),
            greedy_rewards: Vec::new(),
        })
    }

    pub fn agent_mut(&mut self, role: Role) -> &mut Agent {
        match role {
            Role::Parameter => &mut self.parameter,
            Role::Scheduling => &mut self.scheduling,
            Role::Resource => &mut self.resource,
        }
    }

    /// Computes the role's reward from raw signals, steps the agent and
    /// records the reward for the episode summary.
    pub fn act(
        &mut self,
        role: Role,
        state: &RlState,
        signals: [f64; 4],
        seed_offset: u64,
    ) -> Result<Action> {
        let seed = crate::rng::derive_seed(self.seed, &[seed_offset]);
        let agent = self.agent_mut(role);
        let w = agent.spec.weights;
        let r = reward(signals[0], signals[1], signals[2], signals[3], &w)?;
        let greedy = agent.greedy_action(state);
        let had_pending = agent.pending.is_some();
        let a = agent.step(state, r, seed);
        if had_pending {
            self.episode_rewards.push(r);
            if a == greedy {
                self.greedy_rewards.push(r);
            }
        }
        Ok(decode_action(role, a))
    }

    pub fn end_episode(&mut self) {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let m = mean(&self.episode_rewards);
        let smoothed = match self.history.last() {
            None => m,
            Some(prev) => 0.9 * prev.smoothed + 0.1 * m,
        };
        self.history.push(RewardRow { episode: self.episode, smoothed, deterministic: mean(&self.greedy_rewards) });
        self.episode += 1;
        self.episode_rewards.clear();
        self.greedy_rewards.clear();
        for role in [Role::Parameter, Role::Scheduling, Role::Resource] {
            self.agent_mut(role).reset_episode();
        }
    }

    pub fn write_reward_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "episode,smoothed_reward,deterministic_reward")?;
        for r in &self.history {
            writeln!(out, "{},{},{}", r.episode, r.smoothed, r.deterministic)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn reward_examples() {
        let w = AgentSpec::default_for(Role::Scheduling).weights;
        assert_eq!(reward(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!(approx(reward(1.0, 1.0, 1.0, 0.0, &w).unwrap(), 0.9));
        assert!(approx(reward(0.0, 0.0, 0.0, 1.0, &w).unwrap(), -0.1));
        assert!(reward(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn default_specs_are_valid() {
        for role in [Role::Parameter, Role::Scheduling, Role::Resource] {
            AgentSpec::default_for(role).validate().unwrap();
        }
        let mut bad = AgentSpec::default_for(Role::Parameter);
        bad.weights.npv = 0.9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_policy() {
        let mut spec = AgentSpec::default_for(Role::Parameter);
        spec.learning_rate = 0.0;
        let mut agent = Agent::new(spec, 3).unwrap();
        let before = agent.policy.clone();
        let s = RlState { improvement_rate: 0.4, ..Default::default() };
        for k in 0..50 {
            agent.step(&s, k as f64, 9);
        }
        assert_eq!(agent.policy, before);
    }

    #[test]
    fn bandit_concentrates_on_rewarded_action() {
        let mut spec = AgentSpec::default_for(Role::Scheduling);
        spec.learning_rate = 0.05;
        let mut agent = Agent::new(spec, 1).unwrap();
        let s = RlState { improvement_rate: 0.5, violation: 0.2, ..Default::default() };
        let mut r = 0.0;
        for _ in 0..500 {
            let a = agent.step(&s, r, 17);
            r = if a == 0 { 1.0 } else { 0.0 };
        }
        assert!(agent.probabilities(&s)[0] > 0.9, "{:?}", agent.probabilities(&s));
    }

    #[test]
    fn same_inputs_same_action() {
        let s = RlState { eps: 0.3, ..Default::default() };
        let mut a = Agent::new(AgentSpec::default_for(Role::Resource), 5).unwrap();
        let mut b = a.clone();
        for k in 0..20 {
            assert_eq!(a.step(&s, 0.1 * k as f64, 11), b.step(&s, 0.1 * k as f64, 11));
        }
    }

    #[test]
    fn above_baseline_reward_raises_probability() {
        let mut spec = AgentSpec::default_for(Role::Parameter);
        spec.learning_rate = 0.01;
        let mut agent = Agent::new(spec, 2).unwrap();
        let s = RlState { stagnation: 0.7, ..Default::default() };
        let a = agent.step(&s, 0.0, 4);
        let before = agent.probabilities(&s)[a];
        agent.step(&s, 1.0, 4);
        assert!(agent.probabilities(&s)[a] > before);
    }

    #[test]
    fn decoded_actions_cover_the_grid() {
        let all: Vec<Action> = (0..9).map(|i| decode_action(Role::Parameter, i)).collect();
        assert_eq!(all[0], Action::Parameter { cooling: 0.90, destroy_fraction: 0.1 });
        assert_eq!(all[8], Action::Parameter { cooling: 0.99, destroy_fraction: 0.3 });
        assert_eq!(decode_action(Role::Resource, 2), Action::Resource { capacity_slack: 1.05 });
    }

    #[test]
    fn episode_rows_are_written() {
        let mut set = AgentSet::new(0).unwrap();
        let s = RlState::default();
        for k in 0..5 {
            set.act(Role::Scheduling, &s, [0.5, 1.0, 0.5, 0.0], k).unwrap();
        }
        set.end_episode();
        let mut buf = Vec::new();
        set.write_reward_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(approx(set.history[0].smoothed, 0.5 * 0.5 + 0.3 + 0.1 * 0.5));
    }

    proptest! {
        #[test]
        fn probabilities_are_a_distribution(f in proptest::array::uniform6(-2.0f64..2.0), seed in 0u64..50) {
            let mut agent = Agent::new(AgentSpec::default_for(Role::Parameter), seed).unwrap();
            let s = RlState { improvement_rate: f[0], violation: f[1], stagnation: f[2], eps: f[3], temperature: f[4], pool_size: f[5] };
            for k in 0..10 {
                agent.step(&s, f[k % 6], seed);
            }
            let p = agent.probabilities(&s);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }
}
