//! Episodic simulators sharing a reset/step contract.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub t: usize,
    pub absorbed: bool,
    /// Unnormalised physical state (corridor position, dam storage).
    pub level: f64,
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut dyn RngCore) -> EnvState;
    fn step(&self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> Result<(EnvState, f64)>;
}

fn check_step(env: &dyn Environment, state: &EnvState, action: usize) -> Result<()> {
    if state.t >= env.horizon() {
        return Err(Error::HorizonExceeded {
            t: state.t,
            horizon: env.horizon(),
        });
    }
    if action >= env.n_actions() {
        return Err(Error::InvalidAction {
            action,
            n_actions: env.n_actions(),
        });
    }
    Ok(())
}

fn gaussian(rng: &mut dyn RngCore, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("finite normal parameters").sample(rng)
}

// ---------------------------------------------------------------------------
// Milestone evaluation MDP

pub const MILESTONE_G1: [f64; 11] = [1.0, 4.0, 3.0, 1.0, 1.5, 0.4, 4.0, 4.1, 3.0, 2.0, 4.0];
pub const MILESTONE_G2: [f64; 11] = [4.0, 1.0, 1.0, 3.0, 4.0, 1.5, 0.1, 5.0, 1.0, 1.0, 4.0];
pub const MILESTONE_REWARD_STD: f64 = 0.1;

/// State is the step index; rewards are paid only at eleven milestone steps
/// `0, T/10, .., 9T/10, T-1`.
#[derive(Debug, Clone)]
pub struct MilestoneEnv {
    horizon: usize,
    milestones: [usize; 11],
}

impl MilestoneEnv {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon < 20 || !horizon.is_multiple_of(10) {
            return Err(Error::domain(format!(
                "milestone horizon must be a multiple of 10 and >= 20, got {horizon}"
            )));
        }
        let mut milestones = [0; 11];
        for (k, m) in milestones.iter_mut().enumerate().take(10) {
            *m = k * horizon / 10;
        }
        milestones[10] = horizon - 1;
        Ok(MilestoneEnv { horizon, milestones })
    }

    pub fn milestones(&self) -> &[usize; 11] {
        &self.milestones
    }

    pub fn milestone_index(&self, t: usize) -> Option<usize> {
        self.milestones.iter().position(|&m| m == t)
    }

    fn observe(&self, t: usize) -> Vec<f64> {
        vec![t as f64 / self.horizon as f64]
    }

    /// Expected discounted return of `policy`, which sees the observation `[t/T]`.
    pub fn exact_return(&self, policy: &PolicyParams, gamma: f64) -> Result<f64> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let mut total = 0.0;
        for (i, &t) in self.milestones.iter().enumerate() {
            let probs = policy.action_distribution(&self.observe(t))?;
            total += gamma.powi(t as i32) * (probs[0] * MILESTONE_G1[i] + probs[1] * MILESTONE_G2[i]);
        }
        Ok(total)
    }

    /// Reward interval used for Hoeffding bounds: the milestone means widened
    /// by five noise standard deviations, and always containing 0.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let all = MILESTONE_G1.iter().chain(&MILESTONE_G2);
        let lo = all.clone().cloned().fold(f64::INFINITY, f64::min) - 5.0 * MILESTONE_REWARD_STD;
        let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * MILESTONE_REWARD_STD;
        (lo.min(0.0), hi)
    }

    /// Variance of the reward emitted at step `t` under action probabilities `probs`.
    pub fn reward_variance(&self, t: usize, probs: &[f64]) -> f64 {
        match self.milestone_index(t) {
            None => 0.0,
            Some(i) => {
                let (g1, g2) = (MILESTONE_G1[i], MILESTONE_G2[i]);
                let mean = probs[0] * g1 + probs[1] * g2;
                let second = probs[0] * g1 * g1 + probs[1] * g2 * g2;
                second - mean * mean + MILESTONE_REWARD_STD * MILESTONE_REWARD_STD
            }
        }
    }
}

impl Environment for MilestoneEnv {
    fn name(&self) -> &'static str {
        "milestone"
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EnvState {
        EnvState {
            observation: self.observe(0),
            t: 0,
            absorbed: false,
            level: 0.0,
        }
    }

    fn step(&self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> Result<(EnvState, f64)> {
        check_step(self, state, action)?;
        let reward = match self.milestone_index(state.t) {
            Some(i) => {
                let g = if action == 0 { MILESTONE_G1[i] } else { MILESTONE_G2[i] };
                gaussian(rng, g, MILESTONE_REWARD_STD)
            }
            None => 0.0,
        };
        let t = state.t + 1;
        Ok((
            EnvState {
                observation: self.observe(t),
                t,
                absorbed: false,
                level: 0.0,
            },
            reward,
        ))
    }
}

// ---------------------------------------------------------------------------
// Corridor

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorridorReward {
    Sparse,
    Dense,
}

pub const CORRIDOR_NOISE_STD: f64 = 0.1;
pub const CORRIDOR_GOAL_RADIUS: f64 = 0.5;
pub const CORRIDOR_DENSE_REWARD: f64 = 0.2;

/// One-dimensional corridor starting at 0. Action 0 pushes right, action 1
/// left; the push succeeds with probability `p_success`, otherwise it goes
/// the other way. The goal `x_MAX` is absorbing.
#[derive(Debug, Clone)]
pub struct CorridorEnv {
    reward: CorridorReward,
    x_max: f64,
    horizon: usize,
    p_success: f64,
}

impl CorridorEnv {
    pub fn new(reward: CorridorReward, x_max: f64, horizon: usize, p_success: f64) -> Result<Self> {
        if !(p_success > 0.5 && p_success < 1.0) {
            return Err(Error::domain(format!(
                "corridor success probability must lie in (0.5, 1), got {p_success}"
            )));
        }
        if !(x_max > 1.0) || horizon == 0 {
            return Err(Error::domain("corridor needs x_max > 1 and a positive horizon"));
        }
        Ok(CorridorEnv {
            reward,
            x_max,
            horizon,
            p_success,
        })
    }

    pub fn sparse(p_success: f64) -> Result<Self> {
        Self::new(CorridorReward::Sparse, 12.0, 100, p_success)
    }

    pub fn dense(p_success: f64) -> Result<Self> {
        Self::new(CorridorReward::Dense, 1000.0, 1000, p_success)
    }

    fn at_goal(&self, x: f64) -> bool {
        (x - self.x_max).abs() < CORRIDOR_GOAL_RADIUS
    }

    fn state(&self, x: f64, t: usize) -> EnvState {
        EnvState {
            observation: vec![x / self.x_max],
            t,
            absorbed: self.at_goal(x),
            level: x,
        }
    }
}

impl Environment for CorridorEnv {
    fn name(&self) -> &'static str {
        match self.reward {
            CorridorReward::Sparse => "corridor-sparse",
            CorridorReward::Dense => "corridor-dense",
        }
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EnvState {
        self.state(0.0, 0)
    }

    fn step(&self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> Result<(EnvState, f64)> {
        check_step(self, state, action)?;
        let x = state.level;
        if self.at_goal(x) {
            let reward = match self.reward {
                CorridorReward::Sparse => 1.0,
                CorridorReward::Dense => 0.0,
            };
            return Ok((self.state(x, state.t + 1), reward));
        }
        let intended = if action == 0 { 1.0 } else { -1.0 };
        let direction = if rng.random::<f64>() < self.p_success {
            intended
        } else {
            -intended
        };
        let next = (x + direction + gaussian(rng, 0.0, CORRIDOR_NOISE_STD)).clamp(-self.x_max, self.x_max);
        let reward = match self.reward {
            CorridorReward::Sparse => 0.0,
            CorridorReward::Dense => CORRIDOR_DENSE_REWARD * direction,
        };
        Ok((self.state(next, state.t + 1), reward))
    }
}

// ---------------------------------------------------------------------------
// Dam

pub type InflowFn = dyn Fn(u64, &mut dyn RngCore) -> f64 + Send + Sync;

/// Daily net inflow for a given day index.
#[derive(Clone)]
pub struct InflowProfile(Arc<InflowFn>);

impl InflowProfile {
    pub fn new(f: impl Fn(u64, &mut dyn RngCore) -> f64 + Send + Sync + 'static) -> Self {
        InflowProfile(Arc::new(f))
    }

    /// Single annual peak plus N(0, 2) noise.
    pub fn seasonal() -> Self {
        Self::new(|day, rng| seasonal_mean_inflow(day) + gaussian(rng, 0.0, 2.0))
    }

    pub fn sample(&self, day: u64, rng: &mut dyn RngCore) -> f64 {
        (self.0)(day, rng)
    }
}

impl fmt::Debug for InflowProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("InflowProfile(..)")
    }
}

pub fn seasonal_mean_inflow(day: u64) -> f64 {
    let phase = 2.0 * PI * (day as f64 - 120.0) / 365.0;
    4.0 + 8.0 * phase.sin().max(0.0).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DamParams {
    pub initial_storage: f64,
    pub demand: f64,
    pub flood_threshold: f64,
    pub c_flood: f64,
    pub c_demand: f64,
    pub reward_scale: f64,
    pub n_actions: usize,
    pub days_per_decision: usize,
    /// Decisions per episode.
    pub horizon: usize,
}

impl Default for DamParams {
    fn default() -> Self {
        DamParams {
            initial_storage: 200.0,
            demand: 10.0,
            flood_threshold: 300.0,
            c_flood: 0.5,
            c_demand: 0.5,
            reward_scale: 0.01,
            n_actions: 21,
            days_per_decision: 3,
            horizon: 360,
        }
    }
}

pub const DAM_BASIS_CENTERS: [f64; 6] = [60.0, 120.0, 180.0, 240.0, 300.0, 360.0];

/// Scaled daily reward for storage `s` and release `a`.
pub fn dam_daily_reward(params: &DamParams, storage: f64, release: f64) -> f64 {
    let flood = (storage - params.flood_threshold).max(0.0);
    let shortfall = (params.demand - release).max(0.0);
    params.reward_scale * (-params.c_flood * flood - params.c_demand * shortfall * shortfall)
}

/// Reservoir with seasonal inflow. Action `i` releases `i` units per day and
/// is held for `days_per_decision` days; one step is one decision and its
/// reward is the sum of the daily rewards.
#[derive(Debug, Clone)]
pub struct DamEnv {
    params: DamParams,
    inflow: InflowProfile,
}

impl DamEnv {
    pub fn new(params: DamParams) -> Result<Self> {
        Self::with_inflow(params, InflowProfile::seasonal())
    }

    pub fn with_inflow(params: DamParams, inflow: InflowProfile) -> Result<Self> {
        if params.n_actions < 2 || params.days_per_decision == 0 || params.horizon == 0 {
            return Err(Error::domain(
                "dam needs >= 2 actions, a positive decision period and horizon",
            ));
        }
        Ok(DamEnv { params, inflow })
    }

    pub fn params(&self) -> &DamParams {
        &self.params
    }

    pub fn observe(&self, storage: f64, day: u64) -> Vec<f64> {
        let doy = (day % 365) as f64;
        let mut obs = Vec::with_capacity(7);
        obs.push(2.0 * (storage - 50.0) / 450.0 - 1.0);
        obs.extend(DAM_BASIS_CENTERS.iter().map(|c| 2.0 * (doy - c).abs() / 360.0 - 1.0));
        obs
    }

    fn state(&self, storage: f64, t: usize) -> EnvState {
        let day = (t * self.params.days_per_decision) as u64;
        EnvState {
            observation: self.observe(storage, day),
            t,
            absorbed: false,
            level: storage,
        }
    }
}

impl Environment for DamEnv {
    fn name(&self) -> &'static str {
        "dam"
    }
    fn obs_dim(&self) -> usize {
        7
    }
    fn n_actions(&self) -> usize {
        self.params.n_actions
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EnvState {
        self.state(self.params.initial_storage, 0)
    }

    fn step(&self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> Result<(EnvState, f64)> {
        check_step(self, state, action)?;
        let release = action as f64;
        let mut storage = state.level;
        let mut reward = 0.0;
        let first_day = (state.t * self.params.days_per_decision) as u64;
        for d in 0..self.params.days_per_decision as u64 {
            reward += dam_daily_reward(&self.params, storage, release);
            storage = (storage - release + self.inflow.sample(first_day + d, rng)).max(0.0);
        }
        Ok((self.state(storage, state.t + 1), reward))
    }
}

// ---------------------------------------------------------------------------
// Final-reward chain

/// Deterministic chain whose only reward is a fair ±1 coin at step `T-1`.
#[derive(Debug, Clone)]
pub struct FinalRewardChain {
    horizon: usize,
}

impl FinalRewardChain {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::domain("chain horizon must be positive"));
        }
        Ok(FinalRewardChain { horizon })
    }
}

impl Environment for FinalRewardChain {
    fn name(&self) -> &'static str {
        "final-reward-chain"
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EnvState {
        EnvState {
            observation: vec![0.0],
            t: 0,
            absorbed: false,
            level: 0.0,
        }
    }

    fn step(&self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> Result<(EnvState, f64)> {
        check_step(self, state, action)?;
        let reward = if state.t + 1 == self.horizon {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        let t = state.t + 1;
        Ok((
            EnvState {
                observation: vec![t as f64 / self.horizon as f64],
                t,
                absorbed: false,
                level: t as f64,
            },
            reward,
        ))
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn default_p_success() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum EnvConfig {
    Milestone {
        horizon: usize,
    },
    CorridorSparse {
        #[serde(default = "default_p_success")]
        p_success: f64,
    },
    CorridorDense {
        #[serde(default = "default_p_success")]
        p_success: f64,
    },
    Dam {
        #[serde(default)]
        params: DamParams,
    },
    FinalRewardChain {
        horizon: usize,
    },
}

impl EnvConfig {
    pub fn variant(&self) -> &'static str {
        match self {
            EnvConfig::Milestone { .. } => "milestone",
            EnvConfig::CorridorSparse { .. } => "corridor-sparse",
            EnvConfig::CorridorDense { .. } => "corridor-dense",
            EnvConfig::Dam { .. } => "dam",
            EnvConfig::FinalRewardChain { .. } => "final-reward-chain",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Milestone { horizon } => Box::new(MilestoneEnv::new(*horizon)?),
            EnvConfig::CorridorSparse { p_success } => Box::new(CorridorEnv::sparse(*p_success)?),
            EnvConfig::CorridorDense { p_success } => Box::new(CorridorEnv::dense(*p_success)?),
            EnvConfig::Dam { params } => Box::new(DamEnv::new(*params)?),
            EnvConfig::FinalRewardChain { horizon } => Box::new(FinalRewardChain::new(*horizon)?),
        })
    }

    pub fn exact_return(&self, policy: &PolicyParams, gamma: f64) -> Result<f64> {
        match self {
            EnvConfig::Milestone { horizon } => MilestoneEnv::new(*horizon)?.exact_return(policy, gamma),
            other => Err(Error::WrongVariant {
                expected: "milestone",
                got: other.variant().to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn rollout(env: &dyn Environment, actions: &[usize], seed: u64) -> Vec<(EnvState, f64)> {
        let mut r = rng::stream(seed, &[]);
        let mut s = env.reset(&mut r);
        let mut out = Vec::new();
        for &a in actions {
            let (next, rew) = env.step(&s, a, &mut r).unwrap();
            out.push((next.clone(), rew));
            s = next;
        }
        out
    }

    #[test]
    fn resets() {
        let mut r = rng::stream(0, &[]);
        assert_eq!(CorridorEnv::sparse(0.9).unwrap().reset(&mut r).observation, vec![0.0]);
        let dam = DamEnv::new(DamParams::default()).unwrap();
        let s = dam.reset(&mut r);
        assert_eq!((s.level, s.t), (200.0, 0));
        assert_eq!(MilestoneEnv::new(100).unwrap().reset(&mut r).t, 0);
    }

    #[test]
    fn dam_reward_example() {
        assert_relative_eq!(
            dam_daily_reward(&DamParams::default(), 350.0, 0.0),
            -0.75,
            epsilon = 1e-12
        );
    }

    #[test]
    fn milestone_zero_reward_off_milestones() {
        let env = MilestoneEnv::new(100).unwrap();
        let mut r = rng::stream(1, &[]);
        let s = EnvState {
            observation: vec![0.05],
            t: 5,
            absorbed: false,
            level: 0.0,
        };
        for a in 0..2 {
            assert_eq!(env.step(&s, a, &mut r).unwrap().1, 0.0);
        }
        assert_eq!(env.milestones(), &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99]);
        assert_eq!(MilestoneEnv::new(2000).unwrap().milestones()[10], 1999);
    }

    #[test]
    fn milestone_exact_returns() {
        let env = MilestoneEnv::new(100).unwrap();
        let uniform = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(env.exact_return(&uniform, 1.0).unwrap(), 26.8, epsilon = 1e-12);
        let nearly_a1 = PolicyParams::constant(1, &[1.0 - 1e-12, 1e-12]).unwrap();
        assert_relative_eq!(env.exact_return(&nearly_a1, 1e-9).unwrap(), 1.0, epsilon = 1e-8);
        let mixed = PolicyParams::constant(1, &[0.49, 0.51]).unwrap();
        let expected: f64 = MILESTONE_G1
            .iter()
            .zip(MILESTONE_G2)
            .map(|(a, b)| 0.49 * a + 0.51 * b)
            .sum();
        assert_relative_eq!(env.exact_return(&mixed, 1.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn milestone_monte_carlo_converges() {
        let env = MilestoneEnv::new(100).unwrap();
        let policy = PolicyParams::constant(1, &[0.3, 0.7]).unwrap();
        let gamma = 0.95;
        let exact = env.exact_return(&policy, gamma).unwrap();
        let mut r = rng::stream(4, &[]);
        let episodes = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..episodes {
            let mut s = env.reset(&mut r);
            let mut ret = 0.0;
            for t in 0..100 {
                let a = policy.sample_action(&s.observation, &mut r).unwrap();
                let (next, rew) = env.step(&s, a, &mut r).unwrap();
                ret += gamma.powi(t) * rew;
                s = next;
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / episodes as f64;
        let sd = (sum_sq / episodes as f64 - mean * mean).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (episodes as f64).sqrt());
    }

    #[test]
    fn step_errors() {
        let env = MilestoneEnv::new(20).unwrap();
        let mut r = rng::stream(0, &[]);
        let s = env.reset(&mut r);
        assert!(matches!(env.step(&s, 2, &mut r), Err(Error::InvalidAction { .. })));
        let end = EnvState {
            observation: vec![1.0],
            t: 20,
            absorbed: false,
            level: 0.0,
        };
        assert!(matches!(env.step(&end, 0, &mut r), Err(Error::HorizonExceeded { .. })));
        assert!(MilestoneEnv::new(25).is_err());
        assert!(CorridorEnv::sparse(0.4).is_err());
    }

    #[test]
    fn determinism() {
        let actions: Vec<usize> = (0..100).map(|i| (i * 7) % 21).collect();
        let dam = DamEnv::new(DamParams::default()).unwrap();
        assert_eq!(rollout(&dam, &actions, 9), rollout(&dam, &actions, 9));
        let corridor = CorridorEnv::sparse(0.9).unwrap();
        let acts: Vec<usize> = (0..100).map(|i| i % 3 % 2).collect();
        assert_eq!(rollout(&corridor, &acts, 3), rollout(&corridor, &acts, 3));
    }

    #[test]
    fn dam_storage_and_observation_ranges() {
        let dam = DamEnv::new(DamParams::default()).unwrap();
        for seed in 0..5 {
            let actions: Vec<usize> = (0..360).map(|i| (i * 13 + seed) % 21).collect();
            for (s, _) in rollout(&dam, &actions, seed as u64) {
                assert!(s.level >= 0.0);
                assert!(s.observation[1..].iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
        for storage in [50.0, 200.0, 500.0] {
            for day in [0, 100, 364, 1079] {
                assert!(dam.observe(storage, day).iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn dam_injected_inflow_mass_balance() {
        let dam = DamEnv::with_inflow(DamParams::default(), InflowProfile::new(|_, _| 5.0)).unwrap();
        let mut r = rng::stream(0, &[]);
        let s = dam.reset(&mut r);
        let (next, reward) = dam.step(&s, 2, &mut r).unwrap();
        assert_relative_eq!(next.level, 200.0 + 3.0 * 3.0);
        assert_relative_eq!(reward, 3.0 * dam_daily_reward(dam.params(), 200.0, 2.0));
        assert_eq!(next.observation, dam.observe(209.0, 3));
        let drained = DamEnv::with_inflow(DamParams::default(), InflowProfile::new(|_, _| 0.0)).unwrap();
        let low = EnvState {
            observation: drained.observe(4.0, 0),
            t: 0,
            absorbed: false,
            level: 4.0,
        };
        assert_eq!(drained.step(&low, 20, &mut r).unwrap().0.level, 0.0);
    }

    #[test]
    fn corridor_absorbing() {
        for kind in [CorridorReward::Sparse, CorridorReward::Dense] {
            let env = CorridorEnv::new(kind, 12.0, 100, 0.9).unwrap();
            let mut r = rng::stream(2, &[]);
            let mut s = EnvState {
                observation: vec![11.8 / 12.0],
                t: 10,
                absorbed: true,
                level: 11.8,
            };
            for _ in 0..20 {
                let (next, rew) = env.step(&s, 1, &mut r).unwrap();
                assert_eq!(next.level, 11.8);
                assert!(next.absorbed);
                assert_eq!(rew, if kind == CorridorReward::Sparse { 1.0 } else { 0.0 });
                s = next;
            }
        }
    }

    #[test]
    fn corridor_dense_reward_follows_realized_direction() {
        let env = CorridorEnv::dense(0.9).unwrap();
        let mut r = rng::stream(8, &[]);
        let s = env.reset(&mut r);
        let mut positive = 0;
        let n = 20_000;
        for _ in 0..n {
            let (next, rew) = env.step(&s, 0, &mut r).unwrap();
            assert_eq!(rew.signum(), next.level.signum());
            if rew > 0.0 {
                positive += 1;
            }
        }
        let sd = (n as f64 * 0.09).sqrt();
        assert!((positive as f64 - 0.9 * n as f64).abs() < 4.0 * sd);
    }

    #[test]
    fn chain_rewards_only_at_end() {
        let env = FinalRewardChain::new(5).unwrap();
        let out = rollout(&env, &[0; 5], 1);
        assert!(out[..4].iter().all(|(_, r)| *r == 0.0));
        assert_eq!(out[4].1.abs(), 1.0);
    }

    #[test]
    fn config_roundtrip_and_wrong_variant() {
        let cfg: EnvConfig = serde_json::from_str(r#"{"variant":"corridor-sparse"}"#).unwrap();
        assert_eq!(cfg, EnvConfig::CorridorSparse { p_success: 0.9 });
        let env = cfg.build().unwrap();
        assert_eq!((env.horizon(), env.n_actions()), (100, 2));
        let p = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        assert!(matches!(cfg.exact_return(&p, 0.9), Err(Error::WrongVariant { .. })));
        let dam: EnvConfig = serde_json::from_str(r#"{"variant":"dam"}"#).unwrap();
        assert_eq!(dam.build().unwrap().obs_dim(), 7);
    }
}
