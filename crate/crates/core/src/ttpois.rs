//! TT-POIS: offline maximisation of a lower confidence bound on the
//! off-policy return, alternated with data collection.
//!
//! The surrogate is
//!
//! ```text
//! L(theta_bar) = J_hat(theta_bar / theta) - sqrt(beta * sum_h m_h phi_h^2 d2_hat(h))
//! ```
//!
//! In `Optimal` mode the batch follows the minimum-width schedule; in
//! `Uniform` mode every episode has full length, which is plain POIS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::estimators::{cantelli_beta, TruncatedBatch, PROB_FLOOR};
use crate::policies::{renyi2_logits, score_logits, Forward, PolicyParams};
use crate::rng::{self, purpose};
use crate::schedule::{coefficients, discount_powers, optimal_dcs, uniform_dcs, Dcs};

pub use crate::estimators::{effective_r_max, RMaxSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcsMode {
    Optimal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    pub initial_step: f64,
    pub shrink: f64,
    pub max_halvings: u32,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            initial_step: 1.0,
            shrink: 0.5,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub delta: f64,
    pub offline_iterations: usize,
    pub online_iterations: usize,
    pub iw_clip: Option<f64>,
    pub r_min_max: Option<f64>,
    pub line_search: LineSearchConfig,
    pub dcs_mode: DcsMode,
    pub gamma: f64,
    pub budget: u64,
    pub seed: u64,
    /// Full-horizon rollouts used to score each new behavior policy.
    pub eval_episodes: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            delta: 0.7,
            offline_iterations: 10,
            online_iterations: 40,
            iw_clip: Some(100.0),
            r_min_max: None,
            line_search: LineSearchConfig::default(),
            dcs_mode: DcsMode::Optimal,
            gamma: 0.99,
            budget: 15_000,
            seed: 0,
            eval_episodes: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        crate::schedule::check_delta(self.delta)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::domain(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.offline_iterations == 0 || self.eval_episodes == 0 {
            return Err(Error::domain("offline_iterations and eval_episodes must be positive"));
        }
        if self.iw_clip.is_some_and(|c| !(c > 0.0)) || self.r_min_max.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::domain("iw_clip and r_min_max must be positive when set"));
        }
        let ls = &self.line_search;
        if !(ls.initial_step > 0.0) || !(ls.shrink > 0.0 && ls.shrink < 1.0) {
            return Err(Error::domain("line search needs initial_step > 0 and shrink in (0, 1)"));
        }
        Ok(())
    }

    /// The schedule used for every batch of a run.
    pub fn schedule(&self, horizon: usize) -> Result<Dcs> {
        let dcs = match self.dcs_mode {
            DcsMode::Optimal => optimal_dcs(&coefficients(self.gamma, horizon)?, self.budget)?,
            DcsMode::Uniform => uniform_dcs(horizon, self.budget)?,
        };
        Ok(dcs.with_gamma(self.gamma))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateValue {
    pub value: f64,
    pub j_hat: f64,
    pub penalty: f64,
    pub renyi: Vec<f64>,
    /// Trajectories whose importance weight hit the clip.
    pub clipped: usize,
}

struct Step<'a> {
    state: &'a [f64],
    action: usize,
    behavior_probs: Vec<f64>,
}

struct PreparedTrajectory<'a> {
    steps: Vec<Step<'a>>,
    scaled_return: f64,
}

/// Batch-dependent part of the surrogate, built once per online iteration.
pub struct Surrogate<'a> {
    trajectories: Vec<PreparedTrajectory<'a>>,
    horizon: usize,
    /// `m_h phi_h^2 / N_h`, with `N_h` the number of trajectories of length >= h.
    weights: Vec<f64>,
    /// `N_h`.
    counts: Vec<f64>,
    m_phi_sq: Vec<f64>,
    beta: f64,
    iw_clip: Option<f64>,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        batch: &'a TruncatedBatch,
        behavior: &PolicyParams,
        gamma: f64,
        delta: f64,
        r_max: f64,
        iw_clip: Option<f64>,
    ) -> Result<Self> {
        let dcs = batch.dcs();
        dcs.check_gamma(gamma)?;
        if !(r_max >= 0.0 && r_max.is_finite()) {
            return Err(Error::domain(format!(
                "r_max must be finite and non-negative, got {r_max}"
            )));
        }
        let beta = cantelli_beta(delta)?;
        let horizon = dcs.horizon();
        let powers = discount_powers(gamma, horizon);
        let n = dcs.n_f64();
        let mut trajectories = Vec::with_capacity(dcs.num_trajectories() as usize);
        for traj in batch.iter() {
            let mut steps = Vec::with_capacity(traj.len());
            let mut scaled_return = 0.0;
            for t in 0..traj.len() {
                let q = behavior.action_distribution(&traj.states[t])?;
                let action = traj.actions[t];
                let q_a = *q.get(action).ok_or(Error::InvalidAction {
                    action,
                    n_actions: q.len(),
                })?;
                if q_a < PROB_FLOOR {
                    return Err(Error::AbsoluteContinuity { step: t, prob: q_a });
                }
                scaled_return += powers[t] * traj.rewards[t] / n[t];
                steps.push(Step {
                    state: &traj.states[t],
                    action,
                    behavior_probs: q,
                });
            }
            trajectories.push(PreparedTrajectory { steps, scaled_return });
        }
        let phi = dcs.phi(gamma, r_max);
        let m_phi_sq: Vec<f64> = dcs.m().iter().zip(&phi).map(|(&m, p)| m as f64 * p * p).collect();
        let weights = m_phi_sq.iter().zip(&n).map(|(a, n)| a / n).collect();
        Ok(Surrogate {
            trajectories,
            horizon,
            weights,
            counts: n,
            m_phi_sq,
            beta,
            iw_clip,
        })
    }

    fn clip(&self, w: f64) -> (f64, bool) {
        match self.iw_clip {
            Some(c) if w >= c => (c, true),
            _ => (w, false),
        }
    }

    fn forward_all(&self, target: &PolicyParams) -> Result<Vec<Vec<Forward>>> {
        self.trajectories
            .iter()
            .map(|traj| traj.steps.iter().map(|s| target.forward(s.state)).collect())
            .collect()
    }

    fn value_from(&self, forwards: &[Vec<Forward>]) -> SurrogateValue {
        let mut j_hat = 0.0;
        let mut clipped = 0;
        let mut sums = vec![0.0; self.horizon];
        for (traj, fwd) in self.trajectories.iter().zip(forwards) {
            let mut log_w = 0.0;
            let mut prod = 1.0;
            for (t, (step, f)) in traj.steps.iter().zip(fwd).enumerate() {
                let p = f.probs();
                log_w += p[step.action].ln() - step.behavior_probs[step.action].ln();
                prod *= crate::policies::renyi2(p, &step.behavior_probs);
                sums[t] += prod;
            }
            let (w, was_clipped) = self.clip(log_w.exp());
            clipped += was_clipped as usize;
            j_hat += w * traj.scaled_return;
        }
        let renyi: Vec<f64> = sums.iter().zip(&self.counts).map(|(s, c)| s / c).collect();
        let s: f64 = self.m_phi_sq.iter().zip(&renyi).map(|(a, d)| a * d).sum();
        let penalty = (self.beta * s).sqrt();
        SurrogateValue {
            value: j_hat - penalty,
            j_hat,
            penalty,
            renyi,
            clipped,
        }
    }

    pub fn evaluate(&self, target: &PolicyParams) -> Result<SurrogateValue> {
        Ok(self.value_from(&self.forward_all(target)?))
    }

    /// Value plus the gradients of the estimate term and of the penalty.
    pub fn gradient_parts(&self, target: &PolicyParams) -> Result<(SurrogateValue, Vec<f64>, Vec<f64>)> {
        let forwards = self.forward_all(target)?;
        let value = self.value_from(&forwards);
        let dim = target.num_params();
        let mut grad_j = vec![0.0; dim];
        let mut grad_pen = vec![0.0; dim];
        // d penalty / d S
        let pen_scale = if value.penalty > 0.0 {
            self.beta / (2.0 * value.penalty)
        } else {
            0.0
        };
        for (traj, fwd) in self.trajectories.iter().zip(&forwards) {
            let h = traj.steps.len();
            let mut log_w = 0.0;
            let mut d2 = Vec::with_capacity(h);
            let mut d2_grads = Vec::with_capacity(h);
            let mut prefix = Vec::with_capacity(h);
            let mut prod = 1.0;
            for (step, f) in traj.steps.iter().zip(fwd) {
                let p = f.probs();
                log_w += p[step.action].ln() - step.behavior_probs[step.action].ln();
                let (d, g) = renyi2_logits(p, &step.behavior_probs);
                prod *= d;
                prefix.push(prod);
                d2.push(d);
                d2_grads.push(g);
            }
            let (w, was_clipped) = self.clip(log_w.exp());
            let c_j = if was_clipped { 0.0 } else { w * traj.scaled_return };
            // u_t = sum_{k > t} weights_k * prefix_k over lengths k = t+1..=h
            let mut u = vec![0.0; h];
            let mut acc = 0.0;
            for t in (0..h).rev() {
                acc += self.weights[t] * prefix[t];
                u[t] = acc;
            }
            for (t, (step, f)) in traj.steps.iter().zip(fwd).enumerate() {
                if c_j != 0.0 {
                    let score = score_logits(f.probs(), step.action);
                    target.accumulate_gradient(f, &score, c_j, &mut grad_j);
                }
                let c_d = pen_scale * u[t] / d2[t];
                if c_d != 0.0 {
                    target.accumulate_gradient(f, &d2_grads[t], c_d, &mut grad_pen);
                }
            }
        }
        Ok((value, grad_j, grad_pen))
    }

    pub fn value_and_gradient(&self, target: &PolicyParams) -> Result<(SurrogateValue, Vec<f64>)> {
        let (value, grad_j, grad_pen) = self.gradient_parts(target)?;
        let grad = grad_j.iter().zip(&grad_pen).map(|(a, b)| a - b).collect();
        Ok((value, grad))
    }
}

pub fn surrogate(
    theta_bar: &PolicyParams,
    batch: &TruncatedBatch,
    behavior: &PolicyParams,
    config: &OptimConfig,
) -> Result<SurrogateValue> {
    let (r_max, _) = effective_r_max(batch, config.r_min_max);
    Surrogate::new(batch, behavior, config.gamma, config.delta, r_max, config.iw_clip)?.evaluate(theta_bar)
}

pub fn surrogate_gradient(
    theta_bar: &PolicyParams,
    batch: &TruncatedBatch,
    behavior: &PolicyParams,
    config: &OptimConfig,
) -> Result<Vec<f64>> {
    let (r_max, _) = effective_r_max(batch, config.r_min_max);
    let s = Surrogate::new(batch, behavior, config.gamma, config.delta, r_max, config.iw_clip)?;
    Ok(s.value_and_gradient(theta_bar)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    pub theta: Vec<f64>,
    pub step: f64,
    pub value: f64,
    pub accepted: bool,
}

/// Backtracking along `gradient`: tries `initial_step * shrink^k` for
/// `k = 0..=max_halvings` and takes the first strict improvement over
/// `current_value`.
pub fn line_search<F>(
    theta: &[f64],
    gradient: &[f64],
    current_value: f64,
    mut objective: F,
    config: &LineSearchConfig,
) -> Result<LineSearchResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let unchanged = LineSearchResult {
        theta: theta.to_vec(),
        step: 0.0,
        value: current_value,
        accepted: false,
    };
    if gradient.iter().all(|&g| g == 0.0) || gradient.iter().any(|g| !g.is_finite()) {
        return Ok(unchanged);
    }
    let mut step = config.initial_step;
    for _ in 0..=config.max_halvings {
        let candidate: Vec<f64> = theta.iter().zip(gradient).map(|(t, g)| t + step * g).collect();
        let value = objective(&candidate)?;
        if value > current_value {
            return Ok(LineSearchResult {
                theta: candidate,
                step,
                value,
                accepted: true,
            });
        }
        step *= config.shrink;
    }
    Ok(unchanged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub discounted: f64,
    pub undiscounted: f64,
}

/// Mean discounted and undiscounted return over full-horizon rollouts.
/// Episode `e` uses the stream `(seed, EVALUATION, tag, e)`.
pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &PolicyParams,
    gamma: f64,
    episodes: usize,
    seed: u64,
    tag: u64,
) -> Result<EvalSummary> {
    let returns: Vec<(f64, f64)> = (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::stream(seed, &[purpose::EVALUATION, tag, e]);
            let mut state = env.reset(&mut r);
            let (mut disc, mut undisc, mut discount) = (0.0, 0.0, 1.0);
            for _ in 0..env.horizon() {
                let action = policy.sample_action(&state.observation, &mut r)?;
                let (next, reward) = env.step(&state, action, &mut r)?;
                disc += discount * reward;
                undisc += reward;
                discount *= gamma;
                state = next;
            }
            Ok((disc, undisc))
        })
        .collect::<Result<_>>()?;
    let k = episodes as f64;
    Ok(EvalSummary {
        discounted: returns.iter().map(|r| r.0).sum::<f64>() / k,
        undiscounted: returns.iter().map(|r| r.1).sum::<f64>() / k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Surrogate at the behavior policy followed by one value per accepted step.
    pub surrogate_values: Vec<f64>,
    pub step_sizes: Vec<f64>,
    /// Off-policy estimate of the new policy from the batch.
    pub batch_estimate: f64,
    pub eval: EvalSummary,
    pub r_max_eff: f64,
    pub r_max_source: RMaxSource,
    /// `d2_hat(T)` at the final offline iterate.
    pub renyi_full: f64,
    pub renyi_max: f64,
    pub clipped_weights: usize,
}

impl IterationLog {
    pub fn surrogate_final(&self) -> f64 {
        *self
            .surrogate_values
            .last()
            .expect("at least the initial surrogate value")
    }

    pub fn step_count(&self) -> usize {
        self.step_sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schedule: Dcs,
    pub initial_eval: EvalSummary,
    pub logs: Vec<IterationLog>,
    pub final_params: PolicyParams,
}

/// One offline optimisation phase on a fixed batch.
fn offline_phase(
    batch: &TruncatedBatch,
    behavior: &PolicyParams,
    config: &OptimConfig,
    iteration: usize,
) -> Result<(PolicyParams, IterationLog)> {
    let (r_max, source) = effective_r_max(batch, config.r_min_max);
    let surrogate = Surrogate::new(batch, behavior, config.gamma, config.delta, r_max, config.iw_clip)?;
    let mut current = behavior.clone();
    let mut value = surrogate.evaluate(&current)?;
    let mut values = vec![value.value];
    let mut steps = Vec::new();
    for _ in 0..config.offline_iterations {
        let (_, grad) = surrogate.value_and_gradient(&current)?;
        let ls = line_search(
            current.theta(),
            &grad,
            value.value,
            |th| Ok(surrogate.evaluate(&current.with_theta(th.to_vec())?)?.value),
            &config.line_search,
        )?;
        if !ls.accepted {
            break;
        }
        current = current.with_theta(ls.theta)?;
        value = surrogate.evaluate(&current)?;
        if value.value < *values.last().unwrap() {
            return Err(Error::Internal("surrogate decreased after an accepted step".into()));
        }
        values.push(value.value);
        steps.push(ls.step);
    }
    let log = IterationLog {
        iteration,
        surrogate_values: values,
        step_sizes: steps,
        batch_estimate: value.j_hat,
        eval: EvalSummary {
            discounted: f64::NAN,
            undiscounted: f64::NAN,
        },
        r_max_eff: r_max,
        r_max_source: source,
        renyi_full: *value.renyi.last().unwrap(),
        renyi_max: value.renyi.iter().cloned().fold(1.0, f64::max),
        clipped_weights: value.clipped,
    };
    Ok((current, log))
}

/// Alternates collection and offline optimisation. The schedule is fixed
/// for the whole run; batch `j` uses collection seed `(seed, COLLECTION, j)`.
pub fn run(
    env: &dyn Environment,
    initial_params: &PolicyParams,
    config: &OptimConfig,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<RunResult> {
    config.validate()?;
    let schedule = config.schedule(env.horizon())?;
    let initial_eval = evaluate_policy(env, initial_params, config.gamma, config.eval_episodes, config.seed, 0)?;
    let mut behavior = initial_params.clone();
    let mut logs = Vec::with_capacity(config.online_iterations);
    for j in 0..config.online_iterations {
        let collection_seed = rng::derive_seed(config.seed, &[purpose::COLLECTION, j as u64]);
        let batch = crate::estimators::collect_batch(env, &behavior, &schedule, collection_seed)?;
        let (next, mut log) = offline_phase(&batch, &behavior, config, j + 1)?;
        log.eval = evaluate_policy(
            env,
            &next,
            config.gamma,
            config.eval_episodes,
            config.seed,
            j as u64 + 1,
        )?;
        on_iteration(&log);
        logs.push(log);
        behavior = next;
    }
    Ok(RunResult {
        schedule,
        initial_eval,
        logs,
        final_params: behavior,
    })
}
