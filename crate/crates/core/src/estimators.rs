//! Batches of truncated trajectories and the estimators built on them.
//!
//! Summation order is fixed everywhere: ascending length `h`, ascending
//! trajectory index `i`, ascending step `t`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::policies::{renyi2, PolicyParams};
use crate::rng::{self, purpose};
use crate::schedule::{check_delta, ci_width, coefficients, discount_powers, validate_dcs, Dcs};

/// Behavior probabilities below this are treated as zero.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `h + 1` observations; the last is the state reached after truncation.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let h = self.len();
        if h == 0 || self.rewards.len() != h || self.states.len() != h + 1 {
            return Err(Error::NonConforming(format!(
                "trajectory with {} actions, {} rewards, {} states",
                h,
                self.rewards.len(),
                self.states.len()
            )));
        }
        Ok(())
    }
}

/// Trajectories grouped by length; `by_length[h - 1]` holds the `m_h`
/// trajectories of length `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedBatch {
    by_length: Vec<Vec<Trajectory>>,
    dcs: Dcs,
    behavior_policy_id: String,
}

impl TruncatedBatch {
    pub fn new(dcs: Dcs, by_length: Vec<Vec<Trajectory>>, behavior_policy_id: impl Into<String>) -> Result<Self> {
        if by_length.len() != dcs.horizon() {
            return Err(Error::NonConforming(format!(
                "{} length groups for horizon {}",
                by_length.len(),
                dcs.horizon()
            )));
        }
        for (idx, group) in by_length.iter().enumerate() {
            let h = idx + 1;
            if group.len() as u64 != dcs.count_of_length(h) {
                return Err(Error::NonConforming(format!(
                    "{} trajectories of length {h}, schedule has {}",
                    group.len(),
                    dcs.count_of_length(h)
                )));
            }
            for traj in group {
                traj.check()?;
                if traj.len() != h {
                    return Err(Error::NonConforming(format!(
                        "trajectory of length {} filed under {h}",
                        traj.len()
                    )));
                }
            }
        }
        Ok(TruncatedBatch {
            by_length,
            dcs,
            behavior_policy_id: behavior_policy_id.into(),
        })
    }

    pub fn dcs(&self) -> &Dcs {
        &self.dcs
    }

    pub fn by_length(&self) -> &[Vec<Trajectory>] {
        &self.by_length
    }

    pub fn behavior_policy_id(&self) -> &str {
        &self.behavior_policy_id
    }

    pub fn horizon(&self) -> usize {
        self.dcs.horizon()
    }

    /// All trajectories in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.by_length.iter().flatten()
    }

    pub fn transitions(&self) -> u64 {
        self.iter().map(|t| t.len() as u64).sum()
    }

    /// Writes the batch in the line-oriented record format.
    ///
    /// ```text
    /// # trunc-mc batch v1
    /// budget <budget>
    /// m <m_1> .. <m_T>
    /// gamma <gamma | ->
    /// behavior <id>
    /// <h>\t<s_0>\t<a_0>\t<r_0>\t..\t<s_{h-1}>\t<a_{h-1}>\t<r_{h-1}>\t<s_h>
    /// ```
    ///
    /// One trajectory per line after the header, in canonical order. State
    /// vectors are comma-separated; floats use shortest round-trip notation.
    pub fn to_records(&self) -> String {
        let mut out = String::from("# trunc-mc batch v1\n");
        let _ = writeln!(out, "budget {}", self.dcs.budget());
        let m: Vec<String> = self.dcs.m().iter().map(u64::to_string).collect();
        let _ = writeln!(out, "m {}", m.join(" "));
        match self.dcs.gamma() {
            Some(g) => {
                let _ = writeln!(out, "gamma {g}");
            }
            None => out.push_str("gamma -\n"),
        }
        let _ = writeln!(out, "behavior {}", self.behavior_policy_id);
        let fmt_state = |s: &[f64]| s.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        for traj in self.iter() {
            let _ = write!(out, "{}", traj.len());
            for t in 0..traj.len() {
                let _ = write!(
                    out,
                    "\t{}\t{}\t{}",
                    fmt_state(&traj.states[t]),
                    traj.actions[t],
                    traj.rewards[t]
                );
            }
            let _ = writeln!(out, "\t{}", fmt_state(&traj.states[traj.len()]));
        }
        out
    }

    pub fn from_records(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing `{key}` header")))?;
            line.strip_prefix(key)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| parse_err(no, &format!("expected `{key}`")))
        };
        header("# trunc-mc batch v1")?;
        let budget: u64 = header("budget")?
            .parse()
            .map_err(|_| Error::Parse("bad budget".into()))?;
        let m: Vec<u64> = header("m")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad count `{v}`"))))
            .collect::<Result<_>>()?;
        let gamma = header("gamma")?;
        let behavior = header("behavior")?;
        let mut dcs = validate_dcs(&m, budget)?;
        if gamma != "-" {
            dcs = dcs.with_gamma(
                gamma
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad gamma `{gamma}`")))?,
            );
        }
        let parse_state = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad float `{v}`"))))
                .collect()
        };
        let mut by_length: Vec<Vec<Trajectory>> = vec![Vec::new(); m.len()];
        for (no, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            let h: usize = fields[0].parse().map_err(|_| parse_err(no, "bad length"))?;
            if h == 0 || h > m.len() || fields.len() != 3 * h + 2 {
                return Err(parse_err(no, "record does not match its length field"));
            }
            let mut traj = Trajectory {
                states: Vec::with_capacity(h + 1),
                actions: Vec::new(),
                rewards: Vec::new(),
            };
            for t in 0..h {
                traj.states.push(parse_state(fields[1 + 3 * t])?);
                traj.actions
                    .push(fields[2 + 3 * t].parse().map_err(|_| parse_err(no, "bad action"))?);
                traj.rewards
                    .push(fields[3 + 3 * t].parse().map_err(|_| parse_err(no, "bad reward"))?);
            }
            traj.states.push(parse_state(fields[3 * h + 1])?);
            by_length[h - 1].push(traj);
        }
        Self::new(dcs, by_length, behavior)
    }
}

/// Short stable identifier of a parameter vector (FNV-1a over the bits).
pub fn policy_id(policy: &PolicyParams) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in policy.theta() {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

fn rollout(env: &dyn Environment, policy: &PolicyParams, h: usize, seed: u64, index: u64) -> Result<Trajectory> {
    let mut r = rng::stream(seed, &[purpose::COLLECTION, h as u64, index]);
    let mut state = env.reset(&mut r);
    let mut traj = Trajectory {
        states: Vec::with_capacity(h + 1),
        actions: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
    };
    for _ in 0..h {
        let action = policy.sample_action(&state.observation, &mut r)?;
        let (next, reward) = env.step(&state, action, &mut r)?;
        traj.states.push(std::mem::replace(&mut state, next).observation);
        traj.actions.push(action);
        traj.rewards.push(reward);
    }
    traj.states.push(state.observation);
    Ok(traj)
}

/// Rolls out `m_h` episodes truncated at `h` for every length. Trajectory
/// `i` of length `h` draws from the stream `(seed, COLLECTION, h, i)`, so the
/// batch does not depend on the rayon pool size.
pub fn collect_batch(env: &dyn Environment, policy: &PolicyParams, dcs: &Dcs, seed: u64) -> Result<TruncatedBatch> {
    if env.horizon() < dcs.horizon() {
        return Err(Error::domain(format!(
            "environment horizon {} is shorter than schedule horizon {}",
            env.horizon(),
            dcs.horizon()
        )));
    }
    if env.obs_dim() != policy.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.obs_dim(),
            got: policy.obs_dim(),
        });
    }
    if env.n_actions() != policy.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: env.n_actions(),
            got: policy.n_actions(),
        });
    }
    let tasks: Vec<(usize, u64)> = (1..=dcs.horizon())
        .flat_map(|h| (0..dcs.count_of_length(h)).map(move |i| (h, i)))
        .collect();
    let trajectories: Vec<Trajectory> = tasks
        .par_iter()
        .map(|&(h, i)| rollout(env, policy, h, seed, i))
        .collect::<Result<_>>()?;
    let mut by_length: Vec<Vec<Trajectory>> = vec![Vec::new(); dcs.horizon()];
    for traj in trajectories {
        let h = traj.len();
        by_length[h - 1].push(traj);
    }
    TruncatedBatch::new(dcs.clone(), by_length, policy_id(policy))
}

fn check_estimable(batch: &TruncatedBatch, gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    batch.dcs.check_gamma(gamma)?;
    if batch.dcs.count_of_length(batch.horizon()) == 0 {
        return Err(Error::BiasedSchedule {
            horizon: batch.horizon(),
        });
    }
    Ok(())
}

/// `sum_{t<h} gamma^t r_t / n_t` for one trajectory.
fn scaled_return(traj: &Trajectory, powers: &[f64], n: &[f64]) -> f64 {
    let mut acc = 0.0;
    for t in 0..traj.len() {
        acc += powers[t] * traj.rewards[t] / n[t];
    }
    acc
}

/// Truncated on-policy return estimate.
pub fn on_policy_estimate(batch: &TruncatedBatch, gamma: f64) -> Result<f64> {
    check_estimable(batch, gamma)?;
    let powers = discount_powers(gamma, batch.horizon());
    let n = batch.dcs.n_f64();
    Ok(batch.iter().map(|traj| scaled_return(traj, &powers, &n)).sum())
}

/// `point ± reward_range * f(n)`; `reward_range` is the width of the reward
/// interval (1 for rewards in `[0, 1]`).
pub fn hoeffding_interval(point: f64, dcs: &Dcs, gamma: f64, delta: f64, reward_range: f64) -> Result<(f64, f64)> {
    if !(reward_range > 0.0) {
        return Err(Error::domain(format!(
            "reward range must be positive, got {reward_range}"
        )));
    }
    let coeffs = coefficients(gamma, dcs.horizon())?;
    let half = reward_range * ci_width(dcs.n(), &coeffs, delta)?;
    Ok((point - half, point + half))
}

/// Sum of per-step log-ratios `log target(a|s) - log behavior(a|s)`.
pub fn log_importance_weight(traj: &Trajectory, target: &PolicyParams, behavior: &PolicyParams) -> Result<f64> {
    let mut acc = 0.0;
    for t in 0..traj.len() {
        let s = &traj.states[t];
        let a = traj.actions[t];
        let q = behavior.action_distribution(s)?;
        let q_a = *q.get(a).ok_or(Error::InvalidAction {
            action: a,
            n_actions: q.len(),
        })?;
        if q_a < PROB_FLOOR {
            return Err(Error::AbsoluteContinuity { step: t, prob: q_a });
        }
        let p = target.action_distribution(s)?;
        acc += p[a].ln() - q_a.ln();
    }
    Ok(acc)
}

pub fn importance_weight(traj: &Trajectory, target: &PolicyParams, behavior: &PolicyParams) -> Result<f64> {
    Ok(log_importance_weight(traj, target, behavior)?.exp())
}

/// Truncated importance-sampling estimate with optional whole-trajectory
/// weight clipping.
pub fn off_policy_estimate(
    batch: &TruncatedBatch,
    gamma: f64,
    target: &PolicyParams,
    behavior: &PolicyParams,
    iw_clip: Option<f64>,
) -> Result<f64> {
    check_estimable(batch, gamma)?;
    if let Some(c) = iw_clip {
        if !(c > 0.0) {
            return Err(Error::domain(format!(
                "importance weight clip must be positive, got {c}"
            )));
        }
    }
    let powers = discount_powers(gamma, batch.horizon());
    let n = batch.dcs.n_f64();
    let mut total = 0.0;
    for traj in batch.iter() {
        let mut w = importance_weight(traj, target, behavior)?;
        if let Some(c) = iw_clip {
            w = w.min(c);
        }
        total += w * scaled_return(traj, &powers, &n);
    }
    Ok(total)
}

/// Plug-in divergence estimates `d2_hat(h)` for `h = 1..=T` (index `h-1`):
/// the average, over trajectories of length at least `h`, of the product of
/// per-state divergences along the first `h` states.
pub fn per_length_renyi(batch: &TruncatedBatch, target: &PolicyParams, behavior: &PolicyParams) -> Result<Vec<f64>> {
    let horizon = batch.horizon();
    let mut sums = vec![0.0; horizon];
    for traj in batch.iter() {
        let mut prod = 1.0;
        for t in 0..traj.len() {
            let p = target.action_distribution(&traj.states[t])?;
            let q = behavior.action_distribution(&traj.states[t])?;
            prod *= renyi2(&p, &q);
            sums[t] += prod;
        }
    }
    let n = batch.dcs.n();
    Ok(sums.iter().zip(n).map(|(s, &count)| s / count as f64).collect())
}

pub fn empirical_renyi(
    batch: &TruncatedBatch,
    target: &PolicyParams,
    behavior: &PolicyParams,
    h: usize,
) -> Result<f64> {
    if h == 0 || h > batch.horizon() {
        return Err(Error::NoTrajectory(h));
    }
    Ok(per_length_renyi(batch, target, behavior)?[h - 1])
}

/// Cantelli multiplier `(1 - delta) / delta`.
pub fn cantelli_beta(delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok((1.0 - delta) / delta)
}

fn check_r_max(r_max: f64) -> Result<()> {
    if r_max >= 0.0 && r_max.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "r_max must be finite and non-negative, got {r_max}"
        )))
    }
}

/// `sqrt(beta * sum_h m_h phi_h^2 d2(h))`.
pub fn tight_penalty(dcs: &Dcs, gamma: f64, renyi: &[f64], delta: f64, r_max: f64) -> Result<f64> {
    check_r_max(r_max)?;
    if renyi.len() != dcs.horizon() {
        return Err(Error::LengthMismatch {
            expected: dcs.horizon(),
            got: renyi.len(),
        });
    }
    let beta = cantelli_beta(delta)?;
    let phi = dcs.phi(gamma, r_max);
    let s: f64 = dcs
        .m()
        .iter()
        .zip(&phi)
        .zip(renyi)
        .map(|((&m, p), d)| m as f64 * p * p * d)
        .sum();
    Ok((beta * s).sqrt())
}

/// Lower confidence bound using one divergence estimate per truncation length.
#[allow(clippy::too_many_arguments)]
pub fn off_policy_ci_tight(
    point: f64,
    batch: &TruncatedBatch,
    gamma: f64,
    target: &PolicyParams,
    behavior: &PolicyParams,
    delta: f64,
    r_max: f64,
) -> Result<f64> {
    let renyi = per_length_renyi(batch, target, behavior)?;
    Ok(point - tight_penalty(&batch.dcs, gamma, &renyi, delta, r_max)?)
}

/// Lower confidence bound using the full-horizon divergence for every length.
pub fn off_policy_ci_loose(point: f64, dcs: &Dcs, gamma: f64, renyi_t: f64, delta: f64, r_max: f64) -> Result<f64> {
    check_r_max(r_max)?;
    if !(renyi_t >= 1.0) {
        return Err(Error::domain(format!("divergence must be >= 1, got {renyi_t}")));
    }
    let beta = cantelli_beta(delta)?;
    let coeffs = coefficients(gamma, dcs.horizon())?;
    let s = crate::schedule::weighted_inverse_sum(dcs.n(), &coeffs)?;
    Ok(point - (beta * renyi_t * r_max * r_max * s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RMaxSource {
    Empirical,
    Floor,
}

/// Largest absolute reward in the batch, raised to `floor` when given.
pub fn effective_r_max(batch: &TruncatedBatch, floor: Option<f64>) -> (f64, RMaxSource) {
    let empirical = batch
        .iter()
        .flat_map(|t| t.rewards.iter())
        .fold(0.0f64, |acc, r| acc.max(r.abs()));
    match floor {
        Some(f) if empirical < f => (f, RMaxSource::Floor),
        _ => (empirical, RMaxSource::Empirical),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub point: f64,
    /// Cantelli lower bound (off-policy reports).
    pub ci_lower: Option<f64>,
    /// Hoeffding half-width (on-policy reports).
    pub half_width: Option<f64>,
    pub per_length_renyi: Vec<f64>,
    pub effective_r_max: f64,
    pub r_max_source: RMaxSource,
    pub delta: f64,
}

impl EstimateReport {
    pub fn on_policy(batch: &TruncatedBatch, gamma: f64, delta: f64, reward_range: f64) -> Result<Self> {
        let point = on_policy_estimate(batch, gamma)?;
        let (lo, hi) = hoeffding_interval(point, &batch.dcs, gamma, delta, reward_range)?;
        let (r_max, source) = effective_r_max(batch, None);
        Ok(EstimateReport {
            point,
            ci_lower: None,
            half_width: Some(0.5 * (hi - lo)),
            per_length_renyi: vec![1.0; batch.horizon()],
            effective_r_max: r_max,
            r_max_source: source,
            delta,
        })
    }

    pub fn off_policy(
        batch: &TruncatedBatch,
        gamma: f64,
        target: &PolicyParams,
        behavior: &PolicyParams,
        delta: f64,
        iw_clip: Option<f64>,
        r_max_floor: Option<f64>,
    ) -> Result<Self> {
        let point = off_policy_estimate(batch, gamma, target, behavior, iw_clip)?;
        let renyi = per_length_renyi(batch, target, behavior)?;
        let (r_max, source) = effective_r_max(batch, r_max_floor);
        let lower = point - tight_penalty(&batch.dcs, gamma, &renyi, delta, r_max)?;
        Ok(EstimateReport {
            point,
            ci_lower: Some(lower),
            half_width: None,
            per_length_renyi: renyi,
            effective_r_max: r_max,
            r_max_source: source,
            delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{FinalRewardChain, MilestoneEnv};
    use crate::schedule::{optimal_dcs, round_dcs, solve_relaxed, uniform_dcs};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn traj(rewards: &[f64]) -> Trajectory {
        Trajectory {
            states: vec![vec![0.0]; rewards.len() + 1],
            actions: vec![0; rewards.len()],
            rewards: rewards.to_vec(),
        }
    }

    fn constant_batch(dcs: &Dcs, reward: f64) -> TruncatedBatch {
        let by_length = (1..=dcs.horizon())
            .map(|h| (0..dcs.count_of_length(h)).map(|_| traj(&vec![reward; h])).collect())
            .collect();
        TruncatedBatch::new(dcs.clone(), by_length, "test").unwrap()
    }

    #[test]
    fn collect_shapes() {
        let env = MilestoneEnv::new(20).unwrap();
        let policy = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        let uniform = uniform_dcs(20, 100).unwrap();
        let b = collect_batch(&env, &policy, &uniform, 1).unwrap();
        assert_eq!(b.by_length()[19].len(), 5);
        assert_eq!(b.transitions(), 100);

        let dcs = round_dcs(&solve_relaxed(&coefficients(0.5, 2).unwrap(), 12).unwrap(), 12).unwrap();
        let env = MilestoneEnv::new(20).unwrap();
        let b = collect_batch(&env, &policy, &dcs, 1).unwrap();
        assert_eq!((b.by_length()[0].len(), b.by_length()[1].len()), (6, 3));
    }

    #[test]
    fn constant_rewards_give_geometric_sum() {
        for gamma in [0.3, 0.9, 0.99] {
            let dcs = optimal_dcs(&coefficients(gamma, 15).unwrap(), 97).unwrap();
            let est = on_policy_estimate(&constant_batch(&dcs, 1.0), gamma).unwrap();
            assert_relative_eq!(est, (1.0 - gamma.powi(15)) / (1.0 - gamma), max_relative = 1e-12);
        }
    }

    #[test]
    fn hand_example() {
        let dcs = validate_dcs(&[1, 1], 3).unwrap();
        let b = TruncatedBatch::new(dcs, vec![vec![traj(&[1.0])], vec![traj(&[0.0, 1.0])]], "x").unwrap();
        assert_relative_eq!(on_policy_estimate(&b, 0.9).unwrap(), 1.4, epsilon = 1e-15);
    }

    #[test]
    fn uniform_matches_sample_mean() {
        let env = MilestoneEnv::new(30).unwrap();
        let policy = PolicyParams::constant(1, &[0.3, 0.7]).unwrap();
        let dcs = uniform_dcs(30, 120).unwrap();
        let b = collect_batch(&env, &policy, &dcs, 4).unwrap();
        let powers = discount_powers(0.9, 30);
        let mean: f64 = b
            .iter()
            .map(|t| t.rewards.iter().zip(&powers).map(|(r, p)| r * p).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(on_policy_estimate(&b, 0.9).unwrap(), mean, max_relative = 1e-12);
    }

    #[test]
    fn biased_and_gamma_mismatch() {
        let dcs = optimal_dcs(&coefficients(0.9, 3).unwrap(), 9).unwrap();
        let b = constant_batch(&dcs, 1.0);
        assert!(matches!(on_policy_estimate(&b, 0.8), Err(Error::GammaMismatch { .. })));
        assert!(matches!(validate_dcs(&[3, 0], 3), Err(Error::BiasedSchedule { .. })));
    }

    #[test]
    fn hoeffding_examples() {
        let dcs = validate_dcs(&[6, 3], 12).unwrap();
        let (lo, hi) = hoeffding_interval(0.0, &dcs, 0.5, 0.1, 1.0).unwrap();
        assert!((hi - 0.67652).abs() < 1e-5 && (lo + hi).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for delta in [0.1, 0.5, 0.9, 0.99, 0.999999] {
            let (_, hi) = hoeffding_interval(0.0, &dcs, 0.5, delta, 1.0).unwrap();
            assert!(hi < last && hi > 0.0);
            last = hi;
        }
        let (_, wide) = hoeffding_interval(0.0, &dcs, 0.5, 0.1, 2.0).unwrap();
        assert_relative_eq!(wide, 2.0 * hi, epsilon = 1e-15);
    }

    #[test]
    fn importance_weight_examples() {
        let target = PolicyParams::constant(1, &[0.6, 0.4]).unwrap();
        let behavior = PolicyParams::constant(1, &[0.3, 0.7]).unwrap();
        let t = traj(&[0.0, 0.0]);
        assert_relative_eq!(
            importance_weight(&t, &target, &behavior).unwrap(),
            4.0,
            max_relative = 1e-12
        );
        assert_eq!(importance_weight(&t, &behavior, &behavior).unwrap(), 1.0);

        let dcs = validate_dcs(&[1], 1).unwrap();
        let b = TruncatedBatch::new(dcs, vec![vec![traj(&[1.0])]], "x").unwrap();
        let t2 = PolicyParams::constant(1, &[0.8, 0.2]).unwrap();
        let b2 = PolicyParams::constant(1, &[0.2, 0.8]).unwrap();
        assert_relative_eq!(
            off_policy_estimate(&b, 0.9, &t2, &b2, None).unwrap(),
            4.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            off_policy_estimate(&b, 0.9, &t2, &b2, Some(2.0)).unwrap(),
            2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn off_policy_reduces_bitwise() {
        let env = MilestoneEnv::new(50).unwrap();
        let policy = PolicyParams::constant(1, &[0.35, 0.65]).unwrap();
        let dcs = optimal_dcs(&coefficients(0.95, 50).unwrap(), 400).unwrap();
        let b = collect_batch(&env, &policy, &dcs, 2).unwrap();
        let on = on_policy_estimate(&b, 0.95).unwrap();
        let off = off_policy_estimate(&b, 0.95, &policy, &policy, None).unwrap();
        assert_eq!(on.to_bits(), off.to_bits());
        let renyi = per_length_renyi(&b, &policy, &policy).unwrap();
        assert!(renyi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn renyi_example_and_monotone_on_milestone() {
        let dcs = validate_dcs(&[1], 1).unwrap();
        let b = TruncatedBatch::new(dcs, vec![vec![traj(&[0.0])]], "x").unwrap();
        let p = PolicyParams::constant(1, &[0.6, 0.4]).unwrap();
        let q = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(empirical_renyi(&b, &p, &q, 1).unwrap(), 1.04, epsilon = 1e-12);
        assert!(matches!(empirical_renyi(&b, &p, &q, 2), Err(Error::NoTrajectory(2))));

        let env = MilestoneEnv::new(40).unwrap();
        let target = PolicyParams::new(
            crate::Architecture::LinearSoftmax,
            1,
            2,
            crate::FeatureMap::Identity,
            vec![1.5, -0.7, 0.2, 0.1],
        )
        .unwrap();
        let dcs = optimal_dcs(&coefficients(0.9, 40).unwrap(), 300).unwrap();
        let b = collect_batch(&env, &q, &dcs, 9).unwrap();
        let r = per_length_renyi(&b, &target, &q).unwrap();
        assert!(r[0] >= 1.0);
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn tight_vs_loose_bounds() {
        let dcs = uniform_dcs(10, 50).unwrap();
        let renyi = vec![1.0; 10];
        let gamma = 0.9;
        let tight = 3.0 - tight_penalty(&dcs, gamma, &renyi, 0.2, 1.0).unwrap();
        // undiscounted-by-count phi: r_max * sum_t gamma^t
        let phi: f64 = discount_powers(gamma, 10).iter().sum();
        assert_relative_eq!(tight, 3.0 - phi * (4.0 * 10.0 / 50.0f64).sqrt(), max_relative = 1e-12);
        let loose = off_policy_ci_loose(3.0, &dcs, gamma, 1.0, 0.2, 1.0).unwrap();
        assert_relative_eq!(loose, tight, max_relative = 1e-12);
        assert!(off_policy_ci_loose(3.0, &dcs, gamma, 1.5, 0.2, 1.0).unwrap() < loose);
        assert_eq!(cantelli_beta(0.5).unwrap(), 1.0);
    }

    #[test]
    fn tight_bound_dominates_loose_on_batches() {
        let env = MilestoneEnv::new(30).unwrap();
        let behavior = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        let dcs = optimal_dcs(&coefficients(0.9, 30).unwrap(), 200).unwrap();
        for seed in 0..20 {
            let mut r = rng::stream(seed, &[7]);
            let theta: Vec<f64> = (0..4).map(|_| rand::Rng::random::<f64>(&mut r) - 0.5).collect();
            let target = behavior.with_theta(theta).unwrap();
            let b = collect_batch(&env, &behavior, &dcs, seed).unwrap();
            let renyi = per_length_renyi(&b, &target, &behavior).unwrap();
            let tight = off_policy_ci_tight(0.0, &b, 0.9, &target, &behavior, 0.1, 4.0).unwrap();
            let loose = off_policy_ci_loose(0.0, &dcs, 0.9, renyi[29], 0.1, 4.0).unwrap();
            assert!(tight >= loose - 1e-12);
        }
    }

    #[test]
    fn r_max_floor() {
        let dcs = validate_dcs(&[1, 1], 3).unwrap();
        let b = TruncatedBatch::new(dcs, vec![vec![traj(&[-0.3])], vec![traj(&[0.1, 0.2])]], "x").unwrap();
        assert_eq!(effective_r_max(&b, None), (0.3, RMaxSource::Empirical));
        assert_eq!(effective_r_max(&b, Some(0.5)), (0.5, RMaxSource::Floor));
        assert_eq!(effective_r_max(&b, Some(0.1)), (0.3, RMaxSource::Empirical));
    }

    #[test]
    fn variance_sum_identity_on_random_schedules() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..50 {
            let horizon = rand::Rng::random_range(&mut r, 1..=12usize);
            let gamma = rand::Rng::random_range(&mut r, 0.05..0.999);
            let m: Vec<u64> = (0..horizon)
                .map(|h| rand::Rng::random_range(&mut r, if h + 1 == horizon { 1..6 } else { 0..6 }))
                .collect();
            let budget = m.iter().enumerate().map(|(i, &c)| (i as u64 + 1) * c).sum();
            let dcs = validate_dcs(&m, budget).unwrap();
            let coeffs = coefficients(gamma, horizon).unwrap();
            let rhs = crate::schedule::weighted_inverse_sum(dcs.n(), &coeffs).unwrap();
            assert_relative_eq!(dcs.phi_sum_squares(gamma), rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn unbiased_on_milestone() {
        let env = MilestoneEnv::new(100).unwrap();
        let policy = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        let gamma = 0.95;
        let exact = env.exact_return(&policy, gamma).unwrap();
        let dcs = optimal_dcs(&coefficients(gamma, 100).unwrap(), 300).unwrap();
        let runs = 1500;
        let est: Vec<f64> = (0..runs)
            .map(|s| on_policy_estimate(&collect_batch(&env, &policy, &dcs, s).unwrap(), gamma).unwrap())
            .collect();
        let mean = est.iter().sum::<f64>() / runs as f64;
        let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (runs as f64).sqrt());
    }

    #[test]
    fn chain_variance_tracks_last_count() {
        let env = FinalRewardChain::new(4).unwrap();
        let policy = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
        let runs = 3000;
        let variance = |dcs: &Dcs| {
            let est: Vec<f64> = (0..runs)
                .map(|s| on_policy_estimate(&collect_batch(&env, &policy, dcs, s).unwrap(), 0.9).unwrap())
                .collect();
            let mean = est.iter().sum::<f64>() / runs as f64;
            est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
        };
        let exact = |n_last: f64| 0.9f64.powi(6) / n_last;
        let a = validate_dcs(&[0, 0, 0, 5], 20).unwrap();
        let b = validate_dcs(&[7, 3, 0, 5], 33).unwrap();
        for dcs in [a, b] {
            assert_relative_eq!(variance(&dcs), exact(5.0), max_relative = 0.1);
        }
    }

    #[test]
    fn collection_is_independent_of_pool_size() {
        let env = MilestoneEnv::new(100).unwrap();
        let policy = PolicyParams::constant(1, &[0.4, 0.6]).unwrap();
        let dcs = optimal_dcs(&coefficients(0.95, 100).unwrap(), 1000).unwrap();
        let with_threads = |k: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .unwrap()
                .install(|| collect_batch(&env, &policy, &dcs, 17).unwrap())
        };
        assert_eq!(with_threads(1).to_records(), with_threads(4).to_records());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn record_roundtrip(seed in 0u64..1000, budget in 5u64..60, gamma in 0.1f64..0.99) {
            let env = MilestoneEnv::new(20).unwrap();
            let policy = PolicyParams::constant(1, &[0.45, 0.55]).unwrap();
            let dcs = optimal_dcs(&coefficients(gamma, 5).unwrap(), budget).unwrap();
            let b = collect_batch(&env, &policy, &dcs, seed).unwrap();
            let parsed = TruncatedBatch::from_records(&b.to_records()).unwrap();
            prop_assert_eq!(parsed, b);
        }
    }
}
