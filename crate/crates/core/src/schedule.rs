//! Budget allocation over timesteps.
//!
//! The confidence width of the truncated estimator for a schedule `n` is
//!
//! ```text
//! f(n) = sqrt( 1/2 * log(2/delta) * sum_t c_t / n_t ),
//! c_t  = gamma^t (gamma^t + gamma^(t+1) - 2 gamma^T) / (1 - gamma).
//! ```
//!
//! Minimising `f` subject to `sum_t n_t = budget`, `n` non-increasing and
//! `n_t >= 1` has a closed-form continuous solution (a water-filling with a
//! cutover index `h*`), which is then rounded to an integer schedule that is
//! within a factor `sqrt(2)` of the integer optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant in the PAC budget bounds, taken from the explicit inequalities of
/// the bound's derivation. The reported budgets are sufficient, not tight.
pub const PAC_CONSTANT: f64 = 12.0;

/// Largest horizon accepted by [`brute_force_optimal`].
pub const BRUTE_FORCE_MAX_HORIZON: usize = 6;
/// Largest budget accepted by [`brute_force_optimal`].
pub const BRUTE_FORCE_MAX_BUDGET: u64 = 24;

/// Relaxed values this close to an integer are snapped before flooring.
const INTEGRALITY_SNAP: f64 = 1e-9;

/// Per-timestep weights `c_t` for a `(gamma, T)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    gamma: f64,
    c: Vec<f64>,
    sqrt_c: Vec<f64>,
    /// `sqrt_c_prefix[h] = sum_{i<h} sqrt(c_i)`, length `T + 1`.
    sqrt_c_prefix: Vec<f64>,
}

impl Coefficients {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.c.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn sqrt_values(&self) -> &[f64] {
        &self.sqrt_c
    }

    /// Sum of `sqrt(c_i)` for `i < h`.
    pub fn sqrt_prefix(&self, h: usize) -> f64 {
        self.sqrt_c_prefix[h]
    }

    pub fn sum(&self) -> f64 {
        self.c.iter().sum()
    }
}

/// Computes the coefficient table.
///
/// The bracket is rewritten as `gamma^t * S(T-t) + gamma^(t+1) * S(T-t-1)`
/// with `S(j) = sum_{k<j} gamma^k`, which avoids the cancellation in
/// `gamma^t + gamma^(t+1) - 2 gamma^T` when gamma is close to one and makes
/// `c_{T-1} = gamma^(2(T-1))` hold without rounding slack.
pub fn coefficients(gamma: f64, horizon: usize) -> Result<Coefficients> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if horizon == 0 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    let powers = discount_powers(gamma, horizon + 1);
    // partial[j] = sum_{k<j} gamma^k
    let mut partial = vec![0.0; horizon + 1];
    for j in 1..=horizon {
        partial[j] = partial[j - 1] + powers[j - 1];
    }
    let mut c: Vec<f64> = (0..horizon)
        .map(|t| powers[t] * (powers[t] * partial[horizon - t] + powers[t + 1] * partial[horizon - t - 1]))
        .collect();
    for t in 1..horizon {
        if c[t] > c[t - 1] {
            c[t] = c[t - 1];
        }
    }
    let sqrt_c: Vec<f64> = c.iter().map(|v| v.sqrt()).collect();
    let mut sqrt_c_prefix = Vec::with_capacity(horizon + 1);
    sqrt_c_prefix.push(0.0);
    for s in &sqrt_c {
        let last = *sqrt_c_prefix.last().unwrap();
        sqrt_c_prefix.push(last + s);
    }
    Ok(Coefficients {
        gamma,
        c,
        sqrt_c,
        sqrt_c_prefix,
    })
}

/// `gamma^0 .. gamma^(len-1)` by repeated multiplication.
pub fn discount_powers(gamma: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut p = 1.0;
    for _ in 0..len {
        out.push(p);
        p *= gamma;
    }
    out
}

/// Converts trajectory counts per length (`m[h-1]` = number of length-`h`
/// trajectories) into samples per timestep.
pub fn m_to_n(m: &[u64]) -> Result<Vec<u64>> {
    if m.is_empty() {
        return Err(Error::LengthMismatch { expected: 1, got: 0 });
    }
    let horizon = m.len();
    let mut n = vec![0u64; horizon];
    n[horizon - 1] = m[horizon - 1];
    for t in (0..horizon - 1).rev() {
        n[t] = n[t + 1] + m[t];
    }
    Ok(n)
}

/// Inverse of [`m_to_n`]; `n` must be positive and non-increasing.
pub fn n_to_m(n: &[u64]) -> Result<Vec<u64>> {
    if n.is_empty() {
        return Err(Error::LengthMismatch { expected: 1, got: 0 });
    }
    if let Some(index) = n.iter().position(|&v| v == 0) {
        return Err(Error::NonMonotone { index });
    }
    if let Some(t) = n.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::NonMonotone { index: t + 1 });
    }
    let horizon = n.len();
    let mut m = vec![0u64; horizon];
    m[horizon - 1] = n[horizon - 1];
    for t in 0..horizon - 1 {
        m[t] = n[t] - n[t + 1];
    }
    Ok(m)
}

/// A validated data collection strategy.
///
/// Holds both representations: `m` (trajectory counts per length `1..=T`)
/// and `n` (samples per timestep `0..T`). Always spends exactly `budget`
/// transitions and contains at least one full-length trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dcs {
    budget: u64,
    m: Vec<u64>,
    n: Vec<u64>,
    /// Discount factor the schedule was optimised for, if any.
    #[serde(default)]
    gamma: Option<f64>,
}

impl Dcs {
    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn horizon(&self) -> usize {
        self.m.len()
    }

    /// Trajectory counts, `m()[h - 1]` for length `h`.
    pub fn m(&self) -> &[u64] {
        &self.m
    }

    /// Trajectories of length exactly `h` (1-based).
    pub fn count_of_length(&self, h: usize) -> u64 {
        self.m[h - 1]
    }

    /// Samples per timestep.
    pub fn n(&self) -> &[u64] {
        &self.n
    }

    pub fn n_f64(&self) -> Vec<f64> {
        self.n.iter().map(|&v| v as f64).collect()
    }

    pub fn num_trajectories(&self) -> u64 {
        self.m.iter().sum()
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    /// Tags the schedule with the discount factor it is meant to be used with.
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn is_uniform(&self) -> bool {
        self.m[..self.m.len() - 1].iter().all(|&v| v == 0)
    }

    /// Rejects estimation with a discount different from the design discount.
    pub fn check_gamma(&self, gamma: f64) -> Result<()> {
        match self.gamma {
            Some(g) if g != gamma => Err(Error::GammaMismatch {
                schedule: g,
                requested: gamma,
            }),
            _ => Ok(()),
        }
    }

    /// `phi_h = r_max * sum_{t<h} gamma^t / n_t` for `h = 1..=T` (index `h-1`).
    pub fn phi(&self, gamma: f64, r_max: f64) -> Vec<f64> {
        let powers = discount_powers(gamma, self.horizon());
        let mut acc = 0.0;
        self.n
            .iter()
            .zip(&powers)
            .map(|(&n, &p)| {
                acc += p / n as f64;
                r_max * acc
            })
            .collect()
    }

    /// `sum_h m_h phi_h^2` with unit reward scale. Equals `sum_t c_t / n_t`.
    pub fn phi_sum_squares(&self, gamma: f64) -> f64 {
        self.phi(gamma, 1.0)
            .iter()
            .zip(&self.m)
            .map(|(phi, &m)| m as f64 * phi * phi)
            .sum()
    }
}

/// Validates a trajectory-count vector against a budget.
pub fn validate_dcs(m: &[u64], budget: u64) -> Result<Dcs> {
    if m.is_empty() {
        return Err(Error::LengthMismatch { expected: 1, got: 0 });
    }
    let spent: u64 = m.iter().enumerate().map(|(i, &c)| c * (i as u64 + 1)).sum();
    if spent != budget {
        return Err(Error::BudgetMismatch { spent, budget });
    }
    if *m.last().unwrap() == 0 {
        return Err(Error::BiasedSchedule { horizon: m.len() });
    }
    let n = m_to_n(m)?;
    Ok(Dcs {
        budget,
        m: m.to_vec(),
        n,
        gamma: None,
    })
}

fn dcs_from_n(n: Vec<u64>, budget: u64) -> Result<Dcs> {
    let m = n_to_m(&n)?;
    validate_dcs(&m, budget)
}

/// Uniform-in-the-horizon schedule: `floor(budget / T)` full-length episodes.
///
/// When `T` does not divide the budget the remainder is left unspent, and the
/// returned schedule's budget is `K * T`.
pub fn uniform_dcs(horizon: usize, budget: u64) -> Result<Dcs> {
    if horizon == 0 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    let episodes = budget / horizon as u64;
    if episodes == 0 {
        return Err(Error::domain(format!("budget {budget} is below the horizon {horizon}")));
    }
    let mut m = vec![0; horizon];
    m[horizon - 1] = episodes;
    validate_dcs(&m, episodes * horizon as u64)
}

/// Optimal solution of the continuous relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSolution {
    /// Cutover index: `n_bar[t] = 1` for `t >= h_star`.
    pub h_star: usize,
    pub n_bar: Vec<f64>,
    pub budget: u64,
    /// `sum_t c_t / n_bar_t`, the delta-free part of the squared width.
    pub objective: f64,
}

impl RelaxedSolution {
    /// Confidence width `f(n_bar)` at level `delta`.
    pub fn width(&self, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        Ok((0.5 * (2.0 / delta).ln() * self.objective).sqrt())
    }
}

/// Solves the continuous relaxation in closed form.
///
/// Scans `h = 1..=T` for the unique cutover satisfying
/// `(budget - T + h) * sqrt(c_t) <= S_h` for all `t >= h` and
/// `(budget - T + h) * sqrt(c_t) > S_h` for all `t < h`, where
/// `S_h = sum_{i<h} sqrt(c_i)`. Since `sqrt(c)` is non-increasing only
/// `t = h` and `t = h - 1` are binding, so the scan is `O(T)`.
pub fn solve_relaxed(coeffs: &Coefficients, budget: u64) -> Result<RelaxedSolution> {
    let horizon = coeffs.horizon();
    let t_u = horizon as u64;
    if budget < t_u {
        return Err(Error::domain(format!("budget {budget} is below the horizon {horizon}")));
    }
    let c = coeffs.values();
    if budget == t_u {
        let n_bar = vec![1.0; horizon];
        return Ok(RelaxedSolution {
            h_star: 1,
            objective: c.iter().sum(),
            n_bar,
            budget,
        });
    }
    let sqrt_c = coeffs.sqrt_values();
    let mut found: Option<usize> = None;
    for h in 1..=horizon {
        let level = (budget - t_u) as f64 + h as f64;
        let s = coeffs.sqrt_prefix(h);
        let tail_ok = h == horizon || level * sqrt_c[h] <= s;
        let head_ok = level * sqrt_c[h - 1] > s;
        if tail_ok && head_ok {
            if let Some(prev) = found {
                return Err(Error::Internal(format!(
                    "cutover conditions hold for both h = {prev} and h = {h}"
                )));
            }
            found = Some(h);
        }
    }
    let h_star = found.ok_or_else(|| Error::Internal("no cutover index satisfies the KKT conditions".into()))?;
    let level = (budget - t_u) as f64 + h_star as f64;
    let scale = level / coeffs.sqrt_prefix(h_star);
    let n_bar: Vec<f64> = (0..horizon)
        .map(|t| if t < h_star { sqrt_c[t] * scale } else { 1.0 })
        .collect();
    let objective = c.iter().zip(&n_bar).map(|(c, n)| c / n).sum();
    Ok(RelaxedSolution {
        h_star,
        n_bar,
        budget,
        objective,
    })
}

/// Rounds a relaxed solution: floor every entry, then add one sample to the
/// first `k = budget - sum floor(n_bar)` timesteps.
pub fn round_dcs(relaxed: &RelaxedSolution, budget: u64) -> Result<Dcs> {
    let floors: Vec<u64> = relaxed
        .n_bar
        .iter()
        .map(|&v| {
            let r = v.round();
            let v = if (v - r).abs() < INTEGRALITY_SNAP { r } else { v };
            v.floor().max(1.0) as u64
        })
        .collect();
    let total: u64 = floors.iter().sum();
    if total > budget || (budget - total) as usize > floors.len() {
        return Err(Error::Internal(format!(
            "rounding residual out of range: floors sum to {total}, budget {budget}"
        )));
    }
    let k = (budget - total) as usize;
    let n: Vec<u64> = floors
        .into_iter()
        .enumerate()
        .map(|(t, v)| v + u64::from(t < k))
        .collect();
    dcs_from_n(n, budget)
}

/// The approximately optimal schedule for `(gamma, T, budget)`, tagged with gamma.
pub fn optimal_dcs(coeffs: &Coefficients, budget: u64) -> Result<Dcs> {
    let relaxed = solve_relaxed(coeffs, budget)?;
    Ok(round_dcs(&relaxed, budget)?.with_gamma(coeffs.gamma()))
}

/// Anything usable as a per-timestep sample count.
pub trait SampleCount: Copy {
    fn as_f64(self) -> f64;
}

impl SampleCount for u64 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl SampleCount for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `sum_t c_t / n_t`.
pub fn weighted_inverse_sum<N: SampleCount>(n: &[N], coeffs: &Coefficients) -> Result<f64> {
    if n.len() != coeffs.horizon() {
        return Err(Error::LengthMismatch {
            expected: coeffs.horizon(),
            got: n.len(),
        });
    }
    let mut acc = 0.0;
    for (t, (&n_t, c)) in n.iter().zip(coeffs.values()).enumerate() {
        let v = n_t.as_f64();
        if !(v > 0.0) {
            return Err(Error::domain(format!("n_{t} must be positive, got {v}")));
        }
        acc += c / v;
    }
    Ok(acc)
}

/// Hoeffding confidence width `f(n)` for rewards in `[0, 1]`.
pub fn ci_width<N: SampleCount>(n: &[N], coeffs: &Coefficients, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let s = weighted_inverse_sum(n, coeffs)?;
    Ok((0.5 * (2.0 / delta).ln() * s).sqrt())
}

/// Smallest budget from which the relaxed solution has `h* = T`.
pub fn lambda0(coeffs: &Coefficients) -> f64 {
    let horizon = coeffs.horizon();
    coeffs.sqrt_prefix(horizon) / coeffs.sqrt_values()[horizon - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacReport {
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub constant: f64,
    /// `constant * T * log(2/delta) / ((1-gamma)^2 eps^2)`.
    pub uniform: f64,
    /// `constant * log(2/delta) / ((1-gamma)^3 eps^2)`.
    pub horizon_free: f64,
    /// `min(uniform, horizon_free)`: sufficient budget for the optimised schedule.
    pub optimized: f64,
    pub improvement_factor: f64,
    /// Whether `8 T eps^2 <= log(2/delta) c_0`, the precondition of the bound.
    pub condition_holds: bool,
}

/// Sufficient budgets for `|J_hat - J| <= epsilon` with probability `1 - delta`.
pub fn pac_budget(epsilon: f64, delta: f64, gamma: f64, horizon: usize) -> Result<PacReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::domain(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    let coeffs = coefficients(gamma, horizon)?;
    let log_term = (2.0 / delta).ln();
    let one_minus = 1.0 - gamma;
    let eps2 = epsilon * epsilon;
    let uniform = PAC_CONSTANT * horizon as f64 * log_term / (one_minus * one_minus * eps2);
    let horizon_free = PAC_CONSTANT * log_term / (one_minus.powi(3) * eps2);
    let optimized = uniform.min(horizon_free);
    Ok(PacReport {
        epsilon,
        delta,
        gamma,
        horizon,
        constant: PAC_CONSTANT,
        uniform,
        horizon_free,
        optimized,
        improvement_factor: uniform / optimized,
        condition_holds: 8.0 * horizon as f64 * eps2 <= log_term * coeffs.values()[0],
    })
}

/// Upper bound on `f(rounded) / f(integer optimum)`.
///
/// With `x = n_bar_{T-1}` the sharper bound is `sqrt(x / (x - 1))` when
/// `x > 1`; it is capped at the generic `sqrt(2)`.
pub fn approximation_ratio_bound(relaxed: &RelaxedSolution) -> f64 {
    let generic = std::f64::consts::SQRT_2;
    let last = *relaxed.n_bar.last().expect("non-empty relaxed solution");
    if last > 1.0 {
        (last / (last - 1.0)).sqrt().min(generic)
    } else {
        generic
    }
}

/// Exact integer optimum by exhaustive enumeration. Test oracle only.
///
/// Enumerates non-increasing positive vectors summing to the budget by
/// recursive descent; each entry is bounded above by its predecessor and
/// below by what the remaining entries need.
pub fn brute_force_optimal(coeffs: &Coefficients, budget: u64) -> Result<Dcs> {
    let horizon = coeffs.horizon();
    if horizon > BRUTE_FORCE_MAX_HORIZON || budget > BRUTE_FORCE_MAX_BUDGET {
        return Err(Error::SizeGuard { horizon, budget });
    }
    if budget < horizon as u64 {
        return Err(Error::domain(format!("budget {budget} is below the horizon {horizon}")));
    }

    struct Search<'a> {
        c: &'a [f64],
        current: Vec<u64>,
        best: Option<(f64, Vec<u64>)>,
    }

    impl Search<'_> {
        fn descend(&mut self, t: usize, remaining: u64, cap: u64, partial: f64) {
            let horizon = self.c.len();
            if t == horizon {
                if remaining == 0 && self.best.as_ref().is_none_or(|(v, _)| partial < *v) {
                    self.best = Some((partial, self.current.clone()));
                }
                return;
            }
            let slots_after = (horizon - t - 1) as u64;
            if remaining < slots_after + 1 {
                return;
            }
            let hi = cap.min(remaining - slots_after);
            for v in (1..=hi).rev() {
                // the remaining slots can hold at most v each
                if v * (slots_after + 1) < remaining {
                    break;
                }
                self.current.push(v);
                self.descend(t + 1, remaining - v, v, partial + self.c[t] / v as f64);
                self.current.pop();
            }
        }
    }

    let mut search = Search {
        c: coeffs.values(),
        current: Vec::with_capacity(horizon),
        best: None,
    };
    search.descend(0, budget, budget, 0.0);
    let (_, n) = search
        .best
        .ok_or_else(|| Error::Internal("enumeration found no feasible schedule".into()))?;
    dcs_from_n(n, budget)
}
