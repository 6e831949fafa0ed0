//! Differentiable discrete-action policies.
//!
//! A policy is a tanh MLP (no hidden layers = linear softmax) followed by a
//! softmax over clamped logits. Gradients are computed by a fixed-topology
//! reverse pass over the layer stack.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`, so every action keeps
/// probability at least `~e^-60 / |A|`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax,
    MlpTanh { hidden: Vec<usize> },
}

impl Architecture {
    pub fn hidden(&self) -> &[usize] {
        match self {
            Architecture::LinearSoftmax => &[],
            Architecture::MlpTanh { hidden } => hidden,
        }
    }

    /// `[obs_dim, hidden.., n_actions]`.
    pub fn layer_sizes(&self, obs_dim: usize, n_actions: usize) -> Vec<usize> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(self.hidden());
        sizes.push(n_actions);
        sizes
    }

    pub fn num_params(&self, obs_dim: usize, n_actions: usize) -> usize {
        self.layer_sizes(obs_dim, n_actions)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Preprocessing applied to raw observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    Identity,
    /// `(x - offset) * scale`, elementwise.
    Affine {
        offset: Vec<f64>,
        scale: Vec<f64>,
    },
}

impl FeatureMap {
    fn apply(&self, state: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => state.to_vec(),
            FeatureMap::Affine { offset, scale } => state
                .iter()
                .zip(offset.iter().zip(scale))
                .map(|(x, (o, s))| (x - o) * s)
                .collect(),
        }
    }

    fn check(&self, obs_dim: usize) -> Result<()> {
        match self {
            FeatureMap::Identity => Ok(()),
            FeatureMap::Affine { offset, scale } => {
                for v in [offset, scale] {
                    if v.len() != obs_dim {
                        return Err(Error::DimensionMismatch {
                            expected: obs_dim,
                            got: v.len(),
                        });
                    }
                }
                Ok(())
            }
        }
    }
}

/// Policy parameters: architecture descriptor plus a flat parameter vector.
///
/// Layout per layer: weights row-major `(out, in)`, then `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    architecture: Architecture,
    obs_dim: usize,
    n_actions: usize,
    features: FeatureMap,
    theta: Vec<f64>,
}

/// Cached forward pass, reused by the gradient routines.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Layer inputs: `activations[0]` are the features, `activations[l]` the
    /// tanh outputs of hidden layer `l`.
    activations: Vec<Vec<f64>>,
    clamped: Vec<bool>,
    probs: Vec<f64>,
}

impl Forward {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl PolicyParams {
    pub fn new(
        architecture: Architecture,
        obs_dim: usize,
        n_actions: usize,
        features: FeatureMap,
        theta: Vec<f64>,
    ) -> Result<Self> {
        if obs_dim == 0 || n_actions < 2 {
            return Err(Error::domain("policy needs obs_dim >= 1 and at least two actions"));
        }
        features.check(obs_dim)?;
        let expected = architecture.num_params(obs_dim, n_actions);
        if theta.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: theta.len(),
            });
        }
        Ok(PolicyParams {
            architecture,
            obs_dim,
            n_actions,
            features,
            theta,
        })
    }

    pub fn zeros(architecture: Architecture, obs_dim: usize, n_actions: usize, features: FeatureMap) -> Result<Self> {
        let len = architecture.num_params(obs_dim, n_actions);
        Self::new(architecture, obs_dim, n_actions, features, vec![0.0; len])
    }

    /// State-independent linear-softmax policy with the given action probabilities.
    pub fn constant(obs_dim: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::domain("constant policy needs strictly positive probabilities"));
        }
        let mut params = Self::zeros(Architecture::LinearSoftmax, obs_dim, probs.len(), FeatureMap::Identity)?;
        let bias_start = obs_dim * probs.len();
        for (b, p) in params.theta[bias_start..].iter_mut().zip(probs) {
            *b = p.ln();
        }
        Ok(params)
    }

    /// Column-normalised Gaussian initialisation: each unit's incoming
    /// weight vector is drawn from N(0, I) and scaled to norm `gain`
    /// (`output_gain` for the output layer). Biases start at zero.
    pub fn normc<R: Rng + ?Sized>(
        architecture: Architecture,
        obs_dim: usize,
        n_actions: usize,
        features: FeatureMap,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(architecture, obs_dim, n_actions, features)?;
        let sizes = params.architecture.layer_sizes(obs_dim, n_actions);
        let n_layers = sizes.len() - 1;
        let mut offset = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
            for row in 0..fan_out {
                let slice = &mut params.theta[offset + row * fan_in..offset + (row + 1) * fan_in];
                for v in slice.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in slice.iter_mut() {
                    *v *= gain / norm;
                }
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Same architecture with a different parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::LengthMismatch {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        Ok(PolicyParams { theta, ..self.clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy parameters serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: PolicyParams = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(raw.architecture, raw.obs_dim, raw.n_actions, raw.features, raw.theta)
    }

    pub fn forward(&self, state: &[f64]) -> Result<Forward> {
        if state.len() != self.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim,
                got: state.len(),
            });
        }
        let sizes = self.architecture.layer_sizes(self.obs_dim, self.n_actions);
        let n_layers = sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers);
        activations.push(self.features.apply(state));
        let mut offset = 0;
        let mut logits = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.theta[offset..offset + fan_in * fan_out];
            let biases = &self.theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = activations.last().unwrap();
            let pre: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    biases[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            offset += fan_in * fan_out + fan_out;
            if l + 1 == n_layers {
                logits = pre;
            } else {
                activations.push(pre.into_iter().map(f64::tanh).collect());
            }
        }
        let clamped: Vec<bool> = logits.iter().map(|z| z.abs() > LOGIT_CLAMP).collect();
        for z in logits.iter_mut() {
            *z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(Forward {
            activations,
            clamped,
            probs,
        })
    }

    /// Reverse pass: adds `scale * d(logits)/d(theta)^T dlogits` into `out`.
    pub fn accumulate_gradient(&self, fwd: &Forward, dlogits: &[f64], scale: f64, out: &mut [f64]) {
        let sizes = self.architecture.layer_sizes(self.obs_dim, self.n_actions);
        let n_layers = sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for w in sizes.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        let mut delta: Vec<f64> = dlogits
            .iter()
            .zip(&fwd.clamped)
            .map(|(d, &c)| if c { 0.0 } else { d * scale })
            .collect();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let offset = offsets[l];
            let input = &fwd.activations[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut out[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                out[offset + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &self.theta[offset..offset + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    pub fn action_distribution(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(state)?.probs)
    }

    pub fn log_prob(&self, state: &[f64], action: usize) -> Result<f64> {
        let probs = self.action_distribution(state)?;
        probs.get(action).map(|p| p.ln()).ok_or(Error::InvalidAction {
            action,
            n_actions: self.n_actions,
        })
    }

    pub fn grad_log_prob(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        if action >= self.n_actions {
            return Err(Error::InvalidAction {
                action,
                n_actions: self.n_actions,
            });
        }
        let fwd = self.forward(state)?;
        let dlogits = score_logits(&fwd.probs, action);
        let mut grad = vec![0.0; self.theta.len()];
        self.accumulate_gradient(&fwd, &dlogits, 1.0, &mut grad);
        Ok(grad)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<usize> {
        let probs = self.action_distribution(state)?;
        Ok(sample_categorical(&probs, rng))
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `d log softmax(z)_a / dz = e_a - p`.
pub fn score_logits(probs: &[f64], action: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| if k == action { 1.0 - p } else { -p })
        .collect()
}

/// Exponentiated 2-Renyi divergence between two discrete distributions.
pub fn renyi2(p: &[f64], q: &[f64]) -> f64 {
    if p == q {
        return 1.0;
    }
    p.iter().zip(q).map(|(p, q)| p * p / q).sum()
}

/// `d renyi2(softmax(z), q) / dz_k = 2 p_k^2 / q_k - 2 p_k d2`.
pub fn renyi2_logits(p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let d2 = renyi2(p, q);
    let grad = p.iter().zip(q).map(|(p, q)| 2.0 * p * p / q - 2.0 * p * d2).collect();
    (d2, grad)
}

fn check_compatible(target: &PolicyParams, behavior: &PolicyParams) -> Result<()> {
    if target.n_actions != behavior.n_actions {
        return Err(Error::DimensionMismatch {
            expected: behavior.n_actions,
            got: target.n_actions,
        });
    }
    if target.obs_dim != behavior.obs_dim {
        return Err(Error::DimensionMismatch {
            expected: behavior.obs_dim,
            got: target.obs_dim,
        });
    }
    Ok(())
}

/// `sum_a target(a|s)^2 / behavior(a|s)`.
pub fn state_renyi2(target: &PolicyParams, behavior: &PolicyParams, state: &[f64]) -> Result<f64> {
    check_compatible(target, behavior)?;
    let p = target.action_distribution(state)?;
    let q = behavior.action_distribution(state)?;
    Ok(renyi2(&p, &q))
}

/// Value and gradient of [`state_renyi2`] with respect to the target parameters.
pub fn state_renyi2_grad(target: &PolicyParams, behavior: &PolicyParams, state: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_compatible(target, behavior)?;
    let fwd = target.forward(state)?;
    let q = behavior.action_distribution(state)?;
    let (d2, dlogits) = renyi2_logits(&fwd.probs, &q);
    let mut grad = vec![0.0; target.num_params()];
    target.accumulate_gradient(&fwd, &dlogits, 1.0, &mut grad);
    Ok((d2, grad))
}
