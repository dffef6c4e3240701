//! Training objectives: advantage-weighted policy regression in privileged
//! and symmetric variants, TD and expectile critic losses, Monte-Carlo value
//! regression, and plain behavior cloning.
//!
//! All losses return the scalar objective together with exact parameter
//! gradients for the one network being trained; every other network involved
//! is treated as frozen. Advantage weights w = min(exp(A/beta), W_max) are
//! constants with respect to the policy parameters. Critics may read the
//! privileged features o_p; the policy input never includes them.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{backward, forward, Input, MlpGrads, MlpParams, OutputHead};

/// Which observations the critics of a batch consume: privileged mode feeds
/// them the window plus o_p, symmetric mode the window alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticMode {
    Privileged,
    Symmetric,
}

/// One encoded transition. `z_idx` holds the active one-hot indices of the
/// window encoding (the policy's whole input); `o_p` is the privileged
/// feature vector of the current hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub z_idx: Vec<usize>,
    pub z_next_idx: Vec<usize>,
    pub o_p: Vec<f64>,
    pub o_p_next: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub done: bool,
}

/// A batch of encoded transitions plus the dimensions needed to check the
/// networks against it.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub mode: CriticMode,
    pub z_dim: usize,
    pub o_p_dim: usize,
    pub n_actions: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input width critics must accept under this batch's mode.
    pub fn critic_dim(&self) -> usize {
        match self.mode {
            CriticMode::Privileged => self.z_dim + self.o_p_dim,
            CriticMode::Symmetric => self.z_dim,
        }
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(CoreError::InvalidConfig("empty batch".into()));
        }
        Ok(())
    }

    fn check_critic(&self, net: &MlpParams, out_dim: usize, what: &str) -> Result<()> {
        if net.in_dim() != self.critic_dim() {
            return Err(CoreError::Shape(format!(
                "{what} expects input {} but the batch mode provides {}",
                net.in_dim(),
                self.critic_dim()
            )));
        }
        if net.out_dim() != out_dim {
            return Err(CoreError::Shape(format!(
                "{what} has {} outputs, expected {out_dim}",
                net.out_dim()
            )));
        }
        Ok(())
    }

    fn check_policy(&self, net: &MlpParams) -> Result<()> {
        if net.in_dim() != self.z_dim {
            return Err(CoreError::Shape(format!(
                "policy expects input {} but windows encode to {}",
                net.in_dim(),
                self.z_dim
            )));
        }
        if net.out_dim() != self.n_actions {
            return Err(CoreError::Shape(format!(
                "policy has {} outputs for {} actions",
                net.out_dim(),
                self.n_actions
            )));
        }
        if net.output_head != OutputHead::CategoricalLogits {
            return Err(CoreError::Shape(
                "policy network must use a categorical-logits head".into(),
            ));
        }
        Ok(())
    }

    /// Critic input for the current state of sample `i`.
    pub fn critic_input(&self, i: usize) -> Input<'_> {
        let s = &self.samples[i];
        match self.mode {
            CriticMode::Privileged => Input::OneHotDense {
                idx: &s.z_idx,
                tail: &s.o_p,
            },
            CriticMode::Symmetric => Input::OneHot(&s.z_idx),
        }
    }

    /// Critic input for the successor state of sample `i`.
    pub fn critic_input_next(&self, i: usize) -> Input<'_> {
        let s = &self.samples[i];
        match self.mode {
            CriticMode::Privileged => Input::OneHotDense {
                idx: &s.z_next_idx,
                tail: &s.o_p_next,
            },
            CriticMode::Symmetric => Input::OneHot(&s.z_next_idx),
        }
    }

    pub fn policy_input(&self, i: usize) -> Input<'_> {
        Input::OneHot(&self.samples[i].z_idx)
    }

    fn critic_inputs(&self) -> Vec<Input<'_>> {
        (0..self.len()).map(|i| self.critic_input(i)).collect()
    }

    fn critic_inputs_next(&self) -> Vec<Input<'_>> {
        (0..self.len()).map(|i| self.critic_input_next(i)).collect()
    }

    fn policy_inputs(&self) -> Vec<Input<'_>> {
        (0..self.len()).map(|i| self.policy_input(i)).collect()
    }
}

/// Hyperparameters shared by every training method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Advantage temperature in w = exp(A/beta).
    pub beta: f64,
    /// Expectile for the value loss.
    pub tau: f64,
    pub gamma: f64,
    /// Cap on advantage weights.
    pub weight_clip: f64,
    /// Offline gradient-step budget.
    pub n_off: u64,
    /// Online environment-step budget.
    pub n_on: u64,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Polyak coefficient for target networks.
    pub target_update_rate: f64,
    /// Observation-window length.
    pub k: usize,
    pub seed: u64,
    /// Hidden layer widths for every network.
    pub hidden: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            beta: 10.0,
            tau: 0.7,
            gamma: 0.97,
            weight_clip: 100.0,
            n_off: 20_000,
            n_on: 20_000,
            batch_size: 256,
            lr_actor: 1e-4,
            lr_critic: 1e-4,
            target_update_rate: 0.005,
            k: 6,
            seed: 0,
            hidden: vec![64],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.weight_clip >= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "weight clip must be at least 1, got {}",
                self.weight_clip
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return Err(CoreError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "target update rate must lie in (0, 1], got {}",
                self.target_update_rate
            )));
        }
        if self.k == 0 {
            return Err(CoreError::InvalidConfig("window length must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(CoreError::InvalidConfig(format!(
                "hidden sizes must be nonempty and positive, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Scalar objective plus gradients for the trained network.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: MlpGrads,
}

/// Summary of the advantage weights used by a policy loss, for metrics.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of samples clipped at W_max.
    pub clipped: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyLossOutput {
    pub loss: f64,
    pub grads: MlpGrads,
    pub weights: WeightStats,
}

// ---------------------------------------------------------------------------
// Critic losses.
// ---------------------------------------------------------------------------

/// Squared one-step TD error of Q against a frozen V target:
/// mean over the batch of (r + gamma * V(next) * (1 - done) - Q(a))^2.
pub fn q_td_loss(
    batch: &Batch,
    q_net: &MlpParams,
    v_target_net: &MlpParams,
    gamma: f64,
) -> Result<LossOutput> {
    batch.check_nonempty()?;
    batch.check_critic(q_net, batch.n_actions, "Q network")?;
    batch.check_critic(v_target_net, 1, "V target network")?;

    let (q_out, cache) = forward(q_net, &batch.critic_inputs())?;
    let (v_next, _) = forward(v_target_net, &batch.critic_inputs_next())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut out_grads = vec![vec![0.0; batch.n_actions]; batch.len()];
    for (i, s) in batch.samples.iter().enumerate() {
        let bootstrap = if s.done { 0.0 } else { gamma * v_next[i][0] };
        let err = q_out[i][s.a] - (s.r + bootstrap);
        loss += err * err / n;
        out_grads[i][s.a] = 2.0 * err / n;
    }
    let grads = backward(q_net, &cache, &out_grads)?;
    Ok(LossOutput { loss, grads })
}

/// Expectile regression of V toward a frozen Q target at the taken action:
/// mean of |tau - 1{u < 0}| * u^2 with u = Q(a) - V.
pub fn v_expectile_loss(
    batch: &Batch,
    v_net: &MlpParams,
    q_target_net: &MlpParams,
    tau: f64,
) -> Result<LossOutput> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    batch.check_nonempty()?;
    batch.check_critic(v_net, 1, "V network")?;
    batch.check_critic(q_target_net, batch.n_actions, "Q target network")?;

    let (v_out, cache) = forward(v_net, &batch.critic_inputs())?;
    let (q_out, _) = forward(q_target_net, &batch.critic_inputs())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut out_grads = vec![vec![0.0]; batch.len()];
    for (i, s) in batch.samples.iter().enumerate() {
        let u = q_out[i][s.a] - v_out[i][0];
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        loss += w * u * u / n;
        out_grads[i][0] = -2.0 * w * u / n;
    }
    let grads = backward(v_net, &cache, &out_grads)?;
    Ok(LossOutput { loss, grads })
}

/// Squared regression of V toward provided Monte-Carlo returns-to-go, the
/// return-based legacy estimator. `returns[i]` must be the discounted
/// return-to-go of sample `i`.
pub fn mc_value_loss(batch: &Batch, returns: &[f64], v_net: &MlpParams) -> Result<LossOutput> {
    batch.check_nonempty()?;
    batch.check_critic(v_net, 1, "V network")?;
    if returns.len() != batch.len() {
        return Err(CoreError::Shape(format!(
            "{} returns for a batch of {}",
            returns.len(),
            batch.len()
        )));
    }
    let (v_out, cache) = forward(v_net, &batch.critic_inputs())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut out_grads = vec![vec![0.0]; batch.len()];
    for i in 0..batch.len() {
        let err = v_out[i][0] - returns[i];
        loss += err * err / n;
        out_grads[i][0] = 2.0 * err / n;
    }
    let grads = backward(v_net, &cache, &out_grads)?;
    Ok(LossOutput { loss, grads })
}

/// Discounted suffix sums of a full episode's rewards.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Policy losses.
// ---------------------------------------------------------------------------

/// Clipped exponential advantage weights, min(exp(A/beta), W_max).
pub fn awr_weights(advantages: &[f64], beta: f64, weight_clip: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CoreError::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if weight_clip < 1.0 {
        return Err(CoreError::InvalidConfig(format!(
            "weight clip must be at least 1, got {weight_clip}"
        )));
    }
    Ok(advantages
        .iter()
        .map(|a| (a / beta).exp().min(weight_clip))
        .collect())
}

pub(crate) fn weight_stats(weights: &[f64], weight_clip: f64) -> WeightStats {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let clipped = weights.iter().filter(|&&w| w >= weight_clip).count() as f64 / n;
    WeightStats {
        mean,
        min,
        max,
        clipped,
    }
}

/// Weighted negative log-likelihood of the taken actions,
/// -mean(w_i * log pi(a_i | z_i)), with the weights held constant.
pub fn weighted_nll_loss(
    batch: &Batch,
    policy_net: &MlpParams,
    weights: &[f64],
) -> Result<LossOutput> {
    batch.check_nonempty()?;
    batch.check_policy(policy_net)?;
    if weights.len() != batch.len() {
        return Err(CoreError::Shape(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    let (logits, cache) = forward(policy_net, &batch.policy_inputs())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut out_grads = vec![vec![0.0; batch.n_actions]; batch.len()];
    for (i, s) in batch.samples.iter().enumerate() {
        let row = &logits[i];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let logp = row[s.a] - lse;
        loss -= weights[i] * logp / n;
        // d(-w logp)/dlogit_j = w (softmax_j - 1{j=a}).
        for j in 0..batch.n_actions {
            let p = (row[j] - lse).exp();
            out_grads[i][j] = weights[i] * p / n;
        }
        out_grads[i][s.a] -= weights[i] / n;
    }
    let grads = backward(policy_net, &cache, &out_grads)?;
    Ok(LossOutput { loss, grads })
}

/// Per-sample advantages Q(a) - V from a Q/V net pair evaluated on the
/// batch's critic inputs.
pub fn advantages_from_nets(
    batch: &Batch,
    q_net: &MlpParams,
    v_net: &MlpParams,
) -> Result<Vec<f64>> {
    batch.check_nonempty()?;
    batch.check_critic(q_net, batch.n_actions, "Q network")?;
    batch.check_critic(v_net, 1, "V network")?;
    let inputs = batch.critic_inputs();
    let (q_out, _) = forward(q_net, &inputs)?;
    let (v_out, _) = forward(v_net, &inputs)?;
    Ok(batch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| q_out[i][s.a] - v_out[i][0])
        .collect())
}

fn awr_policy_loss_impl(
    batch: &Batch,
    policy_net: &MlpParams,
    q_net: &MlpParams,
    v_net: &MlpParams,
    beta: f64,
    weight_clip: f64,
    want: CriticMode,
) -> Result<PolicyLossOutput> {
    if batch.mode != want {
        return Err(CoreError::Shape(format!(
            "batch mode {:?} does not match the requested critics {:?}",
            batch.mode, want
        )));
    }
    let advantages = advantages_from_nets(batch, q_net, v_net)?;
    let weights = awr_weights(&advantages, beta, weight_clip)?;
    let out = weighted_nll_loss(batch, policy_net, &weights)?;
    Ok(PolicyLossOutput {
        loss: out.loss,
        grads: out.grads,
        weights: weight_stats(&weights, weight_clip),
    })
}

/// Advantage-weighted regression with privileged critics: the batch must be
/// in privileged mode so Q and V read (z, o_p); the policy reads z alone.
pub fn aawr_policy_loss(
    batch: &Batch,
    policy_net: &MlpParams,
    q_net: &MlpParams,
    v_net: &MlpParams,
    beta: f64,
    weight_clip: f64,
) -> Result<PolicyLossOutput> {
    awr_policy_loss_impl(
        batch,
        policy_net,
        q_net,
        v_net,
        beta,
        weight_clip,
        CriticMode::Privileged,
    )
}

/// The symmetric variant: critics read the window alone.
pub fn sawr_policy_loss(
    batch: &Batch,
    policy_net: &MlpParams,
    q_net: &MlpParams,
    v_net: &MlpParams,
    beta: f64,
    weight_clip: f64,
) -> Result<PolicyLossOutput> {
    awr_policy_loss_impl(
        batch,
        policy_net,
        q_net,
        v_net,
        beta,
        weight_clip,
        CriticMode::Symmetric,
    )
}

/// Plain behavior cloning, -mean log pi(a|z). The caller is responsible for
/// filtering the batch to successful episodes.
pub fn bc_loss(batch: &Batch, policy_net: &MlpParams) -> Result<LossOutput> {
    let weights = vec![1.0; batch.len()];
    weighted_nll_loss(batch, policy_net, &weights)
}
