//! Analytical witness instances separating privileged from symmetric
//! advantage weighting, computed end to end through the exact pipeline.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::oracle::{
    awr_closed_form_update, discounted_visitation, evaluate_privileged, symmetric_td_fixed_point,
    symmetric_values, AdvantageTable, PolicyTable, SolveOptions,
};
use crate::pomdp::{build_env_agent_mdp, AgentState, PomdpSpec};

/// Outcome of the aliased two-action witness.
///
/// The instance has two hidden states sharing one observation, so a single
/// agent state `z` carries `d(s|z) = (1/2, 1/2)`. Rewards are chosen so the
/// exact privileged advantages at `z` are `(+a*beta, -a*beta)` for the first
/// action. Averaging weights before versus after the exponential then
/// separates the two schemes:
///
/// ```text
/// privileged mean weight   E_s exp(A(s,z,a0)/beta) = (e^a + e^-a)/2 = cosh(a)
/// symmetric weight         exp(E_s A(s,z,a0)/beta) = e^0 = 1
/// ```
///
/// With the behavior row (0.6, 0.4) at `z`, the second action's advantages
/// are forced to `(-1.5 a beta, +1.5 a beta)`, whose privileged mean weight
/// cosh(1.5a) overtakes the first action's cosh(a) while both symmetric
/// weights stay 1. The two closed-form updates therefore pick different
/// greedy actions at `z`.
#[derive(Clone, Debug, Serialize)]
pub struct JensenWitnessReport {
    pub beta: f64,
    /// Advantage magnitude in units of beta (the `a` above).
    pub advantage_scale: f64,
    /// Behavior probabilities at the aliased agent state.
    pub mu_row: Vec<f64>,
    /// `d(s|z)` over the two aliased states.
    pub state_weights: Vec<f64>,
    /// Exact privileged advantages divided by beta, `[state][action]`.
    pub scaled_advantages: Vec<Vec<f64>>,
    /// `E_{d(s|z)} exp(A/beta)` per action.
    pub privileged_mean_weights: Vec<f64>,
    /// `exp(E_{d(s|z)} A / beta)` per action.
    pub symmetric_weights: Vec<f64>,
    /// Closed-form updated rows at the aliased agent state.
    pub privileged_update_row: Vec<f64>,
    pub symmetric_update_row: Vec<f64>,
    pub privileged_argmax: usize,
    pub symmetric_argmax: usize,
}

/// Builds the aliased witness POMDP. Both live states emit the shared
/// observation and every action terminates, so the only nontrivial agent
/// state is the initial window and all discounted quantities are exact.
fn jensen_witness_spec(beta: f64, advantage_scale: f64) -> PomdpSpec {
    let r = 2.5 * beta * advantage_scale;
    PomdpSpec {
        name: "aliased-two-action-witness".into(),
        states: vec!["plus".into(), "minus".into(), "done".into()],
        actions: vec!["gamble".into(), "safe".into()],
        observations: vec!["shared".into(), "end".into()],
        // All actions lead to the absorbing terminal state.
        transition: vec![
            0.0, 0.0, 1.0, /* plus, gamble */
            0.0, 0.0, 1.0, /* plus, safe   */
            0.0, 0.0, 1.0, /* minus, gamble */
            0.0, 0.0, 1.0, /* minus, safe   */
            0.0, 0.0, 1.0, /* done, gamble  */
            0.0, 0.0, 1.0, /* done, safe    */
        ],
        // With mu = (0.6, 0.4) at the aliased state these rewards produce
        // advantages exactly (+r*0.4, -r*0.6) and (-r*0.4, +r*0.6).
        reward: vec![r, 0.0, 0.0, r, 0.0, 0.0],
        reward_noise: 0.0,
        emission: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        initial: vec![0.5, 0.5, 0.0],
        gamma: 0.9,
        horizon: 3,
        terminal: vec![false, false, true],
    }
}

/// Runs the witness with advantage magnitude `a = 1`, so the privileged
/// mean weight of the first action is exactly cosh(1).
pub fn jensen_gap_witness(beta: f64) -> Result<JensenWitnessReport> {
    jensen_gap_witness_scaled(beta, 1.0)
}

/// Runs the witness with a configurable advantage magnitude. Scale zero is
/// the degenerate control: all weights collapse to 1 and both updates agree.
pub fn jensen_gap_witness_scaled(beta: f64, advantage_scale: f64) -> Result<JensenWitnessReport> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "temperature beta must be positive and finite, got {beta}"
        )));
    }
    if !(advantage_scale >= 0.0) {
        return Err(CoreError::InvalidConfig(
            "advantage scale must be nonnegative".into(),
        ));
    }
    let spec = jensen_witness_spec(beta, advantage_scale);
    let mdp = build_env_agent_mdp(&spec, 1, 10_000)?;
    let aliased_z = *mdp
        .agent_index
        .get(&AgentState::initial(1, 0))
        .expect("aliased window is reachable");

    let mu = PolicyTable::from_fn(&mdp, |z| {
        if z == &mdp.agent_states[aliased_z] {
            vec![0.6, 0.4]
        } else {
            vec![0.5, 0.5]
        }
    })?;

    let opts = SolveOptions::default();
    let values = evaluate_privileged(&mdp, &mu, opts)?;
    let visitation = discounted_visitation(&mdp, &mu, opts)?;
    let advantages = values.advantages();
    let sym = symmetric_values(&mdp, &values, &visitation);

    let cond = &visitation.cond[aliased_z];
    let state_weights: Vec<f64> = cond.iter().map(|&(_, w)| w).collect();
    let scaled_advantages: Vec<Vec<f64>> = cond
        .iter()
        .map(|&(j, _)| advantages[j].iter().map(|&a| a / beta).collect())
        .collect();
    let n_actions = mdp.n_actions;
    let privileged_mean_weights: Vec<f64> = (0..n_actions)
        .map(|a| {
            cond.iter()
                .zip(&scaled_advantages)
                .map(|(&(_, w), row)| w * row[a].exp())
                .sum()
        })
        .collect();
    let symmetric_weights: Vec<f64> = (0..n_actions)
        .map(|a| ((sym.q[aliased_z][a] - sym.v[aliased_z]) / beta).exp())
        .collect();

    let aawr = awr_closed_form_update(
        &mdp,
        &mu,
        &AdvantageTable::Privileged(advantages),
        beta,
        &visitation,
    )?;
    let sym_adv: Vec<Vec<f64>> = sym
        .q
        .iter()
        .zip(&sym.v)
        .map(|(row, &v)| row.iter().map(|&q| q - v).collect())
        .collect();
    let sawr = awr_closed_form_update(
        &mdp,
        &mu,
        &AdvantageTable::Symmetric(sym_adv),
        beta,
        &visitation,
    )?;

    Ok(JensenWitnessReport {
        beta,
        advantage_scale,
        mu_row: mu.row(aliased_z).to_vec(),
        state_weights,
        scaled_advantages,
        privileged_mean_weights,
        symmetric_weights,
        privileged_update_row: aawr.row(aliased_z).to_vec(),
        symmetric_update_row: sawr.row(aliased_z).to_vec(),
        privileged_argmax: aawr.argmax(aliased_z),
        symmetric_argmax: sawr.argmax(aliased_z),
    })
}

/// Outcome of the recurrent aliasing witness for symmetric TD learning.
#[derive(Clone, Debug, Serialize)]
pub struct SymmetricBiasReport {
    /// Sup-norm gap between the symmetric TD fixed point and the true
    /// symmetric values on the aliased instance.
    pub aliased_gap: f64,
    /// Same gap on the fully observed control instance.
    pub control_gap: f64,
    /// TD versus true symmetric action value at the aliased agent state.
    pub aliased_q_td: f64,
    pub aliased_q_true: f64,
    /// Observed contraction ratios of the TD iterations.
    pub aliased_contraction_ratio: f64,
    pub control_contraction_ratio: f64,
}

/// Two hidden states with different rewards alternate forever behind one
/// shared observation, so the same window recurs at every step with a
/// time-varying hidden-state conditional.
fn bias_witness_spec(aliased: bool) -> PomdpSpec {
    let (observations, emission) = if aliased {
        (
            vec!["start-obs".into(), "shared".into()],
            vec![
                1.0, 0.0, /* start */
                0.0, 1.0, /* hi */
                0.0, 1.0, /* lo */
            ],
        )
    } else {
        (
            vec!["start-obs".into(), "hi-obs".into(), "lo-obs".into()],
            vec![
                1.0, 0.0, 0.0, /* start */
                0.0, 1.0, 0.0, /* hi */
                0.0, 0.0, 1.0, /* lo */
            ],
        )
    };
    PomdpSpec {
        name: if aliased {
            "recurrent-aliasing-witness".into()
        } else {
            "recurrent-aliasing-control".into()
        },
        states: vec!["start".into(), "hi".into(), "lo".into()],
        actions: vec!["go".into()],
        observations,
        transition: vec![
            0.0, 1.0, 0.0, /* start -> hi */
            0.0, 0.0, 1.0, /* hi -> lo */
            0.0, 1.0, 0.0, /* lo -> hi */
        ],
        reward: vec![0.0, 1.0, 0.0],
        reward_noise: 0.0,
        emission,
        initial: vec![1.0, 0.0, 0.0],
        gamma: 0.9,
        horizon: 88,
        terminal: vec![false, false, false],
    }
}

fn bias_gap(spec: &PomdpSpec) -> Result<(f64, f64, Option<(f64, f64)>)> {
    let mdp = build_env_agent_mdp(spec, 1, 10_000)?;
    let mu = PolicyTable::uniform(&mdp);
    let opts = SolveOptions::default();
    let values = evaluate_privileged(&mdp, &mu, opts)?;
    let visitation = discounted_visitation(&mdp, &mu, opts)?;
    let sym = symmetric_values(&mdp, &values, &visitation);
    let td = symmetric_td_fixed_point(&mdp, &mu, &visitation, opts)?;
    let mut gap: f64 = 0.0;
    let mut worst: Option<(f64, f64)> = None;
    for z in 0..mdp.n_agent_states() {
        for a in 0..mdp.n_actions {
            let g = (td.q[z][a] - sym.q[z][a]).abs();
            if g > gap {
                gap = g;
                worst = Some((td.q[z][a], sym.q[z][a]));
            }
        }
    }
    Ok((gap, td.max_contraction_ratio, worst))
}

/// Computes the TD-versus-true gap on the aliased instance and on its fully
/// observed control.
pub fn symmetric_bias_witness() -> Result<SymmetricBiasReport> {
    let (aliased_gap, aliased_ratio, worst) = bias_gap(&bias_witness_spec(true))?;
    let (control_gap, control_ratio, _) = bias_gap(&bias_witness_spec(false))?;
    let (aliased_q_td, aliased_q_true) = worst.unwrap_or((0.0, 0.0));
    Ok(SymmetricBiasReport {
        aliased_gap,
        control_gap,
        aliased_q_td,
        aliased_q_true,
        aliased_contraction_ratio: aliased_ratio,
        control_contraction_ratio: control_ratio,
    })
}
