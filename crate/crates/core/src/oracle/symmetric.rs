//! Symmetric (agent-state-only) value reductions and the symmetric TD
//! fixed point.
//!
//! The symmetric values of a policy are visitation-weighted reductions of
//! its privileged values:
//!
//! ```text
//! Q(z,a) = sum_s d(s|z) Q(s,z,a)      V(z) = sum_s d(s|z) V(s,z)
//! ```
//!
//! TD learning on agent states alone converges elsewhere: its fixed point
//! solves a backup that re-samples the hidden state from `d(s|z)` at every
//! bootstrap,
//!
//! ```text
//! (B q)(z,a) = sum_s d(s|z) [ R(s,a)
//!              + gamma * sum_{s',z'} p(s',z'|s,z,a) sum_{a'} mu(a'|z') q(z',a') ]
//! ```
//!
//! which forgets how the trajectory reached `z`. `B` mixes one-step backups
//! with total next-mass one, so it is a gamma-contraction in the sup norm
//! and has a unique fixed point; [`symmetric_td_fixed_point`] monitors the
//! contraction ratio while iterating. On specs whose agent state pins down
//! the environment state the fixed point coincides with `Q(z,a)`; under
//! aliasing the two can differ, and the shipped witnesses exhibit a gap.

use crate::error::Result;
use crate::oracle::{
    PolicyTable, SolveOptions, ValueTable, VisitationTable, RATIO_MEASURE_FLOOR,
};
use crate::pomdp::EnvAgentMdp;

/// Symmetric values `q[z][a]`, `v[z]` of a policy.
#[derive(Clone, Debug)]
pub struct SymmetricValues {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

/// Fixed point of the symmetric TD operator.
#[derive(Clone, Debug)]
pub struct SymTdFixedPoint {
    pub q: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Max ratio of successive sup-norm sweep changes (gamma-contraction
    /// evidence).
    pub max_contraction_ratio: f64,
}

/// Reduces privileged values to symmetric ones under `d(s|z)`.
pub fn symmetric_values(
    mdp: &EnvAgentMdp,
    values: &ValueTable,
    visitation: &VisitationTable,
) -> SymmetricValues {
    let nz = mdp.n_agent_states();
    let mut q = vec![vec![0.0; mdp.n_actions]; nz];
    let mut v = vec![0.0; nz];
    for z in 0..nz {
        for &(j, w) in &visitation.cond[z] {
            v[z] += w * values.v[j];
            for a in 0..mdp.n_actions {
                q[z][a] += w * values.q[j][a];
            }
        }
    }
    SymmetricValues { q, v }
}

/// Iterates the symmetric TD operator to its fixed point.
pub fn symmetric_td_fixed_point(
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    visitation: &VisitationTable,
    opts: SolveOptions,
) -> Result<SymTdFixedPoint> {
    policy.validate(mdp.n_actions)?;
    let nz = mdp.n_agent_states();
    let mut q = vec![vec![0.0; mdp.n_actions]; nz];
    let mut mean_q = vec![0.0; nz];
    let mut iterations = 0;
    let mut prev_delta = f64::NAN;
    let mut max_ratio: f64 = 0.0;
    loop {
        iterations += 1;
        for z in 0..nz {
            mean_q[z] = q[z]
                .iter()
                .zip(policy.row(z))
                .map(|(&x, &w)| w * x)
                .sum();
        }
        let mut delta: f64 = 0.0;
        for z in 0..nz {
            for a in 0..mdp.n_actions {
                let mut acc = 0.0;
                for &(j, w) in &visitation.cond[z] {
                    let cont: f64 = mdp.transitions[j][a]
                        .iter()
                        .map(|&(j2, p)| p * mean_q[mdp.z_of(j2)])
                        .sum();
                    acc += w * (mdp.rewards[j][a] + mdp.gamma * cont);
                }
                delta = delta.max((acc - q[z][a]).abs());
                q[z][a] = acc;
            }
        }
        // Successive sup-changes satisfy ||d_{k+1}|| <= gamma ||d_k|| for the
        // exact operator. Measure the ratio only while the change is large
        // enough that f64 rounding in the sweep cannot distort it.
        if prev_delta.is_finite() && prev_delta > RATIO_MEASURE_FLOOR {
            max_ratio = max_ratio.max(delta / prev_delta);
        }
        prev_delta = delta;
        if delta <= opts.tol {
            break;
        }
        if iterations >= opts.max_iters {
            return Err(crate::error::CoreError::NoConvergence(format!(
                "symmetric TD iteration: sup-change {delta} after {iterations} sweeps"
            )));
        }
    }
    Ok(SymTdFixedPoint {
        q,
        iterations,
        max_contraction_ratio: max_ratio,
    })
}
