//! Exact dynamic-programming oracles on the joint environment/agent-state
//! MDP: policy evaluation with privileged critics, discounted visitation,
//! symmetric (agent-state-only) value reductions, TD fixed points for both
//! critic families, closed-form advantage-weighted policy updates, and the
//! analytical witnesses that separate the two weighting schemes.
//!
//! Everything here is deliberate, dense-table f64 computation with explicit
//! tolerances; nothing is sampled. These functions are the ground truth the
//! neural trainer is checked against.

mod solve;
mod symmetric;
mod update;
mod witness;

pub use solve::{
    asymmetric_td_fixed_point, discounted_visitation, evaluate_privileged,
    finite_horizon_privileged_optimal, finite_horizon_window_optimal, joint_value_iteration,
    policy_return, solve_linear_system, OptimalValues, SolveOptions, TdFixedPoint, ValueTable,
    VisitationTable, DIRECT_SOLVE_LIMIT, RATIO_MEASURE_FLOOR,
};
pub use symmetric::{symmetric_td_fixed_point, symmetric_values, SymTdFixedPoint, SymmetricValues};
pub use update::{
    aawr_policy_iteration, awr_closed_form_update, maximize_awr_objective_pga, AdvantageTable,
    PgaOptions,
};
pub use witness::{
    jensen_gap_witness, jensen_gap_witness_scaled, symmetric_bias_witness, JensenWitnessReport,
    SymmetricBiasReport,
};

use crate::error::{CoreError, Result};
use crate::pomdp::EnvAgentMdp;

/// A stochastic tabular policy over agent states, `probs[z][a]`, aligned
/// with [`EnvAgentMdp::agent_states`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn uniform(mdp: &EnvAgentMdp) -> Self {
        let p = 1.0 / mdp.n_actions as f64;
        PolicyTable {
            probs: vec![vec![p; mdp.n_actions]; mdp.n_agent_states()],
        }
    }

    /// Builds a policy row by row from the agent states of `mdp`.
    pub fn from_fn(
        mdp: &EnvAgentMdp,
        mut f: impl FnMut(&crate::pomdp::AgentState) -> Vec<f64>,
    ) -> Result<Self> {
        let probs: Vec<Vec<f64>> = mdp.agent_states.iter().map(&mut f).collect();
        let table = PolicyTable { probs };
        table.validate(mdp.n_actions)?;
        Ok(table)
    }

    pub fn validate(&self, n_actions: usize) -> Result<()> {
        for (z, row) in self.probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(CoreError::Shape(format!(
                    "policy row {z} has {} entries, expected {n_actions}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::InvalidSpec(format!(
                    "policy row {z} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, z: usize) -> &[f64] {
        &self.probs[z]
    }

    /// Greedy action of row `z`, lowest index winning ties.
    pub fn argmax(&self, z: usize) -> usize {
        let row = &self.probs[z];
        let mut best = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Total variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{build_env_agent_mdp, random_spec};

    #[test]
    fn uniform_policy_validates() {
        let spec = random_spec(3, 3, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 10_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        mu.validate(mdp.n_actions).unwrap();
    }

    #[test]
    fn total_variation_basics() {
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((total_variation(&[0.6, 0.4], &[0.5, 0.5]) - 0.1).abs() < 1e-15);
    }
}
