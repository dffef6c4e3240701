//! Closed-form advantage-weighted policy updates and an independent
//! numerical maximizer for the same objective.
//!
//! For a behavior policy mu with privileged advantages A(s,z,a), the
//! advantage-weighted projection objective over agent-state policies is
//!
//! ```text
//! F(pi) = sum_{s,z} d(s,z) sum_a mu(a|z) exp(A(s,z,a)/beta) log pi(a|z)
//! ```
//!
//! Per agent state this is a weighted maximum-likelihood problem whose
//! unique maximizer is available in closed form:
//!
//! ```text
//! pi*(a|z)  ∝  mu(a|z) * sum_s d(s|z) exp(A(s,z,a)/beta)     (privileged)
//! pi*(a|z)  ∝  mu(a|z) * exp(A(z,a)/beta)                    (symmetric)
//! ```
//!
//! The privileged form averages exponentiated advantages over the hidden
//! state before normalizing; the symmetric form exponentiates the averaged
//! advantage. [`maximize_awr_objective_pga`] maximizes F directly by
//! projected gradient ascent as an independent check of the closed form.

use crate::error::{CoreError, Result};
use crate::oracle::{
    discounted_visitation, evaluate_privileged, policy_return, PolicyTable, SolveOptions,
    ValueTable, VisitationTable,
};
use crate::pomdp::EnvAgentMdp;

/// Advantages for the update: per joint state (privileged critics) or per
/// agent state (symmetric critics).
#[derive(Clone, Debug)]
pub enum AdvantageTable {
    /// `rows[j][a]` over joint states.
    Privileged(Vec<Vec<f64>>),
    /// `rows[z][a]` over agent states.
    Symmetric(Vec<Vec<f64>>),
}

/// Exact advantage-weighted update of `mu`. Agent states with zero
/// visitation mass keep their behavior row (the objective is indifferent
/// there). Exponentials are stabilized by subtracting the per-agent-state
/// maximum, which cancels in the normalization.
pub fn awr_closed_form_update(
    mdp: &EnvAgentMdp,
    mu: &PolicyTable,
    advantages: &AdvantageTable,
    beta: f64,
    visitation: &VisitationTable,
) -> Result<PolicyTable> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "temperature beta must be positive and finite, got {beta}"
        )));
    }
    mu.validate(mdp.n_actions)?;
    let nz = mdp.n_agent_states();
    let mut probs = Vec::with_capacity(nz);
    for z in 0..nz {
        if !visitation.visited[z] {
            probs.push(mu.row(z).to_vec());
            continue;
        }
        let weights: Vec<f64> = match advantages {
            AdvantageTable::Privileged(rows) => {
                let cond = &visitation.cond[z];
                let mut m = f64::NEG_INFINITY;
                for &(j, w) in cond {
                    if w > 0.0 {
                        for a in 0..mdp.n_actions {
                            m = m.max(rows[j][a] / beta);
                        }
                    }
                }
                (0..mdp.n_actions)
                    .map(|a| {
                        cond.iter()
                            .filter(|&&(_, w)| w > 0.0)
                            .map(|&(j, w)| w * (rows[j][a] / beta - m).exp())
                            .sum()
                    })
                    .collect()
            }
            AdvantageTable::Symmetric(rows) => {
                let m = rows[z]
                    .iter()
                    .map(|&a| a / beta)
                    .fold(f64::NEG_INFINITY, f64::max);
                rows[z].iter().map(|&a| (a / beta - m).exp()).collect()
            }
        };
        let mut row: Vec<f64> = mu
            .row(z)
            .iter()
            .zip(&weights)
            .map(|(&p, &w)| p * w)
            .collect();
        let total: f64 = row.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "closed-form update degenerate at agent state {z} (mass {total})"
            )));
        }
        for p in &mut row {
            *p /= total;
        }
        probs.push(row);
    }
    let table = PolicyTable { probs };
    table.validate(mdp.n_actions)?;
    Ok(table)
}

/// Options for the projected-gradient maximizer.
#[derive(Clone, Copy, Debug)]
pub struct PgaOptions {
    pub max_iters: usize,
    /// Stop once an accepted step moves the row less than this (sup norm).
    pub step_tol: f64,
}

impl Default for PgaOptions {
    fn default() -> Self {
        PgaOptions {
            max_iters: 200_000,
            step_tol: 1e-13,
        }
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        let candidate = (acc - 1.0) / (i as f64 + 1.0);
        if v - candidate > 0.0 {
            tau = candidate;
        }
    }
    x.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// `sum_a c_a log pi_a` with `0 * log 0 = 0`.
fn weighted_loglik(c: &[f64], pi: &[f64]) -> f64 {
    c.iter()
        .zip(pi)
        .map(|(&c, &p)| {
            if c == 0.0 {
                0.0
            } else if p <= 0.0 {
                f64::NEG_INFINITY
            } else {
                c * p.ln()
            }
        })
        .sum()
}

/// Maximizes the advantage-weighted projection objective numerically by
/// per-agent-state projected gradient ascent with backtracking. This is a
/// deliberately independent route: it exponentiates advantages directly
/// (no stabilization trick) and never forms the closed-form solution.
pub fn maximize_awr_objective_pga(
    mdp: &EnvAgentMdp,
    mu: &PolicyTable,
    advantages: &AdvantageTable,
    beta: f64,
    visitation: &VisitationTable,
    opts: PgaOptions,
) -> Result<PolicyTable> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "temperature beta must be positive and finite, got {beta}"
        )));
    }
    mu.validate(mdp.n_actions)?;
    let na = mdp.n_actions;
    let nz = mdp.n_agent_states();
    let mut probs = Vec::with_capacity(nz);
    for z in 0..nz {
        // Objective coefficients c_a = d(z) mu(a|z) E_{d(s|z)} exp(A/beta).
        let c: Vec<f64> = match advantages {
            AdvantageTable::Privileged(rows) => (0..na)
                .map(|a| {
                    let mean: f64 = visitation.cond[z]
                        .iter()
                        .map(|&(j, w)| w * (rows[j][a] / beta).exp())
                        .sum();
                    visitation.z_mass[z] * mu.row(z)[a] * mean
                })
                .collect(),
            AdvantageTable::Symmetric(rows) => (0..na)
                .map(|a| visitation.z_mass[z] * mu.row(z)[a] * (rows[z][a] / beta).exp())
                .collect(),
        };
        if c.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "objective coefficients overflowed at agent state {z}"
            )));
        }
        if c.iter().sum::<f64>() <= 0.0 {
            probs.push(mu.row(z).to_vec());
            continue;
        }

        let mut pi = vec![1.0 / na as f64; na];
        let mut value = weighted_loglik(&c, &pi);
        for _ in 0..opts.max_iters {
            let grad: Vec<f64> = c.iter().zip(&pi).map(|(&c, &p)| c / p.max(1e-12)).collect();
            let gmax = grad.iter().fold(0.0_f64, |m, &g| m.max(g.abs()));
            let mut eta = 0.25 / gmax.max(1e-12);
            let mut moved = 0.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = pi
                    .iter()
                    .zip(&grad)
                    .map(|(&p, &g)| p + eta * g)
                    .collect();
                let trial = project_simplex(&trial);
                let trial_value = weighted_loglik(&c, &trial);
                if trial_value >= value {
                    moved = pi
                        .iter()
                        .zip(&trial)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0_f64, f64::max);
                    pi = trial;
                    value = trial_value;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted || moved <= opts.step_tol {
                break;
            }
        }
        probs.push(pi);
    }
    Ok(PolicyTable { probs })
}

/// Iterates exact evaluation plus the closed-form privileged update,
/// returning the best policy (by exact return) seen along the way. With a
/// small temperature this approaches the best window policy reachable by
/// advantage-weighted improvement and serves as a planning surrogate.
pub fn aawr_policy_iteration(
    mdp: &EnvAgentMdp,
    beta: f64,
    rounds: usize,
    opts: SolveOptions,
) -> Result<(PolicyTable, f64)> {
    let mut policy = PolicyTable::uniform(mdp);
    let mut best_policy = policy.clone();
    let mut best_value = f64::NEG_INFINITY;
    for _ in 0..rounds {
        let values: ValueTable = evaluate_privileged(mdp, &policy, opts)?;
        let ret = policy_return(mdp, &values);
        if ret > best_value {
            best_value = ret;
            best_policy = policy.clone();
        }
        let visitation: VisitationTable = discounted_visitation(mdp, &policy, opts)?;
        let adv = AdvantageTable::Privileged(values.advantages());
        policy = awr_closed_form_update(mdp, &policy, &adv, beta, &visitation)?;
    }
    let values = evaluate_privileged(mdp, &policy, opts)?;
    let ret = policy_return(mdp, &values);
    if ret > best_value {
        best_value = ret;
        best_policy = policy;
    }
    Ok((best_policy, best_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::total_variation;
    use crate::pomdp::{build_env_agent_mdp, random_spec};

    #[test]
    fn simplex_projection_is_a_distribution() {
        let p = project_simplex(&[0.4, -0.2, 1.3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        // Already a distribution: unchanged.
        let q = project_simplex(&[0.2, 0.3, 0.5]);
        for (a, b) in q.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_pga_on_random_specs() {
        for seed in 0..3 {
            let spec = random_spec(100 + seed, 3, 2, 2, 0.85);
            let mdp = build_env_agent_mdp(&spec, 1, 100_000).unwrap();
            let mu = PolicyTable::uniform(&mdp);
            let opts = SolveOptions::default();
            let values = evaluate_privileged(&mdp, &mu, opts).unwrap();
            let vis = discounted_visitation(&mdp, &mu, opts).unwrap();
            let adv = AdvantageTable::Privileged(values.advantages());
            let closed = awr_closed_form_update(&mdp, &mu, &adv, 1.0, &vis).unwrap();
            let pga =
                maximize_awr_objective_pga(&mdp, &mu, &adv, 1.0, &vis, PgaOptions::default())
                    .unwrap();
            for z in 0..mdp.n_agent_states() {
                if !vis.visited[z] {
                    continue;
                }
                let tv = total_variation(closed.row(z), pga.row(z));
                assert!(tv < 1e-5, "seed {seed} z {z}: tv {tv}");
            }
        }
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let spec = random_spec(7, 3, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 100_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let vis = discounted_visitation(&mdp, &mu, SolveOptions::default()).unwrap();
        let adv = AdvantageTable::Privileged(vec![vec![0.0; mdp.n_actions]; mdp.n_joints()]);
        let updated = awr_closed_form_update(&mdp, &mu, &adv, 10.0, &vis).unwrap();
        for z in 0..mdp.n_agent_states() {
            assert!(total_variation(updated.row(z), mu.row(z)) < 1e-12);
        }
    }

    #[test]
    fn beta_must_be_positive() {
        let spec = random_spec(7, 2, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 100_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let vis = discounted_visitation(&mdp, &mu, SolveOptions::default()).unwrap();
        let adv = AdvantageTable::Symmetric(vec![vec![0.0; mdp.n_actions]; mdp.n_agent_states()]);
        assert!(awr_closed_form_update(&mdp, &mu, &adv, 0.0, &vis).is_err());
        assert!(awr_closed_form_update(&mdp, &mu, &adv, -1.0, &vis).is_err());
    }
}
