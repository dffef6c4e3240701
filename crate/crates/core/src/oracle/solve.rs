//! Exact policy evaluation, visitation, and optimal-value solvers on the
//! joint MDP, plus a depth-limited optimal planner for short horizons.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::oracle::PolicyTable;
use crate::pomdp::{AgentState, EnvAgentMdp, PomdpSpec};

/// Direct (dense LU) solves are only offered below this joint-state count.
pub const DIRECT_SOLVE_LIMIT: usize = 5000;

/// Contraction ratios are only sampled while the per-sweep change exceeds
/// this floor. Below it, rounding noise of order `eps * ||q|| / delta`
/// relative would dominate the quotient of successive changes.
pub const RATIO_MEASURE_FLOOR: f64 = 1e-6;

/// Options shared by the iterative solvers.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Sup-norm change per sweep at which iteration stops. The fixed-point
    /// error is then at most `tol * gamma / (1 - gamma)`.
    pub tol: f64,
    pub max_iters: usize,
    /// Solve the linear system directly instead of iterating. Only
    /// available below [`DIRECT_SOLVE_LIMIT`] joint states.
    pub direct: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iters: 500_000,
            direct: false,
        }
    }
}

/// Privileged state values of a fixed policy: `q[j][a]` and `v[j]` over
/// joint states.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

impl ValueTable {
    /// `A(s,z,a) = Q(s,z,a) - V(s,z)` per joint state.
    pub fn advantages(&self) -> Vec<Vec<f64>> {
        self.q
            .iter()
            .zip(&self.v)
            .map(|(row, &v)| row.iter().map(|&q| q - v).collect())
            .collect()
    }
}

/// Discounted state visitation of a fixed policy:
/// `d(s,z) = (1 - gamma) * sum_t gamma^t p(s_t = s, z_t = z)`.
#[derive(Clone, Debug)]
pub struct VisitationTable {
    /// Joint visitation, sums to one.
    pub d: Vec<f64>,
    /// Marginal over agent states, `z_mass[z] = sum_{s} d(s, z)`.
    pub z_mass: Vec<f64>,
    /// Conditional `d(s|z)` as normalized `(joint, weight)` rows per agent
    /// state. Agent states the policy never visits fall back to uniform
    /// weights over their joints (they carry zero mass in any expectation).
    pub cond: Vec<Vec<(usize, f64)>>,
    /// Whether the agent state has positive visitation mass.
    pub visited: Vec<bool>,
    pub iterations: usize,
}

/// A TD fixed point together with evidence that the iteration contracted.
#[derive(Clone, Debug)]
pub struct TdFixedPoint {
    pub q: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Max ratio of successive sup-norm sweep changes; must not exceed the
    /// discount for a gamma-contraction.
    pub max_contraction_ratio: f64,
}

/// Optimal (privileged) values of the joint MDP.
#[derive(Clone, Debug)]
pub struct OptimalValues {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Optimal return from the initial distribution.
    pub value: f64,
    pub iterations: usize,
}

/// Solves `A x = b` for dense row-major `A` by partial-pivot elimination.
/// `A` and `b` are consumed.
pub fn solve_linear_system(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(CoreError::Shape(format!(
            "matrix has {} entries, expected {}",
            a.len(),
            n * n
        )));
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(CoreError::NoConvergence(
                "linear system is numerically singular".into(),
            ));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for k in col + 1..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

fn check_direct_size(n: usize) -> Result<()> {
    if n >= DIRECT_SOLVE_LIMIT {
        return Err(CoreError::CapacityExceeded {
            what: "direct linear solve".into(),
            needed: n,
            cap: DIRECT_SOLVE_LIMIT,
        });
    }
    Ok(())
}

/// One-step backup of state values into action values:
/// `Q(j,a) = R(j,a) + gamma * sum_{j'} p(j'|j,a) V(j')`.
fn q_from_v(mdp: &EnvAgentMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.n_joints())
        .map(|j| {
            (0..mdp.n_actions)
                .map(|a| {
                    let cont: f64 = mdp.transitions[j][a]
                        .iter()
                        .map(|&(j2, p)| p * v[j2])
                        .sum();
                    mdp.rewards[j][a] + mdp.gamma * cont
                })
                .collect()
        })
        .collect()
}

/// Exact policy evaluation on the joint MDP. Iterates the state-value
/// backup `V(j) = sum_a mu(a|z_j) [R(j,a) + gamma E V(j')]` (or solves the
/// linear system directly), then recovers Q with one extra backup.
pub fn evaluate_privileged(
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    opts: SolveOptions,
) -> Result<ValueTable> {
    policy.validate(mdp.n_actions)?;
    let n = mdp.n_joints();
    let (v, iterations) = if opts.direct {
        check_direct_size(n)?;
        // (I - gamma P_mu) V = R_mu
        let mut a_mat = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for j in 0..n {
            a_mat[j * n + j] += 1.0;
            let mu = policy.row(mdp.z_of(j));
            for act in 0..mdp.n_actions {
                let w = mu[act];
                if w == 0.0 {
                    continue;
                }
                b[j] += w * mdp.rewards[j][act];
                for &(j2, p) in &mdp.transitions[j][act] {
                    a_mat[j * n + j2] -= mdp.gamma * w * p;
                }
            }
        }
        (solve_linear_system(a_mat, b)?, 1)
    } else {
        let mut v = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let mut delta: f64 = 0.0;
            for j in 0..n {
                let mu = policy.row(mdp.z_of(j));
                let mut acc = 0.0;
                for act in 0..mdp.n_actions {
                    let w = mu[act];
                    if w == 0.0 {
                        continue;
                    }
                    let cont: f64 = mdp.transitions[j][act]
                        .iter()
                        .map(|&(j2, p)| p * v[j2])
                        .sum();
                    acc += w * (mdp.rewards[j][act] + mdp.gamma * cont);
                }
                next[j] = acc;
                delta = delta.max((acc - v[j]).abs());
            }
            std::mem::swap(&mut v, &mut next);
            if delta <= opts.tol {
                break;
            }
            if iterations >= opts.max_iters {
                return Err(CoreError::NoConvergence(format!(
                    "policy evaluation: sup-change {delta} after {iterations} sweeps"
                )));
            }
        }
        (v, iterations)
    };
    let q = q_from_v(mdp, &v);
    // Make V exactly consistent with the reported Q.
    let v = q
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let mu = policy.row(mdp.z_of(j));
            row.iter().zip(mu).map(|(&q, &w)| w * q).sum()
        })
        .collect();
    Ok(ValueTable { q, v, iterations })
}

/// TD fixed point of the privileged expected-SARSA operator,
/// `Q(j,a) = R(j,a) + gamma E_{j'} E_{a' ~ mu} Q(j',a')`, iterated from
/// zero. An independent route to the same values as [`evaluate_privileged`].
pub fn asymmetric_td_fixed_point(
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    opts: SolveOptions,
) -> Result<TdFixedPoint> {
    policy.validate(mdp.n_actions)?;
    let n = mdp.n_joints();
    let mut q = vec![vec![0.0; mdp.n_actions]; n];
    let mut mean_q = vec![0.0; n];
    let mut iterations = 0;
    let mut prev_delta = f64::NAN;
    let mut max_ratio: f64 = 0.0;
    loop {
        iterations += 1;
        for j in 0..n {
            let mu = policy.row(mdp.z_of(j));
            mean_q[j] = q[j].iter().zip(mu).map(|(&x, &w)| w * x).sum();
        }
        let mut delta: f64 = 0.0;
        for j in 0..n {
            for act in 0..mdp.n_actions {
                let cont: f64 = mdp.transitions[j][act]
                    .iter()
                    .map(|&(j2, p)| p * mean_q[j2])
                    .sum();
                let new = mdp.rewards[j][act] + mdp.gamma * cont;
                delta = delta.max((new - q[j][act]).abs());
                q[j][act] = new;
            }
        }
        // Only sample the ratio while the sweep change dominates f64
        // rounding noise; near the tolerance the quotient is meaningless.
        if prev_delta.is_finite() && prev_delta > RATIO_MEASURE_FLOOR {
            max_ratio = max_ratio.max(delta / prev_delta);
        }
        prev_delta = delta;
        if delta <= opts.tol {
            break;
        }
        if iterations >= opts.max_iters {
            return Err(CoreError::NoConvergence(format!(
                "asymmetric TD iteration: sup-change {delta} after {iterations} sweeps"
            )));
        }
    }
    Ok(TdFixedPoint {
        q,
        iterations,
        max_contraction_ratio: max_ratio,
    })
}

/// Discounted visitation of a fixed policy, solved from the flow equation
/// `d = (1 - gamma) d_0 + gamma P_mu^T d`.
pub fn discounted_visitation(
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    opts: SolveOptions,
) -> Result<VisitationTable> {
    policy.validate(mdp.n_actions)?;
    let n = mdp.n_joints();
    let mut base = vec![0.0; n];
    for &(j, p) in &mdp.initial {
        base[j] += (1.0 - mdp.gamma) * p;
    }

    let (d, iterations) = if opts.direct {
        check_direct_size(n)?;
        // (I - gamma P_mu^T) d = (1 - gamma) d_0
        let mut a_mat = vec![0.0; n * n];
        for j in 0..n {
            a_mat[j * n + j] += 1.0;
            let mu = policy.row(mdp.z_of(j));
            for act in 0..mdp.n_actions {
                let w = mu[act];
                if w == 0.0 {
                    continue;
                }
                for &(j2, p) in &mdp.transitions[j][act] {
                    a_mat[j2 * n + j] -= mdp.gamma * w * p;
                }
            }
        }
        (solve_linear_system(a_mat, base.clone())?, 1)
    } else {
        let mut d = base.clone();
        let mut next = vec![0.0; n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            next.copy_from_slice(&base);
            for j in 0..n {
                let mass = d[j];
                if mass == 0.0 {
                    continue;
                }
                let mu = policy.row(mdp.z_of(j));
                for act in 0..mdp.n_actions {
                    let w = mu[act];
                    if w == 0.0 {
                        continue;
                    }
                    let flow = mdp.gamma * mass * w;
                    for &(j2, p) in &mdp.transitions[j][act] {
                        next[j2] += flow * p;
                    }
                }
            }
            let delta = d
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            std::mem::swap(&mut d, &mut next);
            if delta <= opts.tol {
                break;
            }
            if iterations >= opts.max_iters {
                return Err(CoreError::NoConvergence(format!(
                    "visitation iteration: sup-change {delta} after {iterations} sweeps"
                )));
            }
        }
        (d, iterations)
    };

    let nz = mdp.n_agent_states();
    let mut z_mass = vec![0.0; nz];
    for j in 0..n {
        z_mass[mdp.z_of(j)] += d[j];
    }
    let mut cond: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nz];
    for j in 0..n {
        cond[mdp.z_of(j)].push((j, d[j]));
    }
    let mut visited = vec![false; nz];
    for (z, row) in cond.iter_mut().enumerate() {
        let total: f64 = row.iter().map(|&(_, w)| w).sum();
        if total > 0.0 {
            visited[z] = true;
            for entry in row.iter_mut() {
                entry.1 /= total;
            }
        } else {
            let u = 1.0 / row.len() as f64;
            for entry in row.iter_mut() {
                entry.1 = u;
            }
        }
    }
    Ok(VisitationTable {
        d,
        z_mass,
        cond,
        visited,
        iterations,
    })
}

/// Exact return of a policy from the initial distribution,
/// `J = E_{j ~ d_0} V(j)`.
pub fn policy_return(mdp: &EnvAgentMdp, values: &ValueTable) -> f64 {
    mdp.initial.iter().map(|&(j, p)| p * values.v[j]).sum()
}

/// Value iteration for the optimal privileged policy of the joint MDP
/// (an upper bound for every agent-state policy).
pub fn joint_value_iteration(mdp: &EnvAgentMdp, opts: SolveOptions) -> Result<OptimalValues> {
    let n = mdp.n_joints();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            for act in 0..mdp.n_actions {
                let cont: f64 = mdp.transitions[j][act]
                    .iter()
                    .map(|&(j2, p)| p * v[j2])
                    .sum();
                best = best.max(mdp.rewards[j][act] + mdp.gamma * cont);
            }
            next[j] = best;
            delta = delta.max((best - v[j]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if delta <= opts.tol {
            break;
        }
        if iterations >= opts.max_iters {
            return Err(CoreError::NoConvergence(format!(
                "value iteration: sup-change {delta} after {iterations} sweeps"
            )));
        }
    }
    let q = q_from_v(mdp, &v);
    let value = mdp.initial.iter().map(|&(j, p)| p * v[j]).sum();
    Ok(OptimalValues {
        q,
        v,
        value,
        iterations,
    })
}

/// Exact optimal discounted return over `horizon` steps for policies that
/// condition on the agent state, computed by forward filtering plus backward
/// induction over reachable windows. Requires `k >= horizon` so the window
/// holds the entire history, which makes the per-window state conditional
/// policy-independent and the recursion exact.
pub fn finite_horizon_window_optimal(
    spec: &PomdpSpec,
    k: usize,
    horizon: usize,
    cap: usize,
) -> Result<f64> {
    spec.validate()?;
    if k < horizon {
        return Err(CoreError::InvalidConfig(format!(
            "finite-horizon planning needs k >= horizon, got k={k}, horizon={horizon}"
        )));
    }

    // levels[t]: window -> unnormalized filtering weights over states.
    type Level = HashMap<AgentState, Vec<(usize, f64)>>;
    let mut levels: Vec<Level> = Vec::with_capacity(horizon + 1);
    let mut level0: Level = HashMap::new();
    for s0 in 0..spec.n_states() {
        let p0 = spec.initial[s0];
        if p0 <= 0.0 {
            continue;
        }
        for o0 in 0..spec.n_observations() {
            let pe = spec.e(s0, o0);
            if pe <= 0.0 {
                continue;
            }
            level0
                .entry(AgentState::initial(k, o0))
                .or_default()
                .push((s0, p0 * pe));
        }
    }
    levels.push(level0);

    let mut enumerated = levels[0].len();
    for t in 0..horizon {
        let mut next: Level = HashMap::new();
        for (z, states) in &levels[t] {
            for a in 0..spec.n_actions() {
                for &(s, w) in states {
                    if spec.terminal[s] {
                        continue;
                    }
                    for s2 in 0..spec.n_states() {
                        let pt = spec.t(s, a, s2);
                        if pt <= 0.0 {
                            continue;
                        }
                        for o2 in 0..spec.n_observations() {
                            let pe = spec.e(s2, o2);
                            if pe <= 0.0 {
                                continue;
                            }
                            let row = next.entry(z.update(a, o2)).or_default();
                            match row.iter_mut().find(|e| e.0 == s2) {
                                Some(e) => e.1 += w * pt * pe,
                                None => row.push((s2, w * pt * pe)),
                            }
                        }
                    }
                }
            }
        }
        enumerated += next.len();
        if enumerated > cap {
            return Err(CoreError::CapacityExceeded {
                what: "finite-horizon window enumeration".into(),
                needed: enumerated,
                cap,
            });
        }
        levels.push(next);
    }

    // Backward induction. V_t(z) = max_a E_{s ~ p(s|z)} [R(s,a) + gamma *
    // sum T E V_{t+1}(z')], with terminal states contributing zero.
    let mut value_next: HashMap<AgentState, f64> = HashMap::new();
    for t in (0..horizon).rev() {
        let mut value_here: HashMap<AgentState, f64> = HashMap::new();
        for (z, states) in &levels[t] {
            let total: f64 = states.iter().map(|&(_, w)| w).sum();
            let mut best = f64::NEG_INFINITY;
            for a in 0..spec.n_actions() {
                let mut acc = 0.0;
                for &(s, w) in states {
                    if spec.terminal[s] {
                        continue;
                    }
                    let mut cont = 0.0;
                    for s2 in 0..spec.n_states() {
                        let pt = spec.t(s, a, s2);
                        if pt <= 0.0 {
                            continue;
                        }
                        for o2 in 0..spec.n_observations() {
                            let pe = spec.e(s2, o2);
                            if pe <= 0.0 {
                                continue;
                            }
                            let v2 = if t + 1 < horizon {
                                *value_next.get(&z.update(a, o2)).unwrap_or(&0.0)
                            } else {
                                0.0
                            };
                            cont += pt * pe * v2;
                        }
                    }
                    acc += (w / total) * (spec.r(s, a) + spec.gamma * cont);
                }
                best = best.max(acc);
            }
            value_here.insert(z.clone(), best);
        }
        value_next = value_here;
    }

    Ok(levels[0]
        .iter()
        .map(|(z, states)| {
            let total: f64 = states.iter().map(|&(_, w)| w).sum();
            total * value_next.get(z).copied().unwrap_or(0.0)
        })
        .sum())
}

/// Exact optimal discounted return over `horizon` steps for policies that
/// see the environment state directly: plain backward induction on states.
/// Upper-bounds [`finite_horizon_window_optimal`] at the same horizon, since
/// every window policy is a state policy.
pub fn finite_horizon_privileged_optimal(spec: &PomdpSpec, horizon: usize) -> Result<f64> {
    spec.validate()?;
    let n = spec.n_states();
    let mut v_next = vec![0.0; n];
    for _ in 0..horizon {
        let mut v_here = vec![0.0; n];
        for s in 0..n {
            if spec.terminal[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..spec.n_actions() {
                let cont: f64 = (0..n).map(|s2| spec.t(s, a, s2) * v_next[s2]).sum();
                best = best.max(spec.r(s, a) + spec.gamma * cont);
            }
            v_here[s] = best;
        }
        v_next = v_here;
    }
    Ok((0..n).map(|s| spec.initial[s] * v_next[s]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{build_env_agent_mdp, random_spec};

    #[test]
    fn linear_solver_recovers_known_solution() {
        // [[2, 1], [1, 3]] x = [5, 10] -> x = [1, 3]
        let x = solve_linear_system(vec![2.0, 1.0, 1.0, 3.0], vec![5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_system_is_reported() {
        let err = solve_linear_system(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, CoreError::NoConvergence(_)));
    }

    #[test]
    fn iterative_and_direct_evaluation_agree() {
        for seed in 0..4 {
            let spec = random_spec(seed, 3, 2, 2, 0.9);
            let mdp = build_env_agent_mdp(&spec, 2, 100_000).unwrap();
            let mu = PolicyTable::uniform(&mdp);
            let it = evaluate_privileged(&mdp, &mu, SolveOptions::default()).unwrap();
            let di = evaluate_privileged(
                &mdp,
                &mu,
                SolveOptions {
                    direct: true,
                    ..Default::default()
                },
            )
            .unwrap();
            for j in 0..mdp.n_joints() {
                assert!((it.v[j] - di.v[j]).abs() < 1e-8, "seed {seed} joint {j}");
                for a in 0..mdp.n_actions {
                    assert!((it.q[j][a] - di.q[j][a]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn iterative_and_direct_visitation_agree_and_normalize() {
        let spec = random_spec(11, 3, 2, 3, 0.85);
        let mdp = build_env_agent_mdp(&spec, 1, 100_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let it = discounted_visitation(&mdp, &mu, SolveOptions::default()).unwrap();
        let di = discounted_visitation(
            &mdp,
            &mu,
            SolveOptions {
                direct: true,
                ..Default::default()
            },
        )
        .unwrap();
        let total: f64 = it.d.iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
        for j in 0..mdp.n_joints() {
            assert!((it.d[j] - di.d[j]).abs() < 1e-8);
        }
        for z in 0..mdp.n_agent_states() {
            let s: f64 = it.cond[z].iter().map(|&(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn optimal_values_dominate_policy_values() {
        let spec = random_spec(5, 4, 3, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 100_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let values = evaluate_privileged(&mdp, &mu, SolveOptions::default()).unwrap();
        let opt = joint_value_iteration(&mdp, SolveOptions::default()).unwrap();
        for j in 0..mdp.n_joints() {
            assert!(opt.v[j] >= values.v[j] - 1e-8);
        }
        assert!(opt.value >= policy_return(&mdp, &values) - 1e-8);
    }

    #[test]
    fn finite_horizon_requires_covering_window() {
        let spec = random_spec(2, 2, 2, 2, 0.9);
        let err = finite_horizon_window_optimal(&spec, 1, 3, 10_000).unwrap_err();
        assert!(matches!(err, CoreError::InvalidConfig(_)));
    }
}
