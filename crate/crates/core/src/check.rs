//! Monte Carlo estimators for cross-checking the exact solvers against
//! sampled simulator rollouts.
//!
//! Every estimator here runs the episodic [`Simulator`] and nothing else, so
//! agreement with the joint-MDP solvers validates the whole chain: window
//! updates, terminal handling, reward accounting, and the enumerated kernel.

use rand::Rng;

use crate::oracle::PolicyTable;
use crate::pomdp::{AgentState, EnvAgentMdp, PomdpSpec, Simulator};
use crate::seeds::{derive, rng_from, sample_categorical};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> McEstimate {
        let n = samples.len();
        assert!(n > 1, "need at least two samples for a standard error");
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        McEstimate {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Absolute distance from `target` in units of the standard error.
    pub fn sigmas_from(&self, target: f64) -> f64 {
        if self.std_err == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target).abs() / self.std_err
        }
    }
}

/// Standard deviation of an empirical frequency from `n` Bernoulli draws.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p.clamp(0.0, 1.0) * (1.0 - p.clamp(0.0, 1.0)) / n as f64).sqrt()
}

/// Behavior of an agent mapping windows to action probabilities.
pub trait WindowPolicy {
    fn probs(&self, z: &AgentState) -> Vec<f64>;
}

/// A tabular policy acts through the joint MDP's window index. Windows the
/// enumeration never reached fall back to uniform.
pub struct TablePolicy<'a> {
    pub mdp: &'a EnvAgentMdp,
    pub table: &'a PolicyTable,
}

impl WindowPolicy for TablePolicy<'_> {
    fn probs(&self, z: &AgentState) -> Vec<f64> {
        match self.mdp.agent_index.get(z) {
            Some(&zi) => self.table.row(zi).to_vec(),
            None => vec![1.0 / self.mdp.n_actions as f64; self.mdp.n_actions],
        }
    }
}

impl<F: Fn(&AgentState) -> Vec<f64>> WindowPolicy for F {
    fn probs(&self, z: &AgentState) -> Vec<f64> {
        self(z)
    }
}

/// One sampled episode's summary.
#[derive(Clone, Debug)]
pub struct EpisodeStats {
    pub discounted_return: f64,
    pub total_reward: f64,
    pub length: usize,
    pub terminated: bool,
}

/// Rolls out one episode under `policy`, consuming randomness from `rng`.
pub fn rollout<P: WindowPolicy + ?Sized>(
    sim: &Simulator,
    policy: &P,
    rng: &mut impl Rng,
) -> EpisodeStats {
    let (mut st, _) = sim.reset(rng);
    let mut discounted = 0.0;
    let mut total = 0.0;
    let mut scale = 1.0;
    let mut length = 0;
    while !st.terminated && !st.truncated {
        let probs = policy.probs(&st.z);
        let a = sample_categorical(rng, &probs);
        let out = sim.step(&mut st, a, rng);
        discounted += scale * out.reward;
        total += out.reward;
        scale *= sim.spec.gamma;
        length += 1;
    }
    EpisodeStats {
        discounted_return: discounted,
        total_reward: total,
        length,
        terminated: st.terminated,
    }
}

/// Estimates the discounted return of `policy` from its start distribution.
pub fn mc_policy_return<P: WindowPolicy + ?Sized>(
    spec: &PomdpSpec,
    k: usize,
    policy: &P,
    episodes: usize,
    seed: u64,
) -> McEstimate {
    let sim = Simulator::new(spec, k);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = rng_from(derive(seed, 0x6d63_0000 ^ ep as u64));
        returns.push(rollout(&sim, policy, &mut rng).discounted_return);
    }
    McEstimate::from_samples(&returns)
}

/// Estimates the fraction of episodes whose total reward exceeds `floor`.
pub fn mc_success_rate<P: WindowPolicy + ?Sized>(
    spec: &PomdpSpec,
    k: usize,
    policy: &P,
    floor: f64,
    episodes: usize,
    seed: u64,
) -> McEstimate {
    let sim = Simulator::new(spec, k);
    let mut hits = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = rng_from(derive(seed, 0x6d63_0001 ^ ep as u64));
        let stats = rollout(&sim, policy, &mut rng);
        hits.push(if stats.total_reward > floor { 1.0 } else { 0.0 });
    }
    McEstimate::from_samples(&hits)
}

/// Exact time marginals `P(s_t, z_t)` over joint states for `t_max` steps,
/// obtained by pushing the start distribution through the joint kernel.
pub fn exact_time_marginals(
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    t_max: usize,
) -> Vec<Vec<f64>> {
    let n = mdp.n_joints();
    let mut cur = vec![0.0; n];
    for &(j, p) in &mdp.initial {
        cur[j] += p;
    }
    let mut out = vec![cur.clone()];
    for _ in 0..t_max {
        let mut next = vec![0.0; n];
        for j in 0..n {
            if cur[j] == 0.0 {
                continue;
            }
            let zi = mdp.z_of(j);
            for a in 0..mdp.n_actions {
                let pa = policy.row(zi)[a] * cur[j];
                if pa == 0.0 {
                    continue;
                }
                for &(j2, p) in &mdp.transitions[j][a] {
                    next[j2] += pa * p;
                }
            }
        }
        out.push(next.clone());
        cur = next;
    }
    out
}

/// Empirical counterpart of [`exact_time_marginals`] from simulator
/// rollouts. Episodes that end before `t_max` keep counting their absorbing
/// joint, mirroring the frozen-window terminal convention.
pub fn empirical_time_marginals(
    spec: &PomdpSpec,
    k: usize,
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    episodes: usize,
    t_max: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let sim = Simulator::new(spec, k);
    let mut counts = vec![vec![0.0; mdp.n_joints()]; t_max + 1];
    for ep in 0..episodes {
        let mut rng = rng_from(derive(seed, 0x6d63_0002 ^ ep as u64));
        let (mut st, _) = sim.reset(&mut rng);
        let mut j = joint_of(mdp, st.state, &st.z);
        counts[0][j] += 1.0;
        for t in 1..=t_max {
            if !st.terminated && !st.truncated {
                let zi = mdp
                    .agent_index
                    .get(&st.z)
                    .copied()
                    .expect("simulated window must be enumerated");
                let a = sample_categorical(&mut rng, policy.row(zi));
                sim.step(&mut st, a, &mut rng);
                j = joint_of(mdp, st.state, &st.z);
            }
            counts[t][j] += 1.0;
        }
    }
    for row in &mut counts {
        for c in row.iter_mut() {
            *c /= episodes as f64;
        }
    }
    counts
}

fn joint_of(mdp: &EnvAgentMdp, state: usize, z: &AgentState) -> usize {
    let zi = *mdp
        .agent_index
        .get(z)
        .expect("simulated window must be enumerated");
    *mdp.joint_index
        .get(&(state, zi))
        .expect("simulated joint must be enumerated")
}

/// Estimates the discounted joint visitation
/// `d(s,z) = (1 - gamma) sum_t gamma^t P(s_t, z_t)` from rollouts.
///
/// Truncated episodes assign their geometric tail mass `gamma^T` to the
/// final joint; for terminated episodes this is exact (the absorbing joint
/// holds the whole tail), for horizon truncation the error is at most
/// `gamma^horizon` in total variation.
pub fn empirical_visitation(
    spec: &PomdpSpec,
    k: usize,
    mdp: &EnvAgentMdp,
    policy: &PolicyTable,
    episodes: usize,
    seed: u64,
) -> Vec<f64> {
    let gamma = spec.gamma;
    let sim = Simulator::new(spec, k);
    let mut mass = vec![0.0; mdp.n_joints()];
    for ep in 0..episodes {
        let mut rng = rng_from(derive(seed, 0x6d63_0003 ^ ep as u64));
        let (mut st, _) = sim.reset(&mut rng);
        let mut scale = 1.0 - gamma;
        let mut j = joint_of(mdp, st.state, &st.z);
        while !st.terminated && !st.truncated {
            mass[j] += scale;
            let zi = mdp.z_of(j);
            let a = sample_categorical(&mut rng, policy.row(zi));
            sim.step(&mut st, a, &mut rng);
            j = joint_of(mdp, st.state, &st.z);
            scale *= gamma;
        }
        // Remaining geometric mass sits on the absorbing (or cut-off) joint.
        mass[j] += scale / (1.0 - gamma);
    }
    for m in &mut mass {
        *m /= episodes as f64;
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{discounted_visitation, evaluate_privileged, policy_return, SolveOptions};
    use crate::pomdp::{build_env_agent_mdp, random_spec};

    #[test]
    fn mc_return_matches_exact_within_four_sigma() {
        let spec = random_spec(33, 3, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 200_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let values = evaluate_privileged(&mdp, &mu, SolveOptions::default()).unwrap();
        let exact = policy_return(&mdp, &values);
        let est = mc_policy_return(
            &spec,
            1,
            &TablePolicy {
                mdp: &mdp,
                table: &mu,
            },
            4000,
            7,
        );
        assert!(
            est.sigmas_from(exact) < 4.0,
            "exact {exact}, got {} +- {}",
            est.mean,
            est.std_err
        );
    }

    #[test]
    fn empirical_visitation_matches_exact_within_bands() {
        let spec = random_spec(34, 3, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 200_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let exact = discounted_visitation(&mdp, &mu, SolveOptions::default()).unwrap();
        let episodes = 4000;
        let est = empirical_visitation(&spec, 1, &mdp, &mu, episodes, 11);
        for j in 0..mdp.n_joints() {
            // The per-episode contribution to cell j lies in [0, 1], so the
            // binomial sigma bounds the estimator's deviation scale.
            let sigma = binomial_sigma(exact.d[j].max(1e-4), episodes).max(1e-4);
            assert!(
                (est[j] - exact.d[j]).abs() < 5.0 * sigma,
                "joint {j}: exact {}, got {}",
                exact.d[j],
                est[j]
            );
        }
        let total: f64 = est.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "mass {total}");
    }

    #[test]
    fn time_marginals_agree() {
        let spec = random_spec(35, 3, 2, 2, 0.9);
        let mdp = build_env_agent_mdp(&spec, 1, 200_000).unwrap();
        let mu = PolicyTable::uniform(&mdp);
        let t_max = 4;
        let episodes = 3000;
        let exact = exact_time_marginals(&mdp, &mu, t_max);
        let emp = empirical_time_marginals(&spec, 1, &mdp, &mu, episodes, t_max, 13);
        for t in 0..=t_max {
            let sum: f64 = exact[t].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "marginal sum {sum} at t {t}");
            for j in 0..mdp.n_joints() {
                let sigma = binomial_sigma(exact[t][j].max(1e-4), episodes).max(1e-4);
                assert!(
                    (emp[t][j] - exact[t][j]).abs() < 5.0 * sigma,
                    "t {t} joint {j}: exact {}, got {}",
                    exact[t][j],
                    emp[t][j]
                );
            }
        }
    }
}
