//! Finite POMDPs, sliding-window agent states, and the joint
//! environment/agent-state MDP.
//!
//! A POMDP here is the tuple (S, A, O, T, R, E, P, γ) over named finite
//! sets: transition kernel `T(s'|s,a)`, expected reward `R(s,a)`, emission
//! kernel `E(o|s')`, and initial distribution `P(s)`. The agent never sees
//! `s`; it acts on an agent state `z` holding the last `k`
//! (observation, previous action) pairs, left-padded with a PAD token:
//!
//! ```text
//! z_0 = update(PAD_window, none, o_0)
//! z_t = update(z_{t-1}, a_{t-1}, o_t)
//! ```
//!
//! Because `z` is a deterministic function of `(z, a, o')`, the pair
//! `(s, z)` is Markov with joint kernel
//!
//! ```text
//! p(s', z' | s, z, a) = T(s'|s,a) * sum_{o'} E(o'|s') * 1{z' = update(z, a, o')}
//! ```
//!
//! [`EnvAgentMdp`] enumerates all reachable `(s, z)` pairs of this MDP by
//! breadth-first search and stores its sparse kernel; every exact oracle in
//! this crate runs on that object. Terminal environment states absorb with
//! zero reward so the infinite-horizon discounted view matches episodic
//! simulation up to a `γ^horizon`-sized truncation.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seeds::sample_categorical;

/// Probability rows must sum to one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Default cap on enumerated joint (s, z) states.
pub const DEFAULT_JOINT_CAP: usize = 1_000_000;

/// A finite POMDP with dense row-major tables.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PomdpSpec {
    pub name: String,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    /// `transition[s*A*S + a*S + s']` = T(s'|s,a).
    pub transition: Vec<f64>,
    /// `reward[s*A + a]` = R(s,a), the expected immediate reward.
    pub reward: Vec<f64>,
    /// Half-width of uniform zero-mean noise added to stepped rewards.
    /// Oracles always use the expected reward table.
    #[serde(default)]
    pub reward_noise: f64,
    /// `emission[s*O + o]` = E(o|s).
    pub emission: Vec<f64>,
    /// `initial[s]` = P(s).
    pub initial: Vec<f64>,
    pub gamma: f64,
    /// Simulator step cap per episode.
    pub horizon: usize,
    /// Entering a terminal state ends the episode; dynamic programming
    /// treats terminal states as absorbing with zero reward.
    pub terminal: Vec<bool>,
}

impl PomdpSpec {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// T(s'|s,a)
    #[inline]
    pub fn t(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.actions.len() + a) * self.states.len() + s2]
    }

    /// The transition row T(.|s,a).
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.states.len();
        let base = (s * self.actions.len() + a) * n;
        &self.transition[base..base + n]
    }

    /// R(s,a)
    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.actions.len() + a]
    }

    /// E(o|s)
    #[inline]
    pub fn e(&self, s: usize, o: usize) -> f64 {
        self.emission[s * self.observations.len() + o]
    }

    /// The emission row E(.|s).
    #[inline]
    pub fn emission_row(&self, s: usize) -> &[f64] {
        let n = self.observations.len();
        &self.emission[s * n..(s + 1) * n]
    }

    /// Checks table shapes, row normalization, and scalar ranges.
    pub fn validate(&self) -> Result<()> {
        let (ns, na, no) = (self.n_states(), self.n_actions(), self.n_observations());
        if ns == 0 || na == 0 || no == 0 {
            return Err(CoreError::InvalidSpec(format!(
                "{}: states, actions, and observations must be non-empty",
                self.name
            )));
        }
        let expect = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(CoreError::Shape(format!(
                    "{}: {what} has {got} entries, expected {want}",
                    self.name
                )));
            }
            Ok(())
        };
        expect("transition", self.transition.len(), ns * na * ns)?;
        expect("reward", self.reward.len(), ns * na)?;
        expect("emission", self.emission.len(), ns * no)?;
        expect("initial", self.initial.len(), ns)?;
        expect("terminal", self.terminal.len(), ns)?;

        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CoreError::InvalidSpec(format!(
                "{}: gamma must lie in (0, 1), got {}",
                self.name, self.gamma
            )));
        }
        if self.horizon == 0 {
            return Err(CoreError::InvalidSpec(format!(
                "{}: horizon must be at least 1",
                self.name
            )));
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return Err(CoreError::InvalidSpec(format!(
                "{}: reward_noise must be finite and nonnegative",
                self.name
            )));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(CoreError::InvalidSpec(format!(
                "{}: rewards must be finite",
                self.name
            )));
        }

        let check_row = |what: &str, row: &[f64]| -> Result<()> {
            let mut sum = 0.0;
            for &p in row {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(CoreError::InvalidSpec(format!(
                        "{}: {what} has a negative or non-finite entry",
                        self.name
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::InvalidSpec(format!(
                    "{}: {what} sums to {sum}, expected 1",
                    self.name
                )));
            }
            Ok(())
        };
        for s in 0..ns {
            for a in 0..na {
                check_row(&format!("transition row (s={s}, a={a})"), self.transition_row(s, a))?;
            }
            check_row(&format!("emission row (s={s})"), self.emission_row(s))?;
        }
        check_row("initial distribution", &self.initial)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PomdpSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One window slot: an observation and the action taken just before it.
/// `None` is the PAD token (unfilled slot, or "no previous action" at reset).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub obs: Option<u16>,
    pub prev_action: Option<u16>,
}

impl Slot {
    pub const PAD: Slot = Slot {
        obs: None,
        prev_action: None,
    };
}

/// Fixed-length sliding window of the last `k` (observation, previous
/// action) pairs, oldest first. Equal windows compare and hash equal, so
/// agent states can key tables directly.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentState {
    slots: Vec<Slot>,
}

impl AgentState {
    /// The window right after reset: all PAD except the newest slot, which
    /// holds the first observation and a PAD previous action.
    pub fn initial(k: usize, first_obs: usize) -> Self {
        assert!(k >= 1, "window length must be at least 1");
        let mut slots = vec![Slot::PAD; k];
        slots[k - 1] = Slot {
            obs: Some(first_obs as u16),
            prev_action: None,
        };
        AgentState { slots }
    }

    /// Recurrent update: drop the oldest slot, append (new observation,
    /// action that produced it).
    pub fn update(&self, action: usize, obs: usize) -> Self {
        let mut slots = Vec::with_capacity(self.slots.len());
        slots.extend_from_slice(&self.slots[1..]);
        slots.push(Slot {
            obs: Some(obs as u16),
            prev_action: Some(action as u16),
        });
        AgentState { slots }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// The newest observation in the window. Always present after reset.
    pub fn latest_obs(&self) -> Option<usize> {
        self.slots.last().and_then(|s| s.obs).map(|o| o as usize)
    }

    /// Observations currently in the window, oldest first, PADs skipped.
    pub fn observations(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().filter_map(|s| s.obs.map(|o| o as usize))
    }

    /// Length of the flattened one-hot encoding: each slot contributes a
    /// (n_obs + 1)-way observation one-hot and a (n_actions + 1)-way
    /// previous-action one-hot, the extra class being PAD.
    pub fn encoding_dim(k: usize, n_obs: usize, n_actions: usize) -> usize {
        k * (n_obs + 1 + n_actions + 1)
    }

    /// Indices of the ones in the flattened one-hot encoding. Each window
    /// has exactly `2k` active indices.
    pub fn active_indices(&self, n_obs: usize, n_actions: usize, out: &mut Vec<usize>) {
        out.clear();
        let slot_dim = n_obs + 1 + n_actions + 1;
        for (i, slot) in self.slots.iter().enumerate() {
            let base = i * slot_dim;
            out.push(base + slot.obs.map_or(n_obs, |o| o as usize));
            out.push(base + n_obs + 1 + slot.prev_action.map_or(n_actions, |a| a as usize));
        }
    }

    /// Writes the dense one-hot encoding into `out`.
    pub fn encode_into(&self, n_obs: usize, n_actions: usize, out: &mut [f64]) {
        assert_eq!(out.len(), Self::encoding_dim(self.k(), n_obs, n_actions));
        out.fill(0.0);
        let mut idx = Vec::with_capacity(2 * self.k());
        self.active_indices(n_obs, n_actions, &mut idx);
        for i in idx {
            out[i] = 1.0;
        }
    }
}

/// Output of one simulator step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub obs: usize,
    pub reward: f64,
    /// The environment entered a terminal state. Masks value bootstrapping.
    pub terminated: bool,
    /// The episode hit the horizon cap. Ends the episode without implying
    /// the state has zero continuation value.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Live simulation state: the hidden environment state plus the agent state.
#[derive(Clone, Debug)]
pub struct SimState {
    pub state: usize,
    pub z: AgentState,
    pub t: usize,
    pub terminated: bool,
    pub truncated: bool,
}

impl SimState {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Steps a [`PomdpSpec`] with a window-`k` agent state.
#[derive(Clone, Copy)]
pub struct Simulator<'a> {
    pub spec: &'a PomdpSpec,
    pub k: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a PomdpSpec, k: usize) -> Self {
        assert!(k >= 1, "window length must be at least 1");
        Simulator { spec, k }
    }

    /// Samples s0 ~ P, o0 ~ E(.|s0) and builds the initial window.
    pub fn reset<R: Rng>(&self, rng: &mut R) -> (SimState, usize) {
        let s0 = sample_categorical(rng, &self.spec.initial);
        let o0 = sample_categorical(rng, self.spec.emission_row(s0));
        let sim = SimState {
            state: s0,
            z: AgentState::initial(self.k, o0),
            t: 0,
            terminated: self.spec.terminal[s0],
            truncated: false,
        };
        (sim, o0)
    }

    /// Applies `action`, sampling s' ~ T, o' ~ E, and advancing the window.
    /// Panics if the episode is already over (callers gate on `done`).
    pub fn step<R: Rng>(&self, sim: &mut SimState, action: usize, rng: &mut R) -> StepOutcome {
        assert!(!sim.done(), "step on a finished episode");
        assert!(action < self.spec.n_actions(), "action out of range");
        let s = sim.state;
        let s2 = sample_categorical(rng, self.spec.transition_row(s, action));
        let o2 = sample_categorical(rng, self.spec.emission_row(s2));
        let mut reward = self.spec.r(s, action);
        if self.spec.reward_noise > 0.0 {
            reward += rng.gen_range(-self.spec.reward_noise..=self.spec.reward_noise);
        }
        sim.state = s2;
        sim.z = sim.z.update(action, o2);
        sim.t += 1;
        sim.terminated = self.spec.terminal[s2];
        sim.truncated = !sim.terminated && sim.t >= self.spec.horizon;
        StepOutcome {
            obs: o2,
            reward,
            terminated: sim.terminated,
            truncated: sim.truncated,
        }
    }
}

/// One enumerated joint state: environment state index plus an index into
/// [`EnvAgentMdp::agent_states`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct JointState {
    pub state: usize,
    pub z: usize,
}

/// The finite MDP over reachable (environment state, agent state) pairs.
///
/// Rows of `transitions` are sparse `(next joint index, probability)` lists.
/// Terminal joints self-loop with zero reward under every action, so all
/// infinite-horizon discounted quantities are exact for episodic dynamics.
#[derive(Clone, Debug)]
pub struct EnvAgentMdp {
    pub gamma: f64,
    pub n_actions: usize,
    /// Distinct reachable agent states.
    pub agent_states: Vec<AgentState>,
    pub agent_index: HashMap<AgentState, usize>,
    pub joints: Vec<JointState>,
    pub joint_index: HashMap<(usize, usize), usize>,
    /// Sparse initial distribution over joints.
    pub initial: Vec<(usize, f64)>,
    /// `transitions[j][a]` = sparse next-joint distribution.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// `rewards[j][a]` = R(s_j, a); zero at terminal joints.
    pub rewards: Vec<Vec<f64>>,
    /// Joint is absorbing (its environment state is terminal).
    pub terminal: Vec<bool>,
}

impl EnvAgentMdp {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn n_agent_states(&self) -> usize {
        self.agent_states.len()
    }

    /// Agent-state index of joint `j`.
    #[inline]
    pub fn z_of(&self, j: usize) -> usize {
        self.joints[j].z
    }
}

/// Enumerates the reachable joint MDP of `spec` under window length `k` by
/// breadth-first search from the initial distribution, refusing to grow past
/// `cap` joint states.
pub fn build_env_agent_mdp(spec: &PomdpSpec, k: usize, cap: usize) -> Result<EnvAgentMdp> {
    spec.validate()?;
    if k == 0 {
        return Err(CoreError::InvalidSpec(
            "window length k must be at least 1".into(),
        ));
    }

    let mut agent_states: Vec<AgentState> = Vec::new();
    let mut agent_index: HashMap<AgentState, usize> = HashMap::new();
    let mut joints: Vec<JointState> = Vec::new();
    let mut joint_index: HashMap<(usize, usize), usize> = HashMap::new();

    let intern_z = |z: AgentState,
                        agent_states: &mut Vec<AgentState>,
                        agent_index: &mut HashMap<AgentState, usize>| {
        if let Some(&i) = agent_index.get(&z) {
            i
        } else {
            let i = agent_states.len();
            agent_index.insert(z.clone(), i);
            agent_states.push(z);
            i
        }
    };

    let intern_joint = |s: usize,
                            zi: usize,
                            joints: &mut Vec<JointState>,
                            joint_index: &mut HashMap<(usize, usize), usize>|
     -> Result<usize> {
        if let Some(&j) = joint_index.get(&(s, zi)) {
            return Ok(j);
        }
        let j = joints.len();
        if j >= cap {
            return Err(CoreError::CapacityExceeded {
                what: "joint (state, agent-state) enumeration".into(),
                needed: j + 1,
                cap,
            });
        }
        joint_index.insert((s, zi), j);
        joints.push(JointState { state: s, z: zi });
        Ok(j)
    };

    let mut initial: Vec<(usize, f64)> = Vec::new();
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
            let zi = intern_z(
                AgentState::initial(k, o0),
                &mut agent_states,
                &mut agent_index,
            );
            let j = intern_joint(s0, zi, &mut joints, &mut joint_index)?;
            initial.push((j, p0 * pe));
        }
    }

    let mut transitions: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
    let mut rewards: Vec<Vec<f64>> = Vec::new();
    let mut terminal: Vec<bool> = Vec::new();

    let mut cursor = 0;
    while cursor < joints.len() {
        let j = cursor;
        cursor += 1;
        let JointState { state: s, z: zi } = joints[j];
        debug_assert_eq!(transitions.len(), j);

        if spec.terminal[s] {
            // Absorbing: keep the window frozen, collect nothing.
            transitions.push(vec![vec![(j, 1.0)]; spec.n_actions()]);
            rewards.push(vec![0.0; spec.n_actions()]);
            terminal.push(true);
            continue;
        }

        let z = agent_states[zi].clone();
        let mut per_action: Vec<Vec<(usize, f64)>> = Vec::with_capacity(spec.n_actions());
        let mut reward_row: Vec<f64> = Vec::with_capacity(spec.n_actions());
        for a in 0..spec.n_actions() {
            let mut row: Vec<(usize, f64)> = Vec::new();
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
                    let z2 = z.update(a, o2);
                    let zi2 = intern_z(z2, &mut agent_states, &mut agent_index);
                    let j2 = intern_joint(s2, zi2, &mut joints, &mut joint_index)?;
                    row.push((j2, pt * pe));
                }
            }
            // Distinct observations can only collide on the same next joint
            // through identical windows; merge those for a canonical row.
            row.sort_unstable_by_key(|&(j2, _)| j2);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            per_action.push(row);
            reward_row.push(spec.r(s, a));
        }
        transitions.push(per_action);
        rewards.push(reward_row);
        terminal.push(false);
    }

    Ok(EnvAgentMdp {
        gamma: spec.gamma,
        n_actions: spec.n_actions(),
        agent_states,
        agent_index,
        joints,
        joint_index,
        initial,
        transitions,
        rewards,
        terminal,
    })
}

/// Generates a dense random POMDP with no terminal states: every transition
/// and emission row has full support, so all joints stay reachable and the
/// induced chain is ergodic. Rewards are uniform on [-1, 1]. The horizon is
/// set where the discounted tail drops below 1e-4. Intended for randomized
/// cross-checks between independent solver routes.
pub fn random_spec(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    n_obs: usize,
    gamma: f64,
) -> PomdpSpec {
    assert!(n_states > 0 && n_actions > 0 && n_obs > 0);
    assert!(gamma > 0.0 && gamma < 1.0);
    let mut rng = crate::seeds::rng_from(crate::seeds::derive(seed, 0x7a6d_0001));
    // Exponential weights normalized to a row make a Dirichlet(1,..,1) draw.
    let mut dirichlet_row = |n: usize| -> Vec<f64> {
        let mut row: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                -u.ln()
            })
            .collect();
        let total: f64 = row.iter().sum();
        for w in &mut row {
            *w /= total;
        }
        row
    };

    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_row(n_states));
    }
    let mut emission = Vec::with_capacity(n_states * n_obs);
    for _ in 0..n_states {
        emission.extend(dirichlet_row(n_obs));
    }
    let initial = dirichlet_row(n_states);
    let reward: Vec<f64> = (0..n_states * n_actions)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let horizon = ((1e-4_f64).ln() / gamma.ln()).ceil() as usize;

    PomdpSpec {
        name: format!("random-{seed}"),
        states: (0..n_states).map(|s| format!("s{s}")).collect(),
        actions: (0..n_actions).map(|a| format!("a{a}")).collect(),
        observations: (0..n_obs).map(|o| format!("o{o}")).collect(),
        transition,
        reward,
        reward_noise: 0.0,
        emission,
        initial,
        gamma,
        horizon,
        terminal: vec![false; n_states],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-state chain: A -> B deterministically, B terminal; each state
    /// emits its own observation.
    fn chain_spec() -> PomdpSpec {
        PomdpSpec {
            name: "chain".into(),
            states: vec!["A".into(), "B".into()],
            actions: vec!["go".into()],
            observations: vec!["oa".into(), "ob".into()],
            transition: vec![0.0, 1.0, 0.0, 1.0],
            reward: vec![1.0, 0.0],
            reward_noise: 0.0,
            emission: vec![1.0, 0.0, 0.0, 1.0],
            initial: vec![1.0, 0.0],
            gamma: 0.9,
            horizon: 10,
            terminal: vec![false, true],
        }
    }

    #[test]
    fn validate_accepts_chain() {
        chain_spec().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_rows() {
        let mut spec = chain_spec();
        spec.transition[0] = 0.5;
        assert!(matches!(spec.validate(), Err(CoreError::InvalidSpec(_))));

        let mut spec = chain_spec();
        spec.gamma = 1.0;
        assert!(spec.validate().is_err());

        let mut spec = chain_spec();
        spec.emission.pop();
        assert!(matches!(spec.validate(), Err(CoreError::Shape(_))));
    }

    #[test]
    fn json_round_trip_is_bitwise_identical() {
        let mut spec = chain_spec();
        // Awkward values that must survive the round trip bit for bit.
        spec.reward[0] = 0.1 + 0.2;
        spec.gamma = 1.0 - 1e-12;
        let text = spec.to_json().unwrap();
        let back = PomdpSpec::from_json(&text).unwrap();
        assert_eq!(spec, back);
        assert_eq!(spec.reward[0].to_bits(), back.reward[0].to_bits());
        assert_eq!(spec.gamma.to_bits(), back.gamma.to_bits());
    }

    #[test]
    fn initial_window_is_padded() {
        let z = AgentState::initial(3, 1);
        assert_eq!(z.slots()[0], Slot::PAD);
        assert_eq!(z.slots()[1], Slot::PAD);
        assert_eq!(
            z.slots()[2],
            Slot {
                obs: Some(1),
                prev_action: None
            }
        );
        assert_eq!(z.latest_obs(), Some(1));
    }

    #[test]
    fn update_slides_and_is_deterministic() {
        let z0 = AgentState::initial(2, 0);
        let z1 = z0.update(1, 1);
        assert_eq!(
            z1.slots(),
            &[
                Slot {
                    obs: Some(0),
                    prev_action: None
                },
                Slot {
                    obs: Some(1),
                    prev_action: Some(1)
                }
            ]
        );
        assert_eq!(z0.update(1, 1), z1);
        let z2 = z1.update(0, 0);
        assert_eq!(z2.slots()[0], z1.slots()[1]);
    }

    #[test]
    fn one_hot_encoding_has_two_ones_per_slot() {
        let z = AgentState::initial(3, 1).update(0, 2);
        let (n_obs, n_act) = (3, 2);
        let dim = AgentState::encoding_dim(3, n_obs, n_act);
        let mut dense = vec![0.0; dim];
        z.encode_into(n_obs, n_act, &mut dense);
        assert_eq!(dense.iter().filter(|&&x| x == 1.0).count(), 6);
        let mut idx = Vec::new();
        z.active_indices(n_obs, n_act, &mut idx);
        let mut from_sparse = vec![0.0; dim];
        for i in idx {
            from_sparse[i] = 1.0;
        }
        assert_eq!(dense, from_sparse);
    }

    #[test]
    fn simulator_runs_chain_to_termination() {
        let spec = chain_spec();
        let simulator = Simulator::new(&spec, 2);
        let mut rng = crate::seeds::rng_from(0);
        let (mut sim, o0) = simulator.reset(&mut rng);
        assert_eq!(o0, 0);
        assert_eq!(sim.state, 0);
        let out = simulator.step(&mut sim, 0, &mut rng);
        assert_eq!(out.obs, 1);
        assert_eq!(out.reward, 1.0);
        assert!(out.terminated);
        assert!(!out.truncated);
        assert!(sim.done());
    }

    #[test]
    fn build_joint_mdp_for_chain() {
        let spec = chain_spec();
        let mdp = build_env_agent_mdp(&spec, 2, 100).unwrap();
        // Reachable: (A, [pad, oa]) and the absorbing (B, [oa, ob+go]).
        assert_eq!(mdp.n_joints(), 2);
        assert_eq!(mdp.initial.len(), 1);
        let (j0, p0) = mdp.initial[0];
        assert_eq!(p0, 1.0);
        assert!(!mdp.terminal[j0]);
        let row = &mdp.transitions[j0][0];
        assert_eq!(row.len(), 1);
        let (j1, p) = row[0];
        assert_eq!(p, 1.0);
        assert!(mdp.terminal[j1]);
        assert_eq!(mdp.rewards[j0][0], 1.0);
        assert_eq!(mdp.rewards[j1][0], 0.0);
        // Absorbing joints self-loop.
        assert_eq!(mdp.transitions[j1][0], vec![(j1, 1.0)]);
    }

    #[test]
    fn capacity_cap_is_enforced() {
        let spec = chain_spec();
        let err = build_env_agent_mdp(&spec, 2, 1).unwrap_err();
        assert!(matches!(err, CoreError::CapacityExceeded { .. }));
    }
}
