//! Benchmark partially observed environments, privileged features,
//! scripted demonstration policies, and the episode record format.
//!
//! Each environment constructor returns an [`EnvCatalogEntry`]: the POMDP,
//! a per-state privileged feature map (hidden information that training-time
//! critics may read but the acting policy never sees), a default window
//! length, a stochastic scripted demonstration policy, and the total-reward
//! floor that defines episode success. [`scripted_demo_rollouts`] turns an
//! entry into a reproducible demonstration dataset of [`TransitionRecord`]s.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::check::WindowPolicy;
use crate::error::{CoreError, Result};
use crate::pomdp::{AgentState, PomdpSpec, Simulator};
use crate::seeds::{derive, rng_from, sample_categorical};

/// A shipped environment plus everything needed to collect demonstrations
/// and train on it.
#[derive(Clone, Debug)]
pub struct EnvCatalogEntry {
    pub name: String,
    pub spec: PomdpSpec,
    /// Privileged features per environment state; every state has a row of
    /// length `privileged_dim`.
    pub privileged_map: Vec<Vec<f64>>,
    pub privileged_dim: usize,
    /// Window length the agent uses on this environment.
    pub default_k: usize,
    pub demo_policy: DemoPolicy,
    /// An episode counts as a success when its total reward exceeds this.
    pub success_floor: f64,
}

impl EnvCatalogEntry {
    pub fn privileged_row(&self, state: usize) -> &[f64] {
        &self.privileged_map[state]
    }
}

/// Privileged features for specs without a handcrafted map: the full state
/// one-hot.
pub fn identity_privileged(n_states: usize) -> Vec<Vec<f64>> {
    (0..n_states)
        .map(|s| {
            let mut row = vec![0.0; n_states];
            row[s] = 1.0;
            row
        })
        .collect()
}

/// The shipped environments at their tuned demonstration parameters.
pub fn catalog() -> Vec<EnvCatalogEntry> {
    vec![
        tiger(0.85, -100.0, 10.0).expect("shipped parameters are valid"),
        hidden_target_grid(5, 5, 1).expect("shipped parameters are valid"),
        camouflage_line(5, 0.25).expect("shipped parameters are valid"),
    ]
}

/// Looks up a catalog entry by name. Underscores and hyphens are
/// interchangeable, so `hidden_target_grid` finds `hidden-target-grid`.
pub fn entry(name: &str) -> Result<EnvCatalogEntry> {
    let wanted = name.replace('_', "-");
    catalog()
        .into_iter()
        .find(|e| e.name == wanted)
        .ok_or_else(|| {
            let names: Vec<String> = catalog().into_iter().map(|e| e.name).collect();
            CoreError::InvalidConfig(format!(
                "unknown environment {name:?}, available: {names:?}"
            ))
        })
}

// ---------------------------------------------------------------------------
// Listen-or-open: a prize behind one of two doors, a hazard behind the
// other, and a noisy directional cue while listening.
// ---------------------------------------------------------------------------

/// Two-door hazard task. The hazard side is drawn once per episode and
/// hidden. The two pre-listen states emit silence, so nothing leaks at
/// reset; each listening step lands in a state whose emission points at the
/// true hazard side with probability `listen_accuracy`. Opening a door ends
/// the episode with `prize` (safe door) or `penalty` (hazard door).
pub fn tiger(listen_accuracy: f64, penalty: f64, prize: f64) -> Result<EnvCatalogEntry> {
    if !(listen_accuracy > 0.5 && listen_accuracy <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "cue accuracy must lie in (0.5, 1], got {listen_accuracy}"
        )));
    }
    let acc = listen_accuracy;
    // States: 0 hazard-left silent, 1 hazard-right silent, 2 hazard-left
    // cueing, 3 hazard-right cueing, 4 done. Actions: 0 listen, 1 open-left,
    // 2 open-right. Observations: 0 cue-left, 1 cue-right, 2 silence, 3 end.
    let n_s = 5;
    let n_a = 3;
    let mut transition = vec![0.0; n_s * n_a * n_s];
    {
        let mut t = |s: usize, a: usize, s2: usize, p: f64| {
            transition[(s * n_a + a) * n_s + s2] = p;
        };
        for s in [0usize, 2] {
            t(s, 0, 2, 1.0);
            t(s, 1, 4, 1.0);
            t(s, 2, 4, 1.0);
        }
        for s in [1usize, 3] {
            t(s, 0, 3, 1.0);
            t(s, 1, 4, 1.0);
            t(s, 2, 4, 1.0);
        }
        for a in 0..n_a {
            t(4, a, 4, 1.0);
        }
    }

    let mut reward = vec![0.0; n_s * n_a];
    // Hazard on the left: opening left hits it, opening right pays out.
    for s in [0usize, 2] {
        reward[s * n_a + 1] = penalty;
        reward[s * n_a + 2] = prize;
    }
    for s in [1usize, 3] {
        reward[s * n_a + 1] = prize;
        reward[s * n_a + 2] = penalty;
    }

    let mut emission = vec![0.0; n_s * 4];
    {
        let mut e = |s: usize, o: usize, p: f64| {
            emission[s * 4 + o] = p;
        };
        e(0, 2, 1.0);
        e(1, 2, 1.0);
        e(2, 0, acc);
        e(2, 1, 1.0 - acc);
        e(3, 1, acc);
        e(3, 0, 1.0 - acc);
        e(4, 3, 1.0);
    }

    let spec = PomdpSpec {
        name: "tiger".into(),
        states: vec![
            "hazard-left-silent".into(),
            "hazard-right-silent".into(),
            "hazard-left-cueing".into(),
            "hazard-right-cueing".into(),
            "done".into(),
        ],
        actions: vec!["listen".into(), "open-left".into(), "open-right".into()],
        observations: vec![
            "cue-left".into(),
            "cue-right".into(),
            "silence".into(),
            "end".into(),
        ],
        transition,
        reward,
        reward_noise: 0.0,
        emission,
        initial: vec![0.5, 0.5, 0.0, 0.0, 0.0],
        gamma: 0.95,
        horizon: 180,
        terminal: vec![false, false, false, false, true],
    };
    spec.validate()?;

    // Hidden bits a critic may use: hazard side plus an opened flag.
    let privileged_map = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];

    Ok(EnvCatalogEntry {
        name: "tiger".into(),
        spec,
        privileged_map,
        privileged_dim: 3,
        default_k: 4,
        // A hesitant scripted listener: it knows which door to open once the
        // cue margin is reached but commits rarely, so many episodes time
        // out. That is what keeps the demonstrations mediocre; uniform
        // action noise alone cannot push success below the blind-open
        // coin flip.
        demo_policy: DemoPolicy {
            rule: DemoRule::CueMargin {
                margin: 2,
                commit_prob: 0.002,
            },
            epsilon: 0.005,
        },
        success_floor: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Hidden-target grid: the agent always sees its own cell, and the target
// cell only while it is inside the field of view.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub fov: usize,
}

impl GridGeometry {
    fn cells(&self) -> usize {
        self.width * self.height
    }

    /// The visible patch spans offsets `fov_lo ..= fov_hi` on both axes, so
    /// odd `fov` centers it on the agent.
    fn fov_lo(&self) -> isize {
        -((self.fov as isize - 1) / 2)
    }

    fn fov_hi(&self) -> isize {
        self.fov as isize / 2
    }

    /// Relative-offset code: 0 means the target is not visible, 1..=fov^2
    /// index the offset grid.
    fn rel_code(&self, dx: isize, dy: isize) -> usize {
        let lo = self.fov_lo();
        let f = self.fov as isize;
        (1 + (dx - lo) * f + (dy - lo)) as usize
    }

    fn decode_rel(&self, code: usize) -> (isize, isize) {
        let lo = self.fov_lo();
        let c = code as isize - 1;
        let f = self.fov as isize;
        (c / f + lo, c % f + lo)
    }

    fn obs_per_cell(&self) -> usize {
        self.fov * self.fov + 1
    }
}

/// Grid search task. State is (agent cell, target cell) plus an absorbing
/// success state. The observation reveals the agent cell exactly, and the
/// target's relative offset when it lies within the field of view. Moves
/// clamp at the borders; `grab` pays 1 on the target and ends the episode,
/// and does nothing elsewhere. The agent starts in the top-left corner, the
/// target uniformly anywhere.
pub fn hidden_target_grid(width: usize, height: usize, fov: usize) -> Result<EnvCatalogEntry> {
    if width < 2 || height < 2 || width * height > 64 {
        return Err(CoreError::InvalidConfig(format!(
            "grid must be between 2x2 and 64 cells, got {width}x{height}"
        )));
    }
    if fov < 1 {
        return Err(CoreError::InvalidConfig(
            "field of view must be at least 1".into(),
        ));
    }
    let g = GridGeometry { width, height, fov };
    let cells = g.cells();
    let n_s = cells * cells + 1;
    let success = cells * cells;
    let n_a = 5; // up, down, left, right, grab
    let n_o = cells * g.obs_per_cell() + 1;
    let success_obs = n_o - 1;

    let xy = |cell: usize| ((cell % width) as isize, (cell / width) as isize);
    let at = |x: isize, y: isize| (y as usize) * width + x as usize;

    let mut transition = vec![0.0; n_s * n_a * n_s];
    let mut reward = vec![0.0; n_s * n_a];
    for agent in 0..cells {
        let (x, y) = xy(agent);
        for target in 0..cells {
            let s = agent * cells + target;
            for (a, (dx, dy)) in [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)]
                .iter()
                .enumerate()
            {
                let nx = (x + dx).clamp(0, width as isize - 1);
                let ny = (y + dy).clamp(0, height as isize - 1);
                let s2 = at(nx, ny) * cells + target;
                transition[(s * n_a + a) * n_s + s2] = 1.0;
            }
            let (grab_next, grab_reward) = if agent == target {
                (success, 1.0)
            } else {
                (s, 0.0)
            };
            transition[(s * n_a + 4) * n_s + grab_next] = 1.0;
            reward[s * n_a + 4] = grab_reward;
        }
    }
    for a in 0..n_a {
        transition[(success * n_a + a) * n_s + success] = 1.0;
    }

    let mut emission = vec![0.0; n_s * n_o];
    for agent in 0..cells {
        let (ax, ay) = xy(agent);
        for target in 0..cells {
            let (tx, ty) = xy(target);
            let (dx, dy) = (tx - ax, ty - ay);
            let visible =
                dx >= g.fov_lo() && dx <= g.fov_hi() && dy >= g.fov_lo() && dy <= g.fov_hi();
            let code = if visible { g.rel_code(dx, dy) } else { 0 };
            let s = agent * cells + target;
            emission[s * n_o + agent * g.obs_per_cell() + code] = 1.0;
        }
    }
    emission[success * n_o + success_obs] = 1.0;

    let mut initial = vec![0.0; n_s];
    for target in 0..cells {
        initial[target] = 1.0 / cells as f64;
    }

    let mut state_names = Vec::with_capacity(n_s);
    for agent in 0..cells {
        for target in 0..cells {
            state_names.push(format!("a{agent}-t{target}"));
        }
    }
    state_names.push("success".into());
    let mut obs_names = Vec::with_capacity(n_o);
    for agent in 0..cells {
        for code in 0..g.obs_per_cell() {
            obs_names.push(format!("at{agent}-rel{code}"));
        }
    }
    obs_names.push("found".into());

    let mut terminal = vec![false; n_s];
    terminal[success] = true;

    let spec = PomdpSpec {
        name: format!("hidden-target-grid-{width}x{height}-fov{fov}"),
        states: state_names,
        actions: vec![
            "up".into(),
            "down".into(),
            "left".into(),
            "right".into(),
            "grab".into(),
        ],
        observations: obs_names,
        transition,
        reward,
        reward_noise: 0.0,
        emission,
        initial,
        gamma: 0.97,
        horizon: cells + 15,
        terminal,
    };
    spec.validate()?;

    // Privileged features: target cell one-hot plus a success flag.
    let mut privileged_map = Vec::with_capacity(n_s);
    for _agent in 0..cells {
        for target in 0..cells {
            let mut row = vec![0.0; cells + 1];
            row[target] = 1.0;
            privileged_map.push(row);
        }
    }
    let mut done_row = vec![0.0; cells + 1];
    done_row[cells] = 1.0;
    privileged_map.push(done_row);

    Ok(EnvCatalogEntry {
        name: "hidden-target-grid".into(),
        spec,
        privileged_map,
        privileged_dim: cells + 1,
        default_k: 6,
        // The scripted searcher clears the first row briskly, then dawdles:
        // below it the sweep advances one step in six or seven and wastes
        // the rest on empty grabs, so the horizon cuts it off before far
        // targets. On the deep rows the modal action per window is the
        // waste, which keeps plain cloning from recovering the sweep hiding
        // underneath, while the brisk opening pins the policy to the
        // demonstrated corridor out of the start.
        demo_policy: DemoPolicy {
            rule: DemoRule::SweepAndHome {
                geometry: g,
                rows: height,
                advance_prob: 0.15,
            },
            epsilon: 0.05,
        },
        success_floor: 0.5,
    })
}

// ---------------------------------------------------------------------------
// Camouflaged-target strip: repeated noisy readings of which cell hides the
// target; committing to a cell ends the episode.
// ---------------------------------------------------------------------------

/// Evidence-accumulation task. The target sits in one of `n_cells` cells for
/// the whole episode. Every live state emits a reading that points at the
/// true cell with probability `1 - obs_noise` and uniformly at a wrong cell
/// otherwise. `look` collects another reading; `commit-i` ends the episode
/// and pays 1 exactly when the target is in cell `i`.
pub fn camouflage_line(n_cells: usize, obs_noise: f64) -> Result<EnvCatalogEntry> {
    if n_cells < 1 || n_cells > 16 {
        return Err(CoreError::InvalidConfig(format!(
            "cell count must lie in 1..=16, got {n_cells}"
        )));
    }
    if !(0.0..0.5).contains(&obs_noise) {
        return Err(CoreError::InvalidConfig(format!(
            "reading noise must lie in [0, 0.5), got {obs_noise}"
        )));
    }
    let n = n_cells;
    let n_s = n + 1;
    let done = n;
    let n_a = n + 1; // look, commit-0 .. commit-(n-1)
    let n_o = n + 1; // reading-0 .. reading-(n-1), end

    let mut transition = vec![0.0; n_s * n_a * n_s];
    let mut reward = vec![0.0; n_s * n_a];
    for s in 0..n {
        transition[(s * n_a) * n_s + s] = 1.0; // look: stay
        for c in 0..n {
            transition[(s * n_a + 1 + c) * n_s + done] = 1.0;
            if c == s {
                reward[s * n_a + 1 + c] = 1.0;
            }
        }
    }
    for a in 0..n_a {
        transition[(done * n_a + a) * n_s + done] = 1.0;
    }

    let mut emission = vec![0.0; n_s * n_o];
    for s in 0..n {
        if n == 1 {
            emission[s * n_o + s] = 1.0;
        } else {
            let wrong = obs_noise / (n - 1) as f64;
            for o in 0..n {
                emission[s * n_o + o] = if o == s { 1.0 - obs_noise } else { wrong };
            }
        }
    }
    emission[done * n_o + n] = 1.0;

    let mut initial = vec![1.0 / n as f64; n];
    initial.push(0.0);

    let mut terminal = vec![false; n_s];
    terminal[done] = true;

    let mut actions = vec!["look".to_string()];
    actions.extend((0..n).map(|c| format!("commit-{c}")));
    let mut observations: Vec<String> = (0..n).map(|c| format!("reading-{c}")).collect();
    observations.push("end".into());

    let spec = PomdpSpec {
        name: format!("camouflage-line-{n}"),
        states: (0..n)
            .map(|c| format!("target-{c}"))
            .chain(["done".into()])
            .collect(),
        actions,
        observations,
        transition,
        reward,
        reward_noise: 0.0,
        emission,
        initial,
        gamma: 0.9,
        horizon: 88,
        terminal,
    };
    spec.validate()?;

    Ok(EnvCatalogEntry {
        name: "camouflage-line".into(),
        spec,
        // True target cell one-hot plus a done flag; the identity map in
        // this state layout.
        privileged_map: identity_privileged(n_s),
        privileged_dim: n_s,
        default_k: 4,
        demo_policy: DemoPolicy {
            rule: DemoRule::ReadingMajority {
                n_cells: n,
                min_agree: 2,
            },
            epsilon: 0.45,
        },
        success_floor: 0.5,
    })
}

// ---------------------------------------------------------------------------
// Scripted demonstration policies.
// ---------------------------------------------------------------------------

/// A scripted window-to-distribution rule mixed with uniform exploration:
/// with probability `epsilon` the action is uniform, otherwise the rule's.
#[derive(Clone, Debug)]
pub struct DemoPolicy {
    pub rule: DemoRule,
    pub epsilon: f64,
}

/// The scripted rules behind the shipped demonstration policies.
#[derive(Clone, Debug)]
pub enum DemoRule {
    /// Listen until one cue leads the other by `margin` within the window,
    /// then open the door opposite the leading cue with probability
    /// `commit_prob` per step (a hesitant expert; most steps keep
    /// listening).
    CueMargin { margin: isize, commit_prob: f64 },
    /// Sweep the top `rows` rows in a serpentine loop; when the target
    /// enters the field of view, home in on it and grab. With `rows` equal
    /// to the grid height this covers every cell. The first row is cleared
    /// briskly; below it the rule only advances with probability
    /// `advance_prob` and re-grabs the empty cell it stands on otherwise,
    /// so on deep rows the per-window modal action is the useless grab
    /// even though the sweep is always in support.
    SweepAndHome {
        geometry: GridGeometry,
        rows: usize,
        advance_prob: f64,
    },
    /// Keep looking until `min_agree` readings in the window agree, then
    /// commit to the modal cell.
    ReadingMajority { n_cells: usize, min_agree: usize },
}

impl DemoRule {
    /// Number of actions in the environment this rule is written for.
    fn n_actions(&self) -> usize {
        match self {
            DemoRule::CueMargin { .. } => 3,
            DemoRule::SweepAndHome { .. } => 5,
            DemoRule::ReadingMajority { n_cells, .. } => n_cells + 1,
        }
    }

    /// The rule's action distribution for this window.
    pub fn probs(&self, z: &AgentState) -> Vec<f64> {
        let n = self.n_actions();
        let mut probs = vec![0.0; n];
        match self {
            DemoRule::CueMargin {
                margin,
                commit_prob,
            } => {
                let mut lead = 0isize;
                for o in z.observations() {
                    match o {
                        0 => lead += 1,
                        1 => lead -= 1,
                        _ => {}
                    }
                }
                if lead >= *margin {
                    // Cues say the hazard is left: open right, eventually.
                    probs[2] = *commit_prob;
                    probs[0] = 1.0 - commit_prob;
                } else if lead <= -margin {
                    probs[1] = *commit_prob;
                    probs[0] = 1.0 - commit_prob;
                } else {
                    probs[0] = 1.0;
                }
            }
            DemoRule::SweepAndHome {
                geometry,
                rows,
                advance_prob,
            } => {
                let a = self.sweep_action(geometry, *rows, z);
                if a == 4 || Self::on_first_row(geometry, z) {
                    probs[a] = 1.0;
                } else {
                    probs[a] = *advance_prob;
                    probs[4] += 1.0 - advance_prob;
                }
            }
            DemoRule::ReadingMajority {
                n_cells,
                min_agree,
            } => {
                let mut counts = vec![0usize; *n_cells];
                for o in z.observations() {
                    if o < *n_cells {
                        counts[o] += 1;
                    }
                }
                let (best, &count) = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(_, &c)| c)
                    .expect("at least one cell");
                if count >= *min_agree {
                    probs[1 + best] = 1.0;
                } else {
                    probs[0] = 1.0;
                }
            }
        }
        probs
    }

    /// The hesitation only applies below the first row, so the opening leg
    /// of the sweep is always demonstrated at full speed.
    fn on_first_row(g: &GridGeometry, z: &AgentState) -> bool {
        match z.latest_obs() {
            Some(obs) if obs < g.cells() * g.obs_per_cell() => {
                obs / g.obs_per_cell() / g.width == 0
            }
            _ => true,
        }
    }

    fn sweep_action(&self, g: &GridGeometry, rows: usize, z: &AgentState) -> usize {
        let Some(obs) = z.latest_obs() else { return 0 };
        let per = g.obs_per_cell();
        if obs >= g.cells() * per {
            return 4; // success observation: episode is over anyway
        }
        let agent = obs / per;
        let code = obs % per;
        let (x, y) = ((agent % g.width) as isize, (agent / g.width) as isize);
        if code > 0 {
            let (dx, dy) = g.decode_rel(code);
            return if dx == 0 && dy == 0 {
                4 // standing on the target
            } else if dx > 0 {
                3
            } else if dx < 0 {
                2
            } else if dy > 0 {
                1
            } else {
                0
            };
        }
        // Serpentine over rows 0..rows: even rows sweep right, odd rows
        // sweep left, drop a row at each end. Finishing the block starts a
        // climb straight back to the top row and a scan to the origin, so
        // each lap re-covers the whole block. Without the lap a deviation
        // that skips ahead in the sweep would abandon the skipped cells
        // forever, handing "skip ahead" a large genuine advantage that
        // pulls weighted regression off the demonstrated path.
        let w = g.width as isize;
        let last = (rows.clamp(1, g.height) - 1) as isize;
        // The climb is keyed on the latest movement in the window; grabs
        // (the hesitation action) do not interrupt it.
        let last_move = z
            .slots()
            .iter()
            .rev()
            .filter_map(|s| s.prev_action)
            .map(|a| a as usize)
            .find(|&a| a != 4);
        if last_move == Some(0) {
            // Riding up: keep climbing, then scan left along the top row
            // and restart the sweep from the origin.
            return if y > 0 {
                0
            } else if x > 0 {
                2
            } else {
                3
            };
        }
        if last_move == Some(2) && y == 0 {
            return if x > 0 { 2 } else { 3 };
        }
        if y > last {
            return 0;
        }
        if y % 2 == 0 {
            if x < w - 1 {
                3
            } else if y < last {
                1
            } else {
                0
            }
        } else if x > 0 {
            2
        } else if y < last {
            1
        } else {
            0
        }
    }

    /// Distribution after mixing with `epsilon` uniform.
    pub fn mixed_probs(&self, z: &AgentState, epsilon: f64) -> Vec<f64> {
        let n = self.n_actions();
        let mut probs = self.probs(z);
        for p in &mut probs {
            *p = (1.0 - epsilon) * *p + epsilon / n as f64;
        }
        probs
    }
}

impl WindowPolicy for DemoPolicy {
    fn probs(&self, z: &AgentState) -> Vec<f64> {
        self.rule.mixed_probs(z, self.epsilon)
    }
}

// ---------------------------------------------------------------------------
// Episode records.
// ---------------------------------------------------------------------------

/// One environment step as stored in demonstration and replay files. `done`
/// marks environment termination (it masks value bootstrapping downstream);
/// an episode that ends without a `done` record was cut off by the horizon.
/// The hidden states ride along only when recorded with `store_state`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode_id: u64,
    pub t: u32,
    pub o: usize,
    pub o_p: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub o_next: usize,
    pub o_p_next: Vec<f64>,
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_next: Option<usize>,
}

/// A full episode of records sharing one `episode_id`, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub records: Vec<TransitionRecord>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.r).sum()
    }

    pub fn terminated(&self) -> bool {
        self.records.last().is_some_and(|r| r.done)
    }
}

/// Rolls out scripted demonstrations. Each episode draws its randomness from
/// a seed derived from (`seed`, episode index), so datasets are reproducible
/// record-for-record and episodes could be generated in any order.
pub fn scripted_demo_rollouts(
    entry: &EnvCatalogEntry,
    n_episodes: usize,
    seed: u64,
    store_state: bool,
) -> Vec<Episode> {
    let sim = Simulator::new(&entry.spec, entry.default_k);
    let mut episodes = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut rng = rng_from(derive(seed, 0x6465_6d6f_0000_0000 | ep as u64));
        let (mut st, mut obs) = sim.reset(&mut rng);
        let mut records = Vec::new();
        let mut t = 0u32;
        while !st.terminated && !st.truncated {
            let s = st.state;
            let probs = entry
                .demo_policy
                .rule
                .mixed_probs(&st.z, entry.demo_policy.epsilon);
            let a = sample_categorical(&mut rng, &probs);
            let out = sim.step(&mut st, a, &mut rng);
            records.push(TransitionRecord {
                episode_id: ep as u64,
                t,
                o: obs,
                o_p: entry.privileged_map[s].clone(),
                a,
                r: out.reward,
                o_next: out.obs,
                o_p_next: entry.privileged_map[st.state].clone(),
                done: out.terminated,
                s: store_state.then_some(s),
                s_next: store_state.then_some(st.state),
            });
            obs = out.obs;
            t += 1;
        }
        episodes.push(Episode {
            id: ep as u64,
            records,
        });
    }
    episodes
}

/// Writes records as line-delimited JSON, one transition per line.
pub fn write_records(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        for rec in &ep.records {
            serde_json::to_writer(&mut file, rec)?;
            file.write_all(b"\n")?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a line-delimited record file back into episodes, grouping
/// consecutive records by `episode_id` and checking time order.
pub fn read_records(path: &Path) -> Result<Vec<Episode>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut episodes: Vec<Episode> = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TransitionRecord = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match episodes.last_mut() {
            Some(ep) if ep.id == rec.episode_id => {
                let expected = ep.records.len() as u32;
                if rec.t != expected {
                    return Err(CoreError::Parse {
                        line: i + 1,
                        msg: format!(
                            "episode {} expects t={expected}, got t={}",
                            rec.episode_id, rec.t
                        ),
                    });
                }
                ep.records.push(rec);
            }
            _ => {
                if rec.t != 0 {
                    return Err(CoreError::Parse {
                        line: i + 1,
                        msg: format!("episode {} must start at t=0", rec.episode_id),
                    });
                }
                episodes.push(Episode {
                    id: rec.episode_id,
                    records: vec![rec],
                });
            }
        }
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::mc_success_rate;
    use crate::oracle::{
        evaluate_privileged, finite_horizon_privileged_optimal, finite_horizon_window_optimal,
        joint_value_iteration, policy_return, PolicyTable, SolveOptions,
    };
    use crate::pomdp::build_env_agent_mdp;

    #[test]
    fn catalog_entries_validate() {
        for entry in catalog() {
            entry.spec.validate().unwrap();
            assert_eq!(
                entry.privileged_map.len(),
                entry.spec.n_states(),
                "{}",
                entry.name
            );
            for row in &entry.privileged_map {
                assert_eq!(row.len(), entry.privileged_dim);
            }
        }
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        assert!(tiger(0.5, -100.0, 10.0).is_err());
        assert!(tiger(1.2, -100.0, 10.0).is_err());
        assert!(hidden_target_grid(9, 9, 1).is_err());
        assert!(hidden_target_grid(5, 5, 0).is_err());
        assert!(camouflage_line(17, 0.25).is_err());
        assert!(camouflage_line(5, 0.5).is_err());
    }

    #[test]
    fn reset_splits_hazard_sides_evenly() {
        let entry = tiger(0.85, -100.0, 10.0).unwrap();
        let sim = Simulator::new(&entry.spec, 1);
        let n = 10_000;
        let mut lefts = 0usize;
        let mut rng = rng_from(7);
        for _ in 0..n {
            let (st, _) = sim.reset(&mut rng);
            assert!(st.state == 0 || st.state == 1);
            lefts += (st.state == 0) as usize;
        }
        let sigma = (0.25f64 / n as f64).sqrt();
        assert!(
            ((lefts as f64 / n as f64) - 0.5).abs() < 3.0 * sigma,
            "left fraction {}",
            lefts as f64 / n as f64
        );
    }

    /// With a perfect cue, the best window policy listens once and opens the
    /// indicated door: value gamma * prize. A state-reading planner opens
    /// immediately instead and collects the undiscounted prize.
    #[test]
    fn perfect_cue_listen_once_policy_is_optimal() {
        let entry = tiger(1.0, -100.0, 10.0).unwrap();
        let mdp = build_env_agent_mdp(&entry.spec, 1, 100_000).unwrap();
        let policy = PolicyTable::from_fn(&mdp, |z| match z.latest_obs() {
            Some(0) => vec![0.0, 0.0, 1.0], // cue-left: open right
            Some(1) => vec![0.0, 1.0, 0.0],
            _ => vec![1.0, 0.0, 0.0],
        })
        .unwrap();
        let values = evaluate_privileged(&mdp, &policy, SolveOptions::default()).unwrap();
        let listen_then_open = policy_return(&mdp, &values);
        assert!((listen_then_open - 0.95 * 10.0).abs() < 1e-8);

        let privileged = joint_value_iteration(&mdp, SolveOptions::default()).unwrap();
        assert!((privileged.value - 10.0).abs() < 1e-6);
    }

    #[test]
    fn open_ends_the_episode_in_both_states() {
        let entry = tiger(0.85, -100.0, 10.0).unwrap();
        let sim = Simulator::new(&entry.spec, 4);
        let mut rng = rng_from(3);
        for action in [1usize, 2] {
            for _ in 0..20 {
                let (mut st, _) = sim.reset(&mut rng);
                let out = sim.step(&mut st, action, &mut rng);
                assert!(out.terminated);
                assert!(out.reward == 10.0 || out.reward == -100.0);
            }
        }
    }

    #[test]
    fn tiger_joint_space_is_small() {
        let entry = tiger(0.85, -100.0, 10.0).unwrap();
        let mdp = build_env_agent_mdp(&entry.spec, 4, 100_000).unwrap();
        assert!(mdp.n_joints() < 1000, "joints {}", mdp.n_joints());
    }

    #[test]
    fn camouflage_joint_space_fits() {
        let entry = camouflage_line(5, 0.25).unwrap();
        let mdp = build_env_agent_mdp(&entry.spec, entry.default_k, 200_000).unwrap();
        assert!(mdp.n_joints() < 60_000, "joints {}", mdp.n_joints());
    }

    /// Noise-free readings make the task fully observed: committing to the
    /// first reading collects the reward immediately.
    #[test]
    fn noiseless_readings_are_solved_in_one_commit() {
        let entry = camouflage_line(5, 0.0).unwrap();
        let mdp = build_env_agent_mdp(&entry.spec, 1, 100_000).unwrap();
        let policy = PolicyTable::from_fn(&mdp, |z| {
            let mut row = vec![0.0; 6];
            match z.latest_obs() {
                Some(o) if o < 5 => row[1 + o] = 1.0,
                _ => row[0] = 1.0,
            }
            row
        })
        .unwrap();
        let values = evaluate_privileged(&mdp, &policy, SolveOptions::default()).unwrap();
        assert!((policy_return(&mdp, &values) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn single_cell_strip_is_one_grab() {
        let entry = camouflage_line(1, 0.0).unwrap();
        let sim = Simulator::new(&entry.spec, 1);
        let mut rng = rng_from(5);
        let (mut st, _) = sim.reset(&mut rng);
        let out = sim.step(&mut st, 1, &mut rng);
        assert!(out.terminated);
        assert_eq!(out.reward, 1.0);
    }

    /// Reading the true state is worth at least as much as any window
    /// policy: checked exactly at a short shared horizon.
    #[test]
    fn privileged_planning_dominates_window_planning() {
        let entry = camouflage_line(8, 0.4).unwrap();
        let h = 4;
        let window = finite_horizon_window_optimal(&entry.spec, h, h, 500_000).unwrap();
        let privileged = finite_horizon_privileged_optimal(&entry.spec, h).unwrap();
        assert!(
            privileged >= window + 0.05,
            "privileged {privileged}, window {window}"
        );
        assert!((privileged - 1.0).abs() < 1e-12);
    }

    /// A field of view wide enough to cover the grid from any cell makes
    /// the task fully observed: the greedy policy of the joint optimum is
    /// window-measurable and matches state-space planning.
    #[test]
    fn wide_fov_grid_is_fully_observed() {
        let entry = hidden_target_grid(3, 3, 5).unwrap();
        let spec = &entry.spec;
        let mdp = build_env_agent_mdp(spec, 1, 400_000).unwrap();
        let opt = joint_value_iteration(&mdp, SolveOptions::default()).unwrap();

        // Plain state-space value iteration on the underlying MDP.
        let n = spec.n_states();
        let mut v = vec![0.0; n];
        for _ in 0..10_000 {
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if spec.terminal[s] {
                    continue;
                }
                let best = (0..spec.n_actions())
                    .map(|a| {
                        spec.r(s, a)
                            + spec.gamma * (0..n).map(|s2| spec.t(s, a, s2) * v[s2]).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta <= 1e-12 {
                break;
            }
        }
        let state_value: f64 = (0..n).map(|s| spec.initial[s] * v[s]).sum();
        assert!(
            (opt.value - state_value).abs() < 1e-8,
            "joint {}, state {state_value}",
            opt.value
        );

        // The greedy policy reads only the window and achieves that value.
        let greedy = PolicyTable::from_fn(&mdp, |z| {
            let zi = mdp.agent_index[z];
            // Fully observed: every agent state has exactly one live joint.
            let j = (0..mdp.n_joints())
                .find(|&j| mdp.z_of(j) == zi)
                .expect("agent state has a joint");
            let row = &opt.q[j];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            let mut p = vec![0.0; mdp.n_actions];
            p[best] = 1.0;
            p
        })
        .unwrap();
        let values = evaluate_privileged(&mdp, &greedy, SolveOptions::default()).unwrap();
        assert!((policy_return(&mdp, &values) - state_value).abs() < 1e-8);
    }

    #[test]
    fn standing_on_target_grab_succeeds() {
        let entry = hidden_target_grid(5, 5, 1).unwrap();
        let sim = Simulator::new(&entry.spec, 2);
        let mut rng = rng_from(9);
        loop {
            let (mut st, _) = sim.reset(&mut rng);
            if st.state == 0 {
                // Agent cell 0, target cell 0.
                let out = sim.step(&mut st, 4, &mut rng);
                assert!(out.terminated);
                assert_eq!(out.reward, 1.0);
                break;
            }
        }
    }

    /// A full-height unperturbed sweep covers every cell within the
    /// horizon, so it always finds the target.
    #[test]
    fn noiseless_full_sweep_always_succeeds() {
        let mut e = hidden_target_grid(5, 5, 1).unwrap();
        e.demo_policy = DemoPolicy {
            rule: DemoRule::SweepAndHome {
                geometry: GridGeometry {
                    width: 5,
                    height: 5,
                    fov: 1,
                },
                rows: 5,
                advance_prob: 1.0,
            },
            epsilon: 0.0,
        };
        let rate = mc_success_rate(&e.spec, e.default_k, &e.demo_policy, e.success_floor, 300, 5);
        assert!(rate.mean > 0.999, "success rate {}", rate.mean);
    }

    /// The shipped searcher clears row 0 quickly but dawdles below it, so
    /// within the 40-step horizon it reaches only the near part of the
    /// serpentine: success sits well inside (0.2, 0.5) rather than near
    /// the full sweep's 1.0.
    #[test]
    fn hesitant_sweep_is_cut_off_by_the_horizon() {
        let mut e = hidden_target_grid(5, 5, 1).unwrap();
        e.demo_policy.epsilon = 0.0;
        let rate =
            mc_success_rate(&e.spec, e.default_k, &e.demo_policy, e.success_floor, 4000, 5);
        assert!(
            rate.mean > 0.25 && rate.mean < 0.48,
            "success rate {}",
            rate.mean
        );
    }

    /// Below the first row the shipped searcher's modal action is the
    /// empty grab, so cloning the mode of its deep windows cannot recover
    /// the sweep; on the first row the sweep itself is the mode.
    #[test]
    fn hesitant_sweep_mode_is_the_grab_on_deep_rows() {
        let e = hidden_target_grid(5, 5, 1).unwrap();
        let mode = |obs: usize| {
            let z = AgentState::initial(e.default_k, obs);
            e.demo_policy
                .rule
                .probs(&z)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        // Cell (0,1), one row down, no target in view: obs = 5 * 2.
        assert_eq!(mode(10), 4);
        // Top-left cell: the brisk opening sweeps right at full weight.
        assert_eq!(mode(0), 3);
    }

    #[test]
    fn noiseless_majority_rule_beats_single_reading() {
        let mut e = camouflage_line(5, 0.25).unwrap();
        e.demo_policy.epsilon = 0.0;
        let rate = mc_success_rate(&e.spec, e.default_k, &e.demo_policy, e.success_floor, 2000, 6);
        // A single reading is right 75% of the time; two-of-a-kind evidence
        // must do better.
        assert!(rate.mean > 0.78, "success rate {}", rate.mean);
    }

    #[test]
    fn committed_cue_margin_rule_mostly_wins() {
        let mut e = tiger(0.85, -100.0, 10.0).unwrap();
        e.demo_policy.epsilon = 0.0;
        e.demo_policy.rule = DemoRule::CueMargin {
            margin: 2,
            commit_prob: 1.0,
        };
        let rate = mc_success_rate(&e.spec, e.default_k, &e.demo_policy, e.success_floor, 2000, 7);
        // Two consistent 85% cues make the wrong door unlikely.
        assert!(rate.mean > 0.85, "success rate {}", rate.mean);
    }

    /// Shipped demonstration policies land in the intended mid-range
    /// success band.
    #[test]
    fn shipped_demos_land_in_band() {
        for entry in catalog() {
            let rate = mc_success_rate(
                &entry.spec,
                entry.default_k,
                &entry.demo_policy,
                entry.success_floor,
                1000,
                11,
            );
            let sigma = (rate.mean * (1.0 - rate.mean) / 1000.0).sqrt();
            assert!(
                rate.mean - 3.0 * sigma > 0.2 && rate.mean + 3.0 * sigma < 0.5,
                "{}: demo success rate {} +- {sigma}",
                entry.name,
                rate.mean
            );
        }
    }

    #[test]
    fn grid_observation_codes_round_trip() {
        let g = GridGeometry {
            width: 5,
            height: 5,
            fov: 3,
        };
        for dx in g.fov_lo()..=g.fov_hi() {
            for dy in g.fov_lo()..=g.fov_hi() {
                let code = g.rel_code(dx, dy);
                assert!(code >= 1 && code <= g.fov * g.fov);
                assert_eq!(g.decode_rel(code), (dx, dy));
            }
        }
    }

    #[test]
    fn rollouts_are_reproducible_and_consistent() {
        let entry = camouflage_line(5, 0.25).unwrap();
        let eps1 = scripted_demo_rollouts(&entry, 20, 42, true);
        let eps2 = scripted_demo_rollouts(&entry, 20, 42, true);
        assert_eq!(eps1, eps2);
        assert!(scripted_demo_rollouts(&entry, 0, 42, true).is_empty());

        for ep in &eps1 {
            for (i, rec) in ep.records.iter().enumerate() {
                let s = rec.s.unwrap();
                let s2 = rec.s_next.unwrap();
                assert_eq!(rec.o_p, entry.privileged_map[s]);
                assert_eq!(rec.o_p_next, entry.privileged_map[s2]);
                assert!(entry.spec.e(s2, rec.o_next) > 0.0);
                assert!(entry.spec.t(s, rec.a, s2) > 0.0);
                assert_eq!(rec.t as usize, i);
                if rec.done {
                    assert_eq!(i, ep.records.len() - 1);
                    assert!(entry.spec.terminal[s2]);
                }
            }
        }
    }

    #[test]
    fn record_files_round_trip() {
        let entry = camouflage_line(5, 0.25).unwrap();
        let episodes = scripted_demo_rollouts(&entry, 12, 77, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        write_records(&path, &episodes).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(episodes, back);

        // A second write is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        write_records(&path, &episodes).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }
}
