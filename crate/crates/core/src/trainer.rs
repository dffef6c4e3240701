//! Offline pretraining, online fine-tuning, and deployment evaluation.
//!
//! The training loop is the same for the privileged and symmetric variants:
//! every gradient step samples one batch, updates Q by one-step TD against
//! the V target, updates V by expectile regression against the Q target,
//! then updates the policy by weighted regression, and finally Polyak-tracks
//! both targets. Behavior cloning trains the policy alone on transitions
//! from successful episodes. Online fine-tuning collects episodes by
//! sampling from the current policy and runs one gradient step per collected
//! environment step, drawing half of every batch from the offline buffer.
//!
//! Deployment evaluation acts greedily (or samples, by flag) on the window
//! alone; the environment wrapper hands back privileged fields poisoned with
//! NaN so any accidental use would be loud.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{read_records, write_records, EnvCatalogEntry, Episode};
use crate::error::{CoreError, Result};
use crate::losses::{
    aawr_policy_loss, awr_weights, bc_loss, q_td_loss, v_expectile_loss, weight_stats,
    weighted_nll_loss, Batch, CriticMode, Sample, TrainingConfig, WeightStats,
};
use crate::nn::{
    adam_step, forward, mlp_init, polyak_update, read_adam, read_mlp, write_adam, write_mlp,
    AdamState, Input, MlpParams, OutputHead,
};
use crate::pomdp::{AgentState, SimState, Simulator};
use crate::seeds::{derive, rng_from, sample_categorical};

pub use crate::envs::TransitionRecord as Transition;

/// Default capacity of the online buffer; eviction drops whole episodes.
pub const D_ON_CAPACITY: usize = 100_000;

const POLICY_INIT_STREAM: u64 = 0x6e65_7400;
const Q_INIT_STREAM: u64 = 0x6e65_7401;
const V_INIT_STREAM: u64 = 0x6e65_7402;
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const EVAL_STREAM: u64 = 0x6576_616c_0000_0000;

// ---------------------------------------------------------------------------
// Methods.
// ---------------------------------------------------------------------------

/// The three trainable methods: advantage-weighted regression with
/// privileged critics, the same with window-only critics, and behavior
/// cloning of successful episodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Aawr,
    Sawr,
    Bc,
}

impl Method {
    /// Critic input mode, None for behavior cloning (no critics).
    pub fn critic_mode(self) -> Option<CriticMode> {
        match self {
            Method::Aawr => Some(CriticMode::Privileged),
            Method::Sawr => Some(CriticMode::Symmetric),
            Method::Bc => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Aawr => "aawr",
            Method::Sawr => "sawr",
            Method::Bc => "bc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aawr" => Ok(Method::Aawr),
            "sawr" => Ok(Method::Sawr),
            "bc" => Ok(Method::Bc),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown method '{other}', expected aawr, sawr, or bc"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Replay buffer.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct StoredStep {
    rec: Transition,
    /// Window before acting; its one-hot indices feed policy and critics.
    z: AgentState,
    z_idx: Vec<usize>,
    z_next_idx: Vec<usize>,
}

#[derive(Clone, Debug)]
struct StoredEpisode {
    steps: Vec<StoredStep>,
    success: bool,
}

/// Episode-granular transition store. Windows are reconstructed once at
/// ingest by folding the record chain, so sampling is cheap. When the
/// capacity is exceeded whole episodes are evicted oldest-first, which keeps
/// every stored episode intact for return-to-go targets.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    n_obs: usize,
    n_actions: usize,
    k: usize,
    o_p_dim: usize,
    success_floor: f64,
    capacity: usize,
    episodes: Vec<StoredEpisode>,
    /// cum[i] = transitions in episodes[..=i].
    cum: Vec<usize>,
    /// Prefix lengths over successful episodes, parallel to `success_eps`.
    success_cum: Vec<usize>,
    success_eps: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(entry: &EnvCatalogEntry, k: usize, capacity: usize) -> Self {
        ReplayBuffer {
            n_obs: entry.spec.n_observations(),
            n_actions: entry.spec.n_actions(),
            k,
            o_p_dim: entry.privileged_dim,
            success_floor: entry.success_floor,
            capacity,
            episodes: Vec::new(),
            cum: Vec::new(),
            success_cum: Vec::new(),
            success_eps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cum.last().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Transitions that belong to successful episodes.
    pub fn success_len(&self) -> usize {
        self.success_cum.last().copied().unwrap_or(0)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Validates the record chain, folds the windows, and appends. Evicts
    /// oldest episodes if the capacity is exceeded.
    pub fn push_episode(&mut self, ep: &Episode) -> Result<()> {
        if ep.records.is_empty() {
            return Ok(());
        }
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        let mut steps = Vec::with_capacity(ep.records.len());
        let mut z = AgentState::initial(self.k, ep.records[0].o);
        for (i, rec) in ep.records.iter().enumerate() {
            if rec.t as usize != i {
                return bad(format!("episode {}: records out of order at t={}", ep.id, rec.t));
            }
            if rec.o >= self.n_obs || rec.o_next >= self.n_obs {
                return bad(format!("episode {}: observation out of range at t={i}", ep.id));
            }
            if rec.a >= self.n_actions {
                return bad(format!("episode {}: action {} out of range", ep.id, rec.a));
            }
            if rec.o_p.len() != self.o_p_dim || rec.o_p_next.len() != self.o_p_dim {
                return bad(format!(
                    "episode {}: privileged vector has wrong length at t={i}",
                    ep.id
                ));
            }
            if rec.done && i + 1 != ep.records.len() {
                return bad(format!("episode {}: done before the final record", ep.id));
            }
            if i > 0 && ep.records[i - 1].o_next != rec.o {
                return bad(format!(
                    "episode {}: observation chain broken at t={i}",
                    ep.id
                ));
            }
            let z_next = z.update(rec.a, rec.o_next);
            let mut z_idx = Vec::with_capacity(2 * self.k);
            let mut z_next_idx = Vec::with_capacity(2 * self.k);
            z.active_indices(self.n_obs, self.n_actions, &mut z_idx);
            z_next.active_indices(self.n_obs, self.n_actions, &mut z_next_idx);
            steps.push(StoredStep {
                rec: rec.clone(),
                z: z.clone(),
                z_idx,
                z_next_idx,
            });
            z = z_next;
        }
        self.episodes.push(StoredEpisode {
            steps,
            success: ep.total_reward() > self.success_floor,
        });
        let mut evict = 0;
        let mut len: usize = self.episodes.iter().map(|e| e.steps.len()).sum();
        while evict < self.episodes.len() - 1 && len > self.capacity {
            len -= self.episodes[evict].steps.len();
            evict += 1;
        }
        if evict > 0 {
            self.episodes.drain(..evict);
        }
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        self.cum.clear();
        self.success_cum.clear();
        self.success_eps.clear();
        let mut total = 0;
        let mut ok = 0;
        for (i, ep) in self.episodes.iter().enumerate() {
            total += ep.steps.len();
            self.cum.push(total);
            if ep.success {
                ok += ep.steps.len();
                self.success_cum.push(ok);
                self.success_eps.push(i);
            }
        }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let ep = self.cum.partition_point(|&c| c <= i);
        let start = if ep == 0 { 0 } else { self.cum[ep - 1] };
        (ep, i - start)
    }

    /// The stored transition and pre-action window at global index `i`.
    pub fn step_at(&self, i: usize) -> (&Transition, &AgentState) {
        let (ep, off) = self.locate(i);
        let s = &self.episodes[ep].steps[off];
        (&s.rec, &s.z)
    }

    fn sample_at(&self, i: usize) -> Sample {
        let (ep, off) = self.locate(i);
        let s = &self.episodes[ep].steps[off];
        Sample {
            z_idx: s.z_idx.clone(),
            z_next_idx: s.z_next_idx.clone(),
            o_p: s.rec.o_p.clone(),
            o_p_next: s.rec.o_p_next.clone(),
            a: s.rec.a,
            r: s.rec.r,
            done: s.rec.done,
        }
    }

    fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.len())
    }

    /// Uniform index among transitions of successful episodes.
    fn sample_success_index<R: Rng>(&self, rng: &mut R) -> usize {
        let u = rng.gen_range(0..self.success_len());
        let pos = self.success_cum.partition_point(|&c| c <= u);
        let prior = if pos == 0 { 0 } else { self.success_cum[pos - 1] };
        let ep = self.success_eps[pos];
        let start = if ep == 0 { 0 } else { self.cum[ep - 1] };
        start + (u - prior)
    }

    /// Discounted return-to-go of every stored transition, in index order.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for ep in &self.episodes {
            let rs: Vec<f64> = ep.steps.iter().map(|s| s.rec.r).collect();
            out.extend(crate::losses::returns_to_go(&rs, gamma));
        }
        out
    }

    /// Stored episodes, reconstructed in insertion order.
    pub fn episodes(&self) -> Vec<Episode> {
        self.episodes
            .iter()
            .map(|ep| Episode {
                id: ep.steps[0].rec.episode_id,
                records: ep.steps.iter().map(|s| s.rec.clone()).collect(),
            })
            .collect()
    }
}

/// Reads a record file into a replay buffer keyed to `entry`'s dimensions.
pub fn ingest_demos(
    path: &Path,
    entry: &EnvCatalogEntry,
    k: usize,
    capacity: usize,
) -> Result<ReplayBuffer> {
    let episodes = read_records(path)?;
    let mut buf = ReplayBuffer::new(entry, k, capacity);
    for ep in &episodes {
        buf.push_episode(ep)?;
    }
    Ok(buf)
}

/// Writes the buffer's episodes back out as a record file.
pub fn export_buffer(buffer: &ReplayBuffer, path: &Path) -> Result<()> {
    write_records(path, &buffer.episodes())
}

// ---------------------------------------------------------------------------
// Networks and checkpoints.
// ---------------------------------------------------------------------------

/// Q/V pair with frozen Polyak targets and their optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct Critics {
    pub q: MlpParams,
    pub v: MlpParams,
    pub q_target: MlpParams,
    pub v_target: MlpParams,
    pub q_opt: AdamState,
    pub v_opt: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub policy: MlpParams,
    pub policy_opt: AdamState,
    /// Present for the advantage-weighted methods, absent for cloning.
    pub critics: Option<Critics>,
}

fn layer_sizes(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(in_dim);
    sizes.extend_from_slice(hidden);
    sizes.push(out_dim);
    sizes
}

/// Fresh networks for `method` on `entry`, seeded from `cfg.seed`.
pub fn init_networks(
    entry: &EnvCatalogEntry,
    cfg: &TrainingConfig,
    method: Method,
) -> Result<Networks> {
    let n_obs = entry.spec.n_observations();
    let n_actions = entry.spec.n_actions();
    let z_dim = AgentState::encoding_dim(cfg.k, n_obs, n_actions);
    let policy = mlp_init(&layer_sizes(z_dim, &cfg.hidden, n_actions), derive(cfg.seed, POLICY_INIT_STREAM))?
        .with_head(OutputHead::CategoricalLogits);
    let policy_opt = AdamState::new(&policy);
    let critics = match method.critic_mode() {
        None => None,
        Some(mode) => {
            let in_dim = match mode {
                CriticMode::Privileged => z_dim + entry.privileged_dim,
                CriticMode::Symmetric => z_dim,
            };
            let q = mlp_init(&layer_sizes(in_dim, &cfg.hidden, n_actions), derive(cfg.seed, Q_INIT_STREAM))?;
            let v = mlp_init(&layer_sizes(in_dim, &cfg.hidden, 1), derive(cfg.seed, V_INIT_STREAM))?;
            Some(Critics {
                q_target: q.clone(),
                v_target: v.clone(),
                q_opt: AdamState::new(&q),
                v_opt: AdamState::new(&v),
                q,
                v,
            })
        }
    };
    Ok(Networks {
        policy,
        policy_opt,
        critics,
    })
}

/// A saved model: the method tag plus all networks and optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub nets: Networks,
}

const CKPT_MAGIC: &[u8; 8] = b"AWRCKPT1";

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let code = match ckpt.method {
        Method::Aawr => 0u8,
        Method::Sawr => 1,
        Method::Bc => 2,
    };
    w.write_all(&[code, ckpt.nets.critics.is_some() as u8])?;
    write_mlp(&mut w, &ckpt.nets.policy)?;
    write_adam(&mut w, &ckpt.nets.policy_opt)?;
    if let Some(c) = &ckpt.nets.critics {
        write_mlp(&mut w, &c.q)?;
        write_adam(&mut w, &c.q_opt)?;
        write_mlp(&mut w, &c.v)?;
        write_adam(&mut w, &c.v_opt)?;
        write_mlp(&mut w, &c.q_target)?;
        write_mlp(&mut w, &c.v_target)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 10];
    r.read_exact(&mut head)?;
    if &head[..8] != CKPT_MAGIC {
        return Err(CoreError::Parse {
            line: 0,
            msg: "not a checkpoint file (bad magic)".into(),
        });
    }
    let method = match head[8] {
        0 => Method::Aawr,
        1 => Method::Sawr,
        2 => Method::Bc,
        other => {
            return Err(CoreError::Parse {
                line: 0,
                msg: format!("unknown method code {other} in checkpoint"),
            })
        }
    };
    let policy = read_mlp(&mut r)?;
    let policy_opt = read_adam(&mut r)?;
    let critics = if head[9] != 0 {
        let q = read_mlp(&mut r)?;
        let q_opt = read_adam(&mut r)?;
        let v = read_mlp(&mut r)?;
        let v_opt = read_adam(&mut r)?;
        let q_target = read_mlp(&mut r)?;
        let v_target = read_mlp(&mut r)?;
        Some(Critics {
            q,
            v,
            q_target,
            v_target,
            q_opt,
            v_opt,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        method,
        nets: Networks {
            policy,
            policy_opt,
            critics,
        },
    })
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Offline,
    Online,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Offline => "offline",
            Phase::Online => "online",
        })
    }
}

impl FromStr for Phase {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Phase::Init),
            "offline" => Ok(Phase::Offline),
            "online" => Ok(Phase::Online),
            other => Err(CoreError::InvalidConfig(format!("unknown phase '{other}'"))),
        }
    }
}

/// One evaluation row. `grad_step` and `env_step` are cumulative, so both
/// columns are nondecreasing down a run's file. Loss columns average over
/// the gradient steps since the previous row (zero on the init row).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: Phase,
    pub grad_step: u64,
    pub env_step: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_episode_length: f64,
    pub q_loss: f64,
    pub v_loss: f64,
    pub policy_loss: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub weight_clipped: f64,
}

pub const METRICS_HEADER: &str = "phase,grad_step,env_step,success_rate,mean_return,\
mean_episode_length,q_loss,v_loss,policy_loss,weight_mean,weight_max,weight_clipped";

fn format_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        row.phase,
        row.grad_step,
        row.env_step,
        row.success_rate,
        row.mean_return,
        row.mean_episode_length,
        row.q_loss,
        row.v_loss,
        row.policy_loss,
        row.weight_mean,
        row.weight_max,
        row.weight_clipped
    )
}

/// Renders rows to the documented CSV text. Formatting is plain `Display`,
/// so equal rows produce byte-equal files.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let parse = |msg: String| CoreError::Parse { line: i + 1, msg };
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(parse("unexpected metrics header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 12 {
            return Err(parse(format!("expected 12 columns, got {}", cols.len())));
        }
        let f = |j: usize| -> Result<f64> {
            cols[j]
                .parse::<f64>()
                .map_err(|e| parse(format!("column {j}: {e}")))
        };
        let u = |j: usize| -> Result<u64> {
            cols[j]
                .parse::<u64>()
                .map_err(|e| parse(format!("column {j}: {e}")))
        };
        rows.push(MetricsRow {
            phase: cols[0].parse().map_err(|_| parse(format!("bad phase '{}'", cols[0])))?,
            grad_step: u(1)?,
            env_step: u(2)?,
            success_rate: f(3)?,
            mean_return: f(4)?,
            mean_episode_length: f(5)?,
            q_loss: f(6)?,
            v_loss: f(7)?,
            policy_loss: f(8)?,
            weight_mean: f(9)?,
            weight_max: f(10)?,
            weight_clipped: f(11)?,
        });
    }
    Ok(rows)
}

/// Run provenance written next to the metrics file. `config_echo` holds the
/// input config text byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub config_echo: String,
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Whether the deployment wrapper hands back real privileged fields or NaN
/// poison. Deployment uses poison; the two must produce identical results
/// because evaluation never reads those fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrivilegedFields {
    Poisoned,
    Visible,
}

/// Step output as seen at deployment: no hidden state, and `o_p` is poison
/// unless explicitly configured otherwise.
#[derive(Clone, Debug)]
pub struct DeployedStep {
    pub obs: usize,
    pub o_p: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Deployment-side environment handle. It owns the simulator state and
/// exposes only observations, rewards, and done flags; privileged vectors
/// come back as NaN under [`PrivilegedFields::Poisoned`].
pub struct DeployedEnv<'a> {
    entry: &'a EnvCatalogEntry,
    sim: Simulator<'a>,
    st: Option<SimState>,
    fields: PrivilegedFields,
}

impl<'a> DeployedEnv<'a> {
    pub fn new(entry: &'a EnvCatalogEntry, k: usize, fields: PrivilegedFields) -> Self {
        DeployedEnv {
            entry,
            sim: Simulator::new(&entry.spec, k),
            st: None,
            fields,
        }
    }

    fn privileged(&self, s: usize) -> Vec<f64> {
        match self.fields {
            PrivilegedFields::Poisoned => vec![f64::NAN; self.entry.privileged_dim],
            PrivilegedFields::Visible => self.entry.privileged_row(s).to_vec(),
        }
    }

    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> (usize, Vec<f64>) {
        let (st, obs) = self.sim.reset(rng);
        let o_p = self.privileged(st.state);
        self.st = Some(st);
        (obs, o_p)
    }

    pub fn step<R: Rng>(&mut self, action: usize, rng: &mut R) -> DeployedStep {
        let mut st = self.st.take().expect("step before reset");
        let out = self.sim.step(&mut st, action, rng);
        let o_p = self.privileged(st.state);
        self.st = Some(st);
        DeployedStep {
            obs: out.obs,
            o_p,
            reward: out.reward,
            terminated: out.terminated,
            truncated: out.truncated,
        }
    }
}

/// Action distribution of the policy at a window given by its active one-hot
/// indices. Errors on non-finite logits, which is what would happen if
/// poisoned privileged values ever leaked into the input.
pub fn policy_probs(policy: &MlpParams, z_idx: &[usize]) -> Result<Vec<f64>> {
    let (out, _) = forward(policy, &[Input::OneHot(z_idx)])?;
    let logits = &out[0];
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite(
            "policy logits are non-finite at evaluation".into(),
        ));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Lowest-index argmax, the deterministic greedy choice.
pub fn greedy_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_episode_length: f64,
}

/// Deployment evaluation: the policy acts on the window alone. Episode `i`
/// draws from a seed derived from (`seed`, `i`), so summaries are
/// reproducible and independent of episode count prefixes.
pub fn evaluate(
    policy: &MlpParams,
    entry: &EnvCatalogEntry,
    k: usize,
    n_episodes: usize,
    seed: u64,
    greedy: bool,
) -> Result<EvalSummary> {
    evaluate_with(policy, entry, k, n_episodes, seed, greedy, PrivilegedFields::Poisoned)
}

/// [`evaluate`] with an explicit privileged-field setting; the poisoned and
/// visible variants must agree exactly.
pub fn evaluate_with(
    policy: &MlpParams,
    entry: &EnvCatalogEntry,
    k: usize,
    n_episodes: usize,
    seed: u64,
    greedy: bool,
    fields: PrivilegedFields,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(CoreError::InvalidConfig(
            "evaluation needs at least one episode".into(),
        ));
    }
    let n_obs = entry.spec.n_observations();
    let n_actions = entry.spec.n_actions();
    let mut env = DeployedEnv::new(entry, k, fields);
    let mut successes = 0usize;
    let mut total_return = 0.0;
    let mut total_len = 0usize;
    let mut idx = Vec::with_capacity(2 * k);
    for ep in 0..n_episodes {
        let mut rng = rng_from(derive(seed, ep as u64));
        let (obs, _o_p) = env.reset(&mut rng);
        let mut z = AgentState::initial(k, obs);
        let mut ep_return = 0.0;
        loop {
            z.active_indices(n_obs, n_actions, &mut idx);
            let probs = policy_probs(policy, &idx)?;
            let a = if greedy {
                greedy_action(&probs)
            } else {
                sample_categorical(&mut rng, &probs)
            };
            let step = env.step(a, &mut rng);
            ep_return += step.reward;
            total_len += 1;
            z = z.update(a, step.obs);
            if step.terminated || step.truncated {
                break;
            }
        }
        total_return += ep_return;
        if ep_return > entry.success_floor {
            successes += 1;
        }
    }
    let n = n_episodes as f64;
    Ok(EvalSummary {
        n_episodes,
        success_rate: successes as f64 / n,
        mean_return: total_return / n,
        mean_episode_length: total_len as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

/// Advantage source for the policy update: the learned Q/V pair, or an
/// externally supplied advantage function of (transition, window). The
/// latter freezes the critics entirely and is how exact-DP critics are
/// plugged in.
pub enum CriticSource<'a> {
    Learned,
    Oracle(&'a dyn Fn(&Transition, &AgentState) -> Result<f64>),
}

/// Evaluation cadence during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Steps between metric rows: gradient steps offline, environment steps
    /// online. Zero disables intermediate rows.
    pub cadence: u64,
    pub episodes: usize,
    /// Greedy argmax when true (the default), else sample from the policy.
    pub greedy: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            cadence: 1000,
            episodes: 100,
            greedy: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct LossAccum {
    n: u64,
    q: f64,
    v: f64,
    p: f64,
    w_mean: f64,
    w_max: f64,
    w_clipped: f64,
}

impl LossAccum {
    fn add(&mut self, q: f64, v: f64, p: f64, w: WeightStats) {
        self.n += 1;
        self.q += q;
        self.v += v;
        self.p += p;
        self.w_mean += w.mean;
        self.w_max = self.w_max.max(w.max);
        self.w_clipped += w.clipped;
    }

    fn drain(&mut self) -> (f64, f64, f64, f64, f64, f64) {
        let out = if self.n == 0 {
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        } else {
            let n = self.n as f64;
            (
                self.q / n,
                self.v / n,
                self.p / n,
                self.w_mean / n,
                self.w_max,
                self.w_clipped / n,
            )
        };
        *self = LossAccum::default();
        out
    }
}

/// Single-writer training state: one environment, one method, one seed.
pub struct Trainer {
    pub entry: EnvCatalogEntry,
    pub cfg: TrainingConfig,
    pub method: Method,
    pub eval: EvalSettings,
    pub nets: Networks,
    pub d_off: ReplayBuffer,
    pub d_on: ReplayBuffer,
    pub metrics: Vec<MetricsRow>,
    rng: ChaCha12Rng,
    grad_steps: u64,
    env_steps: u64,
    online_env_steps: u64,
    eval_counter: u64,
    next_episode_id: u64,
    accum: LossAccum,
}

impl Trainer {
    pub fn new(
        entry: &EnvCatalogEntry,
        cfg: TrainingConfig,
        method: Method,
        eval: EvalSettings,
    ) -> Result<Self> {
        cfg.validate()?;
        if eval.episodes == 0 {
            return Err(CoreError::InvalidConfig(
                "evaluation episode count must be positive".into(),
            ));
        }
        let nets = init_networks(entry, &cfg, method)?;
        Ok(Trainer {
            d_off: ReplayBuffer::new(entry, cfg.k, usize::MAX),
            d_on: ReplayBuffer::new(entry, cfg.k, D_ON_CAPACITY),
            rng: rng_from(derive(cfg.seed, TRAIN_STREAM)),
            entry: entry.clone(),
            cfg,
            method,
            eval,
            nets,
            metrics: Vec::new(),
            grad_steps: 0,
            env_steps: 0,
            online_env_steps: 0,
            eval_counter: 0,
            next_episode_id: 0,
            accum: LossAccum::default(),
        })
    }

    /// Resumes from a checkpoint; buffers and counters start fresh.
    pub fn from_checkpoint(
        entry: &EnvCatalogEntry,
        cfg: TrainingConfig,
        eval: EvalSettings,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new(entry, cfg, ckpt.method, eval)?;
        if ckpt.nets.policy.sizes != t.nets.policy.sizes {
            return Err(CoreError::Shape(format!(
                "checkpoint policy sized {:?}, this env and config need {:?}",
                ckpt.nets.policy.sizes, t.nets.policy.sizes
            )));
        }
        match (&ckpt.nets.critics, &t.nets.critics) {
            (Some(c), Some(fresh)) if c.q.sizes != fresh.q.sizes => {
                return Err(CoreError::Shape(format!(
                    "checkpoint critics sized {:?}, this env and config need {:?}",
                    c.q.sizes, fresh.q.sizes
                )));
            }
            (None, Some(_)) => {
                return Err(CoreError::Shape(
                    "checkpoint has no critics but the method needs them".into(),
                ));
            }
            _ => {}
        }
        t.nets = ckpt.nets;
        Ok(t)
    }

    pub fn load_demos(&mut self, episodes: &[Episode]) -> Result<()> {
        for ep in episodes {
            self.d_off.push_episode(ep)?;
        }
        Ok(())
    }

    pub fn policy(&self) -> &MlpParams {
        &self.nets.policy
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            method: self.method,
            nets: self.nets.clone(),
        }
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    fn z_dim(&self) -> usize {
        AgentState::encoding_dim(
            self.cfg.k,
            self.entry.spec.n_observations(),
            self.entry.spec.n_actions(),
        )
    }

    fn batch_mode(&self) -> CriticMode {
        self.method.critic_mode().unwrap_or(CriticMode::Symmetric)
    }

    /// Samples a batch. Offline batches come wholly from D_off; online
    /// batches take exactly `batch_size / 2` from D_off and the rest from
    /// D_on. Cloning batches draw only from successful episodes, falling
    /// back to the other buffer if one side has no successes yet.
    fn sample_batch(&mut self, online: bool) -> Result<(Batch, Vec<(bool, usize)>)> {
        let total = self.cfg.batch_size;
        let success_only = self.method == Method::Bc;
        let avail = |buf: &ReplayBuffer| {
            if success_only {
                buf.success_len()
            } else {
                buf.len()
            }
        };
        let mut quota_off = if online { total / 2 } else { total };
        let mut quota_on = total - quota_off;
        if !online {
            quota_on = 0;
        }
        if online {
            // A side without usable data cedes its half to the other.
            if avail(&self.d_on) == 0 {
                quota_off += quota_on;
                quota_on = 0;
            }
            if avail(&self.d_off) == 0 && quota_off > 0 {
                quota_on += quota_off;
                quota_off = 0;
            }
        }
        if (quota_off > 0 && avail(&self.d_off) == 0) || (quota_on > 0 && avail(&self.d_on) == 0) {
            return Err(CoreError::InvalidConfig(if success_only {
                "behavior cloning needs at least one successful episode".into()
            } else {
                "cannot sample from an empty replay buffer".into()
            }));
        }
        let mut picks = Vec::with_capacity(total);
        for _ in 0..quota_off {
            let i = if success_only {
                self.d_off.sample_success_index(&mut self.rng)
            } else {
                self.d_off.sample_index(&mut self.rng)
            };
            picks.push((false, i));
        }
        for _ in 0..quota_on {
            let i = if success_only {
                self.d_on.sample_success_index(&mut self.rng)
            } else {
                self.d_on.sample_index(&mut self.rng)
            };
            picks.push((true, i));
        }
        let samples = picks
            .iter()
            .map(|&(on, i)| {
                if on {
                    self.d_on.sample_at(i)
                } else {
                    self.d_off.sample_at(i)
                }
            })
            .collect();
        let batch = Batch {
            samples,
            mode: self.batch_mode(),
            z_dim: self.z_dim(),
            o_p_dim: self.entry.privileged_dim,
            n_actions: self.entry.spec.n_actions(),
        };
        Ok((batch, picks))
    }

    /// One gradient step: critics then policy for the weighted methods, the
    /// policy alone for cloning or when an oracle advantage is supplied.
    fn gradient_step(&mut self, online: bool, critics: &CriticSource) -> Result<()> {
        let (batch, picks) = self.sample_batch(online)?;
        match (self.method, critics) {
            (Method::Bc, _) => {
                let out = bc_loss(&batch, &self.nets.policy)?;
                adam_step(
                    &mut self.nets.policy,
                    &out.grads,
                    &mut self.nets.policy_opt,
                    self.cfg.lr_actor,
                )?;
                let unit = WeightStats {
                    mean: 1.0,
                    min: 1.0,
                    max: 1.0,
                    clipped: 0.0,
                };
                self.accum.add(0.0, 0.0, out.loss, unit);
            }
            (_, CriticSource::Oracle(adv_fn)) => {
                let advantages: Vec<f64> = picks
                    .iter()
                    .map(|&(on, i)| {
                        let (rec, z) = if on {
                            self.d_on.step_at(i)
                        } else {
                            self.d_off.step_at(i)
                        };
                        adv_fn(rec, z)
                    })
                    .collect::<Result<_>>()?;
                let weights = awr_weights(&advantages, self.cfg.beta, self.cfg.weight_clip)?;
                let out = weighted_nll_loss(&batch, &self.nets.policy, &weights)?;
                adam_step(
                    &mut self.nets.policy,
                    &out.grads,
                    &mut self.nets.policy_opt,
                    self.cfg.lr_actor,
                )?;
                self.accum
                    .add(0.0, 0.0, out.loss, weight_stats(&weights, self.cfg.weight_clip));
            }
            (_, CriticSource::Learned) => {
                let c = self.nets.critics.as_mut().expect("critics exist for awr methods");
                let q_out = q_td_loss(&batch, &c.q, &c.v_target, self.cfg.gamma)?;
                adam_step(&mut c.q, &q_out.grads, &mut c.q_opt, self.cfg.lr_critic)?;
                let v_out = v_expectile_loss(&batch, &c.v, &c.q_target, self.cfg.tau)?;
                adam_step(&mut c.v, &v_out.grads, &mut c.v_opt, self.cfg.lr_critic)?;
                // aawr and sawr share the update; the batch mode already
                // decides what the critics see.
                let p_out = aawr_policy_loss_any_mode(
                    &batch,
                    &self.nets.policy,
                    &c.q,
                    &c.v,
                    self.cfg.beta,
                    self.cfg.weight_clip,
                )?;
                adam_step(
                    &mut self.nets.policy,
                    &p_out.grads,
                    &mut self.nets.policy_opt,
                    self.cfg.lr_actor,
                )?;
                polyak_update(&mut c.q_target, &c.q, self.cfg.target_update_rate)?;
                polyak_update(&mut c.v_target, &c.v, self.cfg.target_update_rate)?;
                self.accum.add(q_out.loss, v_out.loss, p_out.loss, p_out.weights);
            }
        }
        self.grad_steps += 1;
        Ok(())
    }

    fn eval_row(&mut self, phase: Phase) -> Result<()> {
        let seed = derive(self.cfg.seed, EVAL_STREAM | self.eval_counter);
        self.eval_counter += 1;
        let summary = evaluate(
            &self.nets.policy,
            &self.entry,
            self.cfg.k,
            self.eval.episodes,
            seed,
            self.eval.greedy,
        )?;
        let (q, v, p, w_mean, w_max, w_clipped) = self.accum.drain();
        self.metrics.push(MetricsRow {
            phase,
            grad_step: self.grad_steps,
            env_step: self.env_steps,
            success_rate: summary.success_rate,
            mean_return: summary.mean_return,
            mean_episode_length: summary.mean_episode_length,
            q_loss: q,
            v_loss: v,
            policy_loss: p,
            weight_mean: w_mean,
            weight_max: w_max,
            weight_clipped: w_clipped,
        });
        Ok(())
    }

    /// Offline pretraining with learned critics.
    pub fn offline_phase(&mut self) -> Result<()> {
        self.offline_phase_with(&CriticSource::Learned)
    }

    /// Offline pretraining for `cfg.n_off` gradient steps on D_off.
    pub fn offline_phase_with(&mut self, critics: &CriticSource) -> Result<()> {
        if self.d_off.is_empty() && self.cfg.n_off > 0 {
            return Err(CoreError::InvalidConfig(
                "offline phase needs a nonempty demonstration buffer".into(),
            ));
        }
        if self.metrics.is_empty() {
            self.eval_row(Phase::Init)?;
        }
        for step in 0..self.cfg.n_off {
            self.gradient_step(false, critics)?;
            if self.eval.cadence > 0 && (step + 1) % self.eval.cadence == 0 && step + 1 < self.cfg.n_off
            {
                self.eval_row(Phase::Offline)?;
            }
        }
        if self.cfg.n_off > 0 {
            self.eval_row(Phase::Offline)?;
        }
        Ok(())
    }

    /// Online fine-tuning: collect one episode from the current policy, then
    /// run one gradient step per collected step, until `cfg.n_on`
    /// environment steps have been gathered.
    pub fn online_phase(&mut self) -> Result<()> {
        if self.cfg.n_on == 0 {
            return Ok(());
        }
        if self.metrics.is_empty() {
            self.eval_row(Phase::Init)?;
        }
        let mut since_eval = 0u64;
        while self.online_env_steps < self.cfg.n_on {
            let ep = collect_episode(
                &self.nets.policy,
                &self.entry,
                self.cfg.k,
                &mut self.rng,
                self.next_episode_id,
            )?;
            self.next_episode_id += 1;
            let len = ep.records.len() as u64;
            self.d_on.push_episode(&ep)?;
            self.env_steps += len;
            self.online_env_steps += len;
            for _ in 0..len {
                self.gradient_step(true, &CriticSource::Learned)?;
            }
            since_eval += len;
            if self.eval.cadence > 0
                && since_eval >= self.eval.cadence
                && self.online_env_steps < self.cfg.n_on
            {
                self.eval_row(Phase::Online)?;
                since_eval = 0;
            }
        }
        self.eval_row(Phase::Online)
    }
}

/// Policy losses share one implementation; the batch mode picks what the
/// critics read, so this just dispatches on it.
fn aawr_policy_loss_any_mode(
    batch: &Batch,
    policy: &MlpParams,
    q: &MlpParams,
    v: &MlpParams,
    beta: f64,
    weight_clip: f64,
) -> Result<crate::losses::PolicyLossOutput> {
    match batch.mode {
        CriticMode::Privileged => aawr_policy_loss(batch, policy, q, v, beta, weight_clip),
        CriticMode::Symmetric => {
            crate::losses::sawr_policy_loss(batch, policy, q, v, beta, weight_clip)
        }
    }
}

/// Rolls one episode by sampling actions from the policy's categorical
/// distribution over the window. Training-time collection stores privileged
/// fields and hidden states in the records.
pub fn collect_episode(
    policy: &MlpParams,
    entry: &EnvCatalogEntry,
    k: usize,
    rng: &mut impl Rng,
    episode_id: u64,
) -> Result<Episode> {
    let sim = Simulator::new(&entry.spec, k);
    let n_obs = entry.spec.n_observations();
    let n_actions = entry.spec.n_actions();
    let (mut st, mut obs) = sim.reset(rng);
    let mut records = Vec::new();
    let mut idx = Vec::with_capacity(2 * k);
    let mut t = 0u32;
    while !st.done() {
        st.z.active_indices(n_obs, n_actions, &mut idx);
        let probs = policy_probs(policy, &idx)?;
        let a = sample_categorical(rng, &probs);
        let s = st.state;
        let out = sim.step(&mut st, a, rng);
        records.push(Transition {
            episode_id,
            t,
            o: obs,
            o_p: entry.privileged_row(s).to_vec(),
            a,
            r: out.reward,
            o_next: out.obs,
            o_p_next: entry.privileged_row(st.state).to_vec(),
            done: out.terminated,
            s: Some(s),
            s_next: Some(st.state),
        });
        obs = out.obs;
        t += 1;
    }
    Ok(Episode {
        id: episode_id,
        records,
    })
}

/// Empirical action distribution per distinct window in a buffer, for
/// comparing a trained policy against the data it cloned.
pub fn behavior_histogram(buf: &ReplayBuffer) -> HashMap<AgentState, Vec<f64>> {
    let mut counts: HashMap<AgentState, Vec<f64>> = HashMap::new();
    for i in 0..buf.len() {
        let (rec, z) = buf.step_at(i);
        counts
            .entry(z.clone())
            .or_insert_with(|| vec![0.0; buf.n_actions])
            [rec.a] += 1.0;
    }
    for row in counts.values_mut() {
        let total: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= total;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{entry, scripted_demo_rollouts};
    use crate::oracle::total_variation;

    fn tiger_buffer(n_eps: usize, seed: u64) -> (EnvCatalogEntry, ReplayBuffer) {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, n_eps, seed, true);
        let mut buf = ReplayBuffer::new(&e, e.default_k, usize::MAX);
        for ep in &eps {
            buf.push_episode(ep).unwrap();
        }
        (e, buf)
    }

    #[test]
    fn ingest_and_export_round_trip() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 20, 7, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        crate::envs::write_records(&path, &eps).unwrap();
        let buf = ingest_demos(&path, &e, e.default_k, usize::MAX).unwrap();
        assert_eq!(buf.n_episodes(), 20);
        let out = dir.path().join("export.jsonl");
        export_buffer(&buf, &out).unwrap();
        let buf2 = ingest_demos(&out, &e, e.default_k, usize::MAX).unwrap();
        assert_eq!(buf.episodes(), buf2.episodes());
        // And the exported bytes are exactly the original file's bytes.
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&out).unwrap()
        );
    }

    #[test]
    fn windows_match_a_fresh_fold_of_the_records() {
        let (e, buf) = tiger_buffer(5, 3);
        let n_obs = e.spec.n_observations();
        let n_actions = e.spec.n_actions();
        for ep in buf.episodes() {
            let mut z = AgentState::initial(e.default_k, ep.records[0].o);
            let mut start = 0;
            // Locate this episode's global offset.
            for i in 0..buf.len() {
                if buf.step_at(i).0.episode_id == ep.id {
                    start = i;
                    break;
                }
            }
            for (j, rec) in ep.records.iter().enumerate() {
                let (stored_rec, stored_z) = buf.step_at(start + j);
                assert_eq!(stored_rec, rec);
                assert_eq!(stored_z, &z);
                let mut want = Vec::new();
                z.active_indices(n_obs, n_actions, &mut want);
                z = z.update(rec.a, rec.o_next);
            }
        }
    }

    #[test]
    fn push_episode_rejects_malformed_chains() {
        let (e, buf) = tiger_buffer(1, 11);
        let ep = &buf.episodes()[0];
        let fresh = || ReplayBuffer::new(&e, e.default_k, usize::MAX);

        if ep.records.len() >= 2 {
            let mut broken = ep.clone();
            broken.records[1].o = (broken.records[0].o_next + 1) % e.spec.n_observations();
            assert!(fresh().push_episode(&broken).is_err());

            let mut early_done = ep.clone();
            early_done.records[0].done = true;
            assert!(fresh().push_episode(&early_done).is_err());
        }

        let mut bad_op = ep.clone();
        bad_op.records[0].o_p = vec![0.0];
        assert!(fresh().push_episode(&bad_op).is_err());

        let mut bad_action = ep.clone();
        bad_action.records[0].a = e.spec.n_actions();
        assert!(fresh().push_episode(&bad_action).is_err());
    }

    #[test]
    fn eviction_drops_whole_oldest_episodes() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 30, 19, false);
        let mut buf = ReplayBuffer::new(&e, e.default_k, 200);
        for ep in &eps {
            buf.push_episode(ep).unwrap();
        }
        assert!(buf.len() <= 200 || buf.n_episodes() == 1);
        // The newest episode survives and stored episodes are contiguous
        // suffixes of the pushed sequence.
        let stored = buf.episodes();
        let want: Vec<_> = eps[eps.len() - stored.len()..].to_vec();
        assert_eq!(stored, want);
        // done flags only ever sit on final records.
        for i in 0..buf.len() {
            let (rec, _) = buf.step_at(i);
            assert!(rec.t as usize
                <= stored.iter().map(|e| e.records.len()).max().unwrap());
        }
        // Success bookkeeping matches a direct recount.
        let direct: usize = stored
            .iter()
            .filter(|ep| ep.total_reward() > e.success_floor)
            .map(|ep| ep.records.len())
            .sum();
        assert_eq!(buf.success_len(), direct);
    }

    #[test]
    fn success_sampling_only_hits_successful_episodes() {
        let (e, buf) = tiger_buffer(40, 23);
        let mut rng = rng_from(5);
        for _ in 0..500 {
            let i = buf.sample_success_index(&mut rng);
            let (rec, _) = buf.step_at(i);
            let ep = buf
                .episodes()
                .into_iter()
                .find(|ep| ep.id == rec.episode_id)
                .unwrap();
            assert!(ep.total_reward() > e.success_floor);
        }
    }

    #[test]
    fn returns_to_go_align_with_episodes() {
        let (_e, buf) = tiger_buffer(3, 29);
        let gs = buf.returns_to_go(0.5);
        assert_eq!(gs.len(), buf.len());
        let mut i = 0;
        for ep in buf.episodes() {
            let rs: Vec<f64> = ep.records.iter().map(|r| r.r).collect();
            let want = crate::losses::returns_to_go(&rs, 0.5);
            for w in want {
                assert!((gs[i] - w).abs() < 1e-12);
                i += 1;
            }
        }
    }

    fn small_cfg(e: &EnvCatalogEntry) -> TrainingConfig {
        TrainingConfig {
            k: e.default_k,
            batch_size: 16,
            hidden: vec![16],
            n_off: 40,
            n_on: 0,
            seed: 9,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn offline_batches_come_from_d_off_online_is_half_and_half() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 10, 31, true);
        let mut cfg = small_cfg(&e);
        cfg.batch_size = 32;
        let mut t = Trainer::new(&e, cfg, Method::Aawr, EvalSettings::default()).unwrap();
        t.load_demos(&eps).unwrap();
        let (_, picks) = t.sample_batch(false).unwrap();
        assert!(picks.iter().all(|&(on, _)| !on));

        // Fill D_on with one collected episode, then check the exact split.
        let ep = collect_episode(&t.nets.policy, &t.entry, t.cfg.k, &mut t.rng, 0).unwrap();
        t.d_on.push_episode(&ep).unwrap();
        for _ in 0..50 {
            let (batch, picks) = t.sample_batch(true).unwrap();
            assert_eq!(batch.len(), 32);
            assert_eq!(picks.iter().filter(|&&(on, _)| !on).count(), 16);
            assert_eq!(picks.iter().filter(|&&(on, _)| on).count(), 16);
            for &(on, i) in &picks {
                let buf = if on { &t.d_on } else { &t.d_off };
                assert!(i < buf.len());
            }
        }
    }

    #[test]
    fn zero_budget_run_keeps_initialization_and_logs_only_init() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 5, 37, true);
        let mut cfg = small_cfg(&e);
        cfg.n_off = 0;
        cfg.n_on = 0;
        let mut t = Trainer::new(
            &e,
            cfg.clone(),
            Method::Aawr,
            EvalSettings {
                episodes: 5,
                ..EvalSettings::default()
            },
        )
        .unwrap();
        t.load_demos(&eps).unwrap();
        let before = t.nets.clone();
        t.offline_phase().unwrap();
        t.online_phase().unwrap();
        assert_eq!(t.nets, before);
        assert_eq!(t.metrics.len(), 1);
        assert_eq!(t.metrics[0].phase, Phase::Init);
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_metrics_bytes() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 8, 41, true);
        let mut cfg = small_cfg(&e);
        cfg.n_off = 30;
        cfg.n_on = 40;
        let eval = EvalSettings {
            cadence: 10,
            episodes: 4,
            greedy: true,
        };
        let run = || {
            let mut t = Trainer::new(&e, cfg.clone(), Method::Aawr, eval).unwrap();
            t.load_demos(&eps).unwrap();
            t.offline_phase().unwrap();
            t.online_phase().unwrap();
            metrics_to_csv(&t.metrics)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.starts_with(METRICS_HEADER));
    }

    #[test]
    fn metrics_file_round_trips_and_steps_are_monotone() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 8, 43, true);
        let mut cfg = small_cfg(&e);
        cfg.n_off = 25;
        cfg.n_on = 30;
        let eval = EvalSettings {
            cadence: 10,
            episodes: 3,
            greedy: true,
        };
        let mut t = Trainer::new(&e, cfg, Method::Sawr, eval).unwrap();
        t.load_demos(&eps).unwrap();
        t.offline_phase().unwrap();
        t.online_phase().unwrap();

        // Phases appear in order with nondecreasing step counters.
        for w in t.metrics.windows(2) {
            assert!(w[0].grad_step <= w[1].grad_step);
            assert!(w[0].env_step <= w[1].env_step);
        }
        for row in &t.metrics {
            assert!((0.0..=1.0).contains(&row.success_rate));
        }
        assert_eq!(t.metrics[0].phase, Phase::Init);
        assert_eq!(t.metrics.last().unwrap().phase, Phase::Online);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &t.metrics).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, t.metrics);
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let e = entry("tiger").unwrap();
        let eps = scripted_demo_rollouts(&e, 5, 47, true);
        for method in [Method::Aawr, Method::Bc] {
            let mut cfg = small_cfg(&e);
            cfg.n_off = 10;
            let mut t = Trainer::new(
                &e,
                cfg,
                method,
                EvalSettings {
                    episodes: 2,
                    cadence: 0,
                    greedy: true,
                },
            )
            .unwrap();
            t.load_demos(&eps).unwrap();
            t.offline_phase().unwrap();
            let ckpt = t.checkpoint();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.bin");
            write_checkpoint(&path, &ckpt).unwrap();
            let back = read_checkpoint(&path).unwrap();
            assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_ignores_poisoning() {
        let e = entry("tiger").unwrap();
        let cfg = small_cfg(&e);
        let t = Trainer::new(&e, cfg, Method::Sawr, EvalSettings::default()).unwrap();
        let a = evaluate(t.policy(), &e, t.cfg.k, 40, 99, true).unwrap();
        let b = evaluate(t.policy(), &e, t.cfg.k, 40, 99, true).unwrap();
        assert_eq!(a, b);
        let visible =
            evaluate_with(t.policy(), &e, t.cfg.k, 40, 99, true, PrivilegedFields::Visible)
                .unwrap();
        assert_eq!(a, visible);
        // Sampled selection is also reproducible under a fixed seed.
        let s1 = evaluate(t.policy(), &e, t.cfg.k, 40, 99, false).unwrap();
        let s2 = evaluate(t.policy(), &e, t.cfg.k, 40, 99, false).unwrap();
        assert_eq!(s1, s2);
        // One-episode evaluation works and is deterministic.
        let one = evaluate(t.policy(), &e, t.cfg.k, 1, 5, true).unwrap();
        assert_eq!(one, evaluate(t.policy(), &e, t.cfg.k, 1, 5, true).unwrap());
    }

    #[test]
    fn poisoned_fields_are_nan_and_visible_fields_are_real() {
        let e = entry("tiger").unwrap();
        let mut rng = rng_from(1);
        let mut env = DeployedEnv::new(&e, e.default_k, PrivilegedFields::Poisoned);
        let (_, o_p) = env.reset(&mut rng);
        assert_eq!(o_p.len(), e.privileged_dim);
        assert!(o_p.iter().all(|v| v.is_nan()));
        let step = env.step(0, &mut rng);
        assert!(step.o_p.iter().all(|v| v.is_nan()));

        let mut rng = rng_from(1);
        let mut env = DeployedEnv::new(&e, e.default_k, PrivilegedFields::Visible);
        let (_, o_p) = env.reset(&mut rng);
        assert!(o_p.iter().all(|v| v.is_finite()));
    }

    /// With an enormous temperature every advantage weight is 1, so the
    /// policy regresses onto the behavior distribution at each window.
    #[test]
    fn huge_beta_offline_run_clones_the_behavior_histogram() {
        let e = entry("tiger").unwrap();
        // Ten one-step episodes sharing the same initial window: eight
        // listens, two left-door opens.
        let silence = 0usize;
        let mut eps = Vec::new();
        for i in 0..10u64 {
            let a = if i < 8 { 0 } else { 1 };
            eps.push(Episode {
                id: i,
                records: vec![Transition {
                    episode_id: i,
                    t: 0,
                    o: silence,
                    o_p: e.privileged_row(0).to_vec(),
                    a,
                    r: 0.0,
                    o_next: silence,
                    o_p_next: e.privileged_row(0).to_vec(),
                    done: false,
                    s: Some(0),
                    s_next: Some(0),
                }],
            });
        }
        let cfg = TrainingConfig {
            k: e.default_k,
            batch_size: 10,
            hidden: vec![16],
            n_off: 4000,
            n_on: 0,
            beta: 1e9,
            lr_actor: 3e-3,
            lr_critic: 1e-3,
            seed: 13,
            ..TrainingConfig::default()
        };
        let mut t = Trainer::new(
            &e,
            cfg,
            Method::Aawr,
            EvalSettings {
                cadence: 0,
                episodes: 2,
                greedy: true,
            },
        )
        .unwrap();
        t.load_demos(&eps).unwrap();
        t.offline_phase().unwrap();

        let hist = behavior_histogram(&t.d_off);
        let z0 = AgentState::initial(e.default_k, silence);
        let want = &hist[&z0];
        assert!((want[0] - 0.8).abs() < 1e-12);
        let mut idx = Vec::new();
        z0.active_indices(e.spec.n_observations(), e.spec.n_actions(), &mut idx);
        let got = policy_probs(t.policy(), &idx).unwrap();
        assert!(
            total_variation(&got, want) < 0.05,
            "cloned distribution {got:?} vs behavior {want:?}"
        );
    }

    #[test]
    fn bc_requires_a_successful_episode() {
        let e = entry("tiger").unwrap();
        // One failing episode: open the wrong door immediately.
        let eps = scripted_demo_rollouts(&e, 30, 51, true);
        let failure = eps
            .iter()
            .find(|ep| ep.total_reward() <= e.success_floor)
            .expect("some demo episode fails")
            .clone();
        let mut t = Trainer::new(&e, small_cfg(&e), Method::Bc, EvalSettings::default()).unwrap();
        t.load_demos(&[failure]).unwrap();
        assert!(t.offline_phase().is_err());
    }

    #[test]
    fn method_strings_round_trip() {
        for m in [Method::Aawr, Method::Sawr, Method::Bc] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("awr".parse::<Method>().is_err());
    }

    #[test]
    #[ignore]
    fn probe_grid() {
        use crate::nn::{forward, Input};
        let entry = crate::envs::hidden_target_grid(5, 5, 1).unwrap();
        let eps = crate::envs::scripted_demo_rollouts(&entry, 100, 7, true);
        let mut cfg = TrainingConfig::default();
        cfg.seed = 0;
        cfg.k = std::env::var("PK").map_or(2, |s| s.parse().unwrap());
        cfg.batch_size = 256;
        cfg.hidden = vec![64];
        cfg.beta = std::env::var("PBETA").map_or(0.02, |s| s.parse().unwrap());
        cfg.gamma = std::env::var("PGAMMA").map_or(0.95, |s| s.parse().unwrap());
        cfg.weight_clip = std::env::var("PCLIP").map_or(100.0, |s| s.parse().unwrap());
        cfg.lr_actor = std::env::var("PLRA").map_or(3e-4, |s| s.parse().unwrap());
        cfg.tau = std::env::var("PTAU").map_or(cfg.tau, |s| s.parse().unwrap());
        cfg.lr_critic = 3e-4;
        cfg.n_off = 2000;
        cfg.n_on = 0;
        let n_obs = entry.spec.n_observations();
        let n_act = entry.spec.n_actions();
        let k = cfg.k;
        let eval = EvalSettings {
            episodes: 100,
            cadence: 0,
            greedy: true,
        };
        let mut t = Trainer::new(&entry, cfg, Method::Aawr, eval).unwrap();
        t.load_demos(&eps).unwrap();

        // Deep window: clean serpentine prefix of 7 moves, agent at (2,1)
        // heading left, target never seen. obs = cell * 2.
        let mut z_deep = AgentState::initial(k, 0);
        for (a, cell) in [(3usize, 1usize), (3, 2), (3, 3), (3, 4), (1, 9), (2, 8), (2, 7)] {
            z_deep = z_deep.update(a, cell * 2);
        }

        let probe = |t: &Trainer, label: &str| {
            // Start window: agent at cell 0, target elsewhere (obs 0).
            let z0 = AgentState::initial(k, 0);
            let mut z_idx = Vec::new();
            z0.active_indices(n_obs, n_act, &mut z_idx);
            let pi = policy_probs(&t.nets.policy, &z_idx).unwrap();
            // Same window standing on the target (obs 1 = cell 0, rel 1).
            let zt = AgentState::initial(k, 1);
            let mut zt_idx = Vec::new();
            zt.active_indices(n_obs, n_act, &mut zt_idx);
            let pit = policy_probs(&t.nets.policy, &zt_idx).unwrap();
            let mut zd_idx = Vec::new();
            z_deep.active_indices(n_obs, n_act, &mut zd_idx);
            let pid = policy_probs(&t.nets.policy, &zd_idx).unwrap();
            let c = t.nets.critics.as_ref().unwrap();
            let adv = |idx: &[usize], target: usize| {
                let mut o_p = vec![0.0; 26];
                o_p[target] = 1.0;
                let input = [Input::OneHotDense { idx, tail: &o_p }];
                let (q_out, _) = forward(&c.q, &input).unwrap();
                let (v_out, _) = forward(&c.v, &input).unwrap();
                let a: Vec<f64> = q_out[0].iter().map(|q| q - v_out[0][0]).collect();
                (v_out[0][0], a)
            };
            let mut line = String::new();
            for target in [24usize, 5] {
                let (v, a) = adv(&z_idx, target);
                line.push_str(&format!(
                    " | t{target} V={v:+.3} A=[{:+.2} {:+.2} {:+.2} {:+.2} {:+.2}]",
                    a[0], a[1], a[2], a[3], a[4]
                ));
            }
            println!(
                "{label}: pi(z0)=[{:.2} {:.2} {:.2} {:.2} {:.2}] pi(grab|on)={:.2}{line}",
                pi[0], pi[1], pi[2], pi[3], pi[4], pit[4]
            );
            // Deep window at (2,1): sweep says left (2); grab is the dawdle.
            let (vd24, ad24) = adv(&zd_idx, 24);
            let (vd6, ad6) = adv(&zd_idx, 6);
            println!(
                "           pi(deep)=[{:.2} {:.2} {:.2} {:.2} {:.2}] | t24 V={vd24:+.3} A=[{:+.2} {:+.2} {:+.2} {:+.2} {:+.2}] | t6 V={vd6:+.3} A=[{:+.2} {:+.2} {:+.2} {:+.2} {:+.2}]",
                pid[0], pid[1], pid[2], pid[3], pid[4],
                ad24[0], ad24[1], ad24[2], ad24[3], ad24[4],
                ad6[0], ad6[1], ad6[2], ad6[3], ad6[4]
            );
        };

        let trace = |t: &Trainer, n: usize| {
            // Greedy rollouts, printing the visited cells.
            for ep in 0..n {
                let mut env = DeployedEnv::new(&entry, k, PrivilegedFields::Poisoned);
                let mut rng = rng_from(derive(4242, ep as u64));
                let (obs, _) = env.reset(&mut rng);
                let mut z = AgentState::initial(k, obs);
                let mut idx = Vec::new();
                let mut cells = vec![obs / 2];
                let mut acts = Vec::new();
                loop {
                    z.active_indices(n_obs, n_act, &mut idx);
                    let probs = policy_probs(&t.nets.policy, &idx).unwrap();
                    let a = greedy_action(&probs);
                    acts.push(a);
                    let step = env.step(a, &mut rng);
                    if step.obs < 50 {
                        cells.push(step.obs / 2);
                    }
                    z = z.update(a, step.obs);
                    if step.terminated || step.truncated {
                        println!(
                            "  trace r={:+.0} cells={cells:?} acts={acts:?}",
                            step.reward
                        );
                        break;
                    }
                }
            }
        };

        probe(&t, "init     ");
        for chunk in 1..=10u32 {
            t.offline_phase().unwrap();
            let rate = t.metrics.last().unwrap().success_rate;
            let sampled = evaluate(&t.nets.policy, &entry, k, 100, 9999, false)
                .unwrap()
                .success_rate;
            probe(&t, &format!("off {:5}", chunk * 2000));
            println!("          success greedy {rate:.2} sampled {sampled:.2}");
        }
        trace(&t, 3);
        for chunk in 1..=5u32 {
            t.cfg.n_on = chunk as u64 * 4000;
            t.online_phase().unwrap();
            let rate = t.metrics.last().unwrap().success_rate;
            let sampled = evaluate(&t.nets.policy, &entry, k, 100, 9999, false)
                .unwrap()
                .success_rate;
            probe(&t, &format!("on  {:5}", chunk * 4000));
            println!("          success greedy {rate:.2} sampled {sampled:.2}");
        }
        trace(&t, 3);
    }

    #[test]
    #[ignore]
    fn profile_breakdown() {
        use crate::losses::{aawr_policy_loss, q_td_loss, v_expectile_loss};
        use std::time::Instant;
        let entry = crate::envs::hidden_target_grid(5, 5, 1).unwrap();
        let eps = crate::envs::scripted_demo_rollouts(&entry, 100, 7, true);
        let cfg = TrainingConfig::default();
        let mut tr = Trainer::new(
            &entry,
            cfg,
            Method::Aawr,
            EvalSettings {
                cadence: 0,
                episodes: 1,
                greedy: true,
            },
        )
        .unwrap();
        tr.load_demos(&eps).unwrap();

        let n = 500u32;
        let t0 = Instant::now();
        for _ in 0..n {
            let _ = tr.sample_batch(false).unwrap();
        }
        eprintln!("sample_batch     {:?}", t0.elapsed() / n);

        let (batch, _) = tr.sample_batch(false).unwrap();
        let (q, vt, v, qt, pol) = {
            let c = tr.nets.critics.as_ref().unwrap();
            (
                c.q.clone(),
                c.v_target.clone(),
                c.v.clone(),
                c.q_target.clone(),
                tr.nets.policy.clone(),
            )
        };
        let t0 = Instant::now();
        for _ in 0..n {
            let _ = q_td_loss(&batch, &q, &vt, 0.97).unwrap();
        }
        eprintln!("q_td_loss        {:?}", t0.elapsed() / n);

        {
            use crate::nn::{backward, forward, Input};
            let inputs: Vec<Input> = (0..batch.len()).map(|i| batch.critic_input(i)).collect();
            let t0 = Instant::now();
            for _ in 0..n {
                let _ = forward(&q, &inputs).unwrap();
            }
            eprintln!("  q forward      {:?}", t0.elapsed() / n);
            let (_, cache) = forward(&q, &inputs).unwrap();
            let og: Vec<Vec<f64>> = (0..batch.len()).map(|_| vec![1.0; q.out_dim()]).collect();
            let t0 = Instant::now();
            for _ in 0..n {
                let _ = backward(&q, &cache, &og).unwrap();
            }
            eprintln!("  q backward     {:?}", t0.elapsed() / n);
            let pol_inputs: Vec<Input> = (0..batch.len()).map(|i| batch.policy_input(i)).collect();
            let t0 = Instant::now();
            for _ in 0..n {
                let _ = forward(&pol, &pol_inputs).unwrap();
            }
            eprintln!("  pol forward    {:?}", t0.elapsed() / n);
        }
        let t0 = Instant::now();
        for _ in 0..n {
            let _ = v_expectile_loss(&batch, &v, &qt, 0.7).unwrap();
        }
        eprintln!("v_expectile_loss {:?}", t0.elapsed() / n);
        let t0 = Instant::now();
        for _ in 0..n {
            let _ = aawr_policy_loss(&batch, &pol, &q, &v, 10.0, 100.0).unwrap();
        }
        eprintln!("aawr_policy_loss {:?}", t0.elapsed() / n);
        let t0 = Instant::now();
        for _ in 0..n {
            tr.gradient_step(false, &CriticSource::Learned).unwrap();
        }
        eprintln!("gradient_step    {:?}", t0.elapsed() / n);
    }
}
