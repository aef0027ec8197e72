//! Synchronous simulation loop, ground-truth metrics and checkpoints.
//!
//! Each step runs the same phases in order: observe (peer beliefs advance),
//! act (ε-greedy move along the agent's own circle), record visits,
//! communicate, learn, re-estimate transition matrices on cadence, log.
//! Agents learn only from their [`AgentView`]; the ground-truth visit counts
//! kept here feed the metrics and nothing else.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::comms::{detect_with, exchange, communication_count, Adjacency, ContactEvent, ContactHistory};
use crate::history::HistoryError;
use crate::learner::{
    compute_reward, discretize_state, epsilon_at, q_update, select_action, Action, LearnerParams,
    ObservedState, ParamError,
};
use crate::metrics::{HeatmapSnapshot, LogRow, RunLog, TransientLog, TransientRow};
use crate::policy::{estimate_transitions, stationary_policy, PolicyError, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::view::AgentView;
use crate::world::{apply_mutation, AgentId, CircleId, NodeId, PatrolWorld, WorldError, WorldMutation};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("invalid parameters: {0}")]
    Config(String),
    #[error("mutation does not apply to the checkpointed world: {0}")]
    IncompatibleMutation(WorldError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// w: transition-matrix estimation window.
    pub history_window: usize,
    /// w_f: frequency estimation window.
    pub frequency_window: usize,
    pub recompute_every: u64,
    pub log_every: u64,
    pub comm_window: u64,
    pub snapshot_steps: Vec<u64>,
    pub heatmap_window: usize,
    pub damping: f64,
    pub communication: bool,
    pub learner: LearnerParams,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            history_window: 1000,
            frequency_window: 100,
            recompute_every: 100,
            log_every: 1000,
            comm_window: 1000,
            snapshot_steps: vec![0, 5_000, 50_000, 100_000, 300_000, 500_000, 1_000_000],
            heatmap_window: 1000,
            damping: 0.01,
            communication: true,
            learner: LearnerParams::default(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.learner.validate()?;
        if self.frequency_window == 0 || self.history_window < self.frequency_window {
            return Err(EngineError::Config(format!(
                "need w >= w_f >= 1, got w = {}, w_f = {}",
                self.history_window, self.frequency_window
            )));
        }
        if self.recompute_every == 0 || self.log_every == 0 || self.comm_window == 0 {
            return Err(EngineError::Config(
                "recompute_every, log_every and comm_window must be positive".into(),
            ));
        }
        if self.heatmap_window == 0 || self.heatmap_window > self.history_window {
            return Err(EngineError::Config(
                "heatmap_window must be in 1..=history_window".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(EngineError::Config("damping must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The physical side of an agent: where it is and its private random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBody {
    pub id: AgentId,
    pub circle: CircleId,
    pub position: NodeId,
    rng: ChaCha8Rng,
    observed: ObservedState,
}

/// Every agent's true visits over the last `w_f` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruth {
    window: usize,
    first_step: u64,
    recent: VecDeque<(u64, Vec<NodeId>)>,
    counts: BTreeMap<NodeId, u64>,
}

impl GroundTruth {
    fn new(window: usize, first_step: u64) -> Self {
        GroundTruth {
            window,
            first_step,
            recent: VecDeque::with_capacity(window + 1),
            counts: BTreeMap::new(),
        }
    }

    fn record(&mut self, step: u64, visits: Vec<NodeId>) {
        for &n in &visits {
            *self.counts.entry(n).or_insert(0) += 1;
        }
        self.recent.push_back((step, visits));
        while self.recent.len() > self.window {
            if let Some((_, old)) = self.recent.pop_front() {
                for n in old {
                    if let Some(c) = self.counts.get_mut(&n) {
                        *c -= 1;
                    }
                }
            }
        }
    }

    fn frequency(&self, node: NodeId, now: u64) -> f64 {
        let elapsed = (now.saturating_sub(self.first_step) + 1).min(self.window as u64);
        let count = self.counts.get(&node).copied().unwrap_or(0);
        100.0 * count as f64 / elapsed as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Mode {
    epsilon_override: Option<f64>,
    learning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    world: PatrolWorld,
    params: SimParams,
    seed: u64,
    step: u64,
    bodies: Vec<AgentBody>,
    views: Vec<AgentView>,
    rng: ChaCha8Rng,
    truth: GroundTruth,
    contacts: ContactHistory,
    log: RunLog,
    transient: Option<TransientLog>,
    snapshot_steps: BTreeSet<u64>,
    mode: Mode,
    #[serde(skip)]
    adjacency: Option<Adjacency>,
}

impl Simulation {
    /// Places agents uniformly at random on their circles and records step 0.
    pub fn new(world: PatrolWorld, params: SimParams, seed: u64) -> Result<Self, EngineError> {
        params.validate()?;
        world.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bodies = Vec::new();
        let mut views = Vec::new();
        for (i, a) in world.agents().iter().enumerate() {
            let circle = world.circle(a.circle)?;
            let position = circle.nodes[rng.gen_range(0..circle.len())];
            let mut agent_rng = ChaCha8Rng::seed_from_u64(seed);
            agent_rng.set_stream(i as u64 + 1);
            bodies.push(AgentBody {
                id: a.id,
                circle: a.circle,
                position,
                rng: agent_rng,
                observed: ObservedState::from_index(0),
            });
            views.push(AgentView::new(
                &world,
                a.id,
                params.history_window,
                params.frequency_window,
            )?);
        }
        let mut sim = Simulation {
            truth: GroundTruth::new(params.frequency_window, 0),
            contacts: ContactHistory::new(params.comm_window),
            log: RunLog::new(world.nodes().collect()),
            snapshot_steps: params.snapshot_steps.iter().copied().collect(),
            adjacency: Some(Adjacency::new(&world)),
            world,
            params,
            seed,
            step: 0,
            bodies,
            views,
            rng,
            transient: None,
            mode: Mode {
                epsilon_override: None,
                learning: true,
            },
        };
        for (body, view) in sim.bodies.iter().zip(sim.views.iter_mut()) {
            view.history.record_visit(0, body.position)?;
            view.record_beliefs(0);
        }
        sim.truth
            .record(0, sim.bodies.iter().map(|b| b.position).collect());
        sim.communicate(0);
        sim.observe_all()?;
        sim.record_metrics();
        Ok(sim)
    }

    pub fn world(&self) -> &PatrolWorld {
        &self.world
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn views(&self) -> &[AgentView] {
        &self.views
    }

    pub fn bodies(&self) -> &[AgentBody] {
        &self.bodies
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn transient(&self) -> Option<&TransientLog> {
        self.transient.as_ref()
    }

    pub fn contacts(&self) -> &ContactHistory {
        &self.contacts
    }

    pub fn positions(&self) -> Vec<(AgentId, NodeId)> {
        self.bodies.iter().map(|b| (b.id, b.position)).collect()
    }

    /// Replaces the current observed state of every agent; used by harnesses
    /// that place agents by hand.
    pub fn place(&mut self, positions: &[(AgentId, NodeId)]) -> Result<(), EngineError> {
        if self.step != 0 {
            return Err(EngineError::Config("agents can only be placed at step 0".into()));
        }
        for &(id, node) in positions {
            let i = self
                .bodies
                .iter()
                .position(|b| b.id == id)
                .ok_or_else(|| EngineError::Config(format!("unknown agent {id}")))?;
            let circle = self.world.circle(self.bodies[i].circle)?;
            if !circle.contains(node) {
                return Err(WorldError::NodeNotOnCircle {
                    circle: circle.id,
                    node,
                }
                .into());
            }
            self.bodies[i].position = node;
        }
        // Rebuild step-0 records around the new placement.
        for (body, view) in self.bodies.iter().zip(self.views.iter_mut()) {
            *view = AgentView::new(
                &self.world,
                body.id,
                self.params.history_window,
                self.params.frequency_window,
            )?;
            view.history.record_visit(0, body.position)?;
            view.record_beliefs(0);
        }
        self.truth = GroundTruth::new(self.params.frequency_window, 0);
        self.truth
            .record(0, self.bodies.iter().map(|b| b.position).collect());
        self.contacts = ContactHistory::new(self.params.comm_window);
        self.communicate(0);
        self.observe_all()?;
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.mode
            .epsilon_override
            .unwrap_or_else(|| epsilon_at(self.step, &self.params.learner))
    }

    /// f_i: all agents' visits to `node` over the last `w_f` steps, percent.
    pub fn true_frequency(&self, node: NodeId) -> f64 {
        self.truth.frequency(node, self.step)
    }

    /// I_i = max(0, F_i − f_i).
    pub fn insufficiency(&self, node: NodeId) -> f64 {
        (self.world.required(node) - self.true_frequency(node)).max(0.0)
    }

    pub fn mean_insufficiency(&self) -> f64 {
        let n = self.world.node_count() as f64;
        self.world.nodes().map(|i| self.insufficiency(i)).sum::<f64>() / n
    }

    pub fn communication_count(&self) -> u64 {
        communication_count(&self.contacts, self.step, self.params.comm_window)
    }

    /// Percent of each agent's last `heatmap_window` steps spent at each node.
    pub fn heatmap(&self) -> HeatmapSnapshot {
        let nodes: Vec<NodeId> = self.world.nodes().collect();
        let window = self.params.heatmap_window;
        let frequency = self
            .views
            .iter()
            .map(|v| {
                nodes
                    .iter()
                    .map(|&n| crate::history::windowed_frequency(&v.history, n, self.step, window))
                    .collect()
            })
            .collect();
        HeatmapSnapshot {
            step: self.step,
            window,
            required: nodes.iter().map(|&n| self.world.required(n)).collect(),
            nodes,
            agents: self.bodies.iter().map(|b| b.id).collect(),
            frequency,
        }
    }

    fn adjacency(&mut self) -> &Adjacency {
        if self.adjacency.is_none() {
            self.adjacency = Some(Adjacency::new(&self.world));
        }
        self.adjacency.as_ref().unwrap()
    }

    fn communicate(&mut self, step: u64) -> Vec<ContactEvent> {
        let events = if self.params.communication {
            let positions = self.positions();
            detect_with(self.adjacency(), &positions, step)
        } else {
            Vec::new()
        };
        for e in &events {
            exchange(e, &mut self.views);
        }
        self.contacts.record(step, &events);
        events
    }

    fn observe_all(&mut self) -> Result<(), EngineError> {
        let edges = self.params.learner.bins;
        for (body, view) in self.bodies.iter_mut().zip(&self.views) {
            body.observed = discretize_state(&self.world, view, body.position, self.step, &edges)?;
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<(), EngineError> {
        let t = self.step + 1;
        let epsilon = self.epsilon();
        let learner = self.params.learner;

        // observe: the state for this decision was computed at the end of the
        // previous step; beliefs about peers advance to t.
        for view in &mut self.views {
            view.advance_beliefs(t);
        }

        // act
        let mut taken: Vec<(ObservedState, Action)> = Vec::with_capacity(self.bodies.len());
        for (body, view) in self.bodies.iter_mut().zip(&self.views) {
            let action = select_action(&view.q, &body.observed, epsilon, &mut body.rng);
            body.position = self.world.circle(body.circle)?.step(body.position, action)?;
            taken.push((body.observed, action));
        }

        // record
        for (body, view) in self.bodies.iter().zip(self.views.iter_mut()) {
            view.history.record_visit(t, body.position)?;
        }
        self.truth
            .record(t, self.bodies.iter().map(|b| b.position).collect());

        // communicate
        self.communicate(t);

        // learn
        for ((body, view), (s, a)) in self.bodies.iter_mut().zip(self.views.iter_mut()).zip(taken) {
            let reward = compute_reward(&self.world, view, body.position, t, learner.reward);
            let next = discretize_state(&self.world, view, body.position, t, &learner.bins)?;
            if self.mode.learning {
                q_update(&mut view.q, &s, a, reward, &next, &learner);
            }
            body.observed = next;
        }

        // re-estimate policies
        let w = self.params.history_window as u64;
        if t >= w && (t - w) % self.params.recompute_every == 0 {
            for view in &mut self.views {
                let circle = self.world.circle(view.circle)?;
                view.transitions = estimate_transitions(&view.history, circle, self.params.history_window);
                view.stationary = Some(stationary_policy(
                    &view.transitions,
                    self.params.damping,
                    DEFAULT_TOLERANCE,
                    DEFAULT_MAX_ITER,
                )?);
            }
        }

        self.step = t;
        self.record_metrics();
        Ok(())
    }

    pub fn run_steps(&mut self, k: u64) -> Result<(), EngineError> {
        for _ in 0..k {
            self.step()?;
        }
        Ok(())
    }

    fn record_metrics(&mut self) {
        let t = self.step;
        if t > 0 && t % self.params.log_every == 0 {
            let nodes = self.log.nodes.clone();
            let difference: Vec<f64> = nodes
                .iter()
                .map(|&n| self.true_frequency(n) - self.world.required(n))
                .collect();
            let insufficiency: Vec<f64> = nodes.iter().map(|&n| self.insufficiency(n)).collect();
            self.log.rows.push(LogRow {
                step: t,
                mean_insufficiency: insufficiency.iter().sum::<f64>() / nodes.len() as f64,
                comm_count: self.communication_count(),
                epsilon: self.epsilon(),
                components: self.contacts.component_sizes(t).map(<[usize]>::to_vec).unwrap_or_default(),
                insufficiency,
                difference,
            });
        }
        if self.snapshot_steps.contains(&t) {
            let snap = self.heatmap();
            self.log.snapshots.push(snap);
        }
        if self.transient.as_ref().is_some_and(|tr| tr.wants(t)) {
            let difference = self
                .world
                .nodes()
                .map(|n| self.true_frequency(n) - self.world.required(n))
                .collect();
            let tr = self.transient.as_mut().unwrap();
            tr.rows.push(TransientRow {
                offset: t - tr.start_step,
                step: t,
                difference,
            });
        }
    }

    /// Applies world edits in place, re-keying every ring-indexed structure.
    pub fn apply_mutations(&mut self, mutations: &[WorldMutation]) -> Result<(), EngineError> {
        let mut world = self.world.clone();
        for m in mutations {
            world = apply_mutation(&world, m).map_err(EngineError::IncompatibleMutation)?;
        }
        for view in &mut self.views {
            view.remap(&world)?;
        }
        self.world = world;
        self.adjacency = Some(Adjacency::new(&self.world));
        self.observe_all()?;
        Ok(())
    }

    /// Starts a fresh log (and a transient series of `transient_len` steps)
    /// from the current step, with ε pinned and learning optionally frozen.
    pub fn begin_replay(&mut self, epsilon: f64, learning: bool, transient_len: u64, snapshot_offsets: &[u64]) {
        let nodes: Vec<NodeId> = self.world.nodes().collect();
        self.log = RunLog::new(nodes.clone());
        self.mode = Mode {
            epsilon_override: Some(epsilon),
            learning,
        };
        self.snapshot_steps = snapshot_offsets.iter().map(|o| self.step + o).collect();
        self.transient = Some(TransientLog::new(self.step, transient_len, nodes));
        self.record_metrics();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&self.world, &self.params),
            sim: self.clone(),
        }
    }

    /// SHA-256 over the serialized state; equal digests mean bit-identical state.
    pub fn digest(&self) -> String {
        let bytes = bincode::serialize(self).expect("simulation state serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

pub fn config_hash(world: &PatrolWorld, params: &SimParams) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(world).expect("world serializes"));
    h.update(serde_json::to_vec(params).expect("params serialize"));
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub sim: Simulation,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PATROLCK";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(bincode::serialize(self).expect("checkpoint serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let body = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| EngineError::Checkpoint("not a checkpoint file".into()))?;
        let mut cp: Checkpoint =
            bincode::deserialize(body).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(EngineError::Checkpoint(format!(
                "unsupported version {}",
                cp.version
            )));
        }
        let expected = config_hash(&cp.sim.world, &cp.sim.params);
        if expected != cp.config_hash {
            return Err(EngineError::Checkpoint("config hash mismatch".into()));
        }
        cp.sim.adjacency = Some(Adjacency::new(&cp.sim.world));
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn restore(&self) -> Simulation {
        let mut sim = self.sim.clone();
        sim.adjacency.get_or_insert_with(|| Adjacency::new(&self.sim.world));
        sim
    }
}

/// Runs `total_steps` from a fresh state.
pub fn run(
    world: PatrolWorld,
    params: SimParams,
    seed: u64,
    total_steps: u64,
) -> Result<(RunLog, Checkpoint), EngineError> {
    let mut sim = Simulation::new(world, params, seed)?;
    sim.run_steps(total_steps)?;
    Ok((sim.log.clone(), sim.checkpoint()))
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub log: RunLog,
    pub transient: TransientLog,
    pub checkpoint: Checkpoint,
}

pub const TRANSIENT_STEPS: u64 = 1000;
pub const REPLAY_SNAPSHOT_OFFSETS: [u64; 7] = [0, 100, 1_000, 5_000, 10_000, 50_000, 100_000];

/// Continues a checkpointed run against an edited world. ε is pinned at the
/// schedule's floor; `freeze_learning` additionally stops Q-updates.
pub fn replay_mutated(
    checkpoint: &Checkpoint,
    mutations: &[WorldMutation],
    steps: u64,
    freeze_learning: bool,
) -> Result<ReplayOutput, EngineError> {
    let mut sim = checkpoint.restore();
    sim.apply_mutations(mutations)?;
    let epsilon = sim.params.learner.epsilon_min;
    sim.begin_replay(epsilon, !freeze_learning, TRANSIENT_STEPS, &REPLAY_SNAPSHOT_OFFSETS);
    sim.run_steps(steps)?;
    Ok(ReplayOutput {
        log: sim.log.clone(),
        transient: sim.transient.clone().expect("replay records a transient"),
        checkpoint: sim.checkpoint(),
    })
}
