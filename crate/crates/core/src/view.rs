//! One agent's private knowledge. An [`AgentView`] holds only owned copies of
//! what the agent recorded or was told; nothing in it points at another
//! agent's state.

use serde::{Deserialize, Serialize};

use crate::comms::ExchangePayload;
use crate::history::VisitationHistory;
use crate::learner::QTable;
use crate::policy::{propagate_belief, BeliefWindow, PeerBelief, StationaryPolicy, TransitionMatrix};
use crate::world::{AgentId, CircleId, PatrolWorld, WorldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerKnowledge {
    pub circle: CircleId,
    pub belief: PeerBelief,
    /// Belief at each of the last `w_f` steps; exchanged positions are pinned in.
    pub window: BeliefWindow,
    pub last_payload: Option<ExchangePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub agent: AgentId,
    pub circle: CircleId,
    pub history: VisitationHistory,
    pub peers: Vec<PeerKnowledge>,
    pub q: QTable,
    pub transitions: TransitionMatrix,
    pub stationary: Option<StationaryPolicy>,
    frequency_window: usize,
}

impl AgentView {
    /// Fresh view: empty history, uniform priors about every peer.
    pub fn new(
        world: &PatrolWorld,
        agent: AgentId,
        history_window: usize,
        frequency_window: usize,
    ) -> Result<Self, WorldError> {
        let own = world
            .agents()
            .iter()
            .find(|a| a.id == agent)
            .ok_or(WorldError::NoAgents)?;
        let circle = world.circle(own.circle)?;
        let mut peers = Vec::new();
        for a in world.agents().iter().filter(|a| a.id != agent) {
            let pc = world.circle(a.circle)?;
            peers.push(PeerKnowledge {
                circle: a.circle,
                belief: PeerBelief::prior(a.id, pc),
                window: BeliefWindow::new(pc.nodes.clone(), frequency_window),
                last_payload: None,
            });
        }
        Ok(AgentView {
            agent,
            circle: own.circle,
            history: VisitationHistory::new(agent, history_window.max(frequency_window)),
            peers,
            q: QTable::default(),
            transitions: TransitionMatrix::uniform_neighbors(circle),
            stationary: None,
            frequency_window,
        })
    }

    pub fn frequency_window(&self) -> usize {
        self.frequency_window
    }

    pub fn peer(&self, id: AgentId) -> Option<&PeerKnowledge> {
        self.peers.iter().find(|p| p.belief.peer == id)
    }

    pub fn peer_mut(&mut self, id: AgentId) -> Option<&mut PeerKnowledge> {
        self.peers.iter_mut().find(|p| p.belief.peer == id)
    }

    /// Records the current belief about each peer as the estimate for `step`.
    pub fn record_beliefs(&mut self, step: u64) {
        for p in &mut self.peers {
            p.window.push(step, p.belief.distribution.clone());
        }
    }

    /// Moves every peer belief one step forward with that peer's last known
    /// transition matrix and records it for `step`.
    pub fn advance_beliefs(&mut self, step: u64) {
        for p in &mut self.peers {
            if let Ok(next) = propagate_belief(&p.belief, &p.belief.matrix) {
                p.belief = next;
            }
            p.window.push(step, p.belief.distribution.clone());
        }
    }

    /// Re-keys ring-indexed state onto an edited world.
    pub fn remap(&mut self, world: &PatrolWorld) -> Result<(), WorldError> {
        let own = world.circle(self.circle)?;
        self.transitions = self.transitions.remap_to(own);
        self.stationary = None;
        for p in &mut self.peers {
            let pc = world.circle(p.circle)?;
            let old_nodes = p.belief.nodes().to_vec();
            let mut dist = vec![0.0; pc.len()];
            for (n, &x) in old_nodes.iter().zip(&p.belief.distribution) {
                if let Some(j) = pc.position(*n) {
                    dist[j] = x;
                }
            }
            p.belief.distribution = dist;
            p.belief.matrix = p.belief.matrix.remap_to(pc);
            p.window.remap(&pc.nodes);
        }
        Ok(())
    }
}
