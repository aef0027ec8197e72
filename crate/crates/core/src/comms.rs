//! Proximity contacts and the history/policy exchange protocol.
//!
//! Two agents are in contact when they occupy the same node or nodes adjacent
//! in the union graph. Contacts chain: every connected component of the
//! step's proximity graph with two or more agents is one event, and all of
//! its members exchange with each other.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::policy::TransitionMatrix;
use crate::view::AgentView;
use crate::world::{union_neighbors, AgentId, NodeId, PatrolWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactLocation {
    SameNode,
    AdjacentNodes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub step: u64,
    /// Sorted, at least two.
    pub participants: Vec<AgentId>,
    pub location: ContactLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangePayload {
    pub sender: AgentId,
    pub step: u64,
    pub position: NodeId,
    /// Last `w_f` positions, oldest first, ending with `(step, position)`.
    pub recent: Vec<(u64, NodeId)>,
    pub matrix: TransitionMatrix,
}

impl ExchangePayload {
    pub fn from_view(view: &AgentView, step: u64) -> Option<Self> {
        let (last_step, position) = view.history.last()?;
        debug_assert_eq!(last_step, step);
        Some(ExchangePayload {
            sender: view.agent,
            step,
            position,
            recent: view.history.tail(view.frequency_window()),
            matrix: view.transitions.clone(),
        })
    }
}

/// Union-graph adjacency, precomputed for repeated contact detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency(BTreeMap<NodeId, BTreeSet<NodeId>>);

impl Adjacency {
    pub fn new(world: &PatrolWorld) -> Self {
        Adjacency(
            world
                .nodes()
                .map(|n| (n, union_neighbors(world, n).unwrap_or_default()))
                .collect(),
        )
    }

    pub fn within_one(&self, a: NodeId, b: NodeId) -> bool {
        a == b || self.0.get(&a).is_some_and(|s| s.contains(&b))
    }
}

pub fn detect_contacts(
    world: &PatrolWorld,
    positions: &[(AgentId, NodeId)],
    step: u64,
) -> Vec<ContactEvent> {
    detect_with(&Adjacency::new(world), positions, step)
}

pub fn detect_with(adj: &Adjacency, positions: &[(AgentId, NodeId)], step: u64) -> Vec<ContactEvent> {
    let n = positions.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if adj.within_one(positions[i].1, positions[j].1) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let first = positions[g[0]].1;
            let location = if g.iter().all(|&i| positions[i].1 == first) {
                ContactLocation::SameNode
            } else {
                ContactLocation::AdjacentNodes
            };
            let mut participants: Vec<AgentId> = g.iter().map(|&i| positions[i].0).collect();
            participants.sort();
            ContactEvent {
                step,
                participants,
                location,
            }
        })
        .collect()
}

/// All-to-all exchange among the event's participants. Payloads are built
/// from the senders' views before any delivery, so the result does not
/// depend on participant order and a repeated call is a no-op.
pub fn exchange(event: &ContactEvent, views: &mut [AgentView]) {
    let payloads: Vec<ExchangePayload> = views
        .iter()
        .filter(|v| event.participants.contains(&v.agent))
        .filter_map(|v| ExchangePayload::from_view(v, event.step))
        .collect();
    for view in views
        .iter_mut()
        .filter(|v| event.participants.contains(&v.agent))
    {
        let me = view.agent;
        for payload in payloads.iter().filter(|p| p.sender != me) {
            deliver(view, payload);
        }
    }
}

fn deliver(view: &mut AgentView, payload: &ExchangePayload) {
    let Some(peer) = view.peer_mut(payload.sender) else {
        return;
    };
    peer.belief.matrix = payload.matrix.clone();
    peer.belief.point_mass(payload.position);
    peer.belief.last_sync = Some(payload.step);
    for &(step, node) in &payload.recent {
        peer.window.pin(step, node);
    }
    peer.last_payload = Some(payload.clone());
}

/// Steps that had at least one contact, with the sizes of that step's
/// components. Only the most recent `retain` steps are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactHistory {
    retain: u64,
    steps: VecDeque<(u64, Vec<usize>)>,
    total: u64,
}

impl ContactHistory {
    pub fn new(retain: u64) -> Self {
        ContactHistory {
            retain: retain.max(1),
            steps: VecDeque::new(),
            total: 0,
        }
    }

    pub fn record(&mut self, step: u64, events: &[ContactEvent]) {
        if !events.is_empty() {
            self.steps
                .push_back((step, events.iter().map(|e| e.participants.len()).collect()));
            self.total += 1;
        }
        let floor = step.saturating_sub(self.retain - 1);
        while self.steps.front().is_some_and(|(s, _)| *s < floor) {
            self.steps.pop_front();
        }
    }

    pub fn total_steps_with_contact(&self) -> u64 {
        self.total
    }

    pub fn component_sizes(&self, step: u64) -> Option<&[usize]> {
        self.steps
            .iter()
            .rev()
            .find(|(s, _)| *s == step)
            .map(|(_, v)| v.as_slice())
    }
}

/// Steps in `(now − window, now]` with at least one contact.
pub fn communication_count(log: &ContactHistory, now: u64, window: u64) -> u64 {
    let from = now.saturating_sub(window.saturating_sub(1));
    log.steps
        .iter()
        .rev()
        .take_while(|(s, _)| *s >= from)
        .filter(|(s, _)| *s <= now)
        .count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_world, AgentAssignment, CircleId, WorldConfig};

    fn general() -> PatrolWorld {
        let c = [
            4.33, 4.33, 2.67, 2.67, 2.67, 6.00, 6.00, 6.00, 4.33, 2.67, 6.33, 4.67, 3.00, 6.33,
            4.67, 4.67, 6.33, 4.67, 4.67, 3.00,
        ];
        build_world(&WorldConfig {
            name: None,
            circles: vec![(1..=11).collect(), (11..=18).collect(), (13..=20).collect()],
            component_percent: (1..=20).map(|i| (i, c[i as usize - 1])).collect(),
            agents: (1..=3)
                .map(|i| AgentAssignment {
                    id: AgentId(i),
                    circle: CircleId(i),
                })
                .collect(),
        })
        .unwrap()
    }

    fn pos(list: &[(u32, u32)]) -> Vec<(AgentId, NodeId)> {
        list.iter().map(|&(a, n)| (AgentId(a), NodeId(n))).collect()
    }

    #[test]
    fn same_node_contact() {
        let w = general();
        let ev = detect_contacts(&w, &pos(&[(1, 11), (2, 11), (3, 20)]), 4);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].participants, vec![AgentId(1), AgentId(2)]);
        assert_eq!(ev[0].location, ContactLocation::SameNode);
        assert_eq!(ev[0].step, 4);
    }

    #[test]
    fn distance_two_is_silent() {
        let w = general();
        assert!(detect_contacts(&w, &pos(&[(2, 12), (3, 14), (1, 3)]), 0).is_empty());
    }

    #[test]
    fn chained_component() {
        let w = general();
        let ev = detect_contacts(&w, &pos(&[(1, 11), (2, 12), (3, 13)]), 0);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].participants, vec![AgentId(1), AgentId(2), AgentId(3)]);
        assert_eq!(ev[0].location, ContactLocation::AdjacentNodes);
    }

    #[test]
    fn detection_is_symmetric() {
        let w = general();
        for a in w.nodes() {
            for b in w.nodes() {
                let ab = detect_contacts(&w, &[(AgentId(1), a), (AgentId(2), b)], 0);
                let ba = detect_contacts(&w, &[(AgentId(2), b), (AgentId(1), a)], 0);
                assert_eq!(ab, ba);
            }
        }
        assert!(detect_contacts(&w, &pos(&[(1, 5)]), 0).is_empty());
    }

    #[test]
    fn counting_is_per_step() {
        let mut log = ContactHistory::new(1000);
        assert_eq!(communication_count(&log, 500, 1000), 0);
        let ev = |step, p: &[u32]| ContactEvent {
            step,
            participants: p.iter().map(|&a| AgentId(a)).collect(),
            location: ContactLocation::SameNode,
        };
        log.record(10, &[ev(10, &[1, 2])]);
        log.record(20, &[ev(20, &[1, 2]), ev(20, &[3, 4])]);
        log.record(30, &[]);
        log.record(40, &[ev(40, &[2, 3])]);
        assert_eq!(communication_count(&log, 40, 1000), 3);
        assert_eq!(log.component_sizes(20), Some(&[2usize, 2][..]));

        let mut every = ContactHistory::new(1000);
        for t in 0..3000 {
            every.record(t, &[ev(t, &[1, 2])]);
        }
        assert_eq!(communication_count(&every, 2999, 1000), 1000);
    }
}
