//! Patrolled environment: circles, shared nodes, frequency requirements.
//!
//! Percent bookkeeping is exact: component and required frequencies are kept
//! as rationals on the 0–100 scale so that `required = r × component` and the
//! capacity bound `Σ component ≤ 100` hold without rounding slack.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Global 1-based node identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 1-based circle identifier, matching the position of the circle in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CircleId(pub u32);

impl fmt::Display for CircleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("circle {circle} lists node {node} more than once")]
    DuplicateNodeInCircle { circle: CircleId, node: NodeId },
    #[error("circle {0} has no nodes")]
    EmptyCircle(CircleId),
    #[error("circle {circle} has {len} nodes; a circle needs at least 3")]
    CircleTooSmall { circle: CircleId, len: usize },
    #[error("circle {0} has no assigned agent")]
    UnassignedCircle(CircleId),
    #[error("agent {agent} is assigned to unknown circle {circle}")]
    UnknownAgentCircle { agent: AgentId, circle: CircleId },
    #[error("agent id {0} is listed more than once")]
    DuplicateAgent(AgentId),
    #[error("world has no agents")]
    NoAgents,
    #[error("capacity exceeded: component frequencies sum to {sum:.2}% > 100%: team capacity constraint violated")]
    CapacityExceeded { sum: f64 },
    #[error("node {node} is not on circle {circle}")]
    NodeNotOnCircle { circle: CircleId, node: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown circle {0}")]
    UnknownCircle(CircleId),
    #[error("node {0} has no component frequency")]
    MissingRequirement(NodeId),
    #[error("component frequency given for node {0}, which is on no circle")]
    OrphanRequirement(NodeId),
    #[error("node {node}: percent {value} is negative or not finite")]
    InvalidPercent { node: NodeId, value: f64 },
    #[error("cannot insert between {after} and {before}: not adjacent on circle {circle}")]
    InvalidInsertion {
        circle: CircleId,
        after: NodeId,
        before: NodeId,
    },
    #[error("node {0} already exists")]
    NodeExists(NodeId),
}

/// Converts a decimal percent to an exact rational, keeping two decimals.
pub fn percent_from_f64(value: f64) -> Option<Rational64> {
    if !value.is_finite() || value < 0.0 {
        return None;
    }
    let hundredths = (value * 100.0).round() as i64;
    Some(Rational64::new(hundredths, 100))
}

pub fn percent_to_f64(value: Rational64) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub id: CircleId,
    pub nodes: Vec<NodeId>,
}

impl Circle {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.nodes.iter().position(|&n| n == node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    /// Node at ring offset `offset` from position `pos` (negative = Left).
    pub fn at_offset(&self, pos: usize, offset: isize) -> NodeId {
        let n = self.nodes.len() as isize;
        let idx = (pos as isize + offset).rem_euclid(n) as usize;
        self.nodes[idx]
    }

    pub fn step(&self, at: NodeId, dir: Direction) -> Result<NodeId, WorldError> {
        let pos = self.position(at).ok_or(WorldError::NodeNotOnCircle {
            circle: self.id,
            node: at,
        })?;
        Ok(match dir {
            Direction::Left => self.at_offset(pos, -1),
            Direction::Right => self.at_offset(pos, 1),
        })
    }

    /// Ring neighbours `(left, right)` of `at`.
    pub fn neighbors(&self, at: NodeId) -> Option<(NodeId, NodeId)> {
        let pos = self.position(at)?;
        Some((self.at_offset(pos, -1), self.at_offset(pos, 1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRequirement {
    /// C_i: share of one agent's capacity, percent.
    pub component: Rational64,
    /// F_i = r · C_i, percent.
    pub required: Rational64,
}

impl FrequencyRequirement {
    pub fn required_f64(&self) -> f64 {
        percent_to_f64(self.required)
    }

    pub fn component_f64(&self) -> f64 {
        percent_to_f64(self.component)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAssignment {
    pub id: AgentId,
    pub circle: CircleId,
}

/// On-disk world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Node rings; the list position (1-based) is the circle id.
    pub circles: Vec<Vec<u32>>,
    pub component_percent: BTreeMap<u32, f64>,
    pub agents: Vec<AgentAssignment>,
}

impl WorldConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatrolWorld {
    circles: Vec<Circle>,
    requirements: BTreeMap<NodeId, FrequencyRequirement>,
    agents: Vec<AgentAssignment>,
}

/// Task-instance edits applied to a built world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WorldMutation {
    SwapRequirements {
        a: NodeId,
        b: NodeId,
    },
    /// Sets the required frequency F (percent); the component becomes F / r.
    SetRequirement {
        node: NodeId,
        percent: f64,
    },
    InsertNode {
        circle: CircleId,
        after: NodeId,
        before: NodeId,
        node: NodeId,
        percent: f64,
    },
    /// Drops the node's demand; the node stays on its rings.
    RemoveRequirement {
        node: NodeId,
    },
}

/// A mutation file: an ordered list of edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mutations: Vec<WorldMutation>,
}

impl MutationFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))
    }
}

pub fn build_world(config: &WorldConfig) -> Result<PatrolWorld, WorldError> {
    if config.agents.is_empty() {
        return Err(WorldError::NoAgents);
    }
    let r = config.agents.len() as i64;

    let mut circles = Vec::with_capacity(config.circles.len());
    for (i, ring) in config.circles.iter().enumerate() {
        let id = CircleId(i as u32 + 1);
        circles.push(Circle {
            id,
            nodes: ring.iter().map(|&n| NodeId(n)).collect(),
        });
    }

    let mut requirements = BTreeMap::new();
    for (&node, &value) in &config.component_percent {
        let node = NodeId(node);
        let component =
            percent_from_f64(value).ok_or(WorldError::InvalidPercent { node, value })?;
        requirements.insert(
            node,
            FrequencyRequirement {
                component,
                required: component * r,
            },
        );
    }

    let world = PatrolWorld {
        circles,
        requirements,
        agents: config.agents.clone(),
    };
    world.validate()?;
    Ok(world)
}

pub fn validate_capacity(world: &PatrolWorld) -> Result<Rational64, WorldError> {
    let sum = world.component_sum();
    if sum > Rational64::from_integer(100) {
        Err(WorldError::CapacityExceeded {
            sum: percent_to_f64(sum),
        })
    } else {
        Ok(sum)
    }
}

pub fn circle_step(
    world: &PatrolWorld,
    circle: CircleId,
    at: NodeId,
    dir: Direction,
) -> Result<NodeId, WorldError> {
    world.circle(circle)?.step(at, dir)
}

pub fn union_neighbors(world: &PatrolWorld, at: NodeId) -> Result<BTreeSet<NodeId>, WorldError> {
    if !world.requirements.contains_key(&at) {
        return Err(WorldError::UnknownNode(at));
    }
    let mut out = BTreeSet::new();
    for circle in &world.circles {
        if let Some((l, r)) = circle.neighbors(at) {
            out.insert(l);
            out.insert(r);
        }
    }
    out.remove(&at);
    Ok(out)
}

pub fn apply_mutation(world: &PatrolWorld, m: &WorldMutation) -> Result<PatrolWorld, WorldError> {
    let mut next = world.clone();
    let r = world.agent_count() as i64;
    match *m {
        WorldMutation::SwapRequirements { a, b } => {
            let ra = *world.requirement(a)?;
            let rb = *world.requirement(b)?;
            next.requirements.insert(a, rb);
            next.requirements.insert(b, ra);
        }
        WorldMutation::SetRequirement { node, percent } => {
            world.requirement(node)?;
            let required = percent_from_f64(percent).ok_or(WorldError::InvalidPercent {
                node,
                value: percent,
            })?;
            next.requirements.insert(
                node,
                FrequencyRequirement {
                    component: required / r,
                    required,
                },
            );
        }
        WorldMutation::RemoveRequirement { node } => {
            world.requirement(node)?;
            next.requirements
                .insert(node, FrequencyRequirement::default_zero());
        }
        WorldMutation::InsertNode {
            circle,
            after,
            before,
            node,
            percent,
        } => {
            if world.requirements.contains_key(&node) {
                return Err(WorldError::NodeExists(node));
            }
            world.requirement(after)?;
            world.requirement(before)?;
            let required = percent_from_f64(percent).ok_or(WorldError::InvalidPercent {
                node,
                value: percent,
            })?;
            let ring = next.circle_mut(circle)?;
            let invalid = WorldError::InvalidInsertion {
                circle,
                after,
                before,
            };
            let pa = ring.position(after).ok_or(invalid.clone())?;
            let pb = ring.position(before).ok_or(invalid.clone())?;
            let n = ring.len();
            let at = if (pa + 1) % n == pb {
                pa + 1
            } else if (pb + 1) % n == pa {
                pb + 1
            } else {
                return Err(invalid);
            };
            ring.nodes.insert(at, node);
            next.requirements.insert(
                node,
                FrequencyRequirement {
                    component: required / r,
                    required,
                },
            );
        }
    }
    next.validate()?;
    Ok(next)
}

impl FrequencyRequirement {
    fn default_zero() -> Self {
        FrequencyRequirement {
            component: Rational64::zero(),
            required: Rational64::zero(),
        }
    }
}

impl PatrolWorld {
    /// Checks every structural invariant, then the capacity bound.
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.agents.is_empty() {
            return Err(WorldError::NoAgents);
        }
        let mut on_circle = BTreeSet::new();
        for circle in &self.circles {
            if circle.nodes.is_empty() {
                return Err(WorldError::EmptyCircle(circle.id));
            }
            let mut seen = BTreeSet::new();
            for &node in &circle.nodes {
                if !seen.insert(node) {
                    return Err(WorldError::DuplicateNodeInCircle {
                        circle: circle.id,
                        node,
                    });
                }
            }
            if circle.nodes.len() < 3 {
                return Err(WorldError::CircleTooSmall {
                    circle: circle.id,
                    len: circle.nodes.len(),
                });
            }
            on_circle.extend(seen);
        }
        for node in &on_circle {
            if !self.requirements.contains_key(node) {
                return Err(WorldError::MissingRequirement(*node));
            }
        }
        for node in self.requirements.keys() {
            if !on_circle.contains(node) {
                return Err(WorldError::OrphanRequirement(*node));
            }
        }
        let mut agent_ids = BTreeSet::new();
        for a in &self.agents {
            if !agent_ids.insert(a.id) {
                return Err(WorldError::DuplicateAgent(a.id));
            }
            if a.circle.0 == 0 || a.circle.0 as usize > self.circles.len() {
                return Err(WorldError::UnknownAgentCircle {
                    agent: a.id,
                    circle: a.circle,
                });
            }
        }
        for circle in &self.circles {
            if !self.agents.iter().any(|a| a.circle == circle.id) {
                return Err(WorldError::UnassignedCircle(circle.id));
            }
        }
        validate_capacity(self)?;
        Ok(())
    }

    pub fn circles(&self) -> &[Circle] {
        &self.circles
    }

    pub fn circle(&self, id: CircleId) -> Result<&Circle, WorldError> {
        id.0.checked_sub(1)
            .and_then(|i| self.circles.get(i as usize))
            .ok_or(WorldError::UnknownCircle(id))
    }

    fn circle_mut(&mut self, id: CircleId) -> Result<&mut Circle, WorldError> {
        id.0.checked_sub(1)
            .and_then(|i| self.circles.get_mut(i as usize))
            .ok_or(WorldError::UnknownCircle(id))
    }

    pub fn agents(&self) -> &[AgentAssignment] {
        &self.agents
    }

    /// r
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// n, the number of distinct nodes.
    pub fn node_count(&self) -> usize {
        self.requirements.len()
    }

    /// Distinct nodes in ascending id order. Dense node indices used by the
    /// engine follow this order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.requirements.keys().copied()
    }

    pub fn node_index(&self, node: NodeId) -> Option<usize> {
        self.requirements.keys().position(|&n| n == node)
    }

    pub fn requirement(&self, node: NodeId) -> Result<&FrequencyRequirement, WorldError> {
        self.requirements
            .get(&node)
            .ok_or(WorldError::UnknownNode(node))
    }

    pub fn requirements(&self) -> &BTreeMap<NodeId, FrequencyRequirement> {
        &self.requirements
    }

    /// F_i as f64 percent.
    pub fn required(&self, node: NodeId) -> f64 {
        self.requirements
            .get(&node)
            .map(FrequencyRequirement::required_f64)
            .unwrap_or(0.0)
    }

    pub fn component_sum(&self) -> Rational64 {
        self.requirements
            .values()
            .fold(Rational64::zero(), |acc, r| acc + r.component)
    }

    pub fn circles_containing(&self, node: NodeId) -> impl Iterator<Item = &Circle> + '_ {
        self.circles.iter().filter(move |c| c.contains(node))
    }

    /// Total required frequency on nodes that no other agent can reach. Above
    /// 100% the agent cannot meet its share whatever the team does.
    pub fn exclusive_load(&self, agent: AgentId) -> Rational64 {
        let patrollers = |c: CircleId| self.agents.iter().filter(move |a| a.circle == c).map(|a| a.id);
        self.requirements
            .iter()
            .filter(|(&n, _)| {
                self.circles_containing(n)
                    .flat_map(|c| patrollers(c.id))
                    .all(|a| a == agent)
            })
            .filter(|(&n, _)| {
                self.circles_containing(n)
                    .any(|c| patrollers(c.id).any(|a| a == agent))
            })
            .map(|(_, r)| r.required)
            .sum()
    }

    /// Inverse of [`build_world`]'s input, used for hashing and checkpoints.
    pub fn to_config(&self) -> WorldConfig {
        WorldConfig {
            name: None,
            circles: self
                .circles
                .iter()
                .map(|c| c.nodes.iter().map(|n| n.0).collect())
                .collect(),
            component_percent: self
                .requirements
                .iter()
                .map(|(n, r)| (n.0, r.component_f64()))
                .collect(),
            agents: self.agents.clone(),
        }
    }
}
