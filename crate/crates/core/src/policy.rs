//! First-order Markov-chain policies estimated from visitation histories,
//! their stationary distributions, and belief propagation over peer positions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::VisitationHistory;
use crate::world::{AgentId, Circle, NodeId};

pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("stationary iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row {row} is not stochastic (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
}

/// Row-stochastic matrix over an ordered node set, `p[i][j] = Pr(next = j | now = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    nodes: Vec<NodeId>,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(nodes: Vec<NodeId>, entries: Vec<f64>) -> Result<Self, PolicyError> {
        let n = nodes.len();
        if entries.len() != n * n {
            return Err(PolicyError::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        let m = TransitionMatrix { nodes, entries };
        m.check_stochastic()?;
        Ok(m)
    }

    /// Equal mass on each node's two ring neighbours.
    pub fn uniform_neighbors(circle: &Circle) -> Self {
        let n = circle.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + (i + n - 1) % n] += 0.5;
            entries[i * n + (i + 1) % n] += 0.5;
        }
        TransitionMatrix {
            nodes: circle.nodes.clone(),
            entries,
        }
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn check_stochastic(&self) -> Result<(), PolicyError> {
        for i in 0..self.dim() {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(PolicyError::NotStochastic { row: i, sum });
            }
        }
        Ok(())
    }

    /// `(1 − damping)·P + damping·U` with U the uniform matrix.
    pub fn damped(&self, damping: f64) -> TransitionMatrix {
        let n = self.dim() as f64;
        TransitionMatrix {
            nodes: self.nodes.clone(),
            entries: self
                .entries
                .iter()
                .map(|&p| (1.0 - damping) * p + damping / n)
                .collect(),
        }
    }

    /// Row vector times matrix.
    pub fn left_multiply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.entries[i * n..(i + 1) * n];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += vi * p;
            }
        }
    }

    /// Re-expresses the matrix over `circle`'s ring after an edit. Rows keep
    /// their left/right move probabilities; new nodes get the neighbour-uniform row.
    pub fn remap_to(&self, circle: &Circle) -> TransitionMatrix {
        let n = circle.len();
        let mut entries = vec![0.0; n * n];
        let old_ring = Circle {
            id: circle.id,
            nodes: self.nodes.clone(),
        };
        for (i, &node) in circle.nodes.iter().enumerate() {
            let (l, r) = ((i + n - 1) % n, (i + 1) % n);
            let old = self.nodes.iter().position(|&x| x == node).and_then(|oi| {
                let (ol, or) = old_ring.neighbors(node)?;
                let ol = self.nodes.iter().position(|&x| x == ol)?;
                let or = self.nodes.iter().position(|&x| x == or)?;
                let (pl, pr) = (self.get(oi, ol), self.get(oi, or));
                (pl + pr > 0.0).then_some((pl / (pl + pr), pr / (pl + pr)))
            });
            let (pl, pr) = old.unwrap_or((0.5, 0.5));
            entries[i * n + l] += pl;
            entries[i * n + r] += pr;
        }
        TransitionMatrix {
            nodes: circle.nodes.clone(),
            entries,
        }
    }
}

/// Counts ring moves over the last `window` steps of `history`.
///
/// Rows of nodes never left during the window fall back to the
/// neighbour-uniform row. Transitions that are not ring moves (possible only
/// after a topology edit) are ignored.
pub fn estimate_transitions(
    history: &VisitationHistory,
    circle: &Circle,
    window: usize,
) -> TransitionMatrix {
    let n = circle.len();
    let mut counts = vec![0u64; n * n];
    let entries = history.entries();
    let start = entries.len().saturating_sub(window);
    let tail: Vec<_> = entries.iter().skip(start).collect();
    for pair in tail.windows(2) {
        let (&(s0, from), &(s1, to)) = (pair[0], pair[1]);
        if s1 != s0 + 1 {
            continue;
        }
        let (Some(i), Some(j)) = (circle.position(from), circle.position(to)) else {
            continue;
        };
        if j == (i + 1) % n || j == (i + n - 1) % n {
            counts[i * n + j] += 1;
        }
    }

    let fallback = TransitionMatrix::uniform_neighbors(circle);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &counts[i * n..(i + 1) * n];
        let total: u64 = row.iter().sum();
        for j in 0..n {
            out[i * n + j] = if total == 0 {
                fallback.get(i, j)
            } else {
                row[j] as f64 / total as f64
            };
        }
    }
    TransitionMatrix {
        nodes: circle.nodes.clone(),
        entries: out,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPolicy {
    pub nodes: Vec<NodeId>,
    pub distribution: Vec<f64>,
    pub iterations: usize,
}

pub const DEFAULT_DAMPING: f64 = 0.01;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Fixed point of `b ← b·P'` for the damped matrix, by power iteration from
/// the uniform vector. Each row of `lim P'^k` equals the result, so its
/// diagonal is the result too.
pub fn stationary_policy(
    p: &TransitionMatrix,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryPolicy, PolicyError> {
    let damped = p.damped(damping);
    let n = p.dim();
    let mut b = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for iter in 1..=max_iter {
        damped.left_multiply(&b, &mut next);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let delta = b
            .iter()
            .zip(&next)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        // `delta` is the residual of `b` itself, so `b` is what gets returned.
        if delta < tol {
            return Ok(StationaryPolicy {
                nodes: p.nodes.clone(),
                distribution: b,
                iterations: iter,
            });
        }
        std::mem::swap(&mut b, &mut next);
    }
    Err(PolicyError::NoConvergence(max_iter))
}

/// What one agent believes about a peer's position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerBelief {
    pub peer: AgentId,
    pub distribution: Vec<f64>,
    pub last_sync: Option<u64>,
    pub matrix: TransitionMatrix,
}

impl PeerBelief {
    /// Uniform position over the peer's circle, neighbour-uniform moves.
    pub fn prior(peer: AgentId, circle: &Circle) -> Self {
        let n = circle.len();
        PeerBelief {
            peer,
            distribution: vec![1.0 / n as f64; n],
            last_sync: None,
            matrix: TransitionMatrix::uniform_neighbors(circle),
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        self.matrix.nodes()
    }

    pub fn point_mass(&mut self, node: NodeId) {
        for (x, &n) in self.distribution.iter_mut().zip(self.matrix.nodes()) {
            *x = if n == node { 1.0 } else { 0.0 };
        }
    }

    pub fn mass(&self) -> f64 {
        self.distribution.iter().sum()
    }
}

/// Advances the belief one step: `distribution ← distribution · P`.
pub fn propagate_belief(b: &PeerBelief, p: &TransitionMatrix) -> Result<PeerBelief, PolicyError> {
    if b.distribution.len() != p.dim() {
        return Err(PolicyError::DimensionMismatch {
            expected: p.dim(),
            got: b.distribution.len(),
        });
    }
    let mut next = b.clone();
    p.left_multiply(&b.distribution, &mut next.distribution);
    Ok(next)
}

/// Per-step belief distributions over a peer's ring, most recent last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefWindow {
    nodes: Vec<NodeId>,
    capacity: usize,
    entries: VecDeque<(u64, Vec<f64>)>,
}

impl BeliefWindow {
    pub fn new(nodes: Vec<NodeId>, capacity: usize) -> Self {
        BeliefWindow {
            nodes,
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn push(&mut self, step: u64, distribution: Vec<f64>) {
        if let Some(&(last, _)) = self.entries.back() {
            if last == step {
                self.entries.pop_back();
            }
        }
        self.entries.push_back((step, distribution));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Replaces the recorded belief at `step` (if still held) with a point mass.
    pub fn pin(&mut self, step: u64, node: NodeId) {
        let Some(pos) = self.nodes.iter().position(|&n| n == node) else {
            return;
        };
        if let Some((_, dist)) = self.entries.iter_mut().find(|(s, _)| *s == step) {
            dist.iter_mut().for_each(|x| *x = 0.0);
            dist[pos] = 1.0;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, Vec<f64>)> {
        self.entries.iter()
    }

    /// Re-keys distributions onto a new ring; unknown nodes start with zero mass.
    pub fn remap(&mut self, nodes: &[NodeId]) {
        for (_, dist) in self.entries.iter_mut() {
            let mut next = vec![0.0; nodes.len()];
            for (&n, &p) in self.nodes.iter().zip(dist.iter()) {
                if let Some(j) = nodes.iter().position(|&x| x == n) {
                    next[j] = p;
                }
            }
            *dist = next;
        }
        self.nodes = nodes.to_vec();
    }
}

/// Σ over steps in `(now − window, now]` of the belief mass at `node`.
pub fn expected_visit_mass(beliefs: &BeliefWindow, node: NodeId, now: u64, window: usize) -> f64 {
    let Some(pos) = beliefs.nodes.iter().position(|&n| n == node) else {
        return 0.0;
    };
    let from = now.saturating_sub(window as u64 - 1);
    beliefs
        .entries
        .iter()
        .rev()
        .take_while(|(s, _)| *s >= from)
        .filter(|(s, _)| *s <= now)
        .map(|(_, d)| d[pos])
        .sum()
}
