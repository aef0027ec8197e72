//! Per-agent visitation records and windowed visitation frequencies.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::expected_visit_mass;
use crate::view::AgentView;
use crate::world::{AgentId, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HistoryError {
    #[error("step {got} does not follow last recorded step {last}")]
    NonMonotonicStep { last: u64, got: u64 },
}

/// Ring buffer of `(step, node)` positions, one per elapsed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitationHistory {
    agent: AgentId,
    capacity: usize,
    first_step: Option<u64>,
    entries: VecDeque<(u64, NodeId)>,
}

impl VisitationHistory {
    pub fn new(agent: AgentId, capacity: usize) -> Self {
        VisitationHistory {
            agent,
            capacity: capacity.max(1),
            first_step: None,
            entries: VecDeque::with_capacity(capacity.max(1) + 1),
        }
    }

    pub fn agent(&self) -> AgentId {
        self.agent
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &VecDeque<(u64, NodeId)> {
        &self.entries
    }

    pub fn last(&self) -> Option<(u64, NodeId)> {
        self.entries.back().copied()
    }

    pub fn record_visit(&mut self, step: u64, node: NodeId) -> Result<(), HistoryError> {
        if let Some((last, _)) = self.last() {
            if step != last + 1 {
                return Err(HistoryError::NonMonotonicStep { last, got: step });
            }
        } else {
            self.first_step = Some(step);
        }
        self.entries.push_back((step, node));
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// The most recent `n` entries, oldest first.
    pub fn tail(&self, n: usize) -> Vec<(u64, NodeId)> {
        let skip = self.entries.len().saturating_sub(n);
        self.entries.iter().skip(skip).copied().collect()
    }

    /// Number of steps in `(now − window, now]` that have been recorded since
    /// the first visit; the divisor for windowed frequencies.
    pub fn elapsed_in_window(&self, now: u64, window: usize) -> u64 {
        match self.first_step {
            Some(first) if now >= first => (now - first + 1).min(window as u64),
            _ => 0,
        }
    }

    pub fn visits_in_window(&self, node: NodeId, now: u64, window: usize) -> u64 {
        let from = now.saturating_sub(window as u64 - 1);
        self.entries
            .iter()
            .rev()
            .take_while(|(s, _)| *s >= from)
            .filter(|(s, n)| *s <= now && *n == node)
            .count() as u64
    }
}

/// Percent of the last `window` steps (fewer during warm-up) spent at `node`.
pub fn windowed_frequency(h: &VisitationHistory, node: NodeId, now: u64, window: usize) -> f64 {
    let window = window.max(1);
    let elapsed = h.elapsed_in_window(now, window);
    if elapsed == 0 {
        return 0.0;
    }
    100.0 * h.visits_in_window(node, now, window) as f64 / elapsed as f64
}

/// The agent's own windowed frequency plus the expected visit mass it
/// attributes to each peer over the same window.
pub fn estimated_frequency(view: &AgentView, node: NodeId, now: u64) -> f64 {
    let window = view.frequency_window();
    let elapsed = view.history.elapsed_in_window(now, window);
    if elapsed == 0 {
        return 0.0;
    }
    let own = view.history.visits_in_window(node, now, window) as f64;
    let peers: f64 = view
        .peers
        .iter()
        .map(|p| expected_visit_mass(&p.window, node, now, window))
        .sum();
    100.0 * (own + peers) / elapsed as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agent() -> AgentId {
        AgentId(1)
    }

    #[test]
    fn record_and_evict() {
        let mut h = VisitationHistory::new(agent(), 1000);
        h.record_visit(1, NodeId(5)).unwrap();
        assert_eq!(h.len(), 1);
        for t in 2..=1000 {
            h.record_visit(t, NodeId(1)).unwrap();
        }
        assert_eq!(h.len(), 1000);
        h.record_visit(1001, NodeId(2)).unwrap();
        assert_eq!(h.len(), 1000);
        assert_eq!(h.entries().front(), Some(&(2, NodeId(1))));
    }

    #[test]
    fn non_monotonic_rejected() {
        let mut h = VisitationHistory::new(agent(), 10);
        h.record_visit(7, NodeId(1)).unwrap();
        assert_eq!(
            h.record_visit(5, NodeId(2)),
            Err(HistoryError::NonMonotonicStep { last: 7, got: 5 })
        );
        assert!(h.record_visit(9, NodeId(2)).is_err());
    }

    #[test]
    fn frequency_examples() {
        let mut h = VisitationHistory::new(agent(), 1000);
        for t in 0..300u64 {
            // node 1 on 9 of every 100 steps
            let node = if t % 100 < 9 { NodeId(1) } else { NodeId(2) };
            h.record_visit(t, node).unwrap();
        }
        assert!((windowed_frequency(&h, NodeId(1), 299, 100) - 9.0).abs() < 1e-12);
        assert_eq!(windowed_frequency(&h, NodeId(3), 299, 100), 0.0);

        let mut parked = VisitationHistory::new(agent(), 1000);
        for t in 0..100 {
            parked.record_visit(t, NodeId(4)).unwrap();
        }
        assert_eq!(windowed_frequency(&parked, NodeId(4), 99, 100), 100.0);
        assert_eq!(
            windowed_frequency(&VisitationHistory::new(agent(), 5), NodeId(1), 10, 100),
            0.0
        );
    }

    #[test]
    fn warm_up_divides_by_elapsed() {
        let mut h = VisitationHistory::new(agent(), 1000);
        for t in 0..10 {
            h.record_visit(t, NodeId(if t % 2 == 0 { 1 } else { 2 })).unwrap();
        }
        assert_eq!(windowed_frequency(&h, NodeId(1), 9, 100), 50.0);
    }

    proptest! {
        #[test]
        fn own_frequencies_sum_to_hundred(path in proptest::collection::vec(1u32..8, 1..400)) {
            let mut h = VisitationHistory::new(agent(), 1000);
            for (t, &n) in path.iter().enumerate() {
                h.record_visit(t as u64, NodeId(n)).unwrap();
            }
            let now = path.len() as u64 - 1;
            let total: f64 = (1..8).map(|n| windowed_frequency(&h, NodeId(n), now, 100)).sum();
            prop_assert!((total - 100.0).abs() < 1e-9);
        }

        #[test]
        fn old_events_do_not_matter(prefix in proptest::collection::vec(1u32..5, 0..200), suffix in proptest::collection::vec(1u32..5, 100..150)) {
            let mut a = VisitationHistory::new(agent(), 1000);
            let mut b = VisitationHistory::new(agent(), 1000);
            let offset = 1_000u64;
            // a sees prefix + suffix, b sees junk + suffix; both have ≥ window elapsed.
            for (t, &n) in prefix.iter().enumerate() {
                a.record_visit(offset + t as u64, NodeId(n)).unwrap();
            }
            for (t, _) in prefix.iter().enumerate() {
                b.record_visit(offset + t as u64, NodeId(9)).unwrap();
            }
            let base = offset + prefix.len() as u64;
            for (t, &n) in suffix.iter().enumerate() {
                a.record_visit(base + t as u64, NodeId(n)).unwrap();
                b.record_visit(base + t as u64, NodeId(n)).unwrap();
            }
            let now = base + suffix.len() as u64 - 1;
            for n in 1..5 {
                prop_assert_eq!(windowed_frequency(&a, NodeId(n), now, 100), windowed_frequency(&b, NodeId(n), now, 100));
            }
        }
    }
}
