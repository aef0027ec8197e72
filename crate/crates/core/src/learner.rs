//! Tabular Q-learning over discretized frequency-deficit observations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::estimated_frequency;
use crate::view::AgentView;
use crate::world::{NodeId, PatrolWorld, WorldError};

pub use crate::world::Direction as Action;

pub const BINS: usize = 5;
pub const STATE_WIDTH: usize = 4;
/// 5^4 observable states.
pub const STATE_COUNT: usize = 625;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bin {
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl Bin {
    const ALL: [Bin; BINS] = [Bin::B1, Bin::B2, Bin::B3, Bin::B4, Bin::B5];

    fn index(self) -> usize {
        self as usize
    }
}

/// Deficit thresholds (percent). `inner` separates "met" from a small
/// deficit or surplus, `outer` separates small from large.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub inner: f64,
    pub outer: f64,
}

impl Default for BinEdges {
    fn default() -> Self {
        BinEdges {
            inner: 1.0,
            outer: 5.0,
        }
    }
}

impl BinEdges {
    pub fn bin(&self, deficit: f64) -> Bin {
        if deficit <= -self.outer {
            Bin::B1
        } else if deficit <= -self.inner {
            Bin::B2
        } else if deficit < self.inner {
            Bin::B3
        } else if deficit < self.outer {
            Bin::B4
        } else {
            Bin::B5
        }
    }
}

/// Binned `F − f_e` for nodes `i−2, i−1, i, i+1` around the agent's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservedState([Bin; STATE_WIDTH]);

impl ObservedState {
    pub fn from_deficits(deficits: [f64; STATE_WIDTH], edges: &BinEdges) -> Self {
        ObservedState(deficits.map(|d| edges.bin(d)))
    }

    pub fn bins(&self) -> [Bin; STATE_WIDTH] {
        self.0
    }

    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, b| acc * BINS + b.index())
    }

    pub fn from_index(mut index: usize) -> Self {
        let mut bins = [Bin::B1; STATE_WIDTH];
        for slot in bins.iter_mut().rev() {
            *slot = Bin::ALL[index % BINS];
            index /= BINS;
        }
        ObservedState(bins)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `f − F`: surplus is rewarded.
    Signed,
    /// `−|f − F|`: any mismatch is penalized.
    AbsolutePenalty,
    /// `F − f`: the remaining shortfall at the node just reached.
    Deficit,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("alpha must be in (0, 1], got {0}")]
    Alpha(f64),
    #[error("gamma must be in [0, 1), got {0}")]
    Gamma(f64),
    #[error("epsilon schedule needs epsilon_min <= epsilon0 <= 1 and tau > 0")]
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon0: f64,
    pub epsilon_min: f64,
    pub epsilon_tau: f64,
    pub reward: RewardMode,
    pub bins: BinEdges,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            alpha: 0.1,
            gamma: 0.9,
            epsilon0: 1.0,
            epsilon_min: 0.01,
            epsilon_tau: 1e5,
            reward: RewardMode::Deficit,
            bins: BinEdges::default(),
        }
    }
}

impl LearnerParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ParamError::Alpha(self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(ParamError::Gamma(self.gamma));
        }
        if !(self.epsilon_min >= 0.0
            && self.epsilon_min <= self.epsilon0
            && self.epsilon0 <= 1.0
            && self.epsilon_tau > 0.0)
        {
            return Err(ParamError::Epsilon);
        }
        Ok(())
    }
}

/// Dense state-action table; unvisited entries read as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    values: Vec<[f64; 2]>,
}

impl Default for QTable {
    fn default() -> Self {
        QTable {
            values: vec![[0.0; 2]; STATE_COUNT],
        }
    }
}

fn action_index(a: Action) -> usize {
    match a {
        Action::Left => 0,
        Action::Right => 1,
    }
}

impl QTable {
    pub fn get(&self, s: &ObservedState, a: Action) -> f64 {
        self.values[s.index()][action_index(a)]
    }

    pub fn set(&mut self, s: &ObservedState, a: Action, v: f64) {
        self.values[s.index()][action_index(a)] = v;
    }

    pub fn max(&self, s: &ObservedState) -> f64 {
        let [l, r] = self.values[s.index()];
        l.max(r)
    }

    /// Number of (state, action) slots; never more than 1250.
    pub fn len(&self) -> usize {
        self.values.len() * 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObservedState, [f64; 2])> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ObservedState::from_index(i), *v))
    }
}

pub fn discretize_state(
    world: &PatrolWorld,
    view: &AgentView,
    position: NodeId,
    now: u64,
    edges: &BinEdges,
) -> Result<ObservedState, WorldError> {
    let circle = world.circle(view.circle)?;
    let pos = circle.position(position).ok_or(WorldError::NodeNotOnCircle {
        circle: view.circle,
        node: position,
    })?;
    let mut deficits = [0.0; STATE_WIDTH];
    for (slot, offset) in deficits.iter_mut().zip([-2isize, -1, 0, 1]) {
        let node = circle.at_offset(pos, offset);
        *slot = world.required(node) - estimated_frequency(view, node, now);
    }
    Ok(ObservedState::from_deficits(deficits, edges))
}

/// ε-greedy; exploitation ties are broken uniformly.
pub fn select_action<R: Rng + ?Sized>(
    q: &QTable,
    s: &ObservedState,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    let coin = |rng: &mut R| {
        if rng.gen_bool(0.5) {
            Action::Left
        } else {
            Action::Right
        }
    };
    if rng.gen::<f64>() < epsilon {
        return coin(rng);
    }
    let (l, r) = (q.get(s, Action::Left), q.get(s, Action::Right));
    if l > r {
        Action::Left
    } else if r > l {
        Action::Right
    } else {
        coin(rng)
    }
}

/// Reward for occupying `node` at `now`, from the agent's own estimate.
pub fn compute_reward(
    world: &PatrolWorld,
    view: &AgentView,
    node: NodeId,
    now: u64,
    mode: RewardMode,
) -> f64 {
    reward_from(estimated_frequency(view, node, now), world.required(node), mode)
}

pub fn reward_from(estimated: f64, required: f64, mode: RewardMode) -> f64 {
    match mode {
        RewardMode::Signed => estimated - required,
        RewardMode::AbsolutePenalty => -(estimated - required).abs(),
        RewardMode::Deficit => required - estimated,
    }
}

pub fn q_update(
    q: &mut QTable,
    s: &ObservedState,
    a: Action,
    reward: f64,
    s_next: &ObservedState,
    params: &LearnerParams,
) {
    let old = q.get(s, a);
    let target = reward + params.gamma * q.max(s_next);
    q.set(s, a, old + params.alpha * (target - old));
}

pub fn epsilon_at(step: u64, params: &LearnerParams) -> f64 {
    (params.epsilon0 * (-(step as f64) / params.epsilon_tau).exp()).max(params.epsilon_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use Bin::*;

    fn s(bins: [Bin; 4]) -> ObservedState {
        ObservedState(bins)
    }

    #[test]
    fn binning_examples() {
        let e = BinEdges::default();
        assert_eq!(ObservedState::from_deficits([0.0; 4], &e).bins(), [B3; 4]);
        assert_eq!(
            ObservedState::from_deficits([11.4, 0.0, -2.1, 5.3], &e).bins(),
            [B5, B3, B2, B5]
        );
        assert_eq!(
            ObservedState::from_deficits([-1.0, 1.0, 5.0, -5.0], &e).bins(),
            [B2, B4, B5, B1]
        );
    }

    #[test]
    fn state_index_round_trips() {
        for i in 0..STATE_COUNT {
            assert_eq!(ObservedState::from_index(i).index(), i);
        }
        assert_eq!(QTable::default().len(), 1250);
    }

    #[test]
    fn pure_exploration_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = QTable::default();
        let st = s([B3; 4]);
        q.set(&st, Action::Left, 10.0);
        let lefts = (0..10_000)
            .filter(|_| select_action(&q, &st, 1.0, &mut rng) == Action::Left)
            .count();
        assert!((lefts as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn pure_exploitation_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = QTable::default();
        let st = s([B1, B2, B3, B4]);
        q.set(&st, Action::Left, 2.0);
        q.set(&st, Action::Right, 1.0);
        assert!((0..1000).all(|_| select_action(&q, &st, 0.0, &mut rng) == Action::Left));

        q.set(&st, Action::Right, 2.0);
        let lefts = (0..10_000)
            .filter(|_| select_action(&q, &st, 0.0, &mut rng) == Action::Left)
            .count();
        assert!((lefts as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let st = s([B2; 4]);
        let mut a = QTable::default();
        a.set(&st, Action::Left, -3.0);
        a.set(&st, Action::Right, -1.5);
        let mut b = a.clone();
        b.set(&st, Action::Left, -3.0 + 41.0);
        b.set(&st, Action::Right, -1.5 + 41.0);
        let mut ra = ChaCha8Rng::seed_from_u64(9);
        let mut rb = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5000 {
            assert_eq!(
                select_action(&a, &st, 0.2, &mut ra),
                select_action(&b, &st, 0.2, &mut rb)
            );
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_from(7.0, 9.0, RewardMode::Signed), -2.0);
        assert_eq!(reward_from(9.0, 9.0, RewardMode::Signed), 0.0);
        assert_eq!(reward_from(12.0, 9.0, RewardMode::Signed), 3.0);
        assert_eq!(reward_from(12.0, 9.0, RewardMode::AbsolutePenalty), -3.0);
        assert_eq!(reward_from(7.0, 9.0, RewardMode::AbsolutePenalty), -2.0);
    }

    #[test]
    fn q_update_examples() {
        let p = LearnerParams {
            alpha: 0.1,
            gamma: 0.9,
            ..Default::default()
        };
        let (a, b) = (s([B3; 4]), s([B4; 4]));
        let mut q = QTable::default();
        q_update(&mut q, &a, Action::Right, -5.0, &b, &p);
        assert!((q.get(&a, Action::Right) + 0.5).abs() < 1e-12);

        let mut q = QTable::default();
        q.set(&a, Action::Left, 1.0);
        q_update(&mut q, &a, Action::Left, 0.0, &b, &p);
        assert!((q.get(&a, Action::Left) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn self_loop_converges_to_geometric_sum() {
        let p = LearnerParams::default();
        let st = s([B5; 4]);
        let mut q = QTable::default();
        let r = 3.7;
        for _ in 0..5000 {
            q_update(&mut q, &st, Action::Left, r, &st, &p);
        }
        assert!((q.get(&st, Action::Left) - r / (1.0 - p.gamma)).abs() < 1e-6);
    }

    #[test]
    fn epsilon_schedule() {
        let p = LearnerParams::default();
        assert_eq!(epsilon_at(0, &p), 1.0);
        assert_eq!(epsilon_at(10_000_000, &p), 0.01);
        assert!((epsilon_at(100_000, &p) - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn params_validate() {
        assert!(LearnerParams::default().validate().is_ok());
        let bad = LearnerParams {
            gamma: 1.0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ParamError::Gamma(1.0)));
        let bad = LearnerParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn q_values_stay_bounded(rewards in proptest::collection::vec((-100.0f64..100.0, 0usize..625, 0usize..625, proptest::bool::ANY), 1..2000)) {
                let p = LearnerParams::default();
                let mut q = QTable::default();
                let bound = 100.0 / (1.0 - p.gamma) + 1e-9;
                for (r, a, b, left) in rewards {
                    let act = if left { Action::Left } else { Action::Right };
                    q_update(&mut q, &ObservedState::from_index(a), act, r, &ObservedState::from_index(b), &p);
                }
                for (_, v) in q.iter() {
                    prop_assert!(v[0].abs() <= bound && v[1].abs() <= bound);
                }
            }
        }
    }
}
