//! Finite-time exact summation on the tree overlay. One sweep runs for
//! exactly `tree_diameter` rounds; after that every agent holds the sum of
//! all initial values, exactly for integer inputs.
//!
//! The recursion, per agent `a` with tree degree `r_a`:
//!
//! * step 0:    x_a(1) = x_a(0) + Σ_{b ∈ tree_neighbors(a)} x_b(0)
//! * step q ≥ 1: x_a(q+1) = Σ_{b} x_b(q) + (1 − r_a)·x_a(q−1)
//!
//! By induction x_a(q) is the sum of initial values over the radius-q ball
//! around `a`; the inclusion-exclusion term (1 − r_a)·x_a(q−1) cancels what
//! the neighbor sums double-count. Intermediate values are therefore bounded
//! by Σ|x(0)| and integer inputs stay exact in f64.
//!
//! [`SweepState`] is the per-agent machine; the engine feeds it from its
//! message channel, the pure drivers here feed it directly.

use std::collections::BTreeMap;

use crate::agents::{AgentKind, AgentState};
use crate::graph::AgentId;
use crate::mdst::TreeOverlay;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("sweep input does not cover the overlay: agent {0} has no initial value")]
    MissingAgent(AgentId),
    #[error("sweep input names agent {0} which is not in the overlay")]
    UnknownAgent(AgentId),
}

/// Network-wide totals every agent needs each iteration: demand, generation,
/// the price numerator Σ P_g·c, and the two population counts. The counts
/// ride the sweep as floats and come out exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateVector {
    pub p_d: f64,
    pub p_g: f64,
    pub c_g: f64,
    pub n: f64,
    pub m: f64,
}

impl AggregateVector {
    pub fn zero() -> AggregateVector {
        AggregateVector {
            p_d: 0.0,
            p_g: 0.0,
            c_g: 0.0,
            n: 0.0,
            m: 0.0,
        }
    }

    /// Live agent count N + M.
    pub fn population(&self) -> f64 {
        self.n + self.m
    }
}

/// What one agent contributes to the global totals before a sweep.
pub fn init_aggregate(agent: &AgentState) -> AggregateVector {
    match agent.kind() {
        AgentKind::Generator => {
            let c = match &agent.params {
                crate::agents::AgentParams::Generator(g) => g.c,
                crate::agents::AgentParams::Consumer(_) => unreachable!("kind checked"),
            };
            AggregateVector {
                p_d: 0.0,
                p_g: agent.power,
                c_g: agent.power * c,
                n: 1.0,
                m: 0.0,
            }
        }
        AgentKind::Consumer => AggregateVector {
            p_d: agent.demand(),
            p_g: 0.0,
            c_g: 0.0,
            n: 0.0,
            m: 1.0,
        },
    }
}

/// Values the sweep recursion can carry: scalars and the aggregate vector.
pub trait SweepValue: Copy {
    fn zero() -> Self;
    fn add(self, other: Self) -> Self;
    fn scale(self, k: f64) -> Self;
}

impl SweepValue for f64 {
    fn zero() -> f64 {
        0.0
    }
    fn add(self, other: f64) -> f64 {
        self + other
    }
    fn scale(self, k: f64) -> f64 {
        self * k
    }
}

impl SweepValue for AggregateVector {
    fn zero() -> AggregateVector {
        AggregateVector::zero()
    }
    fn add(self, o: AggregateVector) -> AggregateVector {
        AggregateVector {
            p_d: self.p_d + o.p_d,
            p_g: self.p_g + o.p_g,
            c_g: self.c_g + o.c_g,
            n: self.n + o.n,
            m: self.m + o.m,
        }
    }
    fn scale(self, k: f64) -> AggregateVector {
        AggregateVector {
            p_d: self.p_d * k,
            p_g: self.p_g * k,
            c_g: self.c_g * k,
            n: self.n * k,
            m: self.m * k,
        }
    }
}

/// Per-agent sweep machine. Each round: hand [`SweepState::outgoing`] to the
/// tree neighbors, [`SweepState::fold`] everything they sent, then
/// [`SweepState::advance`]. A zero horizon (singleton tree) is complete
/// from the start.
#[derive(Debug, Clone)]
pub struct SweepState<V> {
    x_prev: V,
    x_curr: V,
    q: u32,
    horizon: u32,
    degree: usize,
    inbox: V,
}

impl<V: SweepValue> SweepState<V> {
    pub fn new(initial: V, degree: usize, horizon: u32) -> SweepState<V> {
        SweepState {
            x_prev: V::zero(),
            x_curr: initial,
            q: 0,
            horizon,
            degree,
            inbox: V::zero(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.q >= self.horizon
    }

    /// Value to send this round; nothing once the sweep is done.
    pub fn outgoing(&self) -> Option<V> {
        if self.is_complete() {
            None
        } else {
            Some(self.x_curr)
        }
    }

    /// Folds one tree neighbor's value into this round's inbox.
    pub fn fold(&mut self, value: V) {
        self.inbox = self.inbox.add(value);
    }

    /// Closes the round and steps the recursion.
    pub fn advance(&mut self) {
        debug_assert!(!self.is_complete(), "advance past horizon");
        let inbox = std::mem::replace(&mut self.inbox, V::zero());
        let next = if self.q == 0 {
            self.x_curr.add(inbox)
        } else {
            inbox.add(self.x_prev.scale(1.0 - self.degree as f64))
        };
        self.x_prev = self.x_curr;
        self.x_curr = next;
        self.q += 1;
    }

    pub fn step(&self) -> u32 {
        self.q
    }

    /// Current value; the network-wide sum once complete.
    pub fn value(&self) -> V {
        self.x_curr
    }
}

fn check_cover<V>(
    tree: &TreeOverlay,
    initial: &BTreeMap<AgentId, V>,
) -> Result<(), ConsensusError> {
    for a in tree.nodes() {
        if !initial.contains_key(&a) {
            return Err(ConsensusError::MissingAgent(a));
        }
    }
    for &a in initial.keys() {
        if !tree.parent.contains_key(&a) {
            return Err(ConsensusError::UnknownAgent(a));
        }
    }
    Ok(())
}

/// Runs one complete sweep over the tree and returns every agent's final
/// value. Reads tree neighbors only, exactly `tree_diameter` rounds.
pub fn sweep_all<V: SweepValue>(
    tree: &TreeOverlay,
    initial: &BTreeMap<AgentId, V>,
) -> Result<BTreeMap<AgentId, V>, ConsensusError> {
    check_cover(tree, initial)?;
    let mut states: BTreeMap<AgentId, SweepState<V>> = initial
        .iter()
        .map(|(&a, &x)| (a, SweepState::new(x, tree.degree(a), tree.tree_diameter)))
        .collect();
    while states.values().any(|s| !s.is_complete()) {
        let outbox: BTreeMap<AgentId, V> = states
            .iter()
            .map(|(&a, s)| (a, s.outgoing().expect("all agents share one horizon")))
            .collect();
        for (&a, &x) in &outbox {
            for &b in &tree.tree_neighbors[&a] {
                states.get_mut(&b).expect("covered").fold(x);
            }
        }
        for s in states.values_mut() {
            s.advance();
        }
    }
    Ok(states.into_iter().map(|(a, s)| (a, s.value())).collect())
}

/// Scalar sum of arbitrary per-agent values.
pub fn finite_time_sum(
    tree: &TreeOverlay,
    initial: &BTreeMap<AgentId, f64>,
) -> Result<BTreeMap<AgentId, f64>, ConsensusError> {
    sweep_all(tree, initial)
}

/// One vector-valued sweep collecting the global totals.
pub fn gather_globals(
    tree: &TreeOverlay,
    agents: &BTreeMap<AgentId, AgentState>,
) -> Result<BTreeMap<AgentId, AggregateVector>, ConsensusError> {
    let initial: BTreeMap<AgentId, AggregateVector> = agents
        .iter()
        .map(|(&a, s)| (a, init_aggregate(s)))
        .collect();
    sweep_all(tree, &initial)
}

/// Signed-power sum (consumers +demand, generators −generation): the balance
/// residual every agent anchors its next step to.
pub fn power_sum_sweep(
    tree: &TreeOverlay,
    signed_powers: &BTreeMap<AgentId, f64>,
) -> Result<BTreeMap<AgentId, f64>, ConsensusError> {
    sweep_all(tree, signed_powers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentParams, ConsumerParams, GeneratorParams};
    use crate::graph::Topology;
    use crate::mdst;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn aid(n: u32) -> AgentId {
        AgentId::new(n)
    }

    fn overlay(ns: &[u32], es: &[(u32, u32)]) -> TreeOverlay {
        let nodes: Vec<AgentId> = ns.iter().map(|&n| aid(n)).collect();
        let edges: Vec<(AgentId, AgentId)> = es.iter().map(|&(a, b)| (aid(a), aid(b))).collect();
        mdst::construct(&Topology::new(nodes, &edges).unwrap()).unwrap()
    }

    #[test]
    fn path_sum_with_frozen_intermediate_steps() {
        let tree = overlay(&[1, 2, 3], &[(1, 2), (2, 3)]);
        assert_eq!(tree.tree_diameter, 2);
        let mut s1 = SweepState::new(1.0, tree.degree(aid(1)), 2);
        let mut s2 = SweepState::new(2.0, tree.degree(aid(2)), 2);
        let mut s3 = SweepState::new(3.0, tree.degree(aid(3)), 2);
        // Step 0: ends join the middle, middle absorbs both ends.
        s1.fold(s2.outgoing().unwrap());
        s2.fold(s1.outgoing().unwrap());
        s2.fold(s3.outgoing().unwrap());
        s3.fold(s2.outgoing().unwrap());
        s1.advance();
        s2.advance();
        s3.advance();
        assert_eq!(
            (s1.value(), s2.value(), s3.value()),
            (3.0, 6.0, 5.0)
        );
        // Step 1: inclusion-exclusion snaps everyone to the total.
        s1.fold(s2.outgoing().unwrap());
        s2.fold(s1.outgoing().unwrap());
        s2.fold(s3.outgoing().unwrap());
        s3.fold(s2.outgoing().unwrap());
        s1.advance();
        s2.advance();
        s3.advance();
        assert_eq!(
            (s1.value(), s2.value(), s3.value()),
            (6.0, 6.0, 6.0)
        );
        assert!(s1.is_complete() && s2.is_complete() && s3.is_complete());
    }

    #[test]
    fn star_sum_reaches_everyone_in_two_steps() {
        let tree = overlay(&[1, 2, 3, 4], &[(1, 2), (1, 3), (1, 4)]);
        let initial: BTreeMap<AgentId, f64> =
            [(aid(1), 1.0), (aid(2), 2.0), (aid(3), 3.0), (aid(4), 4.0)].into();
        let out = finite_time_sum(&tree, &initial).unwrap();
        for a in tree.nodes() {
            assert_eq!(out[&a], 10.0);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let tree = overlay(&[1, 2, 3, 4], &[(1, 2), (2, 3), (3, 4)]);
        let initial: BTreeMap<AgentId, f64> = tree.nodes().map(|a| (a, 0.0)).collect();
        let out = finite_time_sum(&tree, &initial).unwrap();
        assert!(out.values().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_agent_sets_are_rejected() {
        let tree = overlay(&[1, 2], &[(1, 2)]);
        let missing: BTreeMap<AgentId, f64> = [(aid(1), 1.0)].into();
        assert_eq!(
            finite_time_sum(&tree, &missing).unwrap_err(),
            ConsensusError::MissingAgent(aid(2))
        );
        let extra: BTreeMap<AgentId, f64> =
            [(aid(1), 1.0), (aid(2), 1.0), (aid(9), 1.0)].into();
        assert_eq!(
            finite_time_sum(&tree, &extra).unwrap_err(),
            ConsensusError::UnknownAgent(aid(9))
        );
    }

    fn generator(id: u32, power: f64, c: f64) -> (AgentId, AgentState) {
        let params = GeneratorParams {
            c,
            p_max: 10_000.0,
            p_min: 0.0,
            t_min: -100.0,
            t_max: 100.0,
        };
        (
            aid(id),
            AgentState::new(aid(id), AgentParams::Generator(params), power),
        )
    }

    fn consumer(id: u32, power: f64, base: f64) -> (AgentId, AgentState) {
        let params = ConsumerParams {
            v: 1.0,
            p_max: 10_000.0,
            p_min: 0.0,
            t_min: -100.0,
            t_max: 100.0,
            base_load: base,
        };
        (
            aid(id),
            AgentState::new(aid(id), AgentParams::Consumer(params), power),
        )
    }

    #[test]
    fn aggregate_contributions() {
        let (_, g) = generator(1, 100.0, 2.0);
        assert_eq!(
            init_aggregate(&g),
            AggregateVector {
                p_d: 0.0,
                p_g: 100.0,
                c_g: 200.0,
                n: 1.0,
                m: 0.0
            }
        );
        let (_, c) = consumer(2, 3000.0, 0.0);
        assert_eq!(
            init_aggregate(&c),
            AggregateVector {
                p_d: 3000.0,
                p_g: 0.0,
                c_g: 0.0,
                n: 0.0,
                m: 1.0
            }
        );
        let (_, idle) = consumer(3, 0.0, 0.0);
        assert_eq!(
            init_aggregate(&idle),
            AggregateVector {
                p_d: 0.0,
                p_g: 0.0,
                c_g: 0.0,
                n: 0.0,
                m: 1.0
            }
        );
    }

    #[test]
    fn globals_on_a_two_node_network() {
        let tree = overlay(&[1, 2], &[(1, 2)]);
        let agents: BTreeMap<AgentId, AgentState> =
            [generator(1, 500.0, 1.0), consumer(2, 400.0, 0.0)].into();
        let out = gather_globals(&tree, &agents).unwrap();
        for a in tree.nodes() {
            assert_eq!(
                out[&a],
                AggregateVector {
                    p_d: 400.0,
                    p_g: 500.0,
                    c_g: 500.0,
                    n: 1.0,
                    m: 1.0
                }
            );
        }
    }

    #[test]
    fn globals_on_a_singleton() {
        let tree = overlay(&[1], &[]);
        let agents: BTreeMap<AgentId, AgentState> = [generator(1, 500.0, 1.5)].into();
        let out = gather_globals(&tree, &agents).unwrap();
        assert_eq!(out[&aid(1)], init_aggregate(&agents[&aid(1)]));
    }

    #[test]
    fn signed_power_sums() {
        let tree = overlay(&[1, 2], &[(1, 2)]);
        let signed: BTreeMap<AgentId, f64> = [(aid(1), -500.0), (aid(2), 400.0)].into();
        let out = power_sum_sweep(&tree, &signed).unwrap();
        assert!(out.values().all(|&v| v == -100.0));

        let balanced: BTreeMap<AgentId, f64> = [(aid(1), -400.0), (aid(2), 400.0)].into();
        let out = power_sum_sweep(&tree, &balanced).unwrap();
        assert!(out.values().all(|&v| v == 0.0));

        let single = overlay(&[7], &[]);
        let one: BTreeMap<AgentId, f64> = [(aid(7), 400.0)].into();
        assert_eq!(power_sum_sweep(&single, &one).unwrap()[&aid(7)], 400.0);
    }

    /// Random tree from attachment choices: node j+2 hangs off a uniformly
    /// chosen earlier node.
    fn random_tree(attach: &[u16]) -> TreeOverlay {
        let n = attach.len() + 1;
        let nodes: Vec<AgentId> = (1..=n as u32).map(aid).collect();
        let edges: Vec<(AgentId, AgentId)> = attach
            .iter()
            .enumerate()
            .map(|(j, &choice)| {
                let child = (j + 2) as u32;
                let parent = (choice as u32 % (j as u32 + 1)) + 1;
                (aid(parent), aid(child))
            })
            .collect();
        mdst::construct(&Topology::new(nodes, &edges).unwrap()).unwrap()
    }

    proptest! {
        /// Integer inputs come out exactly equal to the true sum at every
        /// agent, and all agents agree bit-for-bit.
        #[test]
        fn integer_sums_are_exact(
            attach in proptest::collection::vec(any::<u16>(), 2..50),
            values in proptest::collection::vec(-1_000_000i64..=1_000_000, 50),
        ) {
            let tree = random_tree(&attach);
            let initial: BTreeMap<AgentId, f64> = tree
                .nodes()
                .enumerate()
                .map(|(i, a)| (a, values[i] as f64))
                .collect();
            let truth: f64 = initial.values().sum();
            let out = finite_time_sum(&tree, &initial).unwrap();
            for a in tree.nodes() {
                prop_assert_eq!(out[&a], truth);
            }
        }

        /// sweep(αx + βy) = α·sweep(x) + β·sweep(y) to close tolerance.
        #[test]
        fn sweep_is_linear(
            attach in proptest::collection::vec(any::<u16>(), 2..20),
            xs in proptest::collection::vec(-1e5f64..1e5, 20),
            ys in proptest::collection::vec(-1e5f64..1e5, 20),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let tree = random_tree(&attach);
            let x: BTreeMap<AgentId, f64> = tree.nodes().enumerate().map(|(i, a)| (a, xs[i])).collect();
            let y: BTreeMap<AgentId, f64> = tree.nodes().enumerate().map(|(i, a)| (a, ys[i])).collect();
            let combo: BTreeMap<AgentId, f64> = tree
                .nodes()
                .map(|a| (a, alpha * x[&a] + beta * y[&a]))
                .collect();
            let sx = finite_time_sum(&tree, &x).unwrap();
            let sy = finite_time_sum(&tree, &y).unwrap();
            let sc = finite_time_sum(&tree, &combo).unwrap();
            for a in tree.nodes() {
                let expect = alpha * sx[&a] + beta * sy[&a];
                assert_relative_eq!(sc[&a], expect, epsilon = 1e-6, max_relative = 1e-9);
            }
        }
    }
}
