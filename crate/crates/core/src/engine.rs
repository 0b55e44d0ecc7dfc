//! Round-synchronous simulation driver.
//!
//! Everything observable about a run is produced here: the tree build, the
//! per-iteration message exchanges, the projected updates, and the record
//! stream. One iteration costs 1 + d + d message rounds on a tree of
//! diameter d: one exchange of current powers with topology neighbors, one
//! tree sweep for the global totals, one for the signed power sum.
//!
//! Agents act only on their own state plus what arrived in messages. The
//! driver enforces that shape: the per-agent update below reads the agent's
//! own power, its own sweep results, and nothing else. As a safety net the
//! sweep outputs are compared against directly computed totals every
//! iteration; divergence beyond 1e-9 relative aborts the run rather than
//! letting a silent consensus bug steer the network.

use std::collections::BTreeMap;

use crate::agents::{
    balance_project, gradient_step, local_gradient, system_price, AgentError,
    AgentKind, AgentParams, AgentState,
};
use crate::consensus::{init_aggregate, AggregateVector, SweepState, SweepValue};
use crate::graph::{AgentId, GraphError, Topology};
use crate::mdst::{self, ApspAgent, FloodAnnouncement, MdstError, TreeOverlay};
use crate::oracle;
use crate::scenario::{EventAction, ScenarioFile};

/// Sweep results must agree with directly computed totals to this relative
/// tolerance, every agent, every iteration.
pub const AGG_CONSISTENCY_REL_TOL: f64 = 1e-9;

/// Consecutive quiet iterations required before an early stop.
pub const CONVERGENCE_STREAK: u64 = 50;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Overlay(#[from] MdstError),
    #[error(transparent)]
    Consensus(#[from] crate::consensus::ConsensusError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(
        "iteration {iteration}: agent {agent} consensus {field} = {consensus} \
         disagrees with direct sum {direct}"
    )]
    AggregateMismatch {
        iteration: u64,
        agent: AgentId,
        field: &'static str,
        consensus: f64,
        direct: f64,
    },
    #[error("event rejected: {0}")]
    EventRejected(String),
}

/// Everything an agent is allowed to put on the wire. Powers, aggregate
/// sums, and routing metadata only; cost and utility parameters, base loads,
/// and gradients have no representation here on purpose.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    DistanceAnnounce(Vec<(AgentId, u32)>),
    EccentricityAnnounce(Vec<(AgentId, u32)>),
    SweepValue(SweepData),
    PowerValue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepData {
    Globals(AggregateVector),
    PowerSum(f64),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::DistanceAnnounce(_) => "distance_announce",
            Payload::EccentricityAnnounce(_) => "eccentricity_announce",
            Payload::SweepValue(_) => "sweep_value",
            Payload::PowerValue(_) => "power_value",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: AgentId,
    pub round: u64,
    pub payload: Payload,
}

/// Synchronous transport: send everything, deliver everything, tick the
/// round counter. Inboxes come back ordered by recipient, entries by send
/// order (ascending sender id), so folds are deterministic.
#[derive(Debug, Default)]
struct Network {
    round: u64,
    counts: BTreeMap<&'static str, u64>,
    /// When present, every message of the run is retained for auditing.
    log: Option<Vec<Message>>,
}

impl Network {
    fn exchange(
        &mut self,
        sends: Vec<(AgentId, Message)>,
    ) -> BTreeMap<AgentId, Vec<Message>> {
        let mut inboxes: BTreeMap<AgentId, Vec<Message>> = BTreeMap::new();
        for (dest, msg) in sends {
            debug_assert_eq!(msg.round, self.round, "message stamped for another round");
            *self.counts.entry(msg.payload.kind()).or_insert(0) += 1;
            if let Some(log) = &mut self.log {
                log.push(msg.clone());
            }
            inboxes.entry(dest).or_default().push(msg);
        }
        self.round += 1;
        inboxes
    }
}

/// Diminishing stepsize with a hard cap sized so no worst-case gradient
/// step alone can exceed an agent's per-iteration rate bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    pub alpha0: f64,
    pub cap: f64,
}

impl StepsizeSchedule {
    pub fn new(
        alpha0: f64,
        agents: &BTreeMap<AgentId, AgentState>,
        price: f64,
    ) -> StepsizeSchedule {
        let mut cap = f64::INFINITY;
        for s in agents.values() {
            let bound = s.gradient_bound(price);
            if bound <= 0.0 {
                continue;
            }
            let (t_min, t_max) = s.rate_bounds();
            cap = cap.min(t_min.abs().min(t_max) / bound);
        }
        StepsizeSchedule { alpha0, cap }
    }

    /// Stepsize for global iteration `k` (0-based).
    pub fn alpha(&self, k: u64) -> f64 {
        (self.alpha0 / (k as f64 + 1.0)).min(self.cap)
    }
}

/// Per-agent slice of one iteration's record. Violation fields are measured
/// overruns in watts; the engine flags, it never clamps after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub kind: AgentKind,
    pub power: f64,
    pub base_load: f64,
    pub box_violation: f64,
    pub rate_violation: f64,
}

/// State of the network after iteration `k` finished: post-update powers,
/// the price agents acted on, and the totals at the recorded powers.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: u64,
    pub price: f64,
    pub p_g: f64,
    pub p_d: f64,
    pub social_welfare: f64,
    pub agents: BTreeMap<AgentId, AgentRecord>,
}

impl IterationRecord {
    pub fn imbalance(&self) -> f64 {
        self.p_g - self.p_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeRebuild {
    pub at_iteration: u64,
    pub center: AgentId,
    pub tree_diameter: u32,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub rebuilds: Vec<TreeRebuild>,
    pub message_rounds: u64,
    /// Messages sent per payload kind over the whole run; the audit surface
    /// for what ever went on the wire.
    pub message_counts: BTreeMap<&'static str, u64>,
    /// Iteration at which the early-stop criterion fired, if it did.
    pub converged_at: Option<u64>,
    pub final_agents: BTreeMap<AgentId, AgentState>,
    /// Every message of the run, in send order; empty unless capture was
    /// requested.
    pub message_log: Vec<Message>,
}

/// A failed run still surrenders everything it recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("run failed after {} completed iterations: {error}", records.len())]
pub struct RunFailure {
    pub records: Vec<IterationRecord>,
    pub error: EngineError,
}

/// Totals computed the obvious way, summing in ascending id order. The
/// reference the sweeps are checked against.
pub fn direct_aggregate(agents: &BTreeMap<AgentId, AgentState>) -> AggregateVector {
    agents
        .values()
        .map(init_aggregate)
        .fold(AggregateVector::zero(), SweepValue::add)
}

fn reference_price(
    agents: &BTreeMap<AgentId, AgentState>,
    fixed: Option<f64>,
) -> Result<f64, AgentError> {
    let price = match fixed {
        Some(p) => p,
        None => system_price(&direct_aggregate(agents))?,
    };
    // A zero price starves every consumer's utility scale; surface it here
    // rather than as a mid-iteration gradient error.
    if price <= 0.0
        && agents.values().any(|a| a.kind() == AgentKind::Consumer)
    {
        return Err(AgentError::NonpositivePrice(price));
    }
    Ok(price)
}

/// Runs the distance flood, the center election, and the tree assembly over
/// `topology`, exchanging real messages. Returns the overlay and the number
/// of message rounds consumed.
pub fn run_mdst_phase(topology: &Topology) -> Result<(TreeOverlay, u64), EngineError> {
    let mut net = Network::default();
    let tree = mdst_phase(topology, &mut net)?;
    Ok((tree, net.round))
}

fn mdst_phase(topology: &Topology, net: &mut Network) -> Result<TreeOverlay, EngineError> {
    let n = topology.node_count();
    let mut machines: BTreeMap<AgentId, ApspAgent> = topology
        .nodes()
        .map(|a| (a, ApspAgent::new(a, n)))
        .collect();
    let mut rounds = 0u32;
    while !machines.values().all(ApspAgent::flood_complete) {
        if rounds >= mdst::round_cap(n) {
            let incomplete = machines.values().filter(|m| !m.flood_complete()).count();
            return Err(MdstError::Disconnected { rounds, incomplete }.into());
        }
        let mut sends = Vec::new();
        for (&id, m) in machines.iter_mut() {
            let ann = m.drain_announcement();
            if ann.is_empty() {
                continue;
            }
            for &nbr in topology.neighbors(id)? {
                if !ann.distances.is_empty() {
                    sends.push((
                        nbr,
                        Message {
                            sender: id,
                            round: net.round,
                            payload: Payload::DistanceAnnounce(ann.distances.clone()),
                        },
                    ));
                }
                if !ann.eccentricities.is_empty() {
                    sends.push((
                        nbr,
                        Message {
                            sender: id,
                            round: net.round,
                            payload: Payload::EccentricityAnnounce(
                                ann.eccentricities.clone(),
                            ),
                        },
                    ));
                }
            }
        }
        let delivered = net.exchange(sends);
        rounds += 1;
        for (dest, msgs) in delivered {
            let machine = machines.get_mut(&dest).expect("recipient exists");
            for msg in msgs {
                let ann = match msg.payload {
                    Payload::DistanceAnnounce(d) => FloodAnnouncement {
                        distances: d,
                        eccentricities: Vec::new(),
                    },
                    Payload::EccentricityAnnounce(e) => FloodAnnouncement {
                        distances: Vec::new(),
                        eccentricities: e,
                    },
                    other => unreachable!("tree build round carried {}", other.kind()),
                };
                machine.receive(msg.sender, &ann);
            }
        }
    }
    // Every machine elects from its own flooded view; they must agree.
    let mut elected = machines
        .values()
        .map(|m| m.elect().expect("flood complete"));
    let center = elected.next().expect("nonempty network");
    debug_assert!(elected.all(|c| c == center), "election disagreement");
    let tables: BTreeMap<AgentId, mdst::DistanceTable> = machines
        .into_iter()
        .map(|(id, m)| (id, m.into_table()))
        .collect();
    Ok(mdst::build_tree(topology, &tables, center)?)
}

struct Sim {
    agents: BTreeMap<AgentId, AgentState>,
    topology: Topology,
    tree: TreeOverlay,
    schedule: StepsizeSchedule,
    alpha0: f64,
    fixed_price: Option<f64>,
    net: Network,
}

impl Sim {
    fn new(
        scenario: &ScenarioFile,
        capture_messages: bool,
    ) -> Result<(Sim, TreeRebuild), EngineError> {
        let agents = scenario.initial_agents();
        let topology = scenario.topology()?;
        let mut net = Network {
            log: capture_messages.then(Vec::new),
            ..Network::default()
        };
        let tree = mdst_phase(&topology, &mut net)?;
        let initial_build = TreeRebuild {
            at_iteration: 0,
            center: tree.root,
            tree_diameter: tree.tree_diameter,
            rounds: net.round,
        };
        let price = reference_price(&agents, scenario.fixed_price)?;
        let schedule = StepsizeSchedule::new(scenario.alpha0, &agents, price);
        Ok((
            Sim {
                agents,
                topology,
                tree,
                schedule,
                alpha0: scenario.alpha0,
                fixed_price: scenario.fixed_price,
                net,
            },
            initial_build,
        ))
    }

    fn recompute_schedule(&mut self) -> Result<(), EngineError> {
        let price = reference_price(&self.agents, self.fixed_price)?;
        self.schedule = StepsizeSchedule::new(self.alpha0, &self.agents, price);
        Ok(())
    }

    /// Applies one event at an iteration boundary. Returns whether
    /// membership (and therefore the overlay) changed.
    fn apply_event(&mut self, action: &EventAction) -> Result<bool, EngineError> {
        match action {
            EventAction::BaseLoadSet { consumer, watts } => {
                if !(*watts >= 0.0) {
                    return Err(EngineError::EventRejected(format!(
                        "base load {watts} for agent {consumer} is negative"
                    )));
                }
                let state = self.agents.get_mut(consumer).ok_or_else(|| {
                    EngineError::EventRejected(format!("agent {consumer} does not exist"))
                })?;
                match &mut state.params {
                    AgentParams::Consumer(c) => c.base_load = *watts,
                    AgentParams::Generator(_) => {
                        return Err(EngineError::EventRejected(format!(
                            "agent {consumer} is a generator and carries no base load"
                        )))
                    }
                }
                Ok(false)
            }
            EventAction::Join { agent, edges } => {
                if self.agents.contains_key(&agent.id) {
                    return Err(EngineError::EventRejected(format!(
                        "agent {} already exists",
                        agent.id
                    )));
                }
                let state = agent.to_state();
                let problems = state.violations();
                if !problems.is_empty() {
                    return Err(EngineError::EventRejected(format!(
                        "joining agent {} is infeasible: {}",
                        agent.id,
                        problems.join("; ")
                    )));
                }
                self.topology = self.topology.with_agent_added(agent.id, edges)?;
                self.agents.insert(agent.id, state);
                Ok(true)
            }
            EventAction::Leave { agents } => {
                self.topology = self.topology.with_agents_removed(agents)?;
                for id in agents {
                    self.agents.remove(id);
                }
                Ok(true)
            }
        }
    }

    fn rebuild_tree(&mut self, at_iteration: u64) -> Result<TreeRebuild, EngineError> {
        let before = self.net.round;
        self.tree = mdst_phase(&self.topology, &mut self.net)?;
        Ok(TreeRebuild {
            at_iteration,
            center: self.tree.root,
            tree_diameter: self.tree.tree_diameter,
            rounds: self.net.round - before,
        })
    }

    /// One sweep over the tree, driven through real messages. Mirrors the
    /// pure reference in the consensus module round for round.
    fn run_sweep<V: SweepValue>(
        &mut self,
        initial: &BTreeMap<AgentId, V>,
        wrap: fn(V) -> SweepData,
        unwrap: fn(SweepData) -> V,
    ) -> BTreeMap<AgentId, V> {
        debug_assert!(initial.keys().eq(self.tree.nodes().collect::<Vec<_>>().iter()));
        let mut states: BTreeMap<AgentId, SweepState<V>> = initial
            .iter()
            .map(|(&a, &x)| {
                (
                    a,
                    SweepState::new(x, self.tree.degree(a), self.tree.tree_diameter),
                )
            })
            .collect();
        while states.values().any(|s| !s.is_complete()) {
            let mut sends = Vec::new();
            for (&a, s) in &states {
                let x = s.outgoing().expect("all agents share one horizon");
                for &b in &self.tree.tree_neighbors[&a] {
                    sends.push((
                        b,
                        Message {
                            sender: a,
                            round: self.net.round,
                            payload: Payload::SweepValue(wrap(x)),
                        },
                    ));
                }
            }
            let delivered = self.net.exchange(sends);
            for (dest, msgs) in delivered {
                let s = states.get_mut(&dest).expect("tree node");
                for msg in msgs {
                    let data = match msg.payload {
                        Payload::SweepValue(d) => d,
                        other => unreachable!("sweep round carried {}", other.kind()),
                    };
                    s.fold(unwrap(data));
                }
            }
            for s in states.values_mut() {
                s.advance();
            }
        }
        states.into_iter().map(|(a, s)| (a, s.value())).collect()
    }

    fn check_consistency(
        &self,
        k: u64,
        globals: &BTreeMap<AgentId, AggregateVector>,
        sums: &BTreeMap<AgentId, f64>,
    ) -> Result<(), EngineError> {
        let direct = direct_aggregate(&self.agents);
        let direct_v = direct.p_d - direct.p_g;
        let check = |agent: AgentId,
                     field: &'static str,
                     consensus: f64,
                     reference: f64|
         -> Result<(), EngineError> {
            let scale = consensus.abs().max(reference.abs()).max(1.0);
            if (consensus - reference).abs() > AGG_CONSISTENCY_REL_TOL * scale {
                return Err(EngineError::AggregateMismatch {
                    iteration: k,
                    agent,
                    field,
                    consensus,
                    direct: reference,
                });
            }
            Ok(())
        };
        for (&a, agg) in globals {
            check(a, "P_D", agg.p_d, direct.p_d)?;
            check(a, "P_G", agg.p_g, direct.p_g)?;
            check(a, "C_G", agg.c_g, direct.c_g)?;
            check(a, "N", agg.n, direct.n)?;
            check(a, "M", agg.m, direct.m)?;
        }
        for (&a, &v) in sums {
            check(a, "signed power sum", v, direct_v)?;
        }
        Ok(())
    }

    /// One full iteration: 1 + d + d message rounds, then the local updates.
    /// Returns the record and the largest single-agent power change.
    fn run_iteration(&mut self, k: u64) -> Result<(IterationRecord, f64), EngineError> {
        // (a) Powers to topology neighbors. The deterministic reference
        // dynamics below use network totals rather than neighbor averages,
        // so these values only feed the synchrony audit; the round is part
        // of the protocol's fixed cost either way.
        let mut sends = Vec::new();
        for (&id, s) in &self.agents {
            for &nbr in self.topology.neighbors(id)? {
                sends.push((
                    nbr,
                    Message {
                        sender: id,
                        round: self.net.round,
                        payload: Payload::PowerValue(s.power),
                    },
                ));
            }
        }
        let delivered = self.net.exchange(sends);
        for (dest, msgs) in &delivered {
            debug_assert_eq!(
                msgs.len(),
                self.topology.neighbors(*dest)?.len(),
                "mailbox drained exactly once per neighbor"
            );
            for msg in msgs {
                match msg.payload {
                    Payload::PowerValue(p) => {
                        debug_assert_eq!(p, self.agents[&msg.sender].power);
                    }
                    _ => unreachable!("power round carried {}", msg.payload.kind()),
                }
            }
        }

        // (b) Global totals over the tree, (c) signed power sum.
        let initial_globals: BTreeMap<AgentId, AggregateVector> = self
            .agents
            .iter()
            .map(|(&a, s)| (a, init_aggregate(s)))
            .collect();
        let globals = self.run_sweep(&initial_globals, SweepData::Globals, |d| match d {
            SweepData::Globals(g) => g,
            SweepData::PowerSum(_) => unreachable!("globals sweep"),
        });
        let initial_sums: BTreeMap<AgentId, f64> = self
            .agents
            .iter()
            .map(|(&a, s)| (a, s.signed_power()))
            .collect();
        let sums = self.run_sweep(&initial_sums, SweepData::PowerSum, |d| match d {
            SweepData::PowerSum(v) => v,
            SweepData::Globals(_) => unreachable!("power sum sweep"),
        });
        self.check_consistency(k, &globals, &sums)?;

        // (d)-(g) Local updates: gradient step on the balance-shifted power,
        // box projection, balance projection for generators, then the ramp
        // check. Each agent sees its own state and its own sweep results.
        let alpha = self.schedule.alpha(k);
        let fixed_price = self.fixed_price;
        let mut record_price = None;
        let mut agent_records = BTreeMap::new();
        let mut max_delta = 0.0f64;
        for (&id, state) in self.agents.iter_mut() {
            let agg = &globals[&id];
            let v = sums[&id];
            let price = match fixed_price {
                Some(p) => p,
                None => system_price(agg)?,
            };
            if record_price.is_none() {
                record_price = Some(price);
            }
            let grad = local_gradient(state, price)?;
            let shift = v / agg.population();
            let anchor = match state.kind() {
                AgentKind::Consumer => state.power - shift,
                AgentKind::Generator => state.power + shift,
            };
            let z = gradient_step(anchor, alpha, grad);
            let z = state.box_project(z);
            let z = match state.kind() {
                AgentKind::Generator => balance_project(z, agg)?,
                AgentKind::Consumer => z,
            };
            let rate_violation = state.apply_update(z);
            let (lo, hi) = state.box_bounds();
            let box_violation = (lo - state.power).max(state.power - hi).max(0.0);
            max_delta = max_delta.max((state.power - state.power_prev).abs());
            agent_records.insert(
                id,
                AgentRecord {
                    kind: state.kind(),
                    power: state.power,
                    base_load: state.base_load(),
                    box_violation,
                    rate_violation,
                },
            );
        }

        let price = record_price.expect("nonempty network");
        let p_g: f64 = self
            .agents
            .values()
            .filter(|s| s.kind() == AgentKind::Generator)
            .map(|s| s.power)
            .sum();
        let p_d: f64 = self
            .agents
            .values()
            .filter(|s| s.kind() == AgentKind::Consumer)
            .map(AgentState::demand)
            .sum();
        let powers: BTreeMap<AgentId, f64> =
            self.agents.iter().map(|(&a, s)| (a, s.power)).collect();
        let social_welfare = oracle::social_welfare(&self.agents, &powers, price)?;
        Ok((
            IterationRecord {
                k,
                price,
                p_g,
                p_d,
                social_welfare,
                agents: agent_records,
            },
            max_delta,
        ))
    }
}

/// Runs a scenario end to end. Events apply at iteration boundaries, before
/// the iteration with the matching index; membership changes rebuild the
/// tree and both kinds of event refresh the stepsize cap. With a convergence
/// epsilon set, the run stops once the largest per-agent power change stays
/// below it for 50 consecutive iterations, but never while events are still
/// pending.
pub fn run_scenario(scenario: &ScenarioFile) -> Result<RunOutput, Box<RunFailure>> {
    run_scenario_captured(scenario, false)
}

/// [`run_scenario`] with optional retention of every message sent, for
/// audits of what the protocol put on the wire.
pub fn run_scenario_captured(
    scenario: &ScenarioFile,
    capture_messages: bool,
) -> Result<RunOutput, Box<RunFailure>> {
    let mut records: Vec<IterationRecord> = Vec::new();
    let fail = |records: Vec<IterationRecord>, error: EngineError| {
        Box::new(RunFailure { records, error })
    };

    let (mut sim, initial_build) = match Sim::new(scenario, capture_messages) {
        Ok(x) => x,
        Err(e) => return Err(fail(records, e)),
    };
    let mut rebuilds = vec![initial_build];

    // Stable order by boundary, file order within one boundary.
    let mut events: Vec<&crate::scenario::ScenarioEvent> = scenario.events.iter().collect();
    events.sort_by_key(|e| e.at_iteration);
    let mut next_event = 0usize;

    let mut streak = 0u64;
    let mut converged_at = None;
    for k in 0..scenario.max_iterations {
        let mut membership_changed = false;
        let mut any_event = false;
        while next_event < events.len() && events[next_event].at_iteration <= k {
            match sim.apply_event(&events[next_event].action) {
                Ok(changed) => membership_changed |= changed,
                Err(e) => return Err(fail(records, e)),
            }
            any_event = true;
            next_event += 1;
        }
        if membership_changed {
            match sim.rebuild_tree(k) {
                Ok(r) => rebuilds.push(r),
                Err(e) => return Err(fail(records, e)),
            }
        }
        if any_event {
            if let Err(e) = sim.recompute_schedule() {
                return Err(fail(records, e));
            }
        }

        match sim.run_iteration(k) {
            Ok((record, max_delta)) => {
                records.push(record);
                if let Some(eps) = scenario.convergence_epsilon {
                    if next_event == events.len() && max_delta <= eps {
                        streak += 1;
                        if streak >= CONVERGENCE_STREAK {
                            converged_at = Some(k);
                            break;
                        }
                    } else {
                        streak = 0;
                    }
                }
            }
            Err(e) => return Err(fail(records, e)),
        }
    }

    Ok(RunOutput {
        records,
        rebuilds,
        message_rounds: sim.net.round,
        message_counts: sim.net.counts,
        converged_at,
        final_agents: sim.agents,
        message_log: sim.net.log.unwrap_or_default(),
    })
}
