//! Centralized reference solver for the welfare dispatch problem at a fixed
//! price: maximize Σ utility − Σ cost subject to supply = demand and the
//! per-agent boxes. Used only by tests and the CLI verify mode; the
//! simulation itself never calls it.
//!
//! Method: with multiplier t on the balance constraint, each agent's
//! stationary response is closed-form, p_a(t) = clamp((p_max/2)(1 + k_a t))
//! with k = c for generators and k = price/v for consumers. Both responses
//! rise with t, and with the instances this project targets (consumer boxes
//! above the utility vertex, so consumers pin low around the root) the
//! balance residual R(t) = supply − demand crosses zero once. A coarse
//! presweep locates the leftmost sign change and bisection finishes the job,
//! which also keeps the solver deterministic when R is locally flat.
//!
//! The dispatch returned is the first-order (equal-marginal) point — the
//! same point the distributed dynamics settle on. Because the generation
//! cost curve is concave, that point is the true welfare maximum only when
//! at most one generator sits strictly inside its box; the brute-force
//! comparisons in the tests stick to that regime.

use std::collections::BTreeMap;

use crate::agents::{
    consumer_utility, generation_cost, AgentError, AgentParams, AgentState,
};
use crate::graph::AgentId;

const BISECT_MAX_ITERS: u32 = 200;
const RESIDUAL_REL_TOL: f64 = 1e-9;
/// Interior-vs-bound decision width and KKT residual tolerance.
const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("infeasible: supply range [{supply_min}, {supply_max}] W cannot meet demand range [{demand_min}, {demand_max}] W")]
    Infeasible {
        supply_min: f64,
        supply_max: f64,
        demand_min: f64,
        demand_max: f64,
    },
    #[error("no balance crossing found over multiplier range [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error("bisection stalled with relative balance residual {residual}")]
    NoConvergence { residual: f64 },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// The reference dispatch: optimal controllable power per agent, the balance
/// multiplier, and the welfare value there.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub powers: BTreeMap<AgentId, f64>,
    pub multiplier: f64,
    pub objective: f64,
}

fn response_slope(state: &AgentState, price: f64) -> f64 {
    match &state.params {
        AgentParams::Generator(g) => g.c,
        AgentParams::Consumer(c) => price / c.v,
    }
}

/// Box-clamped stationary point of the agent's multiplier-shifted term.
fn response(state: &AgentState, t: f64, price: f64) -> f64 {
    let (lo, hi) = state.box_bounds();
    let p_max = match &state.params {
        AgentParams::Generator(g) => g.p_max,
        AgentParams::Consumer(c) => c.p_max,
    };
    ((p_max / 2.0) * (1.0 + response_slope(state, price) * t)).clamp(lo, hi)
}

/// Supply minus demand when every agent plays its response at multiplier t.
fn balance_residual(
    agents: &BTreeMap<AgentId, AgentState>,
    t: f64,
    price: f64,
) -> f64 {
    let mut r = 0.0;
    for state in agents.values() {
        let p = response(state, t, price);
        match state.kind() {
            crate::agents::AgentKind::Generator => r += p,
            crate::agents::AgentKind::Consumer => r -= p + state.base_load(),
        }
    }
    r
}

/// Σ utility of controllable consumption − Σ generation cost at the given
/// powers. Base loads carry no utility term; they are obligations, not
/// choices.
pub fn social_welfare(
    agents: &BTreeMap<AgentId, AgentState>,
    powers: &BTreeMap<AgentId, f64>,
    price: f64,
) -> Result<f64, AgentError> {
    let mut w = 0.0;
    for (id, state) in agents {
        let p = powers[id];
        match &state.params {
            AgentParams::Generator(g) => w -= generation_cost(g, p),
            AgentParams::Consumer(c) => w += consumer_utility(c, p, price)?,
        }
    }
    Ok(w)
}

/// First-order residual per agent at a candidate solution: the agent's
/// marginal (cost derivative for generators, utility derivative for
/// consumers) plus the multiplier. Zero for agents strictly inside their
/// box; signed at bounds (≤ 0 pinned low, ≥ 0 pinned high) when the point
/// is consistent with the clamped responses.
pub fn kkt_residuals(
    agents: &BTreeMap<AgentId, AgentState>,
    solution: &DispatchSolution,
    price: f64,
) -> BTreeMap<AgentId, f64> {
    agents
        .iter()
        .map(|(&id, state)| {
            let p = solution.powers[&id];
            let marginal = match &state.params {
                AgentParams::Generator(g) => (1.0 / g.c) * (1.0 - 2.0 * p / g.p_max),
                AgentParams::Consumer(c) => (c.v / price) * (1.0 - 2.0 * p / c.p_max),
            };
            (id, marginal + solution.multiplier)
        })
        .collect()
}

/// True when every agent's first-order condition holds at the solution,
/// with bound residuals scaled against each agent's box width.
pub fn is_first_order_point(
    agents: &BTreeMap<AgentId, AgentState>,
    solution: &DispatchSolution,
    price: f64,
) -> bool {
    let residuals = kkt_residuals(agents, solution, price);
    agents.iter().all(|(id, state)| {
        let (lo, hi) = state.box_bounds();
        let p = solution.powers[id];
        let r = residuals[id];
        let edge = KKT_TOL * (hi - lo).max(1.0);
        if p <= lo + edge {
            r <= KKT_TOL
        } else if p >= hi - edge {
            r >= -KKT_TOL
        } else {
            r.abs() <= KKT_TOL
        }
    })
}

/// Solves the dispatch at a fixed price. Ignores the agents' current powers;
/// only parameters and base loads matter.
pub fn solve_welfare(
    agents: &BTreeMap<AgentId, AgentState>,
    price: f64,
) -> Result<DispatchSolution, OracleError> {
    let mut supply = (0.0f64, 0.0f64);
    let mut demand = (0.0f64, 0.0f64);
    for state in agents.values() {
        let (lo, hi) = state.box_bounds();
        match state.kind() {
            crate::agents::AgentKind::Generator => {
                supply.0 += lo;
                supply.1 += hi;
            }
            crate::agents::AgentKind::Consumer => {
                if !(price > 0.0) {
                    return Err(AgentError::NonpositivePrice(price).into());
                }
                demand.0 += lo + state.base_load();
                demand.1 += hi + state.base_load();
            }
        }
    }
    if supply.0 > demand.1 || demand.0 > supply.1 {
        return Err(OracleError::Infeasible {
            supply_min: supply.0,
            supply_max: supply.1,
            demand_min: demand.0,
            demand_max: demand.1,
        });
    }

    // Multiplier range wide enough that every response saturates at both
    // ends: beyond it R(t) is constant, so any crossing lives inside.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for state in agents.values() {
        let (blo, bhi) = state.box_bounds();
        let p_max = match &state.params {
            AgentParams::Generator(g) => g.p_max,
            AgentParams::Consumer(c) => c.p_max,
        };
        let k = response_slope(state, price);
        lo = lo.min((2.0 * blo / p_max - 1.0) / k);
        hi = hi.max((2.0 * bhi / p_max - 1.0) / k);
    }
    let (lo, hi) = (lo - 1.0, hi + 1.0);

    // Presweep for the leftmost sign change, then bisect inside it. The
    // residual is piecewise linear and continuous, so a bracketed sign
    // change always contains a root.
    const SAMPLES: usize = 1024;
    let sample = |i: usize| lo + (hi - lo) * (i as f64) / (SAMPLES as f64);
    let mut bracket = None;
    let mut prev = balance_residual(agents, sample(0), price);
    if prev == 0.0 {
        bracket = Some((sample(0), sample(0)));
    } else {
        for i in 1..=SAMPLES {
            let t = sample(i);
            let r = balance_residual(agents, t, price);
            if r == 0.0 {
                bracket = Some((t, t));
                break;
            }
            if prev.signum() != r.signum() {
                bracket = Some((sample(i - 1), t));
                break;
            }
            prev = r;
        }
    }
    let (mut a, mut b) = bracket.ok_or(OracleError::NoRoot { lo, hi })?;
    let mut fa = balance_residual(agents, a, price);
    for _ in 0..BISECT_MAX_ITERS {
        if a == b {
            break;
        }
        let mid = 0.5 * (a + b);
        let fm = balance_residual(agents, mid, price);
        if fm == 0.0 {
            a = mid;
            b = mid;
            break;
        }
        if fa.signum() == fm.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    let multiplier = 0.5 * (a + b);

    let powers: BTreeMap<AgentId, f64> = agents
        .iter()
        .map(|(&id, s)| (id, response(s, multiplier, price)))
        .collect();
    let total_demand: f64 = agents
        .values()
        .filter(|s| s.kind() == crate::agents::AgentKind::Consumer)
        .map(|s| powers[&s.id] + s.base_load())
        .sum();
    let residual = balance_residual(agents, multiplier, price);
    if residual.abs() > RESIDUAL_REL_TOL * total_demand.max(1.0) {
        return Err(OracleError::NoConvergence {
            residual: residual.abs() / total_demand.max(1.0),
        });
    }
    let objective = social_welfare(agents, &powers, price)?;
    Ok(DispatchSolution {
        powers,
        multiplier,
        objective,
    })
}
