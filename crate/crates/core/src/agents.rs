//! Local agent models: quadratic generation cost and consumption utility,
//! their gradients in the shared minimization convention, the price, and the
//! projection/update steps each agent applies to its own power.
//!
//! Sign convention, used everywhere downstream: the network-wide objective is
//! a minimization of Σ (cost of generation) − Σ (utility of consumption), and
//! the balance-sweep coordinate is signed power (consumers positive by their
//! total demand, generators negative). Box bounds stay in unsigned watts, so
//! the engine converts at the boundary.

use crate::consensus::AggregateVector;
use crate::graph::AgentId;

/// Tolerance for treating the network as balanced: no correction is applied
/// when |P_G − P_D| is below this fraction of the larger total (floored at
/// 1 W so near-zero systems do not divide by dust).
const BALANCE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("price must be positive, got {0}")]
    NonpositivePrice(f64),
    #[error("total demand is zero, price undefined")]
    ZeroDemand,
    #[error("balance projection needs at least one generator")]
    NoGenerators,
}

/// Generator: produces `power` watts at cost (1/c)(p − p²/p_max).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// Cost coefficient c; larger c means cheaper power.
    pub c: f64,
    pub p_max: f64,
    pub p_min: f64,
    /// Per-iteration ramp bounds, t_min < 0 < t_max.
    pub t_min: f64,
    pub t_max: f64,
}

/// Consumer: a fixed base load plus a controllable load in
/// [p_min, p_max] valued at (v/price)(p − p²/p_max).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsumerParams {
    /// Power value v; larger v means the consumer holds demand longer as the
    /// price rises.
    pub v: f64,
    pub p_max: f64,
    pub p_min: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub base_load: f64,
}

impl GeneratorParams {
    /// Human-readable invariant violations, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.c > 0.0) {
            v.push(format!("c must be positive, got {}", self.c));
        }
        if !(self.p_min >= 0.0) {
            v.push(format!("p_min must be nonnegative, got {}", self.p_min));
        }
        if !(self.p_max > self.p_min) {
            v.push(format!(
                "p_max ({}) must exceed p_min ({})",
                self.p_max, self.p_min
            ));
        }
        if !(self.t_min < 0.0) {
            v.push(format!("t_min must be negative, got {}", self.t_min));
        }
        if !(self.t_max > 0.0) {
            v.push(format!("t_max must be positive, got {}", self.t_max));
        }
        v
    }
}

impl ConsumerParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.v > 0.0) {
            v.push(format!("v must be positive, got {}", self.v));
        }
        if !(self.p_min >= 0.0) {
            v.push(format!("p_min must be nonnegative, got {}", self.p_min));
        }
        if !(self.p_max > self.p_min) {
            v.push(format!(
                "p_max ({}) must exceed p_min ({})",
                self.p_max, self.p_min
            ));
        }
        if !(self.t_min < 0.0) {
            v.push(format!("t_min must be negative, got {}", self.t_min));
        }
        if !(self.t_max > 0.0) {
            v.push(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.base_load >= 0.0) {
            v.push(format!(
                "base_load must be nonnegative, got {}",
                self.base_load
            ));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Generator,
    Consumer,
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentKind::Generator => f.write_str("generator"),
            AgentKind::Consumer => f.write_str("consumer"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentParams {
    Generator(GeneratorParams),
    Consumer(ConsumerParams),
}

/// One agent's live state: its controllable power now and one step back
/// (the ramp check needs the pair).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub params: AgentParams,
    pub power: f64,
    pub power_prev: f64,
}

impl AgentState {
    pub fn new(id: AgentId, params: AgentParams, initial_power: f64) -> AgentState {
        AgentState {
            id,
            params,
            power: initial_power,
            power_prev: initial_power,
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self.params {
            AgentParams::Generator(_) => AgentKind::Generator,
            AgentParams::Consumer(_) => AgentKind::Consumer,
        }
    }

    pub fn box_bounds(&self) -> (f64, f64) {
        match &self.params {
            AgentParams::Generator(g) => (g.p_min, g.p_max),
            AgentParams::Consumer(c) => (c.p_min, c.p_max),
        }
    }

    pub fn rate_bounds(&self) -> (f64, f64) {
        match &self.params {
            AgentParams::Generator(g) => (g.t_min, g.t_max),
            AgentParams::Consumer(c) => (c.t_min, c.t_max),
        }
    }

    pub fn base_load(&self) -> f64 {
        match &self.params {
            AgentParams::Generator(_) => 0.0,
            AgentParams::Consumer(c) => c.base_load,
        }
    }

    /// Total demand a consumer presents to the network; zero for generators.
    pub fn demand(&self) -> f64 {
        match &self.params {
            AgentParams::Generator(_) => 0.0,
            AgentParams::Consumer(c) => c.base_load + self.power,
        }
    }

    /// The balance-sweep coordinate: +total demand / −generation.
    pub fn signed_power(&self) -> f64 {
        match self.kind() {
            AgentKind::Generator => -self.power,
            AgentKind::Consumer => self.demand(),
        }
    }

    /// Param violations plus the initial-power box check, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = match &self.params {
            AgentParams::Generator(g) => g.violations(),
            AgentParams::Consumer(c) => c.violations(),
        };
        let (lo, hi) = self.box_bounds();
        if !(self.power >= lo && self.power <= hi) {
            v.push(format!(
                "power ({}) must lie in [{}, {}]",
                self.power, lo, hi
            ));
        }
        v
    }

    /// Clamp to the agent's own box.
    pub fn box_project(&self, z: f64) -> f64 {
        let (lo, hi) = self.box_bounds();
        z.clamp(lo, hi)
    }

    /// Largest gradient magnitude this agent can produce anywhere on its box
    /// at the given price. The gradient is affine in power, so the endpoints
    /// bound it.
    pub fn gradient_bound(&self, price: f64) -> f64 {
        let (lo, hi) = self.box_bounds();
        let slope = |p: f64| match &self.params {
            AgentParams::Generator(g) => (1.0 / g.c) * (1.0 - 2.0 * p / g.p_max),
            AgentParams::Consumer(c) => -(c.v / price) * (1.0 - 2.0 * p / c.p_max),
        };
        slope(lo).abs().max(slope(hi).abs())
    }

    /// Shifts the power history: prev ← current, current ← new. Returns how
    /// far the step overran the ramp bounds (0 when clean). The overrun is
    /// reported, not clamped; keeping the step inside the bounds is the
    /// stepsize policy's job.
    pub fn apply_update(&mut self, new_power: f64) -> f64 {
        let (t_min, t_max) = self.rate_bounds();
        let delta = new_power - self.power;
        self.power_prev = self.power;
        self.power = new_power;
        if delta > t_max {
            delta - t_max
        } else if delta < t_min {
            t_min - delta
        } else {
            0.0
        }
    }
}

/// (1/c)(p − p²/p_max): zero at 0 and at p_max, peak at p_max/2.
pub fn generation_cost(params: &GeneratorParams, p: f64) -> f64 {
    (1.0 / params.c) * (p - p * p / params.p_max)
}

/// (v/price)(p − p²/p_max), the consumer's value of p watts at this price.
pub fn consumer_utility(params: &ConsumerParams, p: f64, price: f64) -> Result<f64, AgentError> {
    if !(price > 0.0) {
        return Err(AgentError::NonpositivePrice(price));
    }
    Ok((params.v / price) * (p - p * p / params.p_max))
}

/// Network price: cost-weighted generation over total demand.
pub fn system_price(agg: &AggregateVector) -> Result<f64, AgentError> {
    if !(agg.p_d > 0.0) {
        return Err(AgentError::ZeroDemand);
    }
    if agg.c_g == 0.0 {
        log::warn!("price degenerate: cost-weighted generation is zero, price floored at 0");
        return Ok(0.0);
    }
    Ok(agg.c_g / agg.p_d)
}

/// Derivative of the agent's term in the shared minimization objective
/// (generation cost enters positively, utility negatively).
pub fn local_gradient(state: &AgentState, price: f64) -> Result<f64, AgentError> {
    match &state.params {
        AgentParams::Generator(g) => Ok((1.0 / g.c) * (1.0 - 2.0 * state.power / g.p_max)),
        AgentParams::Consumer(c) => {
            if !(price > 0.0) {
                return Err(AgentError::NonpositivePrice(price));
            }
            Ok(-(c.v / price) * (1.0 - 2.0 * state.power / c.p_max))
        }
    }
}

/// One consensus-anchored gradient step in the signed coordinate.
pub fn gradient_step(consensus_avg: f64, alpha: f64, grad: f64) -> f64 {
    debug_assert!(alpha > 0.0);
    consensus_avg - alpha * grad
}

/// Generator-side balance restoration: each of the N generators absorbs an
/// equal share of the surplus P_G − P_D. Below tolerance the input passes
/// through untouched.
pub fn balance_project(z1: f64, agg: &AggregateVector) -> Result<f64, AgentError> {
    if !(agg.n >= 1.0) {
        return Err(AgentError::NoGenerators);
    }
    let surplus = agg.p_g - agg.p_d;
    if surplus.abs() <= BALANCE_REL_TOL * agg.p_g.max(agg.p_d).max(1.0) {
        return Ok(z1);
    }
    Ok(z1 - surplus / agg.n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aid(n: u32) -> AgentId {
        AgentId::new(n)
    }

    fn gen_params(c: f64, p_max: f64) -> GeneratorParams {
        GeneratorParams {
            c,
            p_max,
            p_min: 0.0,
            t_min: -100.0,
            t_max: 100.0,
        }
    }

    fn con_params(v: f64, p_max: f64) -> ConsumerParams {
        ConsumerParams {
            v,
            p_max,
            p_min: 0.0,
            t_min: -100.0,
            t_max: 100.0,
            base_load: 0.0,
        }
    }

    fn generator(c: f64, p_max: f64, power: f64) -> AgentState {
        AgentState::new(aid(1), AgentParams::Generator(gen_params(c, p_max)), power)
    }

    fn consumer(v: f64, p_max: f64, power: f64) -> AgentState {
        AgentState::new(aid(2), AgentParams::Consumer(con_params(v, p_max)), power)
    }

    #[test]
    fn cost_vanishes_at_zero_and_at_capacity() {
        let g = gen_params(1.0, 4000.0);
        assert_eq!(generation_cost(&g, 0.0), 0.0);
        assert_eq!(generation_cost(&g, 4000.0), 0.0);
        let g2 = gen_params(2.0, 4000.0);
        assert_relative_eq!(generation_cost(&g2, 2000.0), 500.0);
    }

    #[test]
    fn utility_vanishes_at_zero_and_at_capacity() {
        let c = con_params(1.0, 4100.0);
        assert_eq!(consumer_utility(&c, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(consumer_utility(&c, 4100.0, 1.0).unwrap(), 0.0);
        let c2 = con_params(2.0, 4000.0);
        assert_relative_eq!(consumer_utility(&c2, 1000.0, 4.0).unwrap(), 375.0);
        assert!(matches!(
            consumer_utility(&c2, 1000.0, 0.0),
            Err(AgentError::NonpositivePrice(_))
        ));
    }

    #[test]
    fn price_is_cost_weighted_generation_over_demand() {
        let agg = AggregateVector {
            p_d: 400.0,
            p_g: 500.0,
            c_g: 500.0,
            n: 1.0,
            m: 1.0,
        };
        assert_relative_eq!(system_price(&agg).unwrap(), 1.25);
        let free = AggregateVector { c_g: 0.0, ..agg };
        assert_eq!(system_price(&free).unwrap(), 0.0);
        let no_demand = AggregateVector { p_d: 0.0, ..agg };
        assert_eq!(system_price(&no_demand).unwrap_err(), AgentError::ZeroDemand);
    }

    #[test]
    fn gradients_at_reference_points() {
        assert_eq!(local_gradient(&generator(1.0, 4000.0, 2000.0), 1.0).unwrap(), 0.0);
        assert_eq!(local_gradient(&generator(1.0, 4000.0, 0.0), 1.0).unwrap(), 1.0);
        assert_eq!(local_gradient(&consumer(1.0, 4000.0, 0.0), 1.0).unwrap(), -1.0);
        assert!(matches!(
            local_gradient(&consumer(1.0, 4000.0, 0.0), -1.0),
            Err(AgentError::NonpositivePrice(_))
        ));
    }

    #[test]
    fn gradient_step_reference_points() {
        assert_eq!(gradient_step(0.0, 12.0, 0.0), 0.0);
        assert_eq!(gradient_step(100.0, 10.0, 1.0), 90.0);
        assert_eq!(gradient_step(-50.0, 2.0, -25.0), 0.0);
    }

    #[test]
    fn box_projection_clamps() {
        let mut g = generator(1.0, 4000.0, 2000.0);
        if let AgentParams::Generator(ref mut p) = g.params {
            p.p_min = 100.0;
        }
        assert_eq!(g.box_project(5000.0), 4000.0);
        assert_eq!(g.box_project(50.0), 100.0);
        assert_eq!(g.box_project(2000.0), 2000.0);
        // Idempotence.
        for z in [-1e6, 0.0, 99.9, 100.0, 3000.0, 4000.0, 1e9] {
            assert_eq!(g.box_project(g.box_project(z)), g.box_project(z));
        }
    }

    #[test]
    fn box_projection_is_nearest_feasible_point() {
        let g = generator(1.0, 4000.0, 2000.0);
        let (lo, hi) = g.box_bounds();
        let mut z = -500.0;
        while z <= 4500.0 {
            let projected = g.box_project(z);
            let mut best = lo;
            let mut x = lo;
            while x <= hi {
                if (x - z).abs() < (best - z).abs() {
                    best = x;
                }
                x += 0.5;
            }
            assert!((projected - z).abs() <= (best - z).abs() + 1e-12);
            z += 7.3;
        }
    }

    #[test]
    fn balance_projection_reference_points() {
        let agg = AggregateVector {
            p_d: 900.0,
            p_g: 1000.0,
            c_g: 0.0,
            n: 5.0,
            m: 0.0,
        };
        assert_relative_eq!(balance_project(500.0, &agg).unwrap(), 480.0);
        let balanced = AggregateVector {
            p_d: 1000.0,
            ..agg
        };
        assert_eq!(balance_project(500.0, &balanced).unwrap(), 500.0);
        let deficit = AggregateVector {
            p_d: 1000.0,
            p_g: 900.0,
            ..agg
        };
        assert_relative_eq!(balance_project(500.0, &deficit).unwrap(), 520.0);
        let no_gen = AggregateVector { n: 0.0, ..agg };
        assert_eq!(
            balance_project(500.0, &no_gen).unwrap_err(),
            AgentError::NoGenerators
        );
    }

    #[test]
    fn balance_projection_restores_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let powers: Vec<f64> = (0..n).map(|_| rng.gen_range(100.0..5000.0)).collect();
            let p_g: f64 = powers.iter().sum();
            let p_d = rng.gen_range(100.0..20000.0);
            let agg = AggregateVector {
                p_d,
                p_g,
                c_g: 0.0,
                n: n as f64,
                m: 0.0,
            };
            let corrected: f64 = powers
                .iter()
                .map(|&z| balance_project(z, &agg).unwrap())
                .sum();
            assert_abs_diff_eq!(corrected, p_d, epsilon = 1e-9 * p_d.max(p_g));
        }
    }

    #[test]
    fn price_positive_for_positive_cost_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c_g: f64 = (0..4)
                .map(|_| rng.gen_range(0.1..2.0) * rng.gen_range(1.0..5000.0))
                .sum();
            let agg = AggregateVector {
                p_d: rng.gen_range(1.0..20000.0),
                p_g: 0.0,
                c_g,
                n: 4.0,
                m: 1.0,
            };
            assert!(system_price(&agg).unwrap() > 0.0);
        }
    }

    #[test]
    fn update_shifts_history_and_flags_ramp_overruns() {
        let mut g = generator(1.0, 4000.0, 100.0);
        assert_eq!(g.apply_update(150.0), 0.0);
        assert_eq!((g.power_prev, g.power), (100.0, 150.0));
        assert_eq!(g.apply_update(150.0), 0.0);
        assert_eq!(g.apply_update(300.0), 50.0);
        assert_eq!(g.apply_update(100.0), 100.0);
    }

    /// The gradients are derivatives of quadratics, so a central difference
    /// reproduces them to rounding error across random parameters.
    #[test]
    fn gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..1000 {
            let p_max = rng.gen_range(500.0..10000.0);
            let p = rng.gen_range(0.0..p_max);
            let h = 1e-4 * p_max;
            let (analytic, fd) = if i % 2 == 0 {
                let params = gen_params(rng.gen_range(0.5..2.0), p_max);
                let state = AgentState::new(aid(1), AgentParams::Generator(params), p);
                let fd = (generation_cost(&params, p + h) - generation_cost(&params, p - h))
                    / (2.0 * h);
                (local_gradient(&state, 1.0).unwrap(), fd)
            } else {
                let price = rng.gen_range(0.5..2.0);
                let params = con_params(rng.gen_range(0.5..2.0), p_max);
                let state = AgentState::new(aid(1), AgentParams::Consumer(params), p);
                let fd = -(consumer_utility(&params, p + h, price).unwrap()
                    - consumer_utility(&params, p - h, price).unwrap())
                    / (2.0 * h);
                (local_gradient(&state, price).unwrap(), fd)
            };
            let denom = analytic.abs().max(1e-12);
            assert!(
                ((fd - analytic) / denom).abs() <= 1e-6,
                "sample {i}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn param_validation_catches_each_field() {
        let bad_gen = GeneratorParams {
            c: 0.0,
            p_max: 50.0,
            p_min: 100.0,
            t_min: 1.0,
            t_max: -1.0,
        };
        assert_eq!(bad_gen.violations().len(), 4);
        let bad_con = ConsumerParams {
            v: -1.0,
            p_max: -6.0,
            p_min: -5.0,
            t_min: -1.0,
            t_max: 1.0,
            base_load: -2.0,
        };
        assert_eq!(bad_con.violations().len(), 4);
        assert!(gen_params(1.0, 4000.0).violations().is_empty());
        let outside = generator(1.0, 4000.0, 4500.0);
        assert_eq!(outside.violations().len(), 1);
    }

    #[test]
    fn signed_power_and_demand_conventions() {
        let g = generator(1.0, 4000.0, 1500.0);
        assert_eq!(g.signed_power(), -1500.0);
        assert_eq!(g.demand(), 0.0);
        let mut c = consumer(1.0, 4000.0, 1000.0);
        if let AgentParams::Consumer(ref mut p) = c.params {
            p.base_load = 250.0;
        }
        assert_eq!(c.demand(), 1250.0);
        assert_eq!(c.signed_power(), 1250.0);
    }
}
