//! Scenario files: the TOML schema describing a network, its agents, the
//! run parameters, and the timed events, plus loading with full validation
//! and lossless re-serialization.
//!
//! Validation reports every problem it can find in one pass, each message
//! naming the offending field and the line of its enclosing table, and
//! statically replays the event timeline so that broken joins/leaves fail at
//! load time instead of mid-run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{
    AgentKind, AgentParams, AgentState, ConsumerParams, GeneratorParams,
};
use crate::graph::{AgentId, GraphError, Topology};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// One agent as declared in the file: identity, parameters, starting power.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: AgentId,
    pub params: AgentParams,
    pub initial_power: f64,
}

impl AgentSpec {
    pub fn to_state(&self) -> AgentState {
        AgentState::new(self.id, self.params, self.initial_power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    /// Replace the named consumer's base load with `watts`.
    BaseLoadSet { consumer: AgentId, watts: f64 },
    /// Splice a new agent in, connected through `edges`.
    Join { agent: AgentSpec, edges: Vec<AgentId> },
    /// Remove the listed agents and their incident edges.
    Leave { agents: Vec<AgentId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    /// Applied at the boundary before this iteration runs.
    pub at_iteration: u64,
    pub action: EventAction,
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub format_version: u32,
    pub max_iterations: u64,
    pub alpha0: f64,
    /// Echoed into outputs for bookkeeping; the simulation itself draws no
    /// random numbers.
    pub seed: u64,
    /// When set, every iteration uses this price instead of the computed one.
    pub fixed_price: Option<f64>,
    /// Early stop: max power change below this for 50 consecutive
    /// iterations (once no events remain pending).
    pub convergence_epsilon: Option<f64>,
    pub agents: Vec<AgentSpec>,
    pub edges: Vec<(AgentId, AgentId)>,
    pub events: Vec<ScenarioEvent>,
}

impl ScenarioFile {
    pub fn topology(&self) -> Result<Topology, GraphError> {
        Topology::new(self.agents.iter().map(|a| a.id), &self.edges)
    }

    pub fn initial_agents(&self) -> BTreeMap<AgentId, AgentState> {
        self.agents.iter().map(|a| (a.id, a.to_state())).collect()
    }
}

// ---------------------------------------------------------------------------
// Raw on-disk schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawScenario {
    format_version: u32,
    max_iterations: u64,
    alpha0: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed_price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    convergence_epsilon: Option<f64>,
    #[serde(default)]
    edges: Vec<[u32; 2]>,
    #[serde(default)]
    agents: Vec<RawAgent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    events: Vec<RawEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawAgent {
    id: u32,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<f64>,
    p_min: f64,
    p_max: f64,
    t_min: f64,
    t_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_load: Option<f64>,
    initial_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Generator,
    Consumer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEvent {
    at_iteration: u64,
    action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    consumer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    watts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agent: Option<RawAgent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agents: Option<Vec<u32>>,
}

/// Line (1-based) of the `idx`-th `[[table]]` header, for error messages.
fn nth_table_line(source: &str, table: &str, idx: usize) -> usize {
    let needle = format!("[[{table}]]");
    let mut seen = 0;
    for (line_no, line) in source.lines().enumerate() {
        if line.trim_start().starts_with(&needle) {
            if seen == idx {
                return line_no + 1;
            }
            seen += 1;
        }
    }
    0
}

/// Line of a top-level `key = ...` assignment.
fn key_line(source: &str, key: &str) -> usize {
    for (line_no, line) in source.lines().enumerate() {
        let t = line.trim_start();
        if t.starts_with(key)
            && t[key.len()..].trim_start().starts_with('=')
        {
            return line_no + 1;
        }
    }
    0
}

struct Validator {
    problems: Vec<String>,
}

impl Validator {
    fn push(&mut self, line: usize, msg: String) {
        if line > 0 {
            self.problems.push(format!("line {line}: {msg}"));
        } else {
            self.problems.push(msg);
        }
    }

    fn agent_spec(
        &mut self,
        raw: &RawAgent,
        line: usize,
        label: &str,
    ) -> Option<AgentSpec> {
        let Some(id) = AgentId::try_new(raw.id) else {
            self.push(line, format!("{label}: field id must be a positive integer"));
            return None;
        };
        let params = match raw.kind {
            RawKind::Generator => {
                if raw.v.is_some() {
                    self.push(line, format!("{label}: field v is not valid for a generator"));
                }
                if raw.base_load.is_some() {
                    self.push(
                        line,
                        format!("{label}: field base_load is not valid for a generator"),
                    );
                }
                let Some(c) = raw.c else {
                    self.push(line, format!("{label}: field c is required for a generator"));
                    return None;
                };
                AgentParams::Generator(GeneratorParams {
                    c,
                    p_max: raw.p_max,
                    p_min: raw.p_min,
                    t_min: raw.t_min,
                    t_max: raw.t_max,
                })
            }
            RawKind::Consumer => {
                if raw.c.is_some() {
                    self.push(line, format!("{label}: field c is not valid for a consumer"));
                }
                let Some(v) = raw.v else {
                    self.push(line, format!("{label}: field v is required for a consumer"));
                    return None;
                };
                AgentParams::Consumer(ConsumerParams {
                    v,
                    p_max: raw.p_max,
                    p_min: raw.p_min,
                    t_min: raw.t_min,
                    t_max: raw.t_max,
                    base_load: raw.base_load.unwrap_or(0.0),
                })
            }
        };
        let spec = AgentSpec {
            id,
            params,
            initial_power: raw.initial_power,
        };
        for violation in spec.to_state().violations() {
            // Param violations name their own field; initial_power is the
            // box check.
            let field_hint = if violation.starts_with("power") {
                format!("field initial_power: {violation}")
            } else {
                violation.clone()
            };
            self.push(line, format!("{label}: {field_hint}"));
        }
        Some(spec)
    }
}

fn convert_and_validate(
    raw: &RawScenario,
    source: &str,
) -> Result<ScenarioFile, ScenarioError> {
    let mut v = Validator {
        problems: Vec::new(),
    };

    if raw.format_version != FORMAT_VERSION {
        v.push(
            key_line(source, "format_version"),
            format!(
                "field format_version: expected {FORMAT_VERSION}, got {}",
                raw.format_version
            ),
        );
    }
    if !(raw.alpha0 > 0.0) {
        v.push(
            key_line(source, "alpha0"),
            format!("field alpha0 must be positive, got {}", raw.alpha0),
        );
    }
    if let Some(p) = raw.fixed_price {
        if !(p > 0.0) {
            v.push(
                key_line(source, "fixed_price"),
                format!("field fixed_price must be positive, got {p}"),
            );
        }
    }
    if let Some(e) = raw.convergence_epsilon {
        if !(e > 0.0) {
            v.push(
                key_line(source, "convergence_epsilon"),
                format!("field convergence_epsilon must be positive, got {e}"),
            );
        }
    }
    if raw.agents.is_empty() {
        v.push(key_line(source, "agents"), "no agents declared".to_string());
    }

    let mut agents = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, ra) in raw.agents.iter().enumerate() {
        let line = nth_table_line(source, "agents", i);
        let label = format!("agents[{i}] (id {})", ra.id);
        if let Some(spec) = v.agent_spec(ra, line, &label) {
            if !ids.insert(spec.id) {
                v.push(line, format!("{label}: duplicate agent id"));
            }
            agents.push(spec);
        }
    }

    let edges_line = key_line(source, "edges");
    let mut edges = Vec::new();
    for pair in &raw.edges {
        match (AgentId::try_new(pair[0]), AgentId::try_new(pair[1])) {
            (Some(a), Some(b)) => edges.push((a, b)),
            _ => v.push(
                edges_line,
                format!("field edges: edge [{}, {}] uses id 0", pair[0], pair[1]),
            ),
        }
    }
    if v.problems.is_empty() {
        match Topology::new(ids.iter().copied(), &edges) {
            Ok(_) => {}
            Err(e) => v.push(edges_line, format!("field edges: {e}")),
        }
    }

    // Replay the event timeline against an evolving membership picture.
    let mut alive: BTreeMap<AgentId, AgentKind> = agents
        .iter()
        .map(|a| (a.id, a.to_state().kind()))
        .collect();
    let mut live_edges: BTreeSet<(AgentId, AgentId)> = edges
        .iter()
        .map(|&(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    let mut indexed: Vec<(usize, &RawEvent)> = raw.events.iter().enumerate().collect();
    indexed.sort_by_key(|(i, e)| (e.at_iteration, *i));

    let mut events = Vec::new();
    for (i, re) in indexed {
        let line = nth_table_line(source, "events", i);
        let label = format!("events[{i}]");
        if re.at_iteration < 1 {
            v.push(
                line,
                format!("{label}: field at_iteration must be at least 1"),
            );
        }
        if re.at_iteration >= raw.max_iterations {
            log::warn!(
                "event at iteration {} never fires (max_iterations {})",
                re.at_iteration,
                raw.max_iterations
            );
        }
        let action = match re.action.as_str() {
            "base_load_set" => {
                let Some(cid) = re.consumer.and_then(AgentId::try_new) else {
                    v.push(
                        line,
                        format!("{label}: field consumer must name a positive agent id"),
                    );
                    continue;
                };
                let Some(watts) = re.watts else {
                    v.push(line, format!("{label}: field watts is required"));
                    continue;
                };
                if !(watts >= 0.0) {
                    v.push(
                        line,
                        format!("{label}: field watts must be nonnegative, got {watts}"),
                    );
                }
                match alive.get(&cid) {
                    None => v.push(
                        line,
                        format!("{label}: field consumer: agent {cid} does not exist at iteration {}", re.at_iteration),
                    ),
                    Some(AgentKind::Generator) => v.push(
                        line,
                        format!("{label}: field consumer: agent {cid} is a generator"),
                    ),
                    Some(AgentKind::Consumer) => {}
                }
                EventAction::BaseLoadSet {
                    consumer: cid,
                    watts,
                }
            }
            "join" => {
                let Some(ref ragent) = re.agent else {
                    v.push(line, format!("{label}: field agent is required for a join"));
                    continue;
                };
                let Some(spec) = v.agent_spec(ragent, line, &format!("{label}.agent")) else {
                    continue;
                };
                if alive.contains_key(&spec.id) {
                    v.push(
                        line,
                        format!(
                            "{label}.agent: field id: agent {} already exists at iteration {}",
                            spec.id, re.at_iteration
                        ),
                    );
                }
                let mut join_edges = Vec::new();
                let raw_edges = re.edges.clone().unwrap_or_default();
                if raw_edges.is_empty() {
                    v.push(
                        line,
                        format!("{label}: field edges must connect the joining agent"),
                    );
                }
                for &e in &raw_edges {
                    match AgentId::try_new(e) {
                        Some(n) if alive.contains_key(&n) => join_edges.push(n),
                        Some(n) => v.push(
                            line,
                            format!("{label}: field edges: agent {n} does not exist at iteration {}", re.at_iteration),
                        ),
                        None => v.push(
                            line,
                            format!("{label}: field edges: id 0 is not a valid agent"),
                        ),
                    }
                }
                alive.insert(spec.id, spec.to_state().kind());
                for &n in &join_edges {
                    let key = if spec.id < n { (spec.id, n) } else { (n, spec.id) };
                    live_edges.insert(key);
                }
                EventAction::Join {
                    agent: spec,
                    edges: join_edges,
                }
            }
            "leave" => {
                let Some(ref raw_ids) = re.agents else {
                    v.push(line, format!("{label}: field agents is required for a leave"));
                    continue;
                };
                let mut leaving = Vec::new();
                for &e in raw_ids {
                    match AgentId::try_new(e) {
                        Some(id) if alive.contains_key(&id) => leaving.push(id),
                        Some(id) => v.push(
                            line,
                            format!("{label}: field agents: agent {id} does not exist at iteration {}", re.at_iteration),
                        ),
                        None => v.push(
                            line,
                            format!("{label}: field agents: id 0 is not a valid agent"),
                        ),
                    }
                }
                for id in &leaving {
                    alive.remove(id);
                    live_edges.retain(|&(a, b)| a != *id && b != *id);
                }
                if alive.is_empty() {
                    v.push(line, format!("{label}: field agents: removes every agent"));
                } else {
                    let remaining: Vec<(AgentId, AgentId)> =
                        live_edges.iter().copied().collect();
                    if let Err(e) = Topology::new(alive.keys().copied(), &remaining) {
                        v.push(
                            line,
                            format!("{label}: field agents: removal leaves the network broken: {e}"),
                        );
                    }
                }
                EventAction::Leave { agents: leaving }
            }
            other => {
                v.push(
                    line,
                    format!("{label}: field action: unknown action \"{other}\" (expected base_load_set, join, or leave)"),
                );
                continue;
            }
        };
        events.push(ScenarioEvent {
            at_iteration: re.at_iteration,
            action,
        });
    }

    if !v.problems.is_empty() {
        return Err(ScenarioError::Invalid(v.problems));
    }
    Ok(ScenarioFile {
        format_version: raw.format_version,
        max_iterations: raw.max_iterations,
        alpha0: raw.alpha0,
        seed: raw.seed,
        fixed_price: raw.fixed_price,
        convergence_epsilon: raw.convergence_epsilon,
        agents,
        edges,
        events,
    })
}

pub fn parse_scenario(source: &str) -> Result<ScenarioFile, ScenarioError> {
    let raw: RawScenario = toml::from_str(source)?;
    convert_and_validate(&raw, source)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioFile, ScenarioError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&source)
}

fn raw_agent(spec: &AgentSpec) -> RawAgent {
    match &spec.params {
        AgentParams::Generator(g) => RawAgent {
            id: spec.id.get(),
            kind: RawKind::Generator,
            c: Some(g.c),
            v: None,
            p_min: g.p_min,
            p_max: g.p_max,
            t_min: g.t_min,
            t_max: g.t_max,
            base_load: None,
            initial_power: spec.initial_power,
        },
        AgentParams::Consumer(c) => RawAgent {
            id: spec.id.get(),
            kind: RawKind::Consumer,
            c: None,
            v: Some(c.v),
            p_min: c.p_min,
            p_max: c.p_max,
            t_min: c.t_min,
            t_max: c.t_max,
            base_load: Some(c.base_load),
            initial_power: spec.initial_power,
        },
    }
}

/// Serializes back to TOML; reloading the output reproduces every field.
pub fn to_toml_string(s: &ScenarioFile) -> String {
    let raw = RawScenario {
        format_version: s.format_version,
        max_iterations: s.max_iterations,
        alpha0: s.alpha0,
        seed: s.seed,
        fixed_price: s.fixed_price,
        convergence_epsilon: s.convergence_epsilon,
        edges: s.edges.iter().map(|&(a, b)| [a.get(), b.get()]).collect(),
        agents: s.agents.iter().map(raw_agent).collect(),
        events: s
            .events
            .iter()
            .map(|e| match &e.action {
                EventAction::BaseLoadSet { consumer, watts } => RawEvent {
                    at_iteration: e.at_iteration,
                    action: "base_load_set".into(),
                    consumer: Some(consumer.get()),
                    watts: Some(*watts),
                    agent: None,
                    edges: None,
                    agents: None,
                },
                EventAction::Join { agent, edges } => RawEvent {
                    at_iteration: e.at_iteration,
                    action: "join".into(),
                    consumer: None,
                    watts: None,
                    agent: Some(raw_agent(agent)),
                    edges: Some(edges.iter().map(|a| a.get()).collect()),
                    agents: None,
                },
                EventAction::Leave { agents } => RawEvent {
                    at_iteration: e.at_iteration,
                    action: "leave".into(),
                    consumer: None,
                    watts: None,
                    agent: None,
                    edges: None,
                    agents: Some(agents.iter().map(|a| a.get()).collect()),
                },
            })
            .collect(),
    };
    toml::to_string_pretty(&raw).expect("scenario serializes")
}
