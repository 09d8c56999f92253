//! Scenario files: JSON schema, defaults and validation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repsim_core::{NodeId, ReputationParams, SimTime};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario field `{field}`: {constraint}")]
    Invalid { field: String, constraint: String },
}

fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        constraint: constraint.into(),
    }
}

/// Node behavior profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    Honest,
    /// Drops all transit data.
    Blackhole,
    /// Drops each transit data packet with probability `p_drop`.
    Grayhole {
        p_drop: f64,
    },
    /// Forwards data but never emits traces.
    TraceDropper,
    /// Originates traffic but forwards nothing.
    Selfish,
}

impl Behavior {
    pub fn tag(&self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::Blackhole => "blackhole",
            Behavior::Grayhole { .. } => "grayhole",
            Behavior::TraceDropper => "trace_dropper",
            Behavior::Selfish => "selfish",
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, Behavior::Honest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSwitch {
    pub at: f64,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWaypoint {
    /// Field size in meters, origin at (0, 0).
    pub area: [f64; 2],
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mobility {
    RandomWaypoint(RandomWaypoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub position: [f64; 2],
    #[serde(default = "default_behavior")]
    pub behavior: Behavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobility: Option<Mobility>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<BehaviorSwitch>,
}

fn default_behavior() -> Behavior {
    Behavior::Honest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub source: NodeId,
    pub destination: NodeId,
    /// Packets per second.
    pub rate: f64,
    #[serde(default = "default_packet_size")]
    pub packet_size: u32,
    #[serde(default)]
    pub start: f64,
    /// Defaults to the scenario duration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
}

fn default_packet_size() -> u32 {
    512
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumSpec {
    pub radio_range: f64,
    pub p_loss: f64,
    pub propagation_delay: f64,
    /// Position update interval for mobile nodes.
    pub mobility_step: f64,
}

impl Default for MediumSpec {
    fn default() -> Self {
        MediumSpec {
            radio_range: 150.0,
            p_loss: 0.0,
            propagation_delay: 0.001,
            mobility_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSpec {
    /// Fraction of a window, at its end, whose registrations count towards the next window.
    pub grace: f64,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        MonitorSpec { grace: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSpec {
    pub rreq_retry: f64,
    pub send_buffer_timeout: f64,
    pub avoid_list_cap: usize,
}

impl Default for RoutingSpec {
    fn default() -> Self {
        RoutingSpec {
            rreq_retry: 1.0,
            send_buffer_timeout: 3.0,
            avoid_list_cap: repsim_core::routing::AVOID_LIST_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceTestSpec {
    pub rate_limit_windows: u64,
}

impl Default for TraceTestSpec {
    fn default() -> Self {
        TraceTestSpec {
            rate_limit_windows: repsim_core::trace_test::DEFAULT_RATE_LIMIT_WINDOWS,
        }
    }
}

/// Scripted interventions used by experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Script {
    /// Overwrites `observer`'s value for `subject`. `declared` defaults to `value <= r_u`.
    SetReputation {
        at: f64,
        observer: NodeId,
        subject: NodeId,
        value: i32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        declared: Option<bool>,
    },
    /// `from` broadcasts a WARNING naming `accused`.
    ForgeWarning {
        at: f64,
        from: NodeId,
        accused: NodeId,
    },
}

impl Script {
    pub fn at(&self) -> f64 {
        match self {
            Script::SetReputation { at, .. } | Script::ForgeWarning { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_scenario_id")]
    pub scenario_id: String,
    /// Seconds.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub ids_enabled: bool,
    #[serde(default = "default_window_len")]
    pub window_len: f64,
    #[serde(default)]
    pub medium: MediumSpec,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub reputation: ReputationParams,
    #[serde(default)]
    pub monitor: MonitorSpec,
    #[serde(default)]
    pub routing: RoutingSpec,
    #[serde(default)]
    pub trace_test: TraceTestSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scripts: Vec<Script>,
}

fn default_scenario_id() -> String {
    "scenario".to_string()
}

fn default_true() -> bool {
    true
}

fn default_window_len() -> f64 {
    1.0
}

/// Seconds to integer microseconds.
pub fn secs(t: f64) -> SimTime {
    SimTime::from_micros((t * 1e6).round().max(0.0) as u64)
}

fn check_time(field: &str, t: f64) -> Result<(), ScenarioError> {
    if !t.is_finite() || t < 0.0 {
        return Err(invalid(field, "must be a finite number >= 0"));
    }
    Ok(())
}

fn check_probability(field: &str, p: f64) -> Result<(), ScenarioError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(field, "probability must be in [0, 1]"));
    }
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        check_time("duration", self.duration)?;
        if !(self.window_len.is_finite() && self.window_len > 0.0) {
            return Err(invalid("window_len", "must be > 0"));
        }
        if secs(self.window_len).as_micros() == 0 {
            return Err(invalid("window_len", "must be at least one microsecond"));
        }
        let m = &self.medium;
        if !(m.radio_range.is_finite() && m.radio_range > 0.0) {
            return Err(invalid("medium.radio_range", "must be > 0"));
        }
        check_probability("medium.p_loss", m.p_loss)?;
        check_time("medium.propagation_delay", m.propagation_delay)?;
        if !(m.mobility_step.is_finite() && m.mobility_step > 0.0) {
            return Err(invalid("medium.mobility_step", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.monitor.grace) {
            return Err(invalid("monitor.grace", "must be in [0, 1)"));
        }
        if !(self.routing.rreq_retry.is_finite() && self.routing.rreq_retry > 0.0) {
            return Err(invalid("routing.rreq_retry", "must be > 0"));
        }
        check_time(
            "routing.send_buffer_timeout",
            self.routing.send_buffer_timeout,
        )?;
        if self.routing.avoid_list_cap == 0 {
            return Err(invalid("routing.avoid_list_cap", "must be >= 1"));
        }
        if let Err(e) = self.reputation.validate() {
            return Err(invalid(format!("reputation.{}", e.field), e.constraint));
        }

        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id) {
                return Err(invalid(format!("nodes[{i}].id"), "node ids must be unique"));
            }
            if !n.position.iter().all(|c| c.is_finite()) {
                return Err(invalid(format!("nodes[{i}].position"), "must be finite"));
            }
            check_behavior(&format!("nodes[{i}].behavior"), &n.behavior)?;
            let mut last = f64::NEG_INFINITY;
            for (k, s) in n.schedule.iter().enumerate() {
                let field = format!("nodes[{i}].schedule[{k}]");
                check_time(&format!("{field}.at"), s.at)?;
                if s.at < last {
                    return Err(invalid(field, "switch times must be non-decreasing"));
                }
                last = s.at;
                check_behavior(&format!("{field}.behavior"), &s.behavior)?;
            }
            if let Some(Mobility::RandomWaypoint(w)) = &n.mobility {
                let field = format!("nodes[{i}].mobility.random_waypoint");
                if !(w.area[0] > 0.0 && w.area[1] > 0.0) {
                    return Err(invalid(format!("{field}.area"), "must be positive"));
                }
                if !(w.speed_min > 0.0 && w.speed_max >= w.speed_min && w.speed_max.is_finite()) {
                    return Err(invalid(
                        format!("{field}.speed_min"),
                        "0 < speed_min <= speed_max",
                    ));
                }
                check_time(&format!("{field}.pause"), w.pause)?;
            }
        }
        for (i, f) in self.flows.iter().enumerate() {
            let field = format!("flows[{i}]");
            if !ids.contains(&f.source) {
                return Err(invalid(format!("{field}.source"), "unknown node"));
            }
            if !ids.contains(&f.destination) {
                return Err(invalid(format!("{field}.destination"), "unknown node"));
            }
            if f.source == f.destination {
                return Err(invalid(
                    format!("{field}.destination"),
                    "must differ from source",
                ));
            }
            if !(f.rate.is_finite() && f.rate > 0.0) {
                return Err(invalid(format!("{field}.rate"), "must be > 0"));
            }
            check_time(&format!("{field}.start"), f.start)?;
            if let Some(stop) = f.stop {
                check_time(&format!("{field}.stop"), stop)?;
                if stop < f.start {
                    return Err(invalid(format!("{field}.stop"), "must be >= start"));
                }
            }
        }
        for (i, s) in self.scripts.iter().enumerate() {
            let field = format!("scripts[{i}]");
            check_time(&format!("{field}.at"), s.at())?;
            match s {
                Script::SetReputation {
                    observer,
                    subject,
                    value,
                    ..
                } => {
                    if !ids.contains(observer) {
                        return Err(invalid(format!("{field}.observer"), "unknown node"));
                    }
                    if !ids.contains(subject) || subject == observer {
                        return Err(invalid(
                            format!("{field}.subject"),
                            "must be a known node other than the observer",
                        ));
                    }
                    if *value < self.reputation.r_min || *value > self.reputation.r_max {
                        return Err(invalid(
                            format!("{field}.value"),
                            "must be in [r_min, r_max]",
                        ));
                    }
                }
                Script::ForgeWarning { from, accused, .. } => {
                    if !ids.contains(from) {
                        return Err(invalid(format!("{field}.from"), "unknown node"));
                    }
                    if !ids.contains(accused) {
                        return Err(invalid(format!("{field}.accused"), "unknown node"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_behavior(field: &str, b: &Behavior) -> Result<(), ScenarioError> {
    if let Behavior::Grayhole { p_drop } = b {
        check_probability(&format!("{field}.grayhole.p_drop"), *p_drop)?;
    }
    Ok(())
}

/// Uniform placement of `n` nodes in a `width x height` field, redrawn until
/// the unit-disk graph with `range` is connected.
pub fn random_connected_placement(
    n: usize,
    width: f64,
    height: f64,
    range: f64,
    seed: u64,
) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..width), rng.random_range(0.0..height)])
            .collect();
        if is_connected(&pts, range) {
            return pts;
        }
    }
}

pub fn is_connected(pts: &[[f64; 2]], range: f64) -> bool {
    if pts.is_empty() {
        return true;
    }
    let mut seen = vec![false; pts.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..pts.len() {
            if !seen[j] && crate::medium::in_range(pts[i], pts[j], range) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}
