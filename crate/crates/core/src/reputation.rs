//! Local reputation table and its evidence-driven state machine.
//!
//! Every node keeps one [`ReputationTable`] holding a [`ReputationEntry`] per
//! one-hop neighbor. Entries move only in response to an [`Evidence`] value or
//! a per-window fading tick, so a logged stream of [`Mutation`]s replays to the
//! same table bit for bit.
//!
//! Three evidence channels exist and they are deliberately unequal:
//!
//! * first-hand observation (monitor window reports, trace audits, trace-test
//!   results) is the only channel allowed to declare a node malicious;
//! * WARNING messages and avoid-list sightings nudge the value down but are
//!   floored one unit above the untrustworthy threshold. When they concern a
//!   node already at or below that threshold they request a trace test instead.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::ids::{NodeId, Window};
use crate::monitor::WindowReport;

/// Margin kept between indirect-only values and the untrustworthy threshold.
pub const INDIRECT_FLOOR_MARGIN: i32 = 1;

/// Scale, thresholds and evidence weights, all in integer reputation units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ReputationParams {
    pub r_min: i32,
    pub r_max: i32,
    /// Untrustworthy threshold.
    pub r_u: i32,
    /// Trustworthy threshold.
    pub r_t: i32,
    /// Reward for a window with acceptable forwarding.
    pub w_good: i32,
    /// Penalty for observed non-forwarding.
    pub y_drop: i32,
    /// Penalty for a dropped trace.
    pub t_trace: i32,
    /// Penalty per WARNING naming the neighbor.
    pub z_warn: i32,
    /// Penalty per avoid-list sighting of the neighbor.
    pub z_avoid: i32,
    /// Malicious drop threshold: missing packets tolerated per window.
    pub drop_threshold: u32,
    /// Value given to a neighbor seen for the first time.
    pub init_value: i32,
    /// Quiet windows required before a malicious entry starts fading.
    pub inactivity_windows: u32,
    pub fading_rate: i32,
    /// Value at which fading stops and the malicious flag is lifted.
    pub redemption_target: i32,
}

impl Default for ReputationParams {
    fn default() -> Self {
        ReputationParams {
            r_min: -100,
            r_max: 0,
            r_u: -40,
            r_t: -10,
            w_good: 5,
            y_drop: 15,
            t_trace: 20,
            z_warn: 5,
            z_avoid: 2,
            drop_threshold: 2,
            init_value: -25,
            inactivity_windows: 10,
            fading_rate: 5,
            redemption_target: -35,
        }
    }
}

/// A violated [`ReputationParams`] constraint.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {constraint}")]
pub struct ParamsError {
    /// Offending field name as it appears in configuration.
    pub field: &'static str,
    pub constraint: &'static str,
}

impl ReputationParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let fail = |field, constraint| Err(ParamsError { field, constraint });
        if self.r_min >= self.r_u {
            return fail("r_u", "r_min < r_u");
        }
        if self.r_u >= self.r_t {
            return fail("r_u", "r_u < r_t");
        }
        if self.r_t >= self.r_max {
            return fail("r_t", "r_t < r_max");
        }
        if self.init_value <= self.r_u || self.init_value >= self.r_t {
            return fail("init_value", "r_u < init_value < r_t");
        }
        for (field, v) in [
            ("w_good", self.w_good),
            ("y_drop", self.y_drop),
            ("t_trace", self.t_trace),
            ("z_warn", self.z_warn),
            ("z_avoid", self.z_avoid),
        ] {
            if v < 0 {
                return fail(field, "weights must be >= 0");
            }
        }
        if self.y_drop <= self.z_warn {
            return fail("y_drop", "y_drop > z_warn");
        }
        // the default scale has w_good == z_warn, so only a strict inversion is rejected
        if self.w_good < self.z_warn {
            return fail("w_good", "w_good >= z_warn");
        }
        if self.z_warn <= self.z_avoid {
            return fail("z_warn", "z_warn > z_avoid");
        }
        if self.redemption_target <= self.r_u || self.redemption_target >= self.init_value {
            return fail("redemption_target", "r_u < redemption_target < init_value");
        }
        if self.fading_rate <= 0 {
            return fail("fading_rate", "fading_rate > 0");
        }
        Ok(())
    }

    pub fn clamp(&self, value: i64) -> i32 {
        value.clamp(self.r_min as i64, self.r_max as i64) as i32
    }

    /// Lowest value reachable through WARNING / avoid-list evidence alone.
    pub fn indirect_floor(&self) -> i32 {
        self.r_u + INDIRECT_FLOOR_MARGIN
    }

    /// Three-way classification of an in-range value.
    ///
    /// Boundaries: `value <= r_u` is untrustworthy, `value >= r_t` trustworthy.
    pub fn classify(&self, value: i32) -> Result<TrustLevel, ReputationError> {
        if value < self.r_min || value > self.r_max {
            return Err(ReputationError::OutOfRange { value });
        }
        Ok(self.classify_clamped(value as i64))
    }

    /// Total classification: clamps first.
    pub fn classify_clamped(&self, value: i64) -> TrustLevel {
        let value = self.clamp(value);
        if value >= self.r_t {
            TrustLevel::Trustworthy
        } else if value <= self.r_u {
            TrustLevel::Untrustworthy
        } else {
            TrustLevel::Undecided
        }
    }
}

/// Trust value `T` with its Normal / Suspicious / Malicious tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TrustLevel {
    #[cfg_attr(feature = "serde", serde(rename = "Normal"))]
    Trustworthy,
    #[cfg_attr(feature = "serde", serde(rename = "Suspicious"))]
    Undecided,
    #[cfg_attr(feature = "serde", serde(rename = "Malicious"))]
    Untrustworthy,
}

impl TrustLevel {
    pub fn trust_value(self) -> i8 {
        match self {
            TrustLevel::Trustworthy => 1,
            TrustLevel::Undecided => 0,
            TrustLevel::Untrustworthy => -1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TrustLevel::Trustworthy => "Normal",
            TrustLevel::Undecided => "Suspicious",
            TrustLevel::Untrustworthy => "Malicious",
        }
    }

    pub fn from_tag(tag: &str) -> Option<TrustLevel> {
        match tag {
            "Normal" => Some(TrustLevel::Trustworthy),
            "Suspicious" => Some(TrustLevel::Undecided),
            "Malicious" => Some(TrustLevel::Untrustworthy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReputationError {
    #[error("reputation value {value} outside [r_min, r_max]")]
    OutOfRange { value: i32 },
    #[error("stale window report: window {report} not after {last}")]
    StaleWindow { report: Window, last: Window },
    #[error("node {0} cannot hold evidence about itself")]
    SelfSubject(NodeId),
}

/// Reputation held about one neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReputationEntry {
    pub value: i32,
    pub declared_malicious: bool,
    /// Windows elapsed since the last adverse evidence.
    pub windows_since_adverse: u32,
    /// Window of the last applied self-observation report, or of creation.
    pub last_update_window: Window,
    /// Whether any self-observation report has been applied yet.
    pub has_self_report: bool,
}

/// The two trace-audit penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TraceEvidence {
    /// Forwarded the message without its trace (penalty `y_drop`).
    TraceNonForward,
    /// Dropped both message and trace (penalty `t_trace`).
    TraceDrop,
}

/// Indirect channels; neither can declare a node malicious.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IndirectEvidence {
    Warning,
    AvoidSighting,
}

/// One unit of evidence about a neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Evidence {
    SelfWindow {
        window: Window,
        forwarded: u32,
        missing: u32,
    },
    TraceNonForward,
    TraceDrop,
    Warning,
    AvoidSighting,
    TraceTestResult {
        passed: bool,
    },
}

impl Evidence {
    pub fn self_window(report: &WindowReport) -> Evidence {
        Evidence::SelfWindow {
            window: report.window,
            forwarded: report.forwarded,
            missing: report.missing,
        }
    }

    /// Whether this channel may set `declared_malicious`.
    pub fn is_first_hand(&self) -> bool {
        !matches!(self, Evidence::Warning | Evidence::AvoidSighting)
    }
}

impl From<TraceEvidence> for Evidence {
    fn from(kind: TraceEvidence) -> Self {
        match kind {
            TraceEvidence::TraceNonForward => Evidence::TraceNonForward,
            TraceEvidence::TraceDrop => Evidence::TraceDrop,
        }
    }
}

impl From<IndirectEvidence> for Evidence {
    fn from(kind: IndirectEvidence) -> Self {
        match kind {
            IndirectEvidence::Warning => Evidence::Warning,
            IndirectEvidence::AvoidSighting => Evidence::AvoidSighting,
        }
    }
}

/// Follow-up requested by applying indirect evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndirectAction {
    None,
    TriggerTraceTest,
}

/// A replayable change to a single entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mutation {
    Evidence(Evidence),
    Fade { window: Window },
}

impl ReputationEntry {
    pub fn new(params: &ReputationParams, window: Window) -> Self {
        ReputationEntry {
            value: params.init_value,
            declared_malicious: false,
            windows_since_adverse: 0,
            last_update_window: window,
            has_self_report: false,
        }
    }

    pub fn class(&self, params: &ReputationParams) -> TrustLevel {
        params.classify_clamped(self.value as i64)
    }

    fn first_hand_penalty(mut self, penalty: i32, params: &ReputationParams) -> Self {
        self.value = params.clamp(self.value as i64 - penalty as i64);
        self.windows_since_adverse = 0;
        if self.value <= params.r_u {
            self.declared_malicious = true;
        }
        self
    }

    /// Per-window self observation from the monitor.
    pub fn apply_self_window(
        &self,
        report: &WindowReport,
        params: &ReputationParams,
    ) -> Result<Self, ReputationError> {
        let stale = if self.has_self_report {
            report.window <= self.last_update_window
        } else {
            report.window < self.last_update_window
        };
        if stale {
            return Err(ReputationError::StaleWindow {
                report: report.window,
                last: self.last_update_window,
            });
        }
        let mut next = if report.missing > params.drop_threshold {
            self.first_hand_penalty(params.y_drop, params)
        } else {
            let mut e = *self;
            // clamping also enforces the "reputation above 0 is set to 0" cap (r_max = 0)
            e.value = params.clamp(e.value as i64 + params.w_good as i64);
            e
        };
        next.last_update_window = report.window;
        next.has_self_report = true;
        Ok(next)
    }

    pub fn apply_trace_evidence(&self, kind: TraceEvidence, params: &ReputationParams) -> Self {
        let penalty = match kind {
            TraceEvidence::TraceNonForward => params.y_drop,
            TraceEvidence::TraceDrop => params.t_trace,
        };
        self.first_hand_penalty(penalty, params)
    }

    /// Indirect evidence on an existing entry. Never declares malicious.
    pub fn apply_indirect(
        &self,
        kind: IndirectEvidence,
        params: &ReputationParams,
    ) -> (Self, IndirectAction) {
        let mut next = *self;
        // An appearance in a WARNING or avoid list ends the inactivity period.
        next.windows_since_adverse = 0;
        if self.value <= params.r_u {
            return (next, IndirectAction::TriggerTraceTest);
        }
        let penalty = match kind {
            IndirectEvidence::Warning => params.z_warn,
            IndirectEvidence::AvoidSighting => params.z_avoid,
        };
        let lowered = params.clamp(self.value as i64 - penalty as i64);
        next.value = lowered.max(params.indirect_floor());
        (next, IndirectAction::None)
    }

    pub fn apply_trace_test_result(&self, passed: bool, params: &ReputationParams) -> Self {
        let mut next = *self;
        next.windows_since_adverse = 0;
        if passed {
            next.value = params.init_value;
            next.declared_malicious = false;
        } else {
            next.value = params.r_min;
            next.declared_malicious = true;
        }
        next
    }

    /// Once-per-window redemption clock.
    pub fn fading_tick(&self, _current_window: Window, params: &ReputationParams) -> Self {
        let mut next = *self;
        if self.declared_malicious && self.windows_since_adverse >= params.inactivity_windows {
            if next.value < params.redemption_target {
                next.value = (next.value + params.fading_rate).min(params.redemption_target);
            }
            if next.value >= params.redemption_target {
                next.declared_malicious = false;
            }
        }
        next.windows_since_adverse = next.windows_since_adverse.saturating_add(1);
        next
    }

    /// Applies one evidence value. Indirect evidence yields a follow-up action.
    pub fn apply(
        &self,
        evidence: &Evidence,
        params: &ReputationParams,
    ) -> Result<(Self, IndirectAction), ReputationError> {
        let next = match *evidence {
            Evidence::SelfWindow {
                window,
                forwarded,
                missing,
            } => {
                let report = WindowReport {
                    neighbor: NodeId(0),
                    window,
                    forwarded,
                    missing,
                };
                self.apply_self_window(&report, params)?
            }
            Evidence::TraceNonForward => {
                self.apply_trace_evidence(TraceEvidence::TraceNonForward, params)
            }
            Evidence::TraceDrop => self.apply_trace_evidence(TraceEvidence::TraceDrop, params),
            Evidence::Warning => return Ok(self.apply_indirect(IndirectEvidence::Warning, params)),
            Evidence::AvoidSighting => {
                return Ok(self.apply_indirect(IndirectEvidence::AvoidSighting, params))
            }
            Evidence::TraceTestResult { passed } => self.apply_trace_test_result(passed, params),
        };
        Ok((next, IndirectAction::None))
    }

    pub fn apply_mutation(
        &self,
        mutation: &Mutation,
        params: &ReputationParams,
    ) -> Result<Self, ReputationError> {
        match mutation {
            Mutation::Evidence(e) => self.apply(e, params).map(|(next, _)| next),
            Mutation::Fade { window } => Ok(self.fading_tick(*window, params)),
        }
    }
}

/// Outcome of [`ReputationTable::apply_indirect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndirectOutcome {
    /// Subject is not a current neighbor.
    Ignored,
    Applied {
        before: ReputationEntry,
        after: ReputationEntry,
        action: IndirectAction,
    },
}

/// Reputation of every current one-hop neighbor of `owner`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReputationTable {
    owner: NodeId,
    entries: BTreeMap<NodeId, ReputationEntry>,
}

impl ReputationTable {
    pub fn new(owner: NodeId) -> Self {
        ReputationTable {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn get(&self, neighbor: NodeId) -> Option<&ReputationEntry> {
        self.entries.get(&neighbor)
    }

    pub fn contains(&self, neighbor: NodeId) -> bool {
        self.entries.contains_key(&neighbor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &ReputationEntry)> + '_ {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn neighbors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.keys().copied()
    }

    /// Adds a freshly observed neighbor, keeping any existing entry.
    pub fn observe_neighbor(
        &mut self,
        neighbor: NodeId,
        params: &ReputationParams,
        window: Window,
    ) -> Result<&ReputationEntry, ReputationError> {
        if neighbor == self.owner {
            return Err(ReputationError::SelfSubject(neighbor));
        }
        Ok(self
            .entries
            .entry(neighbor)
            .or_insert_with(|| ReputationEntry::new(params, window)))
    }

    /// Puts back an entry remembered from an earlier stay in the neighborhood.
    pub fn restore(
        &mut self,
        neighbor: NodeId,
        entry: ReputationEntry,
    ) -> Result<(), ReputationError> {
        if neighbor == self.owner {
            return Err(ReputationError::SelfSubject(neighbor));
        }
        self.entries.insert(neighbor, entry);
        Ok(())
    }

    pub fn evict(&mut self, neighbor: NodeId) -> Option<ReputationEntry> {
        self.entries.remove(&neighbor)
    }

    /// Overwrites an entry. Returns the previous one, or `None` (and does
    /// nothing) for a non-neighbor.
    pub fn replace(&mut self, neighbor: NodeId, entry: ReputationEntry) -> Option<ReputationEntry> {
        let slot = self.entries.get_mut(&neighbor)?;
        Some(core::mem::replace(slot, entry))
    }

    pub fn class_of(&self, neighbor: NodeId, params: &ReputationParams) -> Option<TrustLevel> {
        self.entries.get(&neighbor).map(|e| e.class(params))
    }

    pub fn apply_indirect(
        &mut self,
        subject: NodeId,
        kind: IndirectEvidence,
        params: &ReputationParams,
    ) -> Result<IndirectOutcome, ReputationError> {
        if subject == self.owner {
            return Err(ReputationError::SelfSubject(subject));
        }
        let Some(slot) = self.entries.get_mut(&subject) else {
            return Ok(IndirectOutcome::Ignored);
        };
        let before = *slot;
        let (after, action) = before.apply_indirect(kind, params);
        *slot = after;
        Ok(IndirectOutcome::Applied {
            before,
            after,
            action,
        })
    }

    /// Applies first-hand or indirect evidence to an existing entry.
    /// Returns `(before, after, action)`, or `None` for a non-neighbor.
    pub fn apply_evidence(
        &mut self,
        subject: NodeId,
        evidence: &Evidence,
        params: &ReputationParams,
    ) -> Result<Option<(ReputationEntry, ReputationEntry, IndirectAction)>, ReputationError> {
        if subject == self.owner {
            return Err(ReputationError::SelfSubject(subject));
        }
        let Some(slot) = self.entries.get_mut(&subject) else {
            return Ok(None);
        };
        let before = *slot;
        let (after, action) = before.apply(evidence, params)?;
        *slot = after;
        Ok(Some((before, after, action)))
    }

    /// Fading tick for every entry; returns `(neighbor, before, after)` triples.
    pub fn fading_tick_all(
        &mut self,
        window: Window,
        params: &ReputationParams,
    ) -> Vec<(NodeId, ReputationEntry, ReputationEntry)> {
        self.entries
            .iter_mut()
            .map(|(id, e)| {
                let before = *e;
                *e = before.fading_tick(window, params);
                (*id, before, *e)
            })
            .collect()
    }

    /// Locally declared malicious neighbors, ascending by id.
    pub fn malicious_list(&self) -> Vec<NodeId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.declared_malicious)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn is_declared_malicious(&self, neighbor: NodeId) -> bool {
        self.entries
            .get(&neighbor)
            .is_some_and(|e| e.declared_malicious)
    }
}

/// Replays a mutation stream from a fresh entry.
pub fn replay(
    params: &ReputationParams,
    created_at: Window,
    mutations: &[Mutation],
) -> Result<ReputationEntry, ReputationError> {
    mutations
        .iter()
        .try_fold(ReputationEntry::new(params, created_at), |e, m| {
            e.apply_mutation(m, params)
        })
}
