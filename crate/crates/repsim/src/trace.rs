//! JSONL event trace: record types, the digesting sink, and the parser.

use repsim_core::{
    Evidence, NodeId, PacketId, ReasonCode, ReputationParams, SimTime, TrustLevel, Window,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Data,
    Probe,
    Trace,
    Rreq,
    Rrep,
    Rerr,
    Warning,
}

impl PacketKind {
    /// IDS-only traffic; absent from runs with the IDS disabled.
    pub fn is_ids(self) -> bool {
        matches!(
            self,
            PacketKind::Probe | PacketKind::Trace | PacketKind::Warning
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Adversary,
    Channel,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misbehavior {
    DropData,
    OmitTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ledger {
    /// Own registrations matched by PACKs.
    Monitor,
    /// Forwarding duties announced by overheard traces.
    Trace,
    /// Overheard relays whose trace is awaited.
    Omission,
}

/// What changed a reputation entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Evidence(Evidence),
    Fade { window: Window },
    Script { value: i32, declared: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub behavior: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInfo {
    pub flow: u32,
    pub source: NodeId,
    pub destination: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub scenario_id: String,
    pub seed: u64,
    pub duration: f64,
    pub ids_enabled: bool,
    pub window_len: f64,
    pub nodes: Vec<NodeInfo>,
    pub flows: Vec<FlowInfo>,
    pub params: ReputationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxInfo {
    pub node: NodeId,
    pub kind: PacketKind,
    pub tx: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<PacketId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_hop: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub route: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub avoid: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuser: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accused: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxInfo {
    pub node: NodeId,
    pub from: NodeId,
    pub kind: PacketKind,
    pub tx: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<PacketId>,
    pub addressed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accused: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropInfo {
    pub node: NodeId,
    pub kind: PacketKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<PacketId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NodeId>,
    pub cause: DropCause,
    pub reason: ReasonCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceInfo {
    pub node: NodeId,
    pub subject: NodeId,
    pub change: Change,
    pub before: i32,
    pub after: i32,
    pub class: TrustLevel,
    pub declared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart(RunHeader),
    Generated {
        node: NodeId,
        flow: u32,
        packet: PacketId,
    },
    Tx(TxInfo),
    Rx(RxInfo),
    Delivered {
        node: NodeId,
        flow: u32,
        packet: PacketId,
        hops: u32,
    },
    Drop(DropInfo),
    Misbehave {
        node: NodeId,
        packet: PacketId,
        action: Misbehavior,
    },
    Pack {
        node: NodeId,
        neighbor: NodeId,
        packet: PacketId,
    },
    WindowReport {
        node: NodeId,
        ledger: Ledger,
        neighbor: NodeId,
        window: Window,
        forwarded: u32,
        missing: u32,
    },
    Evidence(EvidenceInfo),
    Reputation {
        node: NodeId,
        neighbor: NodeId,
        window: Window,
        value: i32,
        class: TrustLevel,
        declared: bool,
    },
    TraceTestIssued {
        node: NodeId,
        target: NodeId,
        probe: PacketId,
        route: Vec<NodeId>,
    },
    TraceTestSkipped {
        node: NodeId,
        target: NodeId,
    },
    TraceTestResolved {
        node: NodeId,
        target: NodeId,
        probe: PacketId,
        passed: bool,
    },
    RouteSelected {
        node: NodeId,
        destination: NodeId,
        route: Vec<NodeId>,
    },
    BehaviorSwitch {
        node: NodeId,
        behavior: String,
    },
    InFlight {
        flow: u32,
        packet: PacketId,
    },
    RunEnd {
        events: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Seconds.
    pub time: f64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace is truncated: {0}")]
    Truncated(&'static str),
}

/// Serializes records into canonical JSONL while hashing them.
pub struct TraceSink {
    records: Vec<TraceRecord>,
    text: Option<String>,
    hasher: Sha256,
}

impl TraceSink {
    pub fn new(keep_text: bool) -> Self {
        TraceSink {
            records: Vec::new(),
            text: keep_text.then(String::new),
            hasher: Sha256::new(),
        }
    }

    pub fn push(&mut self, time: SimTime, event: TraceEvent) {
        let record = TraceRecord {
            time: time.as_secs_f64(),
            event,
        };
        let line = serde_json::to_string(&record).expect("trace record serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        if let Some(text) = &mut self.text {
            text.push_str(&line);
            text.push('\n');
        }
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Returns (records, jsonl text if kept, hex digest).
    pub fn finish(self) -> (Vec<TraceRecord>, Option<String>, String) {
        let digest = hex(&self.hasher.finalize());
        (self.records, self.text, digest)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a trace file's bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Parses a complete trace; it must open with `run_start` and close with `run_end`.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(line).map_err(|source| TraceError::Parse {
                line: i + 1,
                source,
            })?;
        records.push(record);
    }
    validate_complete(&records)?;
    Ok(records)
}

pub fn validate_complete(records: &[TraceRecord]) -> Result<(), TraceError> {
    match records.first().map(|r| &r.event) {
        Some(TraceEvent::RunStart(_)) => {}
        _ => return Err(TraceError::Truncated("missing run_start header")),
    }
    match records.last().map(|r| &r.event) {
        Some(TraceEvent::RunEnd { .. }) => Ok(()),
        _ => Err(TraceError::Truncated("missing run_end marker")),
    }
}
