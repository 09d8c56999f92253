//! Reputation-based intrusion detection for mobile ad hoc networks.
//!
//! This crate holds the protocol logic only: the per-node reputation table,
//! the watchdog monitor, reputation-aware source routing and the trace test.
//! Everything is deterministic, allocation-only and `no_std`; the `repsim`
//! crate drives it from a discrete-event simulator.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ids;
pub mod monitor;
pub mod reputation;
pub mod routing;

pub use ids::{NodeId, PacketId, SimTime, Window};
pub use monitor::{MonitorConfig, MonitorError, PacketBuffer, RegisteredPacket, WindowReport};
pub use reputation::{
    Evidence, IndirectAction, IndirectEvidence, IndirectOutcome, Mutation, ParamsError,
    ReputationEntry, ReputationError, ReputationParams, ReputationTable, TraceEvidence, TrustLevel,
};
pub use routing::{
    AvoidList, DataDecision, ReasonCode, RouteCache, RouteError, RouteReply, RouteRequest,
    RoutingError, SourceRoute,
};
pub use trace_test::{PendingTest, ProbePacket, TestOutcome, TraceTestError, TraceTester};
