//! Watchdog monitor built on passive acknowledgements (PACKs).
//!
//! A node registers every packet it hands to a next hop. Overhearing that next
//! hop retransmit the same packet id counts as a PACK. At the end of each timing
//! window every registration still unmatched counts as missing, and one
//! [`WindowReport`] per neighbor goes to the reputation table.
//!
//! The same buffer type also backs the simulator's trace audit ledger, where
//! "registrations" are forwarding duties learned from overheard traces.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::ids::{NodeId, PacketId, SimTime, Window};

/// Timing-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorConfig {
    pub window_len: SimTime,
    /// Registrations in the last `grace_permille / 1000` of a window move to
    /// the next window's ledger. Zero disables the grace period.
    pub grace_permille: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            window_len: SimTime::from_millis(1_000),
            grace_permille: 100,
        }
    }
}

impl MonitorConfig {
    pub fn window_of(&self, t: SimTime) -> Window {
        t.as_micros() / self.window_len.as_micros()
    }

    pub fn window_start(&self, window: Window) -> SimTime {
        SimTime::from_micros(window * self.window_len.as_micros())
    }

    pub fn window_end(&self, window: Window) -> SimTime {
        self.window_start(window + 1)
    }

    /// Window whose ledger a registration at `t` belongs to.
    pub fn ledger_window(&self, t: SimTime) -> Window {
        let window = self.window_of(t);
        let offset = t.as_micros() % self.window_len.as_micros();
        let grace_start = self.window_len.as_micros() * (1000 - self.grace_permille as u64) / 1000;
        if self.grace_permille > 0 && offset >= grace_start {
            window + 1
        } else {
            window
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisteredPacket {
    pub packet_id: PacketId,
    pub next_hop: NodeId,
    pub registered_at: SimTime,
    pub window: Window,
}

/// Per-neighbor forwarding tally for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowReport {
    pub neighbor: NodeId,
    pub window: Window,
    pub forwarded: u32,
    pub missing: u32,
}

impl WindowReport {
    pub fn registered(&self) -> u32 {
        self.forwarded + self.missing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("window {window} already closed (next open window is {next})")]
    WindowAlreadyClosed { window: Window, next: Window },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    registered: u32,
    matched: u32,
}

/// Registered-packet queue plus per-(neighbor, window) tallies.
#[derive(Debug, Clone)]
pub struct PacketBuffer {
    config: MonitorConfig,
    pending: BTreeMap<(PacketId, NodeId), RegisteredPacket>,
    tallies: BTreeMap<(Window, NodeId), Tally>,
    /// Keys registered in the currently open or recently closed windows;
    /// makes re-registration of a retransmitted packet a no-op.
    seen: BTreeMap<(PacketId, NodeId), Window>,
    next_to_close: Window,
}

impl PacketBuffer {
    pub fn new(config: MonitorConfig) -> Self {
        PacketBuffer {
            config,
            pending: BTreeMap::new(),
            tallies: BTreeMap::new(),
            seen: BTreeMap::new(),
            next_to_close: 0,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn is_pending(&self, packet_id: PacketId, next_hop: NodeId) -> bool {
        self.pending.contains_key(&(packet_id, next_hop))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn next_window_to_close(&self) -> Window {
        self.next_to_close
    }

    fn already_seen(&self, packet_id: PacketId, next_hop: NodeId) -> bool {
        self.seen.contains_key(&(packet_id, next_hop))
    }

    /// Registers a packet handed to `next_hop`. Returns the registration, or
    /// `None` when the packet was already registered for that hop.
    pub fn register_sent(
        &mut self,
        packet_id: PacketId,
        next_hop: NodeId,
        now: SimTime,
    ) -> Option<RegisteredPacket> {
        if self.already_seen(packet_id, next_hop) {
            return None;
        }
        // never file into a window that has already been closed
        let window = self.config.ledger_window(now).max(self.next_to_close);
        let reg = RegisteredPacket {
            packet_id,
            next_hop,
            registered_at: now,
            window,
        };
        self.pending.insert((packet_id, next_hop), reg);
        self.seen.insert((packet_id, next_hop), window);
        self.tallies
            .entry((window, next_hop))
            .or_default()
            .registered += 1;
        Some(reg)
    }

    /// Records an overheard forward. Returns the matched registration, if any.
    pub fn on_overheard(
        &mut self,
        packet_id: PacketId,
        forwarder: NodeId,
    ) -> Option<RegisteredPacket> {
        let reg = self.pending.remove(&(packet_id, forwarder))?;
        self.tallies
            .entry((reg.window, forwarder))
            .or_default()
            .matched += 1;
        Some(reg)
    }

    /// Closes `window`: unmatched registrations become missing.
    pub fn close_window(&mut self, window: Window) -> Result<Vec<WindowReport>, MonitorError> {
        if window < self.next_to_close {
            return Err(MonitorError::WindowAlreadyClosed {
                window,
                next: self.next_to_close,
            });
        }
        self.pending.retain(|_, reg| reg.window > window);
        let closed: Vec<(Window, NodeId)> = self
            .tallies
            .range(..(window + 1, NodeId(0)))
            .map(|(k, _)| *k)
            .collect();
        let mut reports = Vec::with_capacity(closed.len());
        for key in closed {
            let tally = self.tallies.remove(&key).unwrap_or_default();
            if tally.registered == 0 {
                continue;
            }
            reports.push(WindowReport {
                neighbor: key.1,
                window: key.0,
                forwarded: tally.matched,
                missing: tally.registered - tally.matched,
            });
        }
        reports.sort_by_key(|r| (r.neighbor, r.window));
        // keep dedup memory for one closed window
        self.seen.retain(|_, w| *w + 1 > window);
        self.next_to_close = window + 1;
        Ok(reports)
    }
}
