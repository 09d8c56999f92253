//! Discrete-event simulation of a wireless ad hoc network running the
//! reputation IDS.
//!
//! Time is integer microseconds; the queue pops in `(time, seq)` order and all
//! randomness comes from one ChaCha stream seeded by the scenario, drawn in a
//! fixed order (loss draws in receiver-id order, grayhole draws per arrival,
//! mobility draws per step). A run is a self-contained value, so independent
//! runs can execute on different threads.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsim_core::monitor::{MonitorConfig, PacketBuffer};
use repsim_core::reputation::{
    Evidence, IndirectAction, IndirectEvidence, IndirectOutcome, ReputationEntry, ReputationParams,
    ReputationTable,
};
use repsim_core::routing::{
    self, DataDecision, ReasonCode, RequestIds, RouteCache, RouteError, RouteReply, RouteRequest,
    RrepOutcome, RreqOutcome, SeenRequests, Sighting, SourceRoute,
};
use repsim_core::trace_test::{self, TraceTester, PROBE_TTL};
use repsim_core::{NodeId, PacketId, SimTime, Window};

use crate::medium::{self, WaypointState};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::scenario::{secs, Behavior, Mobility, Scenario, ScenarioError, Script};
use crate::trace::{
    Change, DropCause, DropInfo, EvidenceInfo, FlowInfo, Ledger, Misbehavior, NodeInfo, PacketKind,
    RunHeader, RxInfo, TraceEvent, TraceRecord, TraceSink, TxInfo,
};

/// Hop budget of ordinary data packets.
pub const DATA_TTL: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the JSONL text of the trace (the digest is always computed).
    pub keep_trace_text: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            keep_trace_text: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub jsonl: Option<String>,
    pub digest: String,
    pub metrics: MetricsReport,
}

/// Validates `scenario` and runs it to completion.
pub fn run(scenario: &Scenario, options: RunOptions) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut sim = Simulator::new(scenario, options);
    sim.run_to_end();
    let (records, jsonl, digest) = sim.sink.finish();
    let metrics = compute_metrics(&records).expect("engine emits complete traces");
    Ok(RunOutput {
        records,
        jsonl,
        digest,
        metrics,
    })
}

#[derive(Debug, Clone)]
struct DataPacket {
    id: PacketId,
    flow: Option<u32>,
    route: SourceRoute,
    ttl: u8,
    /// Issuer-side marker only; relays cannot see it.
    probe: bool,
}

impl DataPacket {
    fn kind(&self) -> PacketKind {
        if self.probe {
            PacketKind::Probe
        } else {
            PacketKind::Data
        }
    }
}

#[derive(Debug, Clone)]
enum Packet {
    Data(DataPacket),
    Trace {
        packet: PacketId,
        from: NodeId,
        to: NodeId,
        destination: NodeId,
    },
    Rreq(RouteRequest),
    Rrep(RouteReply),
    /// `path[0]` is the receiver; the rest leads back to the source.
    Rerr {
        error: RouteError,
        path: Vec<NodeId>,
    },
    Warning {
        accuser: NodeId,
        accused: NodeId,
        window: Window,
    },
}

#[derive(Debug)]
struct Transmission {
    id: u64,
    sender: usize,
    addressee: Option<usize>,
    packet: Packet,
}

#[derive(Debug)]
enum EventKind {
    Deliver {
        rx: usize,
        tx: Rc<Transmission>,
    },
    WindowClose(Window),
    Generate {
        flow: usize,
        k: u64,
    },
    Mobility,
    ProbeDeadline {
        issuer: usize,
        target: NodeId,
        probe: PacketId,
    },
    RreqRetry {
        node: usize,
        destination: NodeId,
        generation: u64,
    },
    BufferExpire {
        node: usize,
        packet: PacketId,
    },
    BehaviorSwitch {
        node: usize,
        behavior: Behavior,
    },
    Script(usize),
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Buffered {
    packet: PacketId,
    flow: u32,
}

struct Node {
    id: NodeId,
    behavior: Behavior,
    pos: [f64; 2],
    waypoint: Option<WaypointState>,
    neighbors: BTreeSet<usize>,
    table: ReputationTable,
    /// Entries of neighbors that moved out of range.
    remembered: BTreeMap<NodeId, ReputationEntry>,
    cache: RouteCache,
    monitor: PacketBuffer,
    trace_ledger: PacketBuffer,
    omissions: PacketBuffer,
    /// (packet, transmitter) pairs overheard recently.
    heard: BTreeMap<(PacketId, NodeId), Window>,
    tester: TraceTester,
    seen: SeenRequests,
    request_ids: RequestIds,
    send_buffer: BTreeMap<NodeId, VecDeque<Buffered>>,
    discovery: BTreeMap<NodeId, u64>,
    discovery_generation: u64,
    /// (source, destination) -> (path back to the source, next hop) for relayed flows.
    relayed: BTreeMap<(NodeId, NodeId), (Vec<NodeId>, NodeId)>,
    last_route: BTreeMap<NodeId, SourceRoute>,
}

struct FlowRt {
    id: u32,
    source: usize,
    destination: NodeId,
    start: SimTime,
    stop: SimTime,
    rate: f64,
}

impl FlowRt {
    fn time_of(&self, k: u64) -> SimTime {
        self.start + SimTime::from_micros((k as f64 * 1e6 / self.rate).round() as u64)
    }
}

pub(crate) struct Simulator {
    scenario: Scenario,
    params: ReputationParams,
    mon: MonitorConfig,
    range: f64,
    p_loss: f64,
    delay: SimTime,
    rreq_retry: SimTime,
    buffer_timeout: SimTime,
    avoid_cap: usize,
    ids: bool,
    now: SimTime,
    end: SimTime,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    flows: Vec<FlowRt>,
    next_packet: u64,
    next_tx: u64,
    /// Flow packets not yet delivered or dropped.
    live: BTreeMap<PacketId, u32>,
    sink: TraceSink,
}

impl Simulator {
    pub(crate) fn new(scenario: &Scenario, options: RunOptions) -> Self {
        let mut sc = scenario.clone();
        // index order doubles as receiver-id order for loss draws
        sc.nodes.sort_by_key(|n| n.id);
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let params = sc.reputation;
        let mon = MonitorConfig {
            window_len: secs(sc.window_len),
            grace_permille: (sc.monitor.grace * 1000.0).round() as u32,
        };
        let index: BTreeMap<NodeId, usize> = sc
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let nodes: Vec<Node> = sc
            .nodes
            .iter()
            .map(|spec| Node {
                id: spec.id,
                behavior: spec.behavior,
                pos: spec.position,
                waypoint: spec.mobility.map(|m| match m {
                    Mobility::RandomWaypoint(w) => WaypointState::new(w, &mut rng),
                }),
                neighbors: BTreeSet::new(),
                table: ReputationTable::new(spec.id),
                remembered: BTreeMap::new(),
                cache: RouteCache::new(),
                monitor: PacketBuffer::new(mon),
                trace_ledger: PacketBuffer::new(mon),
                omissions: PacketBuffer::new(mon),
                heard: BTreeMap::new(),
                tester: TraceTester::new(sc.trace_test.rate_limit_windows),
                seen: SeenRequests::default(),
                request_ids: RequestIds::default(),
                send_buffer: BTreeMap::new(),
                discovery: BTreeMap::new(),
                discovery_generation: 0,
                relayed: BTreeMap::new(),
                last_route: BTreeMap::new(),
            })
            .collect();
        let end = secs(sc.duration);
        let flows = sc
            .flows
            .iter()
            .enumerate()
            .map(|(i, f)| FlowRt {
                id: i as u32,
                source: index[&f.source],
                destination: f.destination,
                start: secs(f.start),
                stop: f.stop.map(secs).unwrap_or(end),
                rate: f.rate,
            })
            .collect();
        Simulator {
            params,
            mon,
            range: sc.medium.radio_range,
            p_loss: sc.medium.p_loss,
            delay: secs(sc.medium.propagation_delay),
            rreq_retry: secs(sc.routing.rreq_retry),
            buffer_timeout: secs(sc.routing.send_buffer_timeout),
            avoid_cap: sc.routing.avoid_list_cap,
            ids: sc.ids_enabled,
            now: SimTime::ZERO,
            end,
            queue: BinaryHeap::new(),
            seq: 0,
            rng,
            nodes,
            index,
            flows,
            next_packet: 0,
            next_tx: 0,
            live: BTreeMap::new(),
            sink: TraceSink::new(options.keep_trace_text),
            scenario: sc,
        }
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled { time, seq, kind });
    }

    fn log(&mut self, event: TraceEvent) {
        self.sink.push(self.now, event);
    }

    fn window(&self) -> Window {
        self.mon.window_of(self.now)
    }

    fn ids_active(&self, ni: usize) -> bool {
        self.ids && self.nodes[ni].behavior.is_honest()
    }

    fn fresh_packet_id(&mut self) -> PacketId {
        let id = PacketId(self.next_packet);
        self.next_packet += 1;
        id
    }

    fn header(&self) -> RunHeader {
        RunHeader {
            scenario_id: self.scenario.scenario_id.clone(),
            seed: self.scenario.seed,
            duration: self.scenario.duration,
            ids_enabled: self.ids,
            window_len: self.scenario.window_len,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeInfo {
                    id: n.id,
                    behavior: n.behavior.tag().to_string(),
                })
                .collect(),
            flows: self
                .flows
                .iter()
                .map(|f| FlowInfo {
                    flow: f.id,
                    source: self.nodes[f.source].id,
                    destination: f.destination,
                })
                .collect(),
            params: self.params,
        }
    }

    pub(crate) fn run_to_end(&mut self) {
        let header = self.header();
        self.log(TraceEvent::RunStart(header));
        self.update_neighbors();

        for ni in 0..self.nodes.len() {
            let schedule = self.scenario.nodes[ni].schedule.clone();
            for s in schedule {
                self.schedule(
                    secs(s.at),
                    EventKind::BehaviorSwitch {
                        node: ni,
                        behavior: s.behavior,
                    },
                );
            }
        }
        for i in 0..self.scenario.scripts.len() {
            let at = secs(self.scenario.scripts[i].at());
            self.schedule(at, EventKind::Script(i));
        }
        for fi in 0..self.flows.len() {
            let f = &self.flows[fi];
            if f.start < f.stop {
                let t = f.start;
                self.schedule(t, EventKind::Generate { flow: fi, k: 0 });
            }
        }
        if self.ids {
            self.schedule(self.mon.window_end(0), EventKind::WindowClose(0));
        }
        if self.nodes.iter().any(|n| n.waypoint.is_some()) {
            self.schedule(
                secs(self.scenario.medium.mobility_step),
                EventKind::Mobility,
            );
        }

        while let Some(ev) = self.queue.pop() {
            if ev.time > self.end {
                break;
            }
            if ev.time == self.end && !matches!(ev.kind, EventKind::WindowClose(_)) {
                continue;
            }
            self.now = ev.time;
            self.dispatch(ev.kind);
        }
        self.now = self.end;
        let live = std::mem::take(&mut self.live);
        for (packet, flow) in live {
            self.log(TraceEvent::InFlight { flow, packet });
        }
        let events = self.sink.len() as u64 + 1;
        self.log(TraceEvent::RunEnd { events });
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver { rx, tx } => self.on_deliver(rx, &tx),
            EventKind::WindowClose(w) => self.on_window_close(w),
            EventKind::Generate { flow, k } => self.on_generate(flow, k),
            EventKind::Mobility => self.on_mobility(),
            EventKind::ProbeDeadline {
                issuer,
                target,
                probe,
            } => {
                if let Some((_, outcome)) = self.nodes[issuer].tester.on_deadline(target, probe) {
                    self.resolve_test(issuer, target, probe, outcome.passed());
                }
            }
            EventKind::RreqRetry {
                node,
                destination,
                generation,
            } => self.on_rreq_retry(node, destination, generation),
            EventKind::BufferExpire { node, packet } => self.on_buffer_expire(node, packet),
            EventKind::BehaviorSwitch { node, behavior } => {
                self.nodes[node].behavior = behavior;
                let id = self.nodes[node].id;
                self.log(TraceEvent::BehaviorSwitch {
                    node: id,
                    behavior: behavior.tag().to_string(),
                });
            }
            EventKind::Script(i) => self.on_script(i),
        }
    }

    // ---- topology ----

    fn update_neighbors(&mut self) {
        let positions: Vec<[f64; 2]> = self.nodes.iter().map(|n| n.pos).collect();
        let window = self.window();
        for ni in 0..self.nodes.len() {
            let now: BTreeSet<usize> = medium::neighbors(&positions, ni, self.range)
                .into_iter()
                .collect();
            let old = std::mem::take(&mut self.nodes[ni].neighbors);
            for &j in now.difference(&old) {
                let nid = self.nodes[j].id;
                let node = &mut self.nodes[ni];
                match node.remembered.remove(&nid) {
                    Some(entry) => node
                        .table
                        .restore(nid, entry)
                        .expect("neighbor is not self"),
                    None => {
                        node.table
                            .observe_neighbor(nid, &self.params, window)
                            .expect("neighbor is not self");
                    }
                }
            }
            for &j in old.difference(&now) {
                let nid = self.nodes[j].id;
                let node = &mut self.nodes[ni];
                if let Some(entry) = node.table.evict(nid) {
                    node.remembered.insert(nid, entry);
                }
            }
            self.nodes[ni].neighbors = now;
        }
    }

    fn on_mobility(&mut self) {
        let dt = self.scenario.medium.mobility_step;
        for ni in 0..self.nodes.len() {
            if let Some(mut w) = self.nodes[ni].waypoint.take() {
                let mut pos = self.nodes[ni].pos;
                w.step(&mut pos, dt, &mut self.rng);
                self.nodes[ni].pos = pos;
                self.nodes[ni].waypoint = Some(w);
            }
        }
        self.update_neighbors();
        let next = self.now + secs(dt);
        self.schedule(next, EventKind::Mobility);
    }

    fn is_neighbor(&self, ni: usize, other: NodeId) -> Option<usize> {
        let j = *self.index.get(&other)?;
        self.nodes[ni].neighbors.contains(&j).then_some(j)
    }

    // ---- radio ----

    /// Broadcasts (or unicasts, still overheard by all in range). Returns
    /// whether the addressee received it.
    fn transmit(&mut self, from: usize, addressee: Option<usize>, packet: Packet) -> bool {
        let id = self.next_tx;
        self.next_tx += 1;
        let info = self.tx_info(from, addressee, id, &packet);
        self.log(TraceEvent::Tx(info));
        let tx = Rc::new(Transmission {
            id,
            sender: from,
            addressee,
            packet,
        });
        let receivers: Vec<usize> = self.nodes[from].neighbors.iter().copied().collect();
        let mut reached = false;
        for rx in receivers {
            if medium::lost(&mut self.rng, self.p_loss) {
                continue;
            }
            if Some(rx) == addressee {
                reached = true;
            }
            let at = self.now + self.delay;
            self.schedule(
                at,
                EventKind::Deliver {
                    rx,
                    tx: Rc::clone(&tx),
                },
            );
        }
        reached
    }

    fn tx_info(&self, from: usize, addressee: Option<usize>, id: u64, packet: &Packet) -> TxInfo {
        let mut info = TxInfo {
            node: self.nodes[from].id,
            kind: packet_kind(packet),
            tx: id,
            packet: None,
            flow: None,
            next_hop: addressee.map(|a| self.nodes[a].id),
            route: Vec::new(),
            avoid: Vec::new(),
            origin: None,
            request: None,
            accuser: None,
            accused: None,
            window: None,
        };
        match packet {
            Packet::Data(d) => {
                info.packet = Some(d.id);
                info.flow = d.flow;
                info.route = d.route.hops().to_vec();
            }
            Packet::Trace { packet, .. } => info.packet = Some(*packet),
            Packet::Rreq(r) => {
                info.origin = Some(r.origin);
                info.request = Some(r.request_id);
                info.avoid = r.avoid_list.as_slice().to_vec();
                info.route = r.accumulated_route.clone();
            }
            Packet::Rrep(r) => {
                info.origin = Some(r.route.source());
                info.request = Some(r.request_id);
                info.avoid = r.avoid_list.as_slice().to_vec();
                info.route = r.route.hops().to_vec();
            }
            Packet::Rerr { error, .. } => {
                info.route = vec![error.broken_link.0, error.broken_link.1];
            }
            Packet::Warning {
                accuser,
                accused,
                window,
            } => {
                info.accuser = Some(*accuser);
                info.accused = Some(*accused);
                info.window = Some(*window);
            }
        }
        info
    }

    fn on_deliver(&mut self, rx: usize, tx: &Transmission) {
        let addressed = tx.addressee == Some(rx);
        let from = self.nodes[tx.sender].id;
        let (packet_id, accused) = match &tx.packet {
            Packet::Data(d) => (Some(d.id), None),
            Packet::Trace { packet, .. } => (Some(*packet), None),
            Packet::Warning { accused, .. } => (None, Some(*accused)),
            _ => (None, None),
        };
        self.log(TraceEvent::Rx(RxInfo {
            node: self.nodes[rx].id,
            from,
            kind: packet_kind(&tx.packet),
            tx: tx.id,
            packet: packet_id,
            addressed,
            accused,
        }));
        match &tx.packet {
            Packet::Data(d) => {
                if self.ids_active(rx) {
                    self.observe_data(rx, from, d);
                }
                if addressed {
                    self.on_data_arrival(rx, from, d.clone());
                }
            }
            Packet::Trace {
                packet,
                from,
                to,
                destination,
            } => {
                if self.ids_active(rx) {
                    self.observe_trace(rx, *from, *packet, *to, *destination);
                }
            }
            Packet::Rreq(r) => self.on_rreq(rx, from, r),
            Packet::Rrep(r) => {
                if addressed {
                    self.on_rrep(rx, from, r);
                }
            }
            Packet::Rerr { error, path } => {
                if addressed {
                    self.on_rerr(rx, error, path);
                }
            }
            Packet::Warning { accused, .. } => {
                if self.ids_active(rx) {
                    self.on_warning(rx, *accused);
                }
            }
        }
    }

    // ---- IDS observation ----

    fn observe_data(&mut self, rx: usize, from: NodeId, d: &DataPacket) {
        let now = self.now;
        let me = self.nodes[rx].id;
        if self.nodes[rx].monitor.on_overheard(d.id, from).is_some() {
            self.log(TraceEvent::Pack {
                node: me,
                neighbor: from,
                packet: d.id,
            });
        }
        if let Some((_, outcome)) = self.nodes[rx].tester.on_overheard(d.id, from) {
            self.resolve_test(rx, from, d.id, outcome.passed());
        }
        let window = self.window();
        let node = &mut self.nodes[rx];
        node.trace_ledger.on_overheard(d.id, from);
        // a relay whose predecessor we did not hear owes us a trace
        if let Some(pos) = d.route.position(from) {
            if pos > 0 {
                let pred = d.route.hops()[pos - 1];
                if me != pred
                    && !node.heard.contains_key(&(d.id, pred))
                    && node.table.contains(from)
                {
                    node.omissions.register_sent(d.id, from, now);
                }
            }
        }
        node.heard.insert((d.id, from), window);
    }

    fn observe_trace(
        &mut self,
        rx: usize,
        from: NodeId,
        packet: PacketId,
        to: NodeId,
        destination: NodeId,
    ) {
        let now = self.now;
        let node = &mut self.nodes[rx];
        node.omissions.on_overheard(packet, from);
        if node.id != to
            && to != destination
            && node.table.contains(to)
            && !node.heard.contains_key(&(packet, to))
        {
            node.trace_ledger.register_sent(packet, to, now);
        }
    }

    fn on_warning(&mut self, rx: usize, accused: NodeId) {
        if accused == self.nodes[rx].id {
            return;
        }
        let outcome = self.nodes[rx]
            .table
            .apply_indirect(accused, IndirectEvidence::Warning, &self.params)
            .expect("accused is not self");
        if let IndirectOutcome::Applied {
            before,
            after,
            action,
        } = outcome
        {
            self.log_change(
                rx,
                accused,
                Change::Evidence(Evidence::Warning),
                before,
                after,
            );
            if action == IndirectAction::TriggerTraceTest {
                self.maybe_trace_test(rx, accused);
            }
        }
    }

    fn apply_sightings(&mut self, ni: usize, sightings: Vec<Sighting>) {
        if !self.ids_active(ni) {
            return;
        }
        for s in sightings {
            self.log_change(
                ni,
                s.subject,
                Change::Evidence(Evidence::AvoidSighting),
                s.before,
                s.after,
            );
            if s.action == IndirectAction::TriggerTraceTest {
                self.maybe_trace_test(ni, s.subject);
            }
        }
    }

    fn log_change(
        &mut self,
        ni: usize,
        subject: NodeId,
        change: Change,
        before: ReputationEntry,
        after: ReputationEntry,
    ) {
        let class = after.class(&self.params);
        self.log(TraceEvent::Evidence(EvidenceInfo {
            node: self.nodes[ni].id,
            subject,
            change,
            before: before.value,
            after: after.value,
            class,
            declared: after.declared_malicious,
        }));
        if !before.declared_malicious && after.declared_malicious {
            self.on_declared(ni, subject);
        } else if before.declared_malicious && !after.declared_malicious {
            self.on_redeemed(ni, subject);
        }
    }

    fn apply_first_hand(&mut self, ni: usize, subject: NodeId, evidence: Evidence) {
        let result = self.nodes[ni]
            .table
            .apply_evidence(subject, &evidence, &self.params);
        match result {
            Ok(Some((before, after, _))) => {
                self.log_change(ni, subject, Change::Evidence(evidence), before, after)
            }
            Ok(None) => {}
            Err(e) => log::debug!(
                "{} ignored evidence about {subject}: {e}",
                self.nodes[ni].id
            ),
        }
    }

    fn on_declared(&mut self, ni: usize, subject: NodeId) {
        let me = self.nodes[ni].id;
        routing::purge_on_malicious(&mut self.nodes[ni].cache, subject);
        let broken: Vec<((NodeId, NodeId), Vec<NodeId>)> = self.nodes[ni]
            .relayed
            .iter()
            .filter(|(_, (_, next))| *next == subject)
            .map(|(k, (path, _))| (*k, path.clone()))
            .collect();
        for ((source, destination), path) in broken {
            self.nodes[ni].relayed.remove(&(source, destination));
            let error = RouteError {
                broken_link: (me, subject),
                affected: vec![destination],
            };
            self.send_rerr(ni, error, path);
        }
    }

    fn on_redeemed(&mut self, ni: usize, subject: NodeId) {
        self.nodes[ni].tester.clear_condemned(subject);
        let now = self.now;
        let destinations: BTreeSet<NodeId> = self
            .flows
            .iter()
            .filter(|f| f.source == ni && f.start <= now && now < f.stop)
            .map(|f| f.destination)
            .collect();
        for d in destinations {
            self.start_discovery(ni, d, true);
        }
    }

    // ---- trace test ----

    fn maybe_trace_test(&mut self, ni: usize, target: NodeId) {
        let window = self.window();
        let Some(entry) = self.nodes[ni].table.get(target).copied() else {
            return;
        };
        if !self.nodes[ni]
            .tester
            .should_trigger(target, &entry, &self.params, window)
        {
            return;
        }
        let me = self.nodes[ni].id;
        let probe_id = self.fresh_packet_id();
        match trace_test::build_probe(me, target, &self.nodes[ni].cache, probe_id) {
            Err(_) => self.log(TraceEvent::TraceTestSkipped { node: me, target }),
            Ok(probe) => {
                let now = self.now;
                self.nodes[ni]
                    .tester
                    .issue(&probe, now, window, self.mon.window_len);
                self.log(TraceEvent::TraceTestIssued {
                    node: me,
                    target,
                    probe: probe_id,
                    route: probe.route.hops().to_vec(),
                });
                let deadline = now + self.mon.window_len;
                self.schedule(
                    deadline,
                    EventKind::ProbeDeadline {
                        issuer: ni,
                        target,
                        probe: probe_id,
                    },
                );
                let packet = DataPacket {
                    id: probe_id,
                    flow: None,
                    route: probe.route,
                    ttl: PROBE_TTL,
                    probe: true,
                };
                self.send_data(ni, packet, target, false, true);
            }
        }
    }

    fn resolve_test(&mut self, ni: usize, target: NodeId, probe: PacketId, passed: bool) {
        let me = self.nodes[ni].id;
        self.log(TraceEvent::TraceTestResolved {
            node: me,
            target,
            probe,
            passed,
        });
        self.apply_first_hand(ni, target, Evidence::TraceTestResult { passed });
        if !passed {
            let window = self.window();
            self.transmit(
                ni,
                None,
                Packet::Warning {
                    accuser: me,
                    accused: target,
                    window,
                },
            );
        }
    }

    // ---- data plane ----

    fn on_generate(&mut self, fi: usize, k: u64) {
        let packet = self.fresh_packet_id();
        let (source, flow, destination) = {
            let f = &self.flows[fi];
            (f.source, f.id, f.destination)
        };
        self.log(TraceEvent::Generated {
            node: self.nodes[source].id,
            flow,
            packet,
        });
        self.live.insert(packet, flow);
        self.originate(source, packet, flow, destination);
        let next = self.flows[fi].time_of(k + 1);
        if next < self.flows[fi].stop {
            self.schedule(next, EventKind::Generate { flow: fi, k: k + 1 });
        }
    }

    fn pick_route(&mut self, ni: usize, destination: NodeId) -> Option<SourceRoute> {
        let node = &self.nodes[ni];
        let route = node.cache.best(destination, &node.table, &self.params)?;
        if node.last_route.get(&destination) != Some(&route) {
            let me = node.id;
            self.nodes[ni].last_route.insert(destination, route.clone());
            self.log(TraceEvent::RouteSelected {
                node: me,
                destination,
                route: route.hops().to_vec(),
            });
        }
        Some(route)
    }

    fn originate(&mut self, ni: usize, packet: PacketId, flow: u32, destination: NodeId) {
        match self.pick_route(ni, destination) {
            Some(route) => self.send_from_source(ni, packet, flow, route),
            None => {
                self.nodes[ni]
                    .send_buffer
                    .entry(destination)
                    .or_default()
                    .push_back(Buffered { packet, flow });
                let at = self.now + self.buffer_timeout;
                self.schedule(at, EventKind::BufferExpire { node: ni, packet });
                self.start_discovery(ni, destination, false);
            }
        }
    }

    fn send_from_source(&mut self, ni: usize, packet: PacketId, flow: u32, route: SourceRoute) {
        let next = route.hops()[1];
        let register = next != route.destination();
        let trace = self.nodes[ni].behavior != Behavior::TraceDropper;
        let d = DataPacket {
            id: packet,
            flow: Some(flow),
            route,
            ttl: DATA_TTL,
            probe: false,
        };
        self.send_data(ni, d, next, register, trace);
    }

    fn send_data(&mut self, ni: usize, d: DataPacket, next: NodeId, register: bool, trace: bool) {
        let me = self.nodes[ni].id;
        let Some(nj) = self.is_neighbor(ni, next) else {
            self.drop_data(ni, &d, DropCause::Policy, ReasonCode::LinkBroken);
            self.nodes[ni].cache.remove_link(me, next);
            if let Some(path) = d.route.reverse_prefix(me) {
                let error = RouteError {
                    broken_link: (me, next),
                    affected: vec![d.route.destination()],
                };
                self.send_rerr(ni, error, path[1..].to_vec());
            }
            return;
        };
        let reached = self.transmit(ni, Some(nj), Packet::Data(d.clone()));
        let now = self.now;
        if register && self.ids_active(ni) {
            self.nodes[ni].monitor.register_sent(d.id, next, now);
        }
        {
            let node = &mut self.nodes[ni];
            node.cache.record_use(me, &d.route);
            if d.flow.is_some() && d.route.source() != me {
                if let Some(path) = d.route.reverse_prefix(me) {
                    node.relayed.insert(
                        (d.route.source(), d.route.destination()),
                        (path[1..].to_vec(), next),
                    );
                }
            }
        }
        if trace && self.ids {
            self.transmit(
                ni,
                None,
                Packet::Trace {
                    packet: d.id,
                    from: me,
                    to: next,
                    destination: d.route.destination(),
                },
            );
        }
        if !reached {
            self.drop_data(ni, &d, DropCause::Channel, ReasonCode::ChannelLoss);
        }
    }

    fn drop_data(&mut self, ni: usize, d: &DataPacket, cause: DropCause, reason: ReasonCode) {
        self.log(TraceEvent::Drop(DropInfo {
            node: self.nodes[ni].id,
            kind: d.kind(),
            packet: Some(d.id),
            flow: d.flow,
            origin: None,
            cause,
            reason,
        }));
        if !d.probe {
            self.live.remove(&d.id);
        }
    }

    fn on_data_arrival(&mut self, ni: usize, prev: NodeId, d: DataPacket) {
        let me = self.nodes[ni].id;
        let decision =
            routing::forward_data(me, &d.route, prev, &self.nodes[ni].table, &self.params);
        match decision {
            DataDecision::Misroute => {
                self.drop_data(ni, &d, DropCause::Policy, ReasonCode::Misroute)
            }
            DataDecision::Refuse(reason) => self.drop_data(ni, &d, DropCause::Policy, reason),
            DataDecision::Deliver => {
                // probes end silently at their last hop
                if let Some(flow) = d.flow {
                    self.log(TraceEvent::Delivered {
                        node: me,
                        flow,
                        packet: d.id,
                        hops: d.route.hop_count() as u32,
                    });
                    self.live.remove(&d.id);
                }
            }
            DataDecision::Forward { next_hop, register } => self.relay(ni, d, next_hop, register),
        }
    }

    fn relay(&mut self, ni: usize, mut d: DataPacket, next: NodeId, register: bool) {
        let behavior = self.nodes[ni].behavior;
        let (forward, trace) = match behavior {
            Behavior::Honest => (true, true),
            Behavior::Blackhole | Behavior::Selfish => (false, false),
            Behavior::Grayhole { p_drop } => (!medium::lost(&mut self.rng, p_drop), true),
            Behavior::TraceDropper => (true, false),
        };
        let me = self.nodes[ni].id;
        if !forward {
            self.log(TraceEvent::Misbehave {
                node: me,
                packet: d.id,
                action: Misbehavior::DropData,
            });
            self.drop_data(ni, &d, DropCause::Adversary, ReasonCode::AdversaryDrop);
            return;
        }
        if d.ttl <= 1 {
            self.drop_data(ni, &d, DropCause::Policy, ReasonCode::TtlExpired);
            return;
        }
        d.ttl -= 1;
        if !trace && self.ids {
            self.log(TraceEvent::Misbehave {
                node: me,
                packet: d.id,
                action: Misbehavior::OmitTrace,
            });
        }
        self.send_data(ni, d, next, register, trace);
    }

    fn on_buffer_expire(&mut self, ni: usize, packet: PacketId) {
        let mut found = None;
        for (dest, q) in self.nodes[ni].send_buffer.iter_mut() {
            if let Some(pos) = q.iter().position(|b| b.packet == packet) {
                found = q.remove(pos).map(|b| (*dest, b));
                break;
            }
        }
        if let Some((_, b)) = found {
            self.log(TraceEvent::Drop(DropInfo {
                node: self.nodes[ni].id,
                kind: PacketKind::Data,
                packet: Some(b.packet),
                flow: Some(b.flow),
                origin: None,
                cause: DropCause::Policy,
                reason: ReasonCode::SendBufferTimeout,
            }));
            self.live.remove(&b.packet);
        }
    }

    fn flush_buffer(&mut self, ni: usize, destination: NodeId) {
        let Some(queue) = self.nodes[ni].send_buffer.remove(&destination) else {
            return;
        };
        let mut rest = VecDeque::new();
        for b in queue {
            match self.pick_route(ni, destination) {
                Some(route) => self.send_from_source(ni, b.packet, b.flow, route),
                None => rest.push_back(b),
            }
        }
        if !rest.is_empty() {
            self.nodes[ni].send_buffer.insert(destination, rest);
        }
    }

    // ---- control plane ----

    fn start_discovery(&mut self, ni: usize, destination: NodeId, force: bool) {
        if !force && self.nodes[ni].discovery.contains_key(&destination) {
            return;
        }
        let node = &mut self.nodes[ni];
        node.discovery_generation += 1;
        let generation = node.discovery_generation;
        node.discovery.insert(destination, generation);
        self.send_rreq(ni, destination);
        let at = self.now + self.rreq_retry;
        self.schedule(
            at,
            EventKind::RreqRetry {
                node: ni,
                destination,
                generation,
            },
        );
    }

    fn send_rreq(&mut self, ni: usize, destination: NodeId) {
        let malicious = if self.ids {
            self.nodes[ni].table.malicious_list()
        } else {
            Vec::new()
        };
        let node = &mut self.nodes[ni];
        let Ok(rreq) = routing::originate_rreq(
            node.id,
            destination,
            &malicious,
            &mut node.request_ids,
            self.avoid_cap,
        ) else {
            return;
        };
        node.seen.insert(rreq.origin, rreq.request_id);
        self.transmit(ni, None, Packet::Rreq(rreq));
    }

    fn on_rreq_retry(&mut self, ni: usize, destination: NodeId, generation: u64) {
        if self.nodes[ni].discovery.get(&destination) != Some(&generation) {
            return;
        }
        let waiting = self.nodes[ni]
            .send_buffer
            .get(&destination)
            .is_some_and(|q| !q.is_empty());
        if self.nodes[ni].cache.has_route(destination) || !waiting {
            self.nodes[ni].discovery.remove(&destination);
            return;
        }
        self.send_rreq(ni, destination);
        let at = self.now + self.rreq_retry;
        self.schedule(
            at,
            EventKind::RreqRetry {
                node: ni,
                destination,
                generation,
            },
        );
    }

    fn on_rreq(&mut self, ni: usize, from: NodeId, rreq: &RouteRequest) {
        let me = self.nodes[ni].id;
        if self.nodes[ni].behavior == Behavior::Selfish && rreq.destination != me {
            return;
        }
        let decision = {
            let node = &mut self.nodes[ni];
            routing::handle_rreq(
                rreq,
                from,
                &mut node.seen,
                &mut node.table,
                &self.params,
                self.avoid_cap,
            )
        };
        self.apply_sightings(ni, decision.sightings);
        match decision.outcome {
            RreqOutcome::Drop(reason) => self.log(TraceEvent::Drop(DropInfo {
                node: me,
                kind: PacketKind::Rreq,
                packet: None,
                flow: None,
                origin: Some(rreq.origin),
                cause: DropCause::Policy,
                reason,
            })),
            RreqOutcome::Reply(reply) => {
                let hops = reply.route.hops();
                let back = hops[hops.len() - 2];
                if let Some(j) = self.is_neighbor(ni, back) {
                    self.transmit(ni, Some(j), Packet::Rrep(reply));
                }
            }
            RreqOutcome::Forward(next) => {
                self.transmit(ni, None, Packet::Rreq(next));
            }
        }
    }

    fn on_rrep(&mut self, ni: usize, from: NodeId, reply: &RouteReply) {
        let me = self.nodes[ni].id;
        if self.nodes[ni].behavior == Behavior::Selfish && reply.route.source() != me {
            return;
        }
        let now = self.now;
        let decision = {
            let node = &mut self.nodes[ni];
            routing::handle_rrep(
                reply,
                from,
                &mut node.table,
                &mut node.cache,
                &self.params,
                self.avoid_cap,
                now,
            )
        };
        self.apply_sightings(ni, decision.sightings);
        let destination = reply.route.destination();
        let drop = |reason| {
            TraceEvent::Drop(DropInfo {
                node: me,
                kind: PacketKind::Rrep,
                packet: None,
                flow: None,
                origin: Some(reply.route.source()),
                cause: DropCause::Policy,
                reason,
            })
        };
        match decision.outcome {
            RrepOutcome::Cached => {
                self.nodes[ni].discovery.remove(&destination);
                self.flush_buffer(ni, destination);
            }
            RrepOutcome::Rejected(reason) | RrepOutcome::Drop(reason) => self.log(drop(reason)),
            RrepOutcome::Relay { next_hop, reply } => match self.is_neighbor(ni, next_hop) {
                Some(j) => {
                    self.transmit(ni, Some(j), Packet::Rrep(reply));
                }
                None => self.log(drop(ReasonCode::LinkBroken)),
            },
        }
    }

    fn send_rerr(&mut self, ni: usize, error: RouteError, path: Vec<NodeId>) {
        let Some(&next) = path.first() else {
            return;
        };
        if let Some(j) = self.is_neighbor(ni, next) {
            self.transmit(ni, Some(j), Packet::Rerr { error, path });
        }
    }

    fn on_rerr(&mut self, ni: usize, error: &RouteError, path: &[NodeId]) {
        let (a, b) = error.broken_link;
        self.nodes[ni].cache.remove_link(a, b);
        if path.len() > 1 && self.nodes[ni].behavior != Behavior::Selfish {
            self.send_rerr(ni, error.clone(), path[1..].to_vec());
        }
    }

    // ---- windows and scripts ----

    fn on_window_close(&mut self, w: Window) {
        let threshold = self.params.drop_threshold;
        for ni in 0..self.nodes.len() {
            if !self.ids_active(ni) {
                continue;
            }
            let me = self.nodes[ni].id;
            let ledgers = [Ledger::Monitor, Ledger::Trace, Ledger::Omission];
            for ledger in ledgers {
                let node = &mut self.nodes[ni];
                let buffer = match ledger {
                    Ledger::Monitor => &mut node.monitor,
                    Ledger::Trace => &mut node.trace_ledger,
                    Ledger::Omission => &mut node.omissions,
                };
                let reports = buffer.close_window(w).unwrap_or_default();
                for r in reports {
                    self.log(TraceEvent::WindowReport {
                        node: me,
                        ledger,
                        neighbor: r.neighbor,
                        window: r.window,
                        forwarded: r.forwarded,
                        missing: r.missing,
                    });
                    match ledger {
                        Ledger::Monitor => {
                            self.apply_first_hand(ni, r.neighbor, Evidence::self_window(&r))
                        }
                        Ledger::Trace if r.missing > threshold => {
                            self.apply_first_hand(ni, r.neighbor, Evidence::TraceDrop)
                        }
                        Ledger::Omission if r.missing > threshold => {
                            self.apply_first_hand(ni, r.neighbor, Evidence::TraceNonForward)
                        }
                        _ => {}
                    }
                }
            }
            let fades = self.nodes[ni].table.fading_tick_all(w, &self.params);
            for (subject, before, after) in fades {
                if before.value != after.value
                    || before.declared_malicious != after.declared_malicious
                {
                    self.log_change(ni, subject, Change::Fade { window: w }, before, after);
                }
            }
            let snapshot: Vec<(NodeId, ReputationEntry)> = self.nodes[ni]
                .table
                .iter()
                .map(|(id, e)| (id, *e))
                .collect();
            for (neighbor, e) in snapshot {
                self.log(TraceEvent::Reputation {
                    node: me,
                    neighbor,
                    window: w,
                    value: e.value,
                    class: e.class(&self.params),
                    declared: e.declared_malicious,
                });
            }
            self.nodes[ni].heard.retain(|_, hw| *hw + 2 > w);
        }
        let next = self.mon.window_end(w + 1);
        self.schedule(next, EventKind::WindowClose(w + 1));
    }

    fn on_script(&mut self, i: usize) {
        match self.scenario.scripts[i].clone() {
            Script::SetReputation {
                observer,
                subject,
                value,
                declared,
                ..
            } => {
                let ni = self.index[&observer];
                let declared = declared.unwrap_or(value <= self.params.r_u);
                let Some(before) = self.nodes[ni].table.get(subject).copied() else {
                    log::warn!("script {i}: {subject} is not a neighbor of {observer}");
                    return;
                };
                let after = ReputationEntry {
                    value,
                    declared_malicious: declared,
                    windows_since_adverse: 0,
                    ..before
                };
                self.nodes[ni].table.replace(subject, after);
                self.log_change(
                    ni,
                    subject,
                    Change::Script { value, declared },
                    before,
                    after,
                );
            }
            Script::ForgeWarning { from, accused, .. } => {
                if !self.ids {
                    return;
                }
                let ni = self.index[&from];
                let window = self.window();
                self.transmit(
                    ni,
                    None,
                    Packet::Warning {
                        accuser: from,
                        accused,
                        window,
                    },
                );
            }
        }
    }
}

fn packet_kind(p: &Packet) -> PacketKind {
    match p {
        Packet::Data(d) => d.kind(),
        Packet::Trace { .. } => PacketKind::Trace,
        Packet::Rreq(_) => PacketKind::Rreq,
        Packet::Rrep(_) => PacketKind::Rrep,
        Packet::Rerr { .. } => PacketKind::Rerr,
        Packet::Warning { .. } => PacketKind::Warning,
    }
}
