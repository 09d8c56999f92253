//! DSR-lite source routing with avoid lists and reputation-aware path choice.
//!
//! Route discovery floods a [`RouteRequest`] carrying the originator's
//! malicious list as an avoid list. Nodes named in it drop the request; the
//! rest scan it (an avoid-list sighting for each listed neighbor), merge their
//! own malicious list in, and either reply or extend the route and rebroadcast.
//!
//! The path manager side keeps a [`RouteCache`] that never holds a route
//! through a node its owner has declared malicious, and ranks candidates
//! lexicographically on (malicious hops, suspicious hops, hop count, hops).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::ids::{NodeId, SimTime};
use crate::reputation::{
    IndirectAction, IndirectEvidence, IndirectOutcome, ReputationEntry, ReputationParams,
    ReputationTable, TrustLevel,
};

/// Default bound on avoid-list length; the oldest entries are dropped first.
pub const AVOID_LIST_CAP: usize = 32;

/// Routes kept per destination.
pub const ROUTES_PER_DESTINATION: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoutingError {
    #[error("a source route needs at least two hops")]
    TooShort,
    #[error("node {0} appears twice in a source route")]
    RepeatedHop(NodeId),
    #[error("route discovery towards the originator itself ({0})")]
    SelfDestination(NodeId),
    #[error("no candidate routes to rank")]
    NoCandidates,
}

/// Drop / refuse reason codes written to the event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum ReasonCode {
    OwnIdInAvoid,
    DupRreq,
    MaliciousPrevHop,
    Loop,
    /// Request or reply route passes through a node the receiver declared malicious.
    MaliciousInRoute,
    NoRoute,
    Misroute,
    TtlExpired,
    LinkBroken,
    SendBufferTimeout,
    AdversaryDrop,
    ChannelLoss,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::OwnIdInAvoid => "OWN_ID_IN_AVOID",
            ReasonCode::DupRreq => "DUP_RREQ",
            ReasonCode::MaliciousPrevHop => "MALICIOUS_PREV_HOP",
            ReasonCode::Loop => "LOOP",
            ReasonCode::MaliciousInRoute => "MALICIOUS_IN_ROUTE",
            ReasonCode::NoRoute => "NO_ROUTE",
            ReasonCode::Misroute => "MISROUTE",
            ReasonCode::TtlExpired => "TTL_EXPIRED",
            ReasonCode::LinkBroken => "LINK_BROKEN",
            ReasonCode::SendBufferTimeout => "SEND_BUFFER_TIMEOUT",
            ReasonCode::AdversaryDrop => "ADVERSARY_DROP",
            ReasonCode::ChannelLoss => "CHANNEL_LOSS",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loop-free hop sequence from source to destination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(try_from = "Vec<NodeId>", into = "Vec<NodeId>")
)]
pub struct SourceRoute(Vec<NodeId>);

impl SourceRoute {
    pub fn new(hops: Vec<NodeId>) -> Result<Self, RoutingError> {
        if hops.len() < 2 {
            return Err(RoutingError::TooShort);
        }
        let mut seen = BTreeSet::new();
        for &hop in &hops {
            if !seen.insert(hop) {
                return Err(RoutingError::RepeatedHop(hop));
            }
        }
        Ok(SourceRoute(hops))
    }

    pub fn hops(&self) -> &[NodeId] {
        &self.0
    }

    pub fn source(&self) -> NodeId {
        self.0[0]
    }

    pub fn destination(&self) -> NodeId {
        self.0[self.0.len() - 1]
    }

    /// Number of links.
    pub fn hop_count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.0.iter().position(|&h| h == node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.0.contains(&node)
    }

    pub fn successor(&self, node: NodeId) -> Option<NodeId> {
        self.position(node).and_then(|i| self.0.get(i + 1).copied())
    }

    pub fn predecessor(&self, node: NodeId) -> Option<NodeId> {
        self.position(node)
            .and_then(|i| i.checked_sub(1))
            .map(|i| self.0[i])
    }

    pub fn contains_link(&self, from: NodeId, to: NodeId) -> bool {
        self.0.windows(2).any(|w| w[0] == from && w[1] == to)
    }

    /// Prefix ending at `node`, reversed (node first, source last).
    pub fn reverse_prefix(&self, node: NodeId) -> Option<Vec<NodeId>> {
        let i = self.position(node)?;
        Some(self.0[..=i].iter().rev().copied().collect())
    }
}

impl TryFrom<Vec<NodeId>> for SourceRoute {
    type Error = RoutingError;
    fn try_from(hops: Vec<NodeId>) -> Result<Self, Self::Error> {
        SourceRoute::new(hops)
    }
}

impl From<SourceRoute> for Vec<NodeId> {
    fn from(route: SourceRoute) -> Self {
        route.0
    }
}

/// Duplicate-free, length-capped list of nodes to route around.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct AvoidList(Vec<NodeId>);

impl AvoidList {
    pub fn new() -> Self {
        AvoidList(Vec::new())
    }

    pub fn from_ids(ids: &[NodeId], cap: usize) -> Self {
        let mut list = AvoidList::new();
        list.extend_from(ids, cap);
        list
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.0
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Appends ids not already present, then trims the oldest past `cap`.
    pub fn extend_from(&mut self, ids: &[NodeId], cap: usize) {
        for &id in ids {
            if !self.0.contains(&id) {
                self.0.push(id);
            }
        }
        if self.0.len() > cap {
            let excess = self.0.len() - cap;
            self.0.drain(..excess);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouteRequest {
    pub request_id: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub avoid_list: AvoidList,
    /// Partial route, origin first.
    pub accumulated_route: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouteReply {
    pub request_id: u64,
    pub route: SourceRoute,
    pub replier: NodeId,
    pub avoid_list: AvoidList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouteError {
    pub broken_link: (NodeId, NodeId),
    pub affected: Vec<NodeId>,
}

/// Per-node request id counter.
#[derive(Debug, Clone, Default)]
pub struct RequestIds {
    next: u64,
}

impl RequestIds {
    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// Duplicate suppression memory for flooded requests.
#[derive(Debug, Clone, Default)]
pub struct SeenRequests(BTreeSet<(NodeId, u64)>);

impl SeenRequests {
    /// Returns `true` the first time a pair is seen.
    pub fn insert(&mut self, origin: NodeId, request_id: u64) -> bool {
        self.0.insert((origin, request_id))
    }

    pub fn contains(&self, origin: NodeId, request_id: u64) -> bool {
        self.0.contains(&(origin, request_id))
    }
}

pub fn originate_rreq(
    owner: NodeId,
    destination: NodeId,
    malicious_list: &[NodeId],
    ids: &mut RequestIds,
    avoid_cap: usize,
) -> Result<RouteRequest, RoutingError> {
    if destination == owner {
        return Err(RoutingError::SelfDestination(owner));
    }
    Ok(RouteRequest {
        request_id: ids.next_id(),
        origin: owner,
        destination,
        avoid_list: AvoidList::from_ids(malicious_list, avoid_cap),
        accumulated_route: alloc::vec![owner],
    })
}

/// Reputation change caused by scanning an avoid list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sighting {
    pub subject: NodeId,
    pub before: ReputationEntry,
    pub after: ReputationEntry,
    pub action: IndirectAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RreqOutcome {
    Drop(ReasonCode),
    Reply(RouteReply),
    Forward(RouteRequest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RreqDecision {
    pub outcome: RreqOutcome,
    pub sightings: Vec<Sighting>,
}

impl RreqDecision {
    fn drop(reason: ReasonCode) -> Self {
        RreqDecision {
            outcome: RreqOutcome::Drop(reason),
            sightings: Vec::new(),
        }
    }
}

/// Scans an avoid list, applying an avoid-list sighting to each listed neighbor.
pub fn scan_avoid_list(
    avoid: &AvoidList,
    table: &mut ReputationTable,
    params: &ReputationParams,
) -> Vec<Sighting> {
    let owner = table.owner();
    avoid
        .as_slice()
        .iter()
        .filter(|&&id| id != owner)
        .filter_map(|&subject| {
            match table.apply_indirect(subject, IndirectEvidence::AvoidSighting, params) {
                Ok(IndirectOutcome::Applied {
                    before,
                    after,
                    action,
                }) => Some(Sighting {
                    subject,
                    before,
                    after,
                    action,
                }),
                _ => None,
            }
        })
        .collect()
}

fn is_untrustworthy(table: &ReputationTable, node: NodeId, params: &ReputationParams) -> bool {
    table.class_of(node, params) == Some(TrustLevel::Untrustworthy)
}

/// Route discovery at a non-originating node.
pub fn handle_rreq(
    rreq: &RouteRequest,
    prev_hop: NodeId,
    seen: &mut SeenRequests,
    table: &mut ReputationTable,
    params: &ReputationParams,
    avoid_cap: usize,
) -> RreqDecision {
    let node = table.owner();
    if !seen.insert(rreq.origin, rreq.request_id) {
        return RreqDecision::drop(ReasonCode::DupRreq);
    }
    if rreq.avoid_list.contains(node) {
        return RreqDecision::drop(ReasonCode::OwnIdInAvoid);
    }
    if node == rreq.origin || rreq.accumulated_route.contains(&node) {
        return RreqDecision::drop(ReasonCode::Loop);
    }
    if is_untrustworthy(table, prev_hop, params) {
        return RreqDecision::drop(ReasonCode::MaliciousPrevHop);
    }
    let own_list = table.malicious_list();
    if own_list
        .iter()
        .any(|id| rreq.accumulated_route.contains(id))
    {
        return RreqDecision::drop(ReasonCode::MaliciousInRoute);
    }
    let sightings = scan_avoid_list(&rreq.avoid_list, table, params);

    let mut avoid_list = rreq.avoid_list.clone();
    avoid_list.extend_from(&own_list, avoid_cap);
    let mut hops = rreq.accumulated_route.clone();
    hops.push(node);

    let outcome = if node == rreq.destination {
        match SourceRoute::new(hops) {
            Ok(route) => RreqOutcome::Reply(RouteReply {
                request_id: rreq.request_id,
                route,
                replier: node,
                avoid_list: AvoidList::from_ids(&own_list, avoid_cap),
            }),
            Err(_) => RreqOutcome::Drop(ReasonCode::Loop),
        }
    } else {
        RreqOutcome::Forward(RouteRequest {
            avoid_list,
            accumulated_route: hops,
            ..rreq.clone()
        })
    };
    RreqDecision { outcome, sightings }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RrepOutcome {
    /// Originator stored the route.
    Cached,
    /// Originator refused to cache it (route crosses a declared-malicious node).
    Rejected(ReasonCode),
    Drop(ReasonCode),
    /// Relay towards the originator via `next_hop`.
    Relay {
        next_hop: NodeId,
        reply: RouteReply,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RrepDecision {
    pub outcome: RrepOutcome,
    pub sightings: Vec<Sighting>,
}

/// Route reply processing on the way back to (and at) the originator.
#[allow(clippy::too_many_arguments)]
pub fn handle_rrep(
    rrep: &RouteReply,
    prev_hop: NodeId,
    table: &mut ReputationTable,
    cache: &mut RouteCache,
    params: &ReputationParams,
    avoid_cap: usize,
    now: SimTime,
) -> RrepDecision {
    let node = table.owner();
    if is_untrustworthy(table, prev_hop, params) {
        return RrepDecision {
            outcome: RrepOutcome::Drop(ReasonCode::MaliciousPrevHop),
            sightings: Vec::new(),
        };
    }
    let sightings = scan_avoid_list(&rrep.avoid_list, table, params);
    let Some(pos) = rrep.route.position(node) else {
        return RrepDecision {
            outcome: RrepOutcome::Drop(ReasonCode::Misroute),
            sightings,
        };
    };
    let malicious = table.malicious_list();
    let outcome = if pos == 0 {
        if cache.insert(rrep.route.clone(), now, &malicious) {
            RrepOutcome::Cached
        } else {
            RrepOutcome::Rejected(ReasonCode::MaliciousInRoute)
        }
    } else {
        let mut reply = rrep.clone();
        reply.avoid_list.extend_from(&malicious, avoid_cap);
        RrepOutcome::Relay {
            next_hop: rrep.route.hops()[pos - 1],
            reply,
        }
    };
    RrepDecision { outcome, sightings }
}

/// Lexicographic path priority: fewer malicious hops, then fewer suspicious
/// hops, then fewer links, then the smaller hop sequence.
pub fn path_priority(
    route: &SourceRoute,
    table: &ReputationTable,
    params: &ReputationParams,
) -> (usize, usize, usize, Vec<NodeId>) {
    let owner = table.owner();
    let mut malicious = 0;
    let mut suspicious = 0;
    for &hop in route.hops().iter().filter(|&&h| h != owner) {
        match table.class_of(hop, params).unwrap_or(TrustLevel::Undecided) {
            TrustLevel::Untrustworthy => malicious += 1,
            TrustLevel::Undecided => suspicious += 1,
            TrustLevel::Trustworthy => {}
        }
    }
    (
        malicious,
        suspicious,
        route.hop_count(),
        route.hops().to_vec(),
    )
}

pub fn rank_paths<'a>(
    candidates: &'a [SourceRoute],
    table: &ReputationTable,
    params: &ReputationParams,
) -> Result<&'a SourceRoute, RoutingError> {
    candidates
        .iter()
        .min_by_key(|r| path_priority(r, table, params))
        .ok_or(RoutingError::NoCandidates)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedRoute {
    pub route: SourceRoute,
    pub inserted_at: SimTime,
}

/// Routes per destination plus the last route seen through each neighbor.
#[derive(Debug, Clone, Default)]
pub struct RouteCache {
    routes: BTreeMap<NodeId, Vec<CachedRoute>>,
    last_via: BTreeMap<NodeId, SourceRoute>,
}

impl RouteCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a route unless it crosses a declared-malicious node.
    pub fn insert(&mut self, route: SourceRoute, now: SimTime, malicious: &[NodeId]) -> bool {
        if malicious.iter().any(|&m| route.contains(m)) {
            return false;
        }
        let slot = self.routes.entry(route.destination()).or_default();
        if let Some(existing) = slot.iter_mut().find(|c| c.route == route) {
            existing.inserted_at = now;
            return true;
        }
        slot.push(CachedRoute {
            route,
            inserted_at: now,
        });
        if slot.len() > ROUTES_PER_DESTINATION {
            slot.remove(0);
        }
        true
    }

    pub fn routes_to(&self, destination: NodeId) -> Vec<SourceRoute> {
        self.routes
            .get(&destination)
            .map(|v| v.iter().map(|c| c.route.clone()).collect())
            .unwrap_or_default()
    }

    pub fn has_route(&self, destination: NodeId) -> bool {
        self.routes.get(&destination).is_some_and(|v| !v.is_empty())
    }

    pub fn best(
        &self,
        destination: NodeId,
        table: &ReputationTable,
        params: &ReputationParams,
    ) -> Option<SourceRoute> {
        let candidates = self.routes_to(destination);
        rank_paths(&candidates, table, params).ok().cloned()
    }

    pub fn all_routes(&self) -> impl Iterator<Item = &SourceRoute> + '_ {
        self.routes.values().flatten().map(|c| &c.route)
    }

    /// Drops every route using the directed link `from -> to`.
    /// Returns the destinations that lost at least one route.
    pub fn remove_link(&mut self, from: NodeId, to: NodeId) -> Vec<NodeId> {
        let mut affected = Vec::new();
        for (dest, routes) in self.routes.iter_mut() {
            let before = routes.len();
            routes.retain(|c| !c.route.contains_link(from, to));
            if routes.len() != before {
                affected.push(*dest);
            }
        }
        self.routes.retain(|_, v| !v.is_empty());
        affected
    }

    /// Remembers `[owner, neighbor, next]` whenever a packet goes through
    /// `neighbor` with at least one further hop.
    pub fn record_use(&mut self, owner: NodeId, route: &SourceRoute) {
        let Some(i) = route.position(owner) else {
            return;
        };
        let hops = route.hops();
        if let (Some(&neighbor), Some(&beyond)) = (hops.get(i + 1), hops.get(i + 2)) {
            if let Ok(prefix) = SourceRoute::new(alloc::vec![owner, neighbor, beyond]) {
                self.last_via.insert(neighbor, prefix);
            }
        }
    }

    /// Last known route through `neighbor` extending one hop past it.
    pub fn last_route_via(&self, owner: NodeId, neighbor: NodeId) -> Option<SourceRoute> {
        if let Some(r) = self.last_via.get(&neighbor) {
            return Some(r.clone());
        }
        self.all_routes()
            .filter(|r| r.source() == owner && r.hops().len() >= 3 && r.hops()[1] == neighbor)
            .min()
            .map(|r| {
                SourceRoute::new(r.hops()[..3].to_vec()).expect("prefix of a valid route is valid")
            })
    }
}

/// Removes every route through `node` and reports one [`RouteError`] per
/// distinct broken link `(predecessor, node)`.
pub fn purge_on_malicious(cache: &mut RouteCache, node: NodeId) -> Vec<RouteError> {
    let mut broken: BTreeMap<(NodeId, NodeId), BTreeSet<NodeId>> = BTreeMap::new();
    for (dest, routes) in cache.routes.iter_mut() {
        routes.retain(|c| {
            let Some(pred) = c.route.predecessor(node) else {
                return !c.route.contains(node);
            };
            broken.entry((pred, node)).or_default().insert(*dest);
            false
        });
    }
    cache.routes.retain(|_, v| !v.is_empty());
    broken
        .into_iter()
        .map(|(link, dests)| RouteError {
            broken_link: link,
            affected: dests.into_iter().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataDecision {
    /// Hand to `next_hop`; `register` asks for monitor registration.
    Forward {
        next_hop: NodeId,
        register: bool,
    },
    Deliver,
    Refuse(ReasonCode),
    Misroute,
}

/// Relay decision for a source-routed data packet arriving from `prev_hop`.
pub fn forward_data(
    node: NodeId,
    route: &SourceRoute,
    prev_hop: NodeId,
    table: &ReputationTable,
    params: &ReputationParams,
) -> DataDecision {
    let Some(pos) = route.position(node) else {
        return DataDecision::Misroute;
    };
    if pos == 0 || route.hops()[pos - 1] != prev_hop {
        return DataDecision::Misroute;
    }
    if is_untrustworthy(table, prev_hop, params) {
        return DataDecision::Refuse(ReasonCode::MaliciousPrevHop);
    }
    match route.hops().get(pos + 1) {
        None => DataDecision::Deliver,
        Some(&next_hop) => DataDecision::Forward {
            next_hop,
            register: next_hop != route.destination(),
        },
    }
}
