//! Evaluation metrics, computed only from a finished event trace.

use std::collections::{BTreeMap, BTreeSet};

use repsim_core::{NodeId, TrustLevel};
use serde::{Deserialize, Serialize};

use crate::trace::{validate_complete, DropCause, PacketKind, TraceError, TraceEvent, TraceRecord};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: u64,
    pub delivered: u64,
    pub dropped_by_adversary: u64,
    pub dropped_by_channel: u64,
    pub dropped_by_policy: u64,
    pub in_flight: u64,
}

impl Counts {
    pub fn pdr(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.delivered as f64 / self.generated as f64
        }
    }

    /// generated = delivered + every drop cause + in flight.
    pub fn is_conserved(&self) -> bool {
        self.generated
            == self.delivered
                + self.dropped_by_adversary
                + self.dropped_by_channel
                + self.dropped_by_policy
                + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow: u32,
    pub source: NodeId,
    pub destination: NodeId,
    #[serde(flatten)]
    pub counts: Counts,
    pub pdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLatency {
    pub observer: NodeId,
    pub subject: NodeId,
    pub first_misbehavior: f64,
    pub classified_at: f64,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Redemption {
    pub observer: NodeId,
    pub subject: NodeId,
    pub declared_at: f64,
    pub redeemed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario_id: String,
    pub seed: u64,
    pub ids_enabled: bool,
    #[serde(flatten)]
    pub totals: Counts,
    pub pdr: f64,
    pub flows: Vec<FlowMetrics>,
    pub detection_latency: Vec<DetectionLatency>,
    pub mean_detection_latency: Option<f64>,
    pub false_positives: usize,
    pub false_positive_nodes: Vec<NodeId>,
    pub false_negatives: usize,
    pub false_negative_nodes: Vec<NodeId>,
    pub data_transmissions: u64,
    pub control_transmissions: u64,
    pub control_overhead: f64,
    pub redemptions: Vec<Redemption>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

fn record_latency(
    latencies: &mut BTreeMap<(NodeId, NodeId), DetectionLatency>,
    observer: NodeId,
    subject: NodeId,
    first: f64,
    at: f64,
) {
    latencies
        .entry((observer, subject))
        .or_insert(DetectionLatency {
            observer,
            subject,
            first_misbehavior: first,
            classified_at: at,
            latency: at - first,
        });
}

/// Pure function of the trace; a truncated trace is an error.
pub fn compute_metrics(records: &[TraceRecord]) -> Result<MetricsReport, TraceError> {
    validate_complete(records)?;
    let TraceEvent::RunStart(header) = &records[0].event else {
        unreachable!("checked by validate_complete");
    };

    let mut flows: BTreeMap<u32, Counts> = header
        .flows
        .iter()
        .map(|f| (f.flow, Counts::default()))
        .collect();
    let mut totals = Counts::default();
    let mut data_tx = 0u64;
    let mut control_tx = 0u64;
    let mut first_misbehavior: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut untrusted: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut ever_untrusted: BTreeSet<NodeId> = BTreeSet::new();
    let mut latencies: BTreeMap<(NodeId, NodeId), DetectionLatency> = BTreeMap::new();
    let mut declared_since: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    let mut redemptions = Vec::new();

    for r in records {
        match &r.event {
            TraceEvent::Generated { flow, .. } => {
                flows.entry(*flow).or_default().generated += 1;
                totals.generated += 1;
            }
            TraceEvent::Delivered { flow, .. } => {
                flows.entry(*flow).or_default().delivered += 1;
                totals.delivered += 1;
            }
            TraceEvent::Drop(d) if d.kind == PacketKind::Data => {
                if let Some(flow) = d.flow {
                    let c = flows.entry(flow).or_default();
                    let (fc, tc) = match d.cause {
                        DropCause::Adversary => (
                            &mut c.dropped_by_adversary,
                            &mut totals.dropped_by_adversary,
                        ),
                        DropCause::Channel => {
                            (&mut c.dropped_by_channel, &mut totals.dropped_by_channel)
                        }
                        DropCause::Policy => {
                            (&mut c.dropped_by_policy, &mut totals.dropped_by_policy)
                        }
                    };
                    *fc += 1;
                    *tc += 1;
                }
            }
            TraceEvent::InFlight { flow, .. } => {
                flows.entry(*flow).or_default().in_flight += 1;
                totals.in_flight += 1;
            }
            TraceEvent::Tx(tx) => {
                if tx.kind == PacketKind::Data {
                    data_tx += 1;
                } else {
                    control_tx += 1;
                }
            }
            TraceEvent::Misbehave { node, .. } => {
                if !first_misbehavior.contains_key(node) {
                    first_misbehavior.insert(*node, r.time);
                    // already distrusted when the misbehavior starts
                    for &(o, s) in untrusted.iter().filter(|(_, s)| s == node) {
                        record_latency(&mut latencies, o, s, r.time, r.time);
                    }
                }
            }
            TraceEvent::Evidence(e) => {
                let pair = (e.node, e.subject);
                if e.class == TrustLevel::Untrustworthy {
                    if untrusted.insert(pair) {
                        ever_untrusted.insert(e.subject);
                        if let Some(&first) = first_misbehavior.get(&e.subject) {
                            record_latency(&mut latencies, e.node, e.subject, first, r.time);
                        }
                    }
                } else {
                    untrusted.remove(&pair);
                }
                match (declared_since.get(&pair).copied(), e.declared) {
                    (None, true) => {
                        declared_since.insert(pair, r.time);
                    }
                    (Some(at), false) => {
                        declared_since.remove(&pair);
                        redemptions.push(Redemption {
                            observer: e.node,
                            subject: e.subject,
                            declared_at: at,
                            redeemed_at: r.time,
                        });
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }

    let misbehaving: BTreeSet<NodeId> = first_misbehavior.keys().copied().collect();
    let false_positive_nodes: Vec<NodeId> =
        ever_untrusted.difference(&misbehaving).copied().collect();
    let detected: BTreeSet<NodeId> = latencies.keys().map(|(_, s)| *s).collect();
    let false_negative_nodes: Vec<NodeId> = misbehaving.difference(&detected).copied().collect();
    let detection_latency: Vec<DetectionLatency> = latencies.into_values().collect();
    let mean_detection_latency = (!detection_latency.is_empty()).then(|| {
        detection_latency.iter().map(|l| l.latency).sum::<f64>() / detection_latency.len() as f64
    });
    let total_tx = data_tx + control_tx;

    Ok(MetricsReport {
        scenario_id: header.scenario_id.clone(),
        seed: header.seed,
        ids_enabled: header.ids_enabled,
        pdr: totals.pdr(),
        totals,
        flows: header
            .flows
            .iter()
            .map(|f| {
                let counts = flows.get(&f.flow).cloned().unwrap_or_default();
                FlowMetrics {
                    flow: f.flow,
                    source: f.source,
                    destination: f.destination,
                    pdr: counts.pdr(),
                    counts,
                }
            })
            .collect(),
        detection_latency,
        mean_detection_latency,
        false_positives: false_positive_nodes.len(),
        false_positive_nodes,
        false_negatives: false_negative_nodes.len(),
        false_negative_nodes,
        data_transmissions: data_tx,
        control_transmissions: control_tx,
        control_overhead: if total_tx == 0 {
            0.0
        } else {
            control_tx as f64 / total_tx as f64
        },
        redemptions,
    })
}
