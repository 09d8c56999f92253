//! Result files: metrics.json, reputation.csv, trace.jsonl, digest.txt.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::engine::RunOutput;
use crate::metrics::MetricsReport;
use crate::trace::{TraceEvent, TraceRecord};

pub const CSV_HEADER: [&str; 7] = [
    "scenario_id",
    "seed",
    "window",
    "observer",
    "subject",
    "value",
    "class",
];

/// Per-window reputation series with the fixed column order of [`CSV_HEADER`].
pub fn reputation_csv(records: &[TraceRecord]) -> io::Result<String> {
    let (scenario_id, seed) = match records.first().map(|r| &r.event) {
        Some(TraceEvent::RunStart(h)) => (h.scenario_id.clone(), h.seed),
        _ => (String::new(), 0),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        if let TraceEvent::Reputation {
            node,
            neighbor,
            window,
            value,
            class,
            ..
        } = &r.event
        {
            w.write_record([
                scenario_id.clone(),
                seed.to_string(),
                window.to_string(),
                node.0.to_string(),
                neighbor.0.to_string(),
                value.to_string(),
                class.tag().to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_run(out: &Path, run: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), run.metrics.to_json())?;
    fs::write(out.join("reputation.csv"), reputation_csv(&run.records)?)?;
    if let Some(text) = &run.jsonl {
        fs::write(out.join("trace.jsonl"), text)?;
    }
    fs::write(out.join("digest.txt"), format!("{}\n", run.digest))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
}

impl Stat {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: 0.0,
                stddev: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenario_id: String,
    pub seeds: Vec<u64>,
    pub pdr: Stat,
    pub false_positives: Stat,
    pub false_negatives: Stat,
    pub control_overhead: Stat,
    pub mean_detection_latency: Stat,
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let col =
        |f: &dyn Fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    let latencies: Vec<f64> = reports
        .iter()
        .filter_map(|m| m.mean_detection_latency)
        .collect();
    Aggregate {
        scenario_id: reports
            .first()
            .map(|m| m.scenario_id.clone())
            .unwrap_or_default(),
        seeds: reports.iter().map(|m| m.seed).collect(),
        pdr: col(&|m| m.pdr),
        false_positives: col(&|m| m.false_positives as f64),
        false_negatives: col(&|m| m.false_negatives as f64),
        control_overhead: col(&|m| m.control_overhead),
        mean_detection_latency: Stat::of(&latencies),
    }
}
