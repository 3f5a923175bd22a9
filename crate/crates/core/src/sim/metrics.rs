//! Run reports and their CSV / JSON renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::authn::AccessMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamSeries {
    pub stream_id: String,
    pub md: String,
    pub demand: f64,
    pub samples: Vec<Sample>,
    /// Megabits delivered over the run.
    pub volume: f64,
    /// Seconds the stream was active.
    pub active_time: f64,
}

impl StreamSeries {
    /// First sample time with a nonzero rate strictly after `after`.
    pub fn first_nonzero_after(&self, after: f64) -> Option<f64> {
        self.samples.iter().find(|s| s.t > after && s.mbps > 0.0).map(|s| s.t)
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        self.samples.iter().find(|s| (s.t - t).abs() < 1e-9).map(|s| s.mbps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllerHandover {
    pub from: String,
    pub to: String,
    pub supervisor: String,
    pub lookup_hops: u32,
    pub messages: u32,
    /// Control-plane seconds.
    pub latency: f64,
    pub used_replica: bool,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HandoverRecord {
    pub md: String,
    pub from_ap: Option<String>,
    pub to_ap: String,
    pub disrupted_at: f64,
    pub reconnected_at: f64,
    /// Seconds without connectivity.
    pub delay: f64,
    pub migrated: bool,
    pub controller: Option<ControllerHandover>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PacketInStats {
    pub arrived: u64,
    pub processed: u64,
    pub dropped: u64,
    pub lookup_jobs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuthLogEntry {
    pub t: f64,
    pub md: String,
    pub group: String,
    pub granted: bool,
    pub epoch: Option<u64>,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureRecord {
    pub t: f64,
    pub target: String,
    pub detected_at: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub events: u64,
    pub handovers: usize,
    pub mean_handover_delay: Option<f64>,
    /// Delivered megabits over active stream-seconds.
    pub mean_throughput: Option<f64>,
    pub packet_in_processed: u64,
    /// Processed Packet-In messages per second, all controllers.
    pub packet_in_throughput: f64,
    pub mean_lookup_hops: Option<f64>,
    pub grants: usize,
    pub denies: usize,
    pub record_loss: usize,
    pub trace_entries: usize,
    pub trace_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub mode: AccessMode,
    pub personal_ap: bool,
    pub duration: f64,
    pub sample_period: f64,
    pub series: Vec<StreamSeries>,
    pub handovers: Vec<HandoverRecord>,
    pub packet_in: BTreeMap<String, PacketInStats>,
    pub lookup_hops: BTreeMap<u32, u64>,
    pub auth_log: Vec<AuthLogEntry>,
    pub failures: Vec<FailureRecord>,
    pub record_loss: usize,
    pub summary: Summary,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (expected csv or json)")),
        }
    }
}

impl MetricsReport {
    pub fn series(&self, stream_id: &str) -> Option<&StreamSeries> {
        self.series.iter().find(|s| s.stream_id == stream_id)
    }

    /// Throughput rows `t,stream_id,mbps`, ordered by time then stream.
    pub fn to_csv(&self) -> String {
        let mut out = format!("#schema_version={SCHEMA_VERSION}\nt,stream_id,mbps\n");
        let n = self.series.iter().map(|s| s.samples.len()).max().unwrap_or(0);
        for i in 0..n {
            for s in &self.series {
                if let Some(x) = s.samples.get(i) {
                    let _ = writeln!(out, "{},{},{}", x.t, s.stream_id, x.mbps);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    pub fn write(&self, path: &Path, format: Format) -> io::Result<()> {
        std::fs::write(path, self.render(format))
    }
}

/// Parses the rows of [`MetricsReport::to_csv`] back into `(t, stream, mbps)`.
pub fn parse_csv(text: &str) -> Result<Vec<(f64, String, f64)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == format!("#schema_version={SCHEMA_VERSION}") => {}
        other => return Err(format!("missing schema line, found {other:?}")),
    }
    if lines.next() != Some("t,stream_id,mbps") {
        return Err("missing header".into());
    }
    lines
        .map(|l| {
            let mut f = l.split(',');
            let (Some(t), Some(id), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(format!("malformed row `{l}`"));
            };
            Ok((
                t.parse().map_err(|e| format!("{e}"))?,
                id.to_string(),
                v.parse().map_err(|e| format!("{e}"))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            scenario: "x".into(),
            seed: 1,
            mode: AccessMode::None,
            personal_ap: false,
            duration: 0.2,
            sample_period: 0.1,
            series: vec![StreamSeries {
                stream_id: "F1".into(),
                md: "M1".into(),
                demand: 8.0,
                samples: vec![
                    Sample { t: 0.0, mbps: 0.0 },
                    Sample { t: 0.1, mbps: 7.5 },
                    Sample { t: 0.2, mbps: 8.0 },
                ],
                volume: 1.55,
                active_time: 0.2,
            }],
            handovers: vec![],
            packet_in: BTreeMap::new(),
            lookup_hops: BTreeMap::new(),
            auth_log: vec![],
            failures: vec![],
            record_loss: 0,
            summary: Summary::default(),
        }
    }

    #[test]
    fn csv_matches_json_values() {
        let r = report();
        let rows = parse_csv(&r.to_csv()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let samples = json["series"][0]["samples"].as_array().unwrap();
        assert_eq!(rows.len(), samples.len());
        for (row, s) in rows.iter().zip(samples) {
            assert_eq!(row.0, s["t"].as_f64().unwrap());
            assert_eq!(row.2, s["mbps"].as_f64().unwrap());
        }
        assert_eq!(json["schema_version"], 1);
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut r = report();
        r.series.clear();
        assert_eq!(r.to_csv(), "#schema_version=1\nt,stream_id,mbps\n");
    }
}
