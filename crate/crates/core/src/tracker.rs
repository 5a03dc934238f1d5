//! Append-only audit log and usage aggregation.
//!
//! Every request handled by the control plane — including rejected and
//! unroutable ones — produces exactly one [`InvocationRecord`], appended as
//! one JSON line and made durable before the response is released. The
//! tracker is evidence-only: policy enforcement lives in validation and
//! routing.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::executor::{StepResult, StepStatus};
use crate::payload::Payload;
use crate::resolver::ScoredCandidate;
use crate::schema::Verdict;

/// Terminal classification of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    RejectedInput,
    NoMatch,
    Aborted,
    RejectedOutput,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::RejectedInput => "rejected_input",
            Outcome::NoMatch => "no_match",
            Outcome::Aborted => "aborted",
            Outcome::RejectedOutput => "rejected_output",
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(Outcome::Ok),
            "rejected_input" => Ok(Outcome::RejectedInput),
            "no_match" => Ok(Outcome::NoMatch),
            "aborted" => Ok(Outcome::Aborted),
            "rejected_output" => Ok(Outcome::RejectedOutput),
            other => Err(format!("unknown outcome {other:?}")),
        }
    }
}

/// What the router decided, preserved for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub selected_tool: String,
    pub candidates: Vec<ScoredCandidate>,
    pub threshold: f64,
    /// Planned tool ids in execution order (including steps never reached).
    pub plan: Vec<String>,
}

/// A step result without the (possibly large) output payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub tool_id: String,
    pub status: StepStatus,
    pub attempts: u32,
    pub latency_ms: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&StepResult> for StepSummary {
    fn from(result: &StepResult) -> Self {
        StepSummary {
            tool_id: result.tool_id.clone(),
            status: result.status,
            attempts: result.attempts,
            latency_ms: result.latency_ms.clone(),
            error: result.error.clone(),
        }
    }
}

/// One audited interaction. `seq` is assigned by the tracker at append time
/// and is gapless and strictly increasing within one log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub seq: u64,
    pub request_id: String,
    /// UTC wall-clock time in milliseconds since the epoch.
    pub timestamp_ms: i64,
    pub agent_id: String,
    pub intent: String,
    /// Registry content version the request was handled against.
    pub registry_version: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, Payload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepSummary>,
    pub outcome: Outcome,
    pub total_latency_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Conjunctive record filter; `seq_range` bounds are inclusive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordFilter {
    pub agent_id: Option<String>,
    pub tool_id: Option<String>,
    pub outcome: Option<Outcome>,
    pub seq_range: Option<(u64, u64)>,
}

impl RecordFilter {
    fn matches(&self, record: &InvocationRecord) -> bool {
        if let Some(agent_id) = &self.agent_id {
            if &record.agent_id != agent_id {
                return false;
            }
        }
        if let Some(tool_id) = &self.tool_id {
            let selected = record
                .decision
                .as_ref()
                .is_some_and(|d| &d.selected_tool == tool_id);
            let stepped = record.steps.iter().any(|s| &s.tool_id == tool_id);
            if !selected && !stepped {
                return false;
            }
        }
        if let Some(outcome) = self.outcome {
            if record.outcome != outcome {
                return false;
            }
        }
        if let Some((lo, hi)) = self.seq_range {
            if record.seq < lo || record.seq > hi {
                return false;
            }
        }
        true
    }
}

/// Aggregated view over matching records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub tools: BTreeMap<String, ToolStats>,
    pub agents: BTreeMap<String, AgentStats>,
}

/// Per-tool execution statistics, computed from step results. A tool
/// "succeeds" only when a step finished with status `ok`; recovered
/// (fallback/defaulted) steps count as invocations but not successes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub invocations: u64,
    pub success_count: u64,
    pub success_rate: f64,
    /// Nearest-rank percentiles over per-step latency (sum of attempt
    /// latencies), in milliseconds. Zero when the tool has no invocations.
    pub p50_latency_ms: u64,
    pub p95_latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub requests: u64,
    /// Histogram keyed by outcome wire name.
    pub outcomes: BTreeMap<String, u64>,
}

/// Nearest-rank percentile: the value at rank ceil(p/100 * n) (1-indexed)
/// of the sorted sample; 0 for an empty sample.
pub fn nearest_rank_percentile(sorted: &[u64], percentile: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len() as u64;
    let rank = (percentile * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

struct TrackerInner {
    file: File,
    records: Vec<InvocationRecord>,
    last_seq: u64,
}

/// File-backed audit log: one JSON document per line, append-only, with an
/// in-memory mirror for queries. Appends are linearized behind one lock.
pub struct Tracker {
    fsync: bool,
    inner: Mutex<TrackerInner>,
}

impl Tracker {
    /// Open (or create) a log file. Existing records are loaded and
    /// validated: sequences must start at 1 and be gapless.
    pub fn open(path: &Path, fsync: bool) -> io::Result<Tracker> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut records = Vec::new();
        if path.exists() {
            let body = std::fs::read_to_string(path)?;
            for (line_number, line) in body.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: InvocationRecord = serde_json::from_str(line).map_err(|e| {
                    io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("audit log line {}: {e}", line_number + 1),
                    )
                })?;
                let expected = records.len() as u64 + 1;
                if record.seq != expected {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!(
                            "audit log line {}: seq {} breaks the gapless sequence (expected {})",
                            line_number + 1,
                            record.seq,
                            expected
                        ),
                    ));
                }
                records.push(record);
            }
        }
        let file = OpenOptions::new().append(true).create(true).open(path)?;
        let last_seq = records.len() as u64;
        Ok(Tracker {
            fsync,
            inner: Mutex::new(TrackerInner {
                file,
                records,
                last_seq,
            }),
        })
    }

    /// Append one record, assigning its `seq` (any caller-supplied value is
    /// overwritten). The line is flushed — and fsynced when configured —
    /// before this returns, so a returned seq implies a durable record.
    pub fn append(&self, mut record: InvocationRecord) -> io::Result<u64> {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.last_seq + 1;
        record.seq = seq;
        let line = serde_json::to_string(&record)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        inner.file.write_all(line.as_bytes())?;
        inner.file.write_all(b"\n")?;
        inner.file.flush()?;
        if self.fsync {
            inner.file.sync_data()?;
        }
        inner.records.push(record);
        inner.last_seq = seq;
        Ok(seq)
    }

    /// Matching records in seq order.
    pub fn query(&self, filter: &RecordFilter) -> Vec<InvocationRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }

    /// The first record (in seq order) for a request id.
    pub fn find_request(&self, request_id: &str) -> Option<InvocationRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .iter()
            .find(|r| r.request_id == request_id)
            .cloned()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().last_seq
    }

    pub fn record_count(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    /// Deterministic aggregation over matching records. When the filter
    /// names a tool, per-tool stats are computed for that tool only.
    pub fn aggregate(&self, filter: &RecordFilter) -> UsageStats {
        let records = self.query(filter);
        let mut latencies: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let mut stats = UsageStats::default();

        for record in &records {
            let agent = stats.agents.entry(record.agent_id.clone()).or_default();
            agent.requests += 1;
            *agent
                .outcomes
                .entry(record.outcome.as_str().to_string())
                .or_default() += 1;

            for step in &record.steps {
                if filter.tool_id.as_ref().is_some_and(|t| t != &step.tool_id) {
                    continue;
                }
                let tool = stats.tools.entry(step.tool_id.clone()).or_default();
                tool.invocations += 1;
                if step.status == StepStatus::Ok {
                    tool.success_count += 1;
                }
                latencies
                    .entry(step.tool_id.clone())
                    .or_default()
                    .push(step.latency_ms.iter().sum());
            }
        }

        for (tool_id, tool) in stats.tools.iter_mut() {
            tool.success_rate = if tool.invocations == 0 {
                0.0
            } else {
                tool.success_count as f64 / tool.invocations as f64
            };
            let mut sorted = latencies.remove(tool_id).unwrap_or_default();
            sorted.sort_unstable();
            tool.p50_latency_ms = nearest_rank_percentile(&sorted, 50);
            tool.p95_latency_ms = nearest_rank_percentile(&sorted, 95);
        }
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn record(request_id: &str, agent: &str, outcome: Outcome) -> InvocationRecord {
        InvocationRecord {
            seq: 0,
            request_id: request_id.to_string(),
            timestamp_ms: 1_700_000_000_000,
            agent_id: agent.to_string(),
            intent: "do the thing".to_string(),
            registry_version: 1,
            context: BTreeMap::new(),
            decision: None,
            input_verdict: None,
            output_verdict: None,
            steps: vec![],
            outcome,
            total_latency_ms: 5,
            error: None,
        }
    }

    fn step(tool: &str, status: StepStatus, latency_ms: Vec<u64>) -> StepSummary {
        StepSummary {
            tool_id: tool.to_string(),
            status,
            attempts: latency_ms.len() as u32,
            latency_ms,
            error: None,
        }
    }

    fn with_steps(mut r: InvocationRecord, tool: &str, steps: Vec<StepSummary>) -> InvocationRecord {
        r.decision = Some(DecisionSummary {
            selected_tool: tool.to_string(),
            candidates: vec![],
            threshold: 0.1,
            plan: steps.iter().map(|s| s.tool_id.clone()).collect(),
        });
        r.steps = steps;
        r
    }

    #[test]
    fn sequences_start_at_one_and_increase() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        assert_eq!(tracker.append(record("r1", "a", Outcome::Ok)).unwrap(), 1);
        assert_eq!(tracker.append(record("r2", "a", Outcome::Ok)).unwrap(), 2);
        assert_eq!(tracker.append(record("r3", "a", Outcome::Ok)).unwrap(), 3);
    }

    #[test]
    fn reopen_continues_from_last_seq() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        {
            let tracker = Tracker::open(&path, true).unwrap();
            tracker.append(record("r1", "a", Outcome::Ok)).unwrap();
            tracker.append(record("r2", "a", Outcome::NoMatch)).unwrap();
        }
        // Oracle: independently re-scan the raw file for the maximum seq.
        let body = std::fs::read_to_string(&path).unwrap();
        let max_seq = body
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["seq"].as_u64().unwrap())
            .max()
            .unwrap();
        assert_eq!(max_seq, 2);

        let tracker = Tracker::open(&path, true).unwrap();
        assert_eq!(tracker.last_seq(), max_seq);
        assert_eq!(tracker.append(record("r3", "a", Outcome::Ok)).unwrap(), 3);
    }

    #[test]
    fn log_is_append_only_byte_prefix_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let tracker = Tracker::open(&path, false).unwrap();
        tracker.append(record("r1", "a", Outcome::Ok)).unwrap();
        let before = std::fs::read(&path).unwrap();
        tracker.append(record("r2", "a", Outcome::Ok)).unwrap();
        let after = std::fs::read(&path).unwrap();
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(after.iter().filter(|b| **b == b'\n').count(), 2);
    }

    #[test]
    fn caller_supplied_seq_is_overwritten() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let mut r = record("r1", "a", Outcome::Ok);
        r.seq = 999;
        assert_eq!(tracker.append(r).unwrap(), 1);
    }

    #[test]
    fn tampered_log_is_rejected_on_open() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        {
            let tracker = Tracker::open(&path, false).unwrap();
            tracker.append(record("r1", "a", Outcome::Ok)).unwrap();
        }
        let mut body = std::fs::read_to_string(&path).unwrap();
        body.push_str(&body.clone()); // duplicate line: seq 1 appears twice
        std::fs::write(&path, body).unwrap();
        let err = match Tracker::open(&path, false) {
            Err(err) => err,
            Ok(_) => panic!("tampered log must be rejected"),
        };
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn query_filters_are_conjunctive() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        tracker.append(record("r1", "alice", Outcome::Ok)).unwrap();
        tracker.append(record("r2", "bob", Outcome::Ok)).unwrap();
        tracker.append(record("r3", "alice", Outcome::NoMatch)).unwrap();
        tracker.append(record("r4", "alice", Outcome::Ok)).unwrap();

        assert!(Tracker::open(&dir.path().join("empty.jsonl"), false)
            .unwrap()
            .query(&RecordFilter::default())
            .is_empty());

        let no_match = tracker.query(&RecordFilter {
            outcome: Some(Outcome::NoMatch),
            ..RecordFilter::default()
        });
        assert_eq!(no_match.len(), 1);
        assert_eq!(no_match[0].request_id, "r3");

        let ranged = tracker.query(&RecordFilter {
            seq_range: Some((2, 3)),
            ..RecordFilter::default()
        });
        assert_eq!(ranged.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![2, 3]);

        let both = tracker.query(&RecordFilter {
            agent_id: Some("alice".to_string()),
            outcome: Some(Outcome::Ok),
            ..RecordFilter::default()
        });
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn find_request_returns_first_in_seq_order() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        tracker.append(record("r1", "a", Outcome::Ok)).unwrap();
        assert_eq!(tracker.find_request("r1").unwrap().seq, 1);
        assert!(tracker.find_request("ghost").is_none());
    }

    #[test]
    fn success_rate_arithmetic() {
        // Oracle: 4 invocations of tool t, 2 with status ok → 2/4 = 0.5.
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let statuses = [
            StepStatus::Ok,
            StepStatus::Failed,
            StepStatus::Ok,
            StepStatus::Defaulted,
        ];
        for (i, status) in statuses.iter().enumerate() {
            let r = with_steps(
                record(&format!("r{i}"), "a", Outcome::Ok),
                "t",
                vec![step("t", *status, vec![10])],
            );
            tracker.append(r).unwrap();
        }
        let stats = tracker.aggregate(&RecordFilter::default());
        let t = &stats.tools["t"];
        assert_eq!(t.invocations, 4);
        assert_eq!(t.success_count, 2);
        assert_eq!(t.success_rate, 0.5);
    }

    #[test]
    fn empty_log_aggregates_to_empty_stats() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let stats = tracker.aggregate(&RecordFilter::default());
        assert!(stats.tools.is_empty());
        assert!(stats.agents.is_empty());
    }

    #[test]
    fn nearest_rank_percentiles() {
        // Hand-enumerated oracle: sorted [10,20,30,40];
        //   p50: rank = ceil(0.50*4) = 2 → 20
        //   p95: rank = ceil(0.95*4) = 4 → 40
        assert_eq!(nearest_rank_percentile(&[10, 20, 30, 40], 50), 20);
        assert_eq!(nearest_rank_percentile(&[10, 20, 30, 40], 95), 40);
        // n=1: both percentiles hit the single sample.
        assert_eq!(nearest_rank_percentile(&[10], 50), 10);
        assert_eq!(nearest_rank_percentile(&[10], 95), 10);
        assert_eq!(nearest_rank_percentile(&[], 50), 0);
    }

    #[test]
    fn single_record_percentiles_via_aggregate() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let r = with_steps(
            record("r1", "a", Outcome::Ok),
            "t",
            vec![step("t", StepStatus::Ok, vec![10])],
        );
        tracker.append(r).unwrap();
        let stats = tracker.aggregate(&RecordFilter::default());
        assert_eq!(stats.tools["t"].p50_latency_ms, 10);
        assert_eq!(stats.tools["t"].p95_latency_ms, 10);
    }

    #[test]
    fn step_latency_is_summed_across_attempts() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let r = with_steps(
            record("r1", "a", Outcome::Ok),
            "t",
            vec![step("t", StepStatus::Ok, vec![10, 20, 5])],
        );
        tracker.append(r).unwrap();
        let stats = tracker.aggregate(&RecordFilter::default());
        assert_eq!(stats.tools["t"].p50_latency_ms, 35);
    }

    #[test]
    fn aggregate_matches_brute_force_recount() {
        // Independent recount: walk raw query results with plain loops and
        // a from-scratch percentile (sort, ceil via floating point).
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let fixtures = [
            ("alice", "t1", StepStatus::Ok, vec![5]),
            ("alice", "t1", StepStatus::Failed, vec![9, 9]),
            ("bob", "t2", StepStatus::Ok, vec![100]),
            ("alice", "t2", StepStatus::TimedOut, vec![50, 50]),
            ("bob", "t1", StepStatus::Ok, vec![7]),
        ];
        for (i, (agent, tool, status, lat)) in fixtures.iter().enumerate() {
            let r = with_steps(
                record(&format!("r{i}"), agent, Outcome::Ok),
                tool,
                vec![step(tool, *status, lat.clone())],
            );
            tracker.append(r).unwrap();
        }

        let filter = RecordFilter::default();
        let got = tracker.aggregate(&filter);

        let mut expected_tools: BTreeMap<String, (u64, u64, Vec<u64>)> = BTreeMap::new();
        let mut expected_agents: BTreeMap<String, u64> = BTreeMap::new();
        for r in tracker.query(&filter) {
            *expected_agents.entry(r.agent_id.clone()).or_default() += 1;
            for s in &r.steps {
                let entry = expected_tools.entry(s.tool_id.clone()).or_default();
                entry.0 += 1;
                if s.status == StepStatus::Ok {
                    entry.1 += 1;
                }
                entry.2.push(s.latency_ms.iter().sum());
            }
        }
        for (tool_id, (count, ok, mut lats)) in expected_tools {
            lats.sort_unstable();
            let p = |pct: f64| {
                let rank = (pct * lats.len() as f64).ceil().max(1.0) as usize;
                lats[rank - 1]
            };
            let t = &got.tools[&tool_id];
            assert_eq!(t.invocations, count);
            assert_eq!(t.success_count, ok);
            assert_eq!(t.success_rate, ok as f64 / count as f64);
            assert_eq!(t.p50_latency_ms, p(0.50));
            assert_eq!(t.p95_latency_ms, p(0.95));
        }
        for (agent_id, requests) in expected_agents {
            assert_eq!(got.agents[&agent_id].requests, requests);
        }
    }

    #[test]
    fn tool_filter_restricts_step_stats() {
        let dir = tempdir().unwrap();
        let tracker = Tracker::open(&dir.path().join("audit.jsonl"), false).unwrap();
        let r = with_steps(
            record("r1", "a", Outcome::Ok),
            "main",
            vec![
                step("dep", StepStatus::Ok, vec![1]),
                step("main", StepStatus::Ok, vec![2]),
            ],
        );
        tracker.append(r).unwrap();

        let filtered = tracker.aggregate(&RecordFilter {
            tool_id: Some("dep".to_string()),
            ..RecordFilter::default()
        });
        assert_eq!(filtered.tools.len(), 1);
        assert!(filtered.tools.contains_key("dep"));

        // The same record matches via its selected tool as well.
        let by_selected = tracker.query(&RecordFilter {
            tool_id: Some("main".to_string()),
            ..RecordFilter::default()
        });
        assert_eq!(by_selected.len(), 1);
    }

    #[test]
    fn outcome_wire_names_round_trip() {
        for outcome in [
            Outcome::Ok,
            Outcome::RejectedInput,
            Outcome::NoMatch,
            Outcome::Aborted,
            Outcome::RejectedOutput,
        ] {
            let parsed: Outcome = outcome.as_str().parse().unwrap();
            assert_eq!(parsed, outcome);
            let json = serde_json::to_string(&outcome).unwrap();
            assert_eq!(json, format!("\"{}\"", outcome.as_str()));
        }
        assert!("bogus".parse::<Outcome>().is_err());
    }
}
