//! Scenario harness: scripted agents and mock tools driving a real control
//! plane over HTTP, with audit-log cross-checks after every run.
//!
//! A [`ScenarioSpec`] is a JSON document naming tools (optionally backed by
//! in-process mock HTTP servers with scripted failures and latency), agents,
//! rules, and a script of invoke/feedback steps with expected outcomes.
//! [`run_scenario`] registers everything, plays the script sequentially, and
//! then verifies three global properties against the server's audit log:
//! one-request-one-record, policy safety (no denied or tag-excluded tool in
//! any logged plan), and aggregate-stats arithmetic against an independent
//! recount.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use toolplane_core::payload::Payload;
use toolplane_core::registry::{AgentDescriptor, ToolDescriptor};
use toolplane_core::rules::ValidationRule;
use toolplane_core::service::ControlPlane;
use toolplane_core::tracker::{
    AgentStats, InvocationRecord, ToolStats, UsageStats,
};
use toolplane_core::Config;

/// Scripted behavior for a mock HTTP tool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBehavior {
    /// Fixed response payload; when absent, the mock echoes the request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond_with: Option<Payload>,
    /// The first `fail_times` calls return HTTP 500.
    #[serde(default)]
    pub fail_times: u32,
    /// Delay before responding, for exercising timeouts.
    #[serde(default)]
    pub sleep_ms: u64,
}

/// A running mock tool endpoint. The server task is aborted on drop.
pub struct MockTool {
    pub url: String,
    state: Arc<MockState>,
    server: tokio::task::JoinHandle<()>,
}

struct MockState {
    behavior: MockBehavior,
    hits: AtomicU32,
    received: Mutex<Vec<Payload>>,
}

impl MockTool {
    /// Total calls received so far.
    pub fn hits(&self) -> u32 {
        self.state.hits.load(Ordering::SeqCst)
    }

    /// Every request body received, in arrival order.
    pub fn received(&self) -> Vec<Payload> {
        self.state.received.lock().unwrap().clone()
    }
}

impl Drop for MockTool {
    fn drop(&mut self) {
        self.server.abort();
    }
}

/// Start an in-process HTTP endpoint obeying `behavior`. Runs on an
/// ephemeral port until the returned handle is dropped.
pub async fn mock_http_tool(behavior: MockBehavior) -> MockTool {
    let state = Arc::new(MockState {
        behavior,
        hits: AtomicU32::new(0),
        received: Mutex::new(Vec::new()),
    });

    async fn handle(
        axum::extract::State(state): axum::extract::State<Arc<MockState>>,
        axum::Json(body): axum::Json<Payload>,
    ) -> axum::response::Response {
        use axum::response::IntoResponse;
        state.received.lock().unwrap().push(body.clone());
        let call = state.hits.fetch_add(1, Ordering::SeqCst);
        if state.behavior.sleep_ms > 0 {
            tokio::time::sleep(std::time::Duration::from_millis(state.behavior.sleep_ms)).await;
        }
        if call < state.behavior.fail_times {
            return (
                axum::http::StatusCode::INTERNAL_SERVER_ERROR,
                "scripted failure",
            )
                .into_response();
        }
        match &state.behavior.respond_with {
            Some(payload) => axum::Json(payload.clone()).into_response(),
            None => axum::Json(body).into_response(),
        }
    }

    let app = axum::Router::new()
        .route("/", axum::routing::post(handle))
        .with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    MockTool { url, state, server }
}

/// A tool to register: a full descriptor, optionally backed by a mock. When
/// `mock` is present the harness starts the mock server and rewrites the
/// descriptor's endpoint to point at it (preserving a declared HTTP
/// timeout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTool {
    #[serde(flatten)]
    pub descriptor: ToolDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockBehavior>,
}

/// One script entry: an invocation with an expected outcome, or a feedback
/// event referencing an earlier invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScenarioStep {
    Invoke {
        agent_id: String,
        intent: String,
        #[serde(default = "empty_object")]
        args: Payload,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        context: BTreeMap<String, Payload>,
        /// "ok" or one of the invoke error codes.
        expect: String,
    },
    Feedback {
        /// 0-based index among the *invoke* steps before this one.
        request_of: usize,
        rating: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_weight: Option<f64>,
    },
}

fn empty_object() -> Payload {
    Payload::Object(serde_json::Map::new())
}

const EXPECT_VOCAB: [&str; 8] = [
    "ok",
    "unknown_agent",
    "invalid_request",
    "input_rejected",
    "no_matching_tool",
    "execution_failed",
    "output_rejected",
    "internal",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub tools: Vec<ScenarioTool>,
    #[serde(default)]
    pub agents: Vec<AgentDescriptor>,
    #[serde(default)]
    pub rules: Vec<ValidationRule>,
    #[serde(default)]
    pub script: Vec<ScenarioStep>,
}

impl ScenarioSpec {
    pub fn load(path: &Path) -> Result<ScenarioSpec, HarnessFailure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessFailure::BadScenario(format!("{}: {e}", path.display())))?;
        let spec: ScenarioSpec = serde_json::from_str(&text)
            .map_err(|e| HarnessFailure::BadScenario(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessFailure> {
        let mut invokes = 0usize;
        for (index, step) in self.script.iter().enumerate() {
            match step {
                ScenarioStep::Invoke { expect, .. } => {
                    if !EXPECT_VOCAB.contains(&expect.as_str()) {
                        return Err(HarnessFailure::BadScenario(format!(
                            "step {index}: unknown expected outcome {expect:?}"
                        )));
                    }
                    invokes += 1;
                }
                ScenarioStep::Feedback { request_of, .. } => {
                    if *request_of >= invokes {
                        return Err(HarnessFailure::BadScenario(format!(
                            "step {index}: feedback references invoke #{request_of} \
                             but only {invokes} invokes precede it"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Transport or setup breakdowns — distinct from a step observing the wrong
/// outcome, which is a failed [`StepReport`], not an error.
#[derive(Debug, Error)]
pub enum HarnessFailure {
    #[error("scenario invalid: {0}")]
    BadScenario(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("audit log unreadable: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub description: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub steps: Vec<StepReport>,
    pub cross_checks: Vec<CrossCheck>,
    pub stats: UsageStats,
    pub duration_ms: u64,
    pub pass: bool,
}

/// Where the harness reaches the system under test: its HTTP base URL and
/// its audit log (cross-checks read the log directly, so the harness must
/// share a filesystem with the server).
pub struct ServerUnderTest {
    pub base_url: String,
    pub audit_log: PathBuf,
}

/// Register the scenario's registry entries, play the script, cross-check
/// the audit log, and report. Mock servers live for the duration of the
/// call.
pub async fn run_scenario(
    spec: &ScenarioSpec,
    server: &ServerUnderTest,
) -> Result<ScenarioReport, HarnessFailure> {
    spec.validate()?;
    let started = Instant::now();
    let client = reqwest::Client::new();
    let base = server.base_url.trim_end_matches('/');

    let baseline_seq = read_audit(&server.audit_log)?
        .last()
        .map(|r| r.seq)
        .unwrap_or(0);

    // Registration. Mock-backed descriptors get their endpoint rewritten to
    // a live mock server first.
    let mut mocks: Vec<MockTool> = Vec::new();
    for tool in &spec.tools {
        let mut descriptor = tool.descriptor.clone();
        if let Some(behavior) = &tool.mock {
            let mock = mock_http_tool(behavior.clone()).await;
            let timeout_ms = match &descriptor.endpoint {
                toolplane_core::executor::EndpointSpec::Http { timeout_ms, .. } => *timeout_ms,
                _ => 5000,
            };
            descriptor.endpoint = toolplane_core::executor::EndpointSpec::Http {
                url: mock.url.clone(),
                method: "POST".to_string(),
                timeout_ms,
            };
            mocks.push(mock);
        }
        post_expect_ok(&client, &format!("{base}/v1/register/tool"), &descriptor).await?;
    }
    for agent in &spec.agents {
        post_expect_ok(&client, &format!("{base}/v1/register/agent"), agent).await?;
    }
    for rule in &spec.rules {
        post_expect_ok(&client, &format!("{base}/v1/register/rule"), rule).await?;
    }

    // Script playback, sequential by contract.
    let mut steps: Vec<StepReport> = Vec::new();
    let mut invoke_request_ids: Vec<String> = Vec::new();
    for (index, step) in spec.script.iter().enumerate() {
        match step {
            ScenarioStep::Invoke {
                agent_id,
                intent,
                args,
                context,
                expect,
            } => {
                let mut envelope = serde_json::Map::new();
                envelope.insert("agent_id".to_string(), Payload::String(agent_id.clone()));
                envelope.insert("intent".to_string(), Payload::String(intent.clone()));
                envelope.insert("args".to_string(), args.clone());
                if !context.is_empty() {
                    envelope.insert(
                        "context".to_string(),
                        Payload::Object(context.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
                    );
                }
                let body = post_json(&client, &format!("{base}/v1/invoke"), &Payload::Object(envelope))
                    .await?;
                let observed = match body.get("status").and_then(Payload::as_str) {
                    Some("ok") => "ok".to_string(),
                    _ => body
                        .get("error")
                        .and_then(|e| e.get("code"))
                        .and_then(Payload::as_str)
                        .unwrap_or("malformed_response")
                        .to_string(),
                };
                let request_id = body
                    .get("request_id")
                    .and_then(Payload::as_str)
                    .map(str::to_string);
                if let Some(id) = &request_id {
                    invoke_request_ids.push(id.clone());
                }
                steps.push(StepReport {
                    index,
                    description: format!("invoke {agent_id} {intent:?}"),
                    expected: expect.clone(),
                    observed: observed.clone(),
                    pass: observed == *expect,
                    request_id,
                });
            }
            ScenarioStep::Feedback {
                request_of,
                rating,
                expect_weight,
            } => {
                let request_id = invoke_request_ids
                    .get(*request_of)
                    .cloned()
                    .ok_or_else(|| {
                        HarnessFailure::BadScenario(format!(
                            "step {index}: invoke #{request_of} produced no request id"
                        ))
                    })?;
                let event = serde_json::json!({"request_id": request_id, "rating": rating});
                let url = format!("{base}/v1/feedback");
                let response = client
                    .post(&url)
                    .json(&event)
                    .send()
                    .await
                    .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))?;
                let ok = response.status().is_success();
                let body: Payload = response
                    .json()
                    .await
                    .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))?;
                let weight = body.get("weight").and_then(Payload::as_f64);
                let weight_ok = match (expect_weight, weight) {
                    (Some(expected), Some(actual)) => (expected - actual).abs() < 1e-9,
                    (Some(_), None) => false,
                    (None, _) => true,
                };
                steps.push(StepReport {
                    index,
                    description: format!("feedback on invoke #{request_of}, rating {rating}"),
                    expected: match expect_weight {
                        Some(w) => format!("applied, weight {w}"),
                        None => "applied".to_string(),
                    },
                    observed: match weight {
                        Some(w) => format!("applied={ok}, weight {w}"),
                        None => format!("applied={ok}"),
                    },
                    pass: ok && weight_ok,
                    request_id: Some(request_id),
                });
            }
        }
    }

    // Cross-checks against the audit log.
    let records = read_audit(&server.audit_log)?;
    let run_records: Vec<&InvocationRecord> =
        records.iter().filter(|r| r.seq > baseline_seq).collect();
    let mut cross_checks = Vec::new();

    let invoke_count = spec
        .script
        .iter()
        .filter(|s| matches!(s, ScenarioStep::Invoke { .. }))
        .count();
    let gapless = run_records
        .iter()
        .enumerate()
        .all(|(i, r)| r.seq == baseline_seq + 1 + i as u64);
    cross_checks.push(CrossCheck {
        name: "one-request-one-record".to_string(),
        pass: run_records.len() == invoke_count && gapless,
        detail: format!(
            "{} invokes sent, {} records appended (seq gapless: {gapless})",
            invoke_count,
            run_records.len()
        ),
    });

    let violations = policy_violations(spec, &run_records);
    cross_checks.push(CrossCheck {
        name: "policy-safety".to_string(),
        pass: violations.is_empty(),
        detail: if violations.is_empty() {
            "no denied or tag-excluded tool appears in any logged plan".to_string()
        } else {
            format!("violations: {violations:?}")
        },
    });

    let stats = fetch_usage(&client, base).await?;
    let recount = recount_stats(&records);
    let stats_match = serde_json::to_value(&stats).unwrap() == serde_json::to_value(&recount).unwrap();
    cross_checks.push(CrossCheck {
        name: "stats-recount".to_string(),
        pass: stats_match,
        detail: if stats_match {
            format!(
                "aggregates over {} records match the brute-force recount",
                records.len()
            )
        } else {
            "server aggregates diverge from the brute-force recount".to_string()
        },
    });

    drop(mocks);
    let pass = steps.iter().all(|s| s.pass) && cross_checks.iter().all(|c| c.pass);
    Ok(ScenarioReport {
        scenario: spec.name.clone(),
        steps,
        cross_checks,
        stats,
        duration_ms: started.elapsed().as_millis() as u64,
        pass,
    })
}

/// Spin up a private control plane (default config unless given), run the
/// scenario against it, and tear it down.
pub async fn run_embedded(
    spec: &ScenarioSpec,
    config: Option<Config>,
    data_dir: Option<&Path>,
) -> Result<ScenarioReport, HarnessFailure> {
    let scratch;
    let data_dir = match data_dir {
        Some(dir) => dir.to_path_buf(),
        None => {
            scratch = std::env::temp_dir().join(format!("toolplane-harness-{}", std::process::id()));
            let unique = scratch.join(format!(
                "{}-{}",
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .unwrap()
                    .as_nanos(),
                rand_suffix()
            ));
            std::fs::create_dir_all(&unique)
                .map_err(|e| HarnessFailure::Audit(e.to_string()))?;
            unique
        }
    };
    let plane = ControlPlane::open(config.unwrap_or_default(), &data_dir)
        .map_err(|e| HarnessFailure::Transport(e.to_string()))?;
    let (addr, server) = toolplane::bind(Arc::new(plane), "127.0.0.1:0".parse().unwrap())
        .await
        .map_err(|e| HarnessFailure::Transport(e.to_string()))?;
    let server = tokio::spawn(server);
    let result = run_scenario(
        spec,
        &ServerUnderTest {
            base_url: format!("http://{addr}"),
            audit_log: data_dir.join("audit.jsonl"),
        },
    )
    .await;
    server.abort();
    result
}

fn rand_suffix() -> u64 {
    // Uniqueness for scratch dirs within a process, not randomness.
    static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Parse the JSONL audit log. Missing file means zero records.
pub fn read_audit(path: &Path) -> Result<Vec<InvocationRecord>, HarnessFailure> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HarnessFailure::Audit(format!("{}: {e}", path.display()))),
    };
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| HarnessFailure::Audit(format!("bad record: {e}")))
        })
        .collect()
}

/// Tools an agent may use under the scenario's descriptors: not denied, and
/// tag-permitted (an empty allowed_tags list allows everything).
fn permitted(agent: &AgentDescriptor, tool: &ToolDescriptor) -> bool {
    if agent.denied_tools.contains(&tool.tool_id) {
        return false;
    }
    agent.allowed_tags.is_empty()
        || tool.tags.iter().any(|tag| agent.allowed_tags.contains(tag))
}

/// Every (record seq, tool) pair where a logged plan or step names a tool
/// the requesting agent was not permitted to use.
fn policy_violations(spec: &ScenarioSpec, records: &[&InvocationRecord]) -> Vec<(u64, String)> {
    let tools: BTreeMap<&str, &ToolDescriptor> = spec
        .tools
        .iter()
        .map(|t| (t.descriptor.tool_id.as_str(), &t.descriptor))
        .collect();
    let agents: BTreeMap<&str, &AgentDescriptor> = spec
        .agents
        .iter()
        .map(|a| (a.agent_id.as_str(), a))
        .collect();

    let mut violations = Vec::new();
    for record in records {
        let Some(agent) = agents.get(record.agent_id.as_str()) else {
            continue; // not a scenario agent; nothing to assert
        };
        let mut mentioned: Vec<&str> = Vec::new();
        if let Some(decision) = &record.decision {
            mentioned.push(&decision.selected_tool);
            mentioned.extend(decision.plan.iter().map(String::as_str));
        }
        mentioned.extend(record.steps.iter().map(|s| s.tool_id.as_str()));
        for tool_id in mentioned {
            if let Some(tool) = tools.get(tool_id) {
                if !permitted(agent, tool) {
                    violations.push((record.seq, tool_id.to_string()));
                }
            }
        }
    }
    violations
}

/// Independent reimplementation of the tracker's aggregation, used to
/// cross-check the server's numbers. Deliberately written from the
/// documented definitions (per-step latency is the sum over attempts;
/// success means step status "ok"; percentiles are nearest-rank).
pub fn recount_stats(records: &[InvocationRecord]) -> UsageStats {
    let mut tool_latencies: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut tool_success: BTreeMap<String, u64> = BTreeMap::new();
    let mut agents: BTreeMap<String, AgentStats> = BTreeMap::new();

    for record in records {
        let agent = agents.entry(record.agent_id.clone()).or_default();
        agent.requests += 1;
        *agent
            .outcomes
            .entry(record.outcome.as_str().to_string())
            .or_insert(0) += 1;
        for step in &record.steps {
            let total: u64 = step.latency_ms.iter().sum();
            tool_latencies.entry(step.tool_id.clone()).or_default().push(total);
            if step.status == toolplane_core::executor::StepStatus::Ok {
                *tool_success.entry(step.tool_id.clone()).or_insert(0) += 1;
            }
        }
    }

    let tools = tool_latencies
        .into_iter()
        .map(|(tool_id, mut latencies)| {
            latencies.sort_unstable();
            let n = latencies.len();
            let success_count = tool_success.get(&tool_id).copied().unwrap_or(0);
            let percentile = |p: f64| -> u64 {
                if n == 0 {
                    return 0;
                }
                let rank = ((p / 100.0 * n as f64).ceil() as usize).max(1);
                latencies[rank - 1]
            };
            let stats = ToolStats {
                invocations: n as u64,
                success_count,
                success_rate: success_count as f64 / n as f64,
                p50_latency_ms: percentile(50.0),
                p95_latency_ms: percentile(95.0),
            };
            (tool_id, stats)
        })
        .collect();

    UsageStats { tools, agents }
}

async fn fetch_usage(client: &reqwest::Client, base: &str) -> Result<UsageStats, HarnessFailure> {
    let url = format!("{base}/v1/usage");
    let response = client
        .get(&url)
        .send()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("GET {url}: {e}")))?;
    response
        .json()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("GET {url}: {e}")))
}

async fn post_expect_ok<T: Serialize>(
    client: &reqwest::Client,
    url: &str,
    body: &T,
) -> Result<Payload, HarnessFailure> {
    let response = client
        .post(url)
        .json(body)
        .send()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))?;
    let status = response.status();
    let body: Payload = response
        .json()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))?;
    if !status.is_success() {
        return Err(HarnessFailure::BadScenario(format!(
            "registration rejected ({status}): {body}"
        )));
    }
    Ok(body)
}

async fn post_json(
    client: &reqwest::Client,
    url: &str,
    body: &Payload,
) -> Result<Payload, HarnessFailure> {
    let response = client
        .post(url)
        .json(body)
        .send()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))?;
    response
        .json()
        .await
        .map_err(|e| HarnessFailure::Transport(format!("POST {url}: {e}")))
}
