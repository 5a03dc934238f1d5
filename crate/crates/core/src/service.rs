//! The control plane service: one tool-shaped front door over registration,
//! validation, routing, execution, audit, and feedback.
//!
//! Agents bind to the single manifest exposed here and submit intents; the
//! service runs the full pipeline — envelope validation, agent lookup,
//! global policy gate, intent resolution and planning, per-tool input
//! validation, plan execution, output validation — and appends exactly one
//! audit record per request before releasing the response. Domain failures
//! are typed response codes, never transport errors.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::executor::Executor;
use crate::feedback::{record_feedback, FeedbackError, FeedbackEvent, PreferenceTable};
use crate::payload::Payload;
use crate::registry::{
    Registry, RegistryError, RegistrySnapshot, SnapshotError, ToolDescriptor,
};
use crate::resolver::{IntentQuery, IntentScorer, LexicalScorer};
use crate::router::{plan, PlanError};
use crate::rules::{check_global_input, check_input, check_output, ValidationRule};
use crate::schema::{SchemaNode, Verdict};
use crate::tracker::{
    DecisionSummary, InvocationRecord, Outcome, RecordFilter, StepSummary, Tracker, UsageStats,
};

/// File names inside the data directory.
const AUDIT_FILE: &str = "audit.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const PREFERENCES_FILE: &str = "preferences.json";

/// The envelope an agent submits. `request_id` is optional (the server
/// generates one); `args` defaults to an empty object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub agent_id: String,
    pub intent: String,
    #[serde(default = "empty_object")]
    pub args: Payload,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, Payload>,
}

fn empty_object() -> Payload {
    Payload::Object(serde_json::Map::new())
}

impl InvocationRequest {
    pub fn new(agent_id: &str, intent: &str, args: Payload) -> Self {
        InvocationRequest {
            request_id: None,
            agent_id: agent_id.to_string(),
            intent: intent.to_string(),
            args,
            context: BTreeMap::new(),
        }
    }

    pub fn into_payload(self) -> Payload {
        serde_json::to_value(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

/// Typed domain-failure codes carried in invoke responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownAgent,
    InvalidRequest,
    InputRejected,
    NoMatchingTool,
    ExecutionFailed,
    OutputRejected,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::UnknownAgent => "unknown_agent",
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::InputRejected => "input_rejected",
            ErrorCode::NoMatchingTool => "no_matching_tool",
            ErrorCode::ExecutionFailed => "execution_failed",
            ErrorCode::OutputRejected => "output_rejected",
            ErrorCode::Internal => "internal",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

/// What the agent gets back. Exactly one of `output`/`error` is present;
/// `audit_seq` names the logged record (absent only if logging itself
/// failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationResponse {
    pub request_id: String,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Payload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_tool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_seq: Option<u64>,
}

impl InvocationResponse {
    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        self.error.as_ref().map(|e| e.code)
    }
}

/// The single tool agents bind to. Constant for the life of the deployment:
/// registering, mutating, or removing tools never changes these bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub name: String,
    pub description: String,
    pub input_schema: SchemaNode,
}

fn manifest_schema() -> SchemaNode {
    SchemaNode::object(
        [
            ("request_id", SchemaNode::string()),
            ("agent_id", SchemaNode::string()),
            ("intent", SchemaNode::string()),
            ("args", SchemaNode::object([], [])),
            ("context", SchemaNode::object([], [])),
        ],
        ["agent_id", "intent"],
    )
}

/// The constant manifest.
pub fn manifest() -> &'static ToolManifest {
    static MANIFEST: OnceLock<ToolManifest> = OnceLock::new();
    MANIFEST.get_or_init(|| ToolManifest {
        name: "control_plane".to_string(),
        description: "Single entry point to registered tools: submit an intent and the \
                      control plane selects, validates, chains, and executes the right \
                      tool on your behalf."
            .to_string(),
        input_schema: manifest_schema(),
    })
}

/// The manifest serialized exactly once — byte-identical across calls.
pub fn manifest_json() -> &'static str {
    static JSON: OnceLock<String> = OnceLock::new();
    JSON.get_or_init(|| serde_json::to_string(manifest()).expect("manifest serializes"))
}

/// Typed error body for non-invoke endpoints (registration, feedback).
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct GatewayError {
    pub code: String,
    pub message: String,
}

impl GatewayError {
    fn invalid(message: impl Into<String>) -> Self {
        GatewayError {
            code: "invalid_request".to_string(),
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        GatewayError {
            code: "internal".to_string(),
            message: message.into(),
        }
    }
}

impl From<RegistryError> for GatewayError {
    fn from(err: RegistryError) -> Self {
        GatewayError {
            code: err.code().to_string(),
            message: err.to_string(),
        }
    }
}

impl From<FeedbackError> for GatewayError {
    fn from(err: FeedbackError) -> Self {
        GatewayError {
            code: err.code().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRegistered {
    pub tool_id: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistered {
    pub agent_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRegistered {
    pub rule_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReply {
    pub request_id: String,
    pub selected_tool: String,
    /// The selected tool's preference weight after this event.
    pub weight: f64,
    /// False when feedback integration is disabled by configuration.
    pub applied: bool,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("data directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
}

/// Everything the control plane owns, shareable across concurrent request
/// handlers behind an `Arc`.
pub struct ControlPlane {
    config: Config,
    data_dir: PathBuf,
    registry: Registry,
    tracker: Tracker,
    prefs: Mutex<PreferenceTable>,
    executor: Executor,
    scorer: Box<dyn IntentScorer>,
    seen_request_ids: Mutex<HashSet<String>>,
}

/// Accumulates audit-record fields as the pipeline advances.
#[derive(Default)]
struct PipelineState {
    request_id: String,
    agent_id: String,
    intent: String,
    context: BTreeMap<String, Payload>,
    registry_version: u64,
    decision: Option<DecisionSummary>,
    input_verdict: Option<Verdict>,
    output_verdict: Option<Verdict>,
    steps: Vec<StepSummary>,
}

/// A pipeline exit: either a final output or a typed error, plus the
/// outcome classification for the audit record.
struct Exit {
    outcome: Outcome,
    result: Result<Payload, (ErrorCode, String)>,
}

impl Exit {
    fn error(outcome: Outcome, code: ErrorCode, message: impl Into<String>) -> Exit {
        Exit {
            outcome,
            result: Err((code, message.into())),
        }
    }
}

impl ControlPlane {
    /// Open (or create) a control plane rooted at `data_dir`, restoring any
    /// existing snapshot, preference table, and audit log found there.
    pub fn open(config: Config, data_dir: &Path) -> Result<ControlPlane, ServiceError> {
        config.validate()?;
        std::fs::create_dir_all(data_dir)?;

        let snapshot_path = data_dir.join(SNAPSHOT_FILE);
        let registry = if snapshot_path.exists() {
            Registry::from_snapshot(Registry::load_snapshot(&snapshot_path)?)?
        } else {
            Registry::new()
        };

        let prefs_path = data_dir.join(PREFERENCES_FILE);
        let mut prefs = if prefs_path.exists() {
            PreferenceTable::load_from(&prefs_path)?
        } else {
            PreferenceTable::new(config.feedback.alpha)
        };
        // The config file owns the learning rate; a stored table carries
        // whatever alpha was current when it was saved.
        prefs.alpha = config.feedback.alpha;

        let tracker = Tracker::open(&data_dir.join(AUDIT_FILE), config.tracker.fsync)?;

        Ok(ControlPlane {
            scorer: Box::new(LexicalScorer::new(config.resolver)),
            config,
            data_dir: data_dir.to_path_buf(),
            registry,
            tracker,
            prefs: Mutex::new(prefs),
            executor: Executor::new(),
            seen_request_ids: Mutex::new(HashSet::new()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Direct registry access for operational tasks that have no wire
    /// endpoint (updates, deregistration). Mutations made here are not
    /// auto-persisted; call [`ControlPlane::persist_registry`] after.
    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    /// The current preference weight for an (agent, tool) pair.
    pub fn preference(&self, agent_id: &str, tool_id: &str) -> f64 {
        self.prefs.lock().unwrap().get_preference(agent_id, tool_id)
    }

    /// Run the full invoke pipeline. Never fails at the transport level:
    /// every outcome — including audit-log failure — is a typed response,
    /// and every request is logged exactly once before the response leaves.
    pub async fn handle_invoke(&self, raw: Payload) -> InvocationResponse {
        let started = Instant::now();
        let mut state = PipelineState::default();
        let exit = self.run_pipeline(&raw, &mut state).await;
        self.finalize(state, exit, started)
    }

    async fn run_pipeline(&self, raw: &Payload, state: &mut PipelineState) -> Exit {
        // One consistent registry snapshot per request; its version is what
        // the audit record cites.
        let view = self.registry.view();
        state.registry_version = view.version;

        // (1) Decode and envelope-validate against the manifest schema.
        state.agent_id = string_field(raw, "agent_id");
        state.intent = string_field(raw, "intent");
        state.request_id = match raw.get("request_id") {
            Some(Payload::String(id)) => id.clone(),
            _ => uuid::Uuid::new_v4().to_string(),
        };
        if let Some(context) = raw.get("context").and_then(Payload::as_object) {
            state.context = context
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
        }

        if !raw.is_object() {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InvalidRequest,
                "request must be a JSON object",
            );
        }
        let envelope = crate::schema::validate_schema(raw, &manifest().input_schema);
        if !envelope.ok {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InvalidRequest,
                format!("envelope: {}", envelope.reject_summary()),
            );
        }
        if state.agent_id.trim().is_empty() {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InvalidRequest,
                "agent_id must be nonempty",
            );
        }
        if state.intent.trim().is_empty() {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InvalidRequest,
                "intent must be nonempty",
            );
        }
        if state.request_id.trim().is_empty() {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InvalidRequest,
                "request_id, when supplied, must be nonempty",
            );
        }
        {
            let mut seen = self.seen_request_ids.lock().unwrap();
            if !seen.insert(state.request_id.clone()) {
                return Exit::error(
                    Outcome::RejectedInput,
                    ErrorCode::InvalidRequest,
                    format!("duplicate request_id {:?}", state.request_id),
                );
            }
        }
        let args = raw.get("args").cloned().unwrap_or_else(empty_object);

        // (2) Agent lookup.
        if view.agent(&state.agent_id).is_none() {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::UnknownAgent,
                format!("agent {:?} is not registered", state.agent_id),
            );
        }

        // (3) Global input rules — before planning, so rejected payloads
        // never reach intent scoring.
        let global_verdict = check_global_input(&args, view.rules());
        state.input_verdict = Some(global_verdict.clone());
        if !global_verdict.ok {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InputRejected,
                format!("input rejected: {}", global_verdict.reject_summary()),
            );
        }

        // (4) Resolve intent and plan.
        let query = IntentQuery {
            agent_id: state.agent_id.clone(),
            intent: state.intent.clone(),
            context: state.context.clone(),
        };
        let prefs = if self.config.feedback.enabled {
            self.prefs.lock().unwrap().clone()
        } else {
            PreferenceTable::new(self.config.feedback.alpha)
        };
        let decision = match plan(
            &state.request_id,
            &query,
            &view,
            &prefs,
            self.scorer.as_ref(),
            self.config.router.no_match_threshold,
        ) {
            Ok(decision) => decision,
            Err(err @ PlanError::UnknownAgent(_)) => {
                return Exit::error(Outcome::RejectedInput, ErrorCode::UnknownAgent, err.to_string());
            }
            Err(err @ PlanError::NoMatchingTool { .. }) => {
                return Exit::error(Outcome::NoMatch, ErrorCode::NoMatchingTool, err.to_string());
            }
            Err(err @ PlanError::DependencyCycle(_)) => {
                return Exit::error(Outcome::Aborted, ErrorCode::Internal, err.to_string());
            }
        };
        state.decision = Some(DecisionSummary {
            selected_tool: decision.selected_tool.clone(),
            candidates: decision.candidates.clone(),
            threshold: decision.threshold_used,
            plan: decision.plan.iter().map(|s| s.tool_id.clone()).collect(),
        });
        let tool = view
            .tool(&decision.selected_tool)
            .expect("planned tool exists in the view it was planned from")
            .clone();

        // (5) Selected-tool input validation: schema plus every matching
        // input rule (subsumes the global gate already passed).
        let input_verdict = check_input(&args, &tool, view.rules());
        state.input_verdict = Some(input_verdict.clone());
        if !input_verdict.ok {
            return Exit::error(
                Outcome::RejectedInput,
                ErrorCode::InputRejected,
                format!("input rejected: {}", input_verdict.reject_summary()),
            );
        }

        // (6) Execute the plan.
        let plan_output = match self.executor.execute_plan(&decision, &args, &view).await {
            Ok(output) => output,
            Err(aborted) => {
                state.steps = aborted.steps.iter().map(StepSummary::from).collect();
                let last = aborted.steps.last();
                let message = last
                    .and_then(|s| s.error.clone())
                    .unwrap_or_else(|| aborted.to_string());
                let rejected = last
                    .is_some_and(|s| s.status == crate::executor::StepStatus::OutputRejected);
                return if rejected {
                    Exit::error(Outcome::RejectedOutput, ErrorCode::OutputRejected, message)
                } else {
                    Exit::error(Outcome::Aborted, ErrorCode::ExecutionFailed, message)
                };
            }
        };
        state.steps = plan_output.steps.iter().map(StepSummary::from).collect();

        // (7) Final output validation against the selected tool. Step-level
        // validation already covered tool outputs; this is the last line of
        // defense for payloads that bypassed it (default responses).
        let output_verdict = check_output(&plan_output.output, &tool, view.rules());
        state.output_verdict = Some(output_verdict.clone());
        if !output_verdict.ok {
            return Exit::error(
                Outcome::RejectedOutput,
                ErrorCode::OutputRejected,
                format!("output rejected: {}", output_verdict.reject_summary()),
            );
        }

        Exit {
            outcome: Outcome::Ok,
            result: Ok(plan_output.output),
        }
    }

    /// Append the audit record and shape the response. The record is
    /// durable before the response exists; if appending fails, the caller
    /// gets `internal` and no tool output.
    fn finalize(&self, state: PipelineState, exit: Exit, started: Instant) -> InvocationResponse {
        let selected_tool = state.decision.as_ref().map(|d| d.selected_tool.clone());
        let record = InvocationRecord {
            seq: 0,
            request_id: state.request_id.clone(),
            timestamp_ms: chrono::Utc::now().timestamp_millis(),
            agent_id: state.agent_id,
            intent: state.intent,
            registry_version: state.registry_version,
            context: state.context,
            decision: state.decision,
            input_verdict: state.input_verdict,
            output_verdict: state.output_verdict,
            steps: state.steps,
            outcome: exit.outcome,
            total_latency_ms: started.elapsed().as_millis() as u64,
            error: exit.result.as_ref().err().map(|(_, m)| m.clone()),
        };

        let audit_seq = match self.tracker.append(record) {
            Ok(seq) => seq,
            Err(io_err) => {
                return InvocationResponse {
                    request_id: state.request_id,
                    status: ResponseStatus::Error,
                    output: None,
                    error: Some(ErrorBody {
                        code: ErrorCode::Internal,
                        message: format!("audit log unavailable: {io_err}"),
                    }),
                    selected_tool,
                    audit_seq: None,
                };
            }
        };

        match exit.result {
            Ok(output) => InvocationResponse {
                request_id: state.request_id,
                status: ResponseStatus::Ok,
                output: Some(output),
                error: None,
                selected_tool,
                audit_seq: Some(audit_seq),
            },
            Err((code, message)) => InvocationResponse {
                request_id: state.request_id,
                status: ResponseStatus::Error,
                output: None,
                error: Some(ErrorBody { code, message }),
                selected_tool,
                audit_seq: Some(audit_seq),
            },
        }
    }

    pub fn handle_register_tool(&self, raw: Payload) -> Result<ToolRegistered, GatewayError> {
        let descriptor: ToolDescriptor = serde_json::from_value(raw)
            .map_err(|e| GatewayError::invalid(format!("tool descriptor: {e}")))?;
        let tool_id = self.registry.register_tool(descriptor)?;
        let version = self
            .registry
            .get_tool(&tool_id)
            .map(|t| t.version)
            .unwrap_or(1);
        self.persist_registry()?;
        Ok(ToolRegistered { tool_id, version })
    }

    pub fn handle_register_agent(&self, raw: Payload) -> Result<AgentRegistered, GatewayError> {
        let descriptor: crate::registry::AgentDescriptor = serde_json::from_value(raw)
            .map_err(|e| GatewayError::invalid(format!("agent descriptor: {e}")))?;
        let agent_id = self.registry.register_agent(descriptor)?;
        self.persist_registry()?;
        Ok(AgentRegistered { agent_id })
    }

    pub fn handle_register_rule(&self, raw: Payload) -> Result<RuleRegistered, GatewayError> {
        let rule: ValidationRule = serde_json::from_value(raw)
            .map_err(|e| GatewayError::invalid(format!("validation rule: {e}")))?;
        let rule_id = self.registry.register_rule(rule)?;
        self.persist_registry()?;
        Ok(RuleRegistered { rule_id })
    }

    /// Apply a feedback event. With feedback disabled, the event is
    /// validated and acknowledged but no weight changes.
    pub fn handle_feedback(&self, raw: Payload) -> Result<FeedbackReply, GatewayError> {
        let mut event: FeedbackEvent = serde_json::from_value(raw)
            .map_err(|e| GatewayError::invalid(format!("feedback event: {e}")))?;
        event.timestamp_ms = chrono::Utc::now().timestamp_millis();

        let record = self.tracker.find_request(&event.request_id);
        let mut prefs = self.prefs.lock().unwrap();
        if !self.config.feedback.enabled {
            // Validate exactly as the enabled path would, without mutating.
            let mut scratch = prefs.clone();
            record_feedback(&mut scratch, &event, record.as_ref())?;
            let record = record.expect("validated above");
            let selected = record.decision.expect("validated above").selected_tool;
            let weight = prefs.get_preference(&record.agent_id, &selected);
            return Ok(FeedbackReply {
                request_id: event.request_id,
                selected_tool: selected,
                weight,
                applied: false,
            });
        }

        let weight = record_feedback(&mut prefs, &event, record.as_ref())?;
        let selected = record
            .and_then(|r| r.decision)
            .map(|d| d.selected_tool)
            .expect("record_feedback verified the decision");
        let snapshot = prefs.clone();
        drop(prefs);
        snapshot
            .save_to(&self.data_dir.join(PREFERENCES_FILE))
            .map_err(|e| GatewayError::internal(format!("persisting preferences: {e}")))?;
        Ok(FeedbackReply {
            request_id: event.request_id,
            selected_tool: selected,
            weight,
            applied: true,
        })
    }

    /// Aggregate usage statistics over the audit log.
    pub fn usage(&self, filter: &RecordFilter) -> UsageStats {
        self.tracker.aggregate(filter)
    }

    /// Audit records matching a filter, in seq order.
    pub fn records(&self, filter: &RecordFilter) -> Vec<InvocationRecord> {
        self.tracker.query(filter)
    }

    /// Registered tools, optionally restricted to one tag.
    pub fn tools(&self, tag: Option<&str>) -> Vec<ToolDescriptor> {
        self.registry.list_tools(tag)
    }

    /// Write the registry snapshot to the data directory.
    pub fn persist_registry(&self) -> Result<RegistrySnapshot, GatewayError> {
        self.registry
            .save_snapshot(&self.data_dir.join(SNAPSHOT_FILE))
            .map_err(|e| GatewayError::internal(format!("persisting snapshot: {e}")))
    }
}

fn string_field(raw: &Payload, key: &str) -> String {
    raw.get(key)
        .and_then(Payload::as_str)
        .unwrap_or_default()
        .to_string()
}
