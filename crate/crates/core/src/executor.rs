//! Step and plan execution: endpoint invocation, timeouts, retries,
//! fallbacks, default responses, and output validation.
//!
//! The executor never returns an error for a step — every outcome is encoded
//! in a [`StepResult`] so the gateway can log exactly what happened. Plan
//! execution runs steps strictly in order and halts at the first step that
//! does not produce a usable output.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payload::Payload;
use crate::registry::{RegistryView, ToolDescriptor};
use crate::router::{PlanStep, RoutingDecision};
use crate::rules::check_output;

/// Where and how a tool is invoked.
///
/// Builtins exist so registries can be exercised without external processes:
/// `echo` returns its input, `const` returns a fixed payload, and `fail`
/// fails every attempt with the given code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Builtin {
        #[serde(flatten)]
        builtin: BuiltinSpec,
    },
    Http {
        url: String,
        #[serde(default = "default_method")]
        method: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    Subprocess {
        argv: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin_name", rename_all = "snake_case")]
pub enum BuiltinSpec {
    Echo,
    Const { payload: Payload },
    Fail { code: String },
}

fn default_method() -> String {
    "POST".to_string()
}

fn default_timeout_ms() -> u64 {
    5000
}

impl EndpointSpec {
    pub fn builtin_echo() -> Self {
        EndpointSpec::Builtin {
            builtin: BuiltinSpec::Echo,
        }
    }

    pub fn builtin_const(payload: Payload) -> Self {
        EndpointSpec::Builtin {
            builtin: BuiltinSpec::Const { payload },
        }
    }

    pub fn builtin_fail(code: &str) -> Self {
        EndpointSpec::Builtin {
            builtin: BuiltinSpec::Fail {
                code: code.to_string(),
            },
        }
    }

    pub fn http(url: &str) -> Self {
        EndpointSpec::Http {
            url: url.to_string(),
            method: default_method(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn subprocess(argv: &[&str]) -> Self {
        EndpointSpec::Subprocess {
            argv: argv.iter().map(|a| a.to_string()).collect(),
            timeout_ms: default_timeout_ms(),
        }
    }

    /// Structural validity, checked at registration time.
    pub fn validate_definition(&self) -> Result<(), String> {
        match self {
            EndpointSpec::Builtin { .. } => Ok(()),
            EndpointSpec::Http {
                url,
                method,
                timeout_ms,
            } => {
                let parsed = reqwest::Url::parse(url).map_err(|e| format!("bad url {url:?}: {e}"))?;
                if !matches!(parsed.scheme(), "http" | "https") {
                    return Err(format!("unsupported url scheme {:?}", parsed.scheme()));
                }
                if !method.eq_ignore_ascii_case("post") {
                    return Err(format!("unsupported method {method:?}; only POST is supported"));
                }
                if *timeout_ms == 0 {
                    return Err("timeout_ms must be positive".to_string());
                }
                Ok(())
            }
            EndpointSpec::Subprocess { argv, timeout_ms } => {
                if argv.is_empty() {
                    return Err("subprocess argv must be nonempty".to_string());
                }
                if *timeout_ms == 0 {
                    return Err("timeout_ms must be positive".to_string());
                }
                Ok(())
            }
        }
    }
}

/// Per-tool failure recovery policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FallbackPolicy {
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_tool: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default_response: Option<Payload>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Failed,
    TimedOut,
    OutputRejected,
    FallbackUsed,
    Defaulted,
}

impl StepStatus {
    /// Whether plan execution may continue past a step with this status.
    pub fn is_continuable(self) -> bool {
        matches!(
            self,
            StepStatus::Ok | StepStatus::FallbackUsed | StepStatus::Defaulted
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Ok => "ok",
            StepStatus::Failed => "failed",
            StepStatus::TimedOut => "timed_out",
            StepStatus::OutputRejected => "output_rejected",
            StepStatus::FallbackUsed => "fallback_used",
            StepStatus::Defaulted => "defaulted",
        }
    }
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The complete account of one executed plan step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub tool_id: String,
    pub status: StepStatus,
    /// Invocations of the primary endpoint (1 + retries taken); the single
    /// fallback invocation, if any, is not counted here.
    pub attempts: u32,
    /// Wall-clock latency of each primary attempt, in order.
    pub latency_ms: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<Payload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A successfully completed plan: every step result plus the final payload
/// (the last step's output).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub steps: Vec<StepResult>,
    pub output: Payload,
}

/// Plan execution halted at `step_index`; `steps` holds every result up to
/// and including the aborting step. Steps after the aborting index were
/// never attempted.
#[derive(Debug, Clone, Error)]
#[error("plan aborted at step {step_index}")]
pub struct PlanAborted {
    pub step_index: usize,
    pub steps: Vec<StepResult>,
}

/// Endpoint invocation failures (per attempt; recovery happens above this).
#[derive(Debug, Error)]
pub enum InvokeError {
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("timed out after {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },
    #[error("malformed tool output: {0}")]
    MalformedToolOutput(String),
}

impl InvokeError {
    fn is_timeout(&self) -> bool {
        matches!(self, InvokeError::Timeout { .. })
    }
}

/// Executes plan steps. Stateless apart from a shared HTTP client; one
/// executor serves any number of concurrent plans.
#[derive(Debug, Clone)]
pub struct Executor {
    http: reqwest::Client,
}

impl Default for Executor {
    fn default() -> Self {
        Self::new()
    }
}

impl Executor {
    pub fn new() -> Self {
        Executor {
            // Timeouts are per-endpoint, so the client itself has none.
            http: reqwest::Client::builder()
                .build()
                .expect("default reqwest client"),
        }
    }

    /// Run one plan step to a terminal [`StepResult`].
    ///
    /// Recovery ladder: retry the primary endpoint up to `max_retries` times
    /// with fixed backoff; then invoke the fallback tool once (its own
    /// fallback policy is not followed); then return the default response.
    /// An output rejected by `check_output` is terminal — the tool succeeded
    /// by its own account, so retrying or falling back would launder a
    /// contract violation — and the rejected payload is withheld.
    pub async fn execute_step(
        &self,
        step: &PlanStep,
        inputs: &Payload,
        tool: &ToolDescriptor,
        view: &RegistryView,
    ) -> StepResult {
        debug_assert_eq!(step.tool_id, tool.tool_id);
        let policy = tool.fallback.clone().unwrap_or_default();
        let max_attempts = policy.max_retries + 1;

        let mut latencies = Vec::new();
        let mut last_error: Option<InvokeError> = None;
        for attempt in 1..=max_attempts {
            let started = Instant::now();
            let outcome = self.invoke_endpoint(&tool.endpoint, inputs).await;
            latencies.push(started.elapsed().as_millis() as u64);
            match outcome {
                Ok(output) => {
                    let verdict = check_output(&output, tool, view.rules());
                    if verdict.ok {
                        return StepResult {
                            tool_id: tool.tool_id.clone(),
                            status: StepStatus::Ok,
                            attempts: attempt,
                            latency_ms: latencies,
                            output: Some(output),
                            error: None,
                        };
                    }
                    return StepResult {
                        tool_id: tool.tool_id.clone(),
                        status: StepStatus::OutputRejected,
                        attempts: attempt,
                        latency_ms: latencies,
                        output: None,
                        error: Some(format!("output rejected: {}", verdict.reject_summary())),
                    };
                }
                Err(err) => {
                    let retries_remain = attempt < max_attempts;
                    last_error = Some(err);
                    if retries_remain && policy.retry_backoff_ms > 0 {
                        tokio::time::sleep(Duration::from_millis(policy.retry_backoff_ms)).await;
                    }
                }
            }
        }

        let primary_error = last_error.expect("loop ran at least once");
        let primary_summary = format!(
            "primary failed after {max_attempts} attempt(s): {primary_error}"
        );

        if let Some(fallback_id) = &policy.fallback_tool {
            match self.invoke_fallback(fallback_id, inputs, view).await {
                Ok(output) => {
                    // The caller contracted for the primary tool's output
                    // shape, so the stand-in is held to the same contract.
                    let verdict = check_output(&output, tool, view.rules());
                    if verdict.ok {
                        return StepResult {
                            tool_id: tool.tool_id.clone(),
                            status: StepStatus::FallbackUsed,
                            attempts: max_attempts,
                            latency_ms: latencies,
                            output: Some(output),
                            error: Some(format!(
                                "{primary_summary}; recovered via fallback {fallback_id:?}"
                            )),
                        };
                    }
                    return StepResult {
                        tool_id: tool.tool_id.clone(),
                        status: StepStatus::OutputRejected,
                        attempts: max_attempts,
                        latency_ms: latencies,
                        output: None,
                        error: Some(format!(
                            "{primary_summary}; fallback {fallback_id:?} output rejected: {}",
                            verdict.reject_summary()
                        )),
                    };
                }
                Err(fallback_error) => {
                    if let Some(default) = policy.default_response {
                        return StepResult {
                            tool_id: tool.tool_id.clone(),
                            status: StepStatus::Defaulted,
                            attempts: max_attempts,
                            latency_ms: latencies,
                            output: Some(default),
                            error: Some(format!(
                                "{primary_summary}; fallback {fallback_id:?} failed: \
                                 {fallback_error}; returned default response"
                            )),
                        };
                    }
                    return StepResult {
                        tool_id: tool.tool_id.clone(),
                        status: if primary_error.is_timeout() {
                            StepStatus::TimedOut
                        } else {
                            StepStatus::Failed
                        },
                        attempts: max_attempts,
                        latency_ms: latencies,
                        output: None,
                        error: Some(format!(
                            "{primary_summary}; fallback {fallback_id:?} failed: {fallback_error}"
                        )),
                    };
                }
            }
        }

        if let Some(default) = policy.default_response {
            return StepResult {
                tool_id: tool.tool_id.clone(),
                status: StepStatus::Defaulted,
                attempts: max_attempts,
                latency_ms: latencies,
                output: Some(default),
                error: Some(format!("{primary_summary}; returned default response")),
            };
        }

        StepResult {
            tool_id: tool.tool_id.clone(),
            status: if primary_error.is_timeout() {
                StepStatus::TimedOut
            } else {
                StepStatus::Failed
            },
            attempts: max_attempts,
            latency_ms: latencies,
            output: None,
            error: Some(primary_summary),
        }
    }

    /// Single-shot fallback invocation: one attempt against the fallback
    /// tool's endpoint, without following its own retry/fallback policy
    /// (recursion is capped at depth 1).
    async fn invoke_fallback(
        &self,
        fallback_id: &str,
        inputs: &Payload,
        view: &RegistryView,
    ) -> Result<Payload, InvokeError> {
        let Some(fallback) = view.tool(fallback_id) else {
            return Err(InvokeError::TransportFailure(format!(
                "fallback tool {fallback_id:?} is not registered"
            )));
        };
        if !fallback.enabled {
            return Err(InvokeError::TransportFailure(format!(
                "fallback tool {fallback_id:?} is disabled"
            )));
        }
        self.invoke_endpoint(&fallback.endpoint, inputs).await
    }

    /// Run every step of a routed plan in order.
    ///
    /// Each step's input is the agent's args with a reserved `deps` key
    /// mapping each of the step's declared dependencies to that
    /// dependency's output. Execution halts at the first step whose status
    /// is not continuable.
    pub async fn execute_plan(
        &self,
        decision: &RoutingDecision,
        args: &Payload,
        view: &RegistryView,
    ) -> Result<PlanOutput, PlanAborted> {
        let mut steps: Vec<StepResult> = Vec::new();
        let mut outputs: BTreeMap<String, Payload> = BTreeMap::new();

        for (index, step) in decision.plan.iter().enumerate() {
            let inputs = merge_step_inputs(args, step, &outputs);
            let result = match view.tool(&step.tool_id) {
                Some(tool) => self.execute_step(step, &inputs, tool, view).await,
                // Unreachable when the plan came from this registry view;
                // encoded as a failed step rather than a panic for safety.
                None => StepResult {
                    tool_id: step.tool_id.clone(),
                    status: StepStatus::Failed,
                    attempts: 1,
                    latency_ms: vec![0],
                    output: None,
                    error: Some(format!("tool {:?} not in registry view", step.tool_id)),
                },
            };
            let continuable = result.status.is_continuable();
            if let Some(output) = &result.output {
                outputs.insert(step.tool_id.clone(), output.clone());
            }
            steps.push(result);
            if !continuable {
                return Err(PlanAborted {
                    step_index: index,
                    steps,
                });
            }
        }

        let output = steps
            .last()
            .and_then(|s| s.output.clone())
            .unwrap_or(Payload::Null);
        Ok(PlanOutput { steps, output })
    }

    async fn invoke_endpoint(
        &self,
        endpoint: &EndpointSpec,
        payload: &Payload,
    ) -> Result<Payload, InvokeError> {
        match endpoint {
            EndpointSpec::Builtin { builtin } => match builtin {
                BuiltinSpec::Echo => Ok(payload.clone()),
                BuiltinSpec::Const { payload } => Ok(payload.clone()),
                BuiltinSpec::Fail { code } => {
                    Err(InvokeError::TransportFailure(format!("builtin failure: {code}")))
                }
            },
            EndpointSpec::Http { url, timeout_ms, .. } => {
                self.invoke_http(url, *timeout_ms, payload).await
            }
            EndpointSpec::Subprocess { argv, timeout_ms } => {
                invoke_subprocess(argv, *timeout_ms, payload).await
            }
        }
    }

    /// POST the payload as a JSON body; the response body must be a single
    /// JSON document.
    pub async fn invoke_http(
        &self,
        url: &str,
        timeout_ms: u64,
        payload: &Payload,
    ) -> Result<Payload, InvokeError> {
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                InvokeError::Timeout { timeout_ms }
            } else {
                InvokeError::TransportFailure(e.to_string())
            }
        };
        let response = self
            .http
            .post(url)
            .timeout(Duration::from_millis(timeout_ms))
            .json(payload)
            .send()
            .await
            .map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            return Err(InvokeError::TransportFailure(format!(
                "http status {status}"
            )));
        }
        let body = response.text().await.map_err(classify)?;
        serde_json::from_str(&body)
            .map_err(|e| InvokeError::MalformedToolOutput(format!("unparseable body: {e}")))
    }
}

/// Spawn the argv, write the payload to stdin, and parse stdout as a single
/// JSON document. Nonzero exit is a transport failure; overrunning
/// `timeout_ms` kills the child.
pub async fn invoke_subprocess(
    argv: &[String],
    timeout_ms: u64,
    payload: &Payload,
) -> Result<Payload, InvokeError> {
    use tokio::io::AsyncWriteExt;

    let (program, args) = argv
        .split_first()
        .ok_or_else(|| InvokeError::TransportFailure("empty argv".to_string()))?;
    let mut child = tokio::process::Command::new(program)
        .args(args)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| InvokeError::TransportFailure(format!("spawn {program:?}: {e}")))?;

    let body = payload.to_string();
    if let Some(mut stdin) = child.stdin.take() {
        // A write failure usually means the child exited early; the exit
        // status below is the authoritative signal.
        let _ = stdin.write_all(body.as_bytes()).await;
        let _ = stdin.shutdown().await;
    }

    let output = tokio::time::timeout(Duration::from_millis(timeout_ms), child.wait_with_output())
        .await
        .map_err(|_| InvokeError::Timeout { timeout_ms })?
        .map_err(|e| InvokeError::TransportFailure(format!("wait {program:?}: {e}")))?;

    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let snippet: String = stderr.chars().take(200).collect();
        return Err(InvokeError::TransportFailure(format!(
            "exit status {}: {}",
            output.status,
            snippet.trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    serde_json::from_str(stdout.trim())
        .map_err(|e| InvokeError::MalformedToolOutput(format!("unparseable stdout: {e}")))
}

/// Build a step's input: the agent's args (an object) plus a reserved
/// `deps` key mapping each declared dependency to its output. `deps` is
/// always present and always owned by the control plane — a caller-supplied
/// `deps` value is overwritten.
pub fn merge_step_inputs(
    args: &Payload,
    step: &PlanStep,
    outputs: &BTreeMap<String, Payload>,
) -> Payload {
    let mut merged = args.as_object().cloned().unwrap_or_default();
    let mut deps = serde_json::Map::new();
    for dep in &step.inputs_from {
        if let Some(output) = outputs.get(dep) {
            deps.insert(dep.clone(), output.clone());
        }
    }
    merged.insert("deps".to_string(), Payload::Object(deps));
    Payload::Object(merged)
}
