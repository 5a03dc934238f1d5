//! Durable registries for tools, agents, validation rules, and metrics.
//!
//! The registry is the only mutable piece of the control plane's
//! configuration. Mutations are validated up front and applied atomically
//! under a write lock, so readers always observe a consistent state and a
//! failed call leaves the registry exactly as it was. The dependency graph
//! over registered tools is kept acyclic at registration time so routing
//! can assume a DAG.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{EndpointSpec, FallbackPolicy};
use crate::rules::{RuleDefect, ValidationRule};
use crate::schema::{SchemaDefect, SchemaNode};

/// A registered tool: identity, documentation, schemas, endpoint, and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    /// Unique identifier matching `[a-z0-9_.-]+`.
    pub tool_id: String,
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    pub input_schema: SchemaNode,
    pub output_schema: SchemaNode,
    pub endpoint: EndpointSpec,
    /// Tools whose outputs this tool consumes; must already be registered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependencies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackPolicy>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Starts at 1 and increments by exactly 1 on each successful update.
    #[serde(default)]
    pub version: u64,
}

fn default_true() -> bool {
    true
}

/// A registered agent and its tool-access policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: String,
    #[serde(default)]
    pub display_name: String,
    /// Tags the agent may use; empty means all tags are allowed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed_tags: Vec<String>,
    /// Tool ids the agent must never reach; may name tools not yet registered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub denied_tools: Vec<String>,
}

/// A registered metric definition. Aggregation lives in the usage tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDefinition {
    pub metric_id: String,
    pub kind: MetricKind,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Counter,
    Latency,
}

/// Everything the registry persists, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub tools: Vec<ToolDescriptor>,
    pub agents: Vec<AgentDescriptor>,
    pub rules: Vec<ValidationRule>,
    pub metrics: Vec<MetricDefinition>,
    pub snapshot_seq: u64,
}

/// Errors from registry mutations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum RegistryError {
    #[error("id {0:?} is already registered")]
    DuplicateId(String),
    #[error("tool {tool_id:?} references unknown tool {reference:?}")]
    UnknownDependency { tool_id: String, reference: String },
    #[error("registration would create a dependency cycle: {0}")]
    DependencyCycle(String),
    #[error("{side} schema of tool {tool_id:?}: {defect}")]
    MalformedSchema {
        tool_id: String,
        side: &'static str,
        defect: SchemaDefect,
    },
    #[error("id {0:?} is not registered")]
    NotFound(String),
    #[error("tool {tool_id:?} still has dependents: {}", dependents.join(", "))]
    HasDependents {
        tool_id: String,
        dependents: Vec<String>,
    },
    #[error("invalid identifier {id:?}: {reason}")]
    InvalidId { id: String, reason: String },
    #[error("invalid endpoint for tool {tool_id:?}: {reason}")]
    InvalidEndpoint { tool_id: String, reason: String },
    #[error(transparent)]
    InvalidRule(#[from] RuleDefect),
}

impl RegistryError {
    /// Stable wire code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::DuplicateId(_) => "duplicate_id",
            RegistryError::UnknownDependency { .. } => "unknown_dependency",
            RegistryError::DependencyCycle(_) => "dependency_cycle",
            RegistryError::MalformedSchema { .. } => "malformed_schema",
            RegistryError::NotFound(_) => "not_found",
            RegistryError::HasDependents { .. } => "has_dependents",
            RegistryError::InvalidId { .. } => "invalid_id",
            RegistryError::InvalidEndpoint { .. } => "invalid_endpoint",
            RegistryError::InvalidRule(_) => "invalid_rule",
        }
    }
}

/// Errors from snapshot persistence.
#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RegistryState {
    tools: BTreeMap<String, ToolDescriptor>,
    agents: BTreeMap<String, AgentDescriptor>,
    rules: BTreeMap<String, ValidationRule>,
    metrics: BTreeMap<String, MetricDefinition>,
    snapshot_seq: u64,
    /// Bumped on every successful content mutation; stamped into views.
    version: u64,
}

/// An immutable, internally consistent copy of the registry taken at one
/// version. Request handling works against a view so a request never
/// observes a half-applied mutation.
#[derive(Debug, Clone)]
pub struct RegistryView {
    pub version: u64,
    tools: BTreeMap<String, ToolDescriptor>,
    agents: BTreeMap<String, AgentDescriptor>,
    rules: Vec<ValidationRule>,
}

impl RegistryView {
    pub fn tool(&self, tool_id: &str) -> Option<&ToolDescriptor> {
        self.tools.get(tool_id)
    }

    pub fn agent(&self, agent_id: &str) -> Option<&AgentDescriptor> {
        self.agents.get(agent_id)
    }

    /// All tools in ascending tool_id order.
    pub fn tools(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.values()
    }

    /// All rules in ascending rule_id order.
    pub fn rules(&self) -> &[ValidationRule] {
        &self.rules
    }
}

/// The registration module: shared, concurrently readable tool/agent state.
#[derive(Debug, Default)]
pub struct Registry {
    inner: RwLock<RegistryState>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a registry from a snapshot, revalidating every invariant.
    pub fn from_snapshot(snapshot: RegistrySnapshot) -> Result<Self, SnapshotError> {
        let registry = Registry::new();
        {
            let corrupt = |e: RegistryError| SnapshotError::Corrupt(e.to_string());
            // Tools are inserted in dependency order; a snapshot that cannot
            // be ordered that way violates the acyclicity invariant.
            let mut state = registry.inner.write().unwrap();
            for agent in snapshot.agents {
                validate_identifier(&agent.agent_id).map_err(corrupt)?;
                if state.agents.insert(agent.agent_id.clone(), agent).is_some() {
                    return Err(SnapshotError::Corrupt("duplicate agent_id".to_string()));
                }
            }
            for rule in snapshot.rules {
                rule.validate_definition()
                    .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
                if state.rules.insert(rule.rule_id.clone(), rule).is_some() {
                    return Err(SnapshotError::Corrupt("duplicate rule_id".to_string()));
                }
            }
            for metric in snapshot.metrics {
                if state.metrics.insert(metric.metric_id.clone(), metric).is_some() {
                    return Err(SnapshotError::Corrupt("duplicate metric_id".to_string()));
                }
            }
            for tool in snapshot.tools {
                validate_descriptor(&tool).map_err(corrupt)?;
                if state.tools.insert(tool.tool_id.clone(), tool).is_some() {
                    return Err(SnapshotError::Corrupt("duplicate tool_id".to_string()));
                }
            }
            for tool in state.tools.values() {
                for reference in tool.dependencies.iter().chain(fallback_reference(tool)) {
                    if !state.tools.contains_key(reference) {
                        return Err(SnapshotError::Corrupt(format!(
                            "tool {:?} references unknown tool {reference:?}",
                            tool.tool_id
                        )));
                    }
                }
            }
            if let Some(cycle) = find_cycle(&state.tools) {
                return Err(SnapshotError::Corrupt(format!("dependency cycle: {cycle}")));
            }
            state.snapshot_seq = snapshot.snapshot_seq;
        }
        Ok(registry)
    }

    /// Register a new tool. The stored descriptor always has version 1.
    pub fn register_tool(&self, mut desc: ToolDescriptor) -> Result<String, RegistryError> {
        validate_descriptor(&desc)?;
        let mut state = self.inner.write().unwrap();
        if state.tools.contains_key(&desc.tool_id) {
            return Err(RegistryError::DuplicateId(desc.tool_id));
        }
        check_references(&state.tools, &desc)?;
        desc.version = 1;
        let tool_id = desc.tool_id.clone();

        let mut tools = state.tools.clone();
        tools.insert(tool_id.clone(), desc.clone());
        if let Some(cycle) = find_cycle(&tools) {
            return Err(RegistryError::DependencyCycle(cycle));
        }
        state.tools = tools;
        state.version += 1;
        Ok(tool_id)
    }

    /// Replace a tool's descriptor atomically; returns the new version.
    pub fn update_tool(&self, tool_id: &str, mut desc: ToolDescriptor) -> Result<u64, RegistryError> {
        if desc.tool_id != tool_id {
            return Err(RegistryError::InvalidId {
                id: desc.tool_id,
                reason: format!("descriptor id must match the updated tool {tool_id:?}"),
            });
        }
        validate_descriptor(&desc)?;
        let mut state = self.inner.write().unwrap();
        let Some(existing) = state.tools.get(tool_id) else {
            return Err(RegistryError::NotFound(tool_id.to_string()));
        };
        check_references(&state.tools, &desc)?;
        desc.version = existing.version + 1;
        let new_version = desc.version;

        let mut tools = state.tools.clone();
        tools.insert(tool_id.to_string(), desc);
        if let Some(cycle) = find_cycle(&tools) {
            return Err(RegistryError::DependencyCycle(cycle));
        }
        state.tools = tools;
        state.version += 1;
        Ok(new_version)
    }

    /// Remove a tool nothing else depends on; returns the removed descriptor.
    pub fn deregister_tool(&self, tool_id: &str) -> Result<ToolDescriptor, RegistryError> {
        let mut state = self.inner.write().unwrap();
        if !state.tools.contains_key(tool_id) {
            return Err(RegistryError::NotFound(tool_id.to_string()));
        }
        let dependents: Vec<String> = state
            .tools
            .values()
            .filter(|t| {
                t.tool_id != tool_id
                    && (t.dependencies.iter().any(|d| d == tool_id)
                        || fallback_reference(t).is_some_and(|f| f == tool_id))
            })
            .map(|t| t.tool_id.clone())
            .collect();
        if !dependents.is_empty() {
            return Err(RegistryError::HasDependents {
                tool_id: tool_id.to_string(),
                dependents,
            });
        }
        let removed = state.tools.remove(tool_id).expect("presence checked above");
        state.version += 1;
        Ok(removed)
    }

    pub fn register_agent(&self, desc: AgentDescriptor) -> Result<String, RegistryError> {
        validate_identifier(&desc.agent_id)?;
        let mut state = self.inner.write().unwrap();
        if state.agents.contains_key(&desc.agent_id) {
            return Err(RegistryError::DuplicateId(desc.agent_id));
        }
        let agent_id = desc.agent_id.clone();
        state.agents.insert(agent_id.clone(), desc);
        state.version += 1;
        Ok(agent_id)
    }

    pub fn register_rule(&self, rule: ValidationRule) -> Result<String, RegistryError> {
        rule.validate_definition()?;
        let mut state = self.inner.write().unwrap();
        if state.rules.contains_key(&rule.rule_id) {
            return Err(RegistryError::DuplicateId(rule.rule_id));
        }
        let rule_id = rule.rule_id.clone();
        state.rules.insert(rule_id.clone(), rule);
        state.version += 1;
        Ok(rule_id)
    }

    pub fn register_metric(&self, metric: MetricDefinition) -> Result<String, RegistryError> {
        validate_identifier(&metric.metric_id)?;
        let mut state = self.inner.write().unwrap();
        if state.metrics.contains_key(&metric.metric_id) {
            return Err(RegistryError::DuplicateId(metric.metric_id));
        }
        let metric_id = metric.metric_id.clone();
        state.metrics.insert(metric_id.clone(), metric);
        state.version += 1;
        Ok(metric_id)
    }

    pub fn get_tool(&self, tool_id: &str) -> Option<ToolDescriptor> {
        self.inner.read().unwrap().tools.get(tool_id).cloned()
    }

    pub fn get_agent(&self, agent_id: &str) -> Option<AgentDescriptor> {
        self.inner.read().unwrap().agents.get(agent_id).cloned()
    }

    /// Registered tools in ascending tool_id order, optionally filtered to
    /// tools whose tags contain `tag_filter` exactly.
    pub fn list_tools(&self, tag_filter: Option<&str>) -> Vec<ToolDescriptor> {
        let state = self.inner.read().unwrap();
        state
            .tools
            .values()
            .filter(|t| tag_filter.is_none_or(|tag| t.tags.iter().any(|x| x == tag)))
            .cloned()
            .collect()
    }

    /// Take a consistent snapshot view for one request.
    pub fn view(&self) -> RegistryView {
        let state = self.inner.read().unwrap();
        RegistryView {
            version: state.version,
            tools: state.tools.clone(),
            agents: state.agents.clone(),
            rules: state.rules.values().cloned().collect(),
        }
    }

    /// Current content version; bumped on every successful mutation.
    pub fn content_version(&self) -> u64 {
        self.inner.read().unwrap().version
    }

    /// Write a snapshot atomically (write-temp-then-rename) and return the
    /// document written. Each save strictly increases `snapshot_seq`.
    pub fn save_snapshot(&self, path: &Path) -> Result<RegistrySnapshot, SnapshotError> {
        let mut state = self.inner.write().unwrap();
        state.snapshot_seq += 1;
        let snapshot = RegistrySnapshot {
            tools: state.tools.values().cloned().collect(),
            agents: state.agents.values().cloned().collect(),
            rules: state.rules.values().cloned().collect(),
            metrics: state.metrics.values().cloned().collect(),
            snapshot_seq: state.snapshot_seq,
        };
        drop(state);

        let body = serde_json::to_string_pretty(&snapshot)
            .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(dir) = parent {
            fs::create_dir_all(dir)?;
        }
        let tmp_path = path.with_extension("tmp");
        {
            let mut file = fs::File::create(&tmp_path)?;
            file.write_all(body.as_bytes())?;
            file.sync_all()?;
        }
        fs::rename(&tmp_path, path)?;
        Ok(snapshot)
    }

    /// Read and parse a snapshot document. Missing or unreadable paths are
    /// io failures; unparseable or invariant-violating content is corrupt.
    pub fn load_snapshot(path: &Path) -> Result<RegistrySnapshot, SnapshotError> {
        let body = fs::read_to_string(path)?;
        let snapshot: RegistrySnapshot =
            serde_json::from_str(&body).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
        // Prove the snapshot reconstructs a valid registry before handing it out.
        Registry::from_snapshot(snapshot.clone())?;
        Ok(snapshot)
    }
}

fn fallback_reference(tool: &ToolDescriptor) -> Option<&String> {
    tool.fallback.as_ref().and_then(|f| f.fallback_tool.as_ref())
}

fn validate_identifier(id: &str) -> Result<(), RegistryError> {
    if id.trim().is_empty() {
        return Err(RegistryError::InvalidId {
            id: id.to_string(),
            reason: "identifier must be nonempty".to_string(),
        });
    }
    Ok(())
}

fn validate_tool_id(id: &str) -> Result<(), RegistryError> {
    let valid = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '_' | '.' | '-'));
    if valid {
        Ok(())
    } else {
        Err(RegistryError::InvalidId {
            id: id.to_string(),
            reason: "tool ids must match [a-z0-9_.-]+".to_string(),
        })
    }
}

fn validate_descriptor(desc: &ToolDescriptor) -> Result<(), RegistryError> {
    validate_tool_id(&desc.tool_id)?;
    desc.input_schema
        .validate_definition()
        .map_err(|defect| RegistryError::MalformedSchema {
            tool_id: desc.tool_id.clone(),
            side: "input",
            defect,
        })?;
    desc.output_schema
        .validate_definition()
        .map_err(|defect| RegistryError::MalformedSchema {
            tool_id: desc.tool_id.clone(),
            side: "output",
            defect,
        })?;
    desc.endpoint
        .validate_definition()
        .map_err(|reason| RegistryError::InvalidEndpoint {
            tool_id: desc.tool_id.clone(),
            reason,
        })?;
    Ok(())
}

/// Dependencies and the fallback tool must already be registered.
fn check_references(
    tools: &BTreeMap<String, ToolDescriptor>,
    desc: &ToolDescriptor,
) -> Result<(), RegistryError> {
    for dep in &desc.dependencies {
        if !tools.contains_key(dep) && dep != &desc.tool_id {
            return Err(RegistryError::UnknownDependency {
                tool_id: desc.tool_id.clone(),
                reference: dep.clone(),
            });
        }
    }
    if let Some(fallback) = fallback_reference(desc) {
        if !tools.contains_key(fallback) {
            return Err(RegistryError::UnknownDependency {
                tool_id: desc.tool_id.clone(),
                reference: fallback.clone(),
            });
        }
    }
    Ok(())
}

/// Depth-first cycle search over the dependency graph. Returns a readable
/// cycle like `a -> b -> a` when one exists.
fn find_cycle(tools: &BTreeMap<String, ToolDescriptor>) -> Option<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unvisited,
        InProgress,
        Done,
    }

    fn visit(
        node: &str,
        tools: &BTreeMap<String, ToolDescriptor>,
        marks: &mut BTreeMap<String, Mark>,
        stack: &mut Vec<String>,
    ) -> Option<String> {
        match marks.get(node).copied().unwrap_or(Mark::Unvisited) {
            Mark::Done => return None,
            Mark::InProgress => {
                let start = stack.iter().position(|n| n == node).unwrap_or(0);
                let mut cycle: Vec<&str> = stack[start..].iter().map(String::as_str).collect();
                cycle.push(node);
                return Some(cycle.join(" -> "));
            }
            Mark::Unvisited => {}
        }
        marks.insert(node.to_string(), Mark::InProgress);
        stack.push(node.to_string());
        if let Some(tool) = tools.get(node) {
            for dep in &tool.dependencies {
                if let Some(cycle) = visit(dep, tools, marks, stack) {
                    return Some(cycle);
                }
            }
        }
        stack.pop();
        marks.insert(node.to_string(), Mark::Done);
        None
    }

    let mut marks = BTreeMap::new();
    let mut stack = Vec::new();
    for node in tools.keys() {
        if let Some(cycle) = visit(node, tools, &mut marks, &mut stack) {
            return Some(cycle);
        }
    }
    None
}
