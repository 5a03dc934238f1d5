//! Routing: candidate filtering, tool selection, and dependency-ordered
//! plan construction.
//!
//! The router selects the single best-scoring tool for an intent and plans
//! its entire dependency closure as a deterministic topological order —
//! dependencies first, ascending tool_id among simultaneously ready nodes.
//! Candidates whose closure would pull in a disabled or policy-excluded
//! tool are dropped up front, so every step of every plan is executable
//! under the requesting agent's policy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::PreferenceTable;
use crate::registry::{AgentDescriptor, RegistryView, ToolDescriptor};
use crate::resolver::{resolve, IntentQuery, IntentScorer, ScoredCandidate};
use crate::rules::ValidationRule;

/// One planned invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_index: usize,
    pub tool_id: String,
    /// The tool's declared dependencies; all appear at earlier indices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs_from: Vec<String>,
}

/// The full routing outcome for one request, kept audit-complete: every
/// scored candidate, the threshold in force, and a human-readable rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub request_id: String,
    pub selected_tool: String,
    pub plan: Vec<PlanStep>,
    pub candidates: Vec<ScoredCandidate>,
    pub threshold_used: f64,
    pub rationale: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlanError {
    #[error("agent {0:?} is not registered")]
    UnknownAgent(String),
    #[error("no tool matched the intent (best combined score {best_score:.4} < threshold {threshold:.4})")]
    NoMatchingTool { best_score: f64, threshold: f64 },
    #[error("dependency cycle detected while planning: {0}")]
    DependencyCycle(String),
}

/// Keep tools that are enabled, not denied to the agent, and tag-permitted
/// (an empty `allowed_tags` list permits every tag). The rules parameter is
/// part of the filtering interface but currently unused: registered
/// validation rules constrain payloads, not candidacy.
pub fn filter_candidates(
    agent: &AgentDescriptor,
    tools: &[ToolDescriptor],
    _rules: &[ValidationRule],
) -> Vec<ToolDescriptor> {
    tools
        .iter()
        .filter(|tool| {
            tool.enabled
                && !agent.denied_tools.contains(&tool.tool_id)
                && (agent.allowed_tags.is_empty()
                    || tool.tags.iter().any(|t| agent.allowed_tags.contains(t)))
        })
        .cloned()
        .collect()
}

/// Select the best tool for the query and plan its dependency closure.
///
/// Candidates are policy-filtered, then narrowed to those whose entire
/// dependency closure survives the same filter (a tool whose chain crosses
/// a policy line is unroutable for this agent). The winner is the highest
/// combined score, ties broken by ascending tool_id; a best score below the
/// threshold yields `NoMatchingTool`.
pub fn plan(
    request_id: &str,
    query: &IntentQuery,
    view: &RegistryView,
    prefs: &PreferenceTable,
    scorer: &dyn IntentScorer,
    threshold: f64,
) -> Result<RoutingDecision, PlanError> {
    let Some(agent) = view.agent(&query.agent_id) else {
        return Err(PlanError::UnknownAgent(query.agent_id.clone()));
    };

    let all_tools: Vec<ToolDescriptor> = view.tools().cloned().collect();
    let allowed = filter_candidates(agent, &all_tools, view.rules());
    let allowed_ids: BTreeSet<&str> = allowed.iter().map(|t| t.tool_id.as_str()).collect();

    let mut viable: Vec<ToolDescriptor> = Vec::new();
    let mut excluded_closures: Vec<String> = Vec::new();
    for tool in &allowed {
        match dependency_closure(&tool.tool_id, view) {
            Ok(closure) if closure.iter().all(|id| allowed_ids.contains(id.as_str())) => {
                viable.push(tool.clone());
            }
            Ok(_) => excluded_closures.push(tool.tool_id.clone()),
            Err(cycle) => return Err(PlanError::DependencyCycle(cycle)),
        }
    }

    let candidates = resolve(scorer, query, &viable, prefs);
    let best_score = candidates.first().map(|c| c.combined).unwrap_or(0.0);
    if candidates.is_empty() || best_score < threshold {
        return Err(PlanError::NoMatchingTool {
            best_score,
            threshold,
        });
    }
    let best = candidates[0].clone();

    let closure = dependency_closure(&best.tool_id, view).map_err(PlanError::DependencyCycle)?;
    let order = topological_order(&closure, view).map_err(PlanError::DependencyCycle)?;
    let plan: Vec<PlanStep> = order
        .iter()
        .enumerate()
        .map(|(step_index, tool_id)| PlanStep {
            step_index,
            tool_id: tool_id.clone(),
            inputs_from: view
                .tool(tool_id)
                .map(|t| t.dependencies.clone())
                .unwrap_or_default(),
        })
        .collect();

    let tie = candidates
        .get(1)
        .is_some_and(|second| second.combined == best.combined);
    let rationale = format!(
        "selected {:?} with combined {:.4} over {} candidate(s){}; threshold {:.4}; plan [{}]",
        best.tool_id,
        best.combined,
        candidates.len(),
        if tie { " (tie broken by ascending tool_id)" } else { "" },
        threshold,
        order.join(", "),
    );

    Ok(RoutingDecision {
        request_id: request_id.to_string(),
        selected_tool: best.tool_id.clone(),
        plan,
        candidates,
        threshold_used: threshold,
        rationale,
    })
}

/// A stable, human-readable account of a routing decision; byte-identical
/// for identical decisions.
pub fn explain(decision: &RoutingDecision) -> String {
    let mut out = String::new();
    out.push_str(&format!("routing decision for request {:?}\n", decision.request_id));
    out.push_str(&format!("  threshold: {:.4}\n", decision.threshold_used));
    out.push_str("  candidates (ranked):\n");
    for (rank, candidate) in decision.candidates.iter().enumerate() {
        out.push_str(&format!(
            "    {}. {}  lexical={:.4} preference={:.4} combined={:.4}\n",
            rank + 1,
            candidate.tool_id,
            candidate.lexical,
            candidate.preference,
            candidate.combined,
        ));
    }
    out.push_str(&format!("  selected: {}\n", decision.selected_tool));
    if decision
        .candidates
        .get(1)
        .zip(decision.candidates.first())
        .is_some_and(|(second, first)| second.combined == first.combined)
    {
        out.push_str("  tie-break: ascending tool_id among equal combined scores\n");
    }
    out.push_str("  plan:\n");
    for step in &decision.plan {
        let inputs = if step.inputs_from.is_empty() {
            "-".to_string()
        } else {
            step.inputs_from.join(", ")
        };
        out.push_str(&format!(
            "    {}. {} (inputs from: {})\n",
            step.step_index, step.tool_id, inputs
        ));
    }
    out
}

/// The tool plus everything it transitively depends on. Errors with a
/// readable path when a cycle is encountered (defense in depth; the
/// registry maintains acyclicity).
fn dependency_closure(tool_id: &str, view: &RegistryView) -> Result<BTreeSet<String>, String> {
    let mut closure = BTreeSet::new();
    let mut stack = vec![tool_id.to_string()];
    while let Some(id) = stack.pop() {
        if !closure.insert(id.clone()) {
            continue;
        }
        if closure.len() > 10_000 {
            return Err(format!("closure of {tool_id:?} exceeds 10000 tools"));
        }
        if let Some(tool) = view.tool(&id) {
            for dep in &tool.dependencies {
                if !closure.contains(dep) {
                    stack.push(dep.clone());
                }
            }
        }
    }
    Ok(closure)
}

/// Kahn's algorithm restricted to the closure, popping the smallest ready
/// tool_id first — the lexicographically least topological order.
fn topological_order(closure: &BTreeSet<String>, view: &RegistryView) -> Result<Vec<String>, String> {
    let mut indegree: BTreeMap<&str, usize> = closure.iter().map(|id| (id.as_str(), 0)).collect();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for id in closure {
        if let Some(tool) = view.tool(id) {
            for dep in &tool.dependencies {
                if closure.contains(dep) {
                    *indegree.get_mut(id.as_str()).expect("id in closure") += 1;
                    dependents.entry(dep.as_str()).or_default().push(id.as_str());
                }
            }
        }
    }

    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut order = Vec::with_capacity(closure.len());
    while let Some(next) = ready.iter().next().copied() {
        ready.remove(next);
        order.push(next.to_string());
        for dependent in dependents.get(next).into_iter().flatten() {
            let d = indegree.get_mut(dependent).expect("dependent in closure");
            *d -= 1;
            if *d == 0 {
                ready.insert(dependent);
            }
        }
    }
    if order.len() != closure.len() {
        let stuck: Vec<&str> = indegree
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(id, _)| *id)
            .collect();
        return Err(format!("unresolvable ordering among [{}]", stuck.join(", ")));
    }
    Ok(order)
}
