//! Feedback integration: per-(agent, tool) preference weights learned from
//! ratings and blended into routing scores by the resolver.
//!
//! The update rule is an exponential moving average, `w' = (1-α)·w +
//! α·rating`, which keeps weights bounded in [0,1] and converges toward the
//! rating stream. Every tool executed in the rated request's plan receives
//! the same update — sequences are personalized, not just the selected tool.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracker::InvocationRecord;

/// Weight assumed for (agent, tool) pairs that have never received feedback.
pub const DEFAULT_WEIGHT: f64 = 0.5;

/// One rating submitted against a previously logged request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub request_id: String,
    /// 1 is fully positive, 0 fully negative.
    pub rating: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    /// Server-assigned UTC milliseconds; 0 until stamped.
    #[serde(default)]
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FeedbackError {
    #[error("request {0:?} does not resolve to a routed invocation")]
    UnknownRequest(String),
    #[error("rating {0} is outside [0,1]")]
    RatingOutOfRange(f64),
}

impl FeedbackError {
    pub fn code(&self) -> &'static str {
        match self {
            FeedbackError::UnknownRequest(_) => "unknown_request",
            FeedbackError::RatingOutOfRange(_) => "rating_out_of_range",
        }
    }
}

/// Learned preference weights, keyed agent → tool → weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTable {
    /// Learning rate in (0,1].
    pub alpha: f64,
    weights: BTreeMap<String, BTreeMap<String, f64>>,
}

impl PreferenceTable {
    pub fn new(alpha: f64) -> Self {
        PreferenceTable {
            alpha,
            weights: BTreeMap::new(),
        }
    }

    /// Stored weight for the pair, else [`DEFAULT_WEIGHT`].
    pub fn get_preference(&self, agent_id: &str, tool_id: &str) -> f64 {
        self.weights
            .get(agent_id)
            .and_then(|tools| tools.get(tool_id))
            .copied()
            .unwrap_or(DEFAULT_WEIGHT)
    }

    /// One EMA step toward `rating`; returns the new weight.
    pub fn apply(&mut self, agent_id: &str, tool_id: &str, rating: f64) -> f64 {
        let current = self.get_preference(agent_id, tool_id);
        let updated = ((1.0 - self.alpha) * current + self.alpha * rating).clamp(0.0, 1.0);
        self.weights
            .entry(agent_id.to_string())
            .or_default()
            .insert(tool_id.to_string(), updated);
        updated
    }

    /// Directly pin a weight (operational/testing seam, not the learning
    /// path). Clamped into [0,1].
    pub fn set_weight(&mut self, agent_id: &str, tool_id: &str, weight: f64) {
        self.weights
            .entry(agent_id.to_string())
            .or_default()
            .insert(tool_id.to_string(), weight.clamp(0.0, 1.0));
    }

    pub fn is_empty(&self) -> bool {
        self.weights.values().all(|tools| tools.is_empty())
    }

    /// Persist as a single JSON document (write-temp-then-rename).
    pub fn save_to(&self, path: &Path) -> io::Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, path)
    }

    pub fn load_from(path: &Path) -> io::Result<PreferenceTable> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Apply one feedback event against the record its request id resolved to
/// (`None` when the tracker found nothing). The selected tool and every
/// tool that appears in the executed plan receive the same EMA update;
/// returns the selected tool's new weight.
pub fn record_feedback(
    table: &mut PreferenceTable,
    event: &FeedbackEvent,
    record: Option<&InvocationRecord>,
) -> Result<f64, FeedbackError> {
    if !(0.0..=1.0).contains(&event.rating) || !event.rating.is_finite() {
        return Err(FeedbackError::RatingOutOfRange(event.rating));
    }
    let record = record.ok_or_else(|| FeedbackError::UnknownRequest(event.request_id.clone()))?;
    let Some(decision) = &record.decision else {
        // A record exists but no tool was ever selected (rejected input,
        // no-match): there is nothing to credit.
        return Err(FeedbackError::UnknownRequest(event.request_id.clone()));
    };

    let mut credited: BTreeSet<&str> = BTreeSet::new();
    credited.insert(decision.selected_tool.as_str());
    for step in &record.steps {
        credited.insert(step.tool_id.as_str());
    }
    let mut selected_weight = table.get_preference(&record.agent_id, &decision.selected_tool);
    for tool_id in credited {
        let updated = table.apply(&record.agent_id, tool_id, event.rating);
        if tool_id == decision.selected_tool {
            selected_weight = updated;
        }
    }
    Ok(selected_weight)
}
