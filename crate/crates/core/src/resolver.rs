//! Intent resolution: turning an agent's free-text intent into scored,
//! ranked candidate tools.
//!
//! The default scorer is deliberately model-free: token-set Jaccard
//! similarity over a tool's name, description, and tags, blended with the
//! agent's learned preference weight as a convex combination. The scoring
//! function sits behind [`IntentScorer`] so an embedding-based scorer can be
//! swapped in without touching routing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::feedback::PreferenceTable;
use crate::payload::Payload;
use crate::registry::ToolDescriptor;

/// An agent's ask: who is asking, what they want, and ambient metadata.
/// Context is carried through to the audit log but does not contribute to
/// the default score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentQuery {
    pub agent_id: String,
    pub intent: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, Payload>,
}

/// One tool's score against a query, with the arithmetic shown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub tool_id: String,
    /// Token-set similarity between intent and tool metadata, in [0,1].
    pub lexical: f64,
    /// The agent's learned preference weight for this tool, in [0,1].
    pub preference: f64,
    /// `w_lex * lexical + w_pref * preference`, in [0,1].
    pub combined: f64,
    pub rationale: String,
}

/// Scoring weights; a convex combination (the weights sum to 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolverConfig {
    pub w_lex: f64,
    pub w_pref: f64,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        ResolverConfig {
            w_lex: 0.7,
            w_pref: 0.3,
        }
    }
}

impl ResolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [("resolver.w_lex", self.w_lex), ("resolver.w_pref", self.w_pref)] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(format!("{name} must lie in [0,1], got {value}"));
            }
        }
        if (self.w_lex + self.w_pref - 1.0).abs() > 1e-9 {
            return Err(format!(
                "resolver weights must sum to 1, got {} + {}",
                self.w_lex, self.w_pref
            ));
        }
        Ok(())
    }
}

/// Lowercase, split on every non-alphanumeric character, drop empty
/// fragments, and collapse duplicates. No stemming, no stopwords.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|fragment| !fragment.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard coefficient |a ∩ b| / |a ∪ b|; 0 when both sets are empty.
pub fn lexical_similarity(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let intersection = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

/// The replaceable scoring seam. Implementations must keep every score
/// field within [0,1] and stay deterministic for identical inputs; the
/// lexical scorer below is the normative default.
pub trait IntentScorer: Send + Sync {
    fn score_tool(&self, query: &IntentQuery, tool: &ToolDescriptor, pref: f64) -> ScoredCandidate;
}

/// Default scorer: Jaccard over tokenized tool metadata, blended with the
/// preference weight.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer {
    pub config: ResolverConfig,
}

impl LexicalScorer {
    pub fn new(config: ResolverConfig) -> Self {
        LexicalScorer { config }
    }
}

impl IntentScorer for LexicalScorer {
    fn score_tool(&self, query: &IntentQuery, tool: &ToolDescriptor, pref: f64) -> ScoredCandidate {
        let intent_tokens = tokenize(&query.intent);
        let metadata = format!("{} {} {}", tool.name, tool.description, tool.tags.join(" "));
        let tool_tokens = tokenize(&metadata);
        let lexical = lexical_similarity(&intent_tokens, &tool_tokens);
        let combined = self.config.w_lex * lexical + self.config.w_pref * pref;
        let rationale = format!(
            "lexical {lexical:.4} * w_lex {:.2} + preference {pref:.4} * w_pref {:.2} = {combined:.4}",
            self.config.w_lex, self.config.w_pref
        );
        ScoredCandidate {
            tool_id: tool.tool_id.clone(),
            lexical,
            preference: pref,
            combined,
            rationale,
        }
    }
}

/// Score every candidate and rank by combined score descending, ties broken
/// by ascending tool_id. Candidates are expected to be policy-filtered
/// already; each appears exactly once in the result.
pub fn resolve(
    scorer: &dyn IntentScorer,
    query: &IntentQuery,
    candidates: &[ToolDescriptor],
    prefs: &PreferenceTable,
) -> Vec<ScoredCandidate> {
    let mut scored: Vec<ScoredCandidate> = candidates
        .iter()
        .map(|tool| {
            let pref = prefs.get_preference(&query.agent_id, &tool.tool_id);
            scorer.score_tool(query, tool, pref)
        })
        .collect();
    scored.sort_by(|x, y| {
        y.combined
            .total_cmp(&x.combined)
            .then_with(|| x.tool_id.cmp(&y.tool_id))
    });
    scored
}
