//! Registered policy rules applied to tool inputs and outputs.
//!
//! Rules complement schema conformance: deny patterns over the serialized
//! payload, payload size limits, and required-field checks, each scoped
//! globally, to one tool, or to a tag, and each either rejecting or warning.

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payload::{canonical_string, lookup_path, Payload};
use crate::registry::ToolDescriptor;
use crate::schema::{validate_schema, RuleAction, Verdict, Violation, ViolationCode};

/// Which payload side a rule inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleTarget {
    Input,
    Output,
}

/// What a rule applies to, written as `global`, `tool:<id>`, or `tag:<tag>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleScope {
    Global,
    Tool(String),
    Tag(String),
}

impl RuleScope {
    /// Whether the rule applies to the given tool.
    pub fn matches(&self, tool: &ToolDescriptor) -> bool {
        match self {
            RuleScope::Global => true,
            RuleScope::Tool(id) => tool.tool_id == *id,
            RuleScope::Tag(tag) => tool.tags.iter().any(|t| t == tag),
        }
    }
}

impl fmt::Display for RuleScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleScope::Global => f.write_str("global"),
            RuleScope::Tool(id) => write!(f, "tool:{id}"),
            RuleScope::Tag(tag) => write!(f, "tag:{tag}"),
        }
    }
}

impl FromStr for RuleScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(RuleScope::Global);
        }
        if let Some(id) = s.strip_prefix("tool:") {
            if id.is_empty() {
                return Err("tool scope needs an id".to_string());
            }
            return Ok(RuleScope::Tool(id.to_string()));
        }
        if let Some(tag) = s.strip_prefix("tag:") {
            if tag.is_empty() {
                return Err("tag scope needs a tag".to_string());
            }
            return Ok(RuleScope::Tag(tag.to_string()));
        }
        Err(format!("invalid scope {s:?}, expected global, tool:<id>, or tag:<tag>"))
    }
}

impl Serialize for RuleScope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RuleScope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The constraint a rule enforces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleConstraint {
    /// Regex matched against the canonical serialization of the payload.
    DenyPattern(String),
    /// Upper bound on the canonical serialization size in bytes.
    MaxPayloadBytes(u64),
    /// Slash-delimited path that must resolve inside the payload.
    RequireField(String),
}

/// A registered input or output policy rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRule {
    pub rule_id: String,
    pub target: RuleTarget,
    pub applies_to: RuleScope,
    pub constraint: RuleConstraint,
    pub action: RuleAction,
}

impl ValidationRule {
    /// Structural check run at registration: nonempty id, compiling regex.
    pub fn validate_definition(&self) -> Result<(), RuleDefect> {
        if self.rule_id.trim().is_empty() {
            return Err(RuleDefect {
                rule_id: self.rule_id.clone(),
                reason: "rule_id must be nonempty".to_string(),
            });
        }
        if let RuleConstraint::DenyPattern(pattern) = &self.constraint {
            Regex::new(pattern).map_err(|e| RuleDefect {
                rule_id: self.rule_id.clone(),
                reason: format!("deny_pattern does not compile: {e}"),
            })?;
        }
        Ok(())
    }

    /// Evaluate the rule against one payload; `None` when it passes.
    fn evaluate(&self, payload: &Payload) -> Option<Violation> {
        match &self.constraint {
            RuleConstraint::DenyPattern(pattern) => {
                // The pattern was compiled at registration; a rule that
                // somehow carries a bad pattern matches nothing.
                let regex = Regex::new(pattern).ok()?;
                let serialized = canonical_string(payload);
                if regex.is_match(&serialized) {
                    Some(Violation {
                        path: String::new(),
                        code: ViolationCode::PolicyDeny,
                        message: format!("rule {:?} denies pattern {:?}", self.rule_id, pattern),
                        action: self.action,
                    })
                } else {
                    None
                }
            }
            RuleConstraint::MaxPayloadBytes(limit) => {
                let size = canonical_string(payload).len() as u64;
                if size > *limit {
                    Some(Violation {
                        path: String::new(),
                        code: ViolationCode::PayloadTooLarge,
                        message: format!("rule {:?}: payload is {size} bytes, limit {limit}", self.rule_id),
                        action: self.action,
                    })
                } else {
                    None
                }
            }
            RuleConstraint::RequireField(path) => {
                if lookup_path(payload, path).is_none() {
                    Some(Violation {
                        path: path.clone(),
                        code: ViolationCode::MissingField,
                        message: format!("rule {:?} requires field {path:?}", self.rule_id),
                        action: self.action,
                    })
                } else {
                    None
                }
            }
        }
    }
}

/// A rule definition rejected at registration.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid rule {rule_id:?}: {reason}")]
pub struct RuleDefect {
    pub rule_id: String,
    pub reason: String,
}

/// Apply every rule with the given target and a scope matching the tool.
///
/// Rules are evaluated in the order given, so callers that need
/// deterministic verdicts pass rules sorted by `rule_id`.
pub fn apply_rules(
    payload: &Payload,
    tool: &ToolDescriptor,
    rules: &[ValidationRule],
    target: RuleTarget,
) -> Vec<Violation> {
    rules
        .iter()
        .filter(|rule| rule.target == target && rule.applies_to.matches(tool))
        .filter_map(|rule| rule.evaluate(payload))
        .collect()
}

/// Validate a request payload: the tool's input schema plus matching input rules.
pub fn check_input(payload: &Payload, tool: &ToolDescriptor, rules: &[ValidationRule]) -> Verdict {
    let mut violations = validate_schema(payload, &tool.input_schema).violations;
    violations.extend(apply_rules(payload, tool, rules, RuleTarget::Input));
    Verdict::from_violations(violations)
}

/// Validate a result payload: the tool's output schema plus matching output rules.
pub fn check_output(payload: &Payload, tool: &ToolDescriptor, rules: &[ValidationRule]) -> Verdict {
    let mut violations = validate_schema(payload, &tool.output_schema).violations;
    violations.extend(apply_rules(payload, tool, rules, RuleTarget::Output));
    Verdict::from_violations(violations)
}

/// Apply only the globally scoped input rules — the pre-planning policy
/// gate, used before any tool has been selected so that rejected payloads
/// never reach intent scoring.
pub fn check_global_input(payload: &Payload, rules: &[ValidationRule]) -> Verdict {
    let violations = rules
        .iter()
        .filter(|rule| rule.target == RuleTarget::Input && rule.applies_to == RuleScope::Global)
        .filter_map(|rule| rule.evaluate(payload))
        .collect();
    Verdict::from_violations(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::EndpointSpec;
    use crate::schema::SchemaNode;
    use serde_json::json;

    fn echo_tool() -> ToolDescriptor {
        ToolDescriptor {
            tool_id: "echo".to_string(),
            name: "echo".to_string(),
            description: "returns its input".to_string(),
            tags: vec!["util".to_string()],
            input_schema: SchemaNode::any(),
            output_schema: SchemaNode::any(),
            endpoint: EndpointSpec::builtin_echo(),
            dependencies: vec![],
            fallback: None,
            enabled: true,
            version: 1,
        }
    }

    fn deny_rule(target: RuleTarget, action: RuleAction) -> ValidationRule {
        ValidationRule {
            rule_id: "no-secrets".to_string(),
            target,
            applies_to: RuleScope::Global,
            constraint: RuleConstraint::DenyPattern("(?i)password".to_string()),
            action,
        }
    }

    #[test]
    fn conforming_payload_with_no_rules_is_ok() {
        assert!(check_input(&json!({"m": "hi"}), &echo_tool(), &[]).ok);
    }

    #[test]
    fn deny_pattern_rejects() {
        // Oracle: the regex matches the canonical serialization directly.
        let payload = json!({"note": "my PASSWORD is hunter2"});
        let serialized = canonical_string(&payload);
        assert!(Regex::new("(?i)password").unwrap().is_match(&serialized));

        let verdict = check_input(&payload, &echo_tool(), &[deny_rule(RuleTarget::Input, RuleAction::Reject)]);
        assert!(!verdict.ok);
        assert_eq!(verdict.violations[0].code, ViolationCode::PolicyDeny);
    }

    #[test]
    fn warn_records_but_does_not_reject() {
        let rule = ValidationRule {
            rule_id: "small".to_string(),
            target: RuleTarget::Input,
            applies_to: RuleScope::Global,
            constraint: RuleConstraint::MaxPayloadBytes(16),
            action: RuleAction::Warn,
        };
        let verdict = check_input(&json!({"m": "a very long message indeed"}), &echo_tool(), &[rule]);
        assert!(verdict.ok);
        assert_eq!(verdict.violations.len(), 1);
        assert_eq!(verdict.violations[0].code, ViolationCode::PayloadTooLarge);
        assert_eq!(verdict.violations[0].action, RuleAction::Warn);
    }

    #[test]
    fn output_checks_are_symmetric() {
        let tool = echo_tool();
        assert!(check_output(&json!({"m": "hi"}), &tool, &[]).ok);

        let mut strict = tool.clone();
        strict.output_schema = SchemaNode::object([("result", SchemaNode::any())], ["result"]);
        assert!(!check_output(&json!({}), &strict, &[]).ok);

        let verdict = check_output(
            &json!({"leak": "password123"}),
            &tool,
            &[deny_rule(RuleTarget::Output, RuleAction::Reject)],
        );
        assert!(!verdict.ok);
        assert_eq!(verdict.violations[0].code, ViolationCode::PolicyDeny);
    }

    #[test]
    fn scope_matching() {
        let tool = echo_tool();
        let mut rule = deny_rule(RuleTarget::Input, RuleAction::Reject);

        rule.applies_to = RuleScope::Tool("echo".to_string());
        assert!(rule.applies_to.matches(&tool));
        rule.applies_to = RuleScope::Tool("other".to_string());
        assert!(!rule.applies_to.matches(&tool));
        rule.applies_to = RuleScope::Tag("util".to_string());
        assert!(rule.applies_to.matches(&tool));
        rule.applies_to = RuleScope::Tag("math".to_string());
        assert!(!rule.applies_to.matches(&tool));
    }

    #[test]
    fn input_rules_do_not_fire_on_output() {
        let verdict = check_output(
            &json!({"x": "password"}),
            &echo_tool(),
            &[deny_rule(RuleTarget::Input, RuleAction::Reject)],
        );
        assert!(verdict.ok);
    }

    #[test]
    fn require_field_uses_slash_paths() {
        let rule = ValidationRule {
            rule_id: "needs-amount".to_string(),
            target: RuleTarget::Input,
            applies_to: RuleScope::Global,
            constraint: RuleConstraint::RequireField("/amount".to_string()),
            action: RuleAction::Reject,
        };
        assert!(check_input(&json!({"amount": 5}), &echo_tool(), &[rule.clone()]).ok);
        let verdict = check_input(&json!({}), &echo_tool(), &[rule]);
        assert!(!verdict.ok);
        assert_eq!(verdict.violations[0].code, ViolationCode::MissingField);
        assert_eq!(verdict.violations[0].path, "/amount");
    }

    #[test]
    fn scope_round_trips_through_text() {
        for scope in ["global", "tool:fx_rates", "tag:math"] {
            let parsed: RuleScope = scope.parse().unwrap();
            assert_eq!(parsed.to_string(), scope);
        }
        assert!("tool:".parse::<RuleScope>().is_err());
        assert!("everything".parse::<RuleScope>().is_err());
    }

    #[test]
    fn bad_regex_is_rejected_at_definition_time() {
        let rule = ValidationRule {
            rule_id: "broken".to_string(),
            target: RuleTarget::Input,
            applies_to: RuleScope::Global,
            constraint: RuleConstraint::DenyPattern("(".to_string()),
            action: RuleAction::Reject,
        };
        assert!(rule.validate_definition().is_err());
        assert!(deny_rule(RuleTarget::Input, RuleAction::Reject).validate_definition().is_ok());
    }

    #[test]
    fn global_gate_ignores_scoped_and_output_rules() {
        let global = deny_rule(RuleTarget::Input, RuleAction::Reject);
        let mut tool_scoped = deny_rule(RuleTarget::Input, RuleAction::Reject);
        tool_scoped.rule_id = "scoped".to_string();
        tool_scoped.applies_to = RuleScope::Tool("echo".to_string());
        let mut output_rule = deny_rule(RuleTarget::Output, RuleAction::Reject);
        output_rule.rule_id = "out".to_string();

        let payload = json!({"note": "password inside"});
        let all = [global.clone(), tool_scoped, output_rule];
        let verdict = check_global_input(&payload, &all);
        assert!(!verdict.ok);
        assert_eq!(verdict.violations.len(), 1, "only the global input rule fires");

        assert!(check_global_input(&json!({"note": "clean"}), &all).ok);
    }
}
