//! Schema conformance checking for tool inputs and outputs.
//!
//! The schema language is a closed subset: `object`, `string`, `number`,
//! `integer`, `boolean`, `array`, and `any`, with `required`, `enum`,
//! `minimum`/`maximum`, `max_length`, and `items` constraints. It is small
//! enough to evaluate exhaustively and expressive enough for tool I/O.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::payload::{child_path, Payload};

/// The node kinds of the schema subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Object,
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Any,
}

impl fmt::Display for SchemaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SchemaKind::Object => "object",
            SchemaKind::String => "string",
            SchemaKind::Number => "number",
            SchemaKind::Integer => "integer",
            SchemaKind::Boolean => "boolean",
            SchemaKind::Array => "array",
            SchemaKind::Any => "any",
        };
        f.write_str(name)
    }
}

/// One node of a tool input or output schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaNode {
    pub kind: SchemaKind,
    /// Named child schemas; object kind only.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, SchemaNode>,
    /// Property names that must be present; object kind only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required: Vec<String>,
    /// Element schema; array kind only. Absent means unconstrained elements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<SchemaNode>>,
    /// Allowed literal values; scalar kinds only.
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
    /// Inclusive lower bound; number and integer kinds only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimum: Option<f64>,
    /// Inclusive upper bound; number and integer kinds only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maximum: Option<f64>,
    /// Maximum length in Unicode scalar values; string kind only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<u64>,
}

impl SchemaNode {
    fn bare(kind: SchemaKind) -> Self {
        SchemaNode {
            kind,
            properties: BTreeMap::new(),
            required: Vec::new(),
            items: None,
            enum_values: None,
            minimum: None,
            maximum: None,
            max_length: None,
        }
    }

    /// A schema that accepts every payload.
    pub fn any() -> Self {
        Self::bare(SchemaKind::Any)
    }

    pub fn string() -> Self {
        Self::bare(SchemaKind::String)
    }

    pub fn number() -> Self {
        Self::bare(SchemaKind::Number)
    }

    pub fn integer() -> Self {
        Self::bare(SchemaKind::Integer)
    }

    pub fn boolean() -> Self {
        Self::bare(SchemaKind::Boolean)
    }

    pub fn array(items: SchemaNode) -> Self {
        let mut node = Self::bare(SchemaKind::Array);
        node.items = Some(Box::new(items));
        node
    }

    pub fn object<I, R>(properties: I, required: R) -> Self
    where
        I: IntoIterator<Item = (&'static str, SchemaNode)>,
        R: IntoIterator<Item = &'static str>,
    {
        let mut node = Self::bare(SchemaKind::Object);
        node.properties = properties
            .into_iter()
            .map(|(name, child)| (name.to_string(), child))
            .collect();
        node.required = required.into_iter().map(str::to_string).collect();
        node
    }

    pub fn with_enum(mut self, values: Vec<Value>) -> Self {
        self.enum_values = Some(values);
        self
    }

    pub fn with_range(mut self, minimum: Option<f64>, maximum: Option<f64>) -> Self {
        self.minimum = minimum;
        self.maximum = maximum;
        self
    }

    pub fn with_max_length(mut self, max_length: u64) -> Self {
        self.max_length = Some(max_length);
        self
    }

    /// Check that the node uses only the constraints its kind allows.
    ///
    /// `required` must be a subset of `properties`, bounds must be ordered,
    /// and `any` carries no other constraints.
    pub fn validate_definition(&self) -> Result<(), SchemaDefect> {
        self.validate_definition_at("")
    }

    fn validate_definition_at(&self, path: &str) -> Result<(), SchemaDefect> {
        let defect = |reason: String| SchemaDefect {
            path: path.to_string(),
            reason,
        };
        let is_scalar = matches!(
            self.kind,
            SchemaKind::String | SchemaKind::Number | SchemaKind::Integer | SchemaKind::Boolean
        );
        if self.kind != SchemaKind::Object && (!self.properties.is_empty() || !self.required.is_empty()) {
            return Err(defect(format!(
                "properties/required are only valid for object, not {}",
                self.kind
            )));
        }
        if self.kind != SchemaKind::Array && self.items.is_some() {
            return Err(defect(format!("items is only valid for array, not {}", self.kind)));
        }
        if !is_scalar && self.enum_values.is_some() {
            return Err(defect(format!("enum is only valid for scalar kinds, not {}", self.kind)));
        }
        if !matches!(self.kind, SchemaKind::Number | SchemaKind::Integer)
            && (self.minimum.is_some() || self.maximum.is_some())
        {
            return Err(defect(format!(
                "minimum/maximum are only valid for number and integer, not {}",
                self.kind
            )));
        }
        if self.kind != SchemaKind::String && self.max_length.is_some() {
            return Err(defect(format!("max_length is only valid for string, not {}", self.kind)));
        }
        if let (Some(min), Some(max)) = (self.minimum, self.maximum) {
            if min > max {
                return Err(defect(format!("minimum {min} exceeds maximum {max}")));
            }
        }
        for name in &self.required {
            if !self.properties.contains_key(name) {
                return Err(defect(format!("required name {name:?} has no property schema")));
            }
        }
        for (name, child) in &self.properties {
            child.validate_definition_at(&child_path(path, name))?;
        }
        if let Some(items) = &self.items {
            items.validate_definition_at(&child_path(path, "items"))?;
        }
        Ok(())
    }
}

/// A schema definition that violates the subset's structural rules.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("malformed schema at '{path}': {reason}")]
pub struct SchemaDefect {
    pub path: String,
    pub reason: String,
}

/// Violation codes; part of the wire contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    TypeMismatch,
    MissingRequired,
    EnumMismatch,
    OutOfRange,
    TooLong,
    PolicyDeny,
    PayloadTooLarge,
    MissingField,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationCode::TypeMismatch => "type_mismatch",
            ViolationCode::MissingRequired => "missing_required",
            ViolationCode::EnumMismatch => "enum_mismatch",
            ViolationCode::OutOfRange => "out_of_range",
            ViolationCode::TooLong => "too_long",
            ViolationCode::PolicyDeny => "policy_deny",
            ViolationCode::PayloadTooLarge => "payload_too_large",
            ViolationCode::MissingField => "missing_field",
        };
        f.write_str(name)
    }
}

/// Severity of a violation: reject fails the verdict, warn only records it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Reject,
    Warn,
}

/// One finding produced by schema or rule evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Slash-delimited location inside the payload, empty for the whole document.
    pub path: String,
    pub code: ViolationCode,
    pub message: String,
    pub action: RuleAction,
}

impl Violation {
    pub fn reject(path: impl Into<String>, code: ViolationCode, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            code,
            message: message.into(),
            action: RuleAction::Reject,
        }
    }
}

/// Outcome of validating one payload. `ok` holds iff no violation rejects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        let ok = violations.iter().all(|v| v.action != RuleAction::Reject);
        Verdict { ok, violations }
    }

    pub fn passing() -> Self {
        Verdict {
            ok: true,
            violations: Vec::new(),
        }
    }

    /// Combine several verdicts, preserving violation order.
    pub fn merged(parts: impl IntoIterator<Item = Verdict>) -> Self {
        let violations = parts.into_iter().flat_map(|v| v.violations).collect();
        Verdict::from_violations(violations)
    }

    /// Compact description of the rejecting violations, for error messages.
    pub fn reject_summary(&self) -> String {
        let reasons: Vec<String> = self
            .violations
            .iter()
            .filter(|v| v.action == RuleAction::Reject)
            .map(|v| format!("{} at '{}': {}", v.code, v.path, v.message))
            .collect();
        reasons.join("; ")
    }
}

/// Evaluate a payload against a schema.
///
/// Evaluation is total: a mismatch at one node never aborts the walk, and
/// violations come out in document order (required names in schema order,
/// properties and array elements in key/index order). Every violation
/// carries a slash-delimited path such as `/amount`.
pub fn validate_schema(value: &Payload, schema: &SchemaNode) -> Verdict {
    let mut violations = Vec::new();
    walk(value, schema, "", &mut violations);
    Verdict::from_violations(violations)
}

fn walk(value: &Payload, schema: &SchemaNode, path: &str, out: &mut Vec<Violation>) {
    match schema.kind {
        SchemaKind::Any => {}
        SchemaKind::Object => {
            let Some(map) = value.as_object() else {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            };
            for name in &schema.required {
                if !map.contains_key(name) {
                    out.push(Violation::reject(
                        child_path(path, name),
                        ViolationCode::MissingRequired,
                        format!("required property {name:?} is missing"),
                    ));
                }
            }
            for (name, child) in &schema.properties {
                if let Some(child_value) = map.get(name) {
                    walk(child_value, child, &child_path(path, name), out);
                }
            }
        }
        SchemaKind::Array => {
            let Some(items) = value.as_array() else {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            };
            if let Some(item_schema) = &schema.items {
                for (index, item) in items.iter().enumerate() {
                    walk(item, item_schema, &child_path(path, &index.to_string()), out);
                }
            }
        }
        SchemaKind::String => {
            let Some(text) = value.as_str() else {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            };
            check_enum(value, schema, path, out);
            if let Some(max) = schema.max_length {
                let len = text.chars().count() as u64;
                if len > max {
                    out.push(Violation::reject(
                        path,
                        ViolationCode::TooLong,
                        format!("string length {len} exceeds max_length {max}"),
                    ));
                }
            }
        }
        SchemaKind::Number => {
            let Some(n) = value.as_f64() else {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            };
            check_enum(value, schema, path, out);
            check_range(n, schema, path, out);
        }
        SchemaKind::Integer => {
            if !(value.is_i64() || value.is_u64()) {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            }
            check_enum(value, schema, path, out);
            check_range(value.as_f64().unwrap_or_default(), schema, path, out);
        }
        SchemaKind::Boolean => {
            if !value.is_boolean() {
                out.push(type_mismatch(path, schema.kind, value));
                return;
            }
            check_enum(value, schema, path, out);
        }
    }
}

fn type_mismatch(path: &str, expected: SchemaKind, value: &Payload) -> Violation {
    Violation::reject(
        path,
        ViolationCode::TypeMismatch,
        format!("expected {expected}, found {}", json_type_name(value)),
    )
}

fn check_enum(value: &Payload, schema: &SchemaNode, path: &str, out: &mut Vec<Violation>) {
    if let Some(allowed) = &schema.enum_values {
        if !allowed.contains(value) {
            out.push(Violation::reject(
                path,
                ViolationCode::EnumMismatch,
                format!("value {value} is not one of the allowed literals"),
            ));
        }
    }
}

fn check_range(n: f64, schema: &SchemaNode, path: &str, out: &mut Vec<Violation>) {
    if let Some(min) = schema.minimum {
        if n < min {
            out.push(Violation::reject(
                path,
                ViolationCode::OutOfRange,
                format!("{n} is below minimum {min}"),
            ));
            return;
        }
    }
    if let Some(max) = schema.maximum {
        if n > max {
            out.push(Violation::reject(
                path,
                ViolationCode::OutOfRange,
                format!("{n} is above maximum {max}"),
            ));
        }
    }
}

fn json_type_name(value: &Payload) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn amount_schema() -> SchemaNode {
        SchemaNode::object([("amount", SchemaNode::number())], ["amount"])
    }

    #[test]
    fn string_where_number_expected_is_one_type_mismatch() {
        // Hand evaluation: /amount present but wrong type, nothing else checked.
        let verdict = validate_schema(&json!({"amount": "5"}), &amount_schema());
        assert!(!verdict.ok);
        assert_eq!(verdict.violations.len(), 1);
        assert_eq!(verdict.violations[0].path, "/amount");
        assert_eq!(verdict.violations[0].code, ViolationCode::TypeMismatch);
    }

    #[test]
    fn any_accepts_everything() {
        for value in [json!(null), json!(42), json!("x"), json!([1, 2]), json!({"k": []})] {
            assert!(validate_schema(&value, &SchemaNode::any()).ok);
        }
    }

    #[test]
    fn missing_required_field() {
        let verdict = validate_schema(&json!({}), &amount_schema());
        assert!(!verdict.ok);
        assert_eq!(verdict.violations.len(), 1);
        assert_eq!(verdict.violations[0].path, "/amount");
        assert_eq!(verdict.violations[0].code, ViolationCode::MissingRequired);
    }

    #[test]
    fn evaluation_is_total_across_siblings() {
        let schema = SchemaNode::object(
            [("a", SchemaNode::number()), ("b", SchemaNode::string())],
            ["a", "b"],
        );
        let verdict = validate_schema(&json!({"a": "no", "b": 7}), &schema);
        assert_eq!(verdict.violations.len(), 2);
        assert_eq!(verdict.violations[0].path, "/a");
        assert_eq!(verdict.violations[1].path, "/b");
    }

    #[test]
    fn integer_rejects_fractions_and_accepts_whole_json_integers() {
        let schema = SchemaNode::integer();
        assert!(validate_schema(&json!(5), &schema).ok);
        assert!(!validate_schema(&json!(5.5), &schema).ok);
        // 5.0 parses as a float literal, not a JSON integer.
        let float_five: Value = serde_json::from_str("5.0").unwrap();
        assert!(!validate_schema(&float_five, &schema).ok);
    }

    #[test]
    fn range_and_length_and_enum() {
        let schema = SchemaNode::number().with_range(Some(0.0), Some(10.0));
        assert!(validate_schema(&json!(10), &schema).ok);
        assert_eq!(
            validate_schema(&json!(11), &schema).violations[0].code,
            ViolationCode::OutOfRange
        );

        let schema = SchemaNode::string().with_max_length(3);
        assert!(validate_schema(&json!("abc"), &schema).ok);
        assert_eq!(
            validate_schema(&json!("abcd"), &schema).violations[0].code,
            ViolationCode::TooLong
        );

        let schema = SchemaNode::string().with_enum(vec![json!("usd"), json!("eur")]);
        assert!(validate_schema(&json!("usd"), &schema).ok);
        assert_eq!(
            validate_schema(&json!("gbp"), &schema).violations[0].code,
            ViolationCode::EnumMismatch
        );
    }

    #[test]
    fn array_items_are_checked_by_index() {
        let schema = SchemaNode::array(SchemaNode::integer());
        let verdict = validate_schema(&json!([1, "x", 3]), &schema);
        assert_eq!(verdict.violations.len(), 1);
        assert_eq!(verdict.violations[0].path, "/1");
    }

    #[test]
    fn definition_rejects_misplaced_constraints() {
        let mut node = SchemaNode::any();
        node.max_length = Some(4);
        assert!(node.validate_definition().is_err());

        let mut node = SchemaNode::number();
        node.minimum = Some(5.0);
        node.maximum = Some(1.0);
        assert!(node.validate_definition().is_err());

        let mut node = SchemaNode::object([("a", SchemaNode::any())], []);
        node.required = vec!["b".to_string()];
        assert!(node.validate_definition().is_err());

        assert!(amount_schema().validate_definition().is_ok());
    }

    #[test]
    fn verdict_ok_iff_no_reject() {
        let warn = Violation {
            path: String::new(),
            code: ViolationCode::PayloadTooLarge,
            message: "big".into(),
            action: RuleAction::Warn,
        };
        assert!(Verdict::from_violations(vec![warn.clone()]).ok);
        let mut reject = warn;
        reject.action = RuleAction::Reject;
        assert!(!Verdict::from_violations(vec![reject]).ok);
    }
}
