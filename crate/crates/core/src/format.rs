//! Strict parser for the two-block `<think>…</think><answer>…</answer>`
//! output grammar, and the format and accuracy rewards derived from it.
//!
//! Accepted shape, with tags and verdicts case-sensitive:
//!
//! ```text
//! ws* <think> TEXT </think> ws* <answer> ws* (REAL|FAKE) ws* </answer> ws*
//! ```
//!
//! where `TEXT` is anything not containing `</think>`. Failures are data,
//! never panics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::Label;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub think_text: String,
    pub answer: Label,
}

impl StructuredOutput {
    /// Canonical rendering with no whitespace between blocks.
    pub fn render(&self) -> String {
        format!(
            "{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}",
            self.think_text,
            self.answer.as_str()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    MissingThink,
    MissingAnswer,
    BadVerdict,
    TrailingContent,
    DuplicatedBlock,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::MissingThink => "missing-think",
            FailureReason::MissingAnswer => "missing-answer",
            FailureReason::BadVerdict => "bad-verdict",
            FailureReason::TrailingContent => "trailing-content",
            FailureReason::DuplicatedBlock => "duplicated-block",
        })
    }
}

/// Outcome of [`parse_output`]. Exactly one of `parsed` and
/// `failure_reason` is present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    parsed: Option<StructuredOutput>,
    failure_reason: Option<FailureReason>,
}

impl FormatVerdict {
    fn ok(think_text: &str, answer: Label) -> Self {
        Self {
            parsed: Some(StructuredOutput {
                think_text: think_text.to_string(),
                answer,
            }),
            failure_reason: None,
        }
    }

    fn fail(reason: FailureReason) -> Self {
        Self {
            parsed: None,
            failure_reason: Some(reason),
        }
    }

    pub fn well_formed(&self) -> bool {
        self.parsed.is_some()
    }

    pub fn parsed(&self) -> Option<&StructuredOutput> {
        self.parsed.as_ref()
    }

    pub fn failure_reason(&self) -> Option<FailureReason> {
        self.failure_reason
    }

    pub fn answer(&self) -> Option<Label> {
        self.parsed.as_ref().map(|p| p.answer)
    }
}

pub fn parse_output(raw: &str) -> FormatVerdict {
    use FailureReason::*;

    let rest = raw.trim_start();
    let Some(rest) = rest.strip_prefix(THINK_OPEN) else {
        return FormatVerdict::fail(MissingThink);
    };
    let Some(close) = rest.find(THINK_CLOSE) else {
        return FormatVerdict::fail(MissingThink);
    };
    let think_text = &rest[..close];
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();

    if rest.starts_with(THINK_OPEN) {
        return FormatVerdict::fail(DuplicatedBlock);
    }
    let Some(rest) = rest.strip_prefix(ANSWER_OPEN) else {
        return FormatVerdict::fail(MissingAnswer);
    };
    let Some(close) = rest.find(ANSWER_CLOSE) else {
        return FormatVerdict::fail(MissingAnswer);
    };
    let answer = match rest[..close].trim() {
        "REAL" => Label::Real,
        "FAKE" => Label::Fake,
        _ => return FormatVerdict::fail(BadVerdict),
    };
    let tail = rest[close + ANSWER_CLOSE.len()..].trim();
    if tail.is_empty() {
        FormatVerdict::ok(think_text, answer)
    } else if tail.starts_with(THINK_OPEN) || tail.starts_with(ANSWER_OPEN) {
        FormatVerdict::fail(DuplicatedBlock)
    } else {
        FormatVerdict::fail(TrailingContent)
    }
}

/// Parses arbitrary bytes; invalid UTF-8 is replaced, never rejected early.
pub fn parse_output_bytes(raw: &[u8]) -> FormatVerdict {
    parse_output(&String::from_utf8_lossy(raw))
}

pub fn format_reward(raw: &str) -> f64 {
    if parse_output(raw).well_formed() {
        1.0
    } else {
        0.0
    }
}

/// 1 only for a well-formed output whose verdict matches `gold`; malformed
/// outputs never earn accuracy reward.
pub fn accuracy_reward(verdict: &FormatVerdict, gold: Label) -> f64 {
    match verdict.answer() {
        Some(answer) if answer == gold => 1.0,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn well_formed_fake() {
        let v = parse_output("<think>edges look smeared</think><answer>FAKE</answer>");
        assert!(v.well_formed());
        assert_eq!(v.answer(), Some(Label::Fake));
        assert_eq!(v.parsed().unwrap().think_text, "edges look smeared");
        assert_eq!(
            format_reward("<think>edges look smeared</think><answer>FAKE</answer>"),
            1.0
        );
    }

    #[test]
    fn missing_think() {
        let v = parse_output("<answer>REAL</answer>");
        assert_eq!(v.failure_reason(), Some(FailureReason::MissingThink));
        assert!(v.parsed().is_none());
    }

    #[test]
    fn verdict_is_case_sensitive() {
        let v = parse_output("<think>a</think><answer>real</answer>");
        assert_eq!(v.failure_reason(), Some(FailureReason::BadVerdict));
    }

    #[test]
    fn empty_and_trailing() {
        assert_eq!(format_reward(""), 0.0);
        let v = parse_output("<think>a</think><answer>FAKE</answer>extra");
        assert_eq!(v.failure_reason(), Some(FailureReason::TrailingContent));
        assert_eq!(format_reward("<think>a</think><answer>FAKE</answer>extra"), 0.0);
    }

    #[test]
    fn whitespace_tolerance() {
        let v = parse_output("  \n<think></think>\n <answer> REAL\t</answer>\n");
        assert_eq!(v.answer(), Some(Label::Real));
        assert_eq!(v.parsed().unwrap().think_text, "");
    }

    #[test]
    fn duplicated_blocks() {
        let v = parse_output("<think>a</think><think>b</think><answer>REAL</answer>");
        assert_eq!(v.failure_reason(), Some(FailureReason::DuplicatedBlock));
        let v = parse_output("<think>a</think><answer>REAL</answer><answer>FAKE</answer>");
        assert_eq!(v.failure_reason(), Some(FailureReason::DuplicatedBlock));
    }

    #[test]
    fn accuracy_reward_cases() {
        let fake = parse_output("<think>x</think><answer>FAKE</answer>");
        assert_eq!(accuracy_reward(&fake, Label::Fake), 1.0);
        assert_eq!(accuracy_reward(&fake, Label::Real), 0.0);
        let bad = parse_output("<think>x</think>");
        assert_eq!(accuracy_reward(&bad, Label::Fake), 0.0);
        assert_eq!(accuracy_reward(&bad, Label::Real), 0.0);
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(think in "[a-zA-Z0-9 <>/.,]{0,40}", fake in any::<bool>()) {
            prop_assume!(!think.contains(THINK_CLOSE));
            let out = StructuredOutput {
                think_text: think,
                answer: if fake { Label::Fake } else { Label::Real },
            };
            let v = parse_output(&out.render());
            prop_assert_eq!(v.parsed(), Some(&out));
        }

        #[test]
        fn total_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let v = parse_output_bytes(&bytes);
            prop_assert_eq!(v.well_formed(), v.failure_reason().is_none());
            let raw = String::from_utf8_lossy(&bytes);
            prop_assert!(accuracy_reward(&v, Label::Real) <= format_reward(&raw));
            prop_assert!(accuracy_reward(&v, Label::Fake) <= format_reward(&raw));
        }
    }
}
