//! Binary scoring functions over generated text.
//!
//! A [`MatcherSpec`] is a small boolean tree (substring and regex leaves,
//! all-of/any-of/not combinators) that compiles into an immutable
//! [`Matcher`]. Matchers decide whether a payload condition holds in a
//! response, a CoT, or either, and drive both attack-success scoring and
//! forge/merge validation. The regex engine runs in linear time, so
//! untrusted generated text cannot trigger pathological backtracking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ReasoningSample;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("invalid regex '{pattern}': {message}")]
    InvalidRegex { pattern: String, message: String },
    #[error("empty pattern in {kind} matcher")]
    EmptyPattern { kind: String },
    #[error("{kind} combinator requires at least one child")]
    MissingChildren { kind: String },
    #[error("'not' combinator requires exactly one child, found {found}")]
    NotArity { found: usize },
}

/// Serializable description of a binary scoring function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatcherSpec {
    /// True iff the pattern occurs verbatim (or case-folded) in the text.
    Substring {
        pattern: String,
        #[serde(default = "default_true")]
        case_sensitive: bool,
    },
    /// True iff the regex matches anywhere in the text.
    Regex {
        pattern: String,
        #[serde(default = "default_true")]
        case_sensitive: bool,
    },
    AllOf { children: Vec<MatcherSpec> },
    AnyOf { children: Vec<MatcherSpec> },
    /// Negation; must have exactly one child.
    Not { children: Vec<MatcherSpec> },
}

fn default_true() -> bool {
    true
}

impl MatcherSpec {
    /// Shorthand for a case-sensitive substring leaf.
    pub fn substring(pattern: &str) -> Self {
        MatcherSpec::Substring {
            pattern: pattern.into(),
            case_sensitive: true,
        }
    }

    /// Shorthand for a case-sensitive regex leaf.
    pub fn regex(pattern: &str) -> Self {
        MatcherSpec::Regex {
            pattern: pattern.into(),
            case_sensitive: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Substring { needle: String, case_sensitive: bool },
    Regex(regex::Regex),
    AllOf(Vec<Node>),
    AnyOf(Vec<Node>),
    Not(Box<Node>),
}

/// Compiled, immutable form of a [`MatcherSpec`]; cheap to evaluate and safe
/// to share across threads.
#[derive(Debug, Clone)]
pub struct Matcher {
    root: Node,
}

/// Compile a spec tree, validating leaf patterns and combinator arity.
pub fn compile_matcher(spec: &MatcherSpec) -> Result<Matcher, ScoringError> {
    Ok(Matcher {
        root: compile_node(spec)?,
    })
}

fn compile_node(spec: &MatcherSpec) -> Result<Node, ScoringError> {
    match spec {
        MatcherSpec::Substring {
            pattern,
            case_sensitive,
        } => {
            if pattern.is_empty() {
                return Err(ScoringError::EmptyPattern {
                    kind: "substring".into(),
                });
            }
            Ok(Node::Substring {
                needle: if *case_sensitive {
                    pattern.clone()
                } else {
                    pattern.to_lowercase()
                },
                case_sensitive: *case_sensitive,
            })
        }
        MatcherSpec::Regex {
            pattern,
            case_sensitive,
        } => {
            if pattern.is_empty() {
                return Err(ScoringError::EmptyPattern {
                    kind: "regex".into(),
                });
            }
            let compiled = regex::RegexBuilder::new(pattern)
                .case_insensitive(!case_sensitive)
                .build()
                .map_err(|e| ScoringError::InvalidRegex {
                    pattern: pattern.clone(),
                    message: e.to_string(),
                })?;
            Ok(Node::Regex(compiled))
        }
        MatcherSpec::AllOf { children } => {
            if children.is_empty() {
                return Err(ScoringError::MissingChildren {
                    kind: "all-of".into(),
                });
            }
            Ok(Node::AllOf(
                children.iter().map(compile_node).collect::<Result<_, _>>()?,
            ))
        }
        MatcherSpec::AnyOf { children } => {
            if children.is_empty() {
                return Err(ScoringError::MissingChildren {
                    kind: "any-of".into(),
                });
            }
            Ok(Node::AnyOf(
                children.iter().map(compile_node).collect::<Result<_, _>>()?,
            ))
        }
        MatcherSpec::Not { children } => {
            if children.len() != 1 {
                return Err(ScoringError::NotArity {
                    found: children.len(),
                });
            }
            Ok(Node::Not(Box::new(compile_node(&children[0])?)))
        }
    }
}

impl Matcher {
    /// Evaluate the matcher on a text. Total and deterministic.
    pub fn matches(&self, text: &str) -> bool {
        eval(&self.root, text)
    }
}

fn eval(node: &Node, text: &str) -> bool {
    match node {
        Node::Substring {
            needle,
            case_sensitive,
        } => {
            if *case_sensitive {
                text.contains(needle.as_str())
            } else {
                text.to_lowercase().contains(needle.as_str())
            }
        }
        Node::Regex(re) => re.is_match(text),
        Node::AllOf(children) => children.iter().all(|c| eval(c, text)),
        Node::AnyOf(children) => children.iter().any(|c| eval(c, text)),
        Node::Not(child) => !eval(child, text),
    }
}

/// Evaluate a matcher as the binary scoring function `f: text -> {0,1}`.
pub fn score(matcher: &Matcher, text: &str) -> u8 {
    matcher.matches(text) as u8
}

/// Which sample fields a scoring decision inspects. Attack-success scoring
/// defaults to the response; trace-level validation asks for the CoT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum FieldPolicy {
    #[default]
    ResponseOnly,
    CotOnly,
    CotOrResponse,
}


/// Score the selected fields of a `(cot, response)` pair; `CotOrResponse`
/// takes the OR of the two field scores.
pub fn score_fields(matcher: &Matcher, cot: &str, response: &str, policy: FieldPolicy) -> bool {
    match policy {
        FieldPolicy::ResponseOnly => matcher.matches(response),
        FieldPolicy::CotOnly => matcher.matches(cot),
        FieldPolicy::CotOrResponse => matcher.matches(cot) || matcher.matches(response),
    }
}

/// Score a corpus sample under a field policy.
pub fn score_sample(matcher: &Matcher, sample: &ReasoningSample, policy: FieldPolicy) -> bool {
    score_fields(matcher, &sample.cot, &sample.response, policy)
}
