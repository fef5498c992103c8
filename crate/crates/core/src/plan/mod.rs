//! Instruction plans: the JSON dialect, its grammar, a rule-based
//! instruction parser, few-shot prompt assembly and a remote model client.

mod grammar;
mod llm;
mod prompt;
mod rules;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::Location;

pub use grammar::{tokenize, ParseTree, PlanGrammar, Rule, Symbol, Terminal, Token, TokenKind, VocabClass};
pub use llm::{llm_request, plan_from_completion, LlmConfig, LlmError};
pub use prompt::{build_prompt, PromptBundle, PromptExample};
pub use rules::rule_parse;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanErrorKind {
    Lexical,
    Structural,
    Vocabulary,
    /// Grammatical, but not one of the two supported action patterns.
    Pattern,
}

impl fmt::Display for PlanErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanErrorKind::Lexical => "lexical error",
            PlanErrorKind::Structural => "structural error",
            PlanErrorKind::Vocabulary => "vocabulary error",
            PlanErrorKind::Pattern => "pattern error",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanError {
    pub kind: PlanErrorKind,
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub offset: usize,
    /// Terminals that would have been accepted at the error position.
    pub expected: Vec<String>,
    pub message: String,
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}: {}", self.line, self.column, self.kind, self.message)
    }
}

impl std::error::Error for PlanError {}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Action {
    Pick { object: String, location: Location },
    Place { location: Location },
    Handover,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Pick { object, location } => write!(f, "pick_from_{location}({object})"),
            Action::Place { location } => write!(f, "place_at_{location}"),
            Action::Handover => f.write_str("handover"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Pick, then place at a location.
    PickPlace,
    /// Pick, then hand over to a person.
    PickHandover,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub chain_of_thought: String,
    pub actions: Vec<Action>,
}

impl Plan {
    pub fn pick_place(object: &str, from: Location, to: Location, chain_of_thought: &str) -> Plan {
        Plan {
            chain_of_thought: chain_of_thought.to_string(),
            actions: vec![
                Action::Pick {
                    object: object.to_string(),
                    location: from,
                },
                Action::Place { location: to },
            ],
        }
    }

    pub fn pick_handover(object: &str, from: Location, chain_of_thought: &str) -> Plan {
        Plan {
            chain_of_thought: chain_of_thought.to_string(),
            actions: vec![
                Action::Pick {
                    object: object.to_string(),
                    location: from,
                },
                Action::Handover,
            ],
        }
    }

    pub fn pattern(&self) -> Option<Pattern> {
        match self.actions.as_slice() {
            [Action::Pick { .. }, Action::Place { .. }] => Some(Pattern::PickPlace),
            [Action::Pick { .. }, Action::Handover] => Some(Pattern::PickHandover),
            _ => None,
        }
    }

    /// Pattern and vocabulary invariants.
    pub fn check(&self, vocab: &Vocabulary) -> Result<(), String> {
        if self.pattern().is_none() {
            return Err(format!(
                "actions [{}] are neither pick+place nor pick+handover",
                self.actions.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ")
            ));
        }
        for a in &self.actions {
            if let Action::Pick { object, .. } = a {
                if !vocab.is_object(object) {
                    return Err(format!("unknown object '{object}'"));
                }
            }
        }
        Ok(())
    }

    /// Canonical compact serialization.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// Object labels, verb classes and synonym tables for instruction parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    /// Object label → synonyms (the label itself always matches).
    pub objects: BTreeMap<String, Vec<String>>,
    pub locations: BTreeMap<Location, Vec<String>>,
    pub pick_verbs: Vec<String>,
    pub place_verbs: Vec<String>,
    pub deliver_verbs: Vec<String>,
    pub persons: Vec<String>,
    /// Words introducing the source location ("from", "off", ...).
    pub source_markers: Vec<String>,
}

const DEFAULT_VOCABULARY: &str = include_str!("../../data/vocabulary.json");

impl Vocabulary {
    pub fn default_vocabulary() -> Vocabulary {
        Self::from_json(DEFAULT_VOCABULARY).expect("bundled vocabulary is valid")
    }

    pub fn from_json(text: &str) -> Result<Vocabulary, String> {
        let v: Vocabulary = serde_json::from_str(text).map_err(|e| e.to_string())?;
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Vocabulary, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.objects.is_empty() {
            return Err("vocabulary has no objects".into());
        }
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        let mut claim = |word: &str, class: String| -> Result<(), String> {
            if word.is_empty() || word.chars().any(|c| !c.is_alphabetic()) || word.to_lowercase() != word {
                return Err(format!("'{word}' ({class}) must be a single lowercase word"));
            }
            match seen.insert(word.to_string(), class.clone()) {
                Some(prev) if prev != class => Err(format!("'{word}' is listed as both {prev} and {class}")),
                _ => Ok(()),
            }
        };
        for (label, syns) in &self.objects {
            for w in std::iter::once(label).chain(syns) {
                claim(w, format!("object {label}"))?;
            }
        }
        for (loc, syns) in &self.locations {
            for w in std::iter::once(&loc.as_str().to_string()).chain(syns) {
                claim(w, format!("location {loc}"))?;
            }
        }
        let classes = [
            (&self.pick_verbs, "pick verb"),
            (&self.place_verbs, "place verb"),
            (&self.deliver_verbs, "deliver verb"),
            (&self.persons, "person"),
            (&self.source_markers, "source marker"),
        ];
        for (words, class) in classes {
            for w in words {
                claim(w, class.to_string())?;
            }
        }
        Ok(())
    }

    pub fn is_object(&self, label: &str) -> bool {
        self.objects.contains_key(label)
    }

    pub fn object_labels(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }
}

/// Checks `text` against the grammar and the pattern rule.
pub fn validate_plan_text(text: &str, vocab: &Vocabulary) -> Result<ParseTree, PlanError> {
    let tree = PlanGrammar::new().parse(text, vocab)?;
    let plan = plan_from_tree(&tree);
    if let Err(message) = plan.check(vocab) {
        let at = tree.find("actions")[0].tokens()[0].clone();
        return Err(PlanError {
            kind: PlanErrorKind::Pattern,
            line: at.line,
            column: at.column,
            offset: at.offset,
            expected: Vec::new(),
            message,
        });
    }
    Ok(tree)
}

pub fn parse_plan(text: &str, vocab: &Vocabulary) -> Result<Plan, PlanError> {
    validate_plan_text(text, vocab).map(|t| plan_from_tree(&t))
}

/// Canonical form of a valid plan text.
pub fn canonicalize(text: &str, vocab: &Vocabulary) -> Result<String, PlanError> {
    parse_plan(text, vocab).map(|p| p.to_json())
}

fn string_value(tree: &ParseTree, rule: &str) -> String {
    let node = tree.find(rule)[0];
    match &node.tokens().last().expect("rule has tokens").kind {
        TokenKind::Str(s) => s.clone(),
        other => unreachable!("grammar guarantees a string, got {other:?}"),
    }
}

fn plan_from_tree(tree: &ParseTree) -> Plan {
    let chain_of_thought = string_value(tree, "cot");
    let actions = tree
        .find("action")
        .into_iter()
        .map(|a| {
            let location = || string_value(a, "loc").parse::<Location>().expect("grammar checks locations");
            if !a.find("pick").is_empty() {
                Action::Pick {
                    object: string_value(a, "objlabel"),
                    location: location(),
                }
            } else if !a.find("place").is_empty() {
                Action::Place { location: location() }
            } else {
                Action::Handover
            }
        })
        .collect();
    Plan {
        chain_of_thought,
        actions,
    }
}
