//! Few-shot prompt assembly.

use serde::{Deserialize, Serialize};

use super::{parse_plan, Plan, Vocabulary};

pub const EXAMPLE_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptExample {
    pub instruction: String,
    pub plan: Plan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBundle {
    pub system: String,
    pub examples: Vec<PromptExample>,
}

const DEFAULT_BUNDLE: &str = include_str!("../../data/prompt.json");

impl PromptBundle {
    pub fn default_bundle() -> PromptBundle {
        let b: PromptBundle = serde_json::from_str(DEFAULT_BUNDLE).expect("bundled prompt parses");
        b.validate(&Vocabulary::default_vocabulary()).expect("bundled prompt is valid");
        b
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<PromptBundle, String> {
        let b: PromptBundle = serde_json::from_str(text).map_err(|e| e.to_string())?;
        b.validate(vocab)?;
        Ok(b)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), String> {
        if self.examples.len() != EXAMPLE_COUNT {
            return Err(format!("prompt needs exactly {EXAMPLE_COUNT} examples, got {}", self.examples.len()));
        }
        for (i, e) in self.examples.iter().enumerate() {
            parse_plan(&e.plan.to_json(), vocab).map_err(|err| format!("example {}: {err}", i + 1))?;
        }
        Ok(())
    }
}

/// System prompt, the five examples, then the instruction.
pub fn build_prompt(bundle: &PromptBundle, instruction: &str) -> Result<String, String> {
    if bundle.examples.len() != EXAMPLE_COUNT {
        return Err(format!("prompt needs exactly {EXAMPLE_COUNT} examples, got {}", bundle.examples.len()));
    }
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err("empty instruction".into());
    }
    let mut out = String::new();
    out.push_str(bundle.system.trim_end());
    out.push_str("\n\n");
    for (i, e) in bundle.examples.iter().enumerate() {
        out.push_str(&format!("### Example {}\nInstruction: {}\nPlan: {}\n\n", i + 1, e.instruction, e.plan.to_json()));
    }
    out.push_str(&format!("### Task\nInstruction: {instruction}\nPlan: "));
    Ok(out)
}
