//! Linearised evidence prompts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{GatewayError, Result};

/// Triples handed to the reader by default.
pub const DEFAULT_TOP_K: usize = 100;

const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_v1.txt");
const NO_CONTEXT_TEMPLATE: &str = include_str!("../assets/prompt_no_context_v1.txt");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { top_p: 0.95, temperature: 0.7, max_tokens: 256 }
    }
}

/// A template with `[system]` and `[user]` sections. The user section holds
/// `{question}` and, for grounded prompts, `{evidence}`. Lines starting with
/// `#` before the first section are comments.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn grounded() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }

    pub fn question_only() -> Self {
        Self::parse(NO_CONTEXT_TEMPLATE).expect("bundled template parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section: Option<&str> = None;
        let (mut system, mut user) = (Vec::new(), Vec::new());
        for line in text.lines() {
            match line.trim() {
                "[system]" => section = Some("system"),
                "[user]" => section = Some("user"),
                _ => match section {
                    Some("system") => system.push(line),
                    Some(_) => user.push(line),
                    None if line.starts_with('#') || line.trim().is_empty() => {}
                    None => return Err(GatewayError::Template(format!("text outside a section: {line:?}"))),
                },
            }
        }
        let user = user.join("\n").trim_end().to_owned();
        if !user.contains("{question}") {
            return Err(GatewayError::Template("user section lacks {question}".into()));
        }
        Ok(Self { system: system.join("\n").trim_end().to_owned(), user })
    }

    pub fn has_evidence(&self) -> bool {
        self.user.contains("{evidence}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub decoding: Decoding,
    pub evidence_lines: usize,
    /// Lowest-scored triples dropped to respect the budget.
    pub truncated: usize,
}

impl PromptBundle {
    pub fn len(&self) -> usize {
        self.system.chars().count() + self.user.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn linearize(triple: &[String; 3]) -> String {
    format!("({}, {}, {})", triple[0], triple[1], triple[2])
}

fn render(t: &PromptTemplate, question: &str, evidence: &[String]) -> (String, String) {
    let user = t.user.replace("{evidence}", &evidence.join("\n")).replace("{question}", question);
    (t.system.clone(), user)
}

/// Renders `triples` (highest score first) one per line into `template`.
/// With an empty list the question-only template is used when `allow_empty`
/// is set. Triples are dropped from the end until the prompt fits in `budget`
/// characters.
pub fn build_prompt(
    question: &str,
    triples: &[[String; 3]],
    template: &PromptTemplate,
    decoding: Decoding,
    budget: Option<usize>,
    allow_empty: bool,
) -> Result<PromptBundle> {
    if triples.is_empty() {
        if !allow_empty {
            return Err(GatewayError::Prompt("no evidence triples and empty-context mode is off".into()));
        }
        let t = if template.has_evidence() { PromptTemplate::question_only() } else { template.clone() };
        let (system, user) = render(&t, question, &[]);
        let b = PromptBundle { system, user, decoding, evidence_lines: 0, truncated: 0 };
        return check_budget(b, budget);
    }
    if !template.has_evidence() {
        return Err(GatewayError::Template("template has no {evidence} slot".into()));
    }
    let lines: Vec<String> = triples.iter().map(linearize).collect();
    let (system, user) = render(template, question, &lines);
    let full = PromptBundle { system, user, decoding, evidence_lines: lines.len(), truncated: 0 };
    let Some(limit) = budget else { return Ok(full) };
    if full.len() <= limit {
        return Ok(full);
    }
    // Every line costs its length plus a separator, so the fitting prefix
    // follows from the fixed overhead.
    let (s0, u0) = render(template, question, &[]);
    let overhead = s0.chars().count() + u0.chars().count();
    let mut used = overhead;
    let mut keep = 0;
    for (i, l) in lines.iter().enumerate() {
        let cost = l.chars().count() + usize::from(i > 0);
        if used + cost > limit {
            break;
        }
        used += cost;
        keep += 1;
    }
    if keep == 0 {
        return Err(GatewayError::Prompt(format!("budget {limit} leaves no room for evidence")));
    }
    let (system, user) = render(template, question, &lines[..keep]);
    Ok(PromptBundle { system, user, decoding, evidence_lines: keep, truncated: lines.len() - keep })
}

fn check_budget(b: PromptBundle, budget: Option<usize>) -> Result<PromptBundle> {
    match budget {
        Some(limit) if b.len() > limit => Err(GatewayError::Prompt(format!("question-only prompt exceeds budget {limit}"))),
        _ => Ok(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, x: &str) -> [String; 3] {
        [h.into(), r.into(), x.into()]
    }

    #[test]
    fn two_triples_two_lines_in_order() {
        let b = build_prompt(
            "where?",
            &[t("a", "r", "b"), t("b", "s", "c")],
            &PromptTemplate::grounded(),
            Decoding::default(),
            None,
            false,
        )
        .unwrap();
        let ev: Vec<&str> = b.user.lines().filter(|l| l.starts_with('(')).collect();
        assert_eq!(ev, vec!["(a, r, b)", "(b, s, c)"]);
        assert_eq!((b.evidence_lines, b.truncated), (2, 0));
    }

    #[test]
    fn empty_context_is_question_only() {
        let b = build_prompt("who?", &[], &PromptTemplate::grounded(), Decoding::default(), None, true).unwrap();
        assert!(b.user.contains("Question: who?"));
        assert!(!b.user.contains("Evidence"));
        assert!(build_prompt("who?", &[], &PromptTemplate::grounded(), Decoding::default(), None, false).is_err());
    }

    #[test]
    fn default_decoding() {
        let d = Decoding::default();
        assert_eq!((d.top_p, d.temperature, DEFAULT_TOP_K), (0.95, 0.7, 100));
    }

    #[test]
    fn rejects_sectionless_text() {
        assert!(PromptTemplate::parse("hello {question}").is_err());
        assert!(PromptTemplate::parse("[user]\nno slot").is_err());
    }
}
