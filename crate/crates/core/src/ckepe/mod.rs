//! Knowledge-verified prompts: ask an LLM for subtypes and attributes of a
//! condition, keep only terms found in a trusted knowledge base, and
//! assemble the survivors into a class prompt.

mod kb;
mod llm;

pub use kb::{load_kb, KbEntry, KbKind, KnowledgeBase};
pub use llm::{condition_of, query_text, FixtureClient, LiveClient, LlmClient, FORMAT_INSTRUCTIONS};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};
use crate::text::normalize_term;
use crate::zeroshot::{ClassPrompt, ClassPromptSet, KbHit, PromptStyle, Provenance};

/// Bumped whenever the rendered prompt wording changes.
pub const PROMPT_TEMPLATE_VERSION: &str = "ckepe-v1";
const TEMPLATE_STYLE_PREFIX: &str = "electrocardiogram showing ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTerms {
    pub condition: String,
    pub subtypes: Vec<String>,
    pub attributes: Vec<String>,
    pub raw_response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermRole {
    Subtype,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedTerm {
    pub term: String,
    pub role: TermRole,
    pub reason: String,
    pub checked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedPrompt {
    pub condition: String,
    pub kept_subtypes: Vec<String>,
    pub kept_attributes: Vec<String>,
    pub discarded: Vec<DiscardedTerm>,
    pub kb_hits: Vec<KbHit>,
    pub prompt_text: String,
}

fn is_none_marker(s: &str) -> bool {
    matches!(normalize_term(s).as_str(), "" | "none" | "n/a" | "refrain")
}

fn split_terms(list: &str, seen: &mut BTreeSet<String>) -> Vec<String> {
    if is_none_marker(list) {
        return Vec::new();
    }
    list.split(';')
        .map(|t| t.trim().trim_end_matches('.').trim())
        .filter(|t| !is_none_marker(t))
        .filter(|t| seen.insert(normalize_term(t)))
        .map(String::from)
        .collect()
}

/// Parses the two-line reply grammar:
///
/// ```text
/// Subtypes: a; b
/// Attributes: c; d
/// ```
///
/// A bare `NONE` means the LLM refrained. Lines without a label are ignored
/// once at least one label is present. Terms are deduplicated case-insensitively
/// across both lists, first occurrence wins.
pub fn parse_response(condition: &str, raw: &str) -> Result<CandidateTerms> {
    let mut seen = BTreeSet::new();
    let mut out = CandidateTerms {
        condition: condition.to_string(),
        subtypes: Vec::new(),
        attributes: Vec::new(),
        raw_response: raw.to_string(),
    };
    if is_none_marker(raw) {
        return Ok(out);
    }
    let mut labelled = false;
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((label, rest)) = line.split_once(':') else { continue };
        match normalize_term(label).as_str() {
            "subtypes" | "subtype" => {
                labelled = true;
                out.subtypes.extend(split_terms(rest, &mut seen));
            }
            "attributes" | "attribute" | "signal attributes" => {
                labelled = true;
                out.attributes.extend(split_terms(rest, &mut seen));
            }
            _ => {}
        }
    }
    if !labelled {
        return Err(MerlError::LlmResponse {
            message: format!("no 'Subtypes:' or 'Attributes:' line in response for {condition:?}"),
            raw_response: raw.to_string(),
        });
    }
    Ok(out)
}

pub fn query_candidates(condition: &str, client: &dyn LlmClient) -> Result<CandidateTerms> {
    if condition.trim().is_empty() {
        return Err(MerlError::Config("condition must be non-empty".into()));
    }
    let raw = client.send(&query_text(condition))?;
    parse_response(condition, &raw)
}

/// Keeps terms that resolve (directly or via a synonym) in any enabled KB.
/// Kept terms are reported in their canonical KB spelling. The prompt text
/// is left empty; see [`assemble_prompt`].
pub fn verify_against_kb(candidates: &CandidateTerms, kbs: &[&KnowledgeBase]) -> VerifiedPrompt {
    let checked: Vec<String> = kbs.iter().map(|k| k.name.clone()).collect();
    let mut out = VerifiedPrompt {
        condition: candidates.condition.clone(),
        kept_subtypes: Vec::new(),
        kept_attributes: Vec::new(),
        discarded: Vec::new(),
        kb_hits: Vec::new(),
        prompt_text: String::new(),
    };
    let mut kept_keys = BTreeSet::new();
    let roles = candidates
        .subtypes
        .iter()
        .map(|t| (t, TermRole::Subtype))
        .chain(candidates.attributes.iter().map(|t| (t, TermRole::Attribute)));
    for (term, role) in roles {
        match kbs.iter().find_map(|kb| kb.lookup(term).map(|c| (kb, c.to_string()))) {
            Some((kb, canonical)) => {
                if !kept_keys.insert(canonical.clone()) {
                    continue;
                }
                out.kb_hits.push(KbHit {
                    term: canonical.clone(),
                    kb: kb.name.clone(),
                });
                match role {
                    TermRole::Subtype => out.kept_subtypes.push(canonical),
                    TermRole::Attribute => out.kept_attributes.push(canonical),
                }
            }
            None => out.discarded.push(DiscardedTerm {
                term: term.clone(),
                role,
                reason: if kbs.is_empty() {
                    "no knowledge base enabled".into()
                } else {
                    "not found in any knowledge base".into()
                },
                checked: checked.clone(),
            }),
        }
    }
    out
}

/// Renders the prompt for `style`. The `ckepe` form is
/// `"<condition>, subtypes: s1; s2, signal attributes: a1; a2"` with empty
/// sections left out.
pub fn assemble_prompt(mut verified: VerifiedPrompt, style: PromptStyle) -> VerifiedPrompt {
    verified.prompt_text = match style {
        PromptStyle::NameOnly => verified.condition.clone(),
        PromptStyle::Template => format!("{TEMPLATE_STYLE_PREFIX}{}", verified.condition),
        PromptStyle::Ckepe => {
            let mut text = verified.condition.clone();
            if !verified.kept_subtypes.is_empty() {
                text += &format!(", subtypes: {}", verified.kept_subtypes.join("; "));
            }
            if !verified.kept_attributes.is_empty() {
                text += &format!(", signal attributes: {}", verified.kept_attributes.join("; "));
            }
            text
        }
    };
    verified
}

/// Runs the full pipeline for `(class_name, condition)` pairs. Styles other
/// than `ckepe` never contact the client.
pub fn build_prompt_set(
    classes: &[(String, String)],
    client: &dyn LlmClient,
    kbs: &[&KnowledgeBase],
    style: PromptStyle,
) -> Result<(ClassPromptSet, Vec<VerifiedPrompt>)> {
    let mut entries = Vec::with_capacity(classes.len());
    let mut reports = Vec::with_capacity(classes.len());
    for (class_name, condition) in classes {
        let candidates = if style == PromptStyle::Ckepe {
            query_candidates(condition, client)?
        } else {
            CandidateTerms {
                condition: condition.clone(),
                subtypes: Vec::new(),
                attributes: Vec::new(),
                raw_response: String::new(),
            }
        };
        let v = assemble_prompt(verify_against_kb(&candidates, kbs), style);
        entries.push(ClassPrompt {
            class_name: class_name.clone(),
            prompt_text: v.prompt_text.clone(),
            subtypes: v.kept_subtypes.clone(),
            attributes: v.kept_attributes.clone(),
            provenance: Provenance {
                kb_hits: v.kb_hits.clone(),
            },
        });
        reports.push(v);
    }
    Ok((ClassPromptSet::new(entries, style)?, reports))
}
