//! Term normalisation shared by the text encoder and knowledge-base lookups:
//! lowercase, collapse internal whitespace, strip punctuation at token edges.

pub fn normalize_term(s: &str) -> String {
    tokens(s).collect::<Vec<_>>().join(" ")
}

/// Normalised tokens of `s`; tokens that are pure punctuation vanish.
pub fn tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_control()).to_lowercase())
        .filter(|t| !t.is_empty())
}
