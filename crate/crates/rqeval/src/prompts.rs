//! Versioned prompt templates and the placeholder renderer.
//!
//! Templates live as text assets under `assets/prompts/` and are embedded at
//! compile time. Placeholders are `{lowercase_names}`; doubled braces render
//! as literal single braces, so JSON examples inside templates survive as
//! written. Anything else passes through untouched.
//!
//! Asset versions feed into response-cache keys: bumping a version after
//! editing a template invalidates exactly the calls that used it.

use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct PromptAsset {
    pub name: &'static str,
    pub version: &'static str,
    text: &'static str,
}

impl PromptAsset {
    /// Template text without the trailing newline the file format adds.
    pub fn text(&self) -> &'static str {
        self.text.strip_suffix('\n').unwrap_or(self.text)
    }
}

macro_rules! asset {
    ($name:literal, $version:literal) => {
        PromptAsset {
            name: $name,
            version: $version,
            text: include_str!(concat!("../assets/prompts/", $name, ".txt")),
        }
    };
}

pub const ASSETS: &[PromptAsset] = &[
    asset!("vera_stage1", "1"),
    asset!("vera_stage1_no_search", "1"),
    asset!("vera_stage2", "1"),
    asset!("llm_judge", "1"),
    asset!("socreval_phase1", "1"),
    asset!("socreval_phase2", "1"),
    asset!("socreval_phase3", "1"),
    asset!("case_step", "1"),
    asset!("mad_opening", "1"),
    asset!("mad_verifier", "1"),
    asset!("mad_defender", "1"),
    asset!("mad_arbiter", "1"),
    asset!("autorace_induce", "1"),
    asset!("autorace_eval", "1"),
    asset!("diagnose_missed_error", "1"),
    asset!("diagnose_false_alarm", "1"),
    asset!("open_coding", "1"),
    asset!("taxonomy_consolidation", "1"),
    asset!("gen_trace", "1"),
];

pub fn get(name: &str) -> Option<&'static PromptAsset> {
    ASSETS.iter().find(|a| a.name == name)
}

/// `name:version` tags joined with `,`, for cache-key construction.
pub fn version_tag(names: &[&str]) -> String {
    names
        .iter()
        .map(|n| {
            let a = get(n).unwrap_or_else(|| panic!("unknown prompt asset {:?}", n));
            format!("{}:{}", a.name, a.version)
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template references {{{0}}} but no value was provided")]
    MissingVar(String),
}

/// Substitutes `{name}` placeholders from `vars` and unescapes doubled
/// braces. A brace group that is not a well-formed placeholder name passes
/// through verbatim; a well-formed name with no binding is an error.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let template = template.strip_suffix('\n').unwrap_or(template);
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                if let Some(end) = find_placeholder_end(bytes, i + 1) {
                    let name = &template[i + 1..end];
                    match vars.iter().find(|(k, _)| *k == name) {
                        Some((_, v)) => {
                            out.push_str(v);
                            i = end + 1;
                        }
                        None => return Err(PromptError::MissingVar(name.to_string())),
                    }
                } else {
                    out.push('{');
                    i += 1;
                }
            }
            _ => {
                // Advance one whole UTF-8 character.
                let ch = template[i..].chars().next().expect("in-bounds char");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    Ok(out)
}

/// Index of the closing `}` if bytes starting at `start` form a placeholder
/// name (`[a-z0-9_]+`, at most 64 bytes).
fn find_placeholder_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut j = start;
    while j < bytes.len() && j - start <= 64 {
        match bytes[j] {
            b'a'..=b'z' | b'0'..=b'9' | b'_' => j += 1,
            b'}' if j > start => return Some(j),
            _ => return None,
        }
    }
    None
}
