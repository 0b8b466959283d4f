//! Prompt rendering from an ordered example sequence and a query.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidateExample;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {section} is missing placeholder {placeholder}")]
    Placeholder {
        section: &'static str,
        placeholder: &'static str,
    },
    #[error("template file: {0}")]
    Format(String),
    #[error("reading template: {0}")]
    Io(#[from] std::io::Error),
}

const SECTIONS: [&str; 4] = ["preamble", "example_block", "query_block", "joiner"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    preamble: String,
    example_block: String,
    query_block: String,
    joiner: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: "You are a helpful assistant. Follow the examples and answer the final instruction.".into(),
            example_block: "### Instruction:\n{query}\n### Context:\n{context}\n### Response:\n{response}".into(),
            query_block: "### Instruction:\n{query}\n### Response:\n".into(),
            joiner: "\n\n".into(),
        }
    }
}

/// Replaces `{name}` placeholders in one left-to-right pass, so substituted
/// text is never rescanned.
fn substitute<'v>(template: &str, lookup: impl Fn(&str) -> Option<&'v str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match tail.find('}').and_then(|close| lookup(&tail[1..close]).map(|v| (close, v))) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn has_placeholder(line: &str) -> bool {
    ["{query}", "{context}", "{response}"].iter().any(|p| line.contains(p))
}

impl PromptTemplate {
    pub fn new(
        preamble: impl Into<String>,
        example_block: impl Into<String>,
        query_block: impl Into<String>,
        joiner: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let t = Self {
            preamble: preamble.into(),
            example_block: example_block.into(),
            query_block: query_block.into(),
            joiner: joiner.into(),
        };
        for placeholder in ["{query}", "{context}", "{response}"] {
            if !t.example_block.contains(placeholder) {
                return Err(TemplateError::Placeholder {
                    section: "example_block",
                    placeholder,
                });
            }
        }
        if !t.query_block.contains("{query}") {
            return Err(TemplateError::Placeholder {
                section: "query_block",
                placeholder: "{query}",
            });
        }
        Ok(t)
    }

    /// Parses the four sections delimited by `---preamble---`,
    /// `---example_block---`, `---query_block---` and `---joiner---` marker
    /// lines. A section's text runs from the line after its marker to the
    /// line before the next marker; one trailing newline at end of file is
    /// dropped.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut found: Vec<(&str, String)> = Vec::new();
        let mut current: Option<(&str, Vec<&str>)> = None;
        let body = text.strip_suffix('\n').unwrap_or(text);
        for line in body.split('\n') {
            let marker = line
                .trim_end_matches('\r')
                .strip_prefix("---")
                .and_then(|l| l.strip_suffix("---"))
                .and_then(|name| SECTIONS.iter().find(|&&s| s == name));
            if let Some(&name) = marker {
                if found.iter().any(|(n, _)| *n == name) || current.as_ref().is_some_and(|(n, _)| *n == name) {
                    return Err(TemplateError::Format(format!("section {name} appears twice")));
                }
                if let Some((n, lines)) = current.take() {
                    found.push((n, lines.join("\n")));
                }
                current = Some((name, Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() {
                return Err(TemplateError::Format("text before the first section marker".into()));
            }
        }
        if let Some((n, lines)) = current.take() {
            found.push((n, lines.join("\n")));
        }
        let mut take = |name: &str| {
            found
                .iter()
                .position(|(n, _)| *n == name)
                .map(|i| found.swap_remove(i).1)
                .ok_or_else(|| TemplateError::Format(format!("missing section ---{name}---")))
        };
        let preamble = take("preamble")?;
        let example_block = take("example_block")?;
        let query_block = take("query_block")?;
        let joiner = take("joiner")?;
        Self::new(preamble, example_block, query_block, joiner)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_file_text(&self) -> String {
        format!(
            "---preamble---\n{}\n---example_block---\n{}\n---query_block---\n{}\n---joiner---\n{}\n",
            self.preamble, self.example_block, self.query_block, self.joiner
        )
    }

    pub fn preamble(&self) -> &str {
        &self.preamble
    }

    pub fn joiner(&self) -> &str {
        &self.joiner
    }

    /// Example block with placeholders filled. Without a context, the
    /// `{context}` line is dropped together with the label line directly
    /// above it when that line carries no placeholder.
    pub fn render_example(&self, example: &CandidateExample) -> String {
        let block = match example.context.as_deref() {
            Some(_) => self.example_block.clone(),
            None => {
                let lines: Vec<&str> = self.example_block.split('\n').collect();
                let mut keep = vec![true; lines.len()];
                for (i, line) in lines.iter().enumerate() {
                    if line.contains("{context}") {
                        keep[i] = false;
                        if i > 0 && !has_placeholder(lines[i - 1]) {
                            keep[i - 1] = false;
                        }
                    }
                }
                lines
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(l, _)| *l)
                    .collect::<Vec<_>>()
                    .join("\n")
            }
        };
        substitute(&block, |name| match name {
            "query" => Some(&example.query),
            "context" => Some(example.context.as_deref().unwrap_or("")),
            "response" => Some(&example.response),
            _ => None,
        })
    }

    pub fn render_query(&self, query: &str) -> String {
        substitute(&self.query_block, |name| (name == "query").then_some(query))
    }

    /// `[preamble, example blocks..., query block]` joined by the joiner; an
    /// empty preamble is left out.
    pub fn render(&self, sequence: &[&CandidateExample], query: &str) -> String {
        let mut parts = Vec::with_capacity(sequence.len() + 2);
        if !self.preamble.is_empty() {
            parts.push(self.preamble.clone());
        }
        parts.extend(sequence.iter().map(|e| self.render_example(e)));
        parts.push(self.render_query(query));
        parts.join(&self.joiner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(q: &str, c: Option<&str>, r: &str) -> CandidateExample {
        CandidateExample::new(q, c.map(str::to_owned), r).unwrap()
    }

    #[test]
    fn empty_sequence_is_preamble_and_query() {
        let t = PromptTemplate::default();
        assert_eq!(
            t.render(&[], "What is 2+2?"),
            "You are a helpful assistant. Follow the examples and answer the final instruction.\n\n\
             ### Instruction:\nWhat is 2+2?\n### Response:\n"
        );
    }

    #[test]
    fn blocks_follow_sequence_order() {
        let t = PromptTemplate::default();
        let (a, b) = (ex("alpha", None, "A"), ex("beta", Some("ctx"), "B"));
        let out = t.render(&[&b, &a], "q");
        assert!(out.find("beta").unwrap() < out.find("alpha").unwrap());
        assert!(out.contains("### Context:\nctx\n"));
        assert_ne!(out, t.render(&[&a, &b], "q"));
    }

    #[test]
    fn absent_context_drops_label_line() {
        let t = PromptTemplate::default();
        assert_eq!(t.render_example(&ex("Q1", None, "R1")), "### Instruction:\nQ1\n### Response:\nR1");
    }

    #[test]
    fn substituted_text_is_not_rescanned() {
        let t = PromptTemplate::default();
        let block = t.render_example(&ex("say {response}", None, "ok"));
        assert!(block.contains("say {response}"));
        assert!(!t.render_example(&ex("Q1", None, "R")).contains("{query}"));
    }

    #[test]
    fn template_file_round_trip() {
        let t = PromptTemplate::new("", "Q: {query}\nC: {context}\nA: {response}", "Q: {query}\nA:", "\n---\n").unwrap();
        let parsed = PromptTemplate::parse(&t.to_file_text()).unwrap();
        assert_eq!(parsed, t);
        let d = PromptTemplate::default();
        assert_eq!(PromptTemplate::parse(&d.to_file_text()).unwrap(), d);
    }

    #[test]
    fn template_errors() {
        assert!(matches!(
            PromptTemplate::new("p", "{query} {response}", "{query}", "\n"),
            Err(TemplateError::Placeholder { placeholder: "{context}", .. })
        ));
        assert!(matches!(
            PromptTemplate::new("p", "{query} {context} {response}", "none", "\n"),
            Err(TemplateError::Placeholder { section: "query_block", .. })
        ));
        assert!(matches!(
            PromptTemplate::parse("---preamble---\nhi\n"),
            Err(TemplateError::Format(_))
        ));
        assert!(matches!(PromptTemplate::parse("junk\n---preamble---\n"), Err(TemplateError::Format(_))));
    }

    proptest! {
        #[test]
        fn no_residual_placeholders(q in "[a-z ]{1,12}", r in "[a-z]{1,8}", c in proptest::option::of("[a-z]{1,8}")) {
            let t = PromptTemplate::default();
            let e = ex(&format!("x{q}"), c.as_deref(), &r);
            let out = t.render(&[&e], "final");
            for p in ["{query}", "{context}", "{response}"] {
                prop_assert!(!out.contains(p));
            }
        }
    }
}
