//! k-shot prompt rendering.
//!
//! The default layout is
//!
//! ```text
//! {instruction}
//!
//! Input: {demo text}
//! Label: {demo label}
//! ...
//! Input: {query}
//! Label:
//! ```
//!
//! With labels off the `Label:` line of each demonstration is omitted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("demonstration {0} has no label but labels are enabled")]
    MissingLabel(usize),
    #[error("query alone needs ~{estimate:.1} tokens, budget is {budget}")]
    QueryTooLong { estimate: f64, budget: usize },
    #[error("template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    MostSimilarFirst,
    /// Closest example sits right before the query.
    #[default]
    MostSimilarLast,
}

impl std::str::FromStr for DemoOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "most_similar_first" => Ok(Self::MostSimilarFirst),
            "most_similar_last" => Ok(Self::MostSimilarLast),
            _ => Err(format!("unknown demo order {s:?}")),
        }
    }
}

/// Everything needed to render one prompt. `demonstrations` is always held
/// most-similar-first; `demo_order` only affects rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub instruction: String,
    pub demonstrations: Vec<Demonstration>,
    pub query_text: String,
    pub include_labels: bool,
    pub demo_order: DemoOrder,
}

impl PromptPlan {
    pub fn k(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.include_labels {
            if let Some(i) = self.demonstrations.iter().position(|d| d.label.is_none()) {
                return Err(PromptError::MissingLabel(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Instruction,
    Demos,
    Query,
}

/// A prompt layout with `{instruction}`, `{demos}` and `{query}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

pub const DEFAULT_TEMPLATE: &str = "{instruction}\n\n{demos}Input: {query}\nLabel:";

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template parses")
    }
}

impl PromptTemplate {
    pub fn parse(src: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut rest = src;
        let mut literal = String::new();
        let mut seen_query = false;
        while let Some(pos) = rest.find('{') {
            literal.push_str(&rest[..pos]);
            rest = &rest[pos..];
            let slot = [("{instruction}", Segment::Instruction), ("{demos}", Segment::Demos), ("{query}", Segment::Query)]
                .into_iter()
                .find(|(p, _)| rest.starts_with(p));
            match slot {
                Some((p, seg)) => {
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    seen_query |= seg == Segment::Query;
                    segments.push(seg);
                    rest = &rest[p.len()..];
                }
                None => {
                    literal.push('{');
                    rest = &rest[1..];
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        if !seen_query {
            return Err(PromptError::Template("template has no {query} slot".into()));
        }
        Ok(Self { segments })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let src = fs::read_to_string(path).map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&src)
    }

    pub fn assemble(&self, plan: &PromptPlan) -> Result<String, PromptError> {
        plan.validate()?;
        let mut demos = String::new();
        let mut push = |d: &Demonstration| {
            demos.push_str("Input: ");
            demos.push_str(&d.text);
            demos.push('\n');
            if plan.include_labels {
                demos.push_str("Label: ");
                demos.push_str(d.label.as_deref().unwrap_or_default());
                demos.push('\n');
            }
        };
        match plan.demo_order {
            DemoOrder::MostSimilarFirst => plan.demonstrations.iter().for_each(&mut push),
            DemoOrder::MostSimilarLast => plan.demonstrations.iter().rev().for_each(&mut push),
        }
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Instruction => out.push_str(&plan.instruction),
                Segment::Demos => out.push_str(&demos),
                Segment::Query => out.push_str(&plan.query_text),
            }
        }
        Ok(out)
    }

    /// Drops demonstrations from the least similar end until the estimated
    /// prompt length fits `token_budget`. Survivors keep their order.
    pub fn fit_to_budget(&self, plan: &PromptPlan, token_budget: usize, estimate: &dyn Fn(&str) -> f64) -> Result<PromptPlan, PromptError> {
        let mut zero = plan.clone();
        zero.demonstrations.clear();
        let base = estimate(&self.assemble(&zero)?);
        if base > token_budget as f64 {
            return Err(PromptError::QueryTooLong { estimate: base, budget: token_budget });
        }
        let mut fitted = plan.clone();
        while !fitted.demonstrations.is_empty() && estimate(&self.assemble(&fitted)?) > token_budget as f64 {
            fitted.demonstrations.pop();
        }
        Ok(fitted)
    }
}

/// Renders with the default layout.
pub fn assemble(plan: &PromptPlan) -> Result<String, PromptError> {
    PromptTemplate::default().assemble(plan)
}

/// Whitespace-token count times 1.3.
pub fn whitespace_estimate(text: &str) -> f64 {
    text.split_whitespace().count() as f64 * 1.3
}
