//! Generation prompts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::patch::PatchKind;

/// The three fixed prompt sections supplied by a problem directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub statement: String,
    pub criteria: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub problem: ProblemSpec,
    pub parent_text: String,
    pub parent_score: Option<f64>,
    /// (text, score), best first.
    pub inspirations: Vec<(String, f64)>,
    pub hints: Vec<String>,
    pub feedback: String,
    pub meta_recommendations: String,
    /// Evaluator error a repair request must address.
    pub repair_error: Option<String>,
    pub kind: PatchKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub bundle: PromptBundle,
    pub text: String,
    /// Inspirations dropped to fit the budget.
    pub truncated: usize,
}

fn section(out: &mut String, title: &str, body: &str) {
    let _ = write!(out, "## {title}\n{}\n\n", body.trim_end());
}

impl PromptBundle {
    pub fn render(&self) -> String {
        let mut out = String::new();
        section(&mut out, "Problem", &self.problem.statement);
        section(&mut out, "Evaluation criteria", &self.problem.criteria);
        section(&mut out, "Context", &self.problem.context);
        if !self.inspirations.is_empty() {
            let mut body = String::new();
            for (i, (text, score)) in self.inspirations.iter().enumerate() {
                let _ = write!(body, "### Program {} (score {score:.6})\n```\n{}```\n", i + 1, text);
            }
            section(&mut out, "Prior programs", &body);
        }
        if !self.meta_recommendations.trim().is_empty() {
            section(&mut out, "Recommendations", &self.meta_recommendations);
        }
        if !self.hints.is_empty() {
            let body: Vec<String> = self.hints.iter().map(|h| format!("- {h}")).collect();
            section(&mut out, "Hints", &body.join("\n"));
        }
        if !self.feedback.trim().is_empty() {
            section(&mut out, "Evaluator feedback on the current program", &self.feedback);
        }
        if let Some(err) = &self.repair_error {
            section(&mut out, "The current program failed evaluation", err);
        }
        let score = self.parent_score.map_or("unscored".to_string(), |s| format!("score {s:.6}"));
        let ask = match self.kind {
            PatchKind::Full => "Reply with one fenced block holding the new content of the evolve region.",
            _ => "Reply with SEARCH/REPLACE blocks that edit lines inside the evolve regions only.",
        };
        let _ = write!(out, "## Current program ({score})\n{ask}\n```\n{}```\n", self.parent_text);
        out
    }
}

/// Renders the bundle, dropping the lowest-scored inspirations until the
/// render fits in `budget` characters. Hints are never dropped.
pub fn assemble(mut bundle: PromptBundle, budget: usize) -> Assembled {
    bundle
        .inspirations
        .sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut truncated = 0;
    loop {
        let text = bundle.render();
        if text.chars().count() <= budget || bundle.inspirations.is_empty() {
            return Assembled {
                bundle,
                text,
                truncated,
            };
        }
        bundle.inspirations.pop();
        truncated += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> PromptBundle {
        PromptBundle {
            problem: ProblemSpec {
                statement: "Schedule jobs.".into(),
                criteria: "Lower cost is better.".into(),
                context: "fn decide(view) -> Decision".into(),
            },
            parent_text: "policy = greedy\n".into(),
            parent_score: Some(0.1),
            inspirations: vec![],
            hints: vec![],
            feedback: String::new(),
            meta_recommendations: String::new(),
            repair_error: None,
            kind: PatchKind::Diff,
        }
    }

    #[test]
    fn bare_render_has_three_sections_and_parent() {
        let text = bundle().render();
        let heads: Vec<&str> = text.lines().filter(|l| l.starts_with("## ")).collect();
        assert_eq!(
            heads,
            vec!["## Problem", "## Evaluation criteria", "## Context", "## Current program (score 0.100000)"]
        );
        assert!(text.contains("policy = greedy\n"));
        assert_eq!(text, bundle().render());
    }

    #[test]
    fn hints_keep_order_and_inspirations_sort() {
        let mut b = bundle();
        b.hints = vec!["h1 first".into(), "h2 second".into()];
        b.inspirations = vec![("low\n".into(), 0.1), ("high\n".into(), 0.9)];
        let a = assemble(b, usize::MAX);
        assert!(a.text.find("h1 first").unwrap() < a.text.find("h2 second").unwrap());
        assert!(a.text.find("high").unwrap() < a.text.find("low").unwrap());
        assert_eq!(a.truncated, 0);
    }

    #[test]
    fn budget_drops_lowest_inspirations_first() {
        let mut b = bundle();
        b.hints = vec!["keep me".into()];
        b.inspirations = vec![("best\n".into(), 0.9), ("worst\n".repeat(50), 0.1)];
        let full = assemble(b.clone(), usize::MAX).text.chars().count();
        let a = assemble(b, full - 1);
        assert_eq!(a.truncated, 1);
        assert!(a.text.contains("best") && !a.text.contains("worst"));
        assert!(a.text.contains("keep me"));
    }

    #[test]
    fn repair_prompt_carries_error_verbatim() {
        let mut b = bundle();
        b.repair_error = Some("SyntaxError: unexpected token `)` on line 3".into());
        assert!(b.render().contains("SyntaxError: unexpected token `)` on line 3"));
    }
}
