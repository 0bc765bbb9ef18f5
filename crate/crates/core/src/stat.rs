//! Template extraction for dense groups by per-position value analysis.

use std::collections::{BTreeMap, BTreeSet};

use once_cell::sync::Lazy;
use regex::Regex;

use crate::masker::{contains_mask_token, default_masker, MaskKind};
use crate::model::{DenseGroup, TemplateResult, TemplateSource, PLACEHOLDER};

static COMPOSITE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^<\*>[:=/]<\*>$").unwrap());

/// Templates found in one dense group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupTemplates {
    /// Raw token count -> template. Normally a single entry.
    pub templates: BTreeMap<usize, String>,
    /// Distinct message -> its template and parameters.
    pub by_message: BTreeMap<String, TemplateResult>,
}

/// Positions of a partition that become parameters: those with more than
/// one distinct value, and those a member key already masked.
pub fn parameter_positions(messages: &[Vec<&str>], keys: &[&[String]]) -> Vec<bool> {
    let Some(width) = messages.first().map(Vec::len) else {
        return Vec::new();
    };
    (0..width)
        .map(|i| {
            let first = messages[0][i];
            messages.iter().any(|m| m[i] != first)
                || keys
                    .iter()
                    .any(|k| k.get(i).is_some_and(|t| contains_mask_token(t)))
        })
        .collect()
}

pub fn extract_template(group: &DenseGroup) -> GroupTemplates {
    let distinct: BTreeSet<&str> = group
        .member_groups
        .iter()
        .flat_map(|g| g.members.iter().map(String::as_str))
        .collect();

    let mut partitions: BTreeMap<usize, Vec<(&str, Vec<&str>)>> = BTreeMap::new();
    for m in distinct {
        let toks: Vec<&str> = m.split_whitespace().collect();
        partitions.entry(toks.len()).or_default().push((m, toks));
    }
    if partitions.len() > 1 {
        log::warn!(
            "dense group anchored at {:?} spans {} raw lengths",
            group.anchor_key,
            partitions.len()
        );
    }

    let mut out = GroupTemplates::default();
    for (len, partition) in partitions {
        let (raw, messages): (Vec<&str>, Vec<Vec<&str>>) = partition.into_iter().unzip();
        let keys: Vec<&[String]> = group
            .member_groups
            .iter()
            .filter(|g| g.key_tokens.len() == len)
            .map(|g| g.key_tokens.as_slice())
            .collect();
        let params = parameter_positions(&messages, &keys);
        let template = messages[0]
            .iter()
            .zip(&params)
            .map(|(tok, &p)| if p { PLACEHOLDER } else { tok })
            .collect::<Vec<_>>()
            .join(" ");
        for (raw, m) in raw.into_iter().zip(&messages) {
            let parameters = m
                .iter()
                .zip(&params)
                .filter(|(_, &p)| p)
                .map(|(t, _)| t.to_string())
                .collect();
            out.by_message.insert(
                raw.to_owned(),
                TemplateResult {
                    template: template.clone(),
                    parameters,
                    source: TemplateSource::Statistical,
                },
            );
        }
        out.templates.insert(len, template);
    }
    out
}

/// True for tokens post-processing turns into a placeholder: numbers and
/// mixed strings.
fn is_variable_shaped(token: &str) -> bool {
    matches!(
        default_masker().classify(token),
        Some(MaskKind::Num | MaskKind::Cl | MaskKind::Ucl)
    )
}

/// Rewrites a template: variable-shaped constants become `<*>`, runs of
/// `<*>` collapse, and `<*>:<*>`-style composites collapse.
pub fn post_process(template: &str) -> String {
    let spans: Vec<(String, Vec<&str>)> = template
        .split_whitespace()
        .map(|t| (t.to_owned(), Vec::new()))
        .collect();
    rewrite(spans)
        .into_iter()
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Applies [`post_process`] to a result whose template is token-aligned
/// with `content`, re-deriving the parameter list. Rollback results and
/// misaligned templates pass through untouched.
pub fn refine(result: TemplateResult, content: &str) -> TemplateResult {
    if result.source == TemplateSource::Rollback {
        return result;
    }
    let original: Vec<&str> = content.split_whitespace().collect();
    let template_tokens: Vec<&str> = result.template.split_whitespace().collect();
    if original.len() != template_tokens.len() {
        return result;
    }
    let spans: Vec<(String, Vec<&str>)> = template_tokens
        .into_iter()
        .zip(original)
        .map(|(t, o)| (t.to_owned(), vec![o]))
        .collect();
    let rewritten = rewrite(spans);
    let parameters = rewritten
        .iter()
        .filter(|(t, _)| t == PLACEHOLDER)
        .map(|(_, span)| span.join(" "))
        .collect();
    TemplateResult {
        template: rewritten
            .iter()
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(" "),
        parameters,
        source: result.source,
    }
}

fn rewrite(spans: Vec<(String, Vec<&str>)>) -> Vec<(String, Vec<&str>)> {
    let spans = spans.into_iter().map(|(t, span)| {
        if t != PLACEHOLDER && !t.contains(PLACEHOLDER) && is_variable_shaped(&t) {
            (PLACEHOLDER.to_owned(), span)
        } else {
            (t, span)
        }
    });
    let spans = collapse(spans.collect());
    let spans = spans
        .into_iter()
        .map(|(t, span)| {
            if COMPOSITE.is_match(&t) {
                (PLACEHOLDER.to_owned(), span)
            } else {
                (t, span)
            }
        })
        .collect();
    collapse(spans)
}

fn collapse(spans: Vec<(String, Vec<&str>)>) -> Vec<(String, Vec<&str>)> {
    let mut out: Vec<(String, Vec<&str>)> = Vec::with_capacity(spans.len());
    for (t, span) in spans {
        match out.last_mut() {
            Some((prev, prev_span)) if prev == PLACEHOLDER && t == PLACEHOLDER => {
                prev_span.extend(span)
            }
            _ => out.push((t, span)),
        }
    }
    out
}
