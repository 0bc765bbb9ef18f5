//! Variable identification for sparse groups through an inference backend,
//! with output validation and rollback.

pub mod backend;
pub mod prompt;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use once_cell::sync::Lazy;
use regex::Regex;

pub use backend::{
    mock_infer, BackendError, Completion, HttpBackend, HttpBackendConfig, InferenceBackend,
    MockBackend, API_KEY_ENV,
};
pub use prompt::{build_prompt, PromptEnvelope, PromptTemplate};

use crate::error::{Error, Result};
use crate::model::{
    CostLedger, RouterConfig, SparseGroup, TemplateResult, TemplateSource, PLACEHOLDER,
};
use crate::stat::refine;

static ANSWER_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(\d+)\s*[:.)]\s*(\[.*\])\s*$").unwrap());

/// The backend answer could not be aligned with the request.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unusable model response: {0}")]
pub struct FormatError(pub String);

/// Extracts one variable list per message from `raw`. Lines look like
/// `3: ["a", "b"]`; everything else is ignored. Any missing, duplicate or
/// out-of-range index fails the whole batch.
pub fn parse_response(raw: &str, message_count: usize) -> Result<Vec<Vec<String>>, FormatError> {
    let mut lists: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for line in raw.lines() {
        let Some(caps) = ANSWER_LINE.captures(line) else {
            continue;
        };
        let idx: usize = caps[1]
            .parse()
            .map_err(|_| FormatError(format!("bad index in {line:?}")))?;
        if idx == 0 || idx > message_count {
            return Err(FormatError(format!(
                "answer index {idx} outside 1..={message_count}"
            )));
        }
        let values: Vec<serde_json::Value> = serde_json::from_str(&caps[2])
            .map_err(|e| FormatError(format!("answer {idx} is not a JSON list: {e}")))?;
        let vars = values
            .into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) => Ok(s),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                other => Err(FormatError(format!(
                    "answer {idx} holds non-string {other}"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if lists.insert(idx, vars).is_some() {
            return Err(FormatError(format!("answer {idx} given twice")));
        }
    }
    if lists.len() != message_count {
        return Err(FormatError(format!(
            "expected {message_count} answers, found {}",
            lists.len()
        )));
    }
    Ok(lists.into_values().collect())
}

/// Masks the returned variables that really occur in `content`. Longer
/// variables claim text first; masks then widen to whole tokens. With no
/// surviving variable the raw content is its own template.
pub fn validate_and_mask(content: &str, variables: &[String]) -> TemplateResult {
    let mut vars: Vec<&str> = variables
        .iter()
        .map(String::as_str)
        .filter(|v| !v.trim().is_empty() && content.contains(*v))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vars.is_empty() {
        return TemplateResult::rollback(content);
    }
    vars.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

    let mut covered = vec![false; content.len()];
    for v in vars {
        for (start, m) in content.match_indices(v) {
            let span = start..start + m.len();
            if !covered[span.clone()].iter().any(|&c| c) {
                covered[span].iter_mut().for_each(|c| *c = true);
            }
        }
    }

    let mut any = false;
    let tokens: Vec<&str> = token_spans(content)
        .map(|(start, tok)| {
            if covered[start..start + tok.len()].iter().any(|&c| c) {
                any = true;
                PLACEHOLDER
            } else {
                tok
            }
        })
        .collect();
    if !any {
        return TemplateResult::rollback(content);
    }
    let draft = TemplateResult {
        template: tokens.join(" "),
        parameters: Vec::new(),
        source: TemplateSource::Llm,
    };
    refine(draft, content)
}

/// Whitespace-separated tokens with their byte offsets.
fn token_spans(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split_whitespace()
        .map(move |t| (t.as_ptr() as usize - s.as_ptr() as usize, t))
}

/// Request dispatch settings for the sparse processor.
#[derive(Debug, Clone)]
pub struct LlmOptions {
    pub batch_size: usize,
    /// Maximum requests in flight.
    pub jobs: usize,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff: Duration,
    pub prompt: PromptTemplate,
}

impl Default for LlmOptions {
    fn default() -> Self {
        LlmOptions::from_config(&RouterConfig::default())
    }
}

impl LlmOptions {
    pub fn from_config(config: &RouterConfig) -> Self {
        LlmOptions {
            batch_size: config.llm_batch_size,
            jobs: config.jobs,
            max_retries: 3,
            backoff: Duration::from_millis(250),
            prompt: PromptTemplate::default(),
        }
    }
}

/// Distinct contents of the sparse groups, in group-key order.
fn sparse_contents(groups: &[SparseGroup]) -> Vec<&str> {
    let mut ordered: Vec<&SparseGroup> = groups.iter().collect();
    ordered.sort_by(|a, b| a.group.key.cmp(&b.group.key));
    let mut seen = BTreeSet::new();
    ordered
        .into_iter()
        .flat_map(|g| g.group.members.iter().map(String::as_str))
        .filter(|m| seen.insert(*m))
        .collect()
}

/// Queries the backend for every distinct sparse message and returns the
/// validated template per message. Transport failures roll back the batch;
/// backend configuration errors abort.
pub fn process_sparse<B: InferenceBackend + ?Sized>(
    groups: &[SparseGroup],
    backend: &B,
    options: &LlmOptions,
    ledger: &CostLedger,
) -> Result<BTreeMap<String, TemplateResult>> {
    if options.batch_size == 0 || options.jobs == 0 {
        return Err(Error::Config(
            "batch size and jobs must be at least 1".into(),
        ));
    }
    let contents = sparse_contents(groups);
    let batches: Vec<&[&str]> = contents.chunks(options.batch_size).collect();
    if batches.is_empty() {
        return Ok(BTreeMap::new());
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let slots: Mutex<Vec<Option<Vec<TemplateResult>>>> = Mutex::new(vec![None; batches.len()]);

    let workers = options.jobs.min(batches.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= batches.len() {
                    break;
                }
                match run_batch(batches[i], backend, options, ledger) {
                    Ok(results) => slots.lock().unwrap()[i] = Some(results),
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut out = BTreeMap::new();
    for (batch, results) in batches.iter().zip(slots.into_inner().unwrap()) {
        let results = results.ok_or_else(|| {
            Error::InternalInvariant("sparse batch finished without a result".into())
        })?;
        for (content, result) in batch.iter().zip(results) {
            out.insert((*content).to_owned(), result);
        }
    }
    Ok(out)
}

fn run_batch<B: InferenceBackend + ?Sized>(
    batch: &[&str],
    backend: &B,
    options: &LlmOptions,
    ledger: &CostLedger,
) -> Result<Vec<TemplateResult>> {
    let envelope = options.prompt.build(batch, options.batch_size)?;
    let rollback = || batch.iter().map(|c| TemplateResult::rollback(c)).collect();
    for attempt in 0..=options.max_retries {
        ledger.add_invocation();
        match backend.infer(&envelope) {
            Ok(completion) => {
                ledger.add_tokens(completion.total_tokens());
                return Ok(match parse_response(&completion.text, batch.len()) {
                    Ok(lists) => batch
                        .iter()
                        .zip(&lists)
                        .map(|(c, vars)| validate_and_mask(c, vars))
                        .collect(),
                    Err(e) => {
                        log::warn!("{e}; rolling back {} message(s)", batch.len());
                        rollback()
                    }
                });
            }
            Err(BackendError::Transport(e)) => {
                log::warn!("request attempt {} failed: {e}", attempt + 1);
                if attempt < options.max_retries {
                    std::thread::sleep(options.backoff * 2u32.saturating_pow(attempt));
                }
            }
            Err(BackendError::Config(e)) => return Err(Error::Backend(e)),
        }
    }
    Ok(rollback())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SkeletonGroup;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn parse_well_formed_single_answer() {
        assert_eq!(
            parse_response("1: [\"/etc/zoo.cfg\"]\n", 1).unwrap(),
            vec![s(&["/etc/zoo.cfg"])]
        );
    }

    #[test]
    fn parse_ignores_chatter_and_fences() {
        let raw = "Sure!\n```\n2: []\n1: [\"a\", 7]\n```\n";
        assert_eq!(
            parse_response(raw, 2).unwrap(),
            vec![s(&["a", "7"]), vec![]]
        );
    }

    #[test]
    fn parse_arity_mismatch_fails() {
        assert!(parse_response("1: []\n2: []\n", 3).is_err());
        assert!(parse_response("1: []\n2: []\n", 1).is_err());
        assert!(parse_response("1: []\n1: []\n", 2).is_err());
    }

    #[test]
    fn parse_free_prose_fails() {
        assert!(parse_response("The variable is the path.", 1).is_err());
        assert!(parse_response("1: [not json]", 1).is_err());
    }

    #[test]
    fn validate_examples() {
        let r = validate_and_mask(
            "Reading configuration from: /etc/zoo.cfg",
            &s(&["/etc/zoo.cfg"]),
        );
        assert_eq!(r.template, "Reading configuration from: <*>");
        assert_eq!(r.parameters, s(&["/etc/zoo.cfg"]));
        assert_eq!(r.source, TemplateSource::Llm);

        let r = validate_and_mask("server started", &[]);
        assert_eq!(r, TemplateResult::rollback("server started"));

        let r = validate_and_mask("a b c", &s(&["zzz"]));
        assert_eq!(r.template, "a b c");
        assert_eq!(r.source, TemplateSource::Rollback);
    }

    #[test]
    fn partial_token_match_masks_whole_token() {
        let r = validate_and_mask("open file zoo.cfg now", &s(&["zoo"]));
        assert_eq!(r.template, "open file <*> now");
        assert_eq!(r.parameters, s(&["zoo.cfg"]));
    }

    #[test]
    fn longest_variable_wins_overlap() {
        let r = validate_and_mask("user bob logged in as bobby", &s(&["bob", "bobby"]));
        assert_eq!(r.template, "user <*> logged in as <*>");
        assert_eq!(r.parameters, s(&["bob", "bobby"]));
    }

    #[test]
    fn multi_token_variable_round_trips() {
        let r = validate_and_mask("error: disk full on node a", &s(&["disk full"]));
        assert_eq!(r.template, "error: <*> on node a");
        assert_eq!(r.reconstruct(), "error: disk full on node a");
    }

    struct CountingBackend(AtomicUsize);

    impl InferenceBackend for CountingBackend {
        fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError> {
            self.0.fetch_add(1, Ordering::Relaxed);
            MockBackend::new().infer(envelope)
        }
    }

    struct DownBackend;

    impl InferenceBackend for DownBackend {
        fn infer(&self, _: &PromptEnvelope) -> Result<Completion, BackendError> {
            Err(BackendError::Transport("timed out".into()))
        }
    }

    struct MisconfiguredBackend;

    impl InferenceBackend for MisconfiguredBackend {
        fn infer(&self, _: &PromptEnvelope) -> Result<Completion, BackendError> {
            Err(BackendError::Config("HTTP 401".into()))
        }
    }

    fn sparse(contents: &[&str]) -> Vec<SparseGroup> {
        contents
            .iter()
            .enumerate()
            .map(|(i, c)| SparseGroup {
                group: SkeletonGroup {
                    key: format!("key {i:03}"),
                    key_tokens: vec![],
                    members: vec![c.to_string()],
                    record_ids: vec![i],
                },
            })
            .collect()
    }

    fn fast_options(jobs: usize) -> LlmOptions {
        LlmOptions {
            jobs,
            backoff: Duration::from_millis(1),
            ..LlmOptions::default()
        }
    }

    #[test]
    fn no_groups_no_calls() {
        let b = CountingBackend(AtomicUsize::new(0));
        let ledger = CostLedger::new();
        let out = process_sparse(&[], &b, &fast_options(4), &ledger).unwrap();
        assert!(out.is_empty());
        assert_eq!(ledger.snapshot().llm_invocations, 0);
    }

    #[test]
    fn one_call_per_group_at_batch_size_one() {
        let lines: Vec<String> = (0..10).map(|i| format!("event {i} fired")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let b = CountingBackend(AtomicUsize::new(0));
        let ledger = CostLedger::new();
        let out = process_sparse(&sparse(&refs), &b, &fast_options(4), &ledger).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(b.0.load(Ordering::Relaxed), 10);
        assert_eq!(ledger.snapshot().llm_invocations, 10);
        assert_eq!(out["event 3 fired"].template, "event <*> fired");
    }

    #[test]
    fn batching_divides_calls() {
        let lines: Vec<String> = (0..10).map(|i| format!("event {i} fired")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let ledger = CostLedger::new();
        let opts = LlmOptions {
            batch_size: 4,
            ..fast_options(2)
        };
        let out = process_sparse(&sparse(&refs), &MockBackend::new(), &opts, &ledger).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(ledger.snapshot().llm_invocations, 3);
    }

    #[test]
    fn dead_backend_rolls_back_after_retries() {
        let ledger = CostLedger::new();
        let out = process_sparse(
            &sparse(&["took 37 ms", "a b 9"]),
            &DownBackend,
            &fast_options(2),
            &ledger,
        )
        .unwrap();
        assert!(out.iter().all(|(c, r)| r == &TemplateResult::rollback(c)));
        assert_eq!(ledger.snapshot().llm_invocations, 2 * 4);
        assert_eq!(ledger.snapshot().tokens_consumed, 0);
    }

    #[test]
    fn configuration_error_aborts() {
        let ledger = CostLedger::new();
        let err = process_sparse(
            &sparse(&["took 37 ms"]),
            &MisconfiguredBackend,
            &fast_options(1),
            &ledger,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
    }
}
