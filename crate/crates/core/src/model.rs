//! Shared domain types: records, skeleton groups, buckets, routed groups,
//! per-record results and the run cost ledger.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Placeholder written at every parameter position of a template.
pub const PLACEHOLDER: &str = "<*>";

/// One input log message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub line_id: usize,
    pub content: String,
    pub tokens: Vec<String>,
}

impl LogRecord {
    pub fn new(line_id: usize, content: impl Into<String>) -> Self {
        let content = content.into();
        let tokens = content.split_whitespace().map(str::to_owned).collect();
        LogRecord {
            line_id,
            content,
            tokens,
        }
    }
}

/// All records whose masked skeleton is `key`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGroup {
    pub key: String,
    pub key_tokens: Vec<String>,
    /// Distinct raw contents, sorted.
    pub members: Vec<String>,
    /// Line ids mapped to this group, ascending.
    pub record_ids: Vec<usize>,
}

impl SkeletonGroup {
    pub fn unique_count(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.key_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_tokens.is_empty()
    }
}

/// Skeleton groups sharing one key length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogBucket {
    pub length: usize,
    pub groups: Vec<SkeletonGroup>,
}

/// Skeleton groups merged together and handed to the statistical processor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseGroup {
    pub member_groups: Vec<SkeletonGroup>,
    /// `None` when the bucket skipped merging.
    pub anchor_key: Option<String>,
}

impl DenseGroup {
    pub fn record_count(&self) -> usize {
        self.member_groups.iter().map(|g| g.record_ids.len()).sum()
    }
}

/// A single skeleton group left unmerged; sent to the LLM processor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGroup {
    pub group: SkeletonGroup,
}

/// Knobs for routing and for the two processors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Fraction of a bucket's groups that may become anchors.
    pub alpha: f64,
    /// Singleton-ratio limit that stops the threshold sweep.
    pub p_quantile: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_step: f64,
    /// Buckets whose token length is at most this skip merging.
    pub bypass_length: usize,
    /// Buckets with at most this many groups skip merging.
    pub bypass_group_count: usize,
    pub jobs: usize,
    pub llm_batch_size: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            alpha: 0.5,
            p_quantile: 0.95,
            tau_min: 0.5,
            tau_max: 0.95,
            tau_step: 0.01,
            bypass_length: 3,
            bypass_group_count: 2,
            jobs: 8,
            llm_batch_size: 1,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), Error> {
        fn bad(msg: String) -> Result<(), Error> {
            Err(Error::Config(msg))
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.p_quantile > 0.0 && self.p_quantile <= 1.0) {
            return bad(format!(
                "p-quantile must be in (0, 1], got {}",
                self.p_quantile
            ));
        }
        if !(0.0 <= self.tau_min && self.tau_min < self.tau_max && self.tau_max <= 1.0) {
            return bad(format!(
                "similarity sweep needs 0 <= tau_min < tau_max <= 1, got [{}, {}]",
                self.tau_min, self.tau_max
            ));
        }
        if !(self.tau_step > 0.0 && self.tau_step.is_finite()) {
            return bad(format!("tau-step must be > 0, got {}", self.tau_step));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.llm_batch_size == 0 {
            return bad("batch-size must be at least 1".into());
        }
        Ok(())
    }
}

/// Who produced a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateSource {
    Statistical,
    Llm,
    Rollback,
}

/// Template and extracted parameters for one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateResult {
    pub template: String,
    pub parameters: Vec<String>,
    pub source: TemplateSource,
}

impl TemplateResult {
    pub fn rollback(content: &str) -> Self {
        TemplateResult {
            template: content.to_owned(),
            parameters: Vec::new(),
            source: TemplateSource::Rollback,
        }
    }

    /// Substitutes the parameters back into the template, in order.
    pub fn reconstruct(&self) -> String {
        reconstruct(&self.template, &self.parameters)
    }
}

/// Fills each placeholder token of `template` with the next parameter.
pub fn reconstruct<S: AsRef<str>>(template: &str, parameters: &[S]) -> String {
    let mut params = parameters.iter();
    template
        .split_whitespace()
        .map(|tok| {
            if tok == PLACEHOLDER {
                params.next().map(|p| p.as_ref()).unwrap_or(tok)
            } else {
                tok
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Run-level cost counters. Safe to bump from any worker.
#[derive(Debug, Default)]
pub struct CostLedger {
    wall_time_nanos: AtomicU64,
    tokens_consumed: AtomicU64,
    llm_invocations: AtomicU64,
    dense_record_count: AtomicU64,
    sparse_record_count: AtomicU64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tokens(&self, n: u64) {
        self.tokens_consumed.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_invocation(&self) {
        self.llm_invocations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_dense_records(&self, n: u64) {
        self.dense_record_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_sparse_records(&self, n: u64) {
        self.sparse_record_count.fetch_add(n, Ordering::Relaxed);
    }

    /// Records elapsed wall time; the stored value never decreases.
    pub fn record_wall_time(&self, elapsed: std::time::Duration) {
        let nanos = u64::try_from(elapsed.as_nanos()).unwrap_or(u64::MAX);
        self.wall_time_nanos.fetch_max(nanos, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            wall_time_seconds: self.wall_time_nanos.load(Ordering::Relaxed) as f64 / 1e9,
            tokens_consumed: self.tokens_consumed.load(Ordering::Relaxed),
            llm_invocations: self.llm_invocations.load(Ordering::Relaxed),
            dense_record_count: self.dense_record_count.load(Ordering::Relaxed),
            sparse_record_count: self.sparse_record_count.load(Ordering::Relaxed),
        }
    }
}

/// Plain copy of the ledger counters, as written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub wall_time_seconds: f64,
    pub tokens_consumed: u64,
    pub llm_invocations: u64,
    pub dense_record_count: u64,
    pub sparse_record_count: u64,
}
