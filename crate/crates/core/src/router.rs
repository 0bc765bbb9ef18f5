//! Dense/sparse routing: skeleton grouping, length bucketing and
//! anchor-based merging with a dynamically selected similarity threshold.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::masker::{Masker, VerbLexicon};
use crate::model::{DenseGroup, LogBucket, LogRecord, RouterConfig, SkeletonGroup, SparseGroup};
use crate::pipeline::{build_pool, parallel_map_buckets};

/// Slack for comparing scores against grid thresholds.
const EPS: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Groups records by masked skeleton using the bundled rules.
pub fn group_by_skeleton(records: &[LogRecord]) -> Result<Vec<SkeletonGroup>> {
    group_by_skeleton_with(records, crate::masker::default_masker())
}

/// Groups records by masked skeleton. Distinct contents are masked once each
/// (in parallel on the current rayon pool); output is sorted by key.
pub fn group_by_skeleton_with(
    records: &[LogRecord],
    masker: &Masker,
) -> Result<Vec<SkeletonGroup>> {
    let mut by_content: HashMap<&str, Vec<usize>> = HashMap::new();
    for r in records {
        by_content
            .entry(r.content.as_str())
            .or_default()
            .push(r.line_id);
    }
    let mut distinct: Vec<(&str, Vec<usize>)> = by_content.into_iter().collect();
    distinct.sort_unstable_by(|a, b| a.0.cmp(b.0));

    let skeletons = distinct
        .par_iter()
        .map(|(content, _)| masker.mask_message(content))
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<String, SkeletonGroup> = BTreeMap::new();
    for ((content, ids), sk) in distinct.into_iter().zip(skeletons) {
        let g = groups
            .entry(sk.skeleton.clone())
            .or_insert_with(|| SkeletonGroup {
                key: sk.skeleton,
                key_tokens: sk.key_tokens,
                members: Vec::new(),
                record_ids: Vec::new(),
            });
        g.members.push(content.to_owned());
        g.record_ids.extend(ids);
    }
    Ok(groups
        .into_values()
        .map(|mut g| {
            g.record_ids.sort_unstable();
            g
        })
        .collect())
}

/// Puts groups with the same key length into one bucket; buckets ascend by length.
pub fn bucket_by_length(groups: Vec<SkeletonGroup>) -> Vec<LogBucket> {
    let mut buckets: BTreeMap<usize, Vec<SkeletonGroup>> = BTreeMap::new();
    for g in groups {
        buckets.entry(g.key_tokens.len()).or_default().push(g);
    }
    buckets
        .into_iter()
        .map(|(length, groups)| LogBucket { length, groups })
        .collect()
}

/// Jaccard similarity over (position, token) pairs. With `m` matching
/// positions out of `L` this is `m / (2L - m)`.
pub fn pos_jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InternalInvariant(format!(
            "positional jaccard on keys of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let matches = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.as_ref() == y.as_ref())
        .count();
    Ok(matches as f64 / (2 * a.len() - matches) as f64)
}

/// Fraction of candidate scores strictly below `tau`; 0 for no candidates.
pub fn singleton_ratio(similarities: &[f64], tau: f64) -> f64 {
    if similarities.is_empty() {
        return 0.0;
    }
    let below = similarities.iter().filter(|&&s| s < tau - EPS).count();
    below as f64 / similarities.len() as f64
}

/// Sweeps the threshold grid upward and returns the grid value just before
/// the singleton ratio first reaches `p_quantile` (clamped to `tau_min`),
/// or `tau_max` if it never does.
pub fn select_threshold(similarities: &[f64], config: &RouterConfig) -> f64 {
    let steps = ((config.tau_max - config.tau_min) / config.tau_step + EPS).floor() as usize;
    let grid = |i: usize| snap(config.tau_min + i as f64 * config.tau_step);
    for i in 0..=steps {
        if singleton_ratio(similarities, grid(i)) >= config.p_quantile - EPS {
            return if i == 0 { config.tau_min } else { grid(i - 1) };
        }
    }
    config.tau_max
}

/// Per-round merge bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeState {
    pub anchor: SkeletonGroup,
    /// Candidate key -> similarity to the anchor.
    pub similarities: BTreeMap<String, f64>,
    pub tau: f64,
    pub k_limit: usize,
    pub dense_emitted: usize,
}

/// Outcome of one anchor round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRound {
    pub anchor_key: String,
    pub tau: f64,
    pub merged_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BucketRouting {
    pub dense: Vec<DenseGroup>,
    pub sparse: Vec<SparseGroup>,
    pub bypassed: bool,
    pub rounds: Vec<MergeRound>,
}

/// Anchor-based merging over one bucket.
pub fn merge_bucket(
    bucket: &LogBucket,
    config: &RouterConfig,
    lexicon: &VerbLexicon,
) -> Result<BucketRouting> {
    if bucket.length <= config.bypass_length || bucket.groups.len() <= config.bypass_group_count {
        return Ok(BucketRouting {
            dense: bucket
                .groups
                .iter()
                .map(|g| DenseGroup {
                    member_groups: vec![g.clone()],
                    anchor_key: None,
                })
                .collect(),
            sparse: Vec::new(),
            bypassed: true,
            rounds: Vec::new(),
        });
    }

    let k_limit = ((config.alpha * bucket.groups.len() as f64 + EPS).floor() as usize).max(1);

    let mut remaining: Vec<(&SkeletonGroup, BTreeSet<String>)> = bucket
        .groups
        .iter()
        .map(|g| (g, lexicon.extract_verbs(&g.key)))
        .collect();
    remaining.sort_by(|a, b| {
        b.0.unique_count()
            .cmp(&a.0.unique_count())
            .then_with(|| a.0.key.cmp(&b.0.key))
    });

    let mut out = BucketRouting::default();
    while !remaining.is_empty() && out.dense.len() < k_limit {
        let (anchor, anchor_verbs) = remaining.remove(0);
        let sims = remaining
            .iter()
            .map(|(g, _)| pos_jaccard(&anchor.key_tokens, &g.key_tokens))
            .collect::<Result<Vec<f64>>>()?;
        let state = MergeState {
            anchor: anchor.clone(),
            similarities: remaining
                .iter()
                .zip(&sims)
                .map(|((g, _), &s)| (g.key.clone(), s))
                .collect(),
            tau: select_threshold(&sims, config),
            k_limit,
            dense_emitted: out.dense.len(),
        };

        let mut members = vec![anchor.clone()];
        let mut merged_keys = Vec::new();
        let mut kept = Vec::with_capacity(remaining.len());
        for ((g, verbs), s) in remaining.into_iter().zip(sims) {
            if s + EPS >= state.tau && anchor_verbs.is_subset(&verbs) {
                merged_keys.push(g.key.clone());
                members.push(g.clone());
            } else {
                kept.push((g, verbs));
            }
        }
        remaining = kept;
        out.rounds.push(MergeRound {
            anchor_key: anchor.key.clone(),
            tau: state.tau,
            merged_keys,
        });
        out.dense.push(DenseGroup {
            member_groups: members,
            anchor_key: Some(anchor.key.clone()),
        });
    }
    out.sparse = remaining
        .into_iter()
        .map(|(g, _)| SparseGroup { group: g.clone() })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RoutingStats {
    pub records: usize,
    pub skeleton_groups: usize,
    pub buckets: usize,
    pub bypassed_buckets: usize,
    pub dense_groups: usize,
    pub sparse_groups: usize,
    pub dense_records: usize,
    pub sparse_records: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Routing {
    pub dense: Vec<DenseGroup>,
    pub sparse: Vec<SparseGroup>,
    pub stats: RoutingStats,
}

/// Full routing with the bundled mask rules and verb lexicon.
pub fn route(records: &[LogRecord], config: &RouterConfig) -> Result<Routing> {
    route_with(
        records,
        config,
        crate::masker::default_masker(),
        crate::masker::default_lexicon(),
    )
}

pub fn route_with(
    records: &[LogRecord],
    config: &RouterConfig,
    masker: &Masker,
    lexicon: &VerbLexicon,
) -> Result<Routing> {
    config.validate()?;
    if records.is_empty() {
        return Ok(Routing::default());
    }
    let pool = build_pool(config.jobs)?;
    let groups = pool.install(|| group_by_skeleton_with(records, masker))?;
    let skeleton_groups = groups.len();
    let buckets = bucket_by_length(groups);
    let per_bucket =
        parallel_map_buckets(&buckets, config.jobs, |b| merge_bucket(b, config, lexicon))?;

    let mut routing = Routing {
        stats: RoutingStats {
            records: records.len(),
            skeleton_groups,
            buckets: buckets.len(),
            ..RoutingStats::default()
        },
        ..Routing::default()
    };
    for outcome in per_bucket {
        let outcome = outcome?;
        routing.stats.bypassed_buckets += usize::from(outcome.bypassed);
        routing.dense.extend(outcome.dense);
        routing.sparse.extend(outcome.sparse);
    }
    routing.stats.dense_groups = routing.dense.len();
    routing.stats.sparse_groups = routing.sparse.len();
    routing.stats.dense_records = routing.dense.iter().map(DenseGroup::record_count).sum();
    routing.stats.sparse_records = routing
        .sparse
        .iter()
        .map(|s| s.group.record_ids.len())
        .sum();
    Ok(routing)
}
