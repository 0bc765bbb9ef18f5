//! End-to-end run: ingest, route, process dense and sparse groups
//! concurrently, assemble per-record results and write the output files.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::llm::{process_sparse, InferenceBackend, LlmOptions};
use crate::masker::{strip_header, HeaderPattern};
use crate::model::{
    CostLedger, LedgerSnapshot, LogBucket, LogRecord, RouterConfig, TemplateResult, TemplateSource,
};
use crate::router::{route, RoutingStats};
use crate::stat::{extract_template, refine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Raw,
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub blank_lines: usize,
    pub invalid_utf8_lines: usize,
}

/// Reads records from a raw log file (one message per line) or from a CSV
/// file with a `Content` column.
pub fn ingest(
    path: &Path,
    format: InputFormat,
    header: Option<&HeaderPattern>,
) -> Result<(Vec<LogRecord>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    let mut push = |content: &str, report: &mut IngestReport| {
        if content.trim().is_empty() {
            report.blank_lines += 1;
        } else {
            records.push(LogRecord::new(records.len(), content));
        }
    };

    match format {
        InputFormat::Raw => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut reader = BufReader::new(file);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                let n = reader
                    .read_until(b'\n', &mut buf)
                    .map_err(|e| Error::io(path, e))?;
                if n == 0 {
                    break;
                }
                while matches!(buf.last(), Some(b'\n' | b'\r')) {
                    buf.pop();
                }
                let line = match std::str::from_utf8(&buf) {
                    Ok(s) => std::borrow::Cow::Borrowed(s),
                    Err(_) => {
                        report.invalid_utf8_lines += 1;
                        String::from_utf8_lossy(&buf)
                    }
                };
                push(strip_header(&line, header), &mut report);
            }
        }
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .flexible(true)
                .from_path(path)
                .map_err(|e| Error::csv(path, e))?;
            let headers = reader.byte_headers().map_err(|e| Error::csv(path, e))?;
            let col = headers
                .iter()
                .position(|h| h == b"Content")
                .ok_or_else(|| Error::MissingColumn {
                    path: path.to_owned(),
                    column: "Content".into(),
                })?;
            for row in reader.byte_records() {
                let row = row.map_err(|e| Error::csv(path, e))?;
                let raw = row.get(col).unwrap_or_default();
                let content = match std::str::from_utf8(raw) {
                    Ok(s) => std::borrow::Cow::Borrowed(s),
                    Err(_) => {
                        report.invalid_utf8_lines += 1;
                        String::from_utf8_lossy(raw)
                    }
                };
                push(strip_header(&content, header), &mut report);
            }
        }
    }
    report.records = records.len();
    Ok((records, report))
}

pub(crate) fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Applies `work` to every bucket on up to `workers` threads. Results come
/// back in bucket-length order; a panicking bucket fails the whole call.
pub fn parallel_map_buckets<R, F>(buckets: &[LogBucket], workers: usize, work: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&LogBucket) -> R + Sync,
{
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let mut order: Vec<&LogBucket> = buckets.iter().collect();
    order.sort_by_key(|b| b.length);
    let pool = build_pool(workers)?;
    pool.install(|| {
        order
            .par_iter()
            .map(|b| {
                catch_unwind(AssertUnwindSafe(|| work(b))).map_err(|p| Error::WorkerPanic {
                    bucket_length: b.length,
                    message: panic_message(p),
                })
            })
            .collect()
    })
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRecord {
    pub line_id: usize,
    pub content: String,
    pub template: String,
    pub parameters: Vec<String>,
    pub source: TemplateSource,
}

#[derive(Debug)]
pub struct RunOutput {
    /// Ordered by line id.
    pub records: Vec<ParsedRecord>,
    /// Distinct templates with occurrence counts, most frequent first.
    pub catalog: Vec<(String, usize)>,
    pub ledger: LedgerSnapshot,
    pub routing: RoutingStats,
    pub ingest: IngestReport,
}

/// Parses in-memory records. Dense groups go to the statistical processor
/// and sparse groups to `backend`, concurrently.
pub fn run_records<B: InferenceBackend + ?Sized>(
    records: &[LogRecord],
    config: &RouterConfig,
    backend: &B,
    llm: &LlmOptions,
    ledger: &CostLedger,
) -> Result<(Vec<ParsedRecord>, RoutingStats)> {
    let routing = route(records, config)?;
    ledger.add_dense_records(routing.stats.dense_records as u64);
    ledger.add_sparse_records(routing.stats.sparse_records as u64);

    let pool = build_pool(config.jobs)?;
    let (dense_results, sparse_results) = std::thread::scope(|s| {
        let sparse = s.spawn(|| process_sparse(&routing.sparse, backend, llm, ledger));
        let dense: Vec<BTreeMap<String, TemplateResult>> = pool.install(|| {
            routing
                .dense
                .par_iter()
                .map(|g| extract_template(g).by_message)
                .collect()
        });
        let sparse = sparse
            .join()
            .unwrap_or_else(|p| Err(Error::InternalInvariant(panic_message(p))));
        (dense, sparse)
    });
    let sparse_results = sparse_results?;

    let mut by_content: HashMap<&str, &TemplateResult> = HashMap::new();
    for map in &dense_results {
        by_content.extend(map.iter().map(|(k, v)| (k.as_str(), v)));
    }
    by_content.extend(sparse_results.iter().map(|(k, v)| (k.as_str(), v)));

    let parsed = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let found = by_content.get(r.content.as_str()).copied().ok_or_else(|| {
                    Error::InternalInvariant(format!("record {} was never routed", r.line_id))
                })?;
                let result = refine(found.clone(), &r.content);
                Ok(ParsedRecord {
                    line_id: r.line_id,
                    content: r.content.clone(),
                    template: result.template,
                    parameters: result.parameters,
                    source: result.source,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((parsed, routing.stats))
}

/// Distinct templates with counts, by descending count then template text.
pub fn catalog(records: &[ParsedRecord]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.template.as_str()).or_default() += 1;
    }
    let mut out: Vec<(String, usize)> =
        counts.into_iter().map(|(t, n)| (t.to_owned(), n)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Everything needed for one `parse` invocation.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub input: PathBuf,
    pub format: InputFormat,
    pub header_pattern: Option<String>,
    pub output_dir: PathBuf,
    pub config: RouterConfig,
    pub llm: LlmOptions,
}

/// Ingests, parses and writes all three output files. Wall time covers
/// everything up to and including the CSV outputs.
pub fn run<B: InferenceBackend + ?Sized>(options: &ParseOptions, backend: &B) -> Result<RunOutput> {
    let start = Instant::now();
    options.config.validate()?;
    let header = options
        .header_pattern
        .as_deref()
        .map(HeaderPattern::new)
        .transpose()?;
    fs::create_dir_all(&options.output_dir).map_err(|e| Error::io(&options.output_dir, e))?;

    let (records, ingest_report) = ingest(&options.input, options.format, header.as_ref())?;
    let ledger = CostLedger::new();
    let (parsed, routing) = run_records(&records, &options.config, backend, &options.llm, &ledger)?;
    let catalog = catalog(&parsed);

    write_structured(&parsed, &options.output_dir.join(STRUCTURED_FILE))?;
    write_templates(&catalog, &options.output_dir.join(TEMPLATES_FILE))?;
    ledger.record_wall_time(start.elapsed());

    let out = RunOutput {
        records: parsed,
        catalog,
        ledger: ledger.snapshot(),
        routing,
        ingest: ingest_report,
    };
    write_run_json(&out, &options.config, &options.output_dir.join(RUN_FILE))?;
    Ok(out)
}

pub const STRUCTURED_FILE: &str = "structured.csv";
pub const TEMPLATES_FILE: &str = "templates.csv";
pub const RUN_FILE: &str = "run.json";

/// Joins parameters with `|`, escaping a literal `|` as `\|`.
pub fn encode_parameters<S: AsRef<str>>(params: &[S]) -> String {
    params
        .iter()
        .map(|p| p.as_ref().replace('|', "\\|"))
        .collect::<Vec<_>>()
        .join("|")
}

/// Inverse of [`encode_parameters`].
pub fn decode_parameters(field: &str) -> Vec<String> {
    if field.is_empty() {
        return Vec::new();
    }
    let mut out = vec![String::new()];
    let mut chars = field.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                chars.next();
                out.last_mut().unwrap().push('|');
            }
            '|' => out.push(String::new()),
            c => out.last_mut().unwrap().push(c),
        }
    }
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn write_structured(records: &[ParsedRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["LineId", "Content", "EventTemplate", "Parameters"])
        .map_err(err)?;
    for r in records {
        w.write_record([
            r.line_id.to_string().as_str(),
            &r.content,
            &r.template,
            &encode_parameters(&r.parameters),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_templates(catalog: &[(String, usize)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["EventTemplate", "Occurrences"])
        .map_err(err)?;
    for (t, n) in catalog {
        w.write_record([t.as_str(), n.to_string().as_str()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunJson<'a> {
    ledger: &'a LedgerSnapshot,
    config: &'a RouterConfig,
    routing: &'a RoutingStats,
    ingest: &'a IngestReport,
    templates: usize,
}

fn write_run_json(out: &RunOutput, config: &RouterConfig, path: &Path) -> Result<()> {
    let body = RunJson {
        ledger: &out.ledger,
        config,
        routing: &out.routing,
        ingest: &out.ingest,
        templates: out.catalog.len(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &body)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `structured.csv`, `templates.csv` and `run.json` into `out_dir`.
pub fn write_output(out: &RunOutput, config: &RouterConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_structured(&out.records, &out_dir.join(STRUCTURED_FILE))?;
    write_templates(&out.catalog, &out_dir.join(TEMPLATES_FILE))?;
    write_run_json(out, config, &out_dir.join(RUN_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use crate::model::SkeletonGroup;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn ingest_raw_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.log", b"one 1\ntwo 2\r\nthree 3\n");
        let (recs, rep) = ingest(&p, InputFormat::Raw, None).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.line_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(recs[1].content, "two 2");
        assert_eq!(rep.records, 3);
    }

    #[test]
    fn ingest_counts_blank_and_invalid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.log", b"one\n\n   \nbad \xff byte\n");
        let (recs, rep) = ingest(&p, InputFormat::Raw, None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(rep.blank_lines, 2);
        assert_eq!(rep.invalid_utf8_lines, 1);
        assert!(recs[1].content.contains('\u{FFFD}'));
    }

    #[test]
    fn ingest_csv_content_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("LineId,Level,Content\n");
        for i in 0..5 {
            body.push_str(&format!("{i},INFO,\"job {i}, done\"\n"));
        }
        let p = write(dir.path(), "a.csv", body.as_bytes());
        let (recs, _) = ingest(&p, InputFormat::Csv, None).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[4].content, "job 4, done");
    }

    #[test]
    fn ingest_csv_without_content_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", b"LineId,Message\n1,hello\n");
        assert!(matches!(
            ingest(&p, InputFormat::Csv, None),
            Err(Error::MissingColumn { .. })
        ));
    }

    #[test]
    fn ingest_missing_file_fails() {
        assert!(matches!(
            ingest(Path::new("/nonexistent/x.log"), InputFormat::Raw, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ingest_applies_header_pattern() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.log",
            b"2025-01-01 INFO hello there\nno header\n",
        );
        let h = HeaderPattern::new(r"\S+ [A-Z]+ (?P<content>.*)").unwrap();
        let (recs, _) = ingest(&p, InputFormat::Raw, Some(&h)).unwrap();
        assert_eq!(recs[0].content, "hello there");
        assert_eq!(recs[1].content, "no header");
    }

    fn buckets(n: usize) -> Vec<LogBucket> {
        (1..=n)
            .rev()
            .map(|length| LogBucket {
                length,
                groups: vec![SkeletonGroup {
                    key: "k".into(),
                    key_tokens: vec!["k".into(); length],
                    members: vec!["m".into()],
                    record_ids: vec![0],
                }],
            })
            .collect()
    }

    #[test]
    fn parallel_map_is_ordered_and_worker_independent() {
        let b = buckets(10);
        let one = parallel_map_buckets(&b, 1, |b| b.length * 2).unwrap();
        let eight = parallel_map_buckets(&b, 8, |b| b.length * 2).unwrap();
        assert_eq!(one, (1..=10).map(|l| l * 2).collect::<Vec<_>>());
        assert_eq!(one, eight);
        assert!(parallel_map_buckets(&[], 4, |b| b.length)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn parallel_map_reports_panicking_bucket() {
        let b = buckets(5);
        let err = parallel_map_buckets(&b, 2, |b| {
            if b.length == 3 {
                panic!("boom");
            }
            b.length
        })
        .unwrap_err();
        match err {
            Error::WorkerPanic {
                bucket_length,
                message,
            } => {
                assert_eq!(bucket_length, 3);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_runs_clean() {
        let ledger = CostLedger::new();
        let (parsed, stats) = run_records(
            &[],
            &RouterConfig::default(),
            &MockBackend::new(),
            &LlmOptions::default(),
            &ledger,
        )
        .unwrap();
        assert!(parsed.is_empty());
        assert_eq!(stats, RoutingStats::default());
        let snap = ledger.snapshot();
        assert_eq!(
            (
                snap.llm_invocations,
                snap.tokens_consumed,
                snap.dense_record_count
            ),
            (0, 0, 0)
        );
    }

    #[test]
    fn parameter_escaping() {
        assert_eq!(encode_parameters(&["a|b", "c"]), "a\\|b|c");
        assert_eq!(decode_parameters("a\\|b|c"), vec!["a|b", "c"]);
        assert_eq!(encode_parameters::<&str>(&[]), "");
        assert!(decode_parameters("").is_empty());
    }

    #[test]
    fn catalog_orders_by_count_then_text() {
        let rec = |t: &str| ParsedRecord {
            line_id: 0,
            content: String::new(),
            template: t.into(),
            parameters: vec![],
            source: TemplateSource::Statistical,
        };
        let c = catalog(&[rec("b"), rec("a"), rec("c"), rec("c")]);
        assert_eq!(c, vec![("c".into(), 2), ("a".into(), 1), ("b".into(), 1)]);
    }

    proptest! {
        #[test]
        fn parameter_encoding_round_trips(
            params in prop::collection::vec("[a-z|:/ ]{1,6}[a-z|]", 0..5)
        ) {
            prop_assert_eq!(decode_parameters(&encode_parameters(&params)), params);
        }
    }
}
