//! The HTTP backend against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use celerlog::llm::{
    build_prompt, process_sparse, BackendError, HttpBackend, HttpBackendConfig, InferenceBackend,
    LlmOptions,
};
use celerlog::router::group_by_skeleton;
use celerlog::{CostLedger, LogRecord, SparseGroup, TemplateSource};

#[derive(Debug, Clone)]
struct Request {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned (status, body) per connection, in order, and records
/// what it was sent.
fn serve(replies: Vec<(u16, String)>) -> (SocketAddr, Arc<Mutex<Vec<Request>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_owned();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Request {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (addr, seen, handle)
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 120, "completion_tokens": 7},
    })
    .to_string()
}

fn backend(addr: SocketAddr, key: Option<&str>) -> HttpBackend {
    HttpBackend::new(HttpBackendConfig {
        endpoint: format!("http://{addr}/v1/chat/completions"),
        model: "test-model".into(),
        api_key: key.map(str::to_owned),
        timeout: Duration::from_secs(5),
    })
    .unwrap()
}

#[test]
fn successful_request_shape_and_usage() {
    let (addr, seen, handle) = serve(vec![(200, completion("1: [\"37\"]"))]);
    let env = build_prompt(&["took 37 ms"], 1).unwrap();
    let c = backend(addr, Some("secret")).infer(&env).unwrap();
    handle.join().unwrap();
    assert_eq!(c.text, "1: [\"37\"]");
    assert_eq!(c.total_tokens(), 127);

    let req = &seen.lock().unwrap()[0];
    assert!(req.headers[0].starts_with("POST /v1/chat/completions"));
    assert!(req
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret")));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["temperature"], 0);
    let user = req.body["messages"][1]["content"].as_str().unwrap();
    assert!(user.contains("took 37 ms"), "{user}");
}

#[test]
fn status_codes_map_to_error_kinds() {
    let (addr, _, handle) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (401, "{\"error\":\"bad key\"}".into()),
        (404, "{}".into()),
        (200, "not json".into()),
    ]);
    let b = backend(addr, None);
    let env = build_prompt(&["x 1"], 1).unwrap();
    assert!(matches!(b.infer(&env), Err(BackendError::Transport(_))));
    assert!(matches!(b.infer(&env), Err(BackendError::Transport(_))));
    match b.infer(&env) {
        Err(BackendError::Config(m)) => assert!(m.contains("401"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(b.infer(&env), Err(BackendError::Config(_))));
    assert!(matches!(b.infer(&env), Err(BackendError::Transport(_))));
    handle.join().unwrap();
}

#[test]
fn refused_connection_is_transport() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let env = build_prompt(&["x 1"], 1).unwrap();
    assert!(matches!(
        backend(addr, None).infer(&env),
        Err(BackendError::Transport(_))
    ));
}

fn sparse(lines: &[&str]) -> Vec<SparseGroup> {
    let records: Vec<_> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| LogRecord::new(i, *l))
        .collect();
    group_by_skeleton(&records)
        .unwrap()
        .into_iter()
        .map(|group| SparseGroup { group })
        .collect()
}

fn options() -> LlmOptions {
    LlmOptions {
        jobs: 1,
        backoff: Duration::from_millis(1),
        ..LlmOptions::default()
    }
}

#[test]
fn retry_after_throttling_counts_every_attempt() {
    let (addr, _, handle) = serve(vec![(429, "{}".into()), (200, completion("1: [\"37\"]"))]);
    let ledger = CostLedger::new();
    let out = process_sparse(
        &sparse(&["took 37 ms"]),
        &backend(addr, None),
        &options(),
        &ledger,
    )
    .unwrap();
    handle.join().unwrap();
    assert_eq!(out["took 37 ms"].template, "took <*> ms");
    assert_eq!(out["took 37 ms"].source, TemplateSource::Llm);
    let snap = ledger.snapshot();
    assert_eq!(snap.llm_invocations, 2);
    assert_eq!(snap.tokens_consumed, 127);
}

#[test]
fn exhausted_retries_roll_back() {
    let (addr, _, handle) = serve(vec![(500, "{}".into()); 4]);
    let ledger = CostLedger::new();
    let out = process_sparse(
        &sparse(&["took 37 ms"]),
        &backend(addr, None),
        &options(),
        &ledger,
    )
    .unwrap();
    handle.join().unwrap();
    assert_eq!(out["took 37 ms"].template, "took 37 ms");
    assert_eq!(out["took 37 ms"].source, TemplateSource::Rollback);
    assert_eq!(ledger.snapshot().llm_invocations, 4);
}

#[test]
fn rejected_credentials_abort() {
    let (addr, _, handle) = serve(vec![(401, "{}".into())]);
    let err = process_sparse(
        &sparse(&["took 37 ms"]),
        &backend(addr, Some("bad")),
        &options(),
        &CostLedger::new(),
    )
    .unwrap_err();
    handle.join().unwrap();
    assert!(err.to_string().contains("401"), "{err}");
}

#[test]
fn cli_uses_endpoint_and_environment_key() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.log");
    // the two-message group anchors the bucket; the other one stays sparse
    std::fs::write(&input, "alpha bravo 1\nalpha bravo 2\ntook 37 ms\n").unwrap();
    let out = dir.path().join("out");
    let (addr, seen, handle) = serve(vec![(200, completion("1: [\"37\"]"))]);
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_celerlog"))
        .args([
            "parse",
            "--input",
            input.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ])
        .args([
            "--backend",
            "http",
            "--model",
            "m",
            "--bypass-groups",
            "0",
            "--bypass-length",
            "0",
        ])
        .args(["--endpoint", &format!("http://{addr}/chat")])
        .env("CELERLOG_API_KEY", "from-env")
        .status()
        .unwrap();
    handle.join().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(seen.lock().unwrap()[0]
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer from-env")));
    let structured = std::fs::read_to_string(out.join("structured.csv")).unwrap();
    assert!(structured.contains("took <*> ms"), "{structured}");
}
