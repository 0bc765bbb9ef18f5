//! Seeded synthetic log corpora with ground truth, for tests and benchmarks.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::model::PLACEHOLDER;

/// Slot markers: `{int}` `{hex}` `{ip}` `{ipport}` `{path}` `{blk}` `{id}`
/// `{word}` `{dur}` `{user}` `{host}` `{size}`.
pub const TEMPLATES: &[&str] = &[
    "Received block {blk} of size {int} from {ip}",
    "PacketResponder {int} for block {blk} terminating",
    "Verification succeeded for {blk}",
    "Deleting block {blk} file {path}",
    "Snapshotting: {hex} to {path}",
    "Accepted password for {user} from {ip} port {int} ssh2",
    "Failed password for invalid user {user} from {ip} port {int} ssh2",
    "Connection closed by {ip} [preauth]",
    "session opened for user {user} by (uid={int})",
    "Starting container {id} on host {host}",
    "Container {id} exited with status {int} after {dur}",
    "Worker {host} is {word}",
    "Task {id} moved from {word} to {word}",
    "Request {id} completed in {dur} with status {int}",
    "Cache miss for key {id} in region {word}",
    "Loaded configuration from {path}",
    "Opening socket connection to server {ipport}",
    "Established session {hex} with negotiated timeout {int} for client {ipport}",
    "Closed socket connection for client {ipport} which had sessionid {hex}",
    "Expiring session {hex}, timeout of {int}ms exceeded",
    "Node {host} reported {int} free slots",
    "Scheduling job {id} on queue {word} with priority {int}",
    "Job {id} failed on attempt {int} of {int}",
    "Heartbeat from {host} took {dur}",
    "Writing checkpoint {int} to {path}",
    "User {user} changed password",
    "Disk usage on {host} at {int} percent",
    "Rotating log file {path}",
    "Replica {host} lagging by {int} entries",
    "Elected {host} as leader for term {int}",
    "Dropped {int} packets on interface {word}",
    "Allocated {size} for buffer pool {word}",
    "Flushed memtable {id} with {int} entries to {path}",
    "Compaction of {int} files finished in {dur}",
    "Client {ipport} sent malformed header",
    "Retrying request {id} in {dur}",
    "Token for {user} expires in {int} seconds",
    "Mounted volume {id} at {path}",
    "Unmounted volume {id}",
    "Received signal {int}, shutting down",
    "Service {word} listening on port {int}",
    "Upstream {ipport} marked as {word}",
    "Generated report {id} for {user} in {dur}",
    "Resolved host {host} to {ip}",
    "Backup of database {word} completed with {size} written",
    "Temperature sensor {int} reads {int} degrees",
    "Moved shard {int} from {host} to {host}",
    "Lease {hex} renewed by {host}",
    "Index {word} rebuilt with {int} documents",
    "Quota exceeded for tenant {id} by {size}",
];

const WORDS: &[&str] = &[
    "idle",
    "busy",
    "pending",
    "running",
    "draining",
    "degraded",
    "primary",
    "standby",
    "eth0",
    "eth1",
    "orders",
    "billing",
    "inventory",
    "metrics",
    "search",
    "users",
];
const USERS: &[&str] = &[
    "root", "admin", "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan",
];
const ONE_OFF_WORDS: &[&str] = &[
    "unexpected",
    "kernel",
    "module",
    "watchdog",
    "reset",
    "thermal",
    "event",
    "fan",
    "firmware",
    "mismatch",
    "detected",
    "console",
    "bridge",
    "legacy",
    "driver",
    "ignored",
    "bus",
    "spurious",
    "interrupt",
    "vector",
    "probe",
    "deferred",
    "clock",
    "source",
    "unstable",
    "switching",
    "fallback",
    "governor",
    "quirk",
    "applied",
    "table",
    "corrupt",
    "parity",
    "lane",
    "link",
    "training",
    "retimer",
    "vendor",
    "hook",
    "skipped",
    "mode",
    "panel",
    "backlight",
    "audio",
    "codec",
    "microcode",
    "loader",
    "stale",
    "entry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSpec {
    pub lines: usize,
    /// Number of entries of [`TEMPLATES`] to draw from (at most 50).
    pub templates: usize,
    /// One-off lines with no parameters, mixed in at random positions.
    pub isolated: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            lines: 10_000,
            templates: 50,
            isolated: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub lines: Vec<String>,
    /// Ground-truth template per line.
    pub truth: Vec<String>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// `LineId,EventTemplate` CSV with 0-based ids.
    pub fn ground_truth_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["LineId", "EventTemplate"]).unwrap();
        for (i, t) in self.truth.iter().enumerate() {
            w.write_record([i.to_string().as_str(), t]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn raw_text(&self) -> String {
        let mut s = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

fn slot_value(slot: &str, rng: &mut StdRng) -> String {
    match slot {
        "int" => rng.gen_range(0..100_000).to_string(),
        "hex" => format!("0x{:x}", rng.gen_range(0u64..1 << 40)),
        "ip" => format!(
            "10.{}.{}.{}",
            rng.gen_range(0..256),
            rng.gen_range(0..256),
            rng.gen_range(1..255)
        ),
        "ipport" => format!(
            "/10.{}.{}.{}:{}",
            rng.gen_range(0..256),
            rng.gen_range(0..256),
            rng.gen_range(1..255),
            rng.gen_range(1024..65535)
        ),
        "path" => format!(
            "/data/{}/part-{:05}.log",
            WORDS.choose(rng).unwrap(),
            rng.gen_range(0..100_000)
        ),
        "blk" => format!("blk_{}", rng.gen_range(-(1i64 << 62)..(1i64 << 62))),
        "id" => format!("j{:07x}", rng.gen_range(0u32..1 << 28)),
        "word" => WORDS.choose(rng).unwrap().to_string(),
        "dur" => format!("{}ms", rng.gen_range(1..10_000)),
        "user" => USERS.choose(rng).unwrap().to_string(),
        "host" => format!("node-{}", rng.gen_range(1..400)),
        "size" => format!("{}MB", rng.gen_range(1..4096)),
        other => panic!("unknown slot {other}"),
    }
}

/// Expands one template; returns (line, ground truth).
fn render(template: &str, rng: &mut StdRng) -> (String, String) {
    let mut line = String::new();
    let mut truth = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("balanced slot");
        line.push_str(&rest[..open]);
        truth.push_str(&rest[..open]);
        line.push_str(&slot_value(&rest[open + 1..close], rng));
        truth.push_str(PLACEHOLDER);
        rest = &rest[close + 1..];
    }
    line.push_str(rest);
    truth.push_str(rest);
    (line, truth)
}

fn one_off(rng: &mut StdRng, seen: &mut std::collections::HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(5..12);
        let words: Vec<&str> = (0..n)
            .map(|_| *ONE_OFF_WORDS.choose(rng).unwrap())
            .collect();
        let line = words.join(" ");
        if seen.insert(line.clone()) {
            return line;
        }
    }
}

/// Generates a corpus. Template frequencies follow a 1/rank law, so a few
/// templates dominate and the tail is thin.
pub fn generate(spec: &CorpusSpec, seed: u64) -> SyntheticCorpus {
    let mut rng = StdRng::seed_from_u64(seed);
    let templates = &TEMPLATES[..spec.templates.min(TEMPLATES.len())];
    let isolated = spec.isolated.min(spec.lines);
    let templated = spec.lines - isolated;

    let weights: Vec<f64> = (1..=templates.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    // every template gets at least one line when there is room
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((w / total) * templated as f64).floor() as usize)
        .collect();
    if templated >= templates.len() {
        counts.iter_mut().for_each(|c| *c = (*c).max(1));
    }
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    let n = counts.len();
    while assigned < templated && n > 0 {
        counts[i % n] += 1;
        assigned += 1;
        i += 1;
    }
    while assigned > templated {
        let j = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| **c)
            .map(|(j, _)| j)
            .unwrap();
        counts[j] -= 1;
        assigned -= 1;
    }

    let mut pairs: Vec<(String, String)> = Vec::with_capacity(spec.lines);
    for (t, &n) in templates.iter().zip(&counts) {
        for _ in 0..n {
            pairs.push(render(t, &mut rng));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..isolated {
        let l = one_off(&mut rng, &mut seen);
        pairs.push((l.clone(), l));
    }
    pairs.shuffle(&mut rng);
    let (lines, truth) = pairs.into_iter().unzip();
    SyntheticCorpus { lines, truth }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let spec = CorpusSpec {
            lines: 1000,
            templates: 50,
            isolated: 20,
        };
        let a = generate(&spec, 7);
        let b = generate(&spec, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.truth.iter().filter(|t| !t.contains("<*>")).count() >= 20);
        let c = generate(&spec, 8);
        assert_ne!(a.lines, c.lines);
    }

    #[test]
    fn truth_aligns_with_lines() {
        let corpus = generate(&CorpusSpec::default(), 1);
        for (l, t) in corpus.lines.iter().zip(&corpus.truth) {
            assert_eq!(
                l.split_whitespace().count(),
                t.split_whitespace().count(),
                "{l} / {t}"
            );
        }
    }

    #[test]
    fn every_template_is_used() {
        let corpus = generate(&CorpusSpec::default(), 3);
        let distinct: std::collections::HashSet<_> = corpus.truth.iter().collect();
        assert!(distinct.len() >= 50 + 100 - 5);
    }
}
