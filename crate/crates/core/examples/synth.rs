//! Writes a synthetic log corpus and its ground truth.
//!
//! cargo run --example synth -- OUT_DIR [LINES] [SEED]

use std::path::PathBuf;

use celerlog::synth::{generate, CorpusSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synth OUT_DIR [LINES] [SEED]");
        std::process::exit(2);
    };
    let lines = args.next().map_or(10_000, |s| s.parse().expect("LINES"));
    let seed = args.next().map_or(1, |s| s.parse().expect("SEED"));
    let corpus = generate(
        &CorpusSpec {
            lines,
            ..CorpusSpec::default()
        },
        seed,
    );
    std::fs::create_dir_all(&dir).expect("create output directory");
    std::fs::write(dir.join("corpus.log"), corpus.raw_text()).expect("write corpus");
    std::fs::write(dir.join("ground_truth.csv"), corpus.ground_truth_csv()).expect("write truth");
    println!("{} lines -> {}", corpus.len(), dir.display());
}
