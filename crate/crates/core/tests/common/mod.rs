#![allow(dead_code)]

use std::fs;
use std::path::Path;

use celerlog::llm::LlmOptions;
use celerlog::pipeline::{decode_parameters, STRUCTURED_FILE};
use celerlog::synth::SyntheticCorpus;
use celerlog::{InputFormat, ParseOptions, RouterConfig};

/// Writes `corpus` as a raw log file in `dir` and returns parse options
/// pointing at `dir/out`.
pub fn options_for(dir: &Path, corpus: &SyntheticCorpus, config: RouterConfig) -> ParseOptions {
    let input = dir.join("input.log");
    fs::write(&input, corpus.raw_text()).unwrap();
    ParseOptions {
        input,
        format: InputFormat::Raw,
        header_pattern: None,
        output_dir: dir.join("out"),
        llm: LlmOptions::from_config(&config),
        config,
    }
}

/// Checks that every structured.csv row rebuilds its content tokens from
/// template and parameters. Returns the number of rows checked.
pub fn check_round_trip(out_dir: &Path) -> Result<usize, String> {
    let path = out_dir.join(STRUCTURED_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("{} lacks {name}", path.display()))
    };
    let (content, template, params) = (col("Content")?, col("EventTemplate")?, col("Parameters")?);
    let mut rows = 0;
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let decoded = decode_parameters(&row[params]);
        let holes = row[template]
            .split_whitespace()
            .filter(|t| *t == celerlog::PLACEHOLDER)
            .count();
        if holes != decoded.len() {
            return Err(format!(
                "row {}: {holes} placeholders but {} parameters",
                &row[0],
                decoded.len()
            ));
        }
        let rebuilt = celerlog::reconstruct(&row[template], &decoded);
        let want: Vec<&str> = row[content].split_whitespace().collect();
        let got: Vec<&str> = rebuilt.split_whitespace().collect();
        if want != got {
            return Err(format!(
                "row {} does not round-trip: {:?} + {:?} -> {:?}",
                &row[0], &row[template], &row[params], rebuilt
            ));
        }
        rows += 1;
    }
    Ok(rows)
}
