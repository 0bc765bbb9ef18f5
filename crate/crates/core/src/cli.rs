//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Result;
use crate::eval::{evaluate, load_templates, EvalReport, EvalSet};
use crate::llm::{HttpBackend, HttpBackendConfig, LlmOptions, MockBackend, API_KEY_ENV};
use crate::model::RouterConfig;
use crate::pipeline::{self, InputFormat, ParseOptions, RUN_FILE};

/// Exit status for every failure: usage, validation, I/O and backend.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "celerlog",
    version,
    about = "Extract log templates and parameters from raw logs",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a log file into structured.csv, templates.csv and run.json
    Parse(ParseArgs),
    /// Score a structured.csv against ground-truth templates
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Raw,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Log file to parse
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// raw: one message per line; csv: a file with a Content column
    #[arg(long, value_enum, default_value = "raw")]
    pub format: FormatArg,
    /// Regex with a named `content` group, applied to raw lines
    #[arg(long, value_name = "P")]
    pub header_pattern: Option<String>,
    /// Directory for the output files (created if missing)
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    /// Fraction of groups per bucket that may anchor a merge
    #[arg(long, value_name = "F", default_value_t = RouterConfig::default().alpha)]
    pub alpha: f64,
    /// Singleton-ratio level that stops the threshold sweep
    #[arg(long, value_name = "F", default_value_t = RouterConfig::default().p_quantile)]
    pub p_quantile: f64,
    /// Step of the similarity-threshold sweep
    #[arg(long, value_name = "F", default_value_t = RouterConfig::default().tau_step)]
    pub tau_step: f64,
    /// Buckets of at most this many tokens are not merged
    #[arg(long, value_name = "N", default_value_t = RouterConfig::default().bypass_length)]
    pub bypass_length: usize,
    /// Buckets with at most this many groups are not merged
    #[arg(long, value_name = "N", default_value_t = RouterConfig::default().bypass_group_count)]
    pub bypass_groups: usize,
    /// Worker threads, also the cap on concurrent backend requests
    #[arg(long, value_name = "N", default_value_t = RouterConfig::default().jobs)]
    pub jobs: usize,
    /// Messages per backend request
    #[arg(long, value_name = "N", default_value_t = RouterConfig::default().llm_batch_size)]
    pub batch_size: usize,
    /// Where sparse messages are sent: offline mock or a chat-completions API
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    /// Chat-completions URL for the http backend
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Model name for the http backend
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// structured.csv (or any CSV with LineId and EventTemplate)
    #[arg(long, value_name = "PATH")]
    pub structured: PathBuf,
    /// Ground truth CSV with LineId and EventTemplate
    #[arg(long, value_name = "PATH")]
    pub ground_truth: PathBuf,
    /// Where to write the JSON report
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
}

impl ParseArgs {
    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            alpha: self.alpha,
            p_quantile: self.p_quantile,
            tau_step: self.tau_step,
            bypass_length: self.bypass_length,
            bypass_group_count: self.bypass_groups,
            jobs: self.jobs,
            llm_batch_size: self.batch_size,
            ..RouterConfig::default()
        }
    }

    pub fn options(&self) -> ParseOptions {
        let config = self.router_config();
        ParseOptions {
            input: self.input.clone(),
            format: match self.format {
                FormatArg::Raw => InputFormat::Raw,
                FormatArg::Csv => InputFormat::Csv,
            },
            header_pattern: self.header_pattern.clone(),
            output_dir: self.output.clone(),
            llm: LlmOptions::from_config(&config),
            config,
        }
    }
}

fn run_parse(args: &ParseArgs) -> Result<String> {
    let options = args.options();
    options.config.validate()?;
    let out = match args.backend {
        BackendArg::Mock => pipeline::run(&options, &MockBackend::new())?,
        BackendArg::Http => {
            let backend = HttpBackend::new(HttpBackendConfig {
                endpoint: args.endpoint.clone().unwrap_or_default(),
                model: args.model.clone().unwrap_or_default(),
                api_key: std::env::var(API_KEY_ENV).ok(),
                timeout: Duration::from_secs(60),
            })
            .map_err(|e| crate::Error::Backend(e.to_string()))?;
            pipeline::run(&options, &backend)?
        }
    };
    let l = &out.ledger;
    Ok(format!(
        "parsed {} records into {} templates ({} dense, {} sparse; {} backend calls, {} tokens) in {:.3}s\n",
        out.records.len(),
        out.catalog.len(),
        l.dense_record_count,
        l.sparse_record_count,
        l.llm_invocations,
        l.tokens_consumed,
        l.wall_time_seconds,
    ))
}

fn run_eval(args: &EvalArgs) -> Result<String> {
    let predicted = load_templates(&args.structured)?;
    let truth = load_templates(&args.ground_truth)?;
    let set = EvalSet::align(&predicted, &truth)?;
    let metrics = evaluate(&set)?;
    let mut report = EvalReport::new(&set, metrics);
    if let Some(dir) = args.structured.parent() {
        report.attach_run_summary(&dir.join(RUN_FILE));
    }
    report.write(&args.report)?;
    Ok(report.table())
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Parse(args) => run_parse(args),
        Command::Eval(args) => run_eval(args),
    };
    match result {
        Ok(summary) => {
            let _ = std::io::stdout().write_all(summary.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
