//! Hybrid log parser.
//!
//! Records are masked into skeletons, grouped, and routed per token-length
//! bucket: groups whose parameters vary across members are merged into dense
//! groups and parsed statistically, the rest are sparse and sent to an
//! inference backend for variable tagging.

pub mod cli;
pub mod error;
pub mod eval;
pub mod llm;
pub mod masker;
pub mod model;
pub mod pipeline;
pub mod router;
pub mod stat;
pub mod synth;

pub use error::{Error, Result};
pub use masker::{mask_message, mask_token, Masker, Skeleton};
pub use model::{
    reconstruct, CostLedger, DenseGroup, LedgerSnapshot, LogBucket, LogRecord, RouterConfig,
    SkeletonGroup, SparseGroup, TemplateResult, TemplateSource, PLACEHOLDER,
};
pub use pipeline::{run, InputFormat, ParseOptions, RunOutput};
pub use router::{route, Routing};
