//! Few-shot document-level relation extraction.
//!
//! Given `N` fully annotated support documents and a query document, the
//! model predicts every `(head, relation, tail)` triple of the episode's
//! target relations in the query. Relation prototypes are built from
//! instance-level support representations guided by relation descriptions,
//! refined with a relation-weighted contrastive objective, and compared
//! against task-specific none-of-the-above (NOTA) prototypes.
//!
//! Module map:
//!
//! * [`corpus`]: DocRED-style corpora, relation catalogs and splits.
//! * [`episode`]: episode sampling, NOTA pair enumeration, episode files.
//! * [`encoding`]: marker insertion, the encoder interface and pooling.
//! * [`representation`]: pair/relation/instance attention and fusion.
//! * [`prototypes`]: relation and NOTA prototypes.
//! * [`objectives`]: contrastive, classification and total losses.
//! * [`model`]: parameters plus the differentiable per-episode forward pass.
//! * [`trainer`]: meta-training loop, schedule, checkpoints.
//! * [`evaluation`]: inference, macro F1 and analysis slices.

pub mod corpus;
pub mod encoding;
pub mod episode;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod params;
pub mod prototypes;
pub mod representation;
pub mod synthetic;
pub mod tape;
pub mod trainer;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context} at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        context: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error in {context} at `{path}`: {message}")]
    Schema {
        context: String,
        path: String,
        message: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unsupported episode file schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no valid episode found after {attempts} sampling attempts")]
    Exhaustion { attempts: usize },
    #[error("mention {mention} of entity {entity} in {doc_id} tokenizes to zero subwords")]
    EmptyMention {
        doc_id: String,
        entity: usize,
        mention: usize,
    },
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("head and tail attention do not overlap (inner product {0:e})")]
    DegenerateOverlap(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss on episode {episode}: {detail}")]
    NonFiniteLoss { episode: String, detail: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("zero vector passed to {0}")]
    ZeroVector(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("NOTA rate undefined: query document {0} has fewer than two entities")]
    UndefinedRate(String),
    #[error("unknown document id {0}")]
    UnknownDocument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Builds a parse error from a `serde_json` syntax error, resolving the
    /// byte offset of the reported line/column within `text`.
    pub(crate) fn json_parse(context: impl Into<String>, text: &str, err: &serde_json::Error) -> Self {
        let line = err.line();
        let column = err.column();
        let line_start: usize = text
            .split_inclusive('\n')
            .take(line.saturating_sub(1))
            .map(str::len)
            .sum();
        Error::Parse {
            context: context.into(),
            offset: line_start + column.saturating_sub(1),
            line,
            column,
            message: err.to_string(),
        }
    }
}
