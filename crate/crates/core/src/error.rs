use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("insufficient corpus: {files} files for {codecs} codecs")]
    InsufficientCorpus { files: usize, codecs: usize },

    #[error("corpus must contain an even number of files, got {0}")]
    OddCorpus(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("codec {codec}: {reason}")]
    Codec { codec: String, reason: String },

    #[error("unsupported check for codec {0}")]
    UnsupportedCheck(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("not a pcap file")]
    NotPcap,

    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),

    #[error("truncated pcap record {index}")]
    TruncatedRecord { index: usize },

    #[error("payload of {0} bytes exceeds the 65495-byte TCP/IPv4 limit")]
    PayloadTooLarge(usize),

    #[error("class {0} absent from dataset")]
    MissingClass(crate::Label),

    #[error("dataset must be in fixed1024 mode")]
    NotFixedMode,

    #[error("shape mismatch at layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("k = {k} exceeds training set of {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("bad model file at offset {offset}: {reason}")]
    ModelFormat { offset: usize, reason: String },

    #[error("insufficient samples: need {needed} per class, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
