//! Per-packet detection of compressed-but-unencrypted payloads.
//!
//! The crate covers the whole pipeline: building a labeled corpus of
//! compressed and encrypted files, cutting them into packet-sized samples,
//! ingesting real captures, extracting byte-statistics features, training
//! three classifiers (distance-weighted kNN, a feed-forward network and a 1D
//! CNN) and evaluating them with cross-validation.

pub mod capture;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod nn;
pub mod packetize;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

/// Class bit carried by every sample: 1 for compressed, 0 for encrypted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Encrypted = 0,
    Compressed = 1,
}

impl Label {
    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Encrypted),
            1 => Some(Label::Compressed),
            _ => None,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Encrypted => Label::Compressed,
            Label::Compressed => Label::Encrypted,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Encrypted => f.write_str("encrypted"),
            Label::Compressed => f.write_str("compressed"),
        }
    }
}
