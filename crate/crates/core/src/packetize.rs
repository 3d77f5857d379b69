//! Turning encoded files into labeled packet samples, class balancing, and
//! the 1025-column dataset CSV.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::corpus::{ContentHash, EncodedFile};
use crate::rng;
use crate::{Error, Label, Result};

pub const FIXED_LEN: usize = 1024;
pub const MIN_VARIABLE_LEN: usize = 500;
pub const MAX_VARIABLE_LEN: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketMode {
    /// Chunk lengths drawn uniformly from 500..=1500; the short tail is kept.
    Variable,
    /// Consecutive 1024-byte chunks; a shorter tail is dropped.
    Fixed1024,
}

impl PacketMode {
    pub fn name(self) -> &'static str {
        match self {
            PacketMode::Variable => "variable",
            PacketMode::Fixed1024 => "fixed1024",
        }
    }
}

impl std::str::FromStr for PacketMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "variable" => Ok(PacketMode::Variable),
            "fixed1024" => Ok(PacketMode::Fixed1024),
            _ => Err(format!(
                "unknown packet mode {s:?} (expected variable or fixed1024)"
            )),
        }
    }
}

/// Where a sample came from: the source file's hash and the chunk index
/// within that file's encoded payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Origin {
    pub file: ContentHash,
    pub chunk: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub payload: Vec<u8>,
    pub label: Label,
    pub origin: Origin,
}

impl Sample {
    pub fn new(payload: Vec<u8>, label: Label, file: ContentHash, chunk: u64) -> Sample {
        Sample {
            payload,
            label,
            origin: Origin { file, chunk },
        }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub mode: PacketMode,
    pub seed: u64,
    /// Digest of the corpus manifest the samples were cut from, if known.
    pub manifest: Option<ContentHash>,
    /// Trailing bytes discarded by fixed-mode packetization.
    pub dropped_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub compressed: usize,
    pub encrypted: usize,
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Compressed => self.compressed,
            Label::Encrypted => self.encrypted,
        }
    }

    pub fn total(&self) -> usize {
        self.compressed + self.encrypted
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, mode: PacketMode, seed: u64) -> Dataset {
        Dataset {
            samples,
            mode,
            seed,
            manifest: None,
            dropped_bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for s in &self.samples {
            match s.label {
                Label::Compressed => c.compressed += 1,
                Label::Encrypted => c.encrypted += 1,
            }
        }
        c
    }

    /// A dataset holding clones of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            mode: self.mode,
            seed: self.seed,
            manifest: self.manifest,
            dropped_bytes: 0,
        }
    }

    pub fn check_fixed(&self) -> Result<()> {
        if self.mode != PacketMode::Fixed1024 || self.samples.iter().any(|s| s.len() != FIXED_LEN) {
            return Err(Error::NotFixedMode);
        }
        Ok(())
    }

    pub fn require_both_classes(&self) -> Result<ClassCounts> {
        let counts = self.class_counts();
        for label in [Label::Compressed, Label::Encrypted] {
            if counts.get(label) == 0 {
                return Err(Error::MissingClass(label));
            }
        }
        Ok(counts)
    }
}

/// Chunk lengths for a payload of `len` bytes. The variable-mode generator is
/// keyed by `seed` and the file hash so that each file packetizes
/// independently of the others.
pub fn chunk_lengths(len: usize, mode: PacketMode, seed: u64, file: &ContentHash) -> Vec<usize> {
    match mode {
        PacketMode::Fixed1024 => vec![FIXED_LEN; len / FIXED_LEN],
        PacketMode::Variable => {
            let mut rng = rng::stage_rng(seed, &format!("packetize.{file}"));
            let mut out = Vec::new();
            let mut remaining = len;
            while remaining > 0 {
                let l = rng
                    .gen_range(MIN_VARIABLE_LEN..=MAX_VARIABLE_LEN)
                    .min(remaining);
                out.push(l);
                remaining -= l;
            }
            out
        }
    }
}

/// An encoded byte stream and its provenance, as read back from a manifest.
#[derive(Debug, Clone, Copy)]
pub struct Stream<'a> {
    pub file: ContentHash,
    pub label: Label,
    pub payload: &'a [u8],
}

impl<'a> From<&'a EncodedFile> for Stream<'a> {
    fn from(e: &'a EncodedFile) -> Self {
        Stream {
            file: e.source.content_hash,
            label: e.label,
            payload: &e.payload,
        }
    }
}

pub fn packetize_stream(stream: Stream<'_>, mode: PacketMode, seed: u64) -> Result<Vec<Sample>> {
    if stream.payload.is_empty() {
        return Err(Error::EmptyInput("encoded payload"));
    }
    let mut offset = 0;
    let samples = chunk_lengths(stream.payload.len(), mode, seed, &stream.file)
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let s = Sample::new(
                stream.payload[offset..offset + l].to_vec(),
                stream.label,
                stream.file,
                i as u64,
            );
            offset += l;
            s
        })
        .collect();
    Ok(samples)
}

pub fn packetize(encoded: &EncodedFile, mode: PacketMode, seed: u64) -> Result<Vec<Sample>> {
    packetize_stream(encoded.into(), mode, seed)
}

/// Packetizes every file and shuffles the combined samples with the run
/// seed. Samples are not yet class balanced.
pub fn assemble(encoded: &[EncodedFile], mode: PacketMode, seed: u64) -> Result<Dataset> {
    let streams: Vec<Stream<'_>> = encoded.iter().map(Stream::from).collect();
    assemble_streams(&streams, mode, seed)
}

pub fn assemble_streams(streams: &[Stream<'_>], mode: PacketMode, seed: u64) -> Result<Dataset> {
    use rayon::prelude::*;
    let per_file: Vec<Vec<Sample>> = streams
        .par_iter()
        .map(|s| packetize_stream(*s, mode, seed))
        .collect::<Result<_>>()?;
    let dropped_bytes = match mode {
        PacketMode::Fixed1024 => streams
            .iter()
            .map(|s| (s.payload.len() % FIXED_LEN) as u64)
            .sum(),
        PacketMode::Variable => 0,
    };
    let mut samples: Vec<Sample> = per_file.into_iter().flatten().collect();
    samples.shuffle(&mut rng::stage_rng(seed, "assemble.shuffle"));
    Ok(Dataset {
        samples,
        mode,
        seed,
        manifest: None,
        dropped_bytes,
    })
}

/// Trims the majority class down to the minority count by seeded uniform
/// sampling, keeping the surviving samples in their original order.
pub fn balance(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let counts = dataset.require_both_classes()?;
    if counts.compressed == counts.encrypted {
        return Ok(dataset.clone());
    }
    let (majority, excess) = if counts.compressed > counts.encrypted {
        (Label::Compressed, counts.compressed - counts.encrypted)
    } else {
        (Label::Encrypted, counts.encrypted - counts.compressed)
    };
    let majority_idx: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == majority)
        .map(|(i, _)| i)
        .collect();
    let mut drop = vec![false; dataset.len()];
    let mut rng = rng::stage_rng(seed, "balance");
    for k in index::sample(&mut rng, majority_idx.len(), excess) {
        drop[majority_idx[k]] = true;
    }
    let samples = dataset
        .samples
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(Dataset {
        samples,
        ..dataset.clone()
    })
}

/// Writes the dataset as rows of 1024 comma-separated byte values followed by
/// the label bit.
pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    dataset.check_fixed()?;
    let mut out = std::io::BufWriter::new(out);
    let mut line = String::with_capacity(FIXED_LEN * 4 + 4);
    let io = |e| Error::io("<csv output>", e);
    for s in &dataset.samples {
        line.clear();
        for &b in &s.payload {
            push_u8(&mut line, b);
            line.push(',');
        }
        line.push(if s.label == Label::Compressed {
            '1'
        } else {
            '0'
        });
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn push_u8(s: &mut String, b: u8) {
    if b >= 100 {
        s.push((b'0' + b / 100) as char);
    }
    if b >= 10 {
        s.push((b'0' + (b / 10) % 10) as char);
    }
    s.push((b'0' + b % 10) as char);
}

fn parse_byte(field: &[u8]) -> Option<u8> {
    if field.is_empty() || field.len() > 3 {
        return None;
    }
    let mut v: u32 = 0;
    for &c in field {
        if !c.is_ascii_digit() {
            return None;
        }
        v = v * 10 + (c - b'0') as u32;
    }
    u8::try_from(v).ok()
}

/// Parses one dataset CSV row into payload and label.
pub fn parse_row(line: &[u8], line_no: usize) -> Result<(Vec<u8>, Label)> {
    let mut payload = Vec::with_capacity(FIXED_LEN);
    let mut fields = 0usize;
    let mut label = None;
    for field in line.split(|&c| c == b',') {
        fields += 1;
        if fields <= FIXED_LEN {
            let v = parse_byte(field).ok_or_else(|| {
                Error::parse(
                    line_no,
                    format!(
                        "field {fields}: byte value out of range: {:?}",
                        String::from_utf8_lossy(field)
                    ),
                )
            })?;
            payload.push(v);
        } else if fields == FIXED_LEN + 1 {
            label = Some(match field {
                b"0" => Label::Encrypted,
                b"1" => Label::Compressed,
                _ => {
                    return Err(Error::parse(
                        line_no,
                        format!(
                            "label must be 0 or 1, got {:?}",
                            String::from_utf8_lossy(field)
                        ),
                    ))
                }
            });
        }
    }
    if fields != FIXED_LEN + 1 {
        return Err(Error::parse(
            line_no,
            format!("expected {} fields, found {fields}", FIXED_LEN + 1),
        ));
    }
    Ok((payload, label.expect("label field present")))
}

/// Reads a dataset CSV. Samples get `origin = (zero hash, row index)` since
/// the format carries no provenance.
pub fn read_csv<R: BufRead>(mut input: R) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut line = Vec::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = input
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::parse(line_no + 1, e.to_string()))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let mut row = &line[..];
        if let Some(r) = row.strip_suffix(b"\n") {
            row = r;
        }
        if let Some(r) = row.strip_suffix(b"\r") {
            row = r;
        }
        if row.is_empty() {
            continue;
        }
        let (payload, label) = parse_row(row, line_no)?;
        let chunk = samples.len() as u64;
        samples.push(Sample::new(payload, label, ContentHash::default(), chunk));
    }
    Ok(Dataset::new(samples, PacketMode::Fixed1024, 0))
}

/// Key/value sidecar written next to every dataset CSV.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetMeta {
    pub entries: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn describe(dataset: &Dataset) -> DatasetMeta {
        let counts = dataset.class_counts();
        let mut entries = BTreeMap::new();
        entries.insert("mode".into(), dataset.mode.name().into());
        entries.insert("seed".into(), dataset.seed.to_string());
        entries.insert("samples".into(), dataset.len().to_string());
        entries.insert("compressed".into(), counts.compressed.to_string());
        entries.insert("encrypted".into(), counts.encrypted.to_string());
        entries.insert("dropped_bytes".into(), dataset.dropped_bytes.to_string());
        if let Some(m) = dataset.manifest {
            entries.insert("manifest".into(), m.to_hex());
        }
        DatasetMeta { entries }
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<DatasetMeta> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected key=value"))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(DatasetMeta { entries })
    }
}
