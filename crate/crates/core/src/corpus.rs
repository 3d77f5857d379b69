//! Source corpus handling: hashing input files, splitting them into a
//! compression group and an encryption group, and running the codecs.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use aes::cipher::{KeyIvInit, StreamCipher};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};

use crate::rng;
use crate::{Error, Label, Result};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

/// SHA-256 of a file's content.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> ContentHash {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..12])
    }
}

impl FromStr for ContentHash {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| format!("bad content hash {s:?}: {e}"))?;
        Ok(ContentHash(out))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub size_bytes: u64,
    pub content_hash: ContentHash,
    content: Vec<u8>,
}

impl fmt::Debug for SourceFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SourceFile")
            .field("path", &self.path)
            .field("size_bytes", &self.size_bytes)
            .field("content_hash", &self.content_hash)
            .finish()
    }
}

impl SourceFile {
    pub fn from_bytes(path: impl Into<PathBuf>, content: Vec<u8>) -> Result<SourceFile> {
        if content.is_empty() {
            return Err(Error::EmptyInput("source file"));
        }
        Ok(SourceFile {
            path: path.into(),
            size_bytes: content.len() as u64,
            content_hash: ContentHash::of(&content),
            content,
        })
    }

    pub fn load(path: &Path) -> Result<SourceFile> {
        let content = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SourceFile::from_bytes(path, content)
    }

    pub fn content(&self) -> &[u8] {
        &self.content
    }
}

/// Loads every regular file directly under `dir`, skipping empty ones.
pub fn load_dir(dir: &Path) -> Result<Vec<SourceFile>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let mut files = Vec::new();
    for p in paths {
        match SourceFile::load(&p) {
            Ok(f) => files.push(f),
            Err(Error::EmptyInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecKind {
    Compression,
    Encryption,
}

impl CodecKind {
    pub fn label(self) -> Label {
        match self {
            CodecKind::Compression => Label::Compressed,
            CodecKind::Encryption => Label::Encrypted,
        }
    }
}

/// A codec algorithm. External codecs run a shell command template in which
/// `{in}` and `{out}` are replaced by temporary file paths, and `{key}` and
/// `{iv}` by hex key material. A template that mentions `{key}` is an
/// encryption codec.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Codec {
    Deflate,
    Aes256Ctr,
    External { name: String, template: String },
}

impl Codec {
    pub fn external(name: impl Into<String>, template: impl Into<String>) -> Result<Codec> {
        let name = name.into();
        let template = template.into();
        if name.is_empty() || name.contains(char::is_whitespace) || name.contains(',') {
            return Err(Error::InvalidParameter(format!("bad codec name {name:?}")));
        }
        if !template.contains("{in}") || !template.contains("{out}") {
            return Err(Error::InvalidParameter(format!(
                "codec template for {name} must contain {{in}} and {{out}}"
            )));
        }
        Ok(Codec::External { name, template })
    }

    pub fn name(&self) -> &str {
        match self {
            Codec::Deflate => "deflate",
            Codec::Aes256Ctr => "aes256ctr",
            Codec::External { name, .. } => name,
        }
    }

    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Deflate => CodecKind::Compression,
            Codec::Aes256Ctr => CodecKind::Encryption,
            Codec::External { template, .. } => {
                if template.contains("{key}") {
                    CodecKind::Encryption
                } else {
                    CodecKind::Compression
                }
            }
        }
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self, Codec::External { .. })
    }

    pub fn builtin(name: &str) -> Option<Codec> {
        match name {
            "deflate" => Some(Codec::Deflate),
            "aes256ctr" => Some(Codec::Aes256Ctr),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyMaterial {
    pub key: [u8; 32],
    pub iv: [u8; 16],
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

impl KeyMaterial {
    /// Key and IV for the `counter`-th encrypted file of a run:
    /// `SHA-256(domain || seed || counter)` for each part.
    pub fn derive(seed: u64, counter: u64) -> KeyMaterial {
        let block = |domain: &[u8]| -> [u8; 32] {
            let mut h = Sha256::new();
            h.update(domain);
            h.update(seed.to_le_bytes());
            h.update(counter.to_le_bytes());
            h.finalize().into()
        };
        let key = block(b"compdetect.key");
        let iv_block = block(b"compdetect.iv");
        let mut iv = [0u8; 16];
        iv.copy_from_slice(&iv_block[..16]);
        KeyMaterial { key, iv }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecSpec {
    codec: Codec,
    keys: Option<KeyMaterial>,
}

impl CodecSpec {
    pub fn compression(codec: Codec) -> Result<CodecSpec> {
        if codec.kind() != CodecKind::Compression {
            return Err(Error::InvalidParameter(format!(
                "{} is not a compression codec",
                codec.name()
            )));
        }
        Ok(CodecSpec { codec, keys: None })
    }

    pub fn encryption(codec: Codec, keys: KeyMaterial) -> Result<CodecSpec> {
        if codec.kind() != CodecKind::Encryption {
            return Err(Error::InvalidParameter(format!(
                "{} is not an encryption codec",
                codec.name()
            )));
        }
        Ok(CodecSpec {
            codec,
            keys: Some(keys),
        })
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn name(&self) -> &str {
        self.codec.name()
    }

    pub fn kind(&self) -> CodecKind {
        self.codec.kind()
    }

    pub fn keys(&self) -> Option<&KeyMaterial> {
        self.keys.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedFile {
    pub source: SourceFile,
    pub codec: CodecSpec,
    pub payload: Vec<u8>,
    pub label: Label,
}

pub fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

pub fn inflate(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    DeflateDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

pub fn aes256_ctr(keys: &KeyMaterial, bytes: &[u8]) -> Vec<u8> {
    let mut buf = bytes.to_vec();
    let mut cipher = Aes256Ctr::new(&keys.key.into(), &keys.iv.into());
    cipher.apply_keystream(&mut buf);
    buf
}

pub fn encode(file: &SourceFile, spec: &CodecSpec) -> Result<EncodedFile> {
    if file.content.is_empty() {
        return Err(Error::EmptyInput("source file"));
    }
    let payload = match spec.codec() {
        Codec::Deflate => deflate(&file.content),
        Codec::Aes256Ctr => {
            let keys = spec.keys().expect("encryption spec carries keys");
            aes256_ctr(keys, &file.content)
        }
        Codec::External { name, template } => {
            run_external(name, template, spec.keys(), &file.content)?
        }
    };
    if payload.is_empty() {
        return Err(Error::Codec {
            codec: spec.name().to_string(),
            reason: "codec produced no output".into(),
        });
    }
    Ok(EncodedFile {
        source: file.clone(),
        codec: spec.clone(),
        payload,
        label: spec.kind().label(),
    })
}

fn run_external(
    name: &str,
    template: &str,
    keys: Option<&KeyMaterial>,
    input: &[u8],
) -> Result<Vec<u8>> {
    let codec_err = |reason: String| Error::Codec {
        codec: name.to_string(),
        reason,
    };
    let dir = std::env::temp_dir().join(format!(
        "compdetect-{}-{}",
        std::process::id(),
        ContentHash::of(input).to_hex()
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let in_path = dir.join(format!("{name}.in"));
    let out_path = dir.join(format!("{name}.out"));
    let result = (|| {
        std::fs::write(&in_path, input).map_err(|e| Error::io(&in_path, e))?;
        let mut cmd = template
            .replace("{in}", &in_path.display().to_string())
            .replace("{out}", &out_path.display().to_string());
        if let Some(k) = keys {
            cmd = cmd
                .replace("{key}", &hex::encode(k.key))
                .replace("{iv}", &hex::encode(k.iv));
        }
        let output = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| codec_err(format!("cannot run shell: {e}")))?;
        if !output.status.success() {
            return Err(codec_err(format!(
                "command exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        std::fs::read(&out_path).map_err(|e| codec_err(format!("no output file: {e}")))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

/// True iff decoding the payload reproduces the source bytes exactly.
pub fn decode_check(encoded: &EncodedFile) -> Result<bool> {
    match encoded.codec.codec() {
        Codec::Deflate => {
            Ok(matches!(inflate(&encoded.payload), Ok(d) if d == encoded.source.content))
        }
        Codec::Aes256Ctr => {
            let keys = encoded.codec.keys().expect("encryption spec carries keys");
            Ok(aes256_ctr(keys, &encoded.payload) == encoded.source.content)
        }
        Codec::External { name, .. } => Err(Error::UnsupportedCheck(name.clone())),
    }
}

/// A codec together with the files it will encode.
#[derive(Debug, Clone)]
pub struct CodecSet {
    pub codec: Codec,
    pub files: Vec<SourceFile>,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub compression: Vec<CodecSet>,
    pub encryption: Vec<CodecSet>,
}

impl Partition {
    /// Codec specs for every file, in set order. Encryption keys are derived
    /// from `seed` and the file's position within the encryption group.
    pub fn assignments(&self, seed: u64) -> Result<Vec<(SourceFile, CodecSpec)>> {
        let mut out = Vec::new();
        for set in &self.compression {
            for f in &set.files {
                out.push((f.clone(), CodecSpec::compression(set.codec.clone())?));
            }
        }
        let mut counter = 0u64;
        for set in &self.encryption {
            for f in &set.files {
                let keys = KeyMaterial::derive(seed, counter);
                counter += 1;
                out.push((f.clone(), CodecSpec::encryption(set.codec.clone(), keys)?));
            }
        }
        Ok(out)
    }
}

/// Set sizes for `n` files over `sets` codecs: `n / sets` each, with the
/// remainder handed out one per set starting from the last.
pub fn set_sizes(n: usize, sets: usize) -> Vec<usize> {
    let base = n / sets;
    let extra = n % sets;
    (0..sets)
        .map(|i| base + usize::from(i >= sets - extra))
        .collect()
}

/// Splits `files` into equally sized compression and encryption groups with
/// similar total bytes, then deals each group across its codecs.
///
/// Files are first put in content-hash order so the result does not depend
/// on input order. The groups are filled greedily, largest file first, each
/// file going to the group with fewer total bytes that still has room. Within
/// a group the seed shuffles files before they are dealt into codec sets.
pub fn partition_corpus(
    files: &[SourceFile],
    compression_codecs: &[Codec],
    encryption_codecs: &[Codec],
    seed: u64,
) -> Result<Partition> {
    use rand::seq::SliceRandom;

    if compression_codecs.is_empty() || encryption_codecs.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one compression and one encryption codec".into(),
        ));
    }
    for c in compression_codecs {
        if c.kind() != CodecKind::Compression {
            return Err(Error::InvalidParameter(format!(
                "{} is not a compression codec",
                c.name()
            )));
        }
    }
    for c in encryption_codecs {
        if c.kind() != CodecKind::Encryption {
            return Err(Error::InvalidParameter(format!(
                "{} is not an encryption codec",
                c.name()
            )));
        }
    }
    let n = files.len();
    let codecs = compression_codecs.len().max(encryption_codecs.len());
    if n < 2 || n / 2 < codecs {
        return Err(Error::InsufficientCorpus {
            files: n,
            codecs: compression_codecs.len() + encryption_codecs.len(),
        });
    }
    if !n.is_multiple_of(2) {
        return Err(Error::OddCorpus(n));
    }

    let mut canonical: Vec<&SourceFile> = files.iter().collect();
    canonical.sort_by(|a, b| {
        a.content_hash
            .cmp(&b.content_hash)
            .then_with(|| a.path.cmp(&b.path))
    });

    let mut by_size = canonical.clone();
    by_size.sort_by_key(|f| std::cmp::Reverse(f.size_bytes));
    let half = n / 2;
    let mut groups: [Vec<&SourceFile>; 2] = [Vec::with_capacity(half), Vec::with_capacity(half)];
    let mut totals = [0u64; 2];
    for f in by_size {
        let target = if groups[0].len() == half {
            1
        } else if groups[1].len() == half {
            0
        } else if totals[1] < totals[0] {
            1
        } else {
            0
        };
        totals[target] += f.size_bytes;
        groups[target].push(f);
    }

    let deal = |group: &mut Vec<&SourceFile>, codecs: &[Codec], tag: &str| -> Vec<CodecSet> {
        group.sort_by(|a, b| {
            a.content_hash
                .cmp(&b.content_hash)
                .then_with(|| a.path.cmp(&b.path))
        });
        group.shuffle(&mut rng::stage_rng(seed, tag));
        let mut rest = &group[..];
        set_sizes(group.len(), codecs.len())
            .into_iter()
            .zip(codecs)
            .map(|(size, codec)| {
                let (take, tail) = rest.split_at(size);
                rest = tail;
                CodecSet {
                    codec: codec.clone(),
                    files: take.iter().map(|f| (*f).clone()).collect(),
                }
            })
            .collect()
    };
    let [mut compression, mut encryption] = groups;
    Ok(Partition {
        compression: deal(
            &mut compression,
            compression_codecs,
            "partition.compression",
        ),
        encryption: deal(&mut encryption, encryption_codecs, "partition.encryption"),
    })
}

/// Encodes every assignment in parallel; output order follows the input.
pub fn encode_all(assignments: &[(SourceFile, CodecSpec)]) -> Result<Vec<EncodedFile>> {
    use rayon::prelude::*;
    assignments
        .par_iter()
        .map(|(f, spec)| encode(f, spec))
        .collect()
}

/// One manifest line: the encoded file's provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub content_hash: ContentHash,
    pub codec: String,
    pub label: Label,
    pub payload_len: u64,
    pub keys: Option<KeyMaterial>,
    /// Payload file name relative to the manifest's directory.
    pub payload_file: Option<String>,
}

impl ManifestRecord {
    pub fn of(encoded: &EncodedFile, payload_file: Option<String>) -> ManifestRecord {
        ManifestRecord {
            content_hash: encoded.source.content_hash,
            codec: encoded.codec.name().to_string(),
            label: encoded.label,
            payload_len: encoded.payload.len() as u64,
            keys: encoded.codec.keys().copied(),
            payload_file,
        }
    }
}

/// Line-oriented provenance file. `#` lines carry run metadata; every other
/// line is `hash codec label length key iv file`, space separated, with `-`
/// standing in for absent key material or file name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: &str = "# compdetect manifest v1";

impl Manifest {
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{MANIFEST_HEADER}")?;
        writeln!(out, "# seed {}", self.seed)?;
        for r in &self.records {
            let (key, iv) = match &r.keys {
                Some(k) => (hex::encode(k.key), hex::encode(k.iv)),
                None => ("-".to_string(), "-".to_string()),
            };
            writeln!(
                out,
                "{} {} {} {} {} {} {}",
                r.content_hash,
                r.codec,
                r.label.bit(),
                r.payload_len,
                key,
                iv,
                r.payload_file.as_deref().unwrap_or("-")
            )?;
        }
        out.flush()
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("manifest is ascii")
    }

    /// SHA-256 of the serialized manifest, used to tie datasets and models
    /// back to the corpus they came from.
    pub fn digest(&self) -> ContentHash {
        ContentHash::of(self.to_text().as_bytes())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Manifest> {
        let mut manifest = Manifest::default();
        let mut saw_header = false;
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if line == MANIFEST_HEADER {
                    saw_header = true;
                } else if let Some(seed) = meta.strip_prefix("seed ") {
                    manifest.seed = seed
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(line_no, format!("bad seed {seed:?}")))?;
                }
                continue;
            }
            if !saw_header {
                return Err(Error::parse(line_no, "missing manifest header"));
            }
            manifest.records.push(parse_record(line, line_no)?);
        }
        if !saw_header {
            return Err(Error::parse(1, "missing manifest header"));
        }
        Ok(manifest)
    }
}

impl Manifest {
    /// Reads every record's payload file from `dir`, checking its length.
    pub fn load_payloads(&self, dir: &Path) -> Result<Vec<Vec<u8>>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let name = r.payload_file.as_deref().ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "manifest record {} has no payload file",
                        i + 1
                    ))
                })?;
                let path = dir.join(name);
                let data = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if data.len() as u64 != r.payload_len {
                    return Err(Error::InvalidParameter(format!(
                        "{} is {} bytes, manifest says {}",
                        path.display(),
                        data.len(),
                        r.payload_len
                    )));
                }
                Ok(data)
            })
            .collect()
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<ManifestRecord> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 7 {
        return Err(Error::parse(
            line_no,
            format!("expected 7 fields, found {}", fields.len()),
        ));
    }
    let content_hash = fields[0]
        .parse()
        .map_err(|e: String| Error::parse(line_no, e))?;
    let codec = fields[1].to_string();
    if codec.is_empty() {
        return Err(Error::parse(line_no, "empty codec name"));
    }
    let label = fields[2]
        .parse::<u8>()
        .ok()
        .and_then(Label::from_bit)
        .ok_or_else(|| {
            Error::parse(
                line_no,
                format!("label must be 0 or 1, got {:?}", fields[2]),
            )
        })?;
    let payload_len = fields[3]
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad payload length {:?}", fields[3])))?;
    let keys = match (fields[4], fields[5]) {
        ("-", "-") => None,
        (k, iv) => {
            let mut key = [0u8; 32];
            let mut ivb = [0u8; 16];
            hex::decode_to_slice(k, &mut key).map_err(|_| Error::parse(line_no, "bad key hex"))?;
            hex::decode_to_slice(iv, &mut ivb).map_err(|_| Error::parse(line_no, "bad iv hex"))?;
            Some(KeyMaterial { key, iv: ivb })
        }
    };
    if (label == Label::Encrypted) != keys.is_some() {
        return Err(Error::parse(
            line_no,
            "key material must be present exactly for encrypted records",
        ));
    }
    let payload_file = match fields[6] {
        "-" => None,
        f if f.contains('/') || f.contains('\\') || f == ".." => {
            return Err(Error::parse(
                line_no,
                format!("payload file must be a bare name: {f:?}"),
            ))
        }
        f => Some(f.to_string()),
    };
    Ok(ManifestRecord {
        content_hash,
        codec,
        label,
        payload_len,
        keys,
        payload_file,
    })
}
