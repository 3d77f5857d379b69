//! Deterministic synthetic source files for building corpora without real
//! data: prose, markup, logs, telemetry, binary records, executables and
//! already-compressed media. Content is generated from a seeded stream so a
//! corpus is reproducible from `(count, seed)` alone.

use rand::Rng;

use crate::corpus::{self, SourceFile};
use crate::packetize::{Dataset, PacketMode, Sample, FIXED_LEN};
use crate::rng::{self, StageRng};
use crate::{Label, Result};

const WORDS: &[&str] = &[
    "the",
    "of",
    "and",
    "to",
    "a",
    "in",
    "is",
    "that",
    "for",
    "it",
    "as",
    "was",
    "with",
    "be",
    "by",
    "on",
    "not",
    "he",
    "this",
    "are",
    "or",
    "his",
    "from",
    "at",
    "which",
    "but",
    "have",
    "an",
    "had",
    "they",
    "you",
    "were",
    "their",
    "one",
    "all",
    "we",
    "can",
    "her",
    "has",
    "there",
    "been",
    "if",
    "more",
    "when",
    "will",
    "would",
    "who",
    "so",
    "no",
    "data",
    "device",
    "network",
    "packet",
    "sensor",
    "home",
    "user",
    "time",
    "system",
    "light",
    "camera",
    "temperature",
    "privacy",
    "signal",
    "update",
    "server",
    "value",
    "morning",
    "evening",
    "kitchen",
    "door",
    "window",
    "motion",
    "record",
    "stream",
    "account",
    "energy",
    "through",
    "between",
    "after",
    "before",
    "during",
    "without",
    "under",
    "around",
    "against",
    "within",
    "people",
    "water",
    "house",
    "world",
    "school",
    "family",
    "number",
    "problem",
    "question",
    "service",
    "however",
    "therefore",
    "because",
    "although",
    "several",
    "important",
    "different",
    "available",
    "information",
    "development",
    "government",
    "experience",
    "something",
    "community",
    "education",
];

const TAGS: &[&str] = &[
    "p", "div", "span", "li", "a", "td", "h2", "em", "strong", "section",
];
const LEVELS: &[&str] = &["INFO", "DEBUG", "WARN", "ERROR"];
const EVENTS: &[&str] = &[
    "heartbeat",
    "motion_detected",
    "door_open",
    "door_close",
    "temp_reading",
    "upload_start",
    "upload_done",
    "wifi_rssi",
    "firmware_check",
    "stream_keepalive",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileKind {
    Text,
    Html,
    Log,
    Json,
    SensorRecords,
    Executable,
    Image,
    Jpeg,
}

impl FileKind {
    pub const ALL: [FileKind; 8] = [
        FileKind::Text,
        FileKind::Html,
        FileKind::Log,
        FileKind::Json,
        FileKind::SensorRecords,
        FileKind::Executable,
        FileKind::Image,
        FileKind::Jpeg,
    ];

    pub fn extension(self) -> &'static str {
        match self {
            FileKind::Text => "txt",
            FileKind::Html => "html",
            FileKind::Log => "log",
            FileKind::Json => "json",
            FileKind::SensorRecords => "bin",
            FileKind::Executable => "exe",
            FileKind::Image => "png",
            FileKind::Jpeg => "jpg",
        }
    }
}

fn word(rng: &mut StageRng) -> &'static str {
    // Zipf-like: squaring a uniform draw favors the front of the list.
    let u: f64 = rng.gen();
    WORDS[((u * u) * WORDS.len() as f64) as usize]
}

/// English-like prose with sentence structure and punctuation.
pub fn english(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let words = rng.gen_range(4..18);
        for i in 0..words {
            let w = word(rng);
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push_str(w);
            }
            if i + 1 < words {
                out.push(if rng.gen_bool(0.08) { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
        }
        out.push_str(if rng.gen_bool(0.1) { "?" } else { "." });
        out.push(if rng.gen_bool(0.15) { '\n' } else { ' ' });
    }
    out.truncate(len);
    out.into_bytes()
}

fn html(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out =
        String::from("<!DOCTYPE html>\n<html><head><title>Device dashboard</title></head><body>\n");
    while out.len() < len {
        let tag = TAGS[rng.gen_range(0..TAGS.len())];
        let class = rng.gen_range(0..40);
        let text = {
            let n = rng.gen_range(20..160);
            String::from_utf8(english(rng, n))
        }
        .unwrap();
        out.push_str(&format!("  <{tag} class=\"c{class}\">{text}</{tag}>\n"));
    }
    out.truncate(len);
    out.into_bytes()
}

fn log(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = String::new();
    let mut t: u64 = 1_546_300_800 + rng.gen_range(0..10_000_000);
    while out.len() < len {
        t += rng.gen_range(1..30);
        let level = LEVELS[rng.gen_range(0..LEVELS.len())];
        let event = EVENTS[rng.gen_range(0..EVENTS.len())];
        let dev = rng.gen_range(0..16);
        let v: f64 = rng.gen_range(-40.0..120.0);
        out.push_str(&format!("{t},{level},dev{dev:02},{event},{v:.2}\n"));
    }
    out.truncate(len);
    out.into_bytes()
}

fn json(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = String::from("[\n");
    while out.len() < len {
        out.push_str(&format!(
            "  {{\"id\": {}, \"event\": \"{}\", \"battery\": {}, \"rssi\": -{}, \"armed\": {}}},\n",
            rng.gen_range(1000..99999),
            EVENTS[rng.gen_range(0..EVENTS.len())],
            rng.gen_range(0..101),
            rng.gen_range(30..95),
            rng.gen_bool(0.5)
        ));
    }
    out.truncate(len);
    out.into_bytes()
}

fn sensor_records(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut t: u32 = rng.gen();
    let mut level: f32 = rng.gen_range(10.0..30.0);
    while out.len() < len {
        t = t.wrapping_add(rng.gen_range(900..1100));
        level += rng.gen_range(-0.25..0.25);
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&level.to_le_bytes());
        out.extend_from_slice(&(rng.gen_range(0..4u16)).to_le_bytes());
        out.extend_from_slice(&[0x7f, 0x7f]);
        out.extend_from_slice(&(rng.gen_range(0..1024u32)).to_le_bytes());
    }
    out.truncate(len);
    out
}

fn executable(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = b"\x7fELF\x02\x01\x01\0".to_vec();
    out.resize(64, 0);
    const OPCODES: &[u8] = &[
        0x48, 0x89, 0x8b, 0xe8, 0xc3, 0x55, 0x5d, 0x31, 0xc0, 0x0f, 0x85, 0x84, 0x74, 0x75, 0xff,
        0x83, 0xec, 0x24,
    ];
    while out.len() < len {
        match rng.gen_range(0..10) {
            0 => out.resize(out.len() + rng.gen_range(16..256), 0),
            1 => {
                let n = rng.gen_range(8..40);
                let s = english(rng, n);
                out.extend(s.iter().map(|&c| if c == b' ' { b'_' } else { c }));
                out.push(0);
            }
            _ => {
                for _ in 0..rng.gen_range(32..256) {
                    out.push(if rng.gen_bool(0.6) {
                        OPCODES[rng.gen_range(0..OPCODES.len())]
                    } else {
                        rng.gen()
                    });
                }
            }
        }
    }
    out.truncate(len);
    out
}

/// PNG-like: a signature and chunk header wrapping a deflate stream of
/// smooth pixel rows, so the body is already compressed.
fn image(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = b"\x89PNG\r\n\x1a\n\0\0\0\x0dIHDR".to_vec();
    let width = rng.gen_range(64..512usize);
    out.extend_from_slice(&(width as u32).to_be_bytes());
    let mut pixels = Vec::new();
    let mut row: Vec<u8> = (0..width * 3).map(|_| rng.gen()).collect();
    while out.len() + pixels.len() / 2 < len + 64 {
        pixels.push(0);
        for p in row.iter_mut() {
            *p = p.wrapping_add(rng.gen_range(0..9)).wrapping_sub(4);
        }
        pixels.extend_from_slice(&row);
    }
    out.extend_from_slice(b"\0\0\0\0IDAT");
    out.extend(corpus::deflate(&pixels));
    out.truncate(len);
    out
}

/// JPEG-like: markers and quantization tables followed by entropy-coded
/// scan data with 0xFF byte stuffing.
fn jpeg(rng: &mut StageRng, len: usize) -> Vec<u8> {
    let mut out = vec![0xff, 0xd8, 0xff, 0xe0, 0x00, 0x10];
    out.extend_from_slice(b"JFIF\0\x01\x01\0\0\x01\0\x01\0\0");
    out.extend_from_slice(&[0xff, 0xdb, 0x00, 0x43, 0x00]);
    for i in 0..64u8 {
        out.push(2 + i / 4);
    }
    out.extend_from_slice(&[0xff, 0xda, 0x00, 0x0c]);
    while out.len() < len {
        let b: u8 = rng.gen();
        out.push(b);
        if b == 0xff {
            out.push(0);
        }
    }
    out.truncate(len);
    out
}

pub fn generate(kind: FileKind, rng: &mut StageRng, len: usize) -> Vec<u8> {
    match kind {
        FileKind::Text => english(rng, len),
        FileKind::Html => html(rng, len),
        FileKind::Log => log(rng, len),
        FileKind::Json => json(rng, len),
        FileKind::SensorRecords => sensor_records(rng, len),
        FileKind::Executable => executable(rng, len),
        FileKind::Image => image(rng, len),
        FileKind::Jpeg => jpeg(rng, len),
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub files: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Relative frequency of each kind, aligned with `FileKind::ALL`.
    pub weights: [u32; 8],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            files: 40,
            min_size: 1024,
            max_size: 256 * 1024,
            weights: [3, 2, 2, 2, 2, 2, 2, 2],
        }
    }
}

/// Generates `config.files` files with log-uniform sizes. Kinds are dealt in
/// proportion to the weights, so every kind appears even in small corpora.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<SourceFile>> {
    let mut rng = rng::stage_rng(seed, "synth.corpus");
    let total: u32 = config.weights.iter().sum();
    let lo = (config.min_size.max(1) as f64).ln();
    let hi = (config.max_size.max(config.min_size.max(1)) as f64).ln();
    let mut files = Vec::with_capacity(config.files);
    for i in 0..config.files {
        // Position i / n mapped through the cumulative weights.
        let slot = ((i as u64 * total as u64) / config.files.max(1) as u64) as u32;
        let mut acc = 0;
        let kind = FileKind::ALL
            .iter()
            .zip(config.weights)
            .find(|(_, w)| {
                acc += w;
                slot < acc
            })
            .map(|(k, _)| *k)
            .unwrap_or(FileKind::Text);
        let size = if hi > lo {
            rng.gen_range(lo..hi).exp() as usize
        } else {
            config.min_size.max(1)
        };
        let mut file_rng = rng::stage_rng(seed, &format!("synth.file.{i}"));
        let content = generate(kind, &mut file_rng, size.max(1));
        files.push(SourceFile::from_bytes(
            format!("synth_{i:04}.{}", kind.extension()),
            content,
        )?);
    }
    Ok(files)
}

/// Constant-vs-random sanity set: `per_class` near-constant payloads (one
/// random base byte plus noise in 0..3) labeled encrypted, and `per_class`
/// uniform random payloads labeled compressed, interleaved.
pub fn toy_separable(per_class: usize, seed: u64) -> Dataset {
    let mut rng = rng::stage_rng(seed, "synth.toy");
    let mut samples = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        let base: u8 = rng.gen();
        let flat = (0..FIXED_LEN)
            .map(|_| base.wrapping_add(rng.gen_range(0..3)))
            .collect();
        samples.push(Sample::new(
            flat,
            Label::Encrypted,
            Default::default(),
            2 * i as u64,
        ));
        let noise = (0..FIXED_LEN).map(|_| rng.gen()).collect();
        samples.push(Sample::new(
            noise,
            Label::Compressed,
            Default::default(),
            2 * i as u64 + 1,
        ));
    }
    Dataset::new(samples, PacketMode::Fixed1024, seed)
}
