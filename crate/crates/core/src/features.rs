//! Byte-statistics features: Pearson chi-square against the uniform byte
//! distribution, the four-quadrant chi-square vector used by the kNN model,
//! Shannon entropy, and the per-class entropy study.

use std::io::{BufRead, Write};

use crate::packetize::Dataset;
use crate::{Error, Label, Result};

pub fn histogram(bytes: &[u8]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    counts
}

/// Pearson chi-square of the byte histogram against a uniform distribution
/// over 256 symbols.
///
/// Evaluated as `(256 * sum(O_i^2) - n^2) / n`, which is algebraically equal
/// to `sum((O_i - n/256)^2 / (n/256))`. The numerator is an exact integer, so
/// the only rounding is the final division.
pub fn chi_square(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput("chi_square"));
    }
    Ok(chi_square_of_histogram(
        &histogram(bytes),
        bytes.len() as u64,
    ))
}

pub(crate) fn chi_square_of_histogram(counts: &[u64; 256], n: u64) -> f64 {
    let sum_sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
    let n = n as u128;
    let numerator = 256 * sum_sq - n * n;
    numerator as f64 / n as f64
}

/// Shannon entropy of the empirical byte distribution, in bits.
pub fn shannon_entropy(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput("shannon_entropy"));
    }
    let n = bytes.len() as f64;
    let h = histogram(bytes)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    // Summation can leave a -0.0 or a hair above 8.
    Ok(h.clamp(0.0, 8.0))
}

/// Four chi-square statistics, one per contiguous quarter of a payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub chi: [f64; 4],
    pub label: Option<Label>,
}

impl FeatureVector {
    pub fn new(chi: [f64; 4], label: Option<Label>) -> Result<FeatureVector> {
        if chi.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "feature components must be finite and non-negative: {chi:?}"
            )));
        }
        Ok(FeatureVector { chi, label })
    }
}

/// Byte ranges of the four quadrants: `floor(n/4)` bytes each, with the
/// remainder appended to the last one.
pub fn quadrant_bounds(n: usize) -> [std::ops::Range<usize>; 4] {
    let q = n / 4;
    [0..q, q..2 * q, 2 * q..3 * q, 3 * q..n]
}

pub fn quadrant_chi_square(payload: &[u8]) -> Result<[f64; 4]> {
    if payload.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "quadrant features need at least 4 bytes, got {}",
            payload.len()
        )));
    }
    let bounds = quadrant_bounds(payload.len());
    let mut chi = [0.0; 4];
    for (slot, range) in chi.iter_mut().zip(bounds) {
        *slot = chi_square(&payload[range])?;
    }
    Ok(chi)
}

pub fn quadrant_features(sample: &crate::packetize::Sample) -> Result<FeatureVector> {
    Ok(FeatureVector {
        chi: quadrant_chi_square(&sample.payload)?,
        label: Some(sample.label),
    })
}

pub fn featurize(dataset: &Dataset) -> Result<Vec<FeatureVector>> {
    dataset.samples.iter().map(quadrant_features).collect()
}

/// Writes one row per vector: four chi-square values then the label bit.
/// Values use the shortest decimal form that parses back to the same `f64`.
pub fn write_feature_csv<W: Write>(mut out: W, rows: &[FeatureVector]) -> std::io::Result<()> {
    for row in rows {
        let label = row.label.map(|l| l.bit().to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.chi[0], row.chi[1], row.chi[2], row.chi[3], label
        )?;
    }
    out.flush()
}

pub fn read_feature_csv<R: BufRead>(input: R) -> Result<Vec<FeatureVector>> {
    let mut rows = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let mut chi = [0.0; 4];
        for (slot, field) in chi.iter_mut().zip(&fields[..4]) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad chi-square value {field:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::parse(
                    line_no,
                    format!("chi-square out of range: {v}"),
                ));
            }
            *slot = v;
        }
        let label = match fields[4].trim() {
            "" => None,
            bit => Some(
                bit.parse::<u8>()
                    .ok()
                    .and_then(Label::from_bit)
                    .ok_or_else(|| {
                        Error::parse(line_no, format!("label must be 0 or 1, got {bit:?}"))
                    })?,
            ),
        };
        rows.push(FeatureVector { chi, label });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassEntropy {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyStats {
    pub compressed: ClassEntropy,
    pub encrypted: ClassEntropy,
}

impl EntropyStats {
    /// `mean_compressed / mean_encrypted`.
    pub fn ratio(&self) -> f64 {
        self.compressed.mean / self.encrypted.mean
    }

    pub fn pooled_std(&self) -> f64 {
        ((self.compressed.std.powi(2) + self.encrypted.std.powi(2)) / 2.0).sqrt()
    }

    /// `|mean difference| / pooled std`; zero when both classes are degenerate
    /// and equal.
    pub fn standardized_gap(&self) -> f64 {
        let gap = (self.compressed.mean - self.encrypted.mean).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.pooled_std()
        }
    }
}

fn class_entropy(values: &[f64]) -> ClassEntropy {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    ClassEntropy {
        count: n,
        mean,
        std: var.sqrt(),
    }
}

/// Per-class mean and spread of per-packet Shannon entropy.
pub fn entropy_study(dataset: &Dataset) -> Result<EntropyStats> {
    let mut compressed = Vec::new();
    let mut encrypted = Vec::new();
    for s in &dataset.samples {
        let h = shannon_entropy(&s.payload)?;
        match s.label {
            Label::Compressed => compressed.push(h),
            Label::Encrypted => encrypted.push(h),
        }
    }
    if compressed.is_empty() {
        return Err(Error::MissingClass(Label::Compressed));
    }
    if encrypted.is_empty() {
        return Err(Error::MissingClass(Label::Encrypted));
    }
    Ok(EntropyStats {
        compressed: class_entropy(&compressed),
        encrypted: class_entropy(&encrypted),
    })
}
