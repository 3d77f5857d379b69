//! Classic pcap ingestion and the two pre-filters applied before
//! classification: TLS record detection and chi-square cleartext detection.

use std::io::Write;
use std::net::Ipv4Addr;

use crate::features;
use crate::{Error, Result};

const MAGIC_USEC: u32 = 0xA1B2_C3D4;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_IPV4: u32 = 228;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;
pub const MAX_TCP_PAYLOAD: usize = 65535 - 20 - 20;
const SNAPLEN: u32 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub addr: Ipv4Addr,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedPacket {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub tcp_payload: Vec<u8>,
    pub seq: u32,
    pub ttl: u8,
    /// Length of the frame on the wire, from the record header.
    pub orig_len: u32,
}

impl CapturedPacket {
    pub fn new(src: Endpoint, dst: Endpoint, tcp_payload: Vec<u8>) -> CapturedPacket {
        CapturedPacket {
            ts_sec: 0,
            ts_usec: 0,
            src,
            dst,
            tcp_payload,
            seq: 0,
            ttl: 64,
            orig_len: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkipCounts {
    /// IPv4 records carrying something other than TCP.
    pub non_tcp: usize,
    pub ipv6: usize,
    /// Records whose link type or headers could not be parsed.
    pub malformed: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.non_tcp + self.ipv6 + self.malformed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Capture {
    pub link_type: u32,
    pub packets: Vec<CapturedPacket>,
    pub skipped: SkipCounts,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        let b: [u8; 4] = self.take(4)?.try_into().ok()?;
        Some(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }
}

enum Parsed {
    Tcp(CapturedPacket),
    NonTcp,
    Ipv6,
    Malformed,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_ipv4_tcp(ip: &[u8]) -> Parsed {
    if ip.len() < 20 {
        return Parsed::Malformed;
    }
    match ip[0] >> 4 {
        4 => {}
        6 => return Parsed::Ipv6,
        _ => return Parsed::Malformed,
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total_len = be16(ip, 2) as usize;
    if ihl < 20 || total_len < ihl || total_len > ip.len() {
        return Parsed::Malformed;
    }
    if ip[9] != IPPROTO_TCP {
        return Parsed::NonTcp;
    }
    // Non-first fragments carry no TCP header.
    let frag_offset = be16(ip, 6) & 0x1fff;
    if frag_offset != 0 {
        return Parsed::Malformed;
    }
    let ttl = ip[8];
    let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let seg = &ip[ihl..total_len];
    if seg.len() < 20 {
        return Parsed::Malformed;
    }
    let data_offset = (seg[12] >> 4) as usize * 4;
    if data_offset < 20 || data_offset > seg.len() {
        return Parsed::Malformed;
    }
    Parsed::Tcp(CapturedPacket {
        ts_sec: 0,
        ts_usec: 0,
        src: Endpoint {
            addr: src,
            port: be16(seg, 0),
        },
        dst: Endpoint {
            addr: dst,
            port: be16(seg, 2),
        },
        seq: be32(seg, 4),
        ttl,
        tcp_payload: seg[data_offset..].to_vec(),
        orig_len: 0,
    })
}

fn parse_ethernet(frame: &[u8]) -> Parsed {
    if frame.len() < 14 {
        return Parsed::Malformed;
    }
    let mut ethertype = be16(frame, 12);
    let mut offset = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return Parsed::Malformed;
        }
        ethertype = be16(frame, 16);
        offset = 18;
    }
    match ethertype {
        ETHERTYPE_IPV4 => parse_ipv4_tcp(&frame[offset..]),
        ETHERTYPE_IPV6 => Parsed::Ipv6,
        _ => Parsed::NonTcp,
    }
}

/// Parses a classic pcap image. Records that are not Ethernet/raw-IP →
/// IPv4 → TCP are skipped and counted.
pub fn parse_pcap(data: &[u8]) -> Result<Capture> {
    if data.len() < 24 {
        return Err(Error::NotPcap);
    }
    let magic_le = u32::from_le_bytes(data[0..4].try_into().unwrap());
    let big_endian = match magic_le {
        MAGIC_USEC => false,
        m if m.swap_bytes() == MAGIC_USEC => true,
        _ => return Err(Error::NotPcap),
    };
    let mut cur = Cursor {
        data,
        pos: 20,
        big_endian,
    };
    let link_type = cur.u32().expect("length checked") & 0x0fff_ffff;
    if !matches!(link_type, LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_IPV4) {
        return Err(Error::UnsupportedLinkType(link_type));
    }
    let mut capture = Capture {
        link_type,
        ..Default::default()
    };
    let mut index = 0;
    while cur.pos < data.len() {
        let truncated = Error::TruncatedRecord { index };
        let header = (|| Some((cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?)))();
        let Some((ts_sec, ts_usec, incl_len, orig_len)) = header else {
            return Err(truncated);
        };
        let Some(frame) = cur.take(incl_len as usize) else {
            return Err(truncated);
        };
        let parsed = match link_type {
            LINKTYPE_ETHERNET => parse_ethernet(frame),
            _ => parse_ipv4_tcp(frame),
        };
        match parsed {
            Parsed::Tcp(mut p) => {
                p.ts_sec = ts_sec;
                p.ts_usec = ts_usec;
                p.orig_len = orig_len;
                capture.packets.push(p);
            }
            Parsed::NonTcp => capture.skipped.non_tcp += 1,
            Parsed::Ipv6 => capture.skipped.ipv6 += 1,
            Parsed::Malformed => capture.skipped.malformed += 1,
        }
        index += 1;
    }
    Ok(capture)
}

pub fn read_pcap(path: &std::path::Path) -> Result<Capture> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pcap(&data)
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn frame_for(p: &CapturedPacket) -> Vec<u8> {
    let ip_total = 20 + 20 + p.tcp_payload.len();
    let mut f = Vec::with_capacity(14 + ip_total);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]); // dst mac
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]); // src mac
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let mut ip = [0u8; 20];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&(ip_total as u16).to_be_bytes());
    ip[6] = 0x40; // don't fragment
    ip[8] = p.ttl;
    ip[9] = IPPROTO_TCP;
    ip[12..16].copy_from_slice(&p.src.addr.octets());
    ip[16..20].copy_from_slice(&p.dst.addr.octets());
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    f.extend_from_slice(&ip);

    let mut tcp = [0u8; 20];
    tcp[0..2].copy_from_slice(&p.src.port.to_be_bytes());
    tcp[2..4].copy_from_slice(&p.dst.port.to_be_bytes());
    tcp[4..8].copy_from_slice(&p.seq.to_be_bytes());
    tcp[12] = 5 << 4;
    tcp[13] = 0x18; // PSH, ACK
    tcp[14..16].copy_from_slice(&65535u16.to_be_bytes());
    f.extend_from_slice(&tcp);
    f.extend_from_slice(&p.tcp_payload);
    f
}

/// Serializes packets as a little-endian, microsecond, Ethernet pcap with
/// synthesized IPv4/TCP headers.
pub fn write_pcap<W: Write>(packets: &[CapturedPacket], mut out: W) -> Result<()> {
    if let Some(p) = packets
        .iter()
        .find(|p| p.tcp_payload.len() > MAX_TCP_PAYLOAD)
    {
        return Err(Error::PayloadTooLarge(p.tcp_payload.len()));
    }
    let io = |e| Error::io("<pcap output>", e);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&MAGIC_USEC.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&SNAPLEN.to_le_bytes());
    header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    out.write_all(&header).map_err(io)?;
    for p in packets {
        let frame = frame_for(p);
        let mut rec = Vec::with_capacity(16);
        rec.extend_from_slice(&p.ts_sec.to_le_bytes());
        rec.extend_from_slice(&p.ts_usec.to_le_bytes());
        rec.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        rec.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.write_all(&rec).map_err(io)?;
        out.write_all(&frame).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn pcap_bytes(packets: &[CapturedPacket]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_pcap(packets, &mut buf)?;
    Ok(buf)
}

pub const TLS_MAX_RECORD: usize = 16384 + 2048;

/// True iff the payload starts with a plausible TLS record header: a known
/// content type, a TLS 1.0-1.3 record version and an in-range length.
pub fn detect_tls(payload: &[u8]) -> bool {
    if payload.len() < 5 {
        return false;
    }
    let content_type_ok = matches!(payload[0], 0x14..=0x17);
    let version_ok = payload[1] == 0x03 && matches!(payload[2], 0x01..=0x04);
    let length = u16::from_be_bytes([payload[3], payload[4]]) as usize;
    content_type_ok && version_ok && length <= TLS_MAX_RECORD
}

/// Upper-tail standard normal quantile: `z` with `P(Z > z) = p`.
///
/// Rational approximation by P. J. Acklam, relative error below 1.2e-9.
pub fn normal_upper_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    // lower-tail quantile at 1 - p
    let q = 1.0 - p;
    let low = 0.02425;
    if q < low {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else if q <= 1.0 - low {
        let u = q - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let t = (-2.0 * p.ln()).sqrt();
        -(((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    }
}

/// Wilson-Hilferty approximation of the chi-square value exceeded with
/// probability `significance` at `df` degrees of freedom.
pub fn chi_square_critical(df: f64, significance: f64) -> f64 {
    let z = normal_upper_quantile(significance);
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

pub const DEFAULT_SIGNIFICANCE: f64 = 0.001;
pub const MIN_TRIAGE_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Cleartext,
    Tls,
    Opaque,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Cleartext => "cleartext",
            Verdict::Tls => "tls",
            Verdict::Opaque => "opaque",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriageResult {
    pub verdict: Verdict,
    pub chi_square: f64,
    pub note: Option<&'static str>,
}

/// Flags payloads whose byte histogram is too far from uniform to be
/// encrypted or compressed. Payloads under 256 bytes are left opaque.
pub fn cleartext_filter(payload: &[u8], significance: f64) -> Result<TriageResult> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "significance must lie in (0, 1), got {significance}"
        )));
    }
    if payload.len() < MIN_TRIAGE_LEN {
        let chi_square = if payload.is_empty() {
            0.0
        } else {
            features::chi_square(payload)?
        };
        return Ok(TriageResult {
            verdict: Verdict::Opaque,
            chi_square,
            note: Some("too short"),
        });
    }
    let chi_square = features::chi_square(payload)?;
    let verdict = if chi_square > chi_square_critical(255.0, significance) {
        Verdict::Cleartext
    } else {
        Verdict::Opaque
    };
    Ok(TriageResult {
        verdict,
        chi_square,
        note: None,
    })
}

/// TLS check first, then the cleartext filter.
pub fn triage(payload: &[u8], significance: f64) -> Result<TriageResult> {
    if detect_tls(payload) {
        let chi_square = if payload.is_empty() {
            0.0
        } else {
            features::chi_square(payload)?
        };
        return Ok(TriageResult {
            verdict: Verdict::Tls,
            chi_square,
            note: None,
        });
    }
    cleartext_filter(payload, significance)
}

/// Triage report: `index,verdict,chi_square,length` per packet.
pub fn write_triage_csv<W: Write>(
    mut out: W,
    rows: &[(usize, TriageResult, usize)],
) -> std::io::Result<()> {
    writeln!(out, "index,verdict,chi_square,length")?;
    for (index, t, len) in rows {
        writeln!(out, "{index},{},{},{len}", t.verdict.name(), t.chi_square)?;
    }
    out.flush()
}
