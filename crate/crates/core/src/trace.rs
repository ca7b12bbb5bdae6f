//! Filemon trace ingestion and the canonical request format.
//!
//! Raw Filemon records are parsed into [`RawTraceLine`]s, then
//! [`normalize`] repairs the two tracer defects that matter for replay:
//! requests are addressed by file name plus relative offset instead of by
//! disk address, and helper processes are not separated from the
//! application. The result is a stream of [`CanonicalRequest`]s which can
//! be stored in a small line-oriented text format.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

pub const CANONICAL_VERSION: u32 = 1;
const CANONICAL_MAGIC: &str = "# iosim-trace";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed record ({reason})")]
    MalformedLine { line: usize, reason: String },
    #[error("seq {seq}: unknown operation {op:?}")]
    UnknownOp { seq: u64, op: String },
    #[error("seq {seq}: bad timestamp {text:?}")]
    BadTime { seq: u64, text: String },
    #[error("seq {seq}: not strictly after seq {prev}")]
    SeqOrder { seq: u64, prev: u64 },
    #[error("seq {seq}: timestamp went backwards (midnight rollover is not supported)")]
    MidnightRollover { seq: u64 },
    #[error("cluster size {0} is not a power of two >= 512")]
    BadClusterSize(u64),
    #[error("canonical trace version {found}, expected {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error("canonical trace line {line}: {reason}")]
    BadCanonical { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Open,
    Read,
    Write,
    Close,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Open => "OPEN",
            Op::Read => "READ",
            Op::Write => "WRITE",
            Op::Close => "CLOSE",
        }
    }
}

impl FromStr for Op {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "OPEN" => Ok(Op::Open),
            "READ" => Ok(Op::Read),
            "WRITE" => Ok(Op::Write),
            "CLOSE" => Ok(Op::Close),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    App,
    System,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::App => "APP",
            Origin::System => "SYSTEM",
        }
    }
}

/// File access mode, fixed when the file is opened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessMode {
    Normal,
    Sequential,
    NoBuffer,
    WriteThrough,
}

impl AccessMode {
    pub const ALL: [AccessMode; 4] = [
        AccessMode::Normal,
        AccessMode::Sequential,
        AccessMode::NoBuffer,
        AccessMode::WriteThrough,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AccessMode::Normal => "NORMAL",
            AccessMode::Sequential => "SEQUENTIAL",
            AccessMode::NoBuffer => "NO_BUFFER",
            AccessMode::WriteThrough => "WRITE_THROUGH",
        }
    }

    /// Parses either the canonical upper-case name or a config-style
    /// lower-case one (`no_buffer`).
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NORMAL" => Some(AccessMode::Normal),
            "SEQUENTIAL" => Some(AccessMode::Sequential),
            "NO_BUFFER" | "NOBUFFER" => Some(AccessMode::NoBuffer),
            "WRITE_THROUGH" | "WRITETHROUGH" => Some(AccessMode::WriteThrough),
            _ => None,
        }
    }

    /// Mode implied by a set of open flags. No-buffering wins over
    /// write-through, which wins over the sequential hint.
    pub fn from_flags(flags: &BTreeSet<OpenFlag>) -> Self {
        if flags.contains(&OpenFlag::NoBuffer) {
            AccessMode::NoBuffer
        } else if flags.contains(&OpenFlag::WriteThrough) {
            AccessMode::WriteThrough
        } else if flags.contains(&OpenFlag::SequentialScan) {
            AccessMode::Sequential
        } else {
            AccessMode::Normal
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpenFlag {
    NoBuffer,
    WriteThrough,
    SequentialScan,
    Open,
    OpenIf,
    Other(String),
}

impl OpenFlag {
    fn from_token(tok: &str) -> Self {
        match tok {
            "NoBuffer" => OpenFlag::NoBuffer,
            "WriteThrough" => OpenFlag::WriteThrough,
            "Sequential" | "SequentialScan" => OpenFlag::SequentialScan,
            "Open" => OpenFlag::Open,
            "OpenIf" => OpenFlag::OpenIf,
            other => OpenFlag::Other(other.to_string()),
        }
    }
}

/// One Filemon record as printed by the tracer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTraceLine {
    pub seq: u64,
    /// Microseconds since midnight.
    pub wallclock_us: u64,
    pub process_name: String,
    pub pid: u32,
    pub op: Op,
    pub path: String,
    pub lcn: Option<u64>,
    pub offset_bytes: Option<u64>,
    pub length_bytes: Option<u64>,
    pub flags: BTreeSet<OpenFlag>,
    pub status: String,
}

/// Splits a record into fields. Tabs take precedence; otherwise runs of two
/// or more spaces separate fields so that single spaces inside paths and
/// the trailing detail column survive.
fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        return line.split('\t').map(str::trim).filter(|f| !f.is_empty()).collect();
    }
    let mut fields = Vec::new();
    let mut rest = line.trim();
    while !rest.is_empty() {
        match rest.find("  ") {
            Some(i) => {
                fields.push(&rest[..i]);
                rest = rest[i..].trim_start();
            }
            None => {
                fields.push(rest);
                break;
            }
        }
    }
    fields
}

/// Parses `H:M:S.frac` with one- or two-digit hour and minute fields.
pub fn parse_wallclock(text: &str) -> Option<u64> {
    let mut parts = text.split(':');
    let h: u64 = parse_small(parts.next()?, 2)?;
    let m: u64 = parse_small(parts.next()?, 2)?;
    let sec = parts.next()?;
    if parts.next().is_some() || h > 23 || m > 59 {
        return None;
    }
    let (whole, frac) = match sec.split_once('.') {
        Some((w, f)) => (w, f),
        None => (sec, ""),
    };
    let s: u64 = parse_small(whole, 2)?;
    if s > 59 || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut frac_us = 0u64;
    for (i, b) in frac.bytes().enumerate() {
        frac_us += u64::from(b - b'0') * 10u64.pow(5 - i as u32);
    }
    Some(((h * 60 + m) * 60 + s) * 1_000_000 + frac_us)
}

fn parse_small(text: &str, max_digits: usize) -> Option<u64> {
    if text.is_empty() || text.len() > max_digits || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

/// Parses a single Filemon record. `line_no` is only used in error messages
/// when the sequence number itself cannot be read.
pub fn parse_trace_line(line: &str, line_no: usize) -> Result<RawTraceLine, TraceError> {
    let malformed = |reason: &str| TraceError::MalformedLine {
        line: line_no,
        reason: reason.to_string(),
    };
    let fields = split_fields(line);
    if fields.len() < 4 {
        return Err(malformed("expected at least seq, time, process and op"));
    }
    let seq: u64 = fields[0].parse().map_err(|_| malformed("missing sequence number"))?;
    let wallclock_us = parse_wallclock(fields[1]).ok_or_else(|| TraceError::BadTime {
        seq,
        text: fields[1].to_string(),
    })?;
    let (process_name, pid) = match fields[2].rsplit_once(':') {
        Some((name, pid)) => (
            name.to_string(),
            pid.parse().map_err(|_| malformed("bad pid"))?,
        ),
        None => return Err(malformed("process field lacks ':pid'")),
    };
    let op: Op = fields[3].parse().map_err(|_| TraceError::UnknownOp {
        seq,
        op: fields[3].to_string(),
    })?;
    let path = fields.get(4).map(|p| p.to_string()).unwrap_or_default();
    let detail = fields.get(5..).map(|d| d.join(" ")).unwrap_or_default();

    let mut rec = RawTraceLine {
        seq,
        wallclock_us,
        process_name,
        pid,
        op,
        path,
        lcn: None,
        offset_bytes: None,
        length_bytes: None,
        flags: BTreeSet::new(),
        status: String::new(),
    };

    let mut status = Vec::new();
    let mut tokens = detail.split_whitespace().peekable();
    while let Some(tok) = tokens.next() {
        let mut number = |what: &str| -> Result<u64, TraceError> {
            tokens
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed(&format!("{what} needs a number")))
        };
        match tok {
            "LCN:" => rec.lcn = Some(number("LCN")?),
            "Offset:" => rec.offset_bytes = Some(number("Offset")?),
            "Length:" => rec.length_bytes = Some(number("Length")?),
            "Options:" => {
                while let Some(flag) = tokens.next_if(|t| !t.ends_with(':')) {
                    rec.flags.insert(OpenFlag::from_token(flag));
                }
            }
            "Access:" => {
                tokens.next();
            }
            other => status.push(other),
        }
    }
    rec.status = status.join(" ");

    if matches!(op, Op::Read | Op::Write)
        && (rec.lcn.is_none() || rec.offset_bytes.is_none() || rec.length_bytes.is_none())
    {
        return Err(malformed("READ/WRITE record needs LCN, Offset and Length"));
    }
    Ok(rec)
}

/// Parses a whole Filemon capture, skipping blank lines.
pub fn parse_trace(text: &str) -> Result<Vec<RawTraceLine>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_trace_line(l, i + 1))
        .collect()
}

/// One normalized request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalRequest {
    pub issue_time_us: u64,
    pub origin: Origin,
    pub op: Op,
    pub file_id: u32,
    pub file_offset_bytes: u64,
    pub length_bytes: u64,
    pub disk_byte_addr: u64,
    pub mode: AccessMode,
}

impl CanonicalRequest {
    pub fn is_io(&self) -> bool {
        matches!(self.op, Op::Read | Op::Write)
    }

    /// Disk address of file offset zero, assuming the file is laid out
    /// contiguously around this request.
    pub fn file_disk_base(&self) -> u64 {
        self.disk_byte_addr.saturating_sub(self.file_offset_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    OrphanIo,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceDefectReport {
    pub dropped_lines: Vec<(u64, DropReason)>,
    pub system_requests_tagged: usize,
    pub address_rewrites: usize,
    /// Interned paths, indexed by file id.
    pub paths: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct NormalizeOptions {
    pub cluster_size_bytes: u64,
    /// Process names whose requests are tagged [`Origin::System`].
    /// Compared case-insensitively.
    pub system_processes: Vec<String>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            cluster_size_bytes: 4096,
            system_processes: vec!["csrss.exe".into(), "explorer.exe".into()],
        }
    }
}

#[derive(Default)]
struct FileState {
    open_handles: u32,
    mode: Option<AccessMode>,
}

/// Converts raw records into canonical requests.
///
/// Every input line ends up either in the returned requests or in
/// `dropped_lines`.
pub fn normalize(
    lines: &[RawTraceLine],
    opts: &NormalizeOptions,
) -> Result<(Vec<CanonicalRequest>, TraceDefectReport), TraceError> {
    let cluster = opts.cluster_size_bytes;
    if cluster < 512 || !cluster.is_power_of_two() {
        return Err(TraceError::BadClusterSize(cluster));
    }
    let deny: Vec<String> = opts.system_processes.iter().map(|p| p.to_ascii_lowercase()).collect();

    let mut report = TraceDefectReport::default();
    let mut ids: HashMap<&str, u32> = HashMap::new();
    let mut files: Vec<FileState> = Vec::new();
    let mut out = Vec::with_capacity(lines.len());
    let mut prev: Option<&RawTraceLine> = None;

    for line in lines {
        if let Some(p) = prev {
            if line.seq <= p.seq {
                return Err(TraceError::SeqOrder { seq: line.seq, prev: p.seq });
            }
            if line.wallclock_us < p.wallclock_us {
                return Err(TraceError::MidnightRollover { seq: line.seq });
            }
        }
        prev = Some(line);

        let file_id = *ids.entry(line.path.as_str()).or_insert_with(|| {
            report.paths.push(line.path.clone());
            files.push(FileState::default());
            (files.len() - 1) as u32
        });
        let state = &mut files[file_id as usize];
        let origin = if deny.contains(&line.process_name.to_ascii_lowercase()) {
            Origin::System
        } else {
            Origin::App
        };

        let mode = match line.op {
            Op::Open => {
                let mode = AccessMode::from_flags(&line.flags);
                state.open_handles += 1;
                state.mode = Some(mode);
                mode
            }
            Op::Read | Op::Write | Op::Close => {
                if state.open_handles == 0 {
                    report.dropped_lines.push((line.seq, DropReason::OrphanIo));
                    continue;
                }
                let mode = state.mode.unwrap_or(AccessMode::Normal);
                if line.op == Op::Close {
                    state.open_handles -= 1;
                }
                mode
            }
        };

        let (offset, length, addr) = match line.op {
            Op::Read | Op::Write => {
                let offset = line.offset_bytes.unwrap_or(0);
                report.address_rewrites += 1;
                (
                    offset,
                    line.length_bytes.unwrap_or(0),
                    line.lcn.unwrap_or(0) * cluster + offset,
                )
            }
            _ => (0, 0, 0),
        };
        if origin == Origin::System {
            report.system_requests_tagged += 1;
        }
        out.push(CanonicalRequest {
            issue_time_us: line.wallclock_us,
            origin,
            op: line.op,
            file_id,
            file_offset_bytes: offset,
            length_bytes: length,
            disk_byte_addr: addr,
            mode,
        });
    }
    Ok((out, report))
}

/// A canonical trace: the requests plus the cluster size they were
/// normalized with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalTrace {
    pub cluster_size_bytes: u64,
    pub requests: Vec<CanonicalRequest>,
}

impl CanonicalTrace {
    /// Writes the header line and one tab-separated line per request.
    /// Returns the number of bytes written.
    pub fn write_to<W: Write>(&self, mut sink: W) -> io::Result<usize> {
        let mut written = 0;
        let header = format!(
            "{CANONICAL_MAGIC} v{CANONICAL_VERSION} cluster_size={}\n",
            self.cluster_size_bytes
        );
        sink.write_all(header.as_bytes())?;
        written += header.len();
        for r in &self.requests {
            let line = format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.issue_time_us,
                r.origin.as_str(),
                r.op.as_str(),
                r.file_id,
                r.file_offset_bytes,
                r.length_bytes,
                r.disk_byte_addr,
                r.mode.as_str(),
            );
            sink.write_all(line.as_bytes())?;
            written += line.len();
        }
        sink.flush()?;
        Ok(written)
    }

    pub fn read_from<R: BufRead>(source: R) -> Result<Self, TraceError> {
        let mut lines = source.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let cluster_size_bytes = parse_header(&header)?;
        let mut requests = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            requests.push(parse_canonical_line(&line, i + 2)?);
        }
        Ok(Self { cluster_size_bytes, requests })
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("canonical trace is ASCII")
    }
}

/// Returns true when `text` starts with the canonical trace header.
pub fn looks_canonical(text: &str) -> bool {
    text.starts_with(CANONICAL_MAGIC)
}

fn parse_header(header: &str) -> Result<u64, TraceError> {
    let bad = |reason: &str| TraceError::BadCanonical { line: 1, reason: reason.into() };
    let rest = header.strip_prefix(CANONICAL_MAGIC).ok_or_else(|| bad("missing header"))?;
    let mut parts = rest.split_whitespace();
    let version = parts.next().ok_or_else(|| bad("missing version"))?;
    if version != format!("v{CANONICAL_VERSION}") {
        return Err(TraceError::VersionMismatch {
            found: version.to_string(),
            expected: CANONICAL_VERSION,
        });
    }
    parts
        .next()
        .and_then(|p| p.strip_prefix("cluster_size="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing cluster_size"))
}

fn parse_canonical_line(line: &str, line_no: usize) -> Result<CanonicalRequest, TraceError> {
    let bad = |reason: String| TraceError::BadCanonical { line: line_no, reason };
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return Err(bad(format!("expected 8 fields, found {}", f.len())));
    }
    let num = |i: usize| -> Result<u64, TraceError> {
        f[i].parse().map_err(|_| bad(format!("field {} is not a number: {:?}", i + 1, f[i])))
    };
    let origin = match f[1] {
        "APP" => Origin::App,
        "SYSTEM" => Origin::System,
        o => return Err(bad(format!("unknown origin {o:?}"))),
    };
    let op = f[2].parse().map_err(|_| bad(format!("unknown op {:?}", f[2])))?;
    let mode = AccessMode::parse(f[7]).ok_or_else(|| bad(format!("unknown mode {:?}", f[7])))?;
    Ok(CanonicalRequest {
        issue_time_us: num(0)?,
        origin,
        op,
        file_id: u32::try_from(num(3)?).map_err(|_| bad("file id out of range".into()))?,
        file_offset_bytes: num(4)?,
        length_bytes: num(5)?,
        disk_byte_addr: num(6)?,
        mode,
    })
}
