//! Segmented on-drive cache.
//!
//! The cache tracks which sectors are resident (for timing) and which are
//! dirty (for contents). Clean contents are never stored: a read resolves
//! against the media image with dirty sectors laid on top, so cached and
//! media copies cannot disagree observably.
//!
//! At most one media fill is active at a time; it models the drive's single
//! read stream. The simulator reports arriving sectors through
//! [`DiskCache::on_media_data`] and cancels the stream with
//! [`DiskCache::abort_fill`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::disk::SECTOR_BYTES;
use crate::media::MediaImage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiskCacheError {
    #[error("invalid disk cache configuration: {0}")]
    Config(String),
    #[error("every segment is dirty and destaging is disabled")]
    CacheFull,
    #[error("media data at lba {lba} (+{sectors}) matches no outstanding fill")]
    UnexpectedFill { lba: u64, sectors: u64 },
    #[error("zero-length request at lba {0}")]
    ZeroLength(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadPrefetch {
    None,
    SequentialFill,
    /// Sequential fill plus a fixed-size prefetch when a short forward jump
    /// is followed by a return to the sector after the first request.
    Local512K,
}

impl ReadPrefetch {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadPrefetch::None => "none",
            ReadPrefetch::SequentialFill => "sequential_fill",
            ReadPrefetch::Local512K => "local_512k",
        }
    }
}

impl FromStr for ReadPrefetch {
    type Err = DiskCacheError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "sequential_fill" => Ok(Self::SequentialFill),
            "local_512k" => Ok(Self::Local512K),
            _ => Err(DiskCacheError::Config(format!("unknown read_prefetch {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WritePolicy {
    WriteBack,
    WriteThrough,
}

impl WritePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            WritePolicy::WriteBack => "write_back",
            WritePolicy::WriteThrough => "write_through",
        }
    }
}

impl FromStr for WritePolicy {
    type Err = DiskCacheError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "write_back" => Ok(Self::WriteBack),
            "write_through" => Ok(Self::WriteThrough),
            _ => Err(DiskCacheError::Config(format!("unknown write_policy {s:?}"))),
        }
    }
}

impl fmt::Display for ReadPrefetch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for WritePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiskCacheConfig {
    pub total_bytes: u64,
    pub segment_count: u32,
    pub segment_bytes: u64,
    pub read_prefetch: ReadPrefetch,
    pub prefetch_block_bytes: u64,
    pub write_policy: WritePolicy,
    pub locality_radius_sectors: u64,
    /// One extra rotation when a 128 KB read drains the end of a prefetch.
    pub reposition_penalty: bool,
    pub destage: bool,
    pub bus_bytes_per_us: f64,
    pub command_overhead_us: f64,
}

impl Default for DiskCacheConfig {
    fn default() -> Self {
        Self {
            total_bytes: 8 << 20,
            segment_count: 16,
            segment_bytes: 512 << 10,
            read_prefetch: ReadPrefetch::SequentialFill,
            prefetch_block_bytes: 512 << 10,
            write_policy: WritePolicy::WriteBack,
            locality_radius_sectors: 1024,
            reposition_penalty: false,
            destage: true,
            bus_bytes_per_us: 100.0,
            command_overhead_us: 20.0,
        }
    }
}

impl DiskCacheConfig {
    pub fn validate(&self) -> Result<(), DiskCacheError> {
        let bad = |m: &str| Err(DiskCacheError::Config(m.to_string()));
        if self.segment_count == 0 || self.segment_bytes < SECTOR_BYTES || self.segment_bytes % SECTOR_BYTES != 0 {
            return bad("segments must be non-empty whole sectors");
        }
        if u64::from(self.segment_count) * self.segment_bytes > self.total_bytes {
            return bad("segment_count * segment_bytes exceeds total_bytes");
        }
        if self.read_prefetch != ReadPrefetch::None && self.prefetch_block_bytes < SECTOR_BYTES {
            return bad("prefetch_block_bytes must be at least one sector");
        }
        if !(self.bus_bytes_per_us > 0.0) || !(self.command_overhead_us >= 0.0) {
            return bad("bus rate must be positive and command overhead non-negative");
        }
        Ok(())
    }

    pub fn segment_sectors(&self) -> u64 {
        self.segment_bytes / SECTOR_BYTES
    }

    /// Host transfer time plus command overhead for `sectors`.
    pub fn bus_time_us(&self, sectors: u64) -> f64 {
        (sectors * SECTOR_BYTES) as f64 / self.bus_bytes_per_us
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Segment {
    base: u64,
    valid: u64,
    dirty: BTreeMap<u64, u64>,
    dirty_since: u64,
    last_touch: u64,
}

impl Segment {
    fn end(&self) -> u64 {
        self.base + self.valid
    }

    fn holds(&self, lba: u64) -> bool {
        self.valid > 0 && self.base <= lba && lba < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillKind {
    Demand,
    SequentialFill,
    Local512K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fill {
    pub begin: u64,
    pub next: u64,
    pub end: u64,
    pub kind: FillKind,
    segment: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    /// The first `resident` sectors are in cache.
    Partial { resident: u64 },
    Miss,
}

/// Media work implied by a read. Sectors `[start, end)` are to be read
/// from the media; the request itself completes once `demand_end` has
/// arrived (immediately if `demand_end <= start`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fetch {
    pub start: u64,
    pub demand_end: u64,
    pub end: u64,
    pub kind: FillKind,
    /// The fetch extends the active fill rather than starting a new one.
    pub continues: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadPlan {
    pub lookup: Lookup,
    pub fetch: Option<Fetch>,
    /// The local-pattern prefetch fired on this request.
    pub quirk: bool,
    pub penalty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteAck {
    AckNow,
    AckAfterMedia,
    /// No clean segment is free; destage one and retry.
    NeedsDestage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DestageJob {
    segment: usize,
    /// Contiguous dirty runs in lba order.
    pub runs: Vec<(u64, Vec<u64>)>,
}

impl DestageJob {
    pub fn sectors(&self) -> u64 {
        self.runs.iter().map(|(_, s)| s.len() as u64).sum()
    }
}

/// Remembers the last three reads and recognises `A, B, C` with
/// `A.end < B.start <= A.start + radius` and `C.start == A.end`.
#[derive(Debug, Clone)]
pub struct LocalPatternDetector {
    window: VecDeque<(u64, u64)>,
    radius: u64,
}

impl LocalPatternDetector {
    pub fn new(radius_sectors: u64) -> Self {
        Self { window: VecDeque::with_capacity(3), radius: radius_sectors }
    }

    /// Records a read; returns true when it completes the pattern and was
    /// not already resident.
    pub fn push(&mut self, start: u64, end: u64, missed: bool) -> bool {
        if self.window.len() == 3 {
            self.window.pop_front();
        }
        self.window.push_back((start, end));
        if self.window.len() < 3 || !missed {
            return false;
        }
        let (a, b, c) = (self.window[0], self.window[1], self.window[2]);
        let hit = b.0 > a.1 && b.0 - a.0 <= self.radius && c.0 == a.1;
        if hit {
            self.window.drain(..2);
        }
        hit
    }
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    cfg: DiskCacheConfig,
    cap: u64,
    segments: Vec<Segment>,
    clock: u64,
    fill: Option<Fill>,
    detector: LocalPatternDetector,
    last_read_end: Option<u64>,
    prefetch_ends: VecDeque<u64>,
    quirk_prefetches: u64,
}

impl DiskCache {
    pub fn new(cfg: DiskCacheConfig) -> Result<Self, DiskCacheError> {
        cfg.validate()?;
        Ok(Self {
            cap: cfg.segment_sectors(),
            segments: vec![Segment::default(); cfg.segment_count as usize],
            clock: 0,
            fill: None,
            detector: LocalPatternDetector::new(cfg.locality_radius_sectors),
            last_read_end: None,
            prefetch_ends: VecDeque::new(),
            quirk_prefetches: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &DiskCacheConfig {
        &self.cfg
    }

    pub fn quirk_prefetches(&self) -> u64 {
        self.quirk_prefetches
    }

    pub fn active_fill(&self) -> Option<Fill> {
        self.fill
    }

    pub fn abort_fill(&mut self) {
        self.fill = None;
    }

    pub fn valid_sectors(&self) -> u64 {
        self.segments.iter().map(|s| s.valid).sum()
    }

    pub fn dirty_sectors(&self) -> u64 {
        self.segments.iter().map(|s| s.dirty.len() as u64).sum()
    }

    /// Segment bases in least- to most-recently used order (empty ones
    /// excluded).
    pub fn lru_bases(&self) -> Vec<u64> {
        let mut v: Vec<&Segment> = self.segments.iter().filter(|s| s.valid > 0).collect();
        v.sort_by_key(|s| s.last_touch);
        v.iter().map(|s| s.base).collect()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn fill_segment(&self) -> Option<usize> {
        self.fill.and_then(|f| f.segment)
    }

    fn victims(&self, exclude: Option<usize>) -> Vec<usize> {
        let busy = self.fill_segment();
        let mut v: Vec<usize> = (0..self.segments.len())
            .filter(|&i| self.segments[i].dirty.is_empty() && Some(i) != busy && Some(i) != exclude)
            .collect();
        v.sort_by_key(|&i| (self.segments[i].valid > 0, self.segments[i].last_touch));
        v
    }

    fn claim(&mut self, idx: usize, base: u64) {
        let t = self.tick();
        let s = &mut self.segments[idx];
        s.base = base;
        s.valid = 0;
        s.last_touch = t;
    }

    /// End of the resident run that contains `lba` (or `lba` itself).
    fn resident_end(&self, lba: u64) -> u64 {
        let mut cursor = lba;
        while let Some(s) = self.segments.iter().find(|s| s.holds(cursor)) {
            cursor = s.end();
        }
        cursor
    }

    fn touch_range(&mut self, lba: u64, end: u64) {
        let t = self.tick();
        for s in &mut self.segments {
            if s.valid > 0 && s.base < end && lba < s.end() {
                s.last_touch = t;
            }
        }
    }

    fn note_prefetch_end(&mut self, end: u64) {
        if self.prefetch_ends.back() != Some(&end) {
            self.prefetch_ends.push_back(end);
            if self.prefetch_ends.len() > 64 {
                self.prefetch_ends.pop_front();
            }
        }
    }

    pub fn read_lookup(&mut self, lba: u64, sectors: u64) -> Result<ReadPlan, DiskCacheError> {
        if sectors == 0 {
            return Err(DiskCacheError::ZeroLength(lba));
        }
        let req_end = lba + sectors;
        let have_end = self.resident_end(lba);
        let prefix = have_end.min(req_end) - lba;
        let lookup = match prefix {
            p if p == sectors => Lookup::Hit,
            0 => Lookup::Miss,
            p => Lookup::Partial { resident: p },
        };
        self.touch_range(lba, lba + prefix);
        let sequential = self.last_read_end == Some(lba);
        self.last_read_end = Some(req_end);

        let quirk = self.cfg.read_prefetch == ReadPrefetch::Local512K
            && self.detector.push(lba, req_end, lookup != Lookup::Hit);
        let penalty = self.cfg.reposition_penalty
            && lookup == Lookup::Hit
            && sectors * SECTOR_BYTES == 128 << 10
            && self.take_prefetch_end(req_end);

        let (want_end, kind) = if quirk {
            self.quirk_prefetches += 1;
            (req_end.max(lba + self.cfg.prefetch_block_bytes / SECTOR_BYTES), FillKind::Local512K)
        } else if sequential && self.cfg.read_prefetch != ReadPrefetch::None {
            let base = lba
                .checked_sub(1)
                .and_then(|p| self.segments.iter().find(|s| s.holds(p)))
                .map_or(lba, |s| s.base);
            let mut target = base + self.cap;
            if req_end > base + self.cap / 2 {
                target += self.cap;
            }
            (req_end.max(target), FillKind::SequentialFill)
        } else {
            (req_end, FillKind::Demand)
        };

        let fetch = match self.fill {
            Some(ref mut f) if f.next <= have_end && have_end < f.end => {
                if want_end > f.end {
                    f.end = want_end;
                    if kind != FillKind::Demand {
                        f.kind = kind;
                    }
                }
                let (f_next, end, fk) = (f.next, f.end, f.kind);
                if kind != FillKind::Demand {
                    self.note_prefetch_end(want_end);
                }
                Some(Fetch { start: f_next, demand_end: req_end, end, kind: fk, continues: true })
            }
            _ if want_end > have_end => {
                let segment = self.segment_for_fill(have_end);
                self.fill = Some(Fill { begin: have_end, next: have_end, end: want_end, kind, segment });
                if kind != FillKind::Demand {
                    self.note_prefetch_end(want_end);
                }
                Some(Fetch { start: have_end, demand_end: req_end, end: want_end, kind, continues: false })
            }
            _ => None,
        };
        Ok(ReadPlan { lookup, fetch, quirk, penalty })
    }

    fn take_prefetch_end(&mut self, end: u64) -> bool {
        if let Some(i) = self.prefetch_ends.iter().position(|&e| e == end) {
            self.prefetch_ends.remove(i);
            true
        } else {
            false
        }
    }

    fn segment_for_fill(&mut self, lba: u64) -> Option<usize> {
        if let Some(i) = self.segments.iter().position(|s| s.valid > 0 && s.end() == lba && s.valid < self.cap) {
            return Some(i);
        }
        let v = *self.victims(None).first()?;
        self.claim(v, lba);
        Some(v)
    }

    /// Sectors `[lba, lba + sectors)` have arrived from the media for the
    /// active fill.
    pub fn on_media_data(&mut self, lba: u64, sectors: u64) -> Result<(), DiskCacheError> {
        let unexpected = DiskCacheError::UnexpectedFill { lba, sectors };
        let Some(mut fill) = self.fill else {
            return Err(unexpected);
        };
        if sectors == 0 || lba != fill.next || lba + sectors > fill.end {
            return Err(unexpected);
        }
        let mut cursor = lba;
        let end = lba + sectors;
        while cursor < end {
            let usable = fill.segment.filter(|&i| {
                let s = &self.segments[i];
                s.end() == cursor && s.valid < self.cap
            });
            let idx = match usable {
                Some(i) => i,
                None => {
                    let Some(&v) = self.victims(fill.segment).first() else {
                        fill.segment = None;
                        break;
                    };
                    self.claim(v, cursor);
                    v
                }
            };
            fill.segment = Some(idx);
            let take = (self.cap - self.segments[idx].valid).min(end - cursor);
            self.segments[idx].valid += take;
            cursor += take;
        }
        let t = self.tick();
        if let Some(i) = fill.segment {
            self.segments[i].last_touch = t;
        }
        fill.next = end;
        self.fill = if fill.next == fill.end { None } else { Some(fill) };
        Ok(())
    }

    /// Removes `[lba, lba + stamps.len())` from every resident run and
    /// drops dirty sectors that `stamps` overwrites.
    fn supersede(&mut self, lba: u64, stamps: &[u64]) {
        let end = lba + stamps.len() as u64;
        for s in &mut self.segments {
            if s.valid > 0 && s.base < end && lba < s.end() {
                s.valid = lba.saturating_sub(s.base);
            }
            let doomed: Vec<u64> =
                s.dirty.range(lba..end).map(|(&k, _)| k).filter(|&k| stamps[(k - lba) as usize] != 0).collect();
            for k in doomed {
                s.dirty.remove(&k);
            }
        }
    }

    /// Accepts a host write of `stamps.len()` sectors. A zero stamp leaves
    /// that sector's previous contents in place.
    pub fn write_accept(&mut self, lba: u64, stamps: &[u64], force_media: bool) -> Result<WriteAck, DiskCacheError> {
        let sectors = stamps.len() as u64;
        if sectors == 0 {
            return Err(DiskCacheError::ZeroLength(lba));
        }
        let end = lba + sectors;
        if force_media || self.cfg.write_policy == WritePolicy::WriteThrough {
            self.supersede(lba, stamps);
            return Ok(WriteAck::AckAfterMedia);
        }
        let busy = self.fill_segment();
        let append = self
            .segments
            .iter()
            .position(|s| s.valid > 0 && s.end() == lba && s.valid < self.cap && Some(s.base) != busy.map(|b| self.segments[b].base));
        let room = append.map_or(0, |i| self.cap - self.segments[i].valid);
        let rest = sectors.saturating_sub(room);
        let needed = rest.div_ceil(self.cap) as usize;
        let victims = self.victims(append);
        if victims.len() < needed {
            return if self.cfg.destage { Ok(WriteAck::NeedsDestage) } else { Err(DiskCacheError::CacheFull) };
        }
        self.supersede(lba, stamps);
        let t = self.tick();
        let mut cursor = lba;
        let targets = append.into_iter().map(|i| (i, false)).chain(victims.into_iter().take(needed).map(|i| (i, true)));
        for (idx, fresh) in targets {
            if cursor == end {
                break;
            }
            let s = &mut self.segments[idx];
            if fresh {
                s.base = cursor;
                s.valid = 0;
            }
            let take = (self.cap - s.valid).min(end - cursor);
            if s.dirty.is_empty() {
                s.dirty_since = t;
            }
            for k in cursor..cursor + take {
                let v = stamps[(k - lba) as usize];
                if v != 0 {
                    s.dirty.insert(k, v);
                }
            }
            s.valid += take;
            s.last_touch = t;
            cursor += take;
        }
        Ok(WriteAck::AckNow)
    }

    /// Dirty data of the segment that has been dirty longest.
    pub fn next_destage(&self) -> Option<DestageJob> {
        let (segment, s) = self
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.dirty.is_empty())
            .min_by_key(|(_, s)| s.dirty_since)?;
        let mut runs: Vec<(u64, Vec<u64>)> = Vec::new();
        for (&k, &v) in &s.dirty {
            match runs.last_mut() {
                Some((start, stamps)) if *start + stamps.len() as u64 == k => stamps.push(v),
                _ => runs.push((k, vec![v])),
            }
        }
        Some(DestageJob { segment, runs })
    }

    /// Clears the sectors written by `job` unless they were rewritten while
    /// it ran.
    pub fn destage_done(&mut self, job: &DestageJob) {
        let s = &mut self.segments[job.segment];
        for (start, stamps) in &job.runs {
            for (i, &v) in stamps.iter().enumerate() {
                let k = start + i as u64;
                if s.dirty.get(&k) == Some(&v) {
                    s.dirty.remove(&k);
                }
            }
        }
    }

    /// What a host read of `[lba, lba + sectors)` returns.
    pub fn resolve_read(&self, lba: u64, sectors: u64, media: &MediaImage) -> Vec<u64> {
        let mut out = media.read(lba, sectors);
        for s in &self.segments {
            for (&k, &v) in s.dirty.range(lba..lba + sectors) {
                out[(k - lba) as usize] = v;
            }
        }
        out
    }
}
