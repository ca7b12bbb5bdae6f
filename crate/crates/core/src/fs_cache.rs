//! File-system cache with its application and system actors.
//!
//! Reads and writes are quantised to 64 KB blocks grouped in 256 KB views.
//! Two actors issue disk I/O: the application, blocked on its own demand
//! loads and direct writes, and the system process, which prefetches and
//! flushes. Each actor has at most one I/O outstanding and issues its
//! queue in FIFO order.
//!
//! The cache is a passive state machine. [`FsCache::submit`],
//! [`FsCache::io_done`] and [`FsCache::drain`] return [`FsAction`]s that the
//! simulator turns into events.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::engine::Micros;
use crate::media::sector_span;
use crate::trace::{AccessMode, CanonicalRequest, Op};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FsCacheError {
    #[error("invalid file-system cache configuration: {0}")]
    Config(String),
    #[error("completion for unknown I/O {0}")]
    UnknownIo(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteRegime {
    /// Writes go to cache; the system process flushes block by block.
    Progressive,
    /// Part of each request goes straight to disk; the cache is flushed in
    /// bulk when the dirty set reaches the threshold.
    Periodic,
}

impl WriteRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            WriteRegime::Progressive => "PROGRESSIVE",
            WriteRegime::Periodic => "PERIODIC",
        }
    }
}

impl fmt::Display for WriteRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsCacheConfig {
    pub block_bytes: u64,
    pub view_bytes: u64,
    pub readahead_trigger: u32,
    pub readahead_window_factor: u64,
    pub working_set_bytes: u64,
    pub reserve_bytes: u64,
    /// Sizes up to this limit are written progressively.
    pub progressive_limit_bytes: u64,
    /// Larger sizes that are still written progressively.
    pub progressive_sizes: Vec<u64>,
    /// Block counts used for the periodic split instead of `ceil(size / block)`.
    pub block_count_overrides: Vec<(u64, u64)>,
    pub fastio_hit_cost_us: Micros,
    pub miss_path_cost_us: Micros,
    pub memcopy_bytes_per_us: f64,
    pub cache_capacity_bytes: u64,
    pub metadata_addr_bytes: u64,
    pub metadata_bytes: u64,
}

impl Default for FsCacheConfig {
    fn default() -> Self {
        Self {
            block_bytes: 65_536,
            view_bytes: 262_144,
            readahead_trigger: 3,
            readahead_window_factor: 2,
            working_set_bytes: 8 << 20,
            reserve_bytes: 6 << 20,
            progressive_limit_bytes: 98_304,
            progressive_sizes: vec![131_072, 262_144],
            block_count_overrides: vec![(327_680, 6)],
            fastio_hit_cost_us: 20,
            miss_path_cost_us: 60,
            memcopy_bytes_per_us: 800.0,
            cache_capacity_bytes: 256 << 20,
            metadata_addr_bytes: 32_768,
            metadata_bytes: 4_096,
        }
    }
}

impl FsCacheConfig {
    pub fn validate(&self) -> Result<(), FsCacheError> {
        let bad = |m: &str| Err(FsCacheError::Config(m.to_string()));
        if self.block_bytes == 0 || self.view_bytes != 4 * self.block_bytes {
            return bad("view must hold exactly four blocks");
        }
        if self.readahead_window_factor == 0 || self.readahead_trigger == 0 {
            return bad("read-ahead trigger and window factor must be positive");
        }
        if self.working_set_bytes == 0 || self.reserve_bytes >= self.working_set_bytes {
            return bad("reserve must be smaller than a positive working set");
        }
        if self.flush_threshold_bytes() < self.block_bytes {
            return bad("flush threshold must cover at least one block");
        }
        if !(self.memcopy_bytes_per_us > 0.0) || self.cache_capacity_bytes < self.view_bytes {
            return bad("copy rate and cache capacity must be positive");
        }
        if self.metadata_bytes == 0 {
            return bad("metadata write must be at least one byte");
        }
        if self.block_count_overrides.iter().any(|&(s, n)| s == 0 || n == 0) {
            return bad("block count overrides must be positive");
        }
        Ok(())
    }

    pub fn flush_threshold_bytes(&self) -> u64 {
        self.working_set_bytes.saturating_sub(self.reserve_bytes)
    }

    fn copy_us(&self, bytes: u64) -> Micros {
        (bytes as f64 / self.memcopy_bytes_per_us).ceil() as Micros
    }
}

/// Block-aligned offsets covering `[offset, offset + length)`.
pub fn split_into_blocks(offset: u64, length: u64, block_bytes: u64) -> Vec<u64> {
    if length == 0 {
        return Vec::new();
    }
    let first = offset / block_bytes;
    let last = (offset + length).div_ceil(block_bytes);
    (first..last).map(|b| b * block_bytes).collect()
}

pub fn classify_write_regime(size_bytes: u64, cfg: &FsCacheConfig) -> WriteRegime {
    if size_bytes <= cfg.progressive_limit_bytes || cfg.progressive_sizes.contains(&size_bytes) {
        WriteRegime::Progressive
    } else {
        WriteRegime::Periodic
    }
}

/// Cache/disk block counts for each position of the periodic cycle of an
/// `n`-block request.
pub fn periodic_splits(n: u64) -> Vec<(u64, u64)> {
    (0..=n / 2).map(|k| (n.div_ceil(2) + k, n - n.div_ceil(2) - k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    App,
    System,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::App => "app",
            Actor::System => "system",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoKind {
    Demand,
    Prefetch,
    PassThrough,
    Direct,
    Flush,
    WriteThrough,
    Metadata,
}

impl IoKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IoKind::Demand => "demand",
            IoKind::Prefetch => "prefetch",
            IoKind::PassThrough => "pass_through",
            IoKind::Direct => "direct",
            IoKind::Flush => "flush",
            IoKind::WriteThrough => "write_through",
            IoKind::Metadata => "metadata",
        }
    }
}

/// A disk request produced by the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskIo {
    pub id: u64,
    pub req: Option<u64>,
    pub actor: Actor,
    pub kind: IoKind,
    pub write: bool,
    pub addr_bytes: u64,
    pub bytes: u64,
    /// Must reach the media before completion.
    pub fua: bool,
    /// Per-sector stamps of a data write, starting at `addr_bytes / 512`;
    /// 0 keeps the sector's contents. Empty for reads and metadata.
    pub stamps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsAction {
    Issue { at: Micros, io: DiskIo },
    Complete { at: Micros, req: u64 },
    Note { kind: &'static str, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteSplit {
    pub req: u64,
    pub regime: WriteRegime,
    pub cache_blocks: u64,
    pub disk_blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushFire {
    pub req: u64,
    pub blocks: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FsStats {
    pub read_hits: u64,
    pub read_misses: u64,
    pub eof_clips: u64,
}

/// 256 KB of one file; bit `i` covers block `i` of the view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct View {
    pub resident: u8,
    pub dirty: u8,
    last_touch: u64,
}

type BlockKey = (u32, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlushState {
    Idle,
    Queued,
    InFlight(u64),
}

#[derive(Debug, Clone)]
struct DirtyBlock {
    sectors: BTreeMap<u64, u64>,
    version: u64,
    order: u64,
    flush: FlushState,
}

#[derive(Debug, Clone)]
enum Work {
    Load(BlockKey, bool),
    Flush(BlockKey),
    Ready(DiskIo),
}

#[derive(Debug, Clone)]
struct Queued {
    id: u64,
    req: Option<u64>,
    not_before: Micros,
    work: Work,
}

#[derive(Debug, Default, Clone)]
struct ActorQueue {
    busy: Option<u64>,
    queue: VecDeque<Queued>,
}

#[derive(Debug, Clone)]
enum Purpose {
    Load(BlockKey),
    Flush(BlockKey, u64),
    Other,
}

#[derive(Debug, Clone)]
struct Waiter {
    req: u64,
    blocks: HashSet<BlockKey>,
    ios: HashSet<u64>,
    ready_at: Micros,
    tail_us: Micros,
    gate: bool,
}

#[derive(Debug, Clone, Default)]
struct ReadState {
    last_end: Option<u64>,
    count: u32,
    frontier: u64,
    window: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct PeriodState {
    n: u64,
    k: u64,
}

#[derive(Debug, Clone)]
pub struct FsCache {
    cfg: FsCacheConfig,
    file_sizes: HashMap<u32, u64>,
    file_bases: HashMap<u32, u64>,
    views: HashMap<BlockKey, View>,
    resident_blocks: u64,
    loading: HashMap<BlockKey, u64>,
    dirty: HashMap<BlockKey, DirtyBlock>,
    actors: [ActorQueue; 2],
    ios: HashMap<u64, (Actor, Purpose)>,
    /// Sector ranges of application writes not yet completed; a flush
    /// overlapping one waits so older data cannot land last.
    app_writes: HashMap<u64, (u64, u64)>,
    waiters: Vec<Waiter>,
    admission: VecDeque<(u64, CanonicalRequest, Micros)>,
    gate: Option<u64>,
    reads: HashMap<u32, ReadState>,
    periods: HashMap<u32, PeriodState>,
    next_io: u64,
    clock: u64,
    splits: Vec<WriteSplit>,
    flushes: Vec<FlushFire>,
    stats: FsStats,
}

impl FsCache {
    pub fn new(cfg: FsCacheConfig) -> Result<Self, FsCacheError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            file_sizes: HashMap::new(),
            file_bases: HashMap::new(),
            views: HashMap::new(),
            resident_blocks: 0,
            loading: HashMap::new(),
            dirty: HashMap::new(),
            actors: Default::default(),
            ios: HashMap::new(),
            app_writes: HashMap::new(),
            waiters: Vec::new(),
            admission: VecDeque::new(),
            gate: None,
            reads: HashMap::new(),
            periods: HashMap::new(),
            next_io: 1,
            clock: 0,
            splits: Vec::new(),
            flushes: Vec::new(),
            stats: FsStats::default(),
        })
    }

    pub fn config(&self) -> &FsCacheConfig {
        &self.cfg
    }

    /// Known file size; reads are clipped and prefetch stops there.
    pub fn set_file_size(&mut self, file_id: u32, bytes: u64) {
        self.file_sizes.insert(file_id, bytes);
    }

    pub fn splits(&self) -> &[WriteSplit] {
        &self.splits
    }

    pub fn flush_fires(&self) -> &[FlushFire] {
        &self.flushes
    }

    pub fn stats(&self) -> FsStats {
        self.stats
    }

    pub fn view(&self, file_id: u32, view_index: u64) -> Option<View> {
        self.views.get(&(file_id, view_index)).copied()
    }

    pub fn views(&self) -> impl Iterator<Item = View> + '_ {
        self.views.values().copied()
    }

    pub fn dirty_bytes(&self) -> u64 {
        self.dirty.len() as u64 * self.cfg.block_bytes
    }

    /// No queued, outstanding or waiting work remains.
    pub fn is_idle(&self) -> bool {
        self.ios.is_empty()
            && self.waiters.is_empty()
            && self.admission.is_empty()
            && self.actors.iter().all(|a| a.queue.is_empty())
    }

    fn actor(&mut self, a: Actor) -> &mut ActorQueue {
        &mut self.actors[a as usize]
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn view_key(&self, key: BlockKey) -> (BlockKey, u8) {
        let per_view = self.cfg.view_bytes / self.cfg.block_bytes;
        ((key.0, key.1 / per_view), 1 << (key.1 % per_view))
    }

    fn is_resident(&self, key: BlockKey) -> bool {
        let (vk, bit) = self.view_key(key);
        self.views.get(&vk).is_some_and(|v| v.resident & bit != 0)
    }

    fn set_bits(&mut self, key: BlockKey, resident: bool, dirty: Option<bool>) {
        let (vk, bit) = self.view_key(key);
        let t = self.tick();
        let v = self.views.entry(vk).or_default();
        if resident && v.resident & bit == 0 {
            v.resident |= bit;
            self.resident_blocks += 1;
        }
        match dirty {
            Some(true) => v.dirty |= bit,
            Some(false) => v.dirty &= !bit,
            None => {}
        }
        v.last_touch = t;
    }

    fn touch(&mut self, key: BlockKey) {
        let (vk, _) = self.view_key(key);
        let t = self.tick();
        if let Some(v) = self.views.get_mut(&vk) {
            v.last_touch = t;
        }
    }

    fn evict(&mut self) {
        let limit = self.cfg.cache_capacity_bytes / self.cfg.block_bytes;
        while self.resident_blocks > limit {
            let per_view = self.cfg.view_bytes / self.cfg.block_bytes;
            let loading: HashSet<BlockKey> = self.loading.keys().map(|&(f, b)| (f, b / per_view)).collect();
            let victim = self
                .views
                .iter()
                .filter(|(k, v)| v.dirty == 0 && v.resident != 0 && !loading.contains(k))
                .min_by_key(|(k, v)| (v.last_touch, **k))
                .map(|(k, _)| *k);
            let Some(k) = victim else { break };
            let v = self.views.remove(&k).unwrap_or_default();
            self.resident_blocks -= u64::from(v.resident.count_ones());
        }
    }

    fn block_addr(&self, key: BlockKey) -> u64 {
        self.file_bases.get(&key.0).copied().unwrap_or(0) + key.1 * self.cfg.block_bytes
    }

    fn new_io_id(&mut self) -> u64 {
        let id = self.next_io;
        self.next_io += 1;
        id
    }

    fn enqueue(&mut self, actor: Actor, req: Option<u64>, not_before: Micros, work: Work) -> u64 {
        let id = self.new_io_id();
        match &work {
            Work::Load(key, _) => {
                self.loading.insert(*key, id);
            }
            Work::Ready(io) if io.write && !io.stamps.is_empty() => {
                let lo = io.addr_bytes / 512;
                self.app_writes.insert(id, (lo, lo + io.stamps.len() as u64));
            }
            _ => {}
        }
        self.actor(actor).queue.push_back(Queued { id, req, not_before, work });
        id
    }

    fn pump(&mut self, actor: Actor, now: Micros, out: &mut Vec<FsAction>) {
        while self.actor(actor).busy.is_none() {
            let Some(q) = self.actor(actor).queue.pop_front() else { return };
            let (io, purpose) = match q.work {
                Work::Load(key, prefetch) => {
                    if self.is_resident(key) {
                        self.loading.remove(&key);
                        continue;
                    }
                    let io = DiskIo {
                        id: q.id,
                        req: q.req,
                        actor,
                        kind: if prefetch { IoKind::Prefetch } else { IoKind::Demand },
                        write: false,
                        addr_bytes: self.block_addr(key),
                        bytes: self.cfg.block_bytes,
                        fua: false,
                        stamps: Vec::new(),
                    };
                    (io, Purpose::Load(key))
                }
                Work::Flush(key) => {
                    let Some(d) = self.dirty.get(&key) else { continue };
                    let (Some((&lo, _)), Some((&hi, _))) = (d.sectors.first_key_value(), d.sectors.last_key_value())
                    else {
                        continue;
                    };
                    if self.app_writes.values().any(|&(a, b)| a <= hi && lo < b) {
                        self.actor(actor).queue.push_front(q);
                        return;
                    }
                    let d = self.dirty.get_mut(&key).expect("checked above");
                    let stamps: Vec<u64> = (lo..=hi).map(|s| d.sectors.get(&s).copied().unwrap_or(0)).collect();
                    d.flush = FlushState::InFlight(d.version);
                    let version = d.version;
                    let io = DiskIo {
                        id: q.id,
                        req: q.req,
                        actor,
                        kind: IoKind::Flush,
                        write: true,
                        addr_bytes: lo * 512,
                        bytes: stamps.len() as u64 * 512,
                        fua: false,
                        stamps,
                    };
                    (io, Purpose::Flush(key, version))
                }
                Work::Ready(io) => (io, Purpose::Other),
            };
            self.actor(actor).busy = Some(io.id);
            self.ios.insert(io.id, (actor, purpose));
            out.push(FsAction::Issue { at: now.max(q.not_before), io });
        }
    }

    pub fn submit(&mut self, req_id: u64, req: &CanonicalRequest, now: Micros) -> Vec<FsAction> {
        let mut out = Vec::new();
        if req.is_io() {
            self.admission.push_back((req_id, req.clone(), now));
            self.admit(now, &mut out);
        }
        out
    }

    pub fn io_done(&mut self, io_id: u64, now: Micros) -> Result<Vec<FsAction>, FsCacheError> {
        let (actor, purpose) = self.ios.remove(&io_id).ok_or(FsCacheError::UnknownIo(io_id))?;
        self.app_writes.remove(&io_id);
        let mut out = Vec::new();
        if self.actor(actor).busy == Some(io_id) {
            self.actor(actor).busy = None;
        }
        match purpose {
            Purpose::Load(key) => {
                self.loading.remove(&key);
                self.set_bits(key, true, None);
                self.evict();
                self.block_ready(key);
            }
            Purpose::Flush(key, version) => {
                if let Some(d) = self.dirty.get_mut(&key) {
                    if d.version == version {
                        self.dirty.remove(&key);
                        self.set_bits(key, true, Some(false));
                    } else {
                        d.flush = FlushState::Idle;
                        if self.regime_of(key.0) == WriteRegime::Progressive {
                            self.queue_flush(key, None, now);
                        }
                    }
                }
            }
            Purpose::Other => {}
        }
        for w in &mut self.waiters {
            w.ios.remove(&io_id);
        }
        self.settle(now, &mut out);
        self.pump(Actor::App, now, &mut out);
        self.pump(Actor::System, now, &mut out);
        Ok(out)
    }

    /// Queues every remaining dirty block for flushing.
    pub fn drain(&mut self, now: Micros) -> Vec<FsAction> {
        let mut keys: Vec<(u64, BlockKey)> = self
            .dirty
            .iter()
            .filter(|(_, d)| d.flush == FlushState::Idle)
            .map(|(k, d)| (d.order, *k))
            .collect();
        keys.sort_unstable();
        for (_, k) in keys {
            self.queue_flush(k, None, now);
        }
        let mut out = Vec::new();
        self.pump(Actor::System, now, &mut out);
        out
    }

    fn regime_of(&self, file: u32) -> WriteRegime {
        if self.periods.get(&file).is_some_and(|p| p.n > 0) {
            WriteRegime::Periodic
        } else {
            WriteRegime::Progressive
        }
    }

    fn queue_flush(&mut self, key: BlockKey, req: Option<u64>, now: Micros) {
        if let Some(d) = self.dirty.get_mut(&key) {
            if d.flush == FlushState::Idle {
                d.flush = FlushState::Queued;
                self.enqueue(Actor::System, req, now, Work::Flush(key));
            }
        }
    }

    fn block_ready(&mut self, key: BlockKey) {
        for w in &mut self.waiters {
            w.blocks.remove(&key);
        }
    }

    fn settle(&mut self, now: Micros, out: &mut Vec<FsAction>) {
        let mut reopened = false;
        let mut i = 0;
        while i < self.waiters.len() {
            if self.waiters[i].blocks.is_empty() && self.waiters[i].ios.is_empty() {
                let w = self.waiters.remove(i);
                out.push(FsAction::Complete { at: now.max(w.ready_at) + w.tail_us, req: w.req });
                if w.gate && self.gate == Some(w.req) {
                    self.gate = None;
                    reopened = true;
                }
            } else {
                i += 1;
            }
        }
        if reopened || !self.admission.is_empty() {
            self.admit(now, out);
        }
    }

    fn admit(&mut self, now: Micros, out: &mut Vec<FsAction>) {
        while self.gate.is_none() {
            let Some((id, req, _)) = self.admission.front().cloned() else { break };
            if req.op == Op::Write && !self.has_room(&req) {
                break;
            }
            self.admission.pop_front();
            self.file_bases.insert(req.file_id, req.file_disk_base());
            match req.op {
                Op::Read => self.start_read(id, &req, now, out),
                Op::Write => self.start_write(id, &req, now, out),
                Op::Open | Op::Close => {}
            }
        }
        self.settle_quiet(now, out);
        self.pump(Actor::App, now, out);
        self.pump(Actor::System, now, out);
    }

    /// Completes waiters that need nothing, without re-entering admission.
    fn settle_quiet(&mut self, now: Micros, out: &mut Vec<FsAction>) {
        let mut i = 0;
        while i < self.waiters.len() {
            let w = &self.waiters[i];
            if w.blocks.is_empty() && w.ios.is_empty() && !w.gate {
                let w = self.waiters.remove(i);
                out.push(FsAction::Complete { at: now.max(w.ready_at) + w.tail_us, req: w.req });
            } else {
                i += 1;
            }
        }
    }

    fn cache_blocks_for(&self, req: &CanonicalRequest) -> Option<Vec<u64>> {
        if matches!(req.mode, AccessMode::NoBuffer | AccessMode::WriteThrough) {
            return None;
        }
        let blocks = split_into_blocks(req.file_offset_bytes, req.length_bytes, self.cfg.block_bytes);
        if classify_write_regime(req.length_bytes, &self.cfg) == WriteRegime::Progressive {
            return Some(blocks);
        }
        let (c, _) = self.periodic_position(req);
        Some(blocks.into_iter().take(c as usize).collect())
    }

    fn has_room(&self, req: &CanonicalRequest) -> bool {
        let Some(blocks) = self.cache_blocks_for(req) else { return true };
        if self.dirty.is_empty() {
            return true;
        }
        let bs = self.cfg.block_bytes;
        let new = blocks.iter().filter(|&&b| !self.dirty.contains_key(&(req.file_id, b / bs))).count() as u64;
        (self.dirty.len() as u64 + new) * bs <= self.cfg.working_set_bytes
    }

    fn accounting_blocks(&self, size: u64) -> u64 {
        self.cfg
            .block_count_overrides
            .iter()
            .find(|&&(s, _)| s == size)
            .map_or(size.div_ceil(self.cfg.block_bytes), |&(_, n)| n)
    }

    /// (cache blocks, disk blocks) by accounting for the next periodic write.
    fn periodic_position(&self, req: &CanonicalRequest) -> (u64, u64) {
        let n = self.accounting_blocks(req.length_bytes);
        let st = self.periods.get(&req.file_id).copied().unwrap_or_default();
        let k = if st.n == n { st.k } else { 0 };
        periodic_splits(n)[k as usize]
    }

    fn write_sectors(&self, req: &CanonicalRequest, block_off: u64) -> (u64, u64) {
        let bs = self.cfg.block_bytes;
        let lo = req.file_offset_bytes.max(block_off);
        let hi = (req.file_offset_bytes + req.length_bytes).min(block_off + bs);
        sector_span(req.file_disk_base() + lo, hi - lo)
    }

    /// Brings dirty cached sectors in line with a write that bypasses them.
    fn update_cached_copies(&mut self, req: &CanonicalRequest, stamp: u64) {
        let bs = self.cfg.block_bytes;
        for b in split_into_blocks(req.file_offset_bytes, req.length_bytes, bs) {
            let (lba, n) = self.write_sectors(req, b);
            if let Some(d) = self.dirty.get_mut(&(req.file_id, b / bs)) {
                let keys: Vec<u64> = d.sectors.range(lba..lba + n).map(|(&k, _)| k).collect();
                if !keys.is_empty() {
                    for k in keys {
                        d.sectors.insert(k, stamp);
                    }
                    d.version += 1;
                }
            }
        }
    }

    fn start_write(&mut self, id: u64, req: &CanonicalRequest, now: Micros, out: &mut Vec<FsAction>) {
        let stamp = id + 1;
        let bs = self.cfg.block_bytes;
        let (lba, n) = sector_span(req.disk_byte_addr, req.length_bytes);
        let full = || DiskIo {
            id: 0,
            req: Some(id),
            actor: Actor::App,
            kind: IoKind::PassThrough,
            write: true,
            addr_bytes: lba * 512,
            bytes: n * 512,
            fua: false,
            stamps: vec![stamp; n as usize],
        };
        if req.length_bytes == 0 {
            self.waiters.push(Waiter {
                req: id,
                blocks: HashSet::new(),
                ios: HashSet::new(),
                ready_at: now,
                tail_us: self.cfg.fastio_hit_cost_us,
                gate: false,
            });
            return;
        }
        let end = req.file_offset_bytes + req.length_bytes;
        let size = self.file_sizes.entry(req.file_id).or_insert(0);
        *size = (*size).max(end);

        match req.mode {
            AccessMode::NoBuffer => {
                self.update_cached_copies(req, stamp);
                let io_id = self.enqueue(Actor::App, Some(id), now + self.cfg.miss_path_cost_us, Work::Ready(full()));
                self.fix_ready_id(io_id);
                self.waiters.push(Waiter {
                    req: id,
                    blocks: HashSet::new(),
                    ios: HashSet::from([io_id]),
                    ready_at: now,
                    tail_us: 0,
                    gate: false,
                });
            }
            AccessMode::WriteThrough => {
                self.update_cached_copies(req, stamp);
                for b in split_into_blocks(req.file_offset_bytes, req.length_bytes, bs) {
                    self.set_bits((req.file_id, b / bs), true, None);
                }
                self.evict();
                let copy = self.cfg.copy_us(req.length_bytes);
                let mut data = full();
                data.kind = IoKind::WriteThrough;
                data.fua = true;
                let d = self.enqueue(Actor::App, Some(id), now + copy, Work::Ready(data));
                self.fix_ready_id(d);
                let meta = DiskIo {
                    id: 0,
                    req: Some(id),
                    actor: Actor::App,
                    kind: IoKind::Metadata,
                    write: true,
                    addr_bytes: self.cfg.metadata_addr_bytes,
                    bytes: self.cfg.metadata_bytes,
                    fua: true,
                    stamps: Vec::new(),
                };
                let m = self.enqueue(Actor::App, Some(id), now + copy, Work::Ready(meta));
                self.fix_ready_id(m);
                self.gate = Some(id);
                self.waiters.push(Waiter {
                    req: id,
                    blocks: HashSet::new(),
                    ios: HashSet::from([d, m]),
                    ready_at: now,
                    tail_us: 0,
                    gate: true,
                });
            }
            AccessMode::Normal | AccessMode::Sequential => self.cached_write(id, req, now, out),
        }
    }

    fn fix_ready_id(&mut self, id: u64) {
        for a in &mut self.actors {
            for q in &mut a.queue {
                if q.id == id {
                    if let Work::Ready(io) = &mut q.work {
                        io.id = id;
                    }
                }
            }
        }
    }

    fn cached_write(&mut self, id: u64, req: &CanonicalRequest, now: Micros, out: &mut Vec<FsAction>) {
        let stamp = id + 1;
        let bs = self.cfg.block_bytes;
        let blocks = split_into_blocks(req.file_offset_bytes, req.length_bytes, bs);
        let regime = classify_write_regime(req.length_bytes, &self.cfg);
        let (cache_acct, disk_acct) = match regime {
            WriteRegime::Progressive => {
                self.periods.remove(&req.file_id);
                (blocks.len() as u64, 0)
            }
            WriteRegime::Periodic => {
                let split = self.periodic_position(req);
                let n = self.accounting_blocks(req.length_bytes);
                let st = self.periods.entry(req.file_id).or_default();
                if st.n != n {
                    *st = PeriodState { n, k: 0 };
                }
                st.k = (st.k + 1) % (n / 2 + 1);
                split
            }
        };
        self.splits.push(WriteSplit { req: id, regime, cache_blocks: cache_acct, disk_blocks: disk_acct });
        out.push(FsAction::Note {
            kind: "split",
            detail: format!("req={id} regime={regime} cache={cache_acct} disk={disk_acct}"),
        });

        let cache_n = (cache_acct as usize).min(blocks.len());
        let mut cached_bytes = 0;
        for &b in &blocks[..cache_n] {
            let key = (req.file_id, b / bs);
            let (lba, n) = self.write_sectors(req, b);
            cached_bytes += n * 512;
            let order = self.tick();
            let d = self
                .dirty
                .entry(key)
                .or_insert_with(|| DirtyBlock { sectors: BTreeMap::new(), version: 0, order, flush: FlushState::Idle });
            for s in lba..lba + n {
                d.sectors.insert(s, stamp);
            }
            d.version += 1;
            self.set_bits(key, true, Some(true));
            self.loading.remove(&key);
            self.block_ready(key);
        }
        let copy = self.cfg.copy_us(cached_bytes.min(req.length_bytes));
        let mut ios = HashSet::new();
        for &b in &blocks[cache_n..] {
            let key = (req.file_id, b / bs);
            let (lba, n) = self.write_sectors(req, b);
            if let Some(d) = self.dirty.get_mut(&key) {
                for s in lba..lba + n {
                    if d.sectors.contains_key(&s) {
                        d.sectors.insert(s, stamp);
                    }
                }
                d.version += 1;
            }
            let io = DiskIo {
                id: 0,
                req: Some(id),
                actor: Actor::App,
                kind: IoKind::Direct,
                write: true,
                addr_bytes: lba * 512,
                bytes: n * 512,
                fua: false,
                stamps: vec![stamp; n as usize],
            };
            let io_id = self.enqueue(Actor::App, Some(id), now + copy, Work::Ready(io));
            self.fix_ready_id(io_id);
            ios.insert(io_id);
        }
        self.evict();

        match regime {
            WriteRegime::Progressive => {
                let mut order: Vec<(u64, BlockKey)> =
                    blocks[..cache_n].iter().map(|&b| (req.file_id, b / bs)).map(|k| (self.dirty[&k].order, k)).collect();
                order.sort_unstable();
                for (_, k) in order {
                    self.queue_flush(k, Some(id), now + copy);
                }
            }
            WriteRegime::Periodic => {
                let threshold = self.cfg.flush_threshold_bytes() / bs;
                let mut idle: Vec<(u64, BlockKey)> = self
                    .dirty
                    .iter()
                    .filter(|(_, d)| d.flush == FlushState::Idle)
                    .map(|(k, d)| (d.order, *k))
                    .collect();
                if idle.len() as u64 >= threshold {
                    idle.sort_unstable();
                    for &(_, k) in idle.iter().take(threshold as usize) {
                        self.queue_flush(k, Some(id), now + copy);
                    }
                    self.flushes.push(FlushFire { req: id, blocks: threshold });
                    out.push(FsAction::Note { kind: "flush", detail: format!("req={id} blocks={threshold}") });
                }
            }
        }
        self.waiters.push(Waiter {
            req: id,
            blocks: HashSet::new(),
            ios,
            ready_at: now + copy,
            tail_us: self.cfg.fastio_hit_cost_us,
            gate: false,
        });
    }

    fn start_read(&mut self, id: u64, req: &CanonicalRequest, now: Micros, out: &mut Vec<FsAction>) {
        let bs = self.cfg.block_bytes;
        if req.mode == AccessMode::NoBuffer {
            let (lba, n) = sector_span(req.disk_byte_addr, req.length_bytes.max(1));
            let io = DiskIo {
                id: 0,
                req: Some(id),
                actor: Actor::App,
                kind: IoKind::PassThrough,
                write: false,
                addr_bytes: lba * 512,
                bytes: n * 512,
                fua: false,
                stamps: Vec::new(),
            };
            let io_id = self.enqueue(Actor::App, Some(id), now + self.cfg.miss_path_cost_us, Work::Ready(io));
            self.fix_ready_id(io_id);
            self.waiters.push(Waiter {
                req: id,
                blocks: HashSet::new(),
                ios: HashSet::from([io_id]),
                ready_at: now,
                tail_us: 0,
                gate: false,
            });
            return;
        }

        let off = req.file_offset_bytes;
        let eof = self.file_sizes.get(&req.file_id).copied();
        let mut end = off + req.length_bytes;
        if let Some(e) = eof {
            if end > e {
                self.stats.eof_clips += 1;
                out.push(FsAction::Note { kind: "clip", detail: format!("req={id} eof={e}") });
                end = end.min(e).max(off);
            }
        }
        let len = end - off;
        let limit = eof.unwrap_or(u64::MAX);
        let blocks = split_into_blocks(off, len, bs);
        let keys: Vec<BlockKey> = blocks.iter().map(|&b| (req.file_id, b / bs)).collect();
        let pending: HashSet<BlockKey> = keys.iter().copied().filter(|&k| !self.is_resident(k)).collect();
        for &k in &keys {
            self.touch(k);
        }
        let missing: Vec<BlockKey> =
            keys.iter().copied().filter(|k| pending.contains(k) && !self.loading.contains_key(k)).collect();

        let st = self.reads.entry(req.file_id).or_default().clone();
        let sequential = st.last_end == Some(off);
        let dual = len > bs && (req.mode == AccessMode::Normal || len % bs != 0);
        let factor = self.cfg.readahead_window_factor;
        let mut next = ReadState { last_end: Some(end), ..st.clone() };
        let mut demand_actor = Actor::App;
        let mut prefetch: Option<(u64, u64)> = None;
        if dual {
            next.count = 0;
            let j = match st.window {
                Some(j) if sequential => Some(j + 1),
                _ if off == 0 || sequential => Some(0),
                _ => None,
            };
            next.window = j;
            match j {
                Some(0) => {
                    demand_actor = Actor::System;
                    prefetch = Some((off + 2 * len, off + 3 * len));
                    next.frontier = off + 3 * len;
                }
                Some(_) => {
                    let target = end + factor * len;
                    prefetch = Some((st.frontier.max(end), target));
                    next.frontier = st.frontier.max(target);
                }
                None => {}
            }
        } else {
            next.window = None;
            next.count = if sequential { st.count + 1 } else { 0 };
            if next.count >= self.cfg.readahead_trigger {
                let target = (end + factor * len.max(1)).min(limit);
                let from = if st.count >= self.cfg.readahead_trigger { st.frontier.max(end) } else { end };
                prefetch = Some((from, target));
                next.frontier = from.max(target);
            } else {
                next.frontier = end;
            }
        }
        self.reads.insert(req.file_id, next);

        for &k in &missing {
            self.enqueue(demand_actor, Some(id), now, Work::Load(k, false));
        }
        if let Some((a, b)) = prefetch {
            let b = b.min(limit);
            if b > a {
                for blk in split_into_blocks(a, b - a, bs) {
                    let k = (req.file_id, blk / bs);
                    if blk < limit && !self.is_resident(k) && !self.loading.contains_key(&k) {
                        self.enqueue(Actor::System, Some(id), now, Work::Load(k, true));
                    }
                }
            }
        }

        let copy = self.cfg.copy_us(len);
        let tail = if pending.is_empty() {
            self.stats.read_hits += 1;
            self.cfg.fastio_hit_cost_us + copy
        } else {
            self.stats.read_misses += 1;
            self.cfg.miss_path_cost_us + copy
        };
        self.waiters.push(Waiter { req: id, blocks: pending, ios: HashSet::new(), ready_at: now, tail_us: tail, gate: false });
    }
}
