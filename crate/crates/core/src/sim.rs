//! The assembled stack: application replay, file-system cache, scheduler,
//! drive cache and mechanism, wired over the event engine.
//!
//! Requests travel down `APP -> FS_CACHE -> SCHEDULER -> DISK_CACHE -> DISK`
//! and completions come back up the same way. Every hop is an event, so the
//! event log shows the disk-visible order of blocks.

use std::collections::HashMap;

use thiserror::Error;

use crate::disk::Mechanics;
use crate::disk_cache::{DiskCacheConfig, Lookup};
use crate::drive::{Drive, DriveError, DriveStats};
use crate::engine::{Engine, EngineError, EventLog, EventQueue, Handler, Micros, Payload, SimEvent, StageId, StageTopology};
use crate::fs_cache::{DiskIo, FlushFire, FsAction, FsCache, FsCacheConfig, FsCacheError, FsStats, IoKind, WriteSplit};
use crate::media::{sector_span, MediaImage};
use crate::report::{Baseline, RequestRecord, Summary};
use crate::scheduler::{PendingQueue, Policy, QueuedRequest, SchedulerError};
use crate::trace::{CanonicalRequest, Op, Origin};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace has no requests to replay")]
    EmptyTrace,
    #[error("request {req} touches byte {addr}, beyond the disk's {limit} bytes")]
    BeyondDisk { req: u64, addr: u64, limit: u64 },
    #[error("disk request {0} is unknown")]
    UnknownIo(u64),
    #[error(transparent)]
    Drive(#[from] DriveError),
    #[error(transparent)]
    FsCache(#[from] FsCacheError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Disk(#[from] crate::disk::DiskError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub mechanics: Mechanics,
    pub disk_cache: DiskCacheConfig,
    pub fs: FsCacheConfig,
    pub scheduler: Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Request i+1 waits for request i.
    Closed,
    /// Requests issue at their trace times.
    Open,
}

impl ReplayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplayMode::Closed => "closed",
            ReplayMode::Open => "open",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayPolicy {
    pub mode: ReplayMode,
    /// Closed loop with a baseline: when `|T_m - T_s|` is below this, the
    /// next request follows the simulated completion instead of the trace.
    pub tolerance_us: Micros,
    pub include_system: bool,
}

impl Default for ReplayPolicy {
    fn default() -> Self {
        Self { mode: ReplayMode::Closed, tolerance_us: 0, include_system: false }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<RequestRecord>,
    pub summary: Summary,
    pub log: EventLog,
    pub media: MediaImage,
    pub quirk_prefetches: u64,
    pub drive: DriveStats,
    pub fs: FsStats,
    pub splits: Vec<WriteSplit>,
    pub flush_fires: Vec<FlushFire>,
    /// The requests as replayed (SYSTEM ones removed unless included).
    pub requests: Vec<CanonicalRequest>,
}

impl SimOutput {
    /// Disk-visible read order: `(lba, sectors)` of every read command in
    /// the order the drive received it.
    pub fn read_commands(&self) -> Vec<(u64, u64)> {
        self.commands().filter(|c| !c.2).map(|c| (c.0, c.1)).collect()
    }

    /// `(lba, sectors, write)` of every drive command, in order.
    pub fn commands(&self) -> impl Iterator<Item = (u64, u64, bool)> + '_ {
        self.log.entries.iter().filter(|e| e.stage == StageId::DiskCache && e.kind == "command").filter_map(|e| {
            let field = |k: &str| e.detail.split(' ').find_map(|f| f.strip_prefix(k));
            Some((field("lba=")?.parse().ok()?, field("sectors=")?.parse().ok()?, field("write=")? == "1"))
        })
    }
}

#[derive(Debug, Clone)]
pub enum Msg {
    Arrive(u64),
    Submit(u64),
    Note { kind: &'static str, detail: String },
    Enqueue(Box<DiskIo>),
    Command { io: u64, lba: u64, sectors: u64, write: bool, via: Vec<u32> },
    Media { io: u64 },
    CommandDone { io: u64 },
    IoDone { io: u64 },
    FsIoDone { io: u64 },
    Complete(u64),
    Destage,
}

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Arrive(_) => "arrive",
            Msg::Submit(_) => "submit",
            Msg::Note { kind, .. } => kind,
            Msg::Enqueue(_) => "enqueue",
            Msg::Command { .. } => "command",
            Msg::Media { .. } => "media",
            Msg::CommandDone { .. } => "command_done",
            Msg::IoDone { .. } => "io_done",
            Msg::FsIoDone { .. } => "fs_io_done",
            Msg::Complete(_) => "complete",
            Msg::Destage => "destage",
        }
    }

    fn detail(&self) -> String {
        match self {
            Msg::Arrive(r) | Msg::Submit(r) | Msg::Complete(r) => format!("req={r}"),
            Msg::Note { detail, .. } => detail.clone(),
            Msg::Enqueue(io) => format!(
                "io={} req={} actor={} kind={} write={} addr={} bytes={}",
                io.id,
                io.req.map_or("-".to_string(), |r| r.to_string()),
                io.actor.as_str(),
                io.kind.as_str(),
                u8::from(io.write),
                io.addr_bytes,
                io.bytes
            ),
            Msg::Command { io, lba, sectors, write, .. } => {
                format!("io={io} lba={lba} sectors={sectors} write={}", u8::from(*write))
            }
            Msg::Media { io } | Msg::CommandDone { io } | Msg::IoDone { io } | Msg::FsIoDone { io } => format!("io={io}"),
            Msg::Destage => String::new(),
        }
    }
}

fn at(t: f64, now: Micros) -> Micros {
    (t.ceil().max(0.0) as Micros).max(now)
}

struct World<'a> {
    reqs: &'a [CanonicalRequest],
    replay: &'a ReplayPolicy,
    baseline: Option<&'a Baseline>,
    fs: FsCache,
    queue: PendingQueue,
    drive: Drive,
    ios: HashMap<u64, DiskIo>,
    command_busy: bool,
    destage_armed: bool,
    issue: Vec<Option<Micros>>,
    complete: Vec<Option<Micros>>,
    completed: usize,
}

impl World<'_> {
    fn absorb(&mut self, actions: Vec<FsAction>, q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        let now = q.now();
        for a in actions {
            match a {
                FsAction::Issue { at, io } => {
                    q.schedule(at.max(now), StageId::Scheduler, Msg::Enqueue(Box::new(io)))?;
                }
                FsAction::Complete { at, req } => {
                    q.schedule(at.max(now), StageId::App, Msg::Complete(req))?;
                }
                FsAction::Note { kind, detail } => {
                    q.schedule(now, StageId::FsCache, Msg::Note { kind, detail })?;
                }
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        if self.command_busy {
            return Ok(());
        }
        let now = q.now();
        let head = self.drive.head_cylinder(now as f64);
        if let Some(d) = self.queue.next(head) {
            self.command_busy = true;
            let r = d.request;
            q.schedule(now, StageId::DiskCache, Msg::Command { io: r.id, lba: r.lba, sectors: r.sectors, write: r.write, via: d.via })?;
        } else {
            self.arm_destage(q)?;
        }
        Ok(())
    }

    fn arm_destage(&mut self, q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        if !self.destage_armed && self.drive.has_dirty() {
            self.destage_armed = true;
            q.schedule(q.now(), StageId::Disk, Msg::Destage)?;
        }
        Ok(())
    }

    fn command(&mut self, io_id: u64, via: &[u32], q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        let now = q.now();
        let t = now as f64;
        let io = self.ios.get(&io_id).ok_or(SimError::UnknownIo(io_id))?;
        let (lba, sectors) = sector_span(io.addr_bytes, io.bytes);
        self.drive.sweep(t, via)?;
        let outcome = if io.write {
            let stamps = if io.kind == IoKind::Metadata || io.stamps.is_empty() {
                vec![0; sectors as usize]
            } else {
                io.stamps.clone()
            };
            self.drive.write(t, lba, &stamps, io.fua)?
        } else {
            self.drive.read(t, lba, sectors)?
        };
        if let Some(m) = outcome.media_end {
            q.schedule(at(m, now), StageId::Disk, Msg::Media { io: io_id })?;
        }
        if let Some(l) = outcome.lookup {
            let result = match l {
                Lookup::Hit => "hit".to_string(),
                Lookup::Partial { resident } => format!("partial({resident})"),
                Lookup::Miss => "miss".to_string(),
            };
            q.schedule(now, StageId::DiskCache, Msg::Note { kind: "lookup", detail: format!("io={io_id} result={result}") })?;
        }
        if outcome.quirk {
            q.schedule(now, StageId::DiskCache, Msg::Note { kind: "quirk_prefetch", detail: format!("io={io_id} lba={lba}") })?;
        }
        q.schedule(at(outcome.completion, now), StageId::DiskCache, Msg::CommandDone { io: io_id })?;
        Ok(())
    }

    fn arrive_next(&mut self, i: usize, q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        let now = q.now();
        let Some(next) = self.reqs.get(i + 1) else {
            return Ok(());
        };
        let gap = next.issue_time_us.saturating_sub(self.reqs[i].issue_time_us);
        let sim_issue = self.issue[i].unwrap_or(now);
        let sim_latency = now - sim_issue;
        let measured = self.baseline.and_then(|b| b.get(&(i as u64)).copied());
        let when = match measured {
            Some(tm) if tm.abs_diff(sim_latency) < self.replay.tolerance_us => now + gap.saturating_sub(tm),
            _ => now.max(sim_issue + gap),
        };
        q.schedule(when, StageId::App, Msg::Arrive(i as u64 + 1))?;
        Ok(())
    }
}

impl Handler<Msg> for World<'_> {
    type Error = SimError;

    fn handle(&mut self, ev: SimEvent<Msg>, q: &mut EventQueue<Msg>) -> Result<(), SimError> {
        let now = ev.fire_at_us;
        match ev.payload {
            Msg::Arrive(i) => {
                self.issue[i as usize] = Some(now);
                q.schedule(now, StageId::FsCache, Msg::Submit(i))?;
            }
            Msg::Submit(i) => {
                let req = &self.reqs[i as usize];
                if req.is_io() {
                    let a = self.fs.submit(i, req, now);
                    self.absorb(a, q)?;
                } else {
                    q.schedule(now, StageId::App, Msg::Complete(i))?;
                }
            }
            Msg::Note { .. } | Msg::Media { .. } => {}
            Msg::Enqueue(io) => {
                let (lba, sectors) = sector_span(io.addr_bytes, io.bytes);
                let cylinder = self.drive.mechanics().geometry.lba_to_phys(lba)?.cylinder;
                self.queue.enqueue(QueuedRequest { id: io.id, lba, sectors, cylinder, write: io.write, arrival_us: now })?;
                self.ios.insert(io.id, *io);
                self.dispatch(q)?;
            }
            Msg::Command { io, via, .. } => self.command(io, &via, q)?,
            Msg::CommandDone { io } => {
                q.schedule(now, StageId::Scheduler, Msg::IoDone { io })?;
            }
            Msg::IoDone { io } => {
                self.command_busy = false;
                q.schedule(now, StageId::FsCache, Msg::FsIoDone { io })?;
                self.dispatch(q)?;
            }
            Msg::FsIoDone { io } => {
                self.ios.remove(&io).ok_or(SimError::UnknownIo(io))?;
                let a = self.fs.io_done(io, now)?;
                self.absorb(a, q)?;
            }
            Msg::Complete(i) => {
                let idx = i as usize;
                if self.complete[idx].is_none() {
                    self.complete[idx] = Some(now);
                    self.completed += 1;
                }
                if self.replay.mode == ReplayMode::Closed {
                    self.arrive_next(idx, q)?;
                }
                if self.completed == self.reqs.len() {
                    let a = self.fs.drain(now);
                    self.absorb(a, q)?;
                }
            }
            Msg::Destage => {
                self.destage_armed = false;
                if self.command_busy || !self.queue.is_empty() {
                    return Ok(());
                }
                if let Some(next) = self.drive.idle_destage(now as f64)? {
                    self.destage_armed = true;
                    q.schedule(at(next, now), StageId::Disk, Msg::Destage)?;
                }
            }
        }
        Ok(())
    }
}

/// Requests kept for replay under `policy`.
pub fn replay_set(requests: &[CanonicalRequest], policy: &ReplayPolicy) -> Vec<CanonicalRequest> {
    requests.iter().filter(|r| policy.include_system || r.origin == Origin::App).cloned().collect()
}

/// Replays `requests` through the stack and runs until every cache is
/// clean.
pub fn simulate(
    cfg: &StackConfig,
    requests: &[CanonicalRequest],
    replay: &ReplayPolicy,
    baseline: Option<&Baseline>,
) -> Result<SimOutput, SimError> {
    let reqs = replay_set(requests, replay);
    if reqs.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let limit = cfg.mechanics.geometry.usable_sectors() * crate::disk::SECTOR_BYTES;
    let mut fs = FsCache::new(cfg.fs.clone())?;
    let mut sizes: HashMap<u32, u64> = HashMap::new();
    for (i, r) in reqs.iter().enumerate() {
        if r.is_io() {
            let end = r.disk_byte_addr + r.length_bytes;
            if end > limit {
                return Err(SimError::BeyondDisk { req: i as u64, addr: end - 1, limit });
            }
            let s = sizes.entry(r.file_id).or_default();
            *s = (*s).max(r.file_offset_bytes + r.length_bytes);
        }
    }
    // files exist before the run: their size is the furthest byte touched
    let mut ids: Vec<_> = sizes.into_iter().collect();
    ids.sort_unstable();
    for (f, s) in ids {
        fs.set_file_size(f, s);
    }

    let mut world = World {
        reqs: &reqs,
        replay,
        baseline,
        fs,
        queue: PendingQueue::new(cfg.scheduler, cfg.mechanics.geometry.cylinders),
        drive: Drive::new(cfg.mechanics.clone(), cfg.disk_cache.clone())?,
        ios: HashMap::new(),
        command_busy: false,
        destage_armed: false,
        issue: vec![None; reqs.len()],
        complete: vec![None; reqs.len()],
        completed: 0,
    };
    let mut engine: Engine<Msg> = Engine::new(StageTopology::storage_stack());
    let t0 = reqs[0].issue_time_us;
    match replay.mode {
        ReplayMode::Closed => {
            engine.schedule(0, StageId::App, Msg::Arrive(0))?;
        }
        ReplayMode::Open => {
            for (i, r) in reqs.iter().enumerate() {
                engine.schedule(r.issue_time_us - t0, StageId::App, Msg::Arrive(i as u64))?;
            }
        }
    }
    engine.run(&mut world, None)?;
    let end = engine.now() as f64;
    world.drive.settle(world.drive.stream_end().unwrap_or(end).max(end))?;

    let records: Vec<RequestRecord> = reqs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let issue = world.issue[i].unwrap_or(0);
            let complete = world.complete[i].unwrap_or(issue);
            RequestRecord {
                id: i as u64,
                issue_us: issue,
                complete_us: complete,
                latency_us: complete - issue,
                bytes: if matches!(r.op, Op::Read | Op::Write) { r.length_bytes } else { 0 },
                origin: r.origin,
                op: r.op,
                mode: r.mode,
            }
        })
        .collect();
    let summary = Summary::from_records(&records);
    Ok(SimOutput {
        summary,
        records,
        media: world.drive.media().clone(),
        quirk_prefetches: world.drive.cache().quirk_prefetches(),
        drive: world.drive.stats(),
        fs: world.fs.stats(),
        splits: world.fs.splits().to_vec(),
        flush_fires: world.fs.flush_fires().to_vec(),
        log: engine.into_log(),
        requests: reqs,
    })
}

/// The media image a replay must leave behind: every APP write applied in
/// issue order with stamp `index + 1`.
pub fn expected_media(requests: &[CanonicalRequest]) -> MediaImage {
    let mut m = MediaImage::new();
    for (i, r) in requests.iter().enumerate() {
        if r.op == Op::Write && r.length_bytes > 0 {
            let (lba, n) = sector_span(r.disk_byte_addr, r.length_bytes);
            m.fill(lba, n, i as u64 + 1);
        }
    }
    m
}
