//! One drive: controller cache, mechanism and media image.
//!
//! Host commands are served one at a time. A read that misses starts a
//! media stream which keeps filling the cache after the command has
//! completed, until another command needs the mechanism. Times are
//! absolute microseconds as `f64`.

use thiserror::Error;

use crate::disk::{Direction, DiskError, HeadState, Mechanics, Service};
use crate::disk_cache::{DiskCache, DiskCacheConfig, DiskCacheError, Lookup, WriteAck};
use crate::media::MediaImage;

/// Slack when asking how much of a stream has arrived; absorbs rounding of
/// event times to whole microseconds.
const ARRIVAL_SLACK_US: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DriveError {
    #[error(transparent)]
    Disk(#[from] DiskError),
    #[error(transparent)]
    Cache(#[from] DiskCacheError),
}

/// Timing of one host command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    /// When the media part needed by the command finished, if any.
    pub media_end: Option<f64>,
    pub completion: f64,
    pub lookup: Option<Lookup>,
    pub quirk: bool,
    pub penalty: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DriveStats {
    pub read_hits: u64,
    pub read_partials: u64,
    pub read_misses: u64,
    pub media_writes: u64,
    pub destages: u64,
    pub penalties: u64,
}

#[derive(Debug, Clone)]
struct Stream {
    start: HeadState,
    lba: u64,
    sectors: u64,
    service: Service,
    delivered: u64,
}

#[derive(Debug, Clone)]
pub struct Drive {
    mech: Mechanics,
    cache: DiskCache,
    media: MediaImage,
    head: HeadState,
    busy_until: f64,
    stream: Option<Stream>,
    stats: DriveStats,
}

impl Drive {
    pub fn new(mech: Mechanics, cache: DiskCacheConfig) -> Result<Self, DriveError> {
        Ok(Self {
            mech,
            cache: DiskCache::new(cache)?,
            media: MediaImage::new(),
            head: HeadState::parked(),
            busy_until: 0.0,
            stream: None,
            stats: DriveStats::default(),
        })
    }

    pub fn mechanics(&self) -> &Mechanics {
        &self.mech
    }

    pub fn cache(&self) -> &DiskCache {
        &self.cache
    }

    pub fn media(&self) -> &MediaImage {
        &self.media
    }

    pub fn stats(&self) -> DriveStats {
        self.stats
    }

    pub fn has_dirty(&self) -> bool {
        self.cache.dirty_sectors() > 0
    }

    pub fn head_cylinder(&self, t: f64) -> u32 {
        match &self.stream {
            Some(s) => s.service.head_at(t, s.start).cylinder,
            None => self.head.cylinder,
        }
    }

    /// Hands the cache every stream sector that has passed under the head
    /// by `t`.
    fn sync(&mut self, t: f64) -> Result<(), DriveError> {
        let Some(s) = &mut self.stream else {
            return Ok(());
        };
        let done = if t >= s.service.completion_us {
            s.sectors
        } else {
            s.service.sectors_done_by(t + ARRIVAL_SLACK_US).min(s.sectors)
        };
        if done > s.delivered {
            let lba = s.lba + s.delivered;
            if let Some(f) = self.cache.active_fill().filter(|f| f.next == lba) {
                let n = (done - s.delivered).min(f.end - lba);
                if n > 0 {
                    self.cache.on_media_data(lba, n)?;
                }
            }
            s.delivered = done;
        }
        if t >= s.service.completion_us {
            self.head = s.service.head;
            self.busy_until = self.busy_until.max(s.service.completion_us);
            self.stream = None;
        }
        Ok(())
    }

    /// Stops the stream at `t`, leaving the arm where it is.
    fn stop_stream(&mut self, t: f64, abort_fill: bool) -> Result<(), DriveError> {
        self.sync(t)?;
        if let Some(s) = self.stream.take() {
            self.head = s.service.head_at(t, s.start);
            self.busy_until = self.busy_until.max(t);
        }
        if abort_fill {
            self.cache.abort_fill();
        }
        Ok(())
    }

    fn mech_start(&self, t: f64) -> f64 {
        t.max(self.busy_until)
    }

    /// Moves the arm over sweep-end cylinders before the next command.
    pub fn sweep(&mut self, t: f64, via: &[u32]) -> Result<(), DriveError> {
        if via.is_empty() {
            return Ok(());
        }
        self.stop_stream(t, true)?;
        let mut at = self.mech_start(t);
        for &c in via {
            at += self.mech.seek_time(c.abs_diff(self.head.cylinder), Direction::Read);
            self.head.cylinder = c;
        }
        self.head.time_us = at;
        self.busy_until = at;
        Ok(())
    }

    fn overhead(&self) -> f64 {
        self.cache.config().command_overhead_us
    }

    pub fn read(&mut self, t: f64, lba: u64, sectors: u64) -> Result<Outcome, DriveError> {
        self.sync(t)?;
        let plan = self.cache.read_lookup(lba, sectors)?;
        match plan.lookup {
            Lookup::Hit => self.stats.read_hits += 1,
            Lookup::Partial { .. } => self.stats.read_partials += 1,
            Lookup::Miss => self.stats.read_misses += 1,
        }
        let mut media_end = None;
        if let Some(f) = plan.fetch {
            if f.continues && self.stream.is_some() {
                self.extend_stream(f.end)?;
            } else {
                self.stop_stream(t, false)?;
                let start = self.mech_start(t);
                let from = HeadState { time_us: start, ..self.head };
                let service = self.mech.service(from, f.start, f.end - f.start, Direction::Read, start)?;
                self.stream = Some(Stream { start: from, lba: f.start, sectors: f.end - f.start, service, delivered: 0 });
            }
            if let Some(s) = &self.stream {
                if f.demand_end > s.lba {
                    media_end = s.service.time_for_sectors(f.demand_end - s.lba);
                }
            }
        }
        let ready = media_end.unwrap_or(t).max(t + self.cache.config().bus_time_us(sectors));
        let mut completion = ready + self.overhead();
        if plan.penalty {
            self.stats.penalties += 1;
            completion += self.mech.geometry.rotation_period_us();
        }
        Ok(Outcome { media_end, completion, lookup: Some(plan.lookup), quirk: plan.quirk, penalty: plan.penalty })
    }

    fn extend_stream(&mut self, end: u64) -> Result<(), DriveError> {
        let Some(s) = &mut self.stream else {
            return Ok(());
        };
        let have = s.lba + s.sectors;
        if end > have {
            let more = self.mech.service(s.service.head, have, end - have, Direction::Read, s.service.completion_us)?;
            s.service.pieces.extend(more.pieces);
            s.service.completion_us = more.completion_us;
            s.service.head = more.head;
            s.sectors = end - s.lba;
        }
        Ok(())
    }

    /// A host write. Zero stamps leave the media untouched (metadata and
    /// sparse flushes).
    pub fn write(&mut self, t: f64, lba: u64, stamps: &[u64], fua: bool) -> Result<Outcome, DriveError> {
        self.sync(t)?;
        let bus = t + self.cache.config().bus_time_us(stamps.len() as u64);
        let mut ready = t;
        loop {
            match self.cache.write_accept(lba, stamps, fua)? {
                WriteAck::AckNow => {
                    let completion = ready.max(bus) + self.overhead();
                    return Ok(Outcome { media_end: None, completion, lookup: None, quirk: false, penalty: false });
                }
                WriteAck::AckAfterMedia => {
                    self.stop_stream(t, true)?;
                    let end = self.media_write(self.mech_start(t), lba, stamps)?;
                    self.stats.media_writes += 1;
                    let completion = end.max(bus) + self.overhead();
                    return Ok(Outcome { media_end: Some(end), completion, lookup: None, quirk: false, penalty: false });
                }
                WriteAck::NeedsDestage => {
                    self.stop_stream(t, true)?;
                    self.destage_one(self.mech_start(t))?;
                    ready = self.busy_until;
                }
            }
        }
    }

    fn media_write(&mut self, start: f64, lba: u64, stamps: &[u64]) -> Result<f64, DriveError> {
        let from = HeadState { time_us: start, ..self.head };
        let s = self.mech.service(from, lba, stamps.len() as u64, Direction::Write, start)?;
        self.media.write_sparse(lba, stamps);
        self.head = s.head;
        self.busy_until = s.completion_us;
        Ok(s.completion_us)
    }

    fn destage_one(&mut self, start: f64) -> Result<bool, DriveError> {
        let Some(job) = self.cache.next_destage() else {
            return Ok(false);
        };
        let mut at = start;
        for (lba, stamps) in &job.runs {
            at = self.media_write(at, *lba, stamps)?;
        }
        self.cache.destage_done(&job);
        self.stats.destages += 1;
        Ok(true)
    }

    /// Background write-back while no host command is outstanding. Returns
    /// when to look again, or `None` once nothing is dirty.
    pub fn idle_destage(&mut self, t: f64) -> Result<Option<f64>, DriveError> {
        self.sync(t)?;
        if !self.has_dirty() || !self.cache.config().destage {
            return Ok(None);
        }
        if let Some(s) = &self.stream {
            return Ok(Some(s.service.completion_us));
        }
        if self.busy_until > t {
            return Ok(Some(self.busy_until));
        }
        self.cache.abort_fill();
        self.destage_one(t)?;
        Ok(Some(self.busy_until))
    }

    /// Lets any running stream finish.
    pub fn settle(&mut self, t: f64) -> Result<(), DriveError> {
        self.sync(t)
    }

    pub fn stream_end(&self) -> Option<f64> {
        self.stream.as_ref().map(|s| s.service.completion_us)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disk::{DiskGeometry, SeekProfile};
    use crate::disk_cache::ReadPrefetch;

    fn drive(prefetch: ReadPrefetch) -> Drive {
        let g = DiskGeometry::uniform(1000, 2, 100, 6000.0).unwrap();
        let p = SeekProfile::new(1.0, 5.0, 10.0).unwrap();
        let m = Mechanics::new(g, p, p, Some(0.0));
        let cfg = DiskCacheConfig {
            total_bytes: 16 * 65_536,
            segment_count: 16,
            segment_bytes: 65_536,
            read_prefetch: prefetch,
            bus_bytes_per_us: 1e9,
            command_overhead_us: 0.0,
            ..Default::default()
        };
        Drive::new(m, cfg).unwrap()
    }

    #[test]
    fn cold_read_costs_rotation_and_transfer() {
        let mut d = drive(ReadPrefetch::None);
        // sector 0 is under the head at t = 0; 100 sectors take one period
        let o = d.read(0.0, 0, 100).unwrap();
        assert_eq!(o.lookup, Some(Lookup::Miss));
        assert!((o.completion - 10_000.0).abs() < 1e-6, "{o:?}");
        let again = d.read(o.completion, 0, 100).unwrap();
        assert_eq!(again.lookup, Some(Lookup::Hit));
        assert_eq!(again.media_end, None);
    }

    #[test]
    fn stream_keeps_filling_after_completion() {
        let mut d = drive(ReadPrefetch::SequentialFill);
        let a = d.read(0.0, 0, 50).unwrap();
        let b = d.read(a.completion, 50, 50).unwrap();
        assert_eq!(b.lookup, Some(Lookup::Miss));
        // the first read's fill extends to the segment end, so by the time
        // the head has passed sector 149 the third read is a hit
        let c = d.read(15_000.0, 100, 28).unwrap();
        assert_eq!(c.lookup, Some(Lookup::Hit), "{c:?}");
    }

    #[test]
    fn write_back_then_destage_reaches_media() {
        let mut d = drive(ReadPrefetch::None);
        let o = d.write(0.0, 10, &[7; 8], false).unwrap();
        assert_eq!(o.media_end, None);
        assert_eq!(d.media().written_sectors(), 0);
        let mut t = o.completion;
        while let Some(next) = d.idle_destage(t).unwrap() {
            t = next;
        }
        assert_eq!(d.media().read(10, 8), vec![7; 8]);
        assert!(!d.has_dirty());
    }

    #[test]
    fn forced_write_goes_to_media() {
        let mut d = drive(ReadPrefetch::None);
        let o = d.write(0.0, 200, &[3; 4], true).unwrap();
        assert!(o.media_end.is_some());
        assert_eq!(d.media().read(200, 4), vec![3; 4]);
    }
}
