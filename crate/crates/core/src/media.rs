//! Sector contents as write stamps.
//!
//! Data is never materialised; every written sector carries the stamp of
//! the request that wrote it (0 = never written). Two images are equal when
//! every sector holds the same stamp.

use std::collections::BTreeMap;

use crate::disk::SECTOR_BYTES;

/// Sectors touched by a byte range: `(first lba, count)`.
pub fn sector_span(addr_bytes: u64, bytes: u64) -> (u64, u64) {
    let first = addr_bytes / SECTOR_BYTES;
    let end = (addr_bytes + bytes).div_ceil(SECTOR_BYTES);
    (first, end - first)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MediaImage {
    sectors: BTreeMap<u64, u64>,
}

impl MediaImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, lba: u64, stamps: &[u64]) {
        for (i, &s) in stamps.iter().enumerate() {
            self.sectors.insert(lba + i as u64, s);
        }
    }

    /// Writes `stamps`, leaving sectors whose stamp is 0 untouched.
    pub fn write_sparse(&mut self, lba: u64, stamps: &[u64]) {
        for (i, &s) in stamps.iter().enumerate() {
            if s != 0 {
                self.sectors.insert(lba + i as u64, s);
            }
        }
    }

    pub fn fill(&mut self, lba: u64, sectors: u64, stamp: u64) {
        for s in lba..lba + sectors {
            self.sectors.insert(s, stamp);
        }
    }

    pub fn get(&self, lba: u64) -> u64 {
        self.sectors.get(&lba).copied().unwrap_or(0)
    }

    pub fn read(&self, lba: u64, sectors: u64) -> Vec<u64> {
        (lba..lba + sectors).map(|s| self.get(s)).collect()
    }

    pub fn written_sectors(&self) -> usize {
        self.sectors.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.sectors.iter().map(|(&k, &v)| (k, v))
    }
}
