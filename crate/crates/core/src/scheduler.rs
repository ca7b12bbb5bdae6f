//! Pending-request queue between the file-system cache and the drive.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("request {0} is already queued")]
    DuplicateRequest(u64),
    #[error("unknown scheduling policy {0:?}")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Fcfs,
    Scan,
    Look,
    CScan,
    CLook,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::Scan => "scan",
            Policy::Look => "look",
            Policy::CScan => "c_scan",
            Policy::CLook => "c_look",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = SchedulerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "fcfs" => Policy::Fcfs,
            "scan" => Policy::Scan,
            "look" => Policy::Look,
            "c_scan" | "cscan" => Policy::CScan,
            "c_look" | "clook" => Policy::CLook,
            _ => return Err(SchedulerError::UnknownPolicy(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedRequest {
    pub id: u64,
    pub lba: u64,
    pub sectors: u64,
    pub cylinder: u32,
    pub write: bool,
    pub arrival_us: u64,
}

impl QueuedRequest {
    fn overlaps(&self, other: &QueuedRequest) -> bool {
        self.lba < other.lba + other.sectors && other.lba < self.lba + self.sectors
    }
}

/// A request chosen for dispatch. `via` lists cylinders the arm must visit
/// before reaching the request (sweep ends for SCAN and C-SCAN).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub request: QueuedRequest,
    pub via: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct PendingQueue {
    policy: Policy,
    last_cylinder: u32,
    sweep: Sweep,
    items: Vec<QueuedRequest>,
    ids: HashSet<u64>,
}

impl PendingQueue {
    pub fn new(policy: Policy, cylinders: u32) -> Self {
        Self {
            policy,
            last_cylinder: cylinders.saturating_sub(1),
            sweep: Sweep::Up,
            items: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn sweep(&self) -> Sweep {
        self.sweep
    }

    pub fn set_sweep(&mut self, sweep: Sweep) {
        self.sweep = sweep;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn enqueue(&mut self, req: QueuedRequest) -> Result<(), SchedulerError> {
        if !self.ids.insert(req.id) {
            return Err(SchedulerError::DuplicateRequest(req.id));
        }
        self.items.push(req);
        Ok(())
    }

    /// A request may not overtake an earlier queued request that touches
    /// the same sectors when either of them writes.
    fn eligible(&self, idx: usize) -> bool {
        let r = &self.items[idx];
        !self.items[..idx].iter().any(|e| (e.write || r.write) && e.overlaps(r))
    }

    fn pick<F: Fn(&QueuedRequest) -> bool, K: Fn(&QueuedRequest) -> u64>(&self, filter: F, key: K) -> Option<usize> {
        (0..self.items.len())
            .filter(|&i| filter(&self.items[i]) && self.eligible(i))
            .min_by_key(|&i| (key(&self.items[i]), i))
    }

    /// Removes and returns the next request given the arm position.
    pub fn next(&mut self, head_cylinder: u32) -> Option<Dispatch> {
        if self.items.is_empty() {
            return None;
        }
        let h = u64::from(head_cylinder);
        let up = |r: &QueuedRequest| u64::from(r.cylinder) >= h;
        let down = |r: &QueuedRequest| u64::from(r.cylinder) <= h;
        let dist = |r: &QueuedRequest| u64::from(r.cylinder).abs_diff(h);
        let mut via = Vec::new();
        let idx = match self.policy {
            Policy::Fcfs => self.pick(|_| true, |_| 0),
            Policy::Scan | Policy::Look => {
                let ahead = match self.sweep {
                    Sweep::Up => self.pick(up, dist),
                    Sweep::Down => self.pick(down, dist),
                };
                match ahead {
                    Some(i) => Some(i),
                    None => {
                        let (edge, rev) = match self.sweep {
                            Sweep::Up => (self.last_cylinder, Sweep::Down),
                            Sweep::Down => (0, Sweep::Up),
                        };
                        self.sweep = rev;
                        if self.policy == Policy::Scan && edge != head_cylinder {
                            via.push(edge);
                        }
                        let from = u64::from(edge);
                        let from = if self.policy == Policy::Scan { from } else { h };
                        self.pick(|_| true, |r| u64::from(r.cylinder).abs_diff(from))
                    }
                }
            }
            Policy::CScan | Policy::CLook => match self.pick(up, dist) {
                Some(i) => Some(i),
                None => {
                    if self.policy == Policy::CScan {
                        if head_cylinder != self.last_cylinder {
                            via.push(self.last_cylinder);
                        }
                        via.push(0);
                    }
                    self.pick(|_| true, |r| u64::from(r.cylinder))
                }
            },
        };
        // the oldest request is always eligible, so some index exists
        let idx = idx.unwrap_or(0);
        let request = self.items.remove(idx);
        self.ids.remove(&request.id);
        Some(Dispatch { request, via })
    }
}

/// Total arm travel for a dispatch starting at `head`.
pub fn travel(head: u32, d: &Dispatch) -> u64 {
    let mut at = head;
    let mut sum = 0u64;
    for &c in d.via.iter().chain(std::iter::once(&d.request.cylinder)) {
        sum += u64::from(at.abs_diff(c));
        at = c;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(id: u64, cylinder: u32) -> QueuedRequest {
        QueuedRequest { id, lba: id * 1000, sectors: 8, cylinder, write: false, arrival_us: id }
    }

    fn drain(q: &mut PendingQueue, mut head: u32) -> (Vec<u32>, u64) {
        let mut order = Vec::new();
        let mut moved = 0;
        while let Some(d) = q.next(head) {
            moved += travel(head, &d);
            head = d.request.cylinder;
            order.push(head);
        }
        (order, moved)
    }

    fn queue(policy: Policy, cyls: &[u32]) -> PendingQueue {
        let mut q = PendingQueue::new(policy, 200);
        for (i, &c) in cyls.iter().enumerate() {
            q.enqueue(req(i as u64, c)).unwrap();
        }
        q
    }

    #[test]
    fn scan_and_look_order() {
        let (order, scan_travel) = drain(&mut queue(Policy::Scan, &[50, 120, 150]), 100);
        assert_eq!(order, vec![120, 150, 50]);
        let (order, look_travel) = drain(&mut queue(Policy::Look, &[50, 120, 150]), 100);
        assert_eq!(order, vec![120, 150, 50]);
        assert_eq!(look_travel, 20 + 30 + 100);
        assert_eq!(scan_travel, 99 + 149);
    }

    #[test]
    fn circular_variants_wrap_to_lowest() {
        let (order, t) = drain(&mut queue(Policy::CLook, &[50, 120, 10, 150]), 100);
        assert_eq!(order, vec![120, 150, 10, 50]);
        assert_eq!(t, 20 + 30 + 140 + 40);
        let (order, t) = drain(&mut queue(Policy::CScan, &[50, 120, 10, 150]), 100);
        assert_eq!(order, vec![120, 150, 10, 50]);
        assert_eq!(t, 20 + 30 + 49 + 199 + 10 + 40);
    }

    #[test]
    fn fcfs_is_arrival_order() {
        let (order, _) = drain(&mut queue(Policy::Fcfs, &[50, 120, 10, 150]), 100);
        assert_eq!(order, vec![50, 120, 10, 150]);
    }

    #[test]
    fn duplicate_rejected() {
        let mut q = queue(Policy::Look, &[1]);
        assert_eq!(q.enqueue(req(0, 5)), Err(SchedulerError::DuplicateRequest(0)));
    }

    #[test]
    fn overlapping_write_is_not_overtaken() {
        let mut q = PendingQueue::new(Policy::Look, 200);
        q.enqueue(QueuedRequest { id: 1, lba: 0, sectors: 16, cylinder: 10, write: true, arrival_us: 0 }).unwrap();
        q.enqueue(QueuedRequest { id: 2, lba: 8, sectors: 16, cylinder: 150, write: false, arrival_us: 1 }).unwrap();
        q.enqueue(QueuedRequest { id: 3, lba: 900, sectors: 8, cylinder: 120, write: false, arrival_us: 2 }).unwrap();
        let ids: Vec<u64> = std::iter::from_fn(|| q.next(100).map(|d| d.request.id)).collect();
        assert_eq!(ids, vec![3, 1, 2]);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::Fcfs, Policy::Scan, Policy::Look, Policy::CScan, Policy::CLook] {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("elevator".parse::<Policy>().is_err());
    }

    proptest! {
        #[test]
        fn dispatch_is_a_permutation(
            cyls in proptest::collection::vec(0u32..200, 0..40),
            head in 0u32..200,
            p in 0usize..5,
        ) {
            let policy = [Policy::Fcfs, Policy::Scan, Policy::Look, Policy::CScan, Policy::CLook][p];
            let mut q = queue(policy, &cyls);
            let mut got = Vec::new();
            let mut h = head;
            while let Some(d) = q.next(h) {
                h = d.request.cylinder;
                got.push(d.request.id);
            }
            got.sort_unstable();
            prop_assert_eq!(got, (0..cyls.len() as u64).collect::<Vec<_>>());
        }
    }
}
