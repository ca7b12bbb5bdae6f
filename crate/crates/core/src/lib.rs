//! Trace-driven discrete-event simulator of a PC storage stack.
//!
//! Requests flow from the application through a file-system cache, an I/O
//! scheduler and an on-drive cache down to a zoned disk mechanism.
//! [`sim::simulate`] runs a whole replay; the guide in `book/` walks through
//! each layer.

pub mod disk;
pub mod engine;
pub mod trace;
pub mod workload;
pub mod scheduler;
pub mod disk_cache;
pub mod media;
pub mod drive;
pub mod report;
pub mod sim;
pub mod config;
pub mod fs_cache;

// Book chapters are compiled as doc-tests so their snippets stay runnable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/workloads.md")]
    mod workloads {}
    #[doc = include_str!("../../../book/src/disk.md")]
    mod disk {}
    #[doc = include_str!("../../../book/src/disk_cache.md")]
    mod disk_cache {}
    #[doc = include_str!("../../../book/src/fs_cache.md")]
    mod fs_cache {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
}
