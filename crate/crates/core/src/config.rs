//! INI run configuration and shipped drive profiles.
//!
//! Every key has a textual default; a drive profile overrides the `[disk]`
//! and `[disk_cache]` defaults, and the file overrides both. The effective
//! text of every key is kept for echoing into reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;

use crate::disk::{DiskGeometry, Mapping, Mechanics, SeekProfile, SpareScheme};
use crate::disk_cache::{DiskCacheConfig, ReadPrefetch, WritePolicy};
use crate::fs_cache::FsCacheConfig;
use crate::scheduler::Policy;
use crate::sim::{ReplayMode, ReplayPolicy, StackConfig};
use crate::trace::{AccessMode, NormalizeOptions};
use crate::workload::{AddressSpec, DistSpec, GeneratorSpec};

/// A rejected key, named by its `section.key` path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { key: key.into(), reason: reason.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

pub const PROFILE_NAMES: [&str; 3] = ["fujitsu_man3184mp", "toshiba_mk6012map", "hitachi_travelstar_80gn"];
pub const DEFAULT_PROFILE: &str = PROFILE_NAMES[0];

const DISK_KEYS: &[(&str, &str)] = &[
    ("profile", DEFAULT_PROFILE),
    ("cylinders", ""),
    ("heads", ""),
    ("rpm", ""),
    ("outer_track_sectors", ""),
    ("inner_track_sectors", ""),
    ("zones", "16"),
    ("track_skew", "auto"),
    ("cylinder_skew", "auto"),
    ("spares_per_zone", "0"),
    ("mapping", "cylinder_major"),
    ("seek_read_ms", ""),
    ("seek_write_ms", ""),
    ("head_switch_us", "auto"),
    ("scheduler", "fcfs"),
];

const DISK_CACHE_KEYS: &[(&str, &str)] = &[
    ("size_bytes", ""),
    ("segments", "16"),
    ("read_prefetch", "sequential_fill"),
    ("prefetch_block_bytes", "524288"),
    ("write_policy", "write_back"),
    ("locality_radius_sectors", "1024"),
    ("reposition_penalty", "false"),
    ("destage", "true"),
    ("bus_bytes_per_us", ""),
    ("command_overhead_us", "20"),
];

const OS_KEYS: &[(&str, &str)] = &[
    ("block_bytes", "65536"),
    ("view_bytes", "262144"),
    ("readahead_trigger", "3"),
    ("readahead_window_factor", "2"),
    ("working_set_bytes", "8388608"),
    ("reserve_bytes", "6291456"),
    ("progressive_limit_bytes", "98304"),
    ("progressive_sizes", "131072,262144"),
    ("block_count_overrides", "327680:6"),
    ("fastio_hit_cost_us", "20"),
    ("miss_path_cost_us", "60"),
    ("memcopy_bytes_per_us", "800"),
    ("cache_capacity_bytes", "268435456"),
    ("metadata_addr_bytes", "32768"),
    ("metadata_bytes", "4096"),
];

const TRACE_KEYS: &[(&str, &str)] =
    &[("path", ""), ("cluster_size_bytes", "4096"), ("system_processes", "csrss.exe,explorer.exe")];

const WORKLOAD_KEYS: &[(&str, &str)] = &[
    ("read_weight", "1"),
    ("write_weight", "0"),
    ("mode", "NORMAL"),
    ("inter_arrival_us", "constant(0)"),
    ("size_bytes", "constant(65536)"),
    ("address", "sequential(0)"),
    ("count", "100"),
    ("file_id", "0"),
    ("granularity_bytes", "512"),
    ("disk_base_bytes", "0"),
];

const REPLAY_KEYS: &[(&str, &str)] =
    &[("mode", "closed"), ("tolerance_us", "0"), ("include_system", "false"), ("seed", "0")];

/// Profile overrides of `[disk]` and `[disk_cache]` defaults. Zone tables,
/// head counts and cache segment counts are calibration guesses; the
/// published figures are capacity, rpm, seek points, track-size range and
/// cache size.
fn profile_defaults(name: &str) -> Option<Vec<(&'static str, &'static str, &'static str)>> {
    let d = "disk";
    let c = "disk_cache";
    Some(match name {
        "fujitsu_man3184mp" => vec![
            (d, "cylinders", "15024"),
            (d, "heads", "4"),
            (d, "rpm", "10000"),
            (d, "outer_track_sectors", "754"),
            (d, "inner_track_sectors", "442"),
            (d, "seek_read_ms", "0.4,4.5,11"),
            (d, "seek_write_ms", "0.6,5,12"),
            (c, "size_bytes", "8388608"),
            (c, "read_prefetch", "local_512k"),
            (c, "reposition_penalty", "true"),
            (c, "bus_bytes_per_us", "160"),
        ],
        // no published track sizes: the range is chosen so that the zone
        // table matches the 6 GB capacity
        "toshiba_mk6012map" => vec![
            (d, "cylinders", "13079"),
            (d, "heads", "2"),
            (d, "rpm", "4200"),
            (d, "outer_track_sectors", "560"),
            (d, "inner_track_sectors", "336"),
            (d, "seek_read_ms", "3,13,24"),
            (d, "seek_write_ms", "3,13,24"),
            (c, "size_bytes", "1048576"),
            (c, "segments", "4"),
            (c, "bus_bytes_per_us", "33"),
            (c, "command_overhead_us", "50"),
        ],
        "hitachi_travelstar_80gn" => vec![
            (d, "cylinders", "59365"),
            (d, "heads", "3"),
            (d, "rpm", "4200"),
            (d, "outer_track_sectors", "868"),
            (d, "inner_track_sectors", "448"),
            (d, "seek_read_ms", "2.5,13,31"),
            (d, "seek_write_ms", "2.5,13,31"),
            (c, "size_bytes", "8388608"),
            (c, "bus_bytes_per_us", "100"),
            (c, "command_overhead_us", "50"),
        ],
        _ => return None,
    })
}

#[derive(Debug, Clone)]
pub struct TraceConfig {
    pub path: Option<PathBuf>,
    pub normalize: NormalizeOptions,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub profile: String,
    pub stack: StackConfig,
    pub trace: TraceConfig,
    /// `(section name, spec)`, in file order.
    pub workloads: Vec<(String, GeneratorSpec)>,
    pub replay: ReplayPolicy,
    pub seed: u64,
    /// Effective `section.key=value` pairs, sorted.
    pub echo: Vec<(String, String)>,
}

struct Section<'a> {
    name: String,
    values: BTreeMap<&'a str, String>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn err(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::new(self.path(key), reason)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(self.err(key, "missing value"));
        }
        v.parse().map_err(|_| self.err(key, format!("cannot parse {v:?}")))
    }

    fn positive<T: FromStr + PartialOrd + Default>(&self, key: &str) -> Result<T, ConfigError> {
        let v: T = self.get(key)?;
        if v <= T::default() {
            return Err(self.err(key, "must be positive"));
        }
        Ok(v)
    }

    fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(self.err(key, format!("expected true or false, got {v:?}"))),
        }
    }

    fn auto<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn seek(&self, key: &str) -> Result<SeekProfile, ConfigError> {
        let parts: Vec<f64> = self
            .raw(key)
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| self.err(key, "expected min,avg,max in milliseconds"))?;
        let [min, avg, max] = parts[..] else {
            return Err(self.err(key, "expected min,avg,max in milliseconds"));
        };
        SeekProfile::new(min, avg, max).map_err(|e| self.err(key, e.to_string()))
    }
}

fn sections<'a>(ini: &'a Ini) -> Result<Vec<(String, BTreeMap<&'a str, String>)>, ConfigError> {
    let mut out = Vec::new();
    for (name, props) in ini.iter() {
        let Some(name) = name else {
            if let Some((k, _)) = props.iter().next() {
                return Err(ConfigError::new(k, "key outside any section"));
            }
            continue;
        };
        let mut values = BTreeMap::new();
        for (k, v) in props.iter() {
            values.insert(k, v.trim().to_string());
        }
        out.push((name.to_string(), values));
    }
    Ok(out)
}

fn known(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    match name {
        "disk" => Some(DISK_KEYS),
        "disk_cache" => Some(DISK_CACHE_KEYS),
        "os" => Some(OS_KEYS),
        "trace" => Some(TRACE_KEYS),
        "replay" => Some(REPLAY_KEYS),
        n if n == "workload" || n.starts_with("workload.") => Some(WORKLOAD_KEYS),
        _ => None,
    }
}

/// Fills defaults under `given`, rejecting unknown keys.
fn effective<'a>(
    name: &str,
    given: Option<&BTreeMap<&'a str, String>>,
    overrides: &[(&'static str, &'static str, &'static str)],
) -> Result<Section<'a>, ConfigError> {
    let table = known(name).ok_or_else(|| ConfigError::new(name, "unknown section"))?;
    let mut values: BTreeMap<&'a str, String> = BTreeMap::new();
    for &(k, v) in table {
        values.insert(k, v.to_string());
    }
    for &(s, k, v) in overrides {
        if s == name {
            values.insert(k, v.to_string());
        }
    }
    if let Some(g) = given {
        for (&k, v) in g {
            if !table.iter().any(|(t, _)| *t == k) {
                return Err(ConfigError::new(format!("{name}.{k}"), "unknown key"));
            }
            values.insert(k, v.clone());
        }
    }
    Ok(Section { name: name.to_string(), values })
}

fn build_disk(s: &Section) -> Result<(Mechanics, Policy), ConfigError> {
    let cylinders: u32 = s.positive("cylinders")?;
    let heads: u32 = s.positive("heads")?;
    let rpm: f64 = s.positive("rpm")?;
    if !rpm.is_finite() {
        return Err(s.err("rpm", "must be finite"));
    }
    let outer: u32 = s.positive("outer_track_sectors")?;
    let inner: u32 = s.positive("inner_track_sectors")?;
    if inner > outer {
        return Err(s.err("inner_track_sectors", "must not exceed outer_track_sectors"));
    }
    let zones = DiskGeometry::linear_zones(cylinders, outer, inner, s.positive("zones")?);
    let spares = match s.get::<u32>("spares_per_zone")? {
        0 => SpareScheme::None,
        n => SpareScheme::PerZoneTail(n),
    };
    let mapping = match s.raw("mapping") {
        "cylinder_major" => Mapping::CylinderMajor,
        "surface_major" => Mapping::SurfaceMajor,
        v => return Err(s.err("mapping", format!("expected cylinder_major or surface_major, got {v:?}"))),
    };
    let read = s.seek("seek_read_ms")?;
    let write = s.seek("seek_write_ms")?;
    let switch: Option<f64> = s.auto("head_switch_us")?;
    if switch.is_some_and(|v| !(v >= 0.0)) {
        return Err(s.err("head_switch_us", "must be non-negative"));
    }
    let geometry = |track, cyl, key: &str| {
        DiskGeometry::new(cylinders, heads, zones.clone(), rpm, track, cyl, spares, mapping).map_err(|e| s.err(key, e.to_string()))
    };
    let plain = Mechanics::new(geometry(0, 0, "zones")?, read, write, switch);
    let (auto_track, auto_cyl) = plain.matched_skews();
    let track = s.auto("track_skew")?.unwrap_or(auto_track);
    let cyl = s.auto("cylinder_skew")?.unwrap_or(auto_cyl);
    let key = if s.raw("track_skew") == "auto" && s.raw("cylinder_skew") == "auto" { "head_switch_us" } else { "track_skew" };
    let mech = Mechanics::new(geometry(track, cyl, key)?, read, write, switch);
    let policy = s.raw("scheduler").parse().map_err(|e: crate::scheduler::SchedulerError| s.err("scheduler", e.to_string()))?;
    Ok((mech, policy))
}

fn build_disk_cache(s: &Section) -> Result<DiskCacheConfig, ConfigError> {
    let total_bytes: u64 = s.positive("size_bytes")?;
    let segment_count: u32 = s.positive("segments")?;
    let read_prefetch = match s.raw("read_prefetch") {
        "none" => ReadPrefetch::None,
        "sequential_fill" => ReadPrefetch::SequentialFill,
        "local_512k" => ReadPrefetch::Local512K,
        v => return Err(s.err("read_prefetch", format!("expected none, sequential_fill or local_512k, got {v:?}"))),
    };
    let write_policy = match s.raw("write_policy") {
        "write_back" => WritePolicy::WriteBack,
        "write_through" => WritePolicy::WriteThrough,
        v => return Err(s.err("write_policy", format!("expected write_back or write_through, got {v:?}"))),
    };
    let bus: f64 = s.positive("bus_bytes_per_us")?;
    let overhead: f64 = s.get("command_overhead_us")?;
    if !(overhead >= 0.0) {
        return Err(s.err("command_overhead_us", "must be non-negative"));
    }
    let cfg = DiskCacheConfig {
        total_bytes,
        segment_count,
        segment_bytes: total_bytes / u64::from(segment_count),
        read_prefetch,
        prefetch_block_bytes: s.positive("prefetch_block_bytes")?,
        write_policy,
        locality_radius_sectors: s.get("locality_radius_sectors")?,
        reposition_penalty: s.flag("reposition_penalty")?,
        destage: s.flag("destage")?,
        bus_bytes_per_us: bus,
        command_overhead_us: overhead,
    };
    cfg.validate().map_err(|e| s.err("size_bytes", e.to_string()))?;
    Ok(cfg)
}

fn build_os(s: &Section) -> Result<FsCacheConfig, ConfigError> {
    let list = |key: &str| -> Result<Vec<u64>, ConfigError> {
        s.raw(key)
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().map_err(|_| s.err(key, format!("bad list item {p:?}"))))
            .collect()
    };
    let overrides = s
        .raw("block_count_overrides")
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| s.err("block_count_overrides", "expected size:blocks"))?;
            let n = |x: &str| x.trim().parse::<u64>().map_err(|_| s.err("block_count_overrides", format!("bad item {p:?}")));
            Ok((n(a)?, n(b)?))
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let cfg = FsCacheConfig {
        block_bytes: s.positive("block_bytes")?,
        view_bytes: s.positive("view_bytes")?,
        readahead_trigger: s.get("readahead_trigger")?,
        readahead_window_factor: s.get("readahead_window_factor")?,
        working_set_bytes: s.positive("working_set_bytes")?,
        reserve_bytes: s.get("reserve_bytes")?,
        progressive_limit_bytes: s.get("progressive_limit_bytes")?,
        progressive_sizes: list("progressive_sizes")?,
        block_count_overrides: overrides,
        fastio_hit_cost_us: s.get("fastio_hit_cost_us")?,
        miss_path_cost_us: s.get("miss_path_cost_us")?,
        memcopy_bytes_per_us: s.positive("memcopy_bytes_per_us")?,
        cache_capacity_bytes: s.positive("cache_capacity_bytes")?,
        metadata_addr_bytes: s.get("metadata_addr_bytes")?,
        metadata_bytes: s.positive("metadata_bytes")?,
    };
    cfg.validate().map_err(|e| s.err("block_bytes", e.to_string()))?;
    Ok(cfg)
}

fn build_workload(s: &Section, seed: u64) -> Result<GeneratorSpec, ConfigError> {
    let dist = |key: &str| DistSpec::parse(s.raw(key)).map_err(|e| s.err(key, e.to_string()));
    let address = match s.raw("address").strip_prefix("sequential(").and_then(|r| r.strip_suffix(')')) {
        Some(base) => AddressSpec::SequentialFrom(base.trim().parse().map_err(|_| s.err("address", "bad sequential base"))?),
        None => AddressSpec::Dist(dist("address")?),
    };
    let mode = AccessMode::parse(s.raw("mode")).ok_or_else(|| s.err("mode", "expected NORMAL, SEQUENTIAL, NO_BUFFER or WRITE_THROUGH"))?;
    let spec = GeneratorSpec {
        read_weight: s.get("read_weight")?,
        write_weight: s.get("write_weight")?,
        mode,
        inter_arrival_us: dist("inter_arrival_us")?,
        size_bytes: dist("size_bytes")?,
        address,
        count: s.get("count")?,
        file_id: s.get("file_id")?,
        seed,
        granularity_bytes: s.get("granularity_bytes")?,
        disk_base_bytes: s.get("disk_base_bytes")?,
    };
    spec.validate().map_err(|e| s.err("read_weight", e.to_string()))?;
    Ok(spec)
}

/// Parses and validates a configuration. `seed` seeds every workload
/// generator (generator `i` gets `seed + i`) unless `[replay] seed` is set.
pub fn load_config(text: &str) -> Result<Config, ConfigError> {
    let ini = Ini::load_from_str(text).map_err(|e| ConfigError::new("<file>", e.to_string()))?;
    let given = sections(&ini)?;
    let find = |n: &str| given.iter().find(|(g, _)| g == n).map(|(_, v)| v);
    for (name, _) in &given {
        if known(name).is_none() {
            return Err(ConfigError::new(name.clone(), "unknown section"));
        }
    }
    let profile = find("disk").and_then(|d| d.get("profile")).cloned().unwrap_or_else(|| DEFAULT_PROFILE.to_string());
    let overrides = if profile == "custom" {
        Vec::new()
    } else {
        profile_defaults(&profile)
            .ok_or_else(|| ConfigError::new("disk.profile", format!("unknown profile {profile:?} (known: {}, custom)", PROFILE_NAMES.join(", "))))?
    };

    let disk = effective("disk", find("disk"), &overrides)?;
    let disk_cache = effective("disk_cache", find("disk_cache"), &overrides)?;
    let os = effective("os", find("os"), &[])?;
    let trace = effective("trace", find("trace"), &[])?;
    let replay = effective("replay", find("replay"), &[])?;

    let (mechanics, scheduler) = build_disk(&disk)?;
    let stack = StackConfig { mechanics, disk_cache: build_disk_cache(&disk_cache)?, fs: build_os(&os)?, scheduler };

    let cluster: u64 = trace.positive("cluster_size_bytes")?;
    let system_processes = trace.raw("system_processes").split(',').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect();
    let path = Some(trace.raw("path")).filter(|p| !p.is_empty()).map(PathBuf::from);

    let mode = match replay.raw("mode") {
        "closed" => ReplayMode::Closed,
        "open" => ReplayMode::Open,
        v => return Err(replay.err("mode", format!("expected closed or open, got {v:?}"))),
    };
    let policy = ReplayPolicy { mode, tolerance_us: replay.get("tolerance_us")?, include_system: replay.flag("include_system")? };
    let seed: u64 = replay.get("seed")?;

    let mut workloads = Vec::new();
    let mut echo_sections = vec![disk, disk_cache, os, trace, replay];
    for (i, (name, values)) in given.iter().filter(|(n, _)| known(n) == Some(WORKLOAD_KEYS)).enumerate() {
        let s = effective(name, Some(values), &[])?;
        workloads.push((name.clone(), build_workload(&s, seed.wrapping_add(i as u64))?));
        echo_sections.push(s);
    }

    let mut echo: Vec<(String, String)> =
        echo_sections.iter().flat_map(|s| s.values.iter().map(|(k, v)| (s.path(k), v.clone()))).collect();
    echo.sort();
    Ok(Config {
        profile,
        stack,
        trace: TraceConfig { path, normalize: NormalizeOptions { cluster_size_bytes: cluster, system_processes } },
        workloads,
        replay: policy,
        seed,
        echo,
    })
}

impl Config {
    /// Replaces the generator seeds after loading (`--seed`).
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        for (i, (_, w)) in self.workloads.iter_mut().enumerate() {
            w.seed = seed.wrapping_add(i as u64);
        }
        for (k, v) in &mut self.echo {
            if k == "replay.seed" {
                *v = seed.to_string();
            }
        }
    }
}
