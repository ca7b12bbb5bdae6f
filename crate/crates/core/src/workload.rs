//! Synthetic request streams.
//!
//! # Seed-to-stream mapping
//!
//! Each generator owns one ChaCha8 generator seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`. Every random dimension draws from its
//! own ChaCha stream number of that generator so that, for example, changing
//! the operation mix does not perturb the size sequence:
//!
//! | stream | dimension          |
//! |--------|--------------------|
//! | 0      | inter-arrival time |
//! | 1      | request size       |
//! | 2      | address            |
//! | 3      | operation mix      |
//!
//! Golden files depend on this mapping; changing it is a breaking change.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal, Poisson};
use thiserror::Error;

use crate::trace::{AccessMode, CanonicalRequest, Op, Origin};

#[derive(Debug, Error, PartialEq)]
#[error("invalid distribution: {0}")]
pub struct InvalidParams(pub String);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistKind {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
    Normal { mean: f64, sigma: f64 },
    Binomial { trials: u64, p: f64 },
    Poisson { lambda: f64 },
    /// Uniform over the aligned positions `lo, lo + align, ...` strictly
    /// below `hi`.
    RandomChoice { lo: u64, hi: u64, align: u64 },
}

/// A validated distribution, optionally clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec {
    kind: DistKind,
    clamp: Option<(f64, f64)>,
}

impl DistSpec {
    pub fn new(kind: DistKind, clamp: Option<(f64, f64)>) -> Result<Self, InvalidParams> {
        let bad = |m: &str| Err(InvalidParams(m.to_string()));
        match kind {
            DistKind::Constant(v) if !v.is_finite() => return bad("constant must be finite"),
            DistKind::Uniform { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                return bad("uniform requires finite lo <= hi")
            }
            DistKind::Exponential { mean } if !(mean > 0.0) || !mean.is_finite() => {
                return bad("exponential mean must be > 0")
            }
            DistKind::Normal { mean, sigma } if !(sigma >= 0.0) || !mean.is_finite() || !sigma.is_finite() => {
                return bad("normal sigma must be >= 0")
            }
            DistKind::Binomial { p, .. } if !(0.0..=1.0).contains(&p) => {
                return bad("binomial p must lie in [0, 1]")
            }
            DistKind::Poisson { lambda } if !(lambda > 0.0) || !lambda.is_finite() => {
                return bad("poisson lambda must be > 0")
            }
            DistKind::RandomChoice { lo, hi, align } if align == 0 || lo >= hi => {
                return bad("choice requires lo < hi and align > 0")
            }
            _ => {}
        }
        if let Some((min, max)) = clamp {
            if !(min <= max) {
                return bad("clamp requires min <= max");
            }
        }
        Ok(Self { kind, clamp })
    }

    pub fn constant(v: f64) -> Self {
        Self::new(DistKind::Constant(v), None).expect("finite constant")
    }

    pub fn kind(&self) -> DistKind {
        self.kind
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    /// Parses the config syntax, e.g. `exponential(500)` or
    /// `normal(65536, 8192) clamp(0, 131072)`.
    pub fn parse(text: &str) -> Result<Self, InvalidParams> {
        let text = text.trim();
        let (main, clamp) = match text.find(" clamp(") {
            Some(i) => (&text[..i], Some(&text[i + 1..])),
            None => (text, None),
        };
        let (name, args) = call_parts(main)?;
        let arg = |i: usize| -> Result<f64, InvalidParams> {
            args.get(i)
                .copied()
                .ok_or_else(|| InvalidParams(format!("{name} needs {} argument(s)", i + 1)))
        };
        let want = |n: usize| -> Result<(), InvalidParams> {
            if args.len() == n {
                Ok(())
            } else {
                Err(InvalidParams(format!("{name} takes {n} argument(s)")))
            }
        };
        let kind = match name.as_str() {
            "constant" => {
                want(1)?;
                DistKind::Constant(arg(0)?)
            }
            "uniform" => {
                want(2)?;
                DistKind::Uniform { lo: arg(0)?, hi: arg(1)? }
            }
            "exponential" => {
                want(1)?;
                DistKind::Exponential { mean: arg(0)? }
            }
            "normal" => {
                want(2)?;
                DistKind::Normal { mean: arg(0)?, sigma: arg(1)? }
            }
            "binomial" => {
                want(2)?;
                DistKind::Binomial { trials: as_count(arg(0)?)?, p: arg(1)? }
            }
            "poisson" => {
                want(1)?;
                DistKind::Poisson { lambda: arg(0)? }
            }
            "choice" => {
                want(3)?;
                DistKind::RandomChoice {
                    lo: as_count(arg(0)?)?,
                    hi: as_count(arg(1)?)?,
                    align: as_count(arg(2)?)?,
                }
            }
            other => return Err(InvalidParams(format!("unknown distribution {other:?}"))),
        };
        let clamp = match clamp {
            Some(c) => {
                let (cname, cargs) = call_parts(c)?;
                if cname != "clamp" || cargs.len() != 2 {
                    return Err(InvalidParams("clamp takes (min, max)".into()));
                }
                Some((cargs[0], cargs[1]))
            }
            None => None,
        };
        Self::new(kind, clamp)
    }

    /// Draws one value. The clamp, if any, is applied last.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = match self.kind {
            DistKind::Constant(v) => v,
            DistKind::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            DistKind::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            DistKind::Normal { mean, sigma } => {
                Normal::new(mean, sigma).expect("validated").sample(rng)
            }
            DistKind::Binomial { trials, p } => {
                Binomial::new(trials, p).expect("validated").sample(rng) as f64
            }
            DistKind::Poisson { lambda } => Poisson::new(lambda).expect("validated").sample(rng),
            DistKind::RandomChoice { lo, hi, align } => {
                let slots = (hi - lo).div_ceil(align);
                (lo + rng.random_range(0..slots) * align) as f64
            }
        };
        match self.clamp {
            Some((min, max)) => v.clamp(min, max),
            None => v,
        }
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DistKind::Constant(v) => write!(f, "constant({v})")?,
            DistKind::Uniform { lo, hi } => write!(f, "uniform({lo}, {hi})")?,
            DistKind::Exponential { mean } => write!(f, "exponential({mean})")?,
            DistKind::Normal { mean, sigma } => write!(f, "normal({mean}, {sigma})")?,
            DistKind::Binomial { trials, p } => write!(f, "binomial({trials}, {p})")?,
            DistKind::Poisson { lambda } => write!(f, "poisson({lambda})")?,
            DistKind::RandomChoice { lo, hi, align } => write!(f, "choice({lo}, {hi}, {align})")?,
        }
        if let Some((min, max)) = self.clamp {
            write!(f, " clamp({min}, {max})")?;
        }
        Ok(())
    }
}

fn as_count(v: f64) -> Result<u64, InvalidParams> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(InvalidParams(format!("{v} is not a non-negative integer")))
    }
}

fn call_parts(text: &str) -> Result<(String, Vec<f64>), InvalidParams> {
    let text = text.trim();
    let open = text.find('(').ok_or_else(|| InvalidParams(format!("expected name(args): {text:?}")))?;
    let inner = text[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| InvalidParams(format!("unclosed parenthesis: {text:?}")))?;
    let args = inner
        .split(',')
        .filter(|a| !a.trim().is_empty())
        .map(|a| a.trim().parse::<f64>().map_err(|_| InvalidParams(format!("bad number {a:?}"))))
        .collect::<Result<_, _>>()?;
    Ok((text[..open].trim().to_ascii_lowercase(), args))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AddressSpec {
    /// Each request starts where the previous one ended.
    SequentialFrom(u64),
    /// File offsets drawn from a distribution, aligned down to the size
    /// granularity.
    Dist(DistSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub read_weight: f64,
    pub write_weight: f64,
    pub mode: AccessMode,
    pub inter_arrival_us: DistSpec,
    pub size_bytes: DistSpec,
    pub address: AddressSpec,
    pub count: usize,
    pub file_id: u32,
    pub seed: u64,
    pub granularity_bytes: u64,
    /// Disk byte address of file offset zero.
    pub disk_base_bytes: u64,
}

impl GeneratorSpec {
    /// A sequential stream of fixed-size requests issued back to back.
    pub fn sequential(op: Op, mode: AccessMode, size_bytes: u64, count: usize) -> Self {
        let (read_weight, write_weight) = if op == Op::Write { (0.0, 1.0) } else { (1.0, 0.0) };
        Self {
            read_weight,
            write_weight,
            mode,
            inter_arrival_us: DistSpec::constant(0.0),
            size_bytes: DistSpec::constant(size_bytes as f64),
            address: AddressSpec::SequentialFrom(0),
            count,
            file_id: 0,
            seed: 0,
            granularity_bytes: 512,
            disk_base_bytes: 0,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidParams> {
        let finite = self.read_weight.is_finite() && self.write_weight.is_finite();
        if !finite || self.read_weight < 0.0 || self.write_weight < 0.0 {
            return Err(InvalidParams("op weights must be non-negative".into()));
        }
        if self.read_weight + self.write_weight <= 0.0 {
            return Err(InvalidParams("op weights must not all be zero".into()));
        }
        if self.granularity_bytes == 0 {
            return Err(InvalidParams("granularity must be positive".into()));
        }
        Ok(())
    }
}

const STREAM_ARRIVAL: u64 = 0;
const STREAM_SIZE: u64 = 1;
const STREAM_ADDRESS: u64 = 2;
const STREAM_OP: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round_to(v: f64, granularity: u64) -> u64 {
    let g = granularity as f64;
    ((v.max(0.0) / g).round() * g) as u64
}

/// Generates exactly `spec.count` READ/WRITE requests.
///
/// Issue times are the running sum of inter-arrival draws, starting with
/// the first draw. Negative draws are clamped at zero before rounding.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<CanonicalRequest>, InvalidParams> {
    spec.validate()?;
    let mut arrivals = stream_rng(spec.seed, STREAM_ARRIVAL);
    let mut sizes = stream_rng(spec.seed, STREAM_SIZE);
    let mut addrs = stream_rng(spec.seed, STREAM_ADDRESS);
    let mut ops = stream_rng(spec.seed, STREAM_OP);
    let total_weight = spec.read_weight + spec.write_weight;

    let mut out = Vec::with_capacity(spec.count);
    let mut now = 0u64;
    let mut cursor = match &spec.address {
        AddressSpec::SequentialFrom(base) => *base,
        AddressSpec::Dist(_) => 0,
    };
    for _ in 0..spec.count {
        now += spec.inter_arrival_us.sample(&mut arrivals).max(0.0).round() as u64;
        let size = round_to(spec.size_bytes.sample(&mut sizes), spec.granularity_bytes);
        let offset = match &spec.address {
            AddressSpec::SequentialFrom(_) => {
                let o = cursor;
                cursor += size;
                o
            }
            AddressSpec::Dist(d) => {
                let v = d.sample(&mut addrs).max(0.0) as u64;
                v - v % spec.granularity_bytes
            }
        };
        let op = if spec.write_weight == 0.0 {
            Op::Read
        } else if spec.read_weight == 0.0 {
            Op::Write
        } else if ops.random_range(0.0..total_weight) < spec.read_weight {
            Op::Read
        } else {
            Op::Write
        };
        out.push(CanonicalRequest {
            issue_time_us: now,
            origin: Origin::App,
            op,
            file_id: spec.file_id,
            file_offset_bytes: offset,
            length_bytes: size,
            disk_byte_addr: spec.disk_base_bytes + offset,
            mode: spec.mode,
        });
    }
    Ok(out)
}

/// [`generate`] wrapped with one OPEN before the first request and one
/// CLOSE after the last, both at the neighbouring request's issue time.
pub fn generate_with_lifecycle(spec: &GeneratorSpec) -> Result<Vec<CanonicalRequest>, InvalidParams> {
    let body = generate(spec)?;
    if body.is_empty() {
        return Ok(body);
    }
    let marker = |op, t| CanonicalRequest {
        issue_time_us: t,
        origin: Origin::App,
        op,
        file_id: spec.file_id,
        file_offset_bytes: 0,
        length_bytes: 0,
        disk_byte_addr: 0,
        mode: spec.mode,
    };
    let first = body[0].issue_time_us;
    let last = body[body.len() - 1].issue_time_us;
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(marker(Op::Open, first));
    out.extend(body);
    out.push(marker(Op::Close, last));
    Ok(out)
}

/// Merges several generated streams by issue time. Equal times keep the
/// order of the input streams.
pub fn merge_streams(streams: Vec<Vec<CanonicalRequest>>) -> Vec<CanonicalRequest> {
    let mut all: Vec<(u64, usize, usize, CanonicalRequest)> = streams
        .into_iter()
        .enumerate()
        .flat_map(|(s, reqs)| reqs.into_iter().enumerate().map(move |(i, r)| (r.issue_time_us, s, i, r)))
        .collect();
    all.sort_by_key(|(t, s, i, _)| (*t, *s, *i));
    all.into_iter().map(|(_, _, _, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_distributions() {
        let mut rng = stream_rng(1, 0);
        let c = DistSpec::constant(65_536.0);
        let u = DistSpec::new(DistKind::Uniform { lo: 7.0, hi: 7.0 }, None).unwrap();
        for _ in 0..100 {
            assert_eq!(c.sample(&mut rng), 65_536.0);
            assert_eq!(u.sample(&mut rng), 7.0);
        }
    }

    #[test]
    fn exponential_sample_mean() {
        let d = DistSpec::parse("exponential(500)").unwrap();
        let mut rng = stream_rng(42, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((490.0..=510.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn invalid_params_rejected_at_construction() {
        assert!(DistSpec::new(DistKind::Uniform { lo: 2.0, hi: 1.0 }, None).is_err());
        assert!(DistSpec::new(DistKind::Exponential { mean: 0.0 }, None).is_err());
        assert!(DistSpec::new(DistKind::Normal { mean: 0.0, sigma: -1.0 }, None).is_err());
        assert!(DistSpec::new(DistKind::Binomial { trials: 3, p: 1.5 }, None).is_err());
        assert!(DistSpec::parse("gamma(1)").is_err());
        assert!(DistSpec::parse("constant(1) clamp(5, 1)").is_err());
    }

    #[test]
    fn parse_display_round_trip() {
        for text in [
            "constant(65536)",
            "uniform(0, 10)",
            "normal(65536, 8192) clamp(0, 131072)",
            "binomial(10, 0.5)",
            "poisson(4)",
            "choice(0, 1048576, 65536)",
        ] {
            let d = DistSpec::parse(text).unwrap();
            assert_eq!(DistSpec::parse(&d.to_string()).unwrap(), d);
        }
    }

    #[test]
    fn sequential_constant_stream() {
        let spec = GeneratorSpec::sequential(Op::Read, AccessMode::Normal, 65_536, 3);
        let reqs = generate(&spec).unwrap();
        let offsets: Vec<u64> = reqs.iter().map(|r| r.file_offset_bytes).collect();
        assert_eq!(offsets, vec![0, 65_536, 131_072]);
        assert!(reqs.iter().all(|r| r.issue_time_us == 0));
    }

    #[test]
    fn zero_count_is_empty() {
        let spec = GeneratorSpec::sequential(Op::Read, AccessMode::Normal, 65_536, 0);
        assert!(generate(&spec).unwrap().is_empty());
        assert!(generate_with_lifecycle(&spec).unwrap().is_empty());
    }

    #[test]
    fn lifecycle_brackets_the_stream() {
        let spec = GeneratorSpec::sequential(Op::Write, AccessMode::Normal, 4096, 2);
        let reqs = generate_with_lifecycle(&spec).unwrap();
        let ops: Vec<Op> = reqs.iter().map(|r| r.op).collect();
        assert_eq!(ops, vec![Op::Open, Op::Write, Op::Write, Op::Close]);
    }

    #[test]
    fn poisson_sized_stream_is_deterministic() {
        let mut spec = GeneratorSpec::sequential(Op::Read, AccessMode::Normal, 0, 500);
        spec.size_bytes = DistSpec::parse("poisson(128)").unwrap();
        spec.granularity_bytes = 1;
        spec.inter_arrival_us = DistSpec::parse("exponential(100)").unwrap();
        spec.seed = 0xDEAD_BEEF;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed += 1;
        assert_ne!(generate(&spec).unwrap(), a);
    }

    #[test]
    fn invalid_weights() {
        let mut spec = GeneratorSpec::sequential(Op::Read, AccessMode::Normal, 512, 1);
        spec.read_weight = 0.0;
        assert!(generate(&spec).is_err());
        spec.read_weight = -1.0;
        spec.write_weight = 2.0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn merge_is_stable_by_time() {
        let mut a = GeneratorSpec::sequential(Op::Read, AccessMode::Normal, 512, 2);
        a.inter_arrival_us = DistSpec::constant(10.0);
        let mut b = a.clone();
        b.file_id = 1;
        let merged = merge_streams(vec![generate(&a).unwrap(), generate(&b).unwrap()]);
        let ids: Vec<u32> = merged.iter().map(|r| r.file_id).collect();
        assert_eq!(ids, vec![0, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn clamped_draws_stay_inside(seed in any::<u64>(), lo in -1e6f64..1e6, width in 0f64..1e6) {
            let d = DistSpec::new(DistKind::Normal { mean: 0.0, sigma: 1e6 }, Some((lo, lo + width))).unwrap();
            let mut rng = stream_rng(seed, 0);
            for _ in 0..32 {
                let v = d.sample(&mut rng);
                prop_assert!(v >= lo && v <= lo + width);
            }
        }

        #[test]
        fn sequential_addresses_close(seed in any::<u64>(), count in 0usize..200) {
            let mut spec = GeneratorSpec::sequential(Op::Write, AccessMode::Normal, 0, count);
            spec.size_bytes = DistSpec::parse("uniform(0, 300000)").unwrap();
            spec.seed = seed;
            let reqs = generate(&spec).unwrap();
            prop_assert_eq!(reqs.len(), count);
            for w in reqs.windows(2) {
                prop_assert_eq!(w[1].file_offset_bytes, w[0].file_offset_bytes + w[0].length_bytes);
                prop_assert!(w[1].issue_time_us >= w[0].issue_time_us);
            }
            for r in &reqs {
                prop_assert_eq!(r.length_bytes % 512, 0);
            }
        }
    }
}
