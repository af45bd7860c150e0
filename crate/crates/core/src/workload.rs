//! Splay-request workloads: synthetic distributions, trace files and the
//! empirical entropy of their sources and destinations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("request count must be positive")]
    NoRequests,
    #[error("zipf exponent must be positive, got {0}")]
    BadAlpha(f64),
    #[error("poisson rate must be positive, got {0}")]
    BadRate(f64),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: source equals destination")]
    SelfPair { line: usize },
    #[error("line {line}: node {id} outside 1..={n}")]
    UnknownNode { line: usize, id: u32, n: usize },
    #[error("distribution cannot produce a pair with distinct endpoints")]
    Degenerate,
    #[error("unrecognised workload '{0}'")]
    BadSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WorkloadKind {
    Uniform,
    Zipf { alpha: f64 },
    /// Independent source and destination weights per node.
    Product {
        path: Option<PathBuf>,
        src: Vec<(NodeId, f64)>,
        dst: Vec<(NodeId, f64)>,
    },
    Trace { path: PathBuf },
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadKind::Uniform => write!(f, "uniform"),
            WorkloadKind::Zipf { alpha } => write!(f, "zipf:{alpha}"),
            WorkloadKind::Product { path: Some(p), .. } => write!(f, "product:{}", p.display()),
            WorkloadKind::Product { path: None, .. } => write!(f, "product"),
            WorkloadKind::Trace { path } => write!(f, "trace:{}", path.display()),
        }
    }
}

impl FromStr for WorkloadKind {
    type Err = WorkloadError;

    /// `uniform`, `zipf:<alpha>`, `product:<file>` or `trace:<file>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WorkloadError::BadSpec(s.to_string());
        match s.split_once(':') {
            None if s == "uniform" => Ok(WorkloadKind::Uniform),
            Some(("zipf", a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                if !(alpha > 0.0) {
                    return Err(WorkloadError::BadAlpha(alpha));
                }
                Ok(WorkloadKind::Zipf { alpha })
            }
            Some(("product", p)) if !p.is_empty() => load_product(Path::new(p)),
            Some(("trace", p)) if !p.is_empty() => Ok(WorkloadKind::Trace { path: p.into() }),
            _ => Err(bad()),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arrival {
    AllAtOnce,
    Poisson { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Requests per super-round (ignored for traces).
    pub m: usize,
    pub arrival: Arrival,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, m: usize) -> Self {
        WorkloadSpec {
            kind,
            m,
            arrival: Arrival::AllAtOnce,
        }
    }

    pub fn uniform(m: usize) -> Self {
        WorkloadSpec::new(WorkloadKind::Uniform, m)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub src: NodeId,
    pub dst: NodeId,
    pub arrival: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestSet {
    pub requests: Vec<Request>,
    pub src_freq: BTreeMap<NodeId, f64>,
    pub dst_freq: BTreeMap<NodeId, f64>,
}

impl RequestSet {
    pub fn from_requests(requests: Vec<Request>) -> Self {
        let m = requests.len() as f64;
        let mut src_count: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut dst_count: BTreeMap<NodeId, usize> = BTreeMap::new();
        for r in &requests {
            *src_count.entry(r.src).or_default() += 1;
            *dst_count.entry(r.dst).or_default() += 1;
        }
        let freq = |c: BTreeMap<NodeId, usize>| c.into_iter().map(|(k, v)| (k, v as f64 / m)).collect();
        let (src_freq, dst_freq) = (freq(src_count), freq(dst_count));
        RequestSet {
            requests,
            src_freq,
            dst_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

/// Rank sampler for Zipf-distributed node popularity: rank `k` maps to a
/// node through a seeded permutation.
struct Popularity {
    zipf: Zipf<f64>,
    order: Vec<NodeId>,
}

impl Popularity {
    fn new(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self, WorkloadError> {
        let zipf = Zipf::new(n as f64, alpha).map_err(|_| WorkloadError::BadAlpha(alpha))?;
        let mut order: Vec<NodeId> = (1..=n as u32).map(NodeId).collect();
        order.shuffle(rng);
        Ok(Popularity { zipf, order })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> NodeId {
        let k = self.zipf.sample(rng) as usize;
        self.order[k.clamp(1, self.order.len()) - 1]
    }
}

const MAX_REDRAWS: usize = 10_000;

/// Draw `m` pairs according to `spec`. Sources follow their marginal exactly;
/// destinations are redrawn until they differ from the source.
pub fn generate(spec: &WorkloadSpec, n: usize, seed: u64) -> Result<RequestSet, WorkloadError> {
    if n < 2 {
        return Err(WorkloadError::TooFewNodes(n));
    }
    if let WorkloadKind::Trace { path } = &spec.kind {
        return load_trace(path, n);
    }
    if spec.m == 0 {
        return Err(WorkloadError::NoRequests);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(spec.m);
    match &spec.kind {
        WorkloadKind::Uniform => {
            for _ in 0..spec.m {
                let s = rng.random_range(1..=n as u32);
                let mut d = rng.random_range(1..n as u32);
                if d >= s {
                    d += 1;
                }
                pairs.push((NodeId(s), NodeId(d)));
            }
        }
        WorkloadKind::Zipf { alpha } => {
            if !(*alpha > 0.0) {
                return Err(WorkloadError::BadAlpha(*alpha));
            }
            let pop = Popularity::new(n, *alpha, &mut rng)?;
            for _ in 0..spec.m {
                let s = pop.sample(&mut rng);
                let d = redraw(s, &mut rng, |r| pop.sample(r))?;
                pairs.push((s, d));
            }
        }
        WorkloadKind::Product { src, dst, .. } => {
            let (sn, sd) = weighted(src, n)?;
            let (dn, dd) = weighted(dst, n)?;
            for _ in 0..spec.m {
                let s = sn[sd.sample(&mut rng)];
                let d = redraw(s, &mut rng, |r| dn[dd.sample(r)])?;
                pairs.push((s, d));
            }
        }
        WorkloadKind::Trace { .. } => unreachable!("handled above"),
    }
    let arrivals = arrivals(spec.arrival, spec.m, &mut rng)?;
    let requests = pairs
        .into_iter()
        .zip(arrivals)
        .map(|((src, dst), arrival)| Request { src, dst, arrival })
        .collect();
    Ok(RequestSet::from_requests(requests))
}

fn redraw(
    s: NodeId,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> NodeId,
) -> Result<NodeId, WorkloadError> {
    for _ in 0..MAX_REDRAWS {
        let d = draw(rng);
        if d != s {
            return Ok(d);
        }
    }
    Err(WorkloadError::Degenerate)
}

fn weighted(w: &[(NodeId, f64)], n: usize) -> Result<(Vec<NodeId>, WeightedIndex<f64>), WorkloadError> {
    let kept: Vec<(NodeId, f64)> = w
        .iter()
        .copied()
        .filter(|&(id, x)| x > 0.0 && id.0 >= 1 && id.0 as usize <= n)
        .collect();
    let dist = WeightedIndex::new(kept.iter().map(|p| p.1)).map_err(|_| WorkloadError::Degenerate)?;
    Ok((kept.into_iter().map(|p| p.0).collect(), dist))
}

fn arrivals(a: Arrival, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u64>, WorkloadError> {
    match a {
        Arrival::AllAtOnce => Ok(vec![0; m]),
        Arrival::Poisson { rate } => {
            let exp = Exp::new(rate).map_err(|_| WorkloadError::BadRate(rate))?;
            let mut t = 0.0;
            Ok((0..m)
                .map(|_| {
                    t += exp.sample(rng);
                    t.floor() as u64
                })
                .collect())
        }
    }
}

fn read(path: &Path) -> Result<String, WorkloadError> {
    std::fs::read_to_string(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Meaningful lines with their 1-based numbers.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split(',').map(str::trim).collect()))
    })
}

fn node(field: &str, line: usize, n: usize) -> Result<NodeId, WorkloadError> {
    let id: u32 = field.parse().map_err(|_| WorkloadError::Parse {
        line,
        msg: format!("bad node id '{field}'"),
    })?;
    if id == 0 || id as usize > n {
        return Err(WorkloadError::UnknownNode { line, id, n });
    }
    Ok(NodeId(id))
}

pub fn load_trace(path: &Path, n: usize) -> Result<RequestSet, WorkloadError> {
    parse_trace(&read(path)?, n)
}

/// Parse `src,dst[,arrival_slot]` rows; `#` starts a comment line.
pub fn parse_trace(text: &str, n: usize) -> Result<RequestSet, WorkloadError> {
    let mut requests = Vec::new();
    for (line, f) in rows(text) {
        if f.len() < 2 || f.len() > 3 {
            return Err(WorkloadError::Parse {
                line,
                msg: format!("expected 2 or 3 fields, got {}", f.len()),
            });
        }
        let src = node(f[0], line, n)?;
        let dst = node(f[1], line, n)?;
        if src == dst {
            return Err(WorkloadError::SelfPair { line });
        }
        let arrival = match f.get(2) {
            Some(a) => a.parse().map_err(|_| WorkloadError::Parse {
                line,
                msg: format!("bad arrival '{a}'"),
            })?,
            None => 0,
        };
        requests.push(Request { src, dst, arrival });
    }
    if requests.is_empty() {
        return Err(WorkloadError::NoRequests);
    }
    Ok(RequestSet::from_requests(requests))
}

/// Read `node,src_weight,dst_weight` rows into a product distribution.
pub fn load_product(path: &Path) -> Result<WorkloadKind, WorkloadError> {
    let text = read(path)?;
    let mut kind = parse_product(&text)?;
    if let WorkloadKind::Product { path: p, .. } = &mut kind {
        *p = Some(path.to_path_buf());
    }
    Ok(kind)
}

pub fn parse_product(text: &str) -> Result<WorkloadKind, WorkloadError> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (line, f) in rows(text) {
        if f.len() != 3 {
            return Err(WorkloadError::Parse {
                line,
                msg: format!("expected 3 fields, got {}", f.len()),
            });
        }
        let id = node(f[0], line, u32::MAX as usize)?;
        let w = |s: &str| -> Result<f64, WorkloadError> {
            s.parse::<f64>()
                .ok()
                .filter(|x| *x >= 0.0 && x.is_finite())
                .ok_or(WorkloadError::Parse {
                    line,
                    msg: format!("bad weight '{s}'"),
                })
        };
        src.push((id, w(f[1])?));
        dst.push((id, w(f[2])?));
    }
    Ok(WorkloadKind::Product {
        path: None,
        src,
        dst,
    })
}

fn entropy<'a>(freqs: impl Iterator<Item = &'a f64>) -> f64 {
    freqs.filter(|&&f| f > 0.0).map(|&f| f * (1.0 / f).log2()).sum()
}

/// Shannon entropies in bits of the source and destination frequencies.
pub fn empirical_entropy(rs: &RequestSet) -> (f64, f64) {
    (entropy(rs.src_freq.values()), entropy(rs.dst_freq.values()))
}
