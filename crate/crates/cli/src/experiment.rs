use std::str::FromStr;

use rayon::prelude::*;
use splaynet::oracle::parallel_reference_splay;
use splaynet::simulator::{run, RunResult, SimConfig, SimError, SimOptions, Simulator, Termination};
use splaynet::workload::Request;
use splaynet::{NodeId, Tree};

/// One configuration repeated over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub config: SimConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentSpec {
    pub cells: Vec<Cell>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("experiment has no cells")]
    Empty,
    #[error("cell {0} has no seeds")]
    NoSeeds(usize),
    #[error("cells {0} and {1} are identical")]
    Duplicate(usize, usize),
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.cells.is_empty() {
            return Err(SpecError::Empty);
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.seeds.is_empty() {
                return Err(SpecError::NoSeeds(i));
            }
            if let Some(j) = self.cells[..i].iter().position(|d| d == c) {
                return Err(SpecError::Duplicate(j, i));
            }
        }
        Ok(())
    }

    /// Runs every (cell, seed); results keep cell and seed order.
    pub fn run(&self) -> Result<Vec<Vec<RunResult>>, SimError> {
        let jobs: Vec<(usize, SimConfig)> = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                c.seeds.iter().map(move |&seed| {
                    let mut cfg = c.config.clone();
                    cfg.seed = seed;
                    (i, cfg)
                })
            })
            .collect();
        let results: Vec<(usize, RunResult)> = jobs
            .into_par_iter()
            .map(|(i, cfg)| run(&cfg).map(|r| (i, r)))
            .collect::<Result<_, _>>()?;
        let mut cells: Vec<Vec<RunResult>> = vec![Vec::new(); self.cells.len()];
        for (i, r) in results {
            cells[i].push(r);
        }
        Ok(cells)
    }
}

/// Comma-separated values.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| format!("invalid value '{x}'")))
        .collect::<Result<Vec<T>, String>>()
        .and_then(|v| if v.is_empty() { Err("empty list".into()) } else { Ok(v) })
}

/// `a..b` (inclusive), a comma list, or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| format!("invalid seed range '{s}'"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("invalid seed range '{s}'"))?;
            if a > b {
                return Err(format!("empty seed range '{s}'"));
            }
            Ok((a..=b).collect())
        }
        None => parse_list(s),
    }
}

/// Compares a lone splay in lockstep rounds against the parallel reference:
/// final topology and cyber-dollars must agree.
pub fn verify_pair(t: &Tree, s: NodeId, d: NodeId) -> Result<(), String> {
    let mut opts = SimOptions::new(100_000);
    opts.lockstep = true;
    let req = Request { src: s, dst: d, arrival: 0 };
    let mut sim = Simulator::new(t.clone(), vec![vec![req]], opts).map_err(|e| e.to_string())?;
    let term = sim.run_to_end();
    if term != Termination::Completed {
        return Err(format!("({s},{d}) did not complete: {term:?}"));
    }
    let (expected, trace) = parallel_reference_splay(t, s, d).map_err(|e| e.to_string())?;
    if sim.tree().link_table() != expected.link_table() {
        return Err(format!("({s},{d}) final topology differs"));
    }
    let dollars: u64 = sim.rotations().iter().map(|r| r.cost).sum();
    if dollars != trace.dollars {
        return Err(format!("({s},{d}) cost {dollars} vs reference {}", trace.dollars));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub pairs: usize,
    pub passed: usize,
    pub failures: Vec<String>,
}

pub fn verify_pairs(t: &Tree, pairs: &[(NodeId, NodeId)]) -> VerifyOutcome {
    let results: Vec<Result<(), String>> = pairs.par_iter().map(|&(s, d)| verify_pair(t, s, d)).collect();
    let mut out = VerifyOutcome {
        pairs: pairs.len(),
        ..Default::default()
    };
    for r in results {
        match r {
            Ok(()) => out.passed += 1,
            Err(e) => out.failures.push(e),
        }
    }
    out
}

/// Every ordered pair of distinct ids in `1..=n`.
pub fn all_pairs(n: usize) -> Vec<(NodeId, NodeId)> {
    let ids = 1..=n as u32;
    ids.clone()
        .flat_map(|s| ids.clone().filter(move |&d| d != s).map(move |d| (NodeId(s), NodeId(d))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use splaynet::workload::WorkloadSpec;

    #[test]
    fn exhaustive_pairs_on_seven() {
        let pairs = all_pairs(7);
        assert_eq!(pairs.len(), 42);
        let out = verify_pairs(&Tree::balanced(7).unwrap(), &pairs);
        assert_eq!(out.passed, 42, "{:?}", out.failures);
    }

    #[test]
    fn seeds() {
        assert_eq!(parse_seeds("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("3, 1").unwrap(), vec![3, 1]);
        assert!(parse_seeds("4..1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_list::<usize>("").is_err());
    }

    #[test]
    fn validation() {
        let c = Cell {
            config: SimConfig::new(8, WorkloadSpec::uniform(2), 0),
            seeds: vec![1],
        };
        assert_eq!(ExperimentSpec::default().validate(), Err(SpecError::Empty));
        let spec = ExperimentSpec {
            cells: vec![c.clone(), c.clone()],
        };
        assert_eq!(spec.validate(), Err(SpecError::Duplicate(0, 1)));
        let spec = ExperimentSpec {
            cells: vec![Cell { seeds: vec![], ..c }],
        };
        assert_eq!(spec.validate(), Err(SpecError::NoSeeds(0)));
    }

    #[test]
    fn results_keep_seed_order() {
        let spec = ExperimentSpec {
            cells: vec![Cell {
                config: SimConfig::new(16, WorkloadSpec::uniform(3), 0),
                seeds: vec![5, 2, 9],
            }],
        };
        let out = spec.run().unwrap();
        let seeds: Vec<u64> = out[0].iter().map(|r| r.config.seed).collect();
        assert_eq!(seeds, vec![5, 2, 9]);
    }
}
