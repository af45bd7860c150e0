//! Experiment driver for the SplayNet simulator.

pub mod experiment;
pub mod output;

pub use experiment::{all_pairs, parse_list, parse_seeds, verify_pair, verify_pairs, Cell, ExperimentSpec, VerifyOutcome};
