//! Result emission.
//!
//! CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `n`, `m` | nodes, issued splays |
//! | `workload`, `seed` | workload spec and run seed (empty on aggregate rows) |
//! | `rotations`, `rounds`, `timeslots` | totals for the run |
//! | `h_src`, `h_dst` | empirical source / destination entropies |
//! | `d` | largest per-splay cost in cyber-dollars |
//! | `rotations_per_m`, `rounds_per_m`, `timeslots_per_m` | totals divided by `m` |
//! | `ratio_log_n` | rotations / (m log₂ n) |
//! | `ratio_entropy` | rotations / (m (h_src + h_dst) + 1) |
//! | `ratio_slots` | timeslots / (m log₂ n log₂(m+1)) |
//! | `round_p95` | 95th-percentile round length in slots |
//! | `max_buffer` | largest buffer seen |
//! | `loop_violations` | windowed-progress violations |
//! | `termination` | `completed`, `timeout` or `detector_fired` |
//! | `agg` | empty for runs, `mean` for a cell's aggregate row |

use std::io::Write;

use serde::Serialize;
use splaynet::analysis::Report;

pub const CSV_COLUMNS: [&str; 21] = [
    "n",
    "m",
    "workload",
    "seed",
    "rotations",
    "rounds",
    "timeslots",
    "h_src",
    "h_dst",
    "d",
    "rotations_per_m",
    "rounds_per_m",
    "timeslots_per_m",
    "ratio_log_n",
    "ratio_entropy",
    "ratio_slots",
    "round_p95",
    "max_buffer",
    "loop_violations",
    "termination",
    "agg",
];

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn numbers(r: &Report) -> [f64; 15] {
    [
        r.rotations as f64,
        r.rounds as f64,
        r.timeslots as f64,
        r.h_src,
        r.h_dst,
        r.max_splay_cost as f64,
        r.rotations_per_m,
        r.rounds_per_m,
        r.timeslots_per_m,
        r.ratio_log_n,
        r.ratio_entropy,
        r.ratio_slots,
        r.round_length.p95 as f64,
        r.max_buffer_len as f64,
        r.loop_violations as f64,
    ]
}

/// One CSV row for a run.
pub fn csv_row(r: &Report) -> Vec<String> {
    let mut row = vec![r.n.to_string(), r.m.to_string(), r.workload.clone(), r.seed.to_string()];
    let nums = numbers(r);
    for (i, x) in nums.iter().enumerate() {
        // Counts print as integers, the rest with fixed precision.
        let integral = matches!(i, 0 | 1 | 2 | 5 | 12 | 13 | 14);
        row.push(if integral { format!("{x:.0}") } else { f(*x) });
    }
    row.push(r.termination.clone());
    row.push(String::new());
    row
}

/// Column-wise mean of a cell, flagged `agg=mean`.
pub fn mean_row(cell: &[Report]) -> Option<Vec<String>> {
    let first = cell.first()?;
    let k = cell.len() as f64;
    let mut sums = [0.0; 15];
    for r in cell {
        for (s, x) in sums.iter_mut().zip(numbers(r)) {
            *s += x;
        }
    }
    let completed = cell.iter().filter(|r| r.termination == "completed").count();
    let mut row = vec![first.n.to_string(), first.m.to_string(), first.workload.clone(), String::new()];
    row.extend(sums.iter().map(|s| f(s / k)));
    row.push(format!("{completed}/{} completed", cell.len()));
    row.push("mean".into());
    Some(row)
}

/// Header, then each cell's rows; cells with more than one run get a mean row.
pub fn write_csv<W: Write>(w: W, cells: &[Vec<Report>]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for cell in cells {
        for r in cell {
            out.write_record(csv_row(r))?;
        }
        if cell.len() > 1 {
            if let Some(row) = mean_row(cell) {
                out.write_record(row)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(mut w: W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
}
