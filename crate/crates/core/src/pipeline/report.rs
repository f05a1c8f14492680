use std::fmt::Write as _;
use std::path::Path;

use crate::artifacts::read_json;
use crate::error::{io_err, Error, Result};
use crate::evaluation::ComparisonReport;

const HEADERS: [&str; 5] = ["Method", "Top-1 before→after", "Mem.Red.%", "Param.Red.%", "Speed-up"];

/// Comparison reports of a run directory, ordered by file name.
pub fn load_comparisons(run_dir: &Path) -> Result<Vec<(String, ComparisonReport)>> {
    let mut names: Vec<String> = std::fs::read_dir(run_dir)
        .map_err(io_err(run_dir))?
        .flatten()
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("compare_") && n.ends_with(".json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| Ok((n.clone(), read_json::<ComparisonReport>(&run_dir.join(&n))?)))
        .collect()
}

/// Fixed-width table of every comparison in the run.
pub fn render_report(run_dir: &Path) -> Result<String> {
    let comparisons = load_comparisons(run_dir)?;
    if comparisons.is_empty() {
        return Err(Error::MissingArtifacts(format!("no compare_*.json in {}", run_dir.display())));
    }
    let rows: Vec<[String; 5]> = comparisons
        .iter()
        .map(|(_, c)| {
            [
                c.method.clone(),
                format!("{:.1} → {:.1}", 100.0 * c.accuracy_before, 100.0 * c.accuracy_after),
                format!("{:.1}", c.mem_reduction_pct),
                format!("{:.1}", c.param_reduction_pct),
                format!("{:.2}x", c.speedup),
            ]
        })
        .collect();
    let mut widths = HEADERS.map(|h| h.chars().count());
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            if i > 0 {
                s.push_str(" | ");
            }
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let first = comparisons[0].1.clone();
    let mut out = String::new();
    let _ = writeln!(out, "dataset: {}  samples: {}  seed: {}", first.dataset_id, first.n_samples, first.seed);
    let _ = writeln!(out, "{}", line(&HEADERS.map(String::from)));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r));
    }
    Ok(out)
}
