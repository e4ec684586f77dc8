//! Plot-ready CSV output for one selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use anyhow::{Context, Result};
use funnel_select::SelectionOutcome;

/// Writes `<stem>_trajectory.csv` (the selected path) and
/// `<stem>_diameter.csv` (one row per reduction stage) and returns both
/// paths.
pub fn emit_plot_data(outcome: &SelectionOutcome, stem: &FsPath) -> Result<(PathBuf, PathBuf)> {
    let name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .context("plot stem needs a file name")?;
    let trajectory = stem.with_file_name(format!("{name}_trajectory.csv"));
    let diameter = stem.with_file_name(format!("{name}_diameter.csv"));
    fs::write(&trajectory, outcome.selected.to_csv()).with_context(|| format!("writing {}", trajectory.display()))?;
    let mut text = String::from("stage,n,lambda,survivors,diameter\n");
    for (i, s) in outcome.trace.stages.iter().enumerate() {
        writeln!(
            text,
            "{},{},{},{},{}",
            i + 1,
            s.n,
            s.functional.lambda,
            s.survivors,
            s.diameter
        )?;
    }
    fs::write(&diameter, text).with_context(|| format!("writing {}", diameter.display()))?;
    Ok((trajectory, diameter))
}
