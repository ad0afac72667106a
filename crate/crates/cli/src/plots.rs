//! Turns a finished run directory into long-format CSV bundles for plotting.
//!
//! Bundles go to `<run>/plots/`:
//!
//! * `loss_curves.csv`: `series,iteration,loss`, where `series` joins the
//!   identifying columns of the run's `loss.csv` (e.g. `s0=90/run=0`).
//! * `boundaries.csv`: `source,time,coords,F` with simplex coordinates joined
//!   by `;` (empty for the one-dimensional put).
//! * `hedge_traces.csv`: `strike,wealth,path_id,time,S_t,X_t,pi_t`, where
//!   `wealth` is `full` or `half` of the learned price.
//! * `table.csv`: the run's summary table, copied unchanged.
//! * `index.json`: the files above with their columns.
//!
//! Everything is assembled in a temporary directory and moved into place at
//! the end, so a failure never leaves a partial bundle behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::CliError;
use crate::run::{RunManifest, MANIFEST};

fn missing(msg: String) -> CliError {
    CliError::Artifacts(msg)
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| missing(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

/// Writes the plot bundles for the run in `run_dir` and returns their paths.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let manifest_path = run_dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(missing(format!("no run artifacts in {}: {MANIFEST} not found", run_dir.display())));
    }
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| missing(format!("unreadable {MANIFEST}: {e}")))?;
    let absent: Vec<&String> = manifest.outputs.iter().filter(|f| !run_dir.join(f).is_file()).collect();
    if !absent.is_empty() {
        return Err(missing(format!("run artifacts missing from {}: {absent:?}", run_dir.display())));
    }

    let mut bundles: Vec<(&str, Vec<String>, String)> = Vec::new();
    let has = |name: &str| manifest.outputs.iter().any(|f| f == name);

    if has("loss.csv") {
        let (header, rows) = read_rows(&run_dir.join("loss.csv"))?;
        let keys = header.len() - 2;
        let mut out = String::from("series,iteration,loss\n");
        for row in rows {
            let series: Vec<String> = (0..keys).map(|k| format!("{}={}", header[k], row[k])).collect();
            out += &format!("{},{},{}\n", series.join("/"), row[keys], row[keys + 1]);
        }
        bundles.push(("loss_curves.csv", cols(&["series", "iteration", "loss"]), out));
    }

    let boundary_files: Vec<&String> = manifest
        .outputs
        .iter()
        .filter(|f| f.ends_with(".csv") && (f.starts_with("boundary") || f.starts_with("fd_boundary")))
        .collect();
    if !boundary_files.is_empty() {
        let mut out = String::from("source,time,coords,F\n");
        for name in boundary_files {
            let (header, rows) = read_rows(&run_dir.join(name))?;
            let last = header.len() - 1;
            let source = name.trim_end_matches(".csv");
            for row in rows {
                out += &format!("{source},{},{},{}\n", row[0], row[1..last].join(";"), row[last]);
            }
        }
        bundles.push(("boundaries.csv", cols(&["source", "time", "coords", "F"]), out));
    }

    let traces: Vec<&String> = manifest.outputs.iter().filter(|f| f.starts_with("trace_K")).collect();
    if !traces.is_empty() {
        let mut out = String::from("strike,wealth,path_id,time,S_t,X_t,pi_t\n");
        for name in traces {
            let stem = name.trim_start_matches("trace_K").trim_end_matches(".csv");
            let (strike, wealth) = stem
                .rsplit_once('_')
                .ok_or_else(|| missing(format!("unexpected trace file name {name}")))?;
            let (_, rows) = read_rows(&run_dir.join(name))?;
            for row in rows {
                out += &format!("{strike},{wealth},{}\n", row.join(","));
            }
        }
        bundles.push((
            "hedge_traces.csv",
            cols(&["strike", "wealth", "path_id", "time", "S_t", "X_t", "pi_t"]),
            out,
        ));
    }

    for table in ["summary.csv", "table.csv"] {
        if has(table) {
            let text = fs::read_to_string(run_dir.join(table))?;
            let columns = text.lines().next().unwrap_or_default().split(',').map(str::to_string).collect();
            bundles.push(("table.csv", columns, text));
            break;
        }
    }

    if bundles.is_empty() {
        return Err(missing(format!("run in {} has no plottable artifacts", run_dir.display())));
    }

    let staging = tempfile::Builder::new().prefix(".plots-").tempdir_in(run_dir)?;
    let mut index = Vec::new();
    for (name, columns, body) in &bundles {
        fs::write(staging.path().join(name), body)?;
        index.push(json!({ "file": name, "columns": columns }));
    }
    fs::write(
        staging.path().join("index.json"),
        serde_json::to_string_pretty(&json!({ "experiment": manifest.experiment, "config_hash": manifest.config_hash, "files": index }))? + "\n",
    )?;
    let target = run_dir.join("plots");
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    fs::rename(staging.keep(), &target)?;
    let mut written: Vec<PathBuf> = bundles.iter().map(|b| target.join(b.0)).collect();
    written.push(target.join("index.json"));
    Ok(written)
}
