//! Run summarization: transition step, final errors and measures, and
//! intervention deltas, printed and written as `summary.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use indlab::measures::MeasureReport;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub run_dir: String,
    /// First step with `ood_err < 0.2`; absent when the run never crossed it.
    pub transition_step: Option<u64>,
    /// First step with `submatch_max > 0.8`.
    pub submatch_step: Option<u64>,
    pub final_report: MeasureReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interventions: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_sweep: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spiked_oracle: Option<serde_json::Value>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MeasureReport>, CliError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h.trim() == indlab::measures::CSV_HEADER => {}
        other => {
            return Err(CliError::Other(format!(
                "unexpected metrics header {:?} in {}",
                other,
                path.display()
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| MeasureReport::parse_csv(l).map_err(|e| CliError::Other(e.to_string())))
        .collect()
}

fn read_optional_json(path: &Path) -> Option<serde_json::Value> {
    std::fs::read_to_string(path).ok().and_then(|s| serde_json::from_str(&s).ok())
}

/// Builds the summary for a completed (or partial) run directory, writes
/// `summary.json`, and returns it. Missing artifacts are reported explicitly.
pub fn summarize(run_dir: &Path) -> Result<Summary, CliError> {
    let metrics_path = run_dir.join("metrics.csv");
    let mut missing = Vec::new();
    if !metrics_path.exists() {
        missing.push("metrics.csv");
    }
    if !run_dir.join("config.json").exists() {
        missing.push("config.json");
    }
    if !missing.is_empty() {
        // A pool sweep keeps per-pool metrics in subdirectories; fall back to
        // the sweep table if present.
        if run_dir.join("pool_sweep.json").exists() {
            return summarize_sweep_only(run_dir);
        }
        return Err(CliError::Other(format!(
            "missing artifacts in {}: {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    let reports = read_metrics(&metrics_path)?;
    let final_report = reports
        .last()
        .cloned()
        .ok_or_else(|| CliError::Other("metrics.csv contains no rows".into()))?;
    let transition_step =
        reports.iter().find(|r| r.ood_err < 0.2).map(|r| r.step);
    let submatch_step = reports.iter().find(|r| r.submatch_max > 0.8).map(|r| r.step);
    let summary = Summary {
        run_dir: run_dir.display().to_string(),
        transition_step,
        submatch_step,
        final_report,
        interventions: read_optional_json(&run_dir.join("interventions/summary.json")),
        pool_sweep: read_optional_json(&run_dir.join("pool_sweep.json")),
        spiked_oracle: read_optional_json(&run_dir.join("spiked_oracle.json")),
    };
    std::fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn summarize_sweep_only(run_dir: &Path) -> Result<Summary, CliError> {
    let pool = read_optional_json(&run_dir.join("pool_sweep.json"))
        .ok_or_else(|| CliError::Other("unreadable pool_sweep.json".into()))?;
    // Use the largest pool's metrics as the headline series.
    let mut best: Option<(usize, Vec<MeasureReport>)> = None;
    for entry in std::fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(size) = name.strip_prefix("pool-").and_then(|s| s.parse::<usize>().ok()) {
            let metrics = read_metrics(&path.join("metrics.csv"))?;
            if best.as_ref().map(|(s, _)| size > *s).unwrap_or(true) {
                best = Some((size, metrics));
            }
        }
    }
    let (_, reports) =
        best.ok_or_else(|| CliError::Other("no pool-<S> subdirectories found".into()))?;
    let final_report = reports
        .last()
        .cloned()
        .ok_or_else(|| CliError::Other("empty pool metrics".into()))?;
    let summary = Summary {
        run_dir: run_dir.display().to_string(),
        transition_step: reports.iter().find(|r| r.ood_err < 0.2).map(|r| r.step),
        submatch_step: reports.iter().find(|r| r.submatch_max > 0.8).map(|r| r.step),
        final_report,
        interventions: None,
        pool_sweep: Some(pool),
        spiked_oracle: None,
    };
    std::fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

pub fn print_summary(s: &Summary) {
    println!("run: {}", s.run_dir);
    match s.transition_step {
        Some(step) => println!("transition step (first ood_err < 0.2): {step}"),
        None => println!("transition step (first ood_err < 0.2): none"),
    }
    match s.submatch_step {
        Some(step) => println!("subspace-matching step (first submatch_max > 0.8): {step}"),
        None => println!("subspace-matching step (first submatch_max > 0.8): none"),
    }
    let f = &s.final_report;
    println!(
        "final (step {}): train_loss {:.4} id_err {:.4} ood_err {:.4}",
        f.step, f.train_loss, f.id_err, f.ood_err
    );
    println!(
        "final measures: diag {:.3} submatch_max {:.3} submatch_avg {:.3} pth {:.3} ih {:.3} token_match {:.3}",
        f.diag_score, f.submatch_max, f.submatch_avg, f.pth_score, f.ih_score, f.token_match_ratio
    );
    if let Some(iv) = &s.interventions {
        println!("interventions: {}", serde_json::to_string(iv).unwrap_or_default());
    }
    if let Some(p) = &s.pool_sweep {
        println!("pool sweep: {}", serde_json::to_string(p).unwrap_or_default());
    }
}
