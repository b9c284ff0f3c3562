//! Report persistence and the stdout summary. Every file is written through
//! a temp-then-rename so a crash never leaves a half-written artifact, and
//! all formatting is fixed-width so reruns with the same inputs are
//! byte-identical.

use std::path::{Path, PathBuf};

use super::experiment::ExperimentOutcome;
use super::stats::Correlation;
use super::{HarnessResult, RobustnessRecord};
use crate::metrics::MeasurementRecord;

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> HarnessResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn measurements_csv(records: &[&MeasurementRecord]) -> String {
    let mut out = String::from(MeasurementRecord::csv_header());
    out.push('\n');
    for rec in records {
        out.push_str(&rec.to_csv_row());
        out.push('\n');
    }
    out
}

/// One column per attack label, in suite order.
pub fn robustness_csv(records: &[&RobustnessRecord]) -> String {
    let labels: Vec<String> = records
        .first()
        .map(|r| r.per_attack.iter().map(|a| a.label.clone()).collect())
        .unwrap_or_default();
    let mut out = String::from("model,dataset,n,clean_acc");
    for l in &labels {
        out.push(',');
        out.push_str(l);
    }
    out.push_str(",mean_adv_acc,delta_abs,delta_rel\n");
    for rec in records {
        out.push_str(&format!("{},{},{},{:.6}", rec.model, rec.dataset, rec.n, rec.clean_acc));
        for a in &rec.per_attack {
            out.push_str(&format!(",{:.6}", a.accuracy));
        }
        out.push_str(&format!(
            ",{:.6},{:.6},{:.6}\n",
            rec.mean_adv_acc, rec.delta_abs, rec.delta_rel
        ));
    }
    out
}

/// p-values print to four decimals; anything smaller than 1e-4 prints as
/// the flag value "<.0001".
pub fn format_p(p: f64) -> String {
    if p < 1e-4 {
        "<.0001".to_string()
    } else {
        format!("{p:.4}")
    }
}

pub fn correlations_csv(correlations: &[Correlation]) -> String {
    let mut out = String::from("measurement,target,n,r,p\n");
    for c in correlations {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            c.measurement,
            c.target,
            c.n,
            c.r,
            format_p(c.p)
        ));
    }
    out
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrackingRow {
    pub model: String,
    pub dataset: String,
    pub epoch: usize,
    pub m1: f64,
    pub clean_acc: f64,
    pub pgd40_acc: f64,
}

pub fn tracking_csv(rows: &[TrackingRow]) -> String {
    let mut out = String::from("model,dataset,epoch,m1,clean_acc,pgd40_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.model, r.dataset, r.epoch, r.m1, r.clean_acc, r.pgd40_acc
        ));
    }
    out
}

fn tracking_rows(outcome: &ExperimentOutcome) -> Vec<TrackingRow> {
    let mut rows = Vec::new();
    for cell in &outcome.cells {
        for rec in &cell.epoch_log {
            if let (Some(m1), Some(adv)) = (rec.m1, rec.adv_acc) {
                rows.push(TrackingRow {
                    model: cell.model.clone(),
                    dataset: cell.dataset.clone(),
                    epoch: rec.epoch,
                    m1,
                    clean_acc: rec.val_acc,
                    pgd40_acc: adv,
                });
            }
        }
    }
    rows
}

/// Writes every artifact into `dir` and returns the paths: the three main
/// CSVs, the tracking series, the full JSON record, and one JSON per cell.
pub fn write_reports(outcome: &ExperimentOutcome, dir: &Path) -> HarnessResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> HarnessResult<()> {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };

    let meas: Vec<&MeasurementRecord> = outcome.cells.iter().map(|c| &c.measurements).collect();
    emit("measurements.csv", measurements_csv(&meas))?;

    let robust: Vec<&RobustnessRecord> =
        outcome.cells.iter().filter_map(|c| c.robustness.as_ref()).collect();
    emit("robustness.csv", robustness_csv(&robust))?;

    emit("correlations.csv", correlations_csv(&outcome.correlations))?;
    emit("tracking.csv", tracking_csv(&tracking_rows(outcome)))?;

    let json = serde_json::to_string_pretty(outcome).expect("outcome serializes");
    emit("experiment.json", json + "\n")?;

    for cell in &outcome.cells {
        let name = format!("cells/{}-{}.json", cell.dataset, cell.model);
        let json = serde_json::to_string_pretty(cell).expect("cell serializes");
        emit(&name, json + "\n")?;
    }
    Ok(written)
}

/// Human-readable run summary. Within each dataset, `*` marks the best
/// clean accuracy, the best mean attacked accuracy, and the smallest
/// relative drop; in the correlation grid it marks cells significant at
/// the 0.05 level.
pub fn summary_tables(outcome: &ExperimentOutcome) -> String {
    let mut out = String::new();

    out.push_str("measurements\n");
    out.push_str(&format!(
        "  {:<12} {:<10} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "model", "dataset", "n", "m1", "m2", "m3", "m4", "m5"
    ));
    for c in &outcome.cells {
        let m = &c.measurements;
        out.push_str(&format!(
            "  {:<12} {:<10} {:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
            m.model, m.dataset, m.n, m.m1, m.m2, m.m3, m.m4, m.m5
        ));
    }

    let robust: Vec<&RobustnessRecord> =
        outcome.cells.iter().filter_map(|c| c.robustness.as_ref()).collect();
    if !robust.is_empty() {
        let best_clean =
            robust.iter().map(|r| r.clean_acc).fold(f64::NEG_INFINITY, f64::max);
        let best_adv =
            robust.iter().map(|r| r.mean_adv_acc).fold(f64::NEG_INFINITY, f64::max);
        let best_rel = robust.iter().map(|r| r.delta_rel).fold(f64::INFINITY, f64::min);
        let mark = |hit: bool| if hit { "*" } else { " " };
        out.push_str("\nrobustness\n");
        out.push_str(&format!(
            "  {:<12} {:<10} {:>6} {:>9} {:>9} {:>10}\n",
            "model", "dataset", "n", "clean", "mean_adv", "delta_rel"
        ));
        for r in &robust {
            out.push_str(&format!(
                "  {:<12} {:<10} {:>6} {:>8.3}{} {:>8.3}{} {:>9.3}{}\n",
                r.model,
                r.dataset,
                r.n,
                r.clean_acc,
                mark(r.clean_acc == best_clean),
                r.mean_adv_acc,
                mark(r.mean_adv_acc == best_adv),
                r.delta_rel,
                mark(r.delta_rel == best_rel),
            ));
        }
    }

    if !outcome.correlations.is_empty() {
        let n = outcome.correlations[0].n;
        out.push_str(&format!("\ncorrelations (n={n}, * significant at 0.05)\n"));
        let targets: Vec<&str> = {
            let mut seen = Vec::new();
            for c in &outcome.correlations {
                if !seen.contains(&c.target.as_str()) {
                    seen.push(c.target.as_str());
                }
            }
            seen
        };
        out.push_str(&format!("  {:<14}", "target"));
        for m in super::MEASUREMENT_NAMES {
            out.push_str(&format!(" {m:>17}"));
        }
        out.push('\n');
        for t in targets {
            out.push_str(&format!("  {t:<14}"));
            for m in super::MEASUREMENT_NAMES {
                let cell = outcome
                    .correlations
                    .iter()
                    .find(|c| c.target == t && c.measurement == m);
                match cell {
                    Some(c) => {
                        let star = if c.p <= 0.05 { "*" } else { " " };
                        out.push_str(&format!(
                            " {:>9} {:>6}{}",
                            format!("{:+.3}", c.r),
                            format_p(c.p),
                            star
                        ));
                    }
                    None => out.push_str(&format!(" {:>17}", "-")),
                }
            }
            out.push('\n');
        }
    }

    if !outcome.skipped_correlations.is_empty() {
        out.push_str("\nskipped correlations\n");
        for s in &outcome.skipped_correlations {
            out.push_str(&format!("  {} vs {}: {}\n", s.measurement, s.target, s.reason));
        }
    }
    if !outcome.failures.is_empty() {
        out.push_str("\nfailed cells\n");
        for f in &outcome.failures {
            out.push_str(&format!("  {} on {}: {}\n", f.model, f.dataset, f.error));
        }
    }
    out
}
