use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Context};

use clr_mpc_core::model::Model;
use clr_mpc_core::sim::CSV_VERSION_LINE;
use clr_mpc_core::synthesis::Certificate;
use clr_mpc_core::verify::VerificationReport;

use crate::{CERTIFICATE, MODEL, REPORT, SUMMARY, SYNTH_LOG, TIMING, VERIFICATION};

const REF_OFFLINE_S: f64 = 45.1;
const REF_ONLINE_MS: f64 = 2.2;
const REF_COST: f64 = 83.0;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Online solve-time statistics in milliseconds.
pub fn timing_csv(seconds: &[f64]) -> String {
    let mut ms: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mean = if ms.is_empty() { f64::NAN } else { ms.iter().sum::<f64>() / ms.len() as f64 };
    let mut out = format!("{CSV_VERSION_LINE}\nstatistic,milliseconds\n");
    let _ = writeln!(out, "count,{}", ms.len());
    let _ = writeln!(out, "mean,{mean:e}");
    for (name, q) in [("p50", 0.5), ("p90", 0.9), ("p99", 0.99)] {
        let _ = writeln!(out, "{name},{:e}", percentile(&ms, q));
    }
    let _ = writeln!(out, "max,{:e}", ms.last().copied().unwrap_or(f64::NAN));
    out
}

/// Rows of a versioned CSV file keyed by their first column.
fn read_keyed_csv(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn log_value(log: &str, key: &str) -> Option<String> {
    log.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim_start().strip_prefix('=')).map(|v| v.trim().to_string()))
}

pub fn cmd_report(dir: &Path) -> anyhow::Result<()> {
    let missing: Vec<&str> = [MODEL, CERTIFICATE].into_iter().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        bail!("missing artifacts in {}: {}", dir.display(), missing.join(", "));
    }
    let model = Model::read(&dir.join(MODEL)).context("reading model")?;
    let cert = Certificate::read(&dir.join(CERTIFICATE), &model).context("reading certificate")?;
    let mut out = String::from("# Robust MPC run report\n\n## Synthesis\n\n");
    let _ = writeln!(out, "| quantity | value |\n|---|---|");
    let _ = writeln!(out, "| horizon | {} |", cert.n);
    let _ = writeln!(out, "| objective ‖t‖² − μα | {:.6} |", cert.objective);
    let _ = writeln!(out, "| α | {:.6} |", cert.alpha);
    let _ = writeln!(out, "| terminal decrease slack | {:.3e} |", cert.cost.slack);
    if let Ok(log) = std::fs::read_to_string(dir.join(SYNTH_LOG)) {
        if let Some(t) = log_value(&log, "elapsed_seconds") {
            let _ = writeln!(out, "| offline time (s) | {t} (reference {REF_OFFLINE_S}) |");
        }
    }

    out.push_str("\n## Verification\n\n");
    match std::fs::read_to_string(dir.join(VERIFICATION)) {
        Ok(text) => {
            let rep = VerificationReport::from_toml(&text).context("parsing verification report")?;
            let worst = |f: fn(&clr_mpc_core::verify::FarkasResiduals) -> f64| {
                rep.farkas_residuals.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
            };
            let _ = writeln!(out, "| check | result |\n|---|---|");
            let _ = writeln!(out, "| verdict | {} |", if rep.is_valid() { "VALID" } else { "INVALID" });
            let _ = writeln!(out, "| Farkas equality residual | {:.3e} |", worst(|r| r.eq_resid));
            let _ = writeln!(out, "| Farkas inequality residual | {:.3e} |", worst(|r| r.ineq_resid));
            let _ = writeln!(out, "| multiplier negativity | {:.3e} |", worst(|r| r.negativity));
            let _ = writeln!(out, "| inclusion failures | {} |", rep.inclusion_failures);
            let _ = writeln!(out, "| SRF failures | {} / {} (worst margin {:.3e}) |", rep.srf_failures, rep.srf_samples, rep.srf_worst_margin);
            let _ = writeln!(
                out,
                "| Lyapunov failures | {} / {} (worst margin {:.3e}) |",
                rep.lyapunov_failures, rep.lyapunov_samples, rep.lyapunov_worst_margin
            );
            let _ = writeln!(out, "| terminal LMI slack | {:.3e} ({}) |", rep.lmi_slack, if rep.lmi_certified { "certified" } else { "not certified" });
        }
        Err(_) => out.push_str("not run\n"),
    }

    out.push_str("\n## Simulation\n\n");
    match read_keyed_csv(&dir.join(SUMMARY)) {
        Ok(rows) => {
            let runs = rows.iter().filter(|r| r.first().is_some_and(|k| k != "mean")).count();
            let mean = rows.iter().find(|r| r.first().is_some_and(|k| k == "mean"));
            let _ = writeln!(out, "| quantity | value |\n|---|---|");
            let _ = writeln!(out, "| realizations | {runs} |");
            if let Some(m) = mean {
                let cost: f64 = m.get(2).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
                let _ = writeln!(out, "| mean cumulative cost | {cost:.3} (reference {REF_COST}) |");
                let _ = writeln!(out, "| violation_count | {} |", m.get(3).map_or("?", String::as_str));
                let _ = writeln!(out, "| infeasible_count | {} |", m.get(4).map_or("?", String::as_str));
            }
        }
        Err(_) => out.push_str("not run\n"),
    }
    if let Ok(rows) = read_keyed_csv(&dir.join(TIMING)) {
        let get = |k: &str| {
            rows.iter()
                .find(|r| r[0] == k)
                .and_then(|r| r.get(1)?.parse::<f64>().ok())
                .map_or_else(|| "?".to_string(), |v| format!("{v:.3}"))
        };
        let _ = writeln!(
            out,
            "| online solve ms (mean / p50 / p99) | {} / {} / {} (reference mean {REF_ONLINE_MS}) |",
            get("mean"),
            get("p50"),
            get("p99")
        );
    }
    out.push_str("\nReference values are quoted for comparison only and were not produced by this run.\n");
    std::fs::write(dir.join(REPORT), &out).context("writing report")?;
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_of_sorted_data() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert!(percentile(&[], 0.5).is_nan());
    }

    #[test]
    fn log_lookup() {
        assert_eq!(log_value("a = 1\nelapsed_seconds = 2.5\n", "elapsed_seconds").as_deref(), Some("2.5"));
        assert_eq!(log_value("a = 1\n", "elapsed_seconds"), None);
    }

    #[test]
    fn empty_dir_is_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_report(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing artifacts"));
    }
}
