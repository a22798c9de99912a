//! Report aggregation and emission: CSV cells, JSON summary, plot data,
//! and per-run traces. All outputs are byte-stable for identical inputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentOutput;

/// Machine-readable verdicts of one experiment. Field order is the JSON key
/// order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub nu: f64,
    /// Fitted slope of log(median error) vs log(delta); null when the fit is
    /// impossible (fewer than two usable noise levels).
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub theory_exponent: f64,
    pub max_oracle_ratio: Option<f64>,
    /// Noise-propagation bound held in every non-failed cell.
    pub lemma35_pass: bool,
    /// Damped-residual bounds held in every non-failed posterior cell.
    pub lemma47_pass: bool,
    pub cells_failed: usize,
    /// Max/min spread of the per-delta median oracle ratios.
    pub oracle_ratio_spread: Option<f64>,
    /// Fraction of adjacent-delta pairs (same seed) with nondecreasing
    /// stopping index; reported, not asserted.
    pub stop_index_monotone_fraction: Option<f64>,
    pub rule: String,
    pub source_form: String,
    pub lipschitz_times_source_norm: f64,
    pub rho: f64,
    pub cells_total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_discrepancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_apriori: Option<f64>,
}

/// Median of a slice; `None` when empty. Even lengths average the two middle
/// elements, so the result is independent of input order.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

/// Ordinary least squares of `log(value)` against `log(delta)`.
/// Returns `(slope, residual standard error of the slope)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(d, v)| *d > 0.0 && *v > 0.0 && d.is_finite() && v.is_finite())
        .map(|(d, v)| (d.ln(), v.ln()))
        .collect();
    let m = logs.len();
    if m < 2 {
        return None;
    }
    let mf = m as f64;
    let x_mean = logs.iter().map(|(x, _)| x).sum::<f64>() / mf;
    let y_mean = logs.iter().map(|(_, y)| y).sum::<f64>() / mf;
    let sxx: f64 = logs.iter().map(|(x, _)| (x - x_mean) * (x - x_mean)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = logs.iter().map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let stderr = if m > 2 {
        let ss_res: f64 = logs
            .iter()
            .map(|(x, y)| {
                let fitted = y_mean + slope * (x - x_mean);
                (y - fitted) * (y - fitted)
            })
            .sum();
        (ss_res / (mf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some((slope, stderr))
}

/// 17 significant digits, locale-free; NaN and infinities print as text.
pub fn fmt_g17(value: f64) -> String {
    if value.is_nan() {
        "nan".to_string()
    } else if value.is_infinite() {
        if value > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{value:.16e}")
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "nan".to_string(), fmt_g17)
}

fn fmt_opt_int(value: Option<usize>) -> String {
    value.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

pub const CSV_HEADER: &str =
    "delta,seed,rule,k_stop,error,residual,stop_functional,ktilde,oracle_ratio";

/// Writes `report.csv`, `summary.json`, `plot.dat` and `traces/` into `dir`.
pub fn emit_report(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    // Resolved config: together with the traces this makes every verdict
    // recomputable offline.
    let config_text = toml::to_string_pretty(&output.config)?;
    fs::write(dir.join("config.toml"), config_text)?;

    // Cells, in canonical order.
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for cell in &output.cells {
        let o = &cell.outcome;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt_g17(o.delta_abs),
            o.seed,
            o.rule,
            fmt_opt_int(o.k_stop),
            fmt_opt(o.error),
            fmt_opt(o.residual),
            fmt_opt(o.stop_functional),
            o.ktilde,
            fmt_opt(o.oracle_ratio),
        ));
    }
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    // Summary.
    let json_path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&output.summary)?;
    json.push('\n');
    fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;

    // Plot data: log10(delta), log10(median error).
    let mut plot = String::new();
    for (delta, med) in &output.fit_points {
        plot.push_str(&format!("{} {}\n", fmt_g17(delta.log10()), fmt_g17(med.log10())));
    }
    let plot_path = dir.join("plot.dat");
    fs::write(&plot_path, plot).with_context(|| format!("writing {}", plot_path.display()))?;

    // Traces: the clean reference plus one file per cell.
    let traces_dir = dir.join("traces");
    fs::create_dir_all(&traces_dir)?;
    let clean = serde_json::to_string(&output.clean_trace)?;
    fs::write(traces_dir.join("clean.json"), clean + "\n")?;
    for (index, cell) in output.cells.iter().enumerate() {
        if let Some(trace) = &cell.trace {
            let name = format!(
                "cell_{index:03}_{}_d{}_s{}.json",
                cell.outcome.rule, cell.outcome.delta_rel, cell.outcome.seed
            );
            let body = serde_json::to_string(trace)?;
            fs::write(traces_dir.join(name), body + "\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_basics() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[3.0, 1.0]), Some(2.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
    }

    #[test]
    fn median_is_permutation_invariant() {
        let a = [0.4, 1.9, 0.1, 7.3, 2.2];
        let mut b = a;
        b.reverse();
        assert_eq!(median(&a), median(&b));
    }

    #[test]
    fn fit_recovers_exact_power_laws() {
        for s in [0.25, 0.5, 2.0 / 3.0, 1.0] {
            let points: Vec<(f64, f64)> =
                [1e-2f64, 1e-3, 1e-4, 1e-5].iter().map(|d| (*d, 0.3 * d.powf(s))).collect();
            let (slope, stderr) = fit_power_law(&points).unwrap();
            assert!((slope - s).abs() <= 1e-10, "slope {slope} for exponent {s}");
            assert!(stderr <= 1e-10);
        }
    }

    #[test]
    fn fit_needs_two_points() {
        assert!(fit_power_law(&[(1e-2, 0.1)]).is_none());
        assert!(fit_power_law(&[]).is_none());
    }

    #[test]
    fn fit_reports_scatter() {
        let points = [(1e-2, 0.5), (1e-3, 0.011), (1e-4, 0.05)];
        let (_, stderr) = fit_power_law(&points).unwrap();
        assert!(stderr > 0.0);
    }

    #[test]
    fn g17_is_stable() {
        assert_eq!(fmt_g17(0.25), "2.5000000000000000e-1");
        assert_eq!(fmt_g17(f64::NAN), "nan");
    }
}
