use std::fmt::Write;
use std::path::Path;

use super::{read_json, NoiseReport, ScalingReport, SuiteReport, TimingRow};
use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

/// Plain-text tables for whichever of `suite/`, `noise/` and `scaling/`
/// exist under `out`.
pub fn render_report(out: &Path) -> Result<String> {
    let mut s = String::new();
    let mut found = false;

    let suite = out.join("suite").join("summary.json");
    if suite.is_file() {
        found = true;
        let r: SuiteReport = read_json(&suite)?;
        let _ = writeln!(s, "Suite: {} test days, thermostat cost {:.3} ± {:.3}", r.days, r.thermostat.mean, r.thermostat.std);
        let _ = writeln!(
            s,
            "{:<8} {:>4} {:>4} {:>18} {:>10} {:>10} {:>10} {:>10}",
            "method", "ok", "fail", "Sum_act", "Sum_dec", "Pow_act", "Tem_act", "|dec-act|"
        );
        for a in &r.aggregate {
            let _ = writeln!(
                s,
                "{:<8} {:>4} {:>4} {:>9.3} ± {:<6.3} {:>10.3} {:>10.3} {:>10.3} {:>10.4}",
                a.method.to_string(),
                a.completed,
                a.failed,
                a.sum_act.mean,
                a.sum_act.std,
                a.sum_dec.mean,
                a.pow_act.mean,
                a.tem_act.mean,
                a.dec_act_gap
            );
        }
        if !r.zone_counts.is_empty() {
            let _ = writeln!(s, "\nAbnormal zones against the ground truth:");
            for z in &r.zone_counts {
                let _ = writeln!(s, "{:<8} {} of {}", z.method.to_string(), z.abnormal, z.checked);
            }
        }
        for run in r.runs.iter().filter(|r| r.costs.is_none()) {
            let _ = writeln!(s, "failed: day {} {}: {:?}", run.day, run.method, run.status);
        }
        let timing = out.join("suite").join("timing.json");
        if timing.is_file() {
            let rows: Vec<TimingRow> = read_json(&timing)?;
            let _ = writeln!(s, "\n{:<8} {:>12} {:>10} {:>16}", "method", "total (s)", "iters", "per iter (ms)");
            for t in rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:>12.3} {:>10} {:>16.4}",
                    t.method.to_string(),
                    t.total_seconds,
                    t.iterations,
                    t.per_iteration_seconds * 1e3
                );
            }
        }
        s.push('\n');
    }

    let noise = out.join("noise").join("summary.json");
    if noise.is_file() {
        found = true;
        let r: NoiseReport = read_json(&noise)?;
        let _ = write!(s, "Noise sweep, mean Sum_act per level\n{:<8}", "method");
        for sigma in &r.sigmas[1..] {
            let _ = write!(s, " {:>9}", format!("σ={sigma}"));
        }
        let _ = writeln!(s, " {:>9}", "std");
        for m in &r.robustness {
            let _ = write!(s, "{:<8}", m.method.to_string());
            for v in &m.per_sigma {
                let _ = write!(s, " {:>9}", opt(*v));
            }
            let _ = writeln!(s, " {:>9}", opt(m.std_over_sigma));
        }
        s.push('\n');
    }

    let scaling = out.join("scaling").join("summary.json");
    if scaling.is_file() {
        found = true;
        let r: ScalingReport = read_json(&scaling)?;
        let _ = writeln!(
            s,
            "Scaling\n{:>6} {:>9} {:>7} {:>8} {:>11} {:>11} {:>12} {:>14}",
            "zones", "original", "latent", "ratio", "latent rmse", "linear rmse", "gt ms/iter", "optiden ms/iter"
        );
        for row in &r.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>9} {:>7} {:>8.4} {:>11.4} {:>11.4} {:>12} {:>14}",
                row.zones,
                row.original_total,
                row.latent_total,
                row.reduction_ratio,
                row.latent_rmse,
                row.linear_rmse,
                opt(row.gt_per_iteration_seconds.map(|v| v * 1e3)),
                opt(row.optiden_per_iteration_seconds.map(|v| v * 1e3)),
            );
        }
        let _ = writeln!(
            s,
            "reference: {} zones, {} original → {} latent variables per step",
            r.reference.zones, r.reference.original_total, r.reference.latent_total
        );
    }

    if !found {
        return Err(Error::Config(format!("no suite, noise or scaling results under {}", out.display())));
    }
    Ok(s)
}
