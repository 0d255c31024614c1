//! CSV emission: flat summary, long-format metric rows, and the three
//! fixed-key pivots that mirror the sweep's plotting axes.

use std::path::Path;

use super::sweep::{RunStatus, RunSummary};
use super::HarnessError;

fn join_pools<F: Fn(&super::sweep::PoolDesc) -> String>(s: &RunSummary, f: F) -> String {
    s.pools.iter().map(f).collect::<Vec<_>>().join("+")
}

/// Flat summary table, one row per run.
pub fn write_summary_csv(path: &Path, summaries: &[RunSummary]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_hash",
        "arch",
        "s",
        "n_list",
        "g_list",
        "g_gen",
        "lb_weight",
        "gamma",
        "routing",
        "dense_granular_mode",
        "seed",
        "steps",
        "status",
        "macro_ce",
        "imbalance",
        "wall_clock_secs",
    ])?;
    for s in summaries {
        w.write_record([
            s.run_hash.clone(),
            s.arch.clone(),
            s.s_exact.clone(),
            join_pools(s, |p| p.n.to_string()),
            join_pools(s, |p| p.g.clone()),
            s.g_gen.clone(),
            s.lb_weight.to_string(),
            s.bias_step.to_string(),
            s.routing.clone(),
            s.dense_granular_mode.clone(),
            s.seed.to_string(),
            s.steps.to_string(),
            match s.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed => "failed".to_string(),
            },
            s.final_macro_ce.map(|v| v.to_string()).unwrap_or_default(),
            s.final_imbalance.map(|v| v.to_string()).unwrap_or_default(),
            s.wall_clock_secs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready long format: one row per (run, metric).
pub fn emit_long_csv(path: &Path, summaries: &[RunSummary]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arch", "s", "n", "g_list", "g_gen", "lb_weight", "gamma", "routing", "metric", "value",
    ])?;
    for s in summaries {
        let mut metric_rows: Vec<(&str, Option<f64>)> = vec![
            ("macro_ce", s.final_macro_ce),
            ("imbalance", s.final_imbalance),
        ];
        metric_rows.retain(|(_, v)| v.is_some());
        for (metric, value) in metric_rows {
            w.write_record([
                s.arch.clone(),
                s.s_exact.clone(),
                join_pools(s, |p| p.n.to_string()),
                join_pools(s, |p| p.g.clone()),
                s.g_gen.clone(),
                s.lb_weight.to_string(),
                s.bias_step.to_string(),
                s.routing.clone(),
                metric.to_string(),
                value.expect("retained").to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The three pivots of the summary table. A run lands in the fixed-n and
/// fixed-g files only when it has a single pool (so n and g are scalar
/// keys); every run lands in the fixed-s file. Grouping by s uses the
/// exact dyadic value, which f64 represents without rounding.
pub fn emit_plots_data(out_dir: &Path, summaries: &[RunSummary]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    write_pivot(
        &out_dir.join("fixed_n.csv"),
        "n",
        summaries,
        |s| s.single_n().map(|n| n.to_string()),
        |a, b| {
            key_u64(a.single_n())
                .cmp(&key_u64(b.single_n()))
                .then(a.s.total_cmp(&b.s))
        },
    )?;
    write_pivot(
        &out_dir.join("fixed_g.csv"),
        "g",
        summaries,
        |s| s.single_g().map(|g| g.to_string()),
        |a, b| {
            g_value(a.single_g())
                .total_cmp(&g_value(b.single_g()))
                .then(a.s.total_cmp(&b.s))
        },
    )?;
    write_pivot(
        &out_dir.join("fixed_s.csv"),
        "s",
        summaries,
        |s| Some(s.s_exact.clone()),
        |a, b| {
            a.s.total_cmp(&b.s)
                .then(a.total_experts().cmp(&b.total_experts()))
        },
    )?;
    Ok(())
}

fn key_u64(x: Option<u64>) -> u64 {
    x.unwrap_or(0)
}

fn g_value(g: Option<&str>) -> f64 {
    g.and_then(|s| s.parse::<crate::config::Rational>().ok())
        .map(|r| r.to_f64())
        .unwrap_or(0.0)
}

fn write_pivot(
    path: &Path,
    key_name: &str,
    summaries: &[RunSummary],
    key: impl Fn(&RunSummary) -> Option<String>,
    order: impl Fn(&RunSummary, &RunSummary) -> std::cmp::Ordering,
) -> Result<(), HarnessError> {
    let mut rows: Vec<&RunSummary> = summaries.iter().filter(|s| key(s).is_some()).collect();
    rows.sort_by(|a, b| order(a, b));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        key_name, "arch", "s", "n_list", "g_list", "g_gen", "lb_weight", "gamma", "routing",
        "macro_ce", "imbalance",
    ])?;
    for s in rows {
        w.write_record([
            key(s).expect("filtered"),
            s.arch.clone(),
            s.s_exact.clone(),
            join_pools(s, |p| p.n.to_string()),
            join_pools(s, |p| p.g.clone()),
            s.g_gen.clone(),
            s.lb_weight.to_string(),
            s.bias_step.to_string(),
            s.routing.clone(),
            s.final_macro_ce.map(|v| v.to_string()).unwrap_or_default(),
            s.final_imbalance.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sweep::PoolDesc;

    fn summary(pools: Vec<PoolDesc>, s: f64, s_exact: &str) -> RunSummary {
        RunSummary {
            run_hash: "h".repeat(8),
            arch: "tiny".to_string(),
            s_exact: s_exact.to_string(),
            s,
            pools,
            g_gen: "0".to_string(),
            lb_weight: 0.01,
            z_weight: 0.001,
            bias_step: 0.0,
            routing: "dropless".to_string(),
            dense_granular_mode: "off".to_string(),
            seed: 0,
            steps: 10,
            status: RunStatus::Ok,
            error: None,
            final_macro_ce: Some(2.0),
            final_imbalance: Some(1.2),
            wall_clock_secs: 1.0,
            checkpoint_sha: None,
        }
    }

    fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
        csv::Reader::from_path(path)
            .unwrap()
            .records()
            .map(|r| r.unwrap())
            .collect()
    }

    #[test]
    fn pivots_cover_rows_by_defined_keys() {
        let dir = std::env::temp_dir().join(format!("moelab-export-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let single = summary(
            vec![PoolDesc {
                n: 8,
                g: "1/2".to_string(),
            }],
            4.0,
            "4",
        );
        let hetero = summary(
            vec![
                PoolDesc {
                    n: 4,
                    g: "1/2".to_string(),
                },
                PoolDesc {
                    n: 8,
                    g: "1/4".to_string(),
                },
            ],
            4.0,
            "4",
        );
        let dense = summary(Vec::new(), 1.0, "1");
        let summaries = vec![single, hetero, dense];
        emit_plots_data(&dir, &summaries).unwrap();

        let n_rows = read_rows(&dir.join("fixed_n.csv"));
        let g_rows = read_rows(&dir.join("fixed_g.csv"));
        let s_rows = read_rows(&dir.join("fixed_s.csv"));
        // Single-pool row: 3 appearances. Heterogeneous and dense: 1 each.
        assert_eq!(n_rows.len(), 1);
        assert_eq!(g_rows.len(), 1);
        assert_eq!(s_rows.len(), 3);
        let total = n_rows.len() + g_rows.len() + s_rows.len();
        let expected: usize = summaries
            .iter()
            .map(|s| {
                let n_def = usize::from(s.single_n().is_some());
                let g_def = usize::from(s.single_g().is_some());
                n_def + g_def + 1
            })
            .sum();
        assert_eq!(total, expected);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn single_summary_three_single_row_files() {
        let dir = std::env::temp_dir().join(format!("moelab-export1-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let one = summary(
            vec![PoolDesc {
                n: 4,
                g: "1/4".to_string(),
            }],
            1.0,
            "1",
        );
        emit_plots_data(&dir, &[one]).unwrap();
        for f in ["fixed_n.csv", "fixed_g.csv", "fixed_s.csv"] {
            assert_eq!(read_rows(&dir.join(f)).len(), 1, "{f}");
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn long_csv_one_row_per_metric() {
        let dir = std::env::temp_dir().join(format!("moelab-export2-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("long.csv");
        let one = summary(
            vec![PoolDesc {
                n: 4,
                g: "1/4".to_string(),
            }],
            1.0,
            "1",
        );
        emit_long_csv(&path, &[one]).unwrap();
        let rows = read_rows(&path);
        assert_eq!(rows.len(), 2); // macro_ce + imbalance
        assert_eq!(&rows[0][8], "macro_ce");
        assert_eq!(&rows[1][8], "imbalance");
        let _ = std::fs::remove_dir_all(&dir);
    }
}
