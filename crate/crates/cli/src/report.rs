//! Machine-readable artifacts: trace CSVs, metrics JSON, comparison and
//! ablation tables. Floats use the shortest round-trip representation, so
//! rereading an emitted file reproduces the values bit for bit.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use loralab_core::abm::Stage1Trace;
use loralab_core::train::FineTuneTrace;

use crate::runner::RunResult;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Stage-2 trace: one row per training step, info-loss columns filled on
/// probed steps.
pub fn write_trace_csv(path: &Path, trace: &FineTuneTrace) -> Result<()> {
    let mut out = String::new();
    out.push_str("step,lr,train_loss,eval_acc,total,unavoidable,reducible,upper_bound\n");
    for r in &trace.records {
        let (total, unavoidable, reducible, upper) = match &r.info {
            Some(i) => (
                i.total.to_string(),
                i.unavoidable.to_string(),
                i.reducible.to_string(),
                i.upper_bound.to_string(),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.lr,
            r.train_loss,
            opt(r.eval_acc),
            total,
            unavoidable,
            reducible,
            upper
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Parsed row of a stage-2 trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub total: Option<f64>,
    pub unavoidable: Option<f64>,
    pub reducible: Option<f64>,
    pub upper_bound: Option<f64>,
}

/// Load-side reader for [`write_trace_csv`] output.
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty trace CSV")?;
    anyhow::ensure!(
        header == "step,lr,train_loss,eval_acc,total,unavoidable,reducible,upper_bound",
        "unexpected trace header: {header}"
    );
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(cols.len() == 8, "line {}: {} columns", i + 2, cols.len());
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse()?))
            }
        };
        rows.push(TraceRow {
            step: cols[0].parse()?,
            lr: cols[1].parse()?,
            train_loss: cols[2].parse()?,
            eval_acc: parse_opt(cols[3])?,
            total: parse_opt(cols[4])?,
            unavoidable: parse_opt(cols[5])?,
            reducible: parse_opt(cols[6])?,
            upper_bound: parse_opt(cols[7])?,
        });
    }
    Ok(rows)
}

/// Stage-1 trace: per-step loss, mismatch rate, and per-layer loss shares.
pub fn write_stage1_csv(path: &Path, trace: &Stage1Trace) -> Result<()> {
    let mut out = String::new();
    out.push_str("step,abm_loss,mismatch_rate");
    for name in &trace.selected_layers {
        out.push_str(&format!(",share_{name}"));
    }
    out.push('\n');
    for r in &trace.rows {
        out.push_str(&format!("{},{},{}", r.step, r.loss, r.mismatch_rate));
        for s in &r.layer_shares {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// (step, loss, mismatch rate, per-layer shares).
pub type Stage1Row = (usize, f64, f64, Vec<f64>);

/// Load-side reader for [`write_stage1_csv`] output.
pub fn read_stage1_csv(path: &Path) -> Result<Vec<Stage1Row>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty stage-1 CSV")?;
    anyhow::ensure!(
        header.starts_with("step,abm_loss,mismatch_rate"),
        "unexpected stage-1 header: {header}"
    );
    let mut rows = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(cols.len() >= 3, "short stage-1 row");
        let shares = cols[3..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push((cols[0].parse()?, cols[1].parse()?, cols[2].parse()?, shares));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation in seed order.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub step10_loss: Option<f64>,
    pub final_train_loss: f64,
    pub final_eval_acc: Option<f64>,
    pub cum_info_total_20: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeMetrics {
    pub name: String,
    /// Grid cell the scheme ran under ("base" outside ablations).
    pub cell: String,
    pub trainable_params: usize,
    pub per_seed: Vec<SeedMetrics>,
    pub summary: SummaryMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryMetrics {
    pub step10_loss: MeanStd,
    pub final_train_loss: MeanStd,
    pub final_eval_acc: Option<MeanStd>,
    pub cum_info_total_20: MeanStd,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub config_name: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub schemes: Vec<SchemeMetrics>,
}

/// Groups ordered results into per-(cell, scheme) metric blocks, keeping
/// first-appearance order.
pub fn collect_metrics(
    config_name: &str,
    command: &str,
    seeds: &[u64],
    results: &[RunResult],
) -> Metrics {
    let mut order: Vec<(String, String)> = Vec::new();
    for r in results {
        let key = (r.cell_label.clone(), r.scheme.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let schemes = order
        .into_iter()
        .map(|(cell, scheme)| {
            let group: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.cell_label == cell && r.scheme == scheme)
                .collect();
            let per_seed: Vec<SeedMetrics> = group
                .iter()
                .map(|r| SeedMetrics {
                    seed: r.seed,
                    step10_loss: r.step10_loss,
                    final_train_loss: r.final_train_loss,
                    final_eval_acc: r.final_eval_acc,
                    cum_info_total_20: r.cum_info_total_20,
                })
                .collect();
            let evals: Vec<f64> = group.iter().filter_map(|r| r.final_eval_acc).collect();
            SchemeMetrics {
                name: scheme,
                cell,
                trainable_params: group.first().map(|r| r.trainable_params).unwrap_or(0),
                summary: SummaryMetrics {
                    step10_loss: mean_std(
                        &group
                            .iter()
                            .filter_map(|r| r.step10_loss)
                            .collect::<Vec<_>>(),
                    ),
                    final_train_loss: mean_std(
                        &group.iter().map(|r| r.final_train_loss).collect::<Vec<_>>(),
                    ),
                    final_eval_acc: if evals.is_empty() {
                        None
                    } else {
                        Some(mean_std(&evals))
                    },
                    cum_info_total_20: mean_std(
                        &group
                            .iter()
                            .map(|r| r.cum_info_total_20)
                            .collect::<Vec<_>>(),
                    ),
                },
                per_seed,
            }
        })
        .collect();
    Metrics {
        config_name: config_name.to_string(),
        command: command.to_string(),
        seeds: seeds.to_vec(),
        schemes,
    }
}

pub fn write_metrics_json(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Per-(scheme, seed) comparison rows for `race`.
pub fn write_comparison_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut out = String::new();
    out.push_str("scheme,seed,step10_loss,final_train_loss,final_eval_acc,cum_info_total_20\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scheme,
            r.seed,
            opt(r.step10_loss),
            r.final_train_loss,
            opt(r.final_eval_acc),
            r.cum_info_total_20
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Long-format ablation rows, one per (cell, scheme, seed).
pub fn write_ablate_csv(path: &Path, axes: &[String], results: &[RunResult]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&axes.join(","));
    out.push_str(",scheme,seed,step10_loss,final_train_loss,final_eval_acc,cum_info_total_20\n");
    for r in results {
        let mut cells: std::collections::BTreeMap<&str, &str> = Default::default();
        for pair in r.cell_label.split(',') {
            if let Some((k, v)) = pair.split_once('=') {
                cells.insert(k, v);
            }
        }
        let axis_vals: Vec<&str> = axes
            .iter()
            .map(|a| cells.get(a.as_str()).copied().unwrap_or(""))
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            axis_vals.join(","),
            r.scheme,
            r.seed,
            opt(r.step10_loss),
            r.final_train_loss,
            opt(r.final_eval_acc),
            r.cum_info_total_20
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Parsed row of a comparison CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scheme: String,
    pub seed: u64,
    pub step10_loss: Option<f64>,
    pub final_train_loss: f64,
    pub final_eval_acc: Option<f64>,
    pub cum_info_total_20: f64,
}

/// Load-side reader for [`write_comparison_csv`] output.
pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty comparison CSV")?;
    anyhow::ensure!(
        header == "scheme,seed,step10_loss,final_train_loss,final_eval_acc,cum_info_total_20",
        "unexpected comparison header: {header}"
    );
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(cols.len() == 6, "line {}: {} columns", i + 2, cols.len());
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse()?))
            }
        };
        rows.push(ComparisonRow {
            scheme: cols[0].to_string(),
            seed: cols[1].parse()?,
            step10_loss: parse_opt(cols[2])?,
            final_train_loss: cols[3].parse()?,
            final_eval_acc: parse_opt(cols[4])?,
            cum_info_total_20: cols[5].parse()?,
        });
    }
    Ok(rows)
}

/// One ablation row: grid-axis values keyed by name, then the metrics.
pub type AblateRow = (Vec<(String, String)>, ComparisonRow);

/// Load-side reader for [`write_ablate_csv`] output.
pub fn read_ablate_csv(path: &Path) -> Result<Vec<AblateRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty ablation CSV")?;
    let cols: Vec<&str> = header.split(',').collect();
    let scheme_idx = cols
        .iter()
        .position(|c| *c == "scheme")
        .context("ablation header lacks a scheme column")?;
    let axes: Vec<String> = cols[..scheme_idx].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(
            vals.len() == axes.len() + 6,
            "line {}: {} columns",
            i + 2,
            vals.len()
        );
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse()?))
            }
        };
        let axis_vals = axes
            .iter()
            .cloned()
            .zip(vals[..axes.len()].iter().map(|s| s.to_string()))
            .collect();
        let rest = &vals[axes.len()..];
        rows.push((
            axis_vals,
            ComparisonRow {
                scheme: rest[0].to_string(),
                seed: rest[1].parse()?,
                step10_loss: parse_opt(rest[2])?,
                final_train_loss: rest[3].parse()?,
                final_eval_acc: parse_opt(rest[4])?,
                cum_info_total_20: rest[5].parse()?,
            },
        ));
    }
    Ok(rows)
}

/// Human-oriented comparison table for stdout.
pub fn format_comparison_table(metrics: &Metrics) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>14} {:>14} {:>14} {:>16}\n",
        "scheme", "step10 loss", "final loss", "eval acc", "info loss (<20)"
    ));
    for s in &metrics.schemes {
        let acc = s
            .summary
            .final_eval_acc
            .as_ref()
            .map(|m| format!("{:.4}+-{:.4}", m.mean, m.std))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14} {:>16}\n",
            s.name,
            format!(
                "{:.4}+-{:.4}",
                s.summary.step10_loss.mean, s.summary.step10_loss.std
            ),
            format!(
                "{:.4}+-{:.4}",
                s.summary.final_train_loss.mean, s.summary.final_train_loss.std
            ),
            acc,
            format!("{:.2}", s.summary.cum_info_total_20.mean),
        ));
    }
    out
}

/// Writes a line both to stdout and (best effort) a log file.
pub fn emit(line: &str, log: Option<&mut std::fs::File>) {
    println!("{line}");
    if let Some(f) = log {
        let _ = writeln!(f, "{line}");
    }
}
