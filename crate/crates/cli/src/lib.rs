//! Command implementations behind the `loralab` binary.

pub mod config;
pub mod report;
pub mod runner;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use config::{AbmSection, ExperimentConfig};
use loralab_core::abm::{LayerSelection, SelectionPreset, Weighting};
use loralab_core::model::Placement;
use runner::{CellSettings, RunResult, RunSpec};

fn resolve_out_dir(cfg: &ExperimentConfig, cli_out: Option<&Path>) -> Result<PathBuf> {
    let dir = cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn finish(
    cfg: &ExperimentConfig,
    command: &str,
    out: &Path,
    results: &[RunResult],
) -> Result<report::Metrics> {
    runner::write_run_artifacts(out, cfg, results)?;
    let metrics = report::collect_metrics(&cfg.name, command, &cfg.seeds, results);
    report::write_metrics_json(&out.join("metrics.json"), &metrics)?;
    // a failed invocation leaves its marker behind; remove on clean finish
    let _ = std::fs::remove_file(out.join("INCOMPLETE"));
    Ok(metrics)
}

/// `run`: the single scheme named by `adapter.init`, across all seeds.
pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<PathBuf> {
    let out = resolve_out_dir(cfg, out)?;
    let cell = CellSettings::base(cfg);
    let specs: Vec<RunSpec> = cfg
        .seeds
        .iter()
        .map(|&seed| RunSpec {
            scheme: cfg.adapter.init.clone(),
            seed,
            cell: cell.clone(),
        })
        .collect();
    let results = execute_or_flag(cfg, &specs, workers, &out)?;
    let metrics = finish(cfg, "run", &out, &results)?;
    println!("{}", report::format_comparison_table(&metrics));
    println!("artifacts in {}", out.display());
    Ok(out)
}

/// `race`: every scheme in `schemes` across shared seeds.
pub fn cmd_race(cfg: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<PathBuf> {
    let schemes = cfg.race_schemes()?;
    let out = resolve_out_dir(cfg, out)?;
    let cell = CellSettings::base(cfg);
    let mut specs = Vec::new();
    for scheme in &schemes {
        for &seed in &cfg.seeds {
            specs.push(RunSpec {
                scheme: scheme.clone(),
                seed,
                cell: cell.clone(),
            });
        }
    }
    let results = execute_or_flag(cfg, &specs, workers, &out)?;
    report::write_comparison_csv(&out.join("comparison.csv"), &results)?;
    let metrics = finish(cfg, "race", &out, &results)?;
    println!("{}", report::format_comparison_table(&metrics));
    println!("artifacts in {}", out.display());
    Ok(out)
}

/// One ablation cell: the base config with grid axes substituted.
fn cell_from_axes(
    cfg: &ExperimentConfig,
    margin: Option<f64>,
    selection: Option<&LayerSelection>,
    weighting: Option<Weighting>,
    steps: Option<usize>,
    scope: Option<&str>,
) -> Result<CellSettings> {
    let mut abm: Option<AbmSection> = cfg.abm.clone();
    if let Some(section) = abm.as_mut() {
        if let Some(m) = margin {
            section.margin = m;
        }
        if let Some(sel) = selection {
            section.layer_selection = sel.clone();
        }
        if let Some(w) = weighting {
            section.weighting = w;
        }
        if let Some(t) = steps {
            section.steps = t;
        }
    }
    let placement = match scope {
        None => cfg.scenario.placement.clone(),
        Some("hidden") => Placement::Hidden,
        Some("all") => Placement::All,
        Some(other) => bail!("unknown scope '{other}'"),
    };
    let mut label = Vec::new();
    if let Some(m) = margin {
        label.push(("margin".to_string(), format!("{m}")));
    }
    if let Some(sel) = selection {
        label.push(("layer_selection".to_string(), selection_token(sel)));
    }
    if let Some(w) = weighting {
        label.push(("weighting".to_string(), weighting_token(w).to_string()));
    }
    if let Some(t) = steps {
        label.push(("steps".to_string(), format!("{t}")));
    }
    if let Some(s) = scope {
        label.push(("scope".to_string(), s.to_string()));
    }
    Ok(CellSettings {
        label,
        abm,
        placement,
    })
}

fn selection_token(sel: &LayerSelection) -> String {
    match sel {
        LayerSelection::Preset(SelectionPreset::FirstHalf) => "first_half".into(),
        LayerSelection::Preset(SelectionPreset::LastHalf) => "last_half".into(),
        LayerSelection::Preset(SelectionPreset::All) => "all".into(),
        LayerSelection::Named(names) => names.join("+"),
    }
}

fn weighting_token(w: Weighting) -> &'static str {
    match w {
        Weighting::Uniform => "uniform",
        Weighting::Sequential => "sequential",
        Weighting::Quadratic => "quadratic",
    }
}

/// `ablate`: Cartesian product over the configured grid axes; each cell
/// runs like `race`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<PathBuf> {
    let grid = cfg
        .ablate
        .clone()
        .ok_or_else(|| anyhow::anyhow!("ablate: config has no [ablate] section"))?;
    let schemes = cfg.race_schemes()?;
    let out = resolve_out_dir(cfg, out)?;

    // absent axes contribute a single pass-through value
    let margins: Vec<Option<f64>> = axis(grid.margins.iter().copied());
    let selections: Vec<Option<&LayerSelection>> = axis(grid.layer_selections.iter());
    let weightings: Vec<Option<Weighting>> = axis(grid.weightings.iter().copied());
    let steps: Vec<Option<usize>> = axis(grid.steps.iter().copied());
    let scopes: Vec<Option<&str>> = axis(grid.scopes.iter().map(String::as_str));

    let mut axes_used = Vec::new();
    if !grid.margins.is_empty() {
        axes_used.push("margin".to_string());
    }
    if !grid.layer_selections.is_empty() {
        axes_used.push("layer_selection".to_string());
    }
    if !grid.weightings.is_empty() {
        axes_used.push("weighting".to_string());
    }
    if !grid.steps.is_empty() {
        axes_used.push("steps".to_string());
    }
    if !grid.scopes.is_empty() {
        axes_used.push("scope".to_string());
    }

    let mut specs = Vec::new();
    for &m in &margins {
        for &sel in &selections {
            for &w in &weightings {
                for &t in &steps {
                    for &scope in &scopes {
                        let cell = cell_from_axes(cfg, m, sel, w, t, scope)?;
                        for scheme in &schemes {
                            for &seed in &cfg.seeds {
                                specs.push(RunSpec {
                                    scheme: scheme.clone(),
                                    seed,
                                    cell: cell.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let results = execute_or_flag(cfg, &specs, workers, &out)?;
    report::write_ablate_csv(&out.join("ablate.csv"), &axes_used, &results)?;
    let metrics = report::collect_metrics(&cfg.name, "ablate", &cfg.seeds, &results);
    report::write_metrics_json(&out.join("metrics.json"), &metrics)?;
    let _ = std::fs::remove_file(out.join("INCOMPLETE"));
    println!(
        "{} cells x {} schemes x {} seeds -> {} rows in {}",
        specs.len() / (schemes.len() * cfg.seeds.len()),
        schemes.len(),
        cfg.seeds.len(),
        results.len(),
        out.join("ablate.csv").display()
    );
    Ok(out)
}

fn axis<T, I: Iterator<Item = T>>(values: I) -> Vec<Option<T>> {
    let collected: Vec<Option<T>> = values.map(Some).collect();
    if collected.is_empty() {
        vec![None]
    } else {
        collected
    }
}

fn execute_or_flag(
    cfg: &ExperimentConfig,
    specs: &[RunSpec],
    workers: usize,
    out: &Path,
) -> Result<Vec<RunResult>> {
    match runner::execute_all(cfg, specs, workers) {
        Ok(r) => Ok(r),
        Err(e) => {
            runner::flag_incomplete(out, &format!("{e:#}"));
            Err(e)
        }
    }
}

/// `validate`: parse + semantic checks only.
pub fn cmd_validate(path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    println!(
        "OK: '{}' ({} seeds, {} schemes)",
        cfg.name,
        cfg.seeds.len(),
        cfg.schemes.len()
    );
    Ok(())
}

/// `inspect-checkpoint`: summarize one adapter container.
pub fn cmd_inspect_checkpoint(path: &Path) -> Result<()> {
    let adapter = loralab_core::lora::load_checkpoint(path)?;
    let delta = adapter.delta();
    println!("checkpoint        {}", path.display());
    println!(
        "shape             A {}x{}, B {}x{} (layer {}x{})",
        adapter.a().rows(),
        adapter.a().cols(),
        adapter.b().rows(),
        adapter.b().cols(),
        adapter.out_dim(),
        adapter.in_dim()
    );
    println!("rank              {}", adapter.rank());
    println!("alpha             {}", adapter.alpha());
    println!("eta = alpha/rank  {}", adapter.eta());
    println!("seed              {}", adapter.seed());
    println!("trainable params  {}", adapter.param_count());
    println!(
        "|A|_F             {:.6e}",
        adapter.a().frobenius_sq().sqrt()
    );
    println!(
        "|B|_F             {:.6e}",
        adapter.b().frobenius_sq().sqrt()
    );
    println!("|delta|_F         {:.6e}", delta.frobenius_sq().sqrt());
    Ok(())
}
