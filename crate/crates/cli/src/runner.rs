//! Executes (scheme, seed) runs and the race/ablate drivers.
//!
//! Compute is parallelizable across runs; all file writing happens
//! serially afterwards in a fixed order, so outputs are byte-identical
//! for any worker count.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use loralab_core::abm::{run_stage1, PretrainedRef, Stage1Trace};
use loralab_core::lora::{load_checkpoint, InitScheme};
use loralab_core::model::Placement;
use loralab_core::scenario::{build_scenario, ScenarioInstance};
use loralab_core::tasks::Dataset;
use loralab_core::train::{fine_tune, FineTuneTrace, ProbeSpec};
use loralab_core::util::subseed;
use loralab_core::{Adapter, Model};

use crate::config::{AbmSection, ExperimentConfig, ReferenceMode, ReferenceTask, Scheme};

// Seed stream tags; the scenario builder uses its own 0x10..0x40 block.
const TAG_INIT: u64 = 1;
const TAG_STAGE1: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_REF_INIT: u64 = 4;
const TAG_REF_TRAIN: u64 = 5;

/// One grid cell's effective settings (the plain run/race cell uses the
/// config verbatim).
#[derive(Debug, Clone)]
pub struct CellSettings {
    /// Empty for the base cell; ablation cells carry axis=value pairs.
    pub label: Vec<(String, String)>,
    pub abm: Option<AbmSection>,
    pub placement: Placement,
}

impl CellSettings {
    pub fn base(cfg: &ExperimentConfig) -> CellSettings {
        CellSettings {
            label: vec![],
            abm: cfg.abm.clone(),
            placement: cfg.scenario.placement.clone(),
        }
    }

    pub fn label_string(&self) -> String {
        if self.label.is_empty() {
            "base".to_string()
        } else {
            self.label
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        }
    }
}

/// A single experiment: one scheme, one seed, one settings cell.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scheme: String,
    pub seed: u64,
    pub cell: CellSettings,
}

/// In-memory results of one finished run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scheme: String,
    pub seed: u64,
    pub cell_label: String,
    pub trainable_params: usize,
    pub base_pretrain_acc: f64,
    pub step10_loss: Option<f64>,
    pub final_train_loss: f64,
    pub final_eval_acc: Option<f64>,
    pub cum_info_total_20: f64,
    pub stage1: Option<Stage1Trace>,
    pub trace: FineTuneTrace,
    pub adapters: Vec<(String, Adapter)>,
}

fn attach_scheme_adapters(
    model: &mut Model,
    placement: &Placement,
    rank: usize,
    alpha: f64,
    scheme: &InitScheme,
    seed: u64,
) -> Result<()> {
    if let InitScheme::FromCheckpoint(dir) = scheme {
        // one checkpoint file per placed layer inside the directory
        let names = model.placement_names(placement)?;
        for (i, name) in names.iter().enumerate() {
            let file = dir.join(format!("{name}.lora"));
            let per_layer = InitScheme::FromCheckpoint(file);
            let (d, k) = {
                let layer = model.layer(name)?;
                (layer.out_dim(), layer.in_dim())
            };
            let adapter = loralab_core::lora::init_adapter::<f64>(
                d,
                k,
                rank,
                alpha,
                &per_layer,
                subseed(seed, i as u64),
            )?;
            model.layer_mut(name)?.attach(adapter)?;
        }
        Ok(())
    } else {
        model
            .attach_adapters(placement, rank, alpha, scheme, seed)
            .map_err(Into::into)
    }
}

fn stage1_reference(
    abm: &AbmSection,
    scenario: &ScenarioInstance,
    cfg: &ExperimentConfig,
    cell: &CellSettings,
    seed: u64,
) -> Result<PretrainedRef<f64>> {
    match abm.reference {
        ReferenceMode::Base => Ok(PretrainedRef::BaseModel),
        ReferenceMode::TrainedVanilla => {
            let data: &Dataset = match abm.reference_task {
                ReferenceTask::Finetune => &scenario.finetune_train,
                ReferenceTask::Pretrain => &scenario.pretrain_data,
            };
            let mut reference = scenario.base.clone();
            reference.attach_adapters(
                &cell.placement,
                cfg.adapter.rank,
                cfg.adapter.alpha,
                &InitScheme::KaimingAZeroB,
                subseed(seed, TAG_REF_INIT),
            )?;
            let mut section = cfg.train.clone();
            section.epochs = abm.reference_epochs;
            let train_cfg = section.to_train_config(subseed(seed, TAG_REF_TRAIN), None);
            let probe = ProbeSpec {
                schedule: loralab_core::train::ProbeSchedule::Off,
                layer: None,
            };
            fine_tune(&mut reference, data, None, &train_cfg, &probe)?;
            Ok(PretrainedRef::Adapters(reference.snapshot_adapters()))
        }
        ReferenceMode::Checkpoint => {
            let dir = abm
                .reference_path
                .as_ref()
                .ok_or_else(|| anyhow!("abm.reference_path missing"))?;
            let mut probe_model = scenario.base.clone();
            let names = probe_model.placement_names(&cell.placement)?;
            let mut snapshot = Vec::with_capacity(names.len());
            for name in &names {
                let file = dir.join(format!("{name}.lora"));
                let adapter = load_checkpoint(&file)
                    .with_context(|| format!("loading reference adapter {}", file.display()))?;
                snapshot.push((name.clone(), adapter));
            }
            // shape-check against the model before handing the snapshot out
            probe_model.restore_adapters(&snapshot)?;
            Ok(PretrainedRef::Adapters(snapshot))
        }
    }
}

/// Runs one (scheme, seed, cell) pipeline end to end.
pub fn execute_run(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunResult> {
    let seed = spec.seed;
    let base_cfg = cfg.base_training.to_train_config(0, None);
    let scenario = build_scenario(&cfg.scenario, &base_cfg, seed)
        .with_context(|| format!("building scenario for seed {seed}"))?;

    let mut model = scenario.base.clone();
    let mut stage1 = None;

    match Scheme::parse(&spec.scheme)? {
        Scheme::Init(init) => {
            attach_scheme_adapters(
                &mut model,
                &spec.cell.placement,
                cfg.adapter.rank,
                cfg.adapter.alpha,
                &init,
                subseed(seed, TAG_INIT),
            )?;
        }
        Scheme::Abm => {
            let abm = spec
                .cell
                .abm
                .as_ref()
                .ok_or_else(|| anyhow!("abm scheme selected without an [abm] section"))?;
            let start = match Scheme::parse(&abm.start)? {
                Scheme::Init(s) => s,
                Scheme::Abm => bail!("abm.start cannot be 'abm'"),
            };
            attach_scheme_adapters(
                &mut model,
                &spec.cell.placement,
                cfg.adapter.rank,
                cfg.adapter.alpha,
                &start,
                subseed(seed, TAG_INIT),
            )?;
            let reference = stage1_reference(abm, &scenario, cfg, &spec.cell, seed)?;
            let pool = &scenario.finetune_train.inputs;
            let trace = run_stage1(
                &mut model,
                &reference,
                pool,
                &abm.to_abm_config(),
                subseed(seed, TAG_STAGE1),
            )?;
            stage1 = Some(trace);
        }
    }

    let trainable_params = model.adapter_param_count();
    let mut train_cfg = cfg
        .train
        .to_train_config(subseed(seed, TAG_TRAIN), Some(spec.scheme.as_str()));
    train_cfg.checkpoint_every = cfg.output.checkpoint_every;
    let probe = ProbeSpec {
        schedule: cfg.probe.schedule.to_core(),
        layer: cfg.probe.layer.clone(),
    };
    let trace = fine_tune(
        &mut model,
        &scenario.finetune_train,
        scenario.finetune_eval.as_ref(),
        &train_cfg,
        &probe,
    )?;

    Ok(RunResult {
        scheme: spec.scheme.clone(),
        seed,
        cell_label: spec.cell.label_string(),
        trainable_params,
        base_pretrain_acc: scenario.base_pretrain_acc,
        step10_loss: trace.loss_at_step(10),
        final_train_loss: trace
            .records
            .last()
            .map(|r| r.train_loss)
            .unwrap_or(f64::NAN),
        final_eval_acc: trace.final_eval,
        cum_info_total_20: trace.cumulative_total_info(20),
        stage1,
        trace,
        adapters: model.snapshot_adapters(),
    })
}

/// Executes all runs, deduplicating identical (scheme, seed, cell) specs,
/// optionally in parallel. Results come back in input order.
pub fn execute_all(
    cfg: &ExperimentConfig,
    specs: &[RunSpec],
    workers: usize,
) -> Result<Vec<RunResult>> {
    // identical specs (e.g. a scheme raced against itself) run once
    let mut unique: Vec<&RunSpec> = Vec::new();
    let mut index_of: BTreeMap<String, usize> = BTreeMap::new();
    let key = |s: &RunSpec| format!("{}|{}|{}", s.scheme, s.seed, s.cell.label_string());
    for spec in specs {
        let k = key(spec);
        if let std::collections::btree_map::Entry::Vacant(e) = index_of.entry(k) {
            e.insert(unique.len());
            unique.push(spec);
        }
    }

    let outcomes: Vec<Result<RunResult>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("building worker pool")?;
        pool.install(|| {
            use rayon::prelude::*;
            unique
                .par_iter()
                .map(|spec| execute_run(cfg, spec))
                .collect()
        })
    } else {
        unique.iter().map(|spec| execute_run(cfg, spec)).collect()
    };

    let mut done = Vec::with_capacity(unique.len());
    for (spec, outcome) in unique.iter().zip(outcomes) {
        match outcome {
            Ok(r) => done.push(r),
            Err(e) => {
                return Err(e.context(format!(
                    "run failed: scheme '{}', seed {}, cell '{}'",
                    spec.scheme,
                    spec.seed,
                    spec.cell.label_string()
                )))
            }
        }
    }
    Ok(specs
        .iter()
        .map(|s| done[index_of[&key(s)]].clone())
        .collect())
}

/// Writes per-run artifacts (trace CSV, stage-1 CSV, checkpoints) into the
/// output directory. Serial, fixed order.
pub fn write_run_artifacts(
    out: &Path,
    cfg: &ExperimentConfig,
    results: &[RunResult],
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in results {
        let token = file_token(&r.scheme);
        let stem = format!("{token}_seed{}", r.seed);
        if !seen.insert(stem.clone()) {
            continue; // duplicate scheme entry: identical bytes already written
        }
        crate::report::write_trace_csv(&out.join(format!("trace_{stem}.csv")), &r.trace)?;
        if let Some(stage1) = &r.stage1 {
            crate::report::write_stage1_csv(&out.join(format!("stage1_{stem}.csv")), stage1)?;
        }
        if cfg.output.checkpoints {
            let dir = out.join("checkpoints").join(&stem);
            std::fs::create_dir_all(&dir)?;
            for (layer, adapter) in &r.adapters {
                loralab_core::lora::save_checkpoint(adapter, &dir.join(format!("{layer}.lora")))?;
            }
            for (step, adapters) in &r.trace.snapshots {
                let step_dir = dir.join(format!("step{step}"));
                std::fs::create_dir_all(&step_dir)?;
                for (layer, adapter) in adapters {
                    loralab_core::lora::save_checkpoint(
                        adapter,
                        &step_dir.join(format!("{layer}.lora")),
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// File-name token for a scheme string.
pub fn file_token(scheme: &str) -> String {
    scheme
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Marks a failed invocation so partial artifacts are recognizable.
pub fn flag_incomplete(out: &Path, message: &str) {
    let _ = std::fs::create_dir_all(out);
    let _ = std::fs::write(
        out.join("INCOMPLETE"),
        format!("this output directory is partial; the invocation failed:\n{message}\n"),
    );
}
