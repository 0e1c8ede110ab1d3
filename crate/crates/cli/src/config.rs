//! TOML experiment configuration and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use loralab_core::abm::{AbmConfig, BatchPolicy, LayerSelection, SelectionPreset, Weighting};
use loralab_core::lora::InitScheme;
use loralab_core::optim::OptimizerKind;
use loralab_core::scenario::ScenarioSpec;
use loralab_core::train::{ProbeSchedule, Schedule, TrainConfig};

/// Full experiment file. Unknown keys are rejected so typos surface as
/// validation errors with their field path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Run seeds; every stream of randomness in a run derives from one of
    /// these. Must be nonempty.
    pub seeds: Vec<u64>,
    /// Schemes raced by `race`/`ablate`:
    /// kaiming_a_zero_b | orthogonal | gaussian | abm | from_checkpoint:<dir>
    #[serde(default)]
    pub schemes: Vec<String>,
    pub scenario: ScenarioSpec,
    /// Full-parameter training that produces the frozen base.
    pub base_training: TrainSection,
    pub adapter: AdapterSection,
    #[serde(default)]
    pub abm: Option<AbmSection>,
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub ablate: Option<AblateSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub alpha: f64,
    /// Scheme used by the `run` subcommand.
    pub init: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_grad_norm")]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    /// Optional per-scheme learning-rate overrides (e.g. paper-style runs
    /// give the boundary-matched arm a larger rate).
    #[serde(default)]
    pub scheme_learning_rates: BTreeMap<String, f64>,
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}
fn default_warmup() -> f64 {
    0.03
}
fn default_grad_norm() -> Option<f64> {
    Some(1.0)
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}

impl TrainSection {
    /// Core config with the shuffle seed supplied by the runner.
    pub fn to_train_config(&self, seed: u64, scheme: Option<&str>) -> TrainConfig {
        let lr = scheme
            .and_then(|s| self.scheme_learning_rates.get(s).copied())
            .unwrap_or(self.learning_rate);
        TrainConfig {
            learning_rate: lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            warmup_ratio: self.warmup_ratio,
            max_grad_norm: self.max_grad_norm,
            optimizer: self.optimizer,
            weight_decay: self.weight_decay,
            checkpoint_every: None,
            seed,
        }
    }
}

/// Where stage 1 takes its target signs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Bare base model (zero reference update).
    Base,
    /// A vanilla adapter trained on a scenario task with independent seeds.
    TrainedVanilla,
    /// Adapters loaded from a checkpoint directory (one .lora per layer).
    Checkpoint,
}

/// Which task the trained-vanilla reference is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceTask {
    Finetune,
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbmSection {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_selection")]
    pub layer_selection: LayerSelection,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default = "default_batch_policy")]
    pub batch_policy: BatchPolicy,
    #[serde(default = "default_abm_batch")]
    pub batch_size: usize,
    #[serde(default = "default_abm_optimizer")]
    pub optimizer: OptimizerKind,
    /// Initial factors for the matching run.
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_reference")]
    pub reference: ReferenceMode,
    #[serde(default = "default_reference_task")]
    pub reference_task: ReferenceTask,
    /// Epochs of reference-adapter training (trained_vanilla mode).
    #[serde(default = "default_reference_epochs")]
    pub reference_epochs: usize,
    /// Checkpoint directory (checkpoint mode).
    #[serde(default)]
    pub reference_path: Option<PathBuf>,
}

fn default_margin() -> f64 {
    0.5
}
fn default_steps() -> usize {
    100
}
fn default_step_size() -> f64 {
    3e-4
}
fn default_selection() -> LayerSelection {
    LayerSelection::Preset(SelectionPreset::LastHalf)
}
fn default_weighting() -> Weighting {
    Weighting::Sequential
}
fn default_batch_policy() -> BatchPolicy {
    BatchPolicy::Cycle
}
fn default_abm_batch() -> usize {
    64
}
fn default_abm_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_start() -> String {
    "kaiming_a_zero_b".to_string()
}
fn default_reference() -> ReferenceMode {
    ReferenceMode::TrainedVanilla
}
fn default_reference_task() -> ReferenceTask {
    ReferenceTask::Finetune
}
fn default_reference_epochs() -> usize {
    2
}

impl AbmSection {
    pub fn to_abm_config(&self) -> AbmConfig {
        AbmConfig {
            margin: self.margin,
            steps: self.steps,
            step_size: self.step_size,
            layer_selection: self.layer_selection.clone(),
            weighting: self.weighting,
            batch_policy: self.batch_policy,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default)]
    pub schedule: ProbeScheduleSection,
    /// Layer to probe; defaults to the deepest adapted layer.
    #[serde(default)]
    pub layer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum ProbeScheduleSection {
    /// Every step for the first 20, then every 10th.
    #[default]
    Default,
    Off,
}

impl ProbeScheduleSection {
    pub fn to_core(self) -> ProbeSchedule {
        match self {
            ProbeScheduleSection::Default => ProbeSchedule::EarlyThenEvery {
                early: 20,
                every: 10,
            },
            ProbeScheduleSection::Off => ProbeSchedule::Off,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory; `--out` on the command line wins.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Write per-layer adapter checkpoints for each finished run.
    #[serde(default = "default_true")]
    pub checkpoints: bool,
    /// Also snapshot adapters every N fine-tuning steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoints: true,
            checkpoint_every: None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Ablation grid. Axes left empty inherit the single configured value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default)]
    pub margins: Vec<f64>,
    #[serde(default)]
    pub layer_selections: Vec<LayerSelection>,
    #[serde(default)]
    pub weightings: Vec<Weighting>,
    #[serde(default)]
    pub steps: Vec<usize>,
    /// Adapter placement scope: "hidden" or "all".
    #[serde(default)]
    pub scopes: Vec<String>,
}

/// A parsed racing scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Init(InitScheme),
    Abm,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s {
            "abm" => Ok(Scheme::Abm),
            "kaiming_a_zero_b" => Ok(Scheme::Init(InitScheme::KaimingAZeroB)),
            "orthogonal" => Ok(Scheme::Init(InitScheme::Orthogonal)),
            "gaussian" => Ok(Scheme::Init(InitScheme::Gaussian)),
            other => {
                if let Some(path) = other.strip_prefix("from_checkpoint:") {
                    Ok(Scheme::Init(InitScheme::FromCheckpoint(path.into())))
                } else {
                    bail!(
                        "unknown scheme '{other}' (expected kaiming_a_zero_b, orthogonal, \
                         gaussian, abm, or from_checkpoint:<path>)"
                    )
                }
            }
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic validation; messages name the offending field path.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: must list at least one seed");
        }
        self.scenario
            .validate()
            .map_err(|e| anyhow::anyhow!("scenario: {e}"))?;
        self.base_training
            .to_train_config(0, None)
            .validate()
            .map_err(|e| anyhow::anyhow!("base_training: {e}"))?;
        self.train
            .to_train_config(0, None)
            .validate()
            .map_err(|e| anyhow::anyhow!("train: {e}"))?;
        if self.adapter.rank == 0 {
            bail!("adapter.rank: must be at least 1");
        }
        if self.adapter.alpha <= 0.0 {
            bail!("adapter.alpha: must be positive");
        }

        let mut wants_abm = vec![];
        Scheme::parse(&self.adapter.init).map_err(|e| anyhow::anyhow!("adapter.init: {e}"))?;
        if self.adapter.init == "abm" {
            wants_abm.push("adapter.init".to_string());
        }
        for (i, s) in self.schemes.iter().enumerate() {
            Scheme::parse(s).map_err(|e| anyhow::anyhow!("schemes[{i}]: {e}"))?;
            if s == "abm" {
                wants_abm.push(format!("schemes[{i}]"));
            }
        }
        match (&self.abm, wants_abm.is_empty()) {
            (None, false) => bail!(
                "abm: section required because {} selects the 'abm' scheme",
                wants_abm.join(", ")
            ),
            (Some(abm), _) => {
                abm.to_abm_config()
                    .validate()
                    .map_err(|e| anyhow::anyhow!("abm: {e}"))?;
                Scheme::parse(&abm.start).map_err(|e| anyhow::anyhow!("abm.start: {e}"))?;
                if abm.start == "abm" {
                    bail!("abm.start: the matching run cannot start from 'abm' itself");
                }
                if abm.reference == ReferenceMode::Checkpoint && abm.reference_path.is_none() {
                    bail!("abm.reference_path: required when abm.reference = \"checkpoint\"");
                }
                if abm.reference == ReferenceMode::TrainedVanilla && abm.reference_epochs == 0 {
                    bail!("abm.reference_epochs: must be at least 1");
                }
            }
            (None, true) => {}
        }

        if let Some(ablate) = &self.ablate {
            for (i, scope) in ablate.scopes.iter().enumerate() {
                if scope != "hidden" && scope != "all" {
                    bail!("ablate.scopes[{i}]: expected \"hidden\" or \"all\", got \"{scope}\"");
                }
            }
        }
        Ok(())
    }

    /// Schemes for racing; requires at least two.
    pub fn race_schemes(&self) -> Result<Vec<String>> {
        if self.schemes.len() < 2 {
            bail!("schemes: race needs at least two schemes");
        }
        Ok(self.schemes.clone())
    }
}
