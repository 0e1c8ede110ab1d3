//! Reproducible pretrain/fine-tune scenarios.
//!
//! A scenario names a base architecture, a pretraining task, and a
//! fine-tuning task over the same input space. Building it trains the base
//! net full-parameter on the pretraining task and freezes it; adapters and
//! stage-1 matching are layered on top by the caller.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::model::{MlpModel, Placement};
use crate::tasks::{gen_blobs, gen_teacher_task, load_csv, CsvSchema, Dataset};
use crate::train::{pretrain_full, TrainConfig};
use crate::util::subseed;
use crate::Model;

/// A data source for one side of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Seeded Gaussian clusters.
    Blobs { per_class: usize, spread: f64 },
    /// Random teacher network labels random inputs.
    Teacher {
        teacher_hidden: Vec<usize>,
        samples: usize,
    },
    /// On-disk CSV (header row, float features, integer label).
    Csv {
        path: PathBuf,
        eval_path: Option<PathBuf>,
    },
}

/// Scenario description: base model shape plus the two tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classes: usize,
    pub pretrain: TaskSpec,
    pub finetune: TaskSpec,
    /// Held-out rows per class carved from the fine-tune task.
    pub eval_per_class: usize,
    /// Which layers receive adapters.
    pub placement: Placement,
    pub notes: Option<String>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be nonempty and positive".into(),
            ));
        }
        if self.eval_per_class == 0 {
            return Err(Error::Config("eval_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// A built scenario: frozen pretrained base plus fine-tune data.
#[derive(Debug, Clone)]
pub struct ScenarioInstance {
    pub base: Model,
    pub pretrain_data: Dataset,
    pub finetune_train: Dataset,
    pub finetune_eval: Option<Dataset>,
    /// Accuracy of the frozen base on its own pretraining task.
    pub base_pretrain_acc: f64,
}

fn realize_task(
    task: &TaskSpec,
    input_dim: usize,
    classes: usize,
    eval_per_class: usize,
    seed: u64,
    want_eval: bool,
) -> Result<(Dataset, Option<Dataset>)> {
    let built = match task {
        TaskSpec::Blobs { per_class, spread } => {
            let extra = if want_eval { eval_per_class } else { 0 };
            let full = gen_blobs(classes, input_dim, per_class + extra, *spread, seed)?;
            if want_eval {
                let (train, eval) = full.split_per_class(*per_class)?;
                (train, Some(eval))
            } else {
                (full, None)
            }
        }
        TaskSpec::Teacher {
            teacher_hidden,
            samples,
        } => {
            let extra = if want_eval {
                eval_per_class * classes
            } else {
                0
            };
            let (full, _teacher) = gen_teacher_task(
                teacher_hidden,
                Activation::Relu,
                input_dim,
                classes,
                samples + extra,
                seed,
            )?;
            if want_eval {
                let (train, eval) = full.split_at(*samples)?;
                (train, Some(eval))
            } else {
                (full, None)
            }
        }
        TaskSpec::Csv { path, eval_path } => {
            let schema = CsvSchema {
                features: input_dim,
                classes,
            };
            let train = load_csv(path, &schema)?;
            let eval = eval_path
                .as_ref()
                .map(|p| load_csv(p, &schema))
                .transpose()?;
            (train, eval)
        }
    };
    // both tasks must live in the same input space
    if built.0.features() != input_dim {
        return Err(Error::Config(format!(
            "task produces {} features, scenario expects {input_dim}",
            built.0.features()
        )));
    }
    Ok(built)
}

/// Builds the scenario for one run seed: generates both tasks, trains the
/// base net full-parameter on the pretraining task, and freezes it.
pub fn build_scenario(
    spec: &ScenarioSpec,
    base_training: &TrainConfig,
    seed: u64,
) -> Result<ScenarioInstance> {
    spec.validate()?;
    base_training.validate()?;

    let (pretrain_data, _) = realize_task(
        &spec.pretrain,
        spec.input_dim,
        spec.classes,
        spec.eval_per_class,
        subseed(seed, 0x10),
        false,
    )?;
    let (finetune_train, finetune_eval) = realize_task(
        &spec.finetune,
        spec.input_dim,
        spec.classes,
        spec.eval_per_class,
        subseed(seed, 0x20),
        true,
    )?;

    let mut base = MlpModel::from_widths(
        spec.input_dim,
        &spec.hidden,
        spec.classes,
        spec.activation,
        subseed(seed, 0x30),
    )?;
    let mut cfg = base_training.clone();
    cfg.seed = subseed(seed, 0x40);
    pretrain_full(&mut base, &pretrain_data, &cfg)?;
    let base_pretrain_acc = crate::train::evaluate(&base, &pretrain_data)?;

    Ok(ScenarioInstance {
        base,
        pretrain_data,
        finetune_train,
        finetune_eval,
        base_pretrain_acc,
    })
}

impl Dataset {
    /// Splits at a row boundary, preserving order on both sides.
    pub fn split_at(&self, row: usize) -> Result<(Dataset, Dataset)> {
        if row == 0 || row >= self.len() {
            return Err(Error::Data(format!(
                "split row {row} out of range for {} rows",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..row).collect();
        let tail: Vec<usize> = (row..self.len()).collect();
        let (hx, hy) = self.select(&head);
        let (tx, ty) = self.select(&tail);
        Ok((
            Dataset::new(
                format!("{}/train", self.name),
                hx,
                hy,
                self.classes,
                self.seed,
            )?,
            Dataset::new(
                format!("{}/eval", self.name),
                tx,
                ty,
                self.classes,
                self.seed,
            )?,
        ))
    }
}
