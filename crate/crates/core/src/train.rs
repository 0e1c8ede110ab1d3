//! Stage-2 adapter fine-tuning with optional information-loss probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{decompose_orthogonal, InfoLossReport};
use crate::model::{AdapterMode, ForwardOptions};
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::tasks::Dataset;
use crate::tensor::Tensor2;
use crate::{Model, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub max_grad_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Snapshot the adapters every N steps (in addition to the final state).
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 3,
            batch_size: 32,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.03,
            max_grad_norm: Some(1.0),
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1], got {}",
                self.warmup_ratio
            )));
        }
        if let Some(g) = self.max_grad_norm {
            if g <= 0.0 {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {g}"
                )));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based step: linear warmup over
/// `round(warmup_ratio * total)` steps (0 at step 0), then either the peak
/// (constant) or a cosine decay reaching 0 at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return cfg.learning_rate * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Cosine => {
            let last = total_steps.saturating_sub(1);
            let denom = last.saturating_sub(warmup).max(1);
            let progress = ((step - warmup) as f64 / denom as f64).min(1.0);
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// When the trainer computes an information-loss report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSchedule {
    /// Every step below `early`, then every `every`-th step.
    EarlyThenEvery {
        early: usize,
        every: usize,
    },
    EveryN {
        every: usize,
    },
    Off,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        ProbeSchedule::EarlyThenEvery {
            early: 20,
            every: 10,
        }
    }
}

impl ProbeSchedule {
    pub fn fires_at(&self, step: usize) -> bool {
        match *self {
            ProbeSchedule::EarlyThenEvery { early, every } => {
                step < early || (every > 0 && step.is_multiple_of(every))
            }
            ProbeSchedule::EveryN { every } => every > 0 && step.is_multiple_of(every),
            ProbeSchedule::Off => false,
        }
    }
}

/// Probe configuration; `layer` defaults to the deepest adapted layer.
#[derive(Debug, Clone, Default)]
pub struct ProbeSpec {
    pub schedule: ProbeSchedule,
    pub layer: Option<String>,
}

/// One training step's log row.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub info: Option<InfoLossReport>,
}

/// Full fine-tuning log.
#[derive(Debug, Clone)]
pub struct FineTuneTrace {
    pub records: Vec<StepRecord>,
    pub probe_layer: Option<String>,
    pub final_eval: Option<f64>,
    /// Interval adapter snapshots (step, adapters), when configured.
    pub snapshots: Vec<(usize, Vec<(String, crate::Adapter)>)>,
}

impl FineTuneTrace {
    /// Training loss at a given step index, when it exists.
    pub fn loss_at_step(&self, step: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.step == step)
            .map(|r| r.train_loss)
    }

    /// Sum of probed `total` discrepancies over steps `< horizon`.
    pub fn cumulative_total_info(&self, horizon: usize) -> f64 {
        let sum: f64 = self
            .records
            .iter()
            .filter(|r| r.step < horizon)
            .filter_map(|r| r.info.as_ref().map(|i| i.total))
            .sum();
        sum + 0.0 // an empty sum is -0.0; keep logs free of negative zeros
    }
}

/// Fine-tunes the attached adapters on a labeled dataset; the base weights
/// are never written. Probes, when scheduled, compare the full gradient at
/// the base weights with the adapter gradient on the same mini-batch,
/// decomposed against the adapter state at the start of fine-tuning.
pub fn fine_tune(
    model: &mut Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    probe: &ProbeSpec,
) -> Result<FineTuneTrace> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if train.features() != model.input_dim() {
        return Err(Error::dims(
            "fine_tune inputs",
            train.inputs.shape(),
            (train.len(), model.input_dim()),
        ));
    }
    if train.classes != model.output_dim() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model emits {}",
            train.classes,
            model.output_dim()
        )));
    }
    let adapted = model.adapted_layer_names();
    if adapted.is_empty() {
        return Err(Error::Config("fine_tune requires attached adapters".into()));
    }

    let probe_layer = match (&probe.schedule, &probe.layer) {
        (ProbeSchedule::Off, _) => None,
        (_, Some(name)) => {
            if !adapted.iter().any(|n| n == name) {
                return Err(Error::Config(format!(
                    "probe layer '{name}' carries no adapter"
                )));
            }
            Some(name.clone())
        }
        (_, None) => adapted.last().cloned(),
    };
    // Projection operand: the adapter state entering stage 2.
    let initial_factors = probe_layer.as_ref().map(|name| {
        let ad = model.layer(name).expect("adapted layer").adapter().unwrap();
        (ad.a().clone(), ad.b().clone())
    });

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer: Optimizer<Real> = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut records = Vec::with_capacity(total_steps);
    let mut snapshots = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = train.select(chunk);

            let info = match (&probe_layer, probe.schedule.fires_at(step)) {
                (Some(layer), true) => {
                    let (a0, b0) = initial_factors.as_ref().expect("probe factors");
                    Some(probe_info_loss(model, layer, &bx, &by, a0, b0, step)?)
                }
                _ => None,
            };

            let mut g: Graph<Real> = Graph::new();
            let nx = g.constant(bx);
            let fwd = model.forward(&mut g, nx, &ForwardOptions::train_adapters())?;
            let loss_id = g.softmax_cross_entropy(fwd.logits, &by)?;
            let loss = g.scalar(loss_id);
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!("training loss became {loss}"),
                });
            }
            g.backward(loss_id)?;

            let mut grads: Vec<Tensor> = Vec::with_capacity(adapted.len() * 2);
            for name in &adapted {
                let staged = fwd.layer(name).expect("adapted layer staged");
                let (a_id, b_id) = (staged.a.expect("staged A"), staged.b.expect("staged B"));
                let (ar, ac) = g.value(a_id).shape();
                let (br, bc) = g.value(b_id).shape();
                grads.push(g.grad(a_id).unwrap_or_else(|| Tensor2::zeros(ar, ac)));
                grads.push(g.grad(b_id).unwrap_or_else(|| Tensor2::zeros(br, bc)));
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }

            let lr = lr_at(step, total_steps, cfg);
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
            for layer in model.layers_mut() {
                if let Some(ad) = layer.adapter_mut() {
                    let (a, b) = ad.factors_mut();
                    params.push(a);
                    params.push(b);
                }
            }
            let mut pairs: Vec<(&mut Tensor, &Tensor)> =
                params.into_iter().zip(grads.iter()).collect();
            optimizer.step(&mut pairs, lr);

            records.push(StepRecord {
                step,
                lr,
                train_loss: loss,
                eval_acc: None,
                info,
            });
            step += 1;
            if let Some(every) = cfg.checkpoint_every {
                if step.is_multiple_of(every) && step < total_steps {
                    snapshots.push((step, model.snapshot_adapters()));
                }
            }
        }
        if let Some(eval_data) = eval {
            let acc = evaluate(model, eval_data)?;
            if let Some(last) = records.last_mut() {
                last.eval_acc = Some(acc);
            }
        }
    }

    let final_eval = eval.map(|d| evaluate(model, d)).transpose()?;
    Ok(FineTuneTrace {
        records,
        probe_layer,
        final_eval,
        snapshots,
    })
}

/// Argmax accuracy in [0, 1]; ties resolve to the first maximal class.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let preds = model.predict(&data.inputs)?;
    let correct = preds
        .iter()
        .zip(data.labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Two extra passes on the step's mini-batch:
/// 1. adapters detached, base weights staged as parameters — the full
///    gradient `g` at the pretrained point, read at the probe layer;
/// 2. adapters attached with the probe layer built densely — the gradient
///    with respect to that layer's effective weight.
fn probe_info_loss(
    model: &Model,
    layer: &str,
    bx: &Tensor,
    by: &[usize],
    a0: &Tensor,
    b0: &Tensor,
    step: usize,
) -> Result<InfoLossReport> {
    // full gradient at the base weights
    let mut g1: Graph<Real> = Graph::new();
    let nx = g1.constant(bx.clone());
    let opts = ForwardOptions {
        adapters: AdapterMode::Detached,
        train_adapters: false,
        train_base: true,
        dense_layer: None,
    };
    let fwd = model.forward(&mut g1, nx, &opts)?;
    let loss = g1.softmax_cross_entropy(fwd.logits, by)?;
    g1.backward(loss)?;
    let g_full = g1
        .grad(fwd.layer(layer).expect("probe layer staged").w0)
        .ok_or_else(|| Error::Internal("missing probe base gradient".into()))?;

    // adapter gradient at the current effective weight
    let mut g2: Graph<Real> = Graph::new();
    let nx = g2.constant(bx.clone());
    let opts = ForwardOptions {
        adapters: AdapterMode::Attached,
        train_adapters: true,
        train_base: false,
        dense_layer: Some(layer.to_string()),
    };
    let fwd = model.forward(&mut g2, nx, &opts)?;
    let loss = g2.softmax_cross_entropy(fwd.logits, by)?;
    g2.backward(loss)?;
    let w_eff = fwd
        .layer(layer)
        .expect("probe layer staged")
        .w_eff
        .ok_or_else(|| Error::Internal("probe layer was not built densely".into()))?;
    let g_delta = g2
        .grad(w_eff)
        .ok_or_else(|| Error::Internal("missing probe adapter gradient".into()))?;

    decompose_orthogonal(&g_full, &g_delta, a0, b0, step)
}

/// Full-parameter training of the base weights. Only valid before any
/// adapter is attached; this is how a frozen, pretrained base is produced.
pub fn pretrain_full(model: &mut Model, train: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    if !model.adapted_layer_names().is_empty() {
        return Err(Error::Config(
            "pretrain_full must run before adapters are attached".into(),
        ));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer: Optimizer<Real> = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut losses = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = train.select(chunk);
            let mut g: Graph<Real> = Graph::new();
            let nx = g.constant(bx);
            let opts = ForwardOptions {
                adapters: AdapterMode::Detached,
                train_adapters: false,
                train_base: true,
                dense_layer: None,
            };
            let fwd = model.forward(&mut g, nx, &opts)?;
            let loss_id = g.softmax_cross_entropy(fwd.logits, &by)?;
            let loss = g.scalar(loss_id);
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!("pretraining loss became {loss}"),
                });
            }
            g.backward(loss_id)?;

            let mut grads: Vec<Tensor> = Vec::with_capacity(fwd.layers.len());
            for staged in &fwd.layers {
                let (r, c) = g.value(staged.w0).shape();
                grads.push(g.grad(staged.w0).unwrap_or_else(|| Tensor2::zeros(r, c)));
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = lr_at(step, total_steps, cfg);
            let mut params: Vec<&mut Tensor> =
                model.layers_mut().iter_mut().map(|l| l.w0_mut()).collect();
            let mut pairs: Vec<(&mut Tensor, &Tensor)> =
                params.drain(..).zip(grads.iter()).collect();
            optimizer.step(&mut pairs, lr);
            losses.push(loss);
            step += 1;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::lora::InitScheme;
    use crate::model::{MlpModel, Placement};
    use crate::tasks::gen_blobs;

    fn setup() -> (Model, Dataset) {
        let data = gen_blobs(3, 4, 30, 1.0, 5).unwrap();
        let mut model = MlpModel::from_widths(4, &[8, 8], 3, Activation::Relu, 2).unwrap();
        model
            .attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::Gaussian, 3)
            .unwrap();
        (model, data)
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        // warmup is 3 steps; step 3 sits at the peak
        assert_eq!(lr_at(3, total, &cfg), 1.0);
        assert!(lr_at(total - 1, total, &cfg) <= 1e-8);
        // mid-schedule closed form
        let warmup = 3usize;
        let step = 51usize;
        let progress = (step - warmup) as f64 / (total - 1 - warmup) as f64;
        let expect = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        assert!((lr_at(step, total, &cfg) - expect).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule_holds_peak_after_warmup() {
        let cfg = TrainConfig {
            learning_rate: 0.25,
            warmup_ratio: 0.1,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(50, 100, &cfg), 0.25);
        assert_eq!(lr_at(99, 100, &cfg), 0.25);
        assert!(lr_at(5, 100, &cfg) < 0.25);
    }

    #[test]
    fn vanishing_learning_rate_leaves_adapters_in_place() {
        let (mut model, data) = setup();
        let before = model.snapshot_adapters();
        let cfg = TrainConfig {
            learning_rate: 1e-12,
            epochs: 1,
            warmup_ratio: 0.0,
            schedule: Schedule::Constant,
            seed: 1,
            ..TrainConfig::default()
        };
        fine_tune(
            &mut model,
            &data,
            None,
            &cfg,
            &ProbeSpec {
                schedule: ProbeSchedule::Off,
                layer: None,
            },
        )
        .unwrap();
        for ((_, a0), (_, a1)) in before.iter().zip(model.snapshot_adapters().iter()) {
            assert!(a0.a().max_abs_diff(a1.a()).unwrap() < 1e-9);
            assert!(a0.b().max_abs_diff(a1.b()).unwrap() < 1e-9);
        }
    }

    #[test]
    fn base_weights_are_bit_frozen_through_training() {
        let (mut model, data) = setup();
        let w_before: Vec<Tensor> = model.layers().iter().map(|l| l.w0().clone()).collect();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        fine_tune(&mut model, &data, None, &cfg, &ProbeSpec::default()).unwrap();
        for (w0, layer) in w_before.iter().zip(model.layers().iter()) {
            assert!(w0.bits_eq(layer.w0()));
            assert!(!layer.w0().has_grad());
        }
    }

    #[test]
    fn evaluate_matches_per_sample_loop_and_handles_constant_predictor() {
        let (model, data) = setup();
        let fast = evaluate(&model, &data).unwrap();
        let mut slow = 0usize;
        for i in 0..data.len() {
            let (x, y) = data.select(&[i]);
            let p = model.predict(&x).unwrap()[0];
            if p == y[0] {
                slow += 1;
            }
        }
        assert_eq!(fast, slow as f64 / data.len() as f64);

        // a head of zeros predicts class 0 everywhere -> 1/3 on balanced data
        let mut constant = MlpModel::from_widths(4, &[4], 3, Activation::Relu, 0).unwrap();
        *constant.layer_mut("head").unwrap().w0_mut() = Tensor2::zeros(3, 4);
        let acc = evaluate(&constant, &data).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let (model, data) = setup();
        let empty = Dataset::new("e", Tensor2::zeros(0, 4), vec![], data.classes, 0).unwrap();
        assert!(matches!(evaluate(&model, &empty), Err(Error::Data(_))));
    }

    #[test]
    fn fine_tune_same_seed_same_trace() {
        let run = || {
            let (mut model, data) = setup();
            let cfg = TrainConfig {
                epochs: 1,
                seed: 9,
                ..TrainConfig::default()
            };
            let trace =
                fine_tune(&mut model, &data, Some(&data), &cfg, &ProbeSpec::default()).unwrap();
            trace
                .records
                .iter()
                .map(|r| (r.train_loss, r.lr, r.info.as_ref().map(|i| i.total)))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn first_step_leaves_a_untouched_when_b_starts_at_zero() {
        // grad wrt A is eta * g * B^T = 0 while B = 0
        let data = gen_blobs(3, 4, 20, 1.0, 6).unwrap();
        let mut model = MlpModel::from_widths(4, &[8], 3, Activation::Relu, 4).unwrap();
        model
            .attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::KaimingAZeroB, 8)
            .unwrap();
        let a_before = model.layer("fc0").unwrap().adapter().unwrap().a().clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            warmup_ratio: 0.0,
            schedule: Schedule::Constant,
            learning_rate: 0.1,
            seed: 0,
            max_grad_norm: None,
            ..TrainConfig::default()
        };
        // one batch = one step
        fine_tune(
            &mut model,
            &data,
            None,
            &cfg,
            &ProbeSpec {
                schedule: ProbeSchedule::Off,
                layer: None,
            },
        )
        .unwrap();
        let after = model.layer("fc0").unwrap().adapter().unwrap();
        assert!(a_before.bits_eq(after.a()));
        assert!(after.b().frobenius_sq() > 0.0);
    }

    #[test]
    fn overflowing_forward_reports_a_numerical_error_with_its_step() {
        // inputs near the float ceiling overflow the first matmul; the
        // resulting NaN loss must surface as a numerical error, not a panic
        let (mut model, data) = setup();
        let huge = Dataset::new(
            "huge",
            Tensor2::filled(data.len(), data.features(), 1e308),
            data.labels.clone(),
            data.classes,
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            seed: 11,
            ..TrainConfig::default()
        };
        let err = fine_tune(
            &mut model,
            &huge,
            None,
            &cfg,
            &ProbeSpec {
                schedule: ProbeSchedule::Off,
                layer: None,
            },
        )
        .unwrap_err();
        match err {
            Error::Numerical { step, message } => {
                assert_eq!(step, 0);
                assert!(message.contains("loss"), "{message}");
            }
            other => panic!("expected a numerical error, got {other}"),
        }
    }

    #[test]
    fn pretraining_learns_the_blobs() {
        let data = gen_blobs(3, 4, 60, 0.8, 12).unwrap();
        let mut model = MlpModel::from_widths(4, &[16], 3, Activation::Relu, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            epochs: 30,
            batch_size: 45,
            seed: 3,
            ..TrainConfig::default()
        };
        let losses = pretrain_full(&mut model, &data, &cfg).unwrap();
        assert!(
            losses.last().unwrap() < &0.2,
            "final loss {:?}",
            losses.last()
        );
        assert!(evaluate(&model, &data).unwrap() > 0.9);
    }
}
