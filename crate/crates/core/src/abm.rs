//! Boundary-matching adapter initialization (stage 1).
//!
//! Before task training, the adapter is optimized so that the adapted
//! model's pre-activation signs match those of a reference model on a pool
//! of unlabeled inputs. The objective is a per-layer weighted squared hinge
//! on the margin-shifted sign agreement `tau * z >= m`; matching runs for a
//! fixed number of plain gradient (or AdamW) steps on the adapter factors
//! only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{AdapterMode, ForwardOptions, MlpModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::Activation;

/// Which model a capture was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Pretrained,
    Finetuned,
}

/// Per-layer pre-activation batches recorded during one forward pass.
/// Entries keep model depth order; values are the `z` tensors strictly
/// before the nonlinearity.
#[derive(Debug, Clone)]
pub struct ActivationCapture<S: Scalar> {
    source: SourceTag,
    entries: Vec<(String, Tensor2<S>)>,
}

impl<S: Scalar> ActivationCapture<S> {
    /// Builds a capture from explicit per-layer tensors (ordered by depth).
    pub fn from_entries(source: SourceTag, entries: Vec<(String, Tensor2<S>)>) -> Self {
        Self { source, entries }
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn entries(&self) -> &[(String, Tensor2<S>)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Restriction to the named layers, in the given order.
    pub fn subset(&self, names: &[String]) -> Result<ActivationCapture<S>> {
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Config(format!("capture has no layer named '{name}'")))?;
            entries.push((name.clone(), t.clone()));
        }
        Ok(ActivationCapture {
            source: self.source,
            entries,
        })
    }

    fn batch_rows(&self) -> usize {
        self.entries.first().map(|(_, t)| t.rows()).unwrap_or(0)
    }
}

/// Records every layer's pre-activation for one batch. The model is not
/// mutated; captures of the same model and batch are identical.
pub fn capture<S: Scalar>(
    model: &MlpModel<S>,
    mode: AdapterMode,
    batch: &Tensor2<S>,
    source: SourceTag,
) -> Result<ActivationCapture<S>> {
    if batch.rows() == 0 {
        return Err(Error::Data("cannot capture on an empty batch".into()));
    }
    let mut entries = Vec::with_capacity(model.layers().len());
    let mut cur = batch.clone();
    for layer in model.layers() {
        let (z, h) = layer.forward_plain(&cur, mode == AdapterMode::Attached)?;
        entries.push((layer.name().to_string(), z));
        cur = h;
    }
    Ok(ActivationCapture { source, entries })
}

/// Per-layer sign patterns `tau` in {-1, +1}; `tau = +1` iff `z > 0`
/// (zero maps to -1, matching the inactive side of the ReLU derivative).
#[derive(Debug, Clone)]
pub struct MaskSnapshot<S: Scalar> {
    entries: Vec<(String, Tensor2<S>)>,
}

impl<S: Scalar> MaskSnapshot<S> {
    /// Builds a snapshot from explicit sign tensors; entries must be +-1.
    pub fn from_entries(entries: Vec<(String, Tensor2<S>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor2<S>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn subset(&self, names: &[String]) -> Result<MaskSnapshot<S>> {
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Config(format!("mask has no layer named '{name}'")))?;
            entries.push((name.clone(), t.clone()));
        }
        Ok(MaskSnapshot { entries })
    }
}

/// Elementwise sign snapshot of a capture.
pub fn masks<S: Scalar>(capture: &ActivationCapture<S>) -> MaskSnapshot<S> {
    let entries = capture
        .entries
        .iter()
        .map(|(name, z)| {
            (
                name.clone(),
                z.map(|v| if v > S::zero() { S::one() } else { -S::one() }),
            )
        })
        .collect();
    MaskSnapshot { entries }
}

/// Fraction of (sample, neuron) pairs whose signs disagree between two
/// snapshots over the same layers.
pub fn mask_mismatch_rate<S: Scalar>(a: &MaskSnapshot<S>, b: &MaskSnapshot<S>) -> Result<f64> {
    if a.entries.len() != b.entries.len() {
        return Err(Error::Config(format!(
            "mask snapshots cover {} vs {} layers",
            a.entries.len(),
            b.entries.len()
        )));
    }
    let mut mismatched = 0usize;
    let mut total = 0usize;
    for ((na, ta), (nb, tb)) in a.entries.iter().zip(b.entries.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Config(format!(
                "mask snapshots disagree on layer '{na}' vs '{nb}'"
            )));
        }
        total += ta.len();
        mismatched += ta.iter().zip(tb.iter()).filter(|(x, y)| x != y).count();
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(mismatched as f64 / total as f64)
}

/// Per-layer emphasis for the matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// `w_l = (l+1)/L`: the deepest selected layer gets weight 1.
    Sequential,
    /// `w_l = ((l+1)/L)^2`.
    Quadratic,
}

/// Weights for `count` selected layers, shallowest first. The loss applies
/// these squared.
pub fn layer_weights(count: usize, scheme: Weighting) -> Vec<f64> {
    assert!(count >= 1, "need at least one layer");
    (0..count)
        .map(|l| {
            let frac = (l + 1) as f64 / count as f64;
            match scheme {
                Weighting::Uniform => 1.0,
                Weighting::Sequential => frac,
                Weighting::Quadratic => frac * frac,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPreset {
    /// Shallowest ceil(L/2) layers.
    FirstHalf,
    /// Deepest ceil(L/2) layers.
    LastHalf,
    All,
}

/// Which layers participate in boundary matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Preset(SelectionPreset),
    Named(Vec<String>),
}

impl LayerSelection {
    /// Concrete ordered layer names for a model's layer list.
    pub fn resolve(&self, layer_names: &[String]) -> Result<Vec<String>> {
        let l = layer_names.len();
        let picked = match self {
            LayerSelection::Preset(SelectionPreset::FirstHalf) => layer_names[..l - l / 2].to_vec(),
            LayerSelection::Preset(SelectionPreset::LastHalf) => layer_names[l / 2..].to_vec(),
            LayerSelection::Preset(SelectionPreset::All) => layer_names.to_vec(),
            LayerSelection::Named(names) => {
                for n in names {
                    if !layer_names.iter().any(|ln| ln == n) {
                        return Err(Error::Config(format!(
                            "layer selection names unknown layer '{n}'"
                        )));
                    }
                }
                names.clone()
            }
        };
        if picked.is_empty() {
            return Err(Error::Config("layer selection is empty".into()));
        }
        Ok(picked)
    }
}

/// Whether matching steps reuse one batch or walk the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Every step uses the same (seed-shuffled) leading batch.
    Fixed,
    /// Consecutive windows over the seed-shuffled pool, wrapping around.
    Cycle,
}

/// Stage-1 configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbmConfig {
    /// Hinge margin m > 0.
    pub margin: f64,
    /// Number of matching steps T.
    pub steps: usize,
    /// Step size mu.
    pub step_size: f64,
    pub layer_selection: LayerSelection,
    pub weighting: Weighting,
    pub batch_policy: BatchPolicy,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for AbmConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            steps: 100,
            step_size: 3e-4,
            layer_selection: LayerSelection::Preset(SelectionPreset::LastHalf),
            weighting: Weighting::Sequential,
            batch_policy: BatchPolicy::Cycle,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl AbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let LayerSelection::Named(names) = &self.layer_selection {
            if names.is_empty() {
                return Err(Error::Config("layer selection is empty".into()));
            }
        }
        Ok(())
    }
}

/// Weighted squared-hinge boundary loss:
/// `(1/N) sum_i sum_l w_l^2 max(0, -tau * z + m)^2`, entries summed within
/// each layer. Zero exactly when every entry satisfies `tau * z >= m`.
pub fn abm_loss<S: Scalar>(
    z_ft: &ActivationCapture<S>,
    tau: &MaskSnapshot<S>,
    margin: f64,
    weights: &[f64],
) -> Result<S> {
    let pairs = paired_layers(z_ft, tau, weights)?;
    let n = S::from_f64_exact(z_ft.batch_rows() as f64);
    let m = S::from_f64_exact(margin);
    let mut total = S::zero();
    for (z, t, w) in pairs {
        let w2 = S::from_f64_exact(w * w);
        let mut layer_sum = S::zero();
        for (&zv, &tv) in z.iter().zip(t.iter()) {
            let u = -tv * zv + m;
            if u > S::zero() {
                layer_sum += u * u;
            }
        }
        total += w2 * layer_sum;
    }
    Ok(total / n)
}

/// Piecewise subgradient of [`abm_loss`] with respect to each entry of
/// `z`: `-2 w_l^2 tau (-tau z + m) / N` where the hinge is active, else 0.
pub fn abm_loss_grad<S: Scalar>(
    z_ft: &ActivationCapture<S>,
    tau: &MaskSnapshot<S>,
    margin: f64,
    weights: &[f64],
) -> Result<Vec<(String, Tensor2<S>)>> {
    let pairs = paired_layers(z_ft, tau, weights)?;
    let n = S::from_f64_exact(z_ft.batch_rows() as f64);
    let m = S::from_f64_exact(margin);
    let two = S::from_f64_exact(2.0);
    let mut out = Vec::with_capacity(pairs.len());
    for (z, t, w) in pairs {
        let w2 = S::from_f64_exact(w * w);
        let mut g = Tensor2::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let (zv, tv) = (z.get(i, j), t.get(i, j));
                let u = -tv * zv + m;
                if u > S::zero() {
                    g.set(i, j, -(two * w2 * tv * u) / n);
                }
            }
        }
        out.push((String::new(), g));
    }
    for (slot, (name, _)) in out.iter_mut().zip(z_ft.entries.iter()) {
        slot.0 = name.clone();
    }
    Ok(out)
}

type LayerTriple<'a, S> = (&'a Tensor2<S>, &'a Tensor2<S>, f64);

fn paired_layers<'a, S: Scalar>(
    z_ft: &'a ActivationCapture<S>,
    tau: &'a MaskSnapshot<S>,
    weights: &[f64],
) -> Result<Vec<LayerTriple<'a, S>>> {
    if z_ft.entries.len() != tau.entries.len() || z_ft.entries.len() != weights.len() {
        return Err(Error::Config(format!(
            "layer counts disagree: {} pre-activations, {} masks, {} weights",
            z_ft.entries.len(),
            tau.entries.len(),
            weights.len()
        )));
    }
    let rows = z_ft.batch_rows();
    let mut out = Vec::with_capacity(weights.len());
    for (((zn, z), (tn, t)), &w) in z_ft
        .entries
        .iter()
        .zip(tau.entries.iter())
        .zip(weights.iter())
    {
        if zn != tn {
            return Err(Error::Config(format!(
                "layer order mismatch: '{zn}' vs '{tn}'"
            )));
        }
        if z.shape() != t.shape() {
            return Err(Error::dims("abm_loss", z.shape(), t.shape()));
        }
        if z.rows() != rows {
            return Err(Error::Config(format!(
                "layer '{zn}' has {} rows, expected {rows}",
                z.rows()
            )));
        }
        out.push((z, t, w));
    }
    Ok(out)
}

/// Sign reference for stage 1.
#[derive(Debug, Clone)]
pub enum PretrainedRef<S: Scalar> {
    /// Match the bare base model's boundaries (adapters detached).
    BaseModel,
    /// Match the boundaries of the base model carrying these adapters,
    /// e.g. factors loaded from another task's checkpoint.
    Adapters(Vec<(String, LoraAdapter<S>)>),
}

/// One row of the matching trace.
#[derive(Debug, Clone)]
pub struct Stage1Row {
    pub step: usize,
    pub loss: f64,
    pub mismatch_rate: f64,
    /// Fraction of the loss contributed by each selected layer.
    pub layer_shares: Vec<f64>,
}

/// Trace of a stage-1 run.
#[derive(Debug, Clone)]
pub struct Stage1Trace {
    pub selected_layers: Vec<String>,
    pub rows: Vec<Stage1Row>,
}

impl Stage1Trace {
    pub fn initial_mismatch(&self) -> f64 {
        self.rows.first().map(|r| r.mismatch_rate).unwrap_or(0.0)
    }

    pub fn final_mismatch(&self) -> f64 {
        self.rows.last().map(|r| r.mismatch_rate).unwrap_or(0.0)
    }
}

/// Runs T boundary-matching steps on the model's adapter factors.
///
/// Base weights are never touched; the loss at each step is evaluated
/// before the update, so `rows[0].loss` is the loss of the incoming
/// adapter state.
pub fn run_stage1<S: Scalar>(
    model: &mut MlpModel<S>,
    reference: &PretrainedRef<S>,
    pool: &Tensor2<S>,
    cfg: &AbmConfig,
    seed: u64,
) -> Result<Stage1Trace> {
    cfg.validate()?;
    if pool.rows() == 0 {
        return Err(Error::Data("stage-1 input pool is empty".into()));
    }
    if pool.cols() != model.input_dim() {
        return Err(Error::dims(
            "stage1 pool",
            pool.shape(),
            (pool.rows(), model.input_dim()),
        ));
    }
    let adapted = model.adapted_layer_names();
    if adapted.is_empty() {
        return Err(Error::Config(
            "stage 1 requires at least one attached adapter".into(),
        ));
    }
    let selected = cfg.layer_selection.resolve(&model.layer_names())?;
    let weights = layer_weights(selected.len(), cfg.weighting);
    let margin = S::from_f64_exact(cfg.margin);

    // Reference model supplying the target signs.
    let (ref_model, ref_mode) = match reference {
        PretrainedRef::BaseModel => (model.clone(), AdapterMode::Detached),
        PretrainedRef::Adapters(snapshot) => {
            let mut m = model.clone();
            for layer in m.layers_mut() {
                layer.detach_adapter();
            }
            m.restore_adapters(snapshot)?;
            (m, AdapterMode::Attached)
        }
    };

    let mut order: Vec<usize> = (0..pool.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let bs = cfg.batch_size.min(pool.rows());

    let mut optimizer: Optimizer<S> = Optimizer::new(cfg.optimizer, 0.0);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut cached_ref: Option<(Vec<usize>, MaskSnapshot<S>)> = None;

    for t in 0..cfg.steps {
        let idx: Vec<usize> = match cfg.batch_policy {
            BatchPolicy::Fixed => order[..bs].to_vec(),
            BatchPolicy::Cycle => (0..bs).map(|i| order[(t * bs + i) % order.len()]).collect(),
        };
        let batch = pool.select_rows(&idx);

        let tau = match &cached_ref {
            Some((cached_idx, tau)) if *cached_idx == idx => tau.clone(),
            _ => {
                let z_pt = capture(&ref_model, ref_mode, &batch, SourceTag::Pretrained)?
                    .subset(&selected)?;
                let tau = masks(&z_pt);
                cached_ref = Some((idx.clone(), tau.clone()));
                tau
            }
        };

        // Forward with trainable adapters; hinge terms per selected layer.
        let mut g: Graph<S> = Graph::new();
        let nx = g.constant(batch.clone());
        let fwd = model.forward(&mut g, nx, &ForwardOptions::train_adapters())?;
        let n_scale = S::from_f64_exact(batch.rows() as f64).recip();

        let mut parts = Vec::with_capacity(selected.len());
        let mut total: Option<crate::autodiff::NodeId> = None;
        for (pos, name) in selected.iter().enumerate() {
            let staged = fwd
                .layer(name)
                .ok_or_else(|| Error::Config(format!("no layer named '{name}'")))?;
            let tau_l = tau
                .get(name)
                .ok_or_else(|| Error::Internal(format!("missing mask for '{name}'")))?;
            let neg_tau = g.constant(tau_l.scale(-S::one()));
            let prod = g.hadamard(staged.z, neg_tau)?;
            let u = g.add_scalar(prod, margin);
            let s = g.activation(u, Activation::Relu);
            let sq = g.hadamard(s, s)?;
            let sum = g.sum_all(sq);
            let w2 = S::from_f64_exact(weights[pos] * weights[pos]);
            let part = g.scale(sum, w2 * n_scale);
            parts.push(part);
            total = Some(match total {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
        let total = total.expect("at least one selected layer");
        let loss = g.scalar(total).to_f64().unwrap();
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: t,
                message: format!("matching loss became {loss}"),
            });
        }

        // Mismatch rate of the current adapter state on this batch.
        let z_ft_entries: Vec<(String, Tensor2<S>)> = selected
            .iter()
            .map(|name| {
                let staged = fwd.layer(name).expect("selected layer staged");
                (name.clone(), g.value(staged.z).clone())
            })
            .collect();
        let z_ft = ActivationCapture {
            source: SourceTag::Finetuned,
            entries: z_ft_entries,
        };
        let mismatch = mask_mismatch_rate(&masks(&z_ft), &tau)?;

        let layer_shares: Vec<f64> = parts
            .iter()
            .map(|&p| {
                let v = g.scalar(p).to_f64().unwrap();
                if loss > 0.0 {
                    v / loss
                } else {
                    0.0
                }
            })
            .collect();
        rows.push(Stage1Row {
            step: t,
            loss,
            mismatch_rate: mismatch,
            layer_shares,
        });

        g.backward(total)?;

        // Stable parameter order: adapted layers by depth, A then B.
        let mut grads: Vec<Tensor2<S>> = Vec::with_capacity(adapted.len() * 2);
        for name in &adapted {
            let staged = fwd.layer(name).expect("adapted layer staged");
            let (a_id, b_id) = (staged.a.expect("staged A"), staged.b.expect("staged B"));
            let (ar, ac) = g.value(a_id).shape();
            let (br, bc) = g.value(b_id).shape();
            grads.push(g.grad(a_id).unwrap_or_else(|| Tensor2::zeros(ar, ac)));
            grads.push(g.grad(b_id).unwrap_or_else(|| Tensor2::zeros(br, bc)));
        }
        let mut params: Vec<&mut Tensor2<S>> = Vec::with_capacity(grads.len());
        for layer in model.layers_mut() {
            if let Some(ad) = layer.adapter_mut() {
                let (a, b) = ad.factors_mut();
                params.push(a);
                params.push(b);
            }
        }
        let mut pairs: Vec<(&mut Tensor2<S>, &Tensor2<S>)> =
            params.into_iter().zip(grads.iter()).collect();
        optimizer.step(&mut pairs, cfg.step_size);
    }

    Ok(Stage1Trace {
        selected_layers: selected,
        rows,
    })
}
