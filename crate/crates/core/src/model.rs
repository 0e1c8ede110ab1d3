//! Frozen linear layers with optional adapters, assembled into small MLPs.
//!
//! Convention: a layer's weight `W` is d x k (output x input); a batch `X`
//! is N x k and the pre-activation is `z = X W^T` (N x d). With an adapter
//! attached the effective weight is `W0 + eta A B`, applied in factored form
//! `z = X W0^T + eta (X B^T) A^T`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, InitScheme, LoraAdapter};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::util::subseed;

/// A linear layer whose base weight is never updated by adapter training.
#[derive(Debug, Clone)]
pub struct FrozenLinear<S: Scalar> {
    name: String,
    w0: Tensor2<S>,
    adapter: Option<LoraAdapter<S>>,
    activation: Activation,
}

impl<S: Scalar> FrozenLinear<S> {
    pub fn new(name: impl Into<String>, w0: Tensor2<S>, activation: Activation) -> Self {
        Self {
            name: name.into(),
            w0,
            adapter: None,
            activation,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn w0(&self) -> &Tensor2<S> {
        &self.w0
    }

    /// Mutable base weight. Adapter-training paths never touch this; it
    /// exists for model construction, full-parameter pretraining, and
    /// perturbation tests.
    pub fn w0_mut(&mut self) -> &mut Tensor2<S> {
        &mut self.w0
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn adapter(&self) -> Option<&LoraAdapter<S>> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LoraAdapter<S>> {
        self.adapter.as_mut()
    }

    /// Output dimension d.
    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    /// Input dimension k.
    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn attach(&mut self, adapter: LoraAdapter<S>) -> Result<()> {
        if adapter.out_dim() != self.out_dim() || adapter.in_dim() != self.in_dim() {
            return Err(Error::Config(format!(
                "adapter {}x{} does not fit layer '{}' ({}x{})",
                adapter.out_dim(),
                adapter.in_dim(),
                self.name,
                self.out_dim(),
                self.in_dim()
            )));
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn detach_adapter(&mut self) -> Option<LoraAdapter<S>> {
        self.adapter.take()
    }

    /// Dense effective weight `W0 + delta`. With no adapter (or zero `B`)
    /// this is `W0` exactly; the layer itself is never mutated.
    pub fn merge(&self) -> Tensor2<S> {
        match &self.adapter {
            Some(ad) => self.w0.add(&ad.delta()).expect("adapter fits layer"),
            None => self.w0.clone(),
        }
    }

    /// Plain (graph-free) forward pass returning pre-activation and
    /// activation. Mirrors the staged path operation-for-operation.
    pub fn forward_plain(
        &self,
        x: &Tensor2<S>,
        with_adapter: bool,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        if x.cols() != self.in_dim() {
            return Err(Error::dims("forward", x.shape(), self.w0.shape()));
        }
        let mut z = x.matmul(&self.w0.transpose())?;
        if with_adapter {
            if let Some(ad) = &self.adapter {
                let t1 = x.matmul(&ad.b().transpose())?;
                let t2 = t1.matmul(&ad.a().transpose())?;
                z = z.add(&t2.scale(ad.eta_s()))?;
            }
        }
        let h = if self.activation == Activation::Identity {
            z.clone()
        } else {
            z.map(|v| self.activation.apply(v))
        };
        Ok((z, h))
    }
}

/// Which layers receive adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every layer with a nonlinearity (the feed-forward body).
    Hidden,
    /// Every layer including the output head.
    All,
    /// Explicit layer names.
    Named(Vec<String>),
}

/// Whether staged forwards apply adapters or run the bare base weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Attached,
    Detached,
}

/// Staging choices for one graph forward.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub adapters: AdapterMode,
    /// Stage adapter factors as trainable graph parameters.
    pub train_adapters: bool,
    /// Stage base weights as trainable graph parameters (pretraining and
    /// full-gradient probes only; adapter training never sets this).
    pub train_base: bool,
    /// Build the named layer through a dense `W0 + delta` node so the
    /// gradient with respect to the effective weight can be read off.
    pub dense_layer: Option<String>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            adapters: AdapterMode::Attached,
            train_adapters: false,
            train_base: false,
            dense_layer: None,
        }
    }

    pub fn base_only() -> Self {
        Self {
            adapters: AdapterMode::Detached,
            train_adapters: false,
            train_base: false,
            dense_layer: None,
        }
    }

    pub fn train_adapters() -> Self {
        Self {
            adapters: AdapterMode::Attached,
            train_adapters: true,
            train_base: false,
            dense_layer: None,
        }
    }
}

/// Node handles for one staged layer.
#[derive(Debug, Clone)]
pub struct StagedLayer {
    pub name: String,
    /// Input to the layer.
    pub x: NodeId,
    /// Pre-activation `z`.
    pub z: NodeId,
    /// Post-activation output (equals `z` for identity layers).
    pub h: NodeId,
    /// Base weight leaf.
    pub w0: NodeId,
    /// Adapter factor leaves when staged.
    pub a: Option<NodeId>,
    pub b: Option<NodeId>,
    /// Dense effective-weight node when requested via `dense_layer`.
    pub w_eff: Option<NodeId>,
}

/// Handles produced by a staged forward pass.
#[derive(Debug, Clone)]
pub struct StagedForward {
    pub layers: Vec<StagedLayer>,
    pub logits: NodeId,
}

impl StagedForward {
    pub fn layer(&self, name: &str) -> Option<&StagedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// A stack of frozen linear layers; the last layer emits logits.
#[derive(Debug, Clone)]
pub struct MlpModel<S: Scalar> {
    layers: Vec<FrozenLinear<S>>,
}

impl<S: Scalar> MlpModel<S> {
    pub fn new(layers: Vec<FrozenLinear<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(Error::Config(format!(
                    "layer '{}' expects {} inputs but '{}' produces {}",
                    w[1].name(),
                    w[1].in_dim(),
                    w[0].name(),
                    w[0].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random MLP: hidden layers named `fc0..`, output layer named `head`.
    /// Weights are He-initialized from the seed.
    pub fn from_widths(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Config("zero-width layer in model spec".into()));
        }
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, &width) in hidden.iter().enumerate() {
            let w = he_weights::<S>(width, fan_in, subseed(seed, 0x100 + i as u64));
            layers.push(FrozenLinear::new(format!("fc{i}"), w, activation));
            fan_in = width;
        }
        let w = he_weights::<S>(classes, fan_in, subseed(seed, 0x100 + hidden.len() as u64));
        layers.push(FrozenLinear::new("head", w, Activation::Identity));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[FrozenLinear<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FrozenLinear<S>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&FrozenLinear<S>> {
        self.layers
            .iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::Config(format!("no layer named '{name}'")))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut FrozenLinear<S>> {
        self.layers
            .iter_mut()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::Config(format!("no layer named '{name}'")))
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name().to_string()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Names selected by a placement rule, in layer order.
    pub fn placement_names(&self, placement: &Placement) -> Result<Vec<String>> {
        match placement {
            Placement::Hidden => Ok(self
                .layers
                .iter()
                .filter(|l| l.activation() != Activation::Identity)
                .map(|l| l.name().to_string())
                .collect()),
            Placement::All => Ok(self.layer_names()),
            Placement::Named(names) => {
                for n in names {
                    self.layer(n)?;
                }
                Ok(names.clone())
            }
        }
    }

    /// Draws and attaches adapters to the placed layers. Per-layer seeds are
    /// derived from `seed` and the layer position, so factor draws are
    /// decorrelated but reproducible.
    pub fn attach_adapters(
        &mut self,
        placement: &Placement,
        rank: usize,
        alpha: f64,
        scheme: &InitScheme,
        seed: u64,
    ) -> Result<()> {
        let names = self.placement_names(placement)?;
        if names.is_empty() {
            return Err(Error::Config("adapter placement selects no layers".into()));
        }
        for (i, name) in names.iter().enumerate() {
            let (d, k) = {
                let layer = self.layer(name)?;
                (layer.out_dim(), layer.in_dim())
            };
            let adapter = init_adapter::<S>(d, k, rank, alpha, scheme, subseed(seed, i as u64))?;
            self.layer_mut(name)?.attach(adapter)?;
        }
        Ok(())
    }

    /// Names of layers that currently carry adapters, in depth order.
    pub fn adapted_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.adapter().is_some())
            .map(|l| l.name().to_string())
            .collect()
    }

    /// Total trainable adapter parameters.
    pub fn adapter_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.adapter())
            .map(|a| a.param_count())
            .sum()
    }

    /// Clones of the attached adapters, keyed by layer name.
    pub fn snapshot_adapters(&self) -> Vec<(String, LoraAdapter<S>)> {
        self.layers
            .iter()
            .filter_map(|l| l.adapter().map(|a| (l.name().to_string(), a.clone())))
            .collect()
    }

    /// Replaces adapters from a snapshot (layer names must match).
    pub fn restore_adapters(&mut self, snapshot: &[(String, LoraAdapter<S>)]) -> Result<()> {
        for (name, adapter) in snapshot {
            self.layer_mut(name)?.attach(adapter.clone())?;
        }
        Ok(())
    }

    /// Stages one forward pass on the graph.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        opts: &ForwardOptions,
    ) -> Result<StagedForward> {
        let mut staged = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let w0 = if opts.train_base {
                g.param(layer.w0().clone())
            } else {
                g.constant(layer.w0().clone())
            };
            let dense_here = opts.dense_layer.as_deref() == Some(layer.name());
            let adapter = match opts.adapters {
                AdapterMode::Attached => layer.adapter(),
                AdapterMode::Detached => None,
            };

            let (z, a_id, b_id, w_eff) = match adapter {
                Some(ad) => {
                    let stage = |g: &mut Graph<S>, t: &Tensor2<S>| {
                        if opts.train_adapters {
                            g.param(t.clone())
                        } else {
                            g.constant(t.clone())
                        }
                    };
                    let a_id = stage(g, ad.a());
                    let b_id = stage(g, ad.b());
                    if dense_here {
                        let ab = g.matmul(a_id, b_id)?;
                        let delta = g.scale(ab, ad.eta_s());
                        let w_eff = g.add(w0, delta)?;
                        let wt = g.transpose(w_eff);
                        let z = g.matmul(cur, wt)?;
                        (z, Some(a_id), Some(b_id), Some(w_eff))
                    } else {
                        let bt = g.transpose(b_id);
                        let t1 = g.matmul(cur, bt)?;
                        let at = g.transpose(a_id);
                        let t2 = g.matmul(t1, at)?;
                        let w0t = g.transpose(w0);
                        let zb = g.matmul(cur, w0t)?;
                        let scaled = g.scale(t2, ad.eta_s());
                        let z = g.add(zb, scaled)?;
                        (z, Some(a_id), Some(b_id), None)
                    }
                }
                None => {
                    let w0t = g.transpose(w0);
                    let z = g.matmul(cur, w0t)?;
                    (z, None, None, None)
                }
            };

            let h = if layer.activation() == Activation::Identity {
                z
            } else {
                g.activation(z, layer.activation())
            };
            staged.push(StagedLayer {
                name: layer.name().to_string(),
                x: cur,
                z,
                h,
                w0,
                a: a_id,
                b: b_id,
                w_eff,
            });
            cur = h;
        }
        Ok(StagedForward {
            logits: cur,
            layers: staged,
        })
    }

    /// Logits for a batch, adapters attached unless detached mode is given.
    pub fn logits(&self, x: &Tensor2<S>, mode: AdapterMode) -> Result<Tensor2<S>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            let (_, h) = layer.forward_plain(&cur, mode == AdapterMode::Attached)?;
            cur = h;
        }
        Ok(cur)
    }

    /// Argmax class predictions (first maximal index wins ties).
    pub fn predict(&self, x: &Tensor2<S>) -> Result<Vec<usize>> {
        let logits = self.logits(x, AdapterMode::Attached)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn he_weights<S: Scalar>(d: usize, k: usize, seed: u64) -> Tensor2<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f64, (2.0 / k as f64).sqrt()).expect("valid std");
    Tensor2::from_fn(d, k, |_, _| S::from_f64_exact(dist.sample(&mut rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::InitScheme;

    type M = MlpModel<f64>;

    fn toy_model(seed: u64) -> M {
        M::from_widths(4, &[6, 5], 3, Activation::Relu, seed).unwrap()
    }

    fn toy_batch() -> Tensor2<f64> {
        Tensor2::from_fn(8, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin())
    }

    #[test]
    fn zero_b_adapter_leaves_forward_unchanged() {
        let mut m = toy_model(1);
        let x = toy_batch();
        let base = m.logits(&x, AdapterMode::Detached).unwrap();
        m.attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::KaimingAZeroB, 5)
            .unwrap();
        let adapted = m.logits(&x, AdapterMode::Attached).unwrap();
        assert_eq!(base.data(), adapted.data());
    }

    #[test]
    fn factored_forward_matches_dense_merge_oracle() {
        let mut m = toy_model(2);
        m.attach_adapters(&Placement::All, 2, 6.0, &InitScheme::Gaussian, 11)
            .unwrap();
        let x = toy_batch();
        // dense oracle: x (W0 + eta A B)^T, layer by layer
        let mut cur = x.clone();
        for layer in m.layers() {
            let z = cur.matmul(&layer.merge().transpose()).unwrap();
            cur = if layer.activation() == Activation::Identity {
                z
            } else {
                z.map(|v| layer.activation().apply(v))
            };
        }
        let fast = m.logits(&x, AdapterMode::Attached).unwrap();
        assert!(fast.max_abs_diff(&cur).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_pre_activation() {
        let mut m = toy_model(3);
        m.attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::Gaussian, 7)
            .unwrap();
        let x = Tensor2::zeros(2, 4);
        let (z, _) = m.layers()[0].forward_plain(&x, true).unwrap();
        assert_eq!(z.frobenius_sq(), 0.0);
    }

    #[test]
    fn merge_is_pure_and_idempotent() {
        let mut m = toy_model(4);
        m.attach_adapters(&Placement::Hidden, 3, 6.0, &InitScheme::Gaussian, 13)
            .unwrap();
        let m1 = m.layers()[0].merge();
        let m2 = m.layers()[0].merge();
        assert!(m1.bits_eq(&m2));
        // no adapter => merge == W0 exactly
        assert!(m.layers()[2].merge().bits_eq(m.layers()[2].w0()));
    }

    #[test]
    fn staged_forward_matches_plain_forward() {
        let mut m = toy_model(5);
        m.attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::Gaussian, 17)
            .unwrap();
        let x = toy_batch();
        let mut g = Graph::new();
        let nx = g.constant(x.clone());
        let fwd = m.forward(&mut g, nx, &ForwardOptions::inference()).unwrap();
        let plain = m.logits(&x, AdapterMode::Attached).unwrap();
        assert!(g.value(fwd.logits).bits_eq(&plain));
    }

    #[test]
    fn placement_hidden_skips_the_head() {
        let mut m = toy_model(6);
        m.attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::KaimingAZeroB, 1)
            .unwrap();
        assert_eq!(m.adapted_layer_names(), vec!["fc0", "fc1"]);
        assert!(m.layer("head").unwrap().adapter().is_none());
    }

    #[test]
    fn unknown_placement_name_is_config_error() {
        let m = toy_model(7);
        let err = m.placement_names(&Placement::Named(vec!["fc9".into()]));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn trainable_count_is_rank_times_dims() {
        let mut m = toy_model(8);
        m.attach_adapters(&Placement::Hidden, 2, 4.0, &InitScheme::KaimingAZeroB, 1)
            .unwrap();
        // fc0: 6x4, fc1: 5x6 -> r(d+k) each
        assert_eq!(m.adapter_param_count(), 2 * (6 + 4) + 2 * (5 + 6));
    }
}
