//! Low-rank adapter factors, initialization schemes, and checkpointing.
//!
//! An adapter is the pair `A` (d x r) and `B` (r x k) with scaling
//! `eta = alpha / rank`; the injected update is `delta = eta * A * B`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Standard deviation of the Gaussian baseline initialization.
pub const GAUSSIAN_INIT_STD: f64 = 0.02;

/// How adapter factors are drawn at creation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `A` ~ Normal(0, 2/d), `B` = 0, so the injected update starts at zero.
    KaimingAZeroB,
    /// `A` has orthonormal columns (QR of a seeded Gaussian), `B` = 0.
    Orthogonal,
    /// Both factors i.i.d. Normal(0, 0.02^2); the update starts small but nonzero.
    Gaussian,
    /// Factors loaded from a saved adapter checkpoint.
    FromCheckpoint(std::path::PathBuf),
}

impl InitScheme {
    pub fn name(&self) -> &str {
        match self {
            InitScheme::KaimingAZeroB => "kaiming_a_zero_b",
            InitScheme::Orthogonal => "orthogonal",
            InitScheme::Gaussian => "gaussian",
            InitScheme::FromCheckpoint(_) => "from_checkpoint",
        }
    }
}

/// Low-rank factor pair with scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S: Scalar> {
    a: Tensor2<S>,
    b: Tensor2<S>,
    alpha: f64,
    rank: usize,
    seed: u64,
}

impl<S: Scalar> LoraAdapter<S> {
    /// Builds an adapter from explicit factors. Shape and rank constraints
    /// are enforced here so every constructed adapter is well-formed.
    pub fn from_factors(a: Tensor2<S>, b: Tensor2<S>, alpha: f64, seed: u64) -> Result<Self> {
        let rank = a.cols();
        if b.rows() != rank {
            return Err(Error::dims("lora factors", a.shape(), b.shape()));
        }
        let (d, k) = (a.rows(), b.cols());
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!(
                "rank {rank} out of range for a {d}x{k} layer (need 1 <= rank <= {})",
                d.min(k)
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            a,
            b,
            alpha,
            rank,
            seed,
        })
    }

    pub fn a(&self) -> &Tensor2<S> {
        &self.a
    }

    pub fn b(&self) -> &Tensor2<S> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor2<S> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor2<S> {
        &mut self.b
    }

    /// Both factors mutably, for in-place optimizer updates.
    pub fn factors_mut(&mut self) -> (&mut Tensor2<S>, &mut Tensor2<S>) {
        (&mut self.a, &mut self.b)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output dimension d of the adapted layer.
    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    /// Input dimension k of the adapted layer.
    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    /// Scaling factor eta = alpha / rank.
    pub fn eta(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn eta_s(&self) -> S {
        S::from_f64_exact(self.eta())
    }

    /// Dense injected update `eta * A * B` (d x k).
    pub fn delta(&self) -> Tensor2<S> {
        self.a
            .matmul(&self.b)
            .expect("factor shapes")
            .scale(self.eta_s())
    }

    /// Trainable parameter count r(d + k).
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Draws a fresh adapter for a d x k layer.
pub fn init_adapter<S: Scalar>(
    d: usize,
    k: usize,
    rank: usize,
    alpha: f64,
    scheme: &InitScheme,
    seed: u64,
) -> Result<LoraAdapter<S>> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::Config(format!(
            "rank {rank} out of range for a {d}x{k} layer (need 1 <= rank <= {})",
            d.min(k)
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scheme {
        InitScheme::KaimingAZeroB => {
            let std = (2.0 / d as f64).sqrt();
            let a = gaussian_tensor(&mut rng, d, rank, std);
            LoraAdapter::from_factors(a, Tensor2::zeros(rank, k), alpha, seed)
        }
        InitScheme::Orthogonal => {
            let a = orthonormal_columns(&mut rng, d, rank);
            LoraAdapter::from_factors(a, Tensor2::zeros(rank, k), alpha, seed)
        }
        InitScheme::Gaussian => {
            let a = gaussian_tensor(&mut rng, d, rank, GAUSSIAN_INIT_STD);
            let b = gaussian_tensor(&mut rng, rank, k, GAUSSIAN_INIT_STD);
            LoraAdapter::from_factors(a, b, alpha, seed)
        }
        InitScheme::FromCheckpoint(path) => {
            let loaded: LoraAdapter<f64> = load_checkpoint(path)?;
            if loaded.out_dim() != d || loaded.in_dim() != k || loaded.rank() != rank {
                return Err(Error::Config(format!(
                    "checkpoint {} holds a rank-{} {}x{} adapter, expected rank-{rank} {d}x{k}",
                    path.display(),
                    loaded.rank(),
                    loaded.out_dim(),
                    loaded.in_dim()
                )));
            }
            let a = convert_tensor::<S>(loaded.a());
            let b = convert_tensor::<S>(loaded.b());
            LoraAdapter::from_factors(a, b, loaded.alpha(), loaded.seed())
        }
    }
}

fn convert_tensor<S: Scalar>(t: &Tensor2<f64>) -> Tensor2<S> {
    Tensor2::from_fn(t.rows(), t.cols(), |i, j| S::from_f64_exact(t.get(i, j)))
}

fn gaussian_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor2<S> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(S::from_f64_exact(dist.sample(rng)));
    }
    Tensor2::new(rows, cols, data).expect("finite gaussian draw")
}

/// First r columns of Q from a seeded Gaussian matrix, via twice-applied
/// modified Gram-Schmidt. Two passes keep `A^T A - I` at machine precision.
fn orthonormal_columns<S: Scalar>(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Tensor2<S> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    let dist = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut j = 0;
    while j < r {
        let mut v: Vec<f64> = (0..d).map(|_| dist.sample(rng)).collect();
        for _ in 0..2 {
            for q in cols.iter() {
                let dot: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q.iter()) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // astronomically unlikely for a Gaussian draw; redraw the column
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
        j += 1;
    }
    Tensor2::from_fn(d, r, |i, c| S::from_f64_exact(cols[c][i]))
}

// --- Checkpoint container -------------------------------------------------
//
// Versioned little-endian binary layout:
//   magic "LRCP" | version u32 | d u64 | k u64 | rank u64 | alpha f64 |
//   seed u64 | A payload (d*rank f64) | B payload (rank*k f64)
//
// Payloads are raw IEEE-754 bits, so save/load round-trips bit-exactly.

const CHECKPOINT_MAGIC: &[u8; 4] = b"LRCP";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes an f64 adapter to the versioned binary container.
pub fn save_checkpoint(adapter: &LoraAdapter<f64>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(adapter.out_dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(adapter.in_dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(adapter.rank() as u64).to_le_bytes());
    buf.extend_from_slice(&adapter.alpha().to_le_bytes());
    buf.extend_from_slice(&adapter.seed().to_le_bytes());
    for &v in adapter.a().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in adapter.b().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Loads an adapter saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LoraAdapter<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} is truncated ({} bytes)",
                path.display(),
                bytes.len()
            )));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    let magic = take(&mut cursor, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an adapter checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let d = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let rank = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let alpha = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());

    let mut read_payload = |rows: usize, cols: usize| -> Result<Tensor2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(
                take(&mut cursor, 8)?.try_into().unwrap(),
            ));
        }
        Tensor2::new(rows, cols, data)
    };
    let a = read_payload(d, rank)?;
    let b = read_payload(rank, k)?;
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} has {} trailing bytes",
            path.display(),
            bytes.len() - cursor
        )));
    }
    LoraAdapter::from_factors(a, b, alpha, seed)
}
