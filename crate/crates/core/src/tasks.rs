//! Seeded synthetic tasks and CSV-backed datasets.
//!
//! Everything here is a pure function of its seed and parameters, so any
//! experiment that records its seeds can be regenerated byte-for-byte.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::tensor::Tensor2;
use crate::util::subseed;
use crate::{Model, Real, Tensor};

/// Labeled classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            inputs,
            labels,
            classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows and labels at the given indices.
    pub fn select(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Splits off the first `head` rows of every class block, preserving
    /// order. Used to carve a train/eval pair out of one generated task.
    pub fn split_per_class(&self, head: usize) -> Result<(Dataset, Dataset)> {
        let mut head_idx = Vec::new();
        let mut tail_idx = Vec::new();
        let mut seen = vec![0usize; self.classes];
        for (i, &label) in self.labels.iter().enumerate() {
            if seen[label] < head {
                head_idx.push(i);
            } else {
                tail_idx.push(i);
            }
            seen[label] += 1;
        }
        if tail_idx.is_empty() {
            return Err(Error::Data(format!(
                "split head {head} consumes the whole dataset ({} rows)",
                self.len()
            )));
        }
        let (hx, hy) = self.select(&head_idx);
        let (tx, ty) = self.select(&tail_idx);
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

/// Gaussian class clusters with seeded means: `per_class` points per class,
/// point = mean + spread * N(0, I). Rows are class-major.
pub fn gen_blobs(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || per_class == 0 {
        return Err(Error::Config("blob counts must be at least 1".into()));
    }
    if spread <= 0.0 {
        return Err(Error::Config(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_dist = Normal::new(0.0, 2.5).expect("valid std");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dims).map(|_| mean_dist.sample(&mut rng)).collect())
        .collect();

    let rows = num_classes * per_class;
    let mut data = Vec::with_capacity(rows * dims);
    let mut labels = Vec::with_capacity(rows);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                data.push(m + spread * noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        "blobs",
        Tensor::new(rows, dims, data)?,
        labels,
        num_classes,
        seed,
    )
}

/// Random teacher network labeling random inputs by argmax. Returns the
/// dataset together with the teacher, which can serve as a frozen base
/// whose activation boundaries reflect the task.
///
/// When `n >= 50 * classes`, degenerate draws (a class with no samples)
/// are regenerated from follow-on seeds; more than 64 retries is a
/// data error.
pub fn gen_teacher_task(
    teacher_widths: &[usize],
    activation: Activation,
    dims: usize,
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Model)> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    for attempt in 0..64u64 {
        let attempt_seed = subseed(seed, attempt);
        let teacher = MlpModel::from_widths(
            dims,
            teacher_widths,
            classes,
            activation,
            subseed(attempt_seed, 0xA),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(attempt_seed, 0xB));
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let inputs = Tensor2::from_fn(n, dims, |_, _| noise.sample(&mut rng));
        let labels = teacher.predict(&inputs)?;

        let mut counts = vec![0usize; classes];
        for &l in &labels {
            counts[l] += 1;
        }
        if n >= 50 * classes && counts.contains(&0) {
            continue;
        }
        let data = Dataset::new("teacher", inputs, labels, classes, seed)?;
        return Ok((data, teacher));
    }
    Err(Error::Data(
        "teacher task stayed degenerate after 64 regenerations".into(),
    ))
}

/// Expected CSV layout: a header row, `features` float columns, then one
/// integer label column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub features: usize,
    pub classes: usize,
}

/// Parses a dataset from CSV. Row order is preserved; malformed rows and
/// out-of-range labels are data errors naming the line.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;

    let mut data: Vec<Real> = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if record.len() != schema.features + 1 {
            return Err(Error::Data(format!(
                "line {line}: {} columns, expected {}",
                record.len(),
                schema.features + 1
            )));
        }
        for j in 0..schema.features {
            let v: Real = record[j]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("line {line}, column {}: {e}", j + 1)))?;
            data.push(v);
        }
        let label: usize = record[schema.features]
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("line {line}, label column: {e}")))?;
        if label >= schema.classes {
            return Err(Error::Data(format!(
                "line {line}: unknown label {label} (schema has {} classes)",
                schema.classes
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no data rows",
            path.display()
        )));
    }
    let rows = labels.len();
    Dataset::new(
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        Tensor::new(rows, schema.features, data)?,
        labels,
        schema.classes,
        0,
    )
}

/// Writes a dataset in the [`load_csv`] layout. Floats use the shortest
/// round-trip representation, so write-then-load is exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..dataset.features())
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset
            .inputs
            .row(i)
            .iter()
            .map(|v| format!("{v}"))
            .chain(std::iter::once(dataset.labels[i].to_string()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
