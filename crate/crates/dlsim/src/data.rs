//! Synthetic dataset generation, CSV ingestion, and uniform disjoint
//! partitioning of a training set across users.

use crate::numkit::{Matrix, NumError, StreamRng};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: String,
        line: usize,
        message: String,
    },
    #[error("empty dataset file {0}")]
    EmptyFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Labeled samples: one input row per sample, dense class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Disjoint per-user shards plus a holdout pool used as the non-member /
/// evaluation set.
#[derive(Clone, Debug)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub holdout: Vec<usize>,
}

impl Partition {
    pub fn n_users(&self) -> usize {
        self.shards.len()
    }

    /// FNV-1a over the shard and holdout layout; lets paired runs prove
    /// they trained on the identical split.
    pub fn content_hash(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mix = |v: u64, hash: &mut u64| {
            for b in v.to_le_bytes() {
                *hash ^= b as u64;
                *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for shard in &self.shards {
            mix(shard.len() as u64, &mut hash);
            for &row in shard {
                mix(row as u64, &mut hash);
            }
        }
        mix(u64::MAX, &mut hash);
        for &row in &self.holdout {
            mix(row as u64, &mut hash);
        }
        format!("{hash:016x}")
    }
}

/// Gaussian blob classes: one mean per class drawn on a sphere of radius
/// `3 * spread`, per-coordinate noise with standard deviation `spread`,
/// class counts balanced within one sample.
pub fn make_blobs(
    rng: &mut StreamRng,
    n_samples: usize,
    input_dim: usize,
    num_classes: usize,
    spread: f64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 || n_samples < num_classes {
        return Err(DataError::InvalidArgument(format!(
            "need n_samples >= num_classes >= 2, got {n_samples} and {num_classes}"
        )));
    }
    if input_dim == 0 {
        return Err(DataError::InvalidArgument("input_dim must be >= 1".into()));
    }
    if !(spread > 0.0) {
        return Err(DataError::InvalidArgument(format!("spread must be > 0, got {spread}")));
    }

    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        // random direction, scaled onto the sphere
        let mut dir: Vec<f64> = (0..input_dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in dir.iter_mut() {
            *v *= 3.0 * spread / norm;
        }
        means.push(dir);
    }

    // balanced label list: the first n % C classes get one extra sample
    let base = n_samples / num_classes;
    let extra = n_samples % num_classes;
    let mut labels = Vec::with_capacity(n_samples);
    for class in 0..num_classes {
        let count = base + usize::from(class < extra);
        labels.extend(std::iter::repeat(class).take(count));
    }
    rng.shuffle(&mut labels);

    let mut data = Vec::with_capacity(n_samples * input_dim);
    for &y in &labels {
        for d in 0..input_dim {
            data.push(means[y][d] + rng.normal(0.0, spread));
        }
    }
    Ok(Dataset {
        inputs: Matrix::from_data(n_samples, input_dim, data)?,
        labels,
        name: format!("blobs-{n_samples}x{input_dim}c{num_classes}"),
    })
}

/// Parse a CSV dataset: comma-separated float features, final column an
/// integer label, no header. Labels are remapped to dense `0..C-1` in
/// first-occurrence order.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, &path.display().to_string())
}

fn parse_csv(text: &str, path: &str) -> Result<Dataset, DataError> {
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(DataError::MalformedRow {
                path: path.into(),
                line: line_no,
                message: "need at least one feature and a label".into(),
            });
        }
        let n_features = fields.len() - 1;
        match width {
            None => width = Some(n_features),
            Some(w) if w != n_features => {
                return Err(DataError::MalformedRow {
                    path: path.into(),
                    line: line_no,
                    message: format!("expected {w} features, found {n_features}"),
                });
            }
            _ => {}
        }
        for f in &fields[..n_features] {
            let v: f64 = f.trim().parse().map_err(|_| DataError::MalformedRow {
                path: path.into(),
                line: line_no,
                message: format!("non-numeric feature '{}'", f.trim()),
            })?;
            if !v.is_finite() {
                return Err(DataError::MalformedRow {
                    path: path.into(),
                    line: line_no,
                    message: format!("non-finite feature '{}'", f.trim()),
                });
            }
            data.push(v);
        }
        let label: i64 = fields[n_features].trim().parse().map_err(|_| DataError::MalformedRow {
            path: path.into(),
            line: line_no,
            message: format!("non-integer label '{}'", fields[n_features].trim()),
        })?;
        raw_labels.push(label);
        rows += 1;
    }

    if rows == 0 {
        return Err(DataError::EmptyFile(path.into()));
    }

    // dense remap preserving first occurrence
    let mut order: Vec<i64> = Vec::new();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|&l| match order.iter().position(|&o| o == l) {
            Some(i) => i,
            None => {
                order.push(l);
                order.len() - 1
            }
        })
        .collect();

    Ok(Dataset {
        inputs: Matrix::from_data(rows, width.unwrap(), data)?,
        labels,
        name: path.into(),
    })
}

/// Uniform partition: holdout of size `ceil(holdout_fraction * |X|)` drawn
/// first, the rest shuffled and split into `n_users` equal shards; leftover
/// rows join the holdout.
pub fn partition_uniform(
    rng: &mut StreamRng,
    dataset: &Dataset,
    n_users: usize,
    holdout_fraction: f64,
) -> Result<Partition, DataError> {
    if n_users < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 users, got {n_users}"
        )));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(DataError::InvalidArgument(format!(
            "holdout_fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let total = dataset.len();
    let holdout_target = (holdout_fraction * total as f64).ceil() as usize;
    let remaining = total.saturating_sub(holdout_target);
    let shard_size = remaining / n_users;
    if shard_size == 0 {
        return Err(DataError::InvalidArgument(format!(
            "too few rows: {total} rows cannot give {n_users} non-empty shards after holdout {holdout_target}"
        )));
    }

    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);
    let mut holdout: Vec<usize> = order[..holdout_target].to_vec();
    let mut shards = Vec::with_capacity(n_users);
    let mut cursor = holdout_target;
    for _ in 0..n_users {
        shards.push(order[cursor..cursor + shard_size].to_vec());
        cursor += shard_size;
    }
    holdout.extend_from_slice(&order[cursor..]);
    Ok(Partition { shards, holdout })
}

pub fn check_disjoint(partition: &Partition) -> bool {
    let mut seen = BTreeSet::new();
    for shard in &partition.shards {
        for &row in shard {
            if !seen.insert(row) {
                return false;
            }
        }
    }
    partition.holdout.iter().all(|&row| seen.insert(row))
}
