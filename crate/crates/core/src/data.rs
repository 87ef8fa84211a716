//! Datasets, non-IID partitioning across clients, and the label-stratified
//! sample each client hands to the enclave before training.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::BatchView;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX payload has {extra} trailing bytes beyond the header-declared size")]
    TrailingBytes { extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot cut {requested} shards from {available} examples")]
    TooManyShards { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// `ceil(fraction * n)`, immune to representation noise such as `0.03 * 100`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

/// Labelled examples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if input_dim == 0 {
            return Err(DataError::Invalid("input_dim must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} rows of dim {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView::new(&self.features, &self.labels, self.input_dim)
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Same features with labels remapped by `f`.
    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| f(l)).collect(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// CSV with a header of feature columns `x0..` followed by `label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        writer
            .write_record(&header)
            .map_err(|e| DataError::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            record.push(self.labels[i].to_string());
            writer
                .write_record(&record)
                .map_err(|e| DataError::Csv(e.to_string()))?;
        }
        writer.flush().map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Reads the CSV layout written by [`Dataset::write_csv`]. The class
    /// count is `max(label) + 1` unless `num_classes` is given.
    pub fn read_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset, DataError> {
        let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| DataError::Csv(e.to_string()))?;
        let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
        if headers.iter().next_back() != Some("label") || headers.len() < 2 {
            return Err(DataError::Csv("last column must be `label`".into()));
        }
        let dim = headers.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
            for field in record.iter().take(dim) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Csv(format!("row {}: bad number {field:?}", line + 1)))?;
                features.push(v);
            }
            let label: usize = record[dim]
                .trim()
                .parse()
                .map_err(|_| DataError::Csv(format!("row {}: bad label {:?}", line + 1, &record[dim])))?;
            labels.push(label);
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, dim, classes)
    }
}

/// Gaussian blobs, one or more isotropic modes per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    /// Standard deviation of each mode's mean coordinates.
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    pub seed: u64,
}

fn default_mean_scale() -> f64 {
    1.0
}

fn default_modes() -> usize {
    1
}

impl SyntheticSpec {
    pub fn new(classes: usize, input_dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            classes,
            input_dim,
            spread,
            mean_scale: 1.0,
            modes_per_class: 1,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidArgument("need at least 2 classes".into()));
        }
        if self.input_dim == 0 || self.modes_per_class == 0 {
            return Err(DataError::InvalidArgument(
                "input_dim and modes_per_class must be positive".into(),
            ));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(DataError::InvalidArgument("spread must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn mode_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes * self.modes_per_class)
            .map(|_| {
                (0..self.input_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.mean_scale * z
                    })
                    .collect()
            })
            .collect()
    }

    fn sample(&self, means: &[Vec<f64>], per_class: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, self.spread.max(0.0)).expect("valid spread");
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(per_class * self.classes);
        for class in 0..self.classes {
            for k in 0..per_class {
                let mode = class * self.modes_per_class + k % self.modes_per_class;
                let x = means[mode]
                    .iter()
                    .map(|m| {
                        if self.spread > 0.0 {
                            m + noise.sample(&mut rng)
                        } else {
                            *m
                        }
                    })
                    .collect();
                rows.push((x, class));
            }
        }
        rows.shuffle(&mut rng);
        let labels = rows.iter().map(|r| r.1).collect();
        let features = rows.into_iter().flat_map(|r| r.0).collect();
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.classes,
        }
    }

    pub fn generate(&self, per_class: usize) -> Result<Dataset, DataError> {
        self.validate()?;
        if per_class == 0 {
            return Err(DataError::InvalidArgument("per_class must be >= 1".into()));
        }
        Ok(self.sample(&self.mode_means(), per_class, 1))
    }

    /// Train and test sets drawn from the same class means with independent noise.
    pub fn generate_split(
        &self,
        train_per_class: usize,
        test_per_class: usize,
    ) -> Result<(Dataset, Dataset), DataError> {
        self.validate()?;
        if train_per_class == 0 || test_per_class == 0 {
            return Err(DataError::InvalidArgument("per-class counts must be >= 1".into()));
        }
        let means = self.mode_means();
        Ok((
            self.sample(&means, train_per_class, 1),
            self.sample(&means, test_per_class, 2),
        ))
    }
}

pub fn generate_synthetic(
    classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    SyntheticSpec::new(classes, input_dim, spread, seed).generate(per_class)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_payload(bytes: &[u8], header: usize, payload: usize) -> Result<(), DataError> {
    let expected = header + payload;
    match bytes.len() {
        n if n < expected => Err(DataError::Truncated { expected, found: n }),
        n if n > expected => Err(DataError::TrailingBytes { extra: n - expected }),
        _ => Ok(()),
    }
}

/// Parses an IDX image file: `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    check_payload(bytes, 16, count * rows * cols)?;
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair (the MNIST container format).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(pixels, labels, (rows * cols).max(1), classes)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len().checked_div(rows * cols).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Sorted,
    Shards { k: usize },
}

/// Example indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub assignment: Vec<Vec<usize>>,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }
}

/// Stable order by `(label, original index)`.
fn sorted_order(dataset: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset.labels[i], i));
    order
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at
/// most one; the larger chunks go to the lowest ids.
fn contiguous_split(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for j in 0..parts {
        let size = base + usize::from(j < extra);
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    out
}

pub fn partition_sorted(dataset: &Dataset, clients: usize) -> Result<PartitionPlan, DataError> {
    if clients == 0 || clients > dataset.len() {
        return Err(DataError::InvalidArgument(format!(
            "cannot split {} examples across {clients} clients",
            dataset.len()
        )));
    }
    Ok(PartitionPlan {
        assignment: contiguous_split(&sorted_order(dataset), clients),
        mode: PartitionMode::Sorted,
        seed: 0,
    })
}

/// Sorts by label, cuts `k * clients` shards and deals `k` random shards to each client.
pub fn partition_shards(dataset: &Dataset, clients: usize, k: usize, seed: u64) -> Result<PartitionPlan, DataError> {
    if clients == 0 || k == 0 {
        return Err(DataError::InvalidArgument("clients and k must be positive".into()));
    }
    let shards = clients * k;
    if shards > dataset.len() {
        return Err(DataError::TooManyShards {
            requested: shards,
            available: dataset.len(),
        });
    }
    let pieces = contiguous_split(&sorted_order(dataset), shards);
    let mut ids: Vec<usize> = (0..shards).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids
        .chunks(k)
        .map(|chunk| chunk.iter().flat_map(|&s| pieces[s].iter().copied()).collect())
        .collect();
    Ok(PartitionPlan {
        assignment,
        mode: PartitionMode::Shards { k },
        seed,
    })
}

/// Largest-remainder apportionment of `total` seats over `weights`.
/// Remainder ties go to the lower index.
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quotas: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let assigned: usize = quotas.iter().sum();
    // Remainders kept as exact integers: (w * total) mod sum.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = weights[a] * total % sum;
        let rb = weights[b] * total % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

/// A client's representative sample, label proportions matching its local data.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub owner: usize,
    pub data: Dataset,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Draws `ceil(rate * n)` examples with per-label quotas from
/// [`largest_remainder`], uniformly without replacement inside each label.
pub fn draw_sample(owner: usize, local: &Dataset, rate: f64, seed: u64) -> Result<SampleBatch, DataError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "sampling rate {rate} not in (0, 1]"
        )));
    }
    let size = fraction_count(rate, local.len());
    let hist = local.label_histogram();
    let quotas = largest_remainder(&hist, size);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); local.num_classes()];
    for (i, &l) in local.labels().iter().enumerate() {
        by_label[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(size);
    for (label, &quota) in quotas.iter().enumerate() {
        if quota == 0 {
            continue;
        }
        let pool = &by_label[label];
        let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), quota)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        picks.sort_unstable();
        chosen.extend(picks);
    }
    Ok(SampleBatch {
        owner,
        data: local.subset(&chosen),
    })
}

/// `ceil(fraction * n)` examples uniformly without replacement.
pub fn draw_uniform(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    let size = fraction_count(fraction, dataset.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, dataset.len(), size).into_vec();
    picks.sort_unstable();
    Ok(dataset.subset(&picks))
}

/// `count` distinct indices below `n`, uniformly at random.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    index::sample(rng, n, count.min(n)).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: &[usize], classes: usize) -> Dataset {
        let features = labels.iter().map(|&l| l as f64).collect();
        Dataset::new(features, labels.to_vec(), 1, classes).unwrap()
    }

    #[test]
    fn synthetic_counts_and_zero_spread() {
        let ds = generate_synthetic(3, 4, 100, 0.0, 7).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.label_histogram(), vec![100, 100, 100]);
        // With no spread every example equals its class mean.
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == c)
                .map(|i| ds.row(i))
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
        assert_eq!(ds, generate_synthetic(3, 4, 100, 0.0, 7).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(1, 4, 10, 0.1, 0).is_err());
        assert!(generate_synthetic(3, 4, 0, 0.1, 0).is_err());
    }

    #[test]
    fn sorted_partition_examples() {
        let ds = labelled(&[2, 0, 1, 2, 0, 1], 3);
        let plan = partition_sorted(&ds, 3).unwrap();
        assert_eq!(plan.assignment, vec![vec![1, 4], vec![2, 5], vec![0, 3]]);
        let single = partition_sorted(&ds, 1).unwrap();
        assert_eq!(single.assignment[0].len(), 6);
        assert!(partition_sorted(&ds, 7).is_err());
    }

    #[test]
    fn sorted_partition_remainder_goes_to_low_ids() {
        let ds = labelled(&[0; 10], 2);
        let sizes: Vec<usize> = partition_sorted(&ds, 4)
            .unwrap()
            .assignment
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn shard_partition_examples() {
        let ds = labelled(&[0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5], 6);
        let plan = partition_shards(&ds, 3, 2, 11).unwrap();
        assert!(plan.assignment.iter().all(|a| a.len() == 4));
        assert_eq!(plan, partition_shards(&ds, 3, 2, 11).unwrap());
        assert!(matches!(
            partition_shards(&ds, 7, 2, 0),
            Err(DataError::TooManyShards {
                requested: 14,
                available: 12
            })
        ));
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[90, 10], 10), vec![9, 1]);
        assert_eq!(largest_remainder(&[7, 3], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0, 5, 0], 2), vec![0, 2, 0]);
        assert_eq!(largest_remainder(&[1, 1, 1], 2), vec![1, 1, 0]);
    }

    #[test]
    fn draw_sample_proportions() {
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let ds = labelled(&labels, 2);
        let sample = draw_sample(4, &ds, 0.1, 3).unwrap();
        assert_eq!(sample.owner, 4);
        assert_eq!(sample.data.label_histogram(), vec![9, 1]);

        let full = draw_sample(0, &ds, 1.0, 3).unwrap();
        assert_eq!(full.data.label_histogram(), ds.label_histogram());

        let mut small = vec![0; 7];
        small.extend(vec![1; 3]);
        let s = draw_sample(0, &labelled(&small, 2), 0.3, 1).unwrap();
        assert_eq!(s.data.label_histogram(), vec![2, 1]);
        assert!(draw_sample(0, &ds, 0.0, 1).is_err());
    }

    #[test]
    fn fraction_count_rounds_up_but_ignores_float_noise() {
        assert_eq!(fraction_count(0.03, 100), 3);
        assert_eq!(fraction_count(0.01, 261), 3);
        assert_eq!(fraction_count(0.1, 5), 1);
        assert_eq!(fraction_count(0.25, 100), 25);
        assert_eq!(fraction_count(1.0, 7), 7);
    }

    #[test]
    fn idx_round_trip_fixture() {
        let pixels = [0u8, 255, 128, 1, 2, 3, 4, 5];
        let imgs = encode_idx_images(2, 2, &pixels);
        let (count, rows, cols, values) = parse_idx_images(&imgs).unwrap();
        assert_eq!((count, rows, cols), (2, 2, 2));
        let expected: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        assert_eq!(values, expected);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[7, 3])).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_negative_cases() {
        let labels = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_labels(&labels[..labels.len() - 1]),
            Err(DataError::Truncated {
                expected: 11,
                found: 10
            })
        ));
        let mut longer = labels.clone();
        longer.push(0);
        assert!(matches!(
            parse_idx_labels(&longer),
            Err(DataError::TrailingBytes { extra: 1 })
        ));
        assert!(matches!(
            parse_idx_images(&labels),
            Err(DataError::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                ..
            })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn load_idx_detects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, encode_idx_images(1, 2, &[1, 2, 3, 4])).unwrap();
        fs::write(&lab, encode_idx_labels(&[0, 1, 1])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        fs::write(&lab, encode_idx_labels(&[0, 1])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.row(1), &[3.0 / 255.0, 4.0 / 255.0]);
        assert!(matches!(
            load_idx(dir.path().join("missing"), &lab),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(3, 2, 4, 0.5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x0,x1,label\n"));
        assert_eq!(Dataset::read_csv(&path, Some(3)).unwrap(), ds);
    }
}
