//! Datasets, non-IID partitioning, and ingestion (IDX files, synthetic).
//!
//! A [`Dataset`] owns the sample storage once; everything downstream works
//! on [`DatasetPartition`] index views, so partitioning never copies
//! feature rows.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::standard_normal;
use crate::crypto::seeded_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("idx format error at offset {offset}: {reason}")]
    IdxFormat { offset: usize, reason: String },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid partition config: {0}")]
    InvalidPartition(String),
}

/// Feature matrix (samples x dims, values in [0,1]) with one integer
/// class label per sample. Features are stored as f32 and widened to f64
/// at the training boundary.
#[derive(Debug)]
pub struct Dataset {
    pub dims: usize,
    pub num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dims: usize, num_classes: usize, features: Vec<f32>, labels: Vec<u32>) -> Self {
        assert_eq!(features.len(), labels.len() * dims);
        Dataset {
            dims,
            num_classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }
}

/// An index view into a shared [`Dataset`].
#[derive(Debug, Clone)]
pub struct DatasetPartition {
    dataset: Arc<Dataset>,
    pub indices: Vec<usize>,
    pub assigned_classes: Vec<u32>,
}

impl DatasetPartition {
    /// View covering the whole dataset.
    pub fn full(dataset: Arc<Dataset>) -> Self {
        let indices = (0..dataset.len()).collect();
        let assigned_classes = (0..dataset.num_classes as u32).collect();
        DatasetPartition {
            dataset,
            indices,
            assigned_classes,
        }
    }

    pub fn from_indices(
        dataset: Arc<Dataset>,
        indices: Vec<usize>,
        assigned_classes: Vec<u32>,
    ) -> Self {
        DatasetPartition {
            dataset,
            indices,
            assigned_classes,
        }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }

    pub fn dims(&self) -> usize {
        self.dataset.dims
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    /// Feature row of the i-th sample in this view, widened to f64.
    pub fn feature(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.dataset
                .feature_row(self.indices[i])
                .iter()
                .map(|&v| v as f64),
        );
    }

    pub fn label(&self, i: usize) -> u32 {
        self.dataset.label(self.indices[i])
    }

    /// Seeded sample of up to `n` indices from this view (the per-round
    /// training slice). Selection is without replacement.
    pub fn seeded_slice(&self, n: usize, rng: &mut ChaCha8Rng) -> DatasetPartition {
        let mut idx = self.indices.clone();
        idx.shuffle(rng);
        idx.truncate(n.min(idx.len()));
        DatasetPartition {
            dataset: Arc::clone(&self.dataset),
            indices: idx,
            assigned_classes: self.assigned_classes.clone(),
        }
    }

    /// Every label in the view is one of its assigned classes.
    pub fn validate(&self) -> Result<(), DataError> {
        for &i in &self.indices {
            let l = self.dataset.label(i);
            if !self.assigned_classes.contains(&l) {
                return Err(DataError::InvalidPartition(format!(
                    "sample {i} has label {l} outside assigned classes {:?}",
                    self.assigned_classes
                )));
            }
        }
        Ok(())
    }
}

/// Split each node's class set round-robin over sorted class labels:
/// node 0 takes the first `classes_per_node` classes, node 1 the next,
/// wrapping around. Classes owned by several nodes are split evenly
/// (seeded shuffle, contiguous chunks), so partitions are disjoint and
/// their union is the input view whenever every class has an owner.
pub fn partition_non_iid(
    data: &DatasetPartition,
    n_nodes: usize,
    classes_per_node: usize,
    seed: u64,
) -> Result<Vec<DatasetPartition>, DataError> {
    if data.sample_count() == 0 {
        return Err(DataError::Empty);
    }
    if n_nodes == 0 {
        return Err(DataError::InvalidPartition("n_nodes must be >= 1".into()));
    }
    let mut classes: Vec<u32> = data
        .indices
        .iter()
        .map(|&i| data.dataset().label(i))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes_per_node > classes.len() {
        return Err(DataError::InvalidPartition(format!(
            "classes_per_node {} exceeds the {} distinct classes present",
            classes_per_node,
            classes.len()
        )));
    }

    let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
    for (k, set) in assigned.iter_mut().enumerate() {
        for j in 0..classes_per_node {
            let class = classes[(k * classes_per_node + j) % classes.len()];
            if !set.contains(&class) {
                set.push(class);
            }
        }
    }

    // owners[c] = nodes that hold class c, in node order
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (k, set) in assigned.iter().enumerate() {
        for class in set {
            let ci = classes.binary_search(class).unwrap();
            owners[ci].push(k);
        }
    }

    let mut per_node: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (ci, &class) in classes.iter().enumerate() {
        if owners[ci].is_empty() {
            continue;
        }
        let mut samples: Vec<usize> = data
            .indices
            .iter()
            .copied()
            .filter(|&i| data.dataset().label(i) == class)
            .collect();
        let mut rng = seeded_rng(seed, class as u64, "partition");
        samples.shuffle(&mut rng);
        let n_owners = owners[ci].len();
        let base = samples.len() / n_owners;
        let extra = samples.len() % n_owners;
        let mut cursor = 0;
        for (slot, &node) in owners[ci].iter().enumerate() {
            let take = base + usize::from(slot < extra);
            per_node[node].extend(&samples[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(assigned
        .into_iter()
        .zip(per_node)
        .map(|(classes, mut indices)| {
            indices.sort_unstable();
            DatasetPartition::from_indices(Arc::clone(data.dataset()), indices, classes)
        })
        .collect())
}

/// Seeded stratified split: up to `per_class` samples of every class go
/// into the first view, the rest into the second.
pub fn stratified_split(
    data: &DatasetPartition,
    per_class: usize,
    seed: u64,
) -> (DatasetPartition, DatasetPartition) {
    let mut taken = Vec::new();
    let mut rest = Vec::new();
    let classes: Vec<u32> = data.assigned_classes.clone();
    for &class in &classes {
        let mut samples: Vec<usize> = data
            .indices
            .iter()
            .copied()
            .filter(|&i| data.dataset().label(i) == class)
            .collect();
        let mut rng = seeded_rng(seed, class as u64, "strat-split");
        samples.shuffle(&mut rng);
        let cut = per_class.min(samples.len());
        taken.extend(&samples[..cut]);
        rest.extend(&samples[cut..]);
    }
    taken.sort_unstable();
    rest.sort_unstable();
    (
        DatasetPartition::from_indices(Arc::clone(data.dataset()), taken, classes.clone()),
        DatasetPartition::from_indices(Arc::clone(data.dataset()), rest, classes),
    )
}

/// Parameters for the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Standard deviation of each cluster around its mean.
    pub spread: f64,
    pub seed: u64,
}

/// One seeded Gaussian cluster per class, means uniform in [0,1]^dims,
/// samples clamped back into [0,1].
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut features = Vec::with_capacity(spec.classes * spec.per_class * spec.dims);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let mut mean_rng = seeded_rng(spec.seed, class as u64, "synth-mean");
        let mean: Vec<f64> = (0..spec.dims).map(|_| mean_rng.gen::<f64>()).collect();
        let mut rng = seeded_rng(spec.seed, class as u64, "synth-sample");
        for _ in 0..spec.per_class {
            for &m in &mean {
                let v = m + spec.spread * standard_normal(&mut rng);
                features.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(spec.dims, spec.classes, features, labels)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn idx_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::IdxFormat {
            offset,
            reason: "truncated header".into(),
        })
}

/// Parse big-endian IDX image/label files (magic 0x00000803 / 0x00000801)
/// into a dataset with pixel bytes scaled to [0,1].
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let magic = idx_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::IdxFormat {
            offset: 0,
            reason: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n_images = idx_u32(&img, 4)? as usize;
    let rows = idx_u32(&img, 8)? as usize;
    let cols = idx_u32(&img, 12)? as usize;
    let dims = rows * cols;
    let expected = 16 + n_images * dims;
    if img.len() != expected {
        return Err(DataError::IdxFormat {
            offset: img.len().min(expected),
            reason: format!("image payload is {} bytes, expected {}", img.len() - 16, n_images * dims),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = idx_u32(&lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::IdxFormat {
            offset: 0,
            reason: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = idx_u32(&lab, 4)? as usize;
    if lab.len() != 8 + n_labels {
        return Err(DataError::IdxFormat {
            offset: lab.len().min(8 + n_labels),
            reason: format!("label payload is {} bytes, expected {}", lab.len() - 8, n_labels),
        });
    }
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let features: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = lab[8..].iter().map(|&b| b as u32).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset::new(dims, num_classes, features, labels))
}
