//! Data ingestion and stream construction.
//!
//! IDX files (MNIST layout) are big-endian: images carry magic 2051 followed
//! by count, rows and cols; labels carry magic 2049 followed by count. Pixel
//! bytes are scaled by 1/255.
//!
//! FSTR feature files are little-endian: `"FSTR"`, `u32` version 1, `u32`
//! dim, `u32` count, `u32` num_classes, then `count` records of `dim` `f32`
//! values and one `u16` label.

use std::fs;
use std::io;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{derive_stream_id, DenseMatrix, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const FSTR_MAGIC: &[u8; 4] = b"FSTR";
pub const FSTR_VERSION: u32 = 1;

const PURPOSE_ORDER: u64 = 0x6f72;
const PURPOSE_PERMUTATION: u64 = 0x7065;
const PURPOSE_SUBSET: u64 = 0x7375;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("bad magic in {what}: expected {expected}, found {found}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unsupported FSTR version {0}")]
    UnsupportedVersion(u32),
    #[error("label {label} is not below the class count {classes}")]
    BadLabel { label: usize, classes: usize },
    #[error("invalid stream setting: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn read_file(path: &Path) -> Result<Vec<u8>, StreamError> {
    fs::read(path).map_err(|source| StreamError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, StreamError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(StreamError::Truncated {
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses in-memory IDX images and labels.
pub fn parse_idx_bytes(images: &[u8], labels: &[u8]) -> Result<(DenseMatrix, Vec<usize>), StreamError> {
    let magic = be_u32(images, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(StreamError::BadMagic {
            what: "image file",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(StreamError::BadMagic {
            what: "label file",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    let n_labels = be_u32(labels, 4, "label file")? as usize;
    if count != n_labels {
        return Err(StreamError::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if images.len() < needed {
        return Err(StreamError::Truncated {
            what: "image file",
            needed,
            available: images.len(),
        });
    }
    if labels.len() < 8 + count {
        return Err(StreamError::Truncated {
            what: "label file",
            needed: 8 + count,
            available: labels.len(),
        });
    }
    let data = images[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels[8..8 + count].iter().map(|&b| b as usize).collect();
    Ok((DenseMatrix::from_vec(count, dim, data), labels))
}

pub fn parse_idx(images_file: &Path, labels_file: &Path) -> Result<(DenseMatrix, Vec<usize>), StreamError> {
    parse_idx_bytes(&read_file(images_file)?, &read_file(labels_file)?)
}

/// Encodes images (values in `[0,1]`, rounded to bytes) and labels as IDX.
pub fn encode_idx(images: &DenseMatrix, rows: usize, cols: usize, labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(images.cols(), rows * cols);
    assert_eq!(images.rows(), labels.len());
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, images.rows() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(images.as_slice().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// Global scalar mean and population standard deviation.
pub fn mean_std(m: &DenseMatrix) -> (f64, f64) {
    let n = m.len() as f64;
    let mean = m.as_slice().iter().sum::<f64>() / n;
    let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x − mean)/std` elementwise.
pub fn standardize(images: &DenseMatrix, mean: f64, std: f64) -> DenseMatrix {
    assert!(std > 0.0, "std must be positive");
    images.map(|x| (x - mean) / std)
}

/// Bijection on feature indices; output feature `i` is input feature `perm[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Seeded Fisher–Yates shuffle; seed 0 is the identity.
    pub fn from_seed(n: usize, seed: u64) -> Self {
        let mut p: Vec<usize> = (0..n).collect();
        if seed != 0 {
            let mut rng = RngStream::new(seed, PURPOSE_PERMUTATION);
            shuffle(&mut p, &mut rng);
        }
        Self(p)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    pub fn apply<T: Copy>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.0.len(), "permutation length mismatch");
        self.0.iter().map(|&p| x[p]).collect()
    }
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(v: &mut [T], rng: &mut RngStream) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

/// Applies the seeded pixel permutation to every row.
pub fn permuted_task(images: &DenseMatrix, task_seed: u64) -> DenseMatrix {
    let perm = Permutation::from_seed(images.cols(), task_seed);
    let mut out = DenseMatrix::zeros(images.rows(), images.cols());
    for r in 0..images.rows() {
        out.row_mut(r).copy_from_slice(&perm.apply(images.row(r)));
    }
    out
}

/// Row-major `f32` samples with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, StreamError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(StreamError::DimMismatch {
                expected: dim * labels.len(),
                found: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(StreamError::BadLabel {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
            num_classes,
        })
    }

    pub fn from_matrix(m: &DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, StreamError> {
        if m.rows() != labels.len() {
            return Err(StreamError::CountMismatch {
                images: m.rows(),
                labels: labels.len(),
            });
        }
        Self::new(m.cols(), m.as_slice().iter().map(|&v| v as f32).collect(), labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Keeps the listed feature columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut features = Vec::with_capacity(self.len() * cols.len());
        for i in 0..self.len() {
            let row = self.row(i);
            features.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            dim: cols.len(),
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.len(),
            self.dim,
            self.features.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
    pub step: usize,
}

/// One task: which training rows arrive in which order, which test rows
/// evaluate it, and the feature/label transforms it applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub order: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub permutation: Option<Permutation>,
    pub label_map: Option<Vec<usize>>,
}

/// Sequence of tasks over a shared training and test set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    train: Dataset,
    test: Dataset,
    tasks: Vec<Task>,
    low_freq: Vec<bool>,
}

impl TaskSequence {
    pub fn new(train: Dataset, test: Dataset, tasks: Vec<Task>, low_freq: Vec<bool>) -> Result<Self, StreamError> {
        if train.dim() != test.dim() {
            return Err(StreamError::DimMismatch {
                expected: train.dim(),
                found: test.dim(),
            });
        }
        if tasks.is_empty() {
            return Err(StreamError::Invalid("a stream needs at least one task".into()));
        }
        if low_freq.len() != train.num_classes() {
            return Err(StreamError::Invalid("frequency flags must cover every class".into()));
        }
        Ok(Self {
            train,
            test,
            tasks,
            low_freq,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn low_freq(&self) -> &[bool] {
        &self.low_freq
    }

    /// Training events seen per class across all tasks.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for (t, task) in self.tasks.iter().enumerate() {
            for &r in &task.order {
                c[self.map_label(t, self.train.label(r))] += 1;
            }
        }
        c
    }

    pub fn task_len(&self, t: usize) -> usize {
        self.tasks[t].order.len()
    }

    pub fn total_events(&self) -> usize {
        self.tasks.iter().map(|t| t.order.len()).sum()
    }

    pub fn test_len(&self, t: usize) -> usize {
        self.tasks[t].test_rows.len()
    }

    fn map_label(&self, t: usize, label: usize) -> usize {
        self.tasks[t].label_map.as_ref().map_or(label, |m| m[label])
    }

    /// Applies task `t`'s feature permutation to a raw row.
    pub fn transform(&self, t: usize, raw: &[f32]) -> Vec<f64> {
        match &self.tasks[t].permutation {
            Some(p) => p.indices().iter().map(|&i| raw[i] as f64).collect(),
            None => raw.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Event `j` of task `t`; `step_offset` is added to `j` to form the step.
    pub fn event(&self, t: usize, j: usize, step_offset: usize) -> StreamEvent {
        let r = self.tasks[t].order[j];
        StreamEvent {
            features: self.transform(t, self.train.row(r)),
            label: self.map_label(t, self.train.label(r)),
            task_id: t,
            step: step_offset + j,
        }
    }

    /// Test sample `j` of task `t` as `(features, label)`.
    pub fn test_sample(&self, t: usize, j: usize) -> (Vec<f64>, usize) {
        let r = self.tasks[t].test_rows[j];
        (self.transform(t, self.test.row(r)), self.map_label(t, self.test.label(r)))
    }

    /// All training events in stream order.
    pub fn events(&self) -> impl Iterator<Item = StreamEvent> + '_ {
        let mut offset = 0;
        self.tasks.iter().enumerate().flat_map(move |(t, task)| {
            let start = offset;
            offset += task.order.len();
            (0..task.order.len()).map(move |j| self.event(t, j, start))
        })
    }
}

/// Seeded shuffle of `0..n` for task `t`.
pub fn task_order(n: usize, seed: u64, task: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::keyed(seed, &[PURPOSE_ORDER, task as u64]);
    shuffle(&mut order, &mut rng);
    order
}

/// Permutation seed for task `t`; task 0 keeps the identity.
pub fn task_permutation_seed(seed: u64, task: usize) -> u64 {
    if task == 0 {
        0
    } else {
        derive_stream_id(&[seed, PURPOSE_PERMUTATION, task as u64]) | 1
    }
}

/// Permuted-MNIST style stream: task `t` applies a fixed pixel permutation
/// to every image, train and test. Inputs are standardized with the training
/// split's global mean and std. Each task draws `samples_per_task` training
/// images (all when `None`) in its own seeded order.
pub fn permuted_mnist(
    train: (&DenseMatrix, &[usize]),
    test: (&DenseMatrix, &[usize]),
    tasks: usize,
    samples_per_task: Option<usize>,
    seed: u64,
) -> Result<(TaskSequence, (f64, f64)), StreamError> {
    if tasks == 0 {
        return Err(StreamError::Invalid("task count must be positive".into()));
    }
    let (mean, std) = mean_std(train.0);
    if !(std > 0.0) {
        return Err(StreamError::Invalid("training images are constant".into()));
    }
    let classes = train.1.iter().chain(test.1).max().map_or(0, |m| m + 1).max(2);
    let train_set = Dataset::from_matrix(&standardize(train.0, mean, std), train.1.to_vec(), classes)?;
    let test_set = Dataset::from_matrix(&standardize(test.0, mean, std), test.1.to_vec(), classes)?;
    let n = train_set.len();
    let take = samples_per_task.unwrap_or(n);
    if take == 0 || take > n {
        return Err(StreamError::Invalid(format!(
            "samples_per_task {take} outside 1..={n}"
        )));
    }
    let dim = train_set.dim();
    let task_list = (0..tasks)
        .map(|t| {
            let mut order = task_order(n, seed, t);
            order.truncate(take);
            let pseed = task_permutation_seed(seed, t);
            Task {
                order,
                test_rows: (0..test_set.len()).collect(),
                permutation: (pseed != 0).then(|| Permutation::from_seed(dim, pseed)),
                label_map: None,
            }
        })
        .collect();
    let seq = TaskSequence::new(train_set, test_set, task_list, vec![false; classes])?;
    Ok((seq, (mean, std)))
}

fn default_separation() -> f64 {
    3.0
}

fn default_one() -> usize {
    1
}

/// Synthetic Gaussian-blob classification stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    /// Training events per class.
    pub freq: Vec<usize>,
    pub noise_std: f64,
    /// Norm of every class mean.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Balanced test samples per class.
    pub test_per_class: usize,
    /// Classes with fewer training events are flagged low-frequency.
    #[serde(default)]
    pub low_freq_threshold: usize,
    #[serde(default = "default_one")]
    pub tasks: usize,
    /// Task `t` relabels classes with map `t mod label_permutations`; map 0
    /// is the identity.
    #[serde(default = "default_one")]
    pub label_permutations: usize,
}

impl SyntheticSpec {
    /// `freq` with the last `low` classes reduced to `fraction` of `majority`.
    pub fn imbalanced_freq(classes: usize, majority: usize, low: usize, fraction: f64) -> Vec<usize> {
        (0..classes)
            .map(|c| {
                if c >= classes - low {
                    ((majority as f64 * fraction).round() as usize).max(1)
                } else {
                    majority
                }
            })
            .collect()
    }
}

fn gaussian(rng: &mut RngStream) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Draws class means on a sphere of radius `separation`, then `freq[c]`
/// training and `test_per_class` test events per class at mean plus
/// isotropic Gaussian noise.
pub fn synthetic_imbalanced(spec: &SyntheticSpec, rng: &mut RngStream) -> Result<TaskSequence, StreamError> {
    if spec.classes < 2 || spec.dims == 0 {
        return Err(StreamError::Invalid("need at least 2 classes and 1 dimension".into()));
    }
    if spec.freq.len() != spec.classes || spec.freq.contains(&0) {
        return Err(StreamError::Invalid("freq needs one positive count per class".into()));
    }
    if spec.tasks == 0 || spec.label_permutations == 0 {
        return Err(StreamError::Invalid("tasks and label_permutations must be positive".into()));
    }
    let mut means = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut v: Vec<f64> = (0..spec.dims).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x *= spec.separation / norm);
        means.push(v);
    }
    let draw = |counts: &dyn Fn(usize) -> usize, rng: &mut RngStream| {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..counts(c) {
                features.extend(mean.iter().map(|&m| (m + spec.noise_std * gaussian(rng)) as f32));
                labels.push(c);
            }
        }
        Dataset::new(spec.dims, features, labels, spec.classes)
    };
    let train = draw(&|c| spec.freq[c], rng)?;
    let test = draw(&|_| spec.test_per_class, rng)?;

    let mut maps = vec![(0..spec.classes).collect::<Vec<_>>()];
    for _ in 1..spec.label_permutations {
        let mut m: Vec<usize> = (0..spec.classes).collect();
        shuffle(&mut m, rng);
        maps.push(m);
    }
    let order_seed = rng.next_u64();
    let tasks = (0..spec.tasks)
        .map(|t| {
            let m = &maps[t % spec.label_permutations];
            let identity = m.iter().enumerate().all(|(i, &c)| i == c);
            Task {
                order: task_order(train.len(), order_seed, t),
                test_rows: (0..test.len()).collect(),
                permutation: None,
                label_map: (!identity).then(|| m.clone()),
            }
        })
        .collect();
    let low_freq = spec.freq.iter().map(|&f| f < spec.low_freq_threshold).collect();
    TaskSequence::new(train, test, tasks, low_freq)
}

/// For every class with fewer than `threshold_count` training samples,
/// removes an independently drawn fraction in `removal` of them uniformly at
/// random. Flags those classes low-frequency and rebuilds each task's order.
pub fn subsample_low_freq(
    seq: &TaskSequence,
    threshold_count: usize,
    removal: (f64, f64),
    rng: &mut RngStream,
) -> Result<TaskSequence, StreamError> {
    let (lo, hi) = removal;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(StreamError::Invalid(format!("removal range ({lo}, {hi}) not within [0, 1]")));
    }
    let train = seq.train();
    let counts = train.class_counts();
    let mut keep = vec![true; train.len()];
    let mut low_freq = seq.low_freq().to_vec();
    for (c, &n) in counts.iter().enumerate() {
        if n >= threshold_count || n == 0 {
            continue;
        }
        low_freq[c] = true;
        let frac = lo + (hi - lo) * rng.uniform01();
        let remove = (frac * n as f64).round() as usize;
        let mut rows: Vec<usize> = (0..train.len()).filter(|&i| train.label(i) == c).collect();
        shuffle(&mut rows, rng);
        for &r in &rows[..remove] {
            keep[r] = false;
        }
    }
    let kept: Vec<usize> = (0..train.len()).filter(|&i| keep[i]).collect();
    let new_train = train.select(&kept);
    let order_seed = rng.next_u64();
    let tasks = seq
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, task)| Task {
            order: task_order(new_train.len(), order_seed, t),
            ..task.clone()
        })
        .collect();
    TaskSequence::new(new_train, seq.test().clone(), tasks, low_freq)
}

/// Parsed FSTR payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub features: Dataset,
    /// Column indices kept when a subset was requested.
    pub columns: Option<Vec<usize>>,
}

/// Column subset request: keep `k` columns drawn with `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSubset {
    pub k: usize,
    pub seed: u64,
}

/// `k` distinct sorted column indices out of `dim`, fixed by `seed`.
pub fn column_subset(dim: usize, subset: ColumnSubset) -> Result<Vec<usize>, StreamError> {
    if subset.k == 0 || subset.k > dim {
        return Err(StreamError::DimMismatch {
            expected: subset.k,
            found: dim,
        });
    }
    let mut cols: Vec<usize> = (0..dim).collect();
    let mut rng = RngStream::new(subset.seed, PURPOSE_SUBSET);
    shuffle(&mut cols, &mut rng);
    cols.truncate(subset.k);
    cols.sort_unstable();
    Ok(cols)
}

fn le_u32(bytes: &[u8], at: usize) -> Result<u32, StreamError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(StreamError::Truncated {
            what: "feature header",
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses an in-memory FSTR file. `expected_dim`, when given, must match the
/// header.
pub fn parse_features_bytes(
    bytes: &[u8],
    expected_dim: Option<usize>,
    subset: Option<ColumnSubset>,
) -> Result<FeatureFile, StreamError> {
    if bytes.len() < 4 {
        return Err(StreamError::Truncated {
            what: "feature header",
            needed: 4,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != FSTR_MAGIC {
        return Err(StreamError::BadMagic {
            what: "feature file",
            expected: u32::from_be_bytes(*FSTR_MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
        });
    }
    let version = le_u32(bytes, 4)?;
    if version != FSTR_VERSION {
        return Err(StreamError::UnsupportedVersion(version));
    }
    let dim = le_u32(bytes, 8)? as usize;
    let count = le_u32(bytes, 12)? as usize;
    let classes = le_u32(bytes, 16)? as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(StreamError::DimMismatch { expected, found: dim });
        }
    }
    if dim == 0 {
        return Err(StreamError::DimMismatch { expected: 1, found: 0 });
    }
    let record = dim * 4 + 2;
    let needed = 20 + count * record;
    if bytes.len() < needed {
        return Err(StreamError::Truncated {
            what: "feature payload",
            needed,
            available: bytes.len(),
        });
    }
    let mut features = Vec::with_capacity(dim * count);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes[20..needed].chunks_exact(record) {
        features.extend(rec[..dim * 4].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
        labels.push(u16::from_le_bytes([rec[dim * 4], rec[dim * 4 + 1]]) as usize);
    }
    let data = Dataset::new(dim, features, labels, classes)?;
    match subset {
        None => Ok(FeatureFile {
            features: data,
            columns: None,
        }),
        Some(s) => {
            let cols = column_subset(dim, s)?;
            Ok(FeatureFile {
                features: data.select_columns(&cols),
                columns: Some(cols),
            })
        }
    }
}

pub fn parse_features(
    file: &Path,
    expected_dim: Option<usize>,
    subset: Option<ColumnSubset>,
) -> Result<FeatureFile, StreamError> {
    parse_features_bytes(&read_file(file)?, expected_dim, subset)
}

/// Serializes a dataset as FSTR.
pub fn encode_features(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + data.len() * (data.dim() * 4 + 2));
    out.extend_from_slice(FSTR_MAGIC);
    for v in [FSTR_VERSION, data.dim() as u32, data.len() as u32, data.num_classes() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..data.len() {
        for &x in data.row(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(data.label(i) as u16).to_le_bytes());
    }
    out
}

/// Seeded uniform-noise images in `[0,1]`.
pub fn uniform_noise_images(count: usize, dim: usize, rng: &mut RngStream) -> DenseMatrix {
    DenseMatrix::from_fn(count, dim, |_, _| rng.uniform01())
}
