//! Experiment orchestration: config, the online continual/active loop,
//! evaluation, OOD scoring and result files.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, ...)`, so
//! a config fully determines `results.json`, `accmatrix.csv`, `runlog.csv`,
//! `checkpoints.csv`, `query_timing.csv` and the posterior checkpoint.
//! Wall-clock timings go to `timing.csv` only.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{
    adaptive_threshold, fixed_threshold_decide, random_decide, update_counts, BudgetController, QueryDecision,
};
use crate::binnet::{
    forward, grad_lambda_mc_batch, mc_predictive_batch, mc_predictive_with_probability, GradWorkspace, NetworkSpec,
    SpecError,
};
use crate::metrics::{
    bwt, mean_last_k, mmrr, per_class_accuracy, query_timing, AccuracyMatrix, QueryTiming, DEFAULT_MMRR_EPSILON,
};
use crate::numkit::{argmax, softmax, DenseMatrix, RngStream};
use crate::posterior::{BernoulliPosterior, PosteriorError, DEFAULT_INIT_RADIUS};
use crate::rules::{
    bimu_step, cumulative_step, training_state_bytes, BiMUConfig, Method, RuleError, STEState, SteConfig,
    DEFAULT_CUMULATIVE_LR,
};
use crate::streams::{
    self, mean_std, parse_features, parse_idx, permuted_mnist, standardize, subsample_low_freq,
    synthetic_imbalanced, uniform_noise_images, ColumnSubset, Dataset, StreamError, SyntheticSpec, Task,
    TaskSequence,
};
use crate::uncertainty::{roc_auc, score, PredictionSet, ScoreKind, DEFAULT_THRESHOLDS};

pub const RESULTS_FILE: &str = "results.json";
pub const ACCMATRIX_FILE: &str = "accmatrix.csv";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CHECKPOINT_FILE: &str = "posterior.bimu";
pub const BIASES_FILE: &str = "biases.json";
pub const QUERY_TIMING_FILE: &str = "query_timing.csv";
pub const CHECKPOINTS_FILE: &str = "checkpoints.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const PARTIAL_MARKER: &str = "PARTIAL";

/// Relative cost of one training pass (forward + backward) in units of one
/// inference pass, used for the expected-compute report.
pub const TRAIN_PASS_COST: f64 = 3.0;

const PURPOSE_INIT: u64 = 1;
const PURPOSE_GRAD: u64 = 2;
const PURPOSE_QUERY: u64 = 3;
const PURPOSE_RANDOM_POLICY: u64 = 4;
const PURPOSE_EVAL: u64 = 5;
const PURPOSE_OOD: u64 = 6;
const PURPOSE_STREAM: u64 = 7;
const PURPOSE_CHECKPOINT_EVAL: u64 = 8;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub threshold_count: usize,
    #[serde(default = "default_removal_lo")]
    pub removal_lo: f64,
    #[serde(default = "default_removal_hi")]
    pub removal_hi: f64,
}

fn default_removal_lo() -> f64 {
    0.5
}
fn default_removal_hi() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamConfig {
    /// MNIST IDX files in `dir` (`train-*` and `t10k-*`).
    PermutedMnist {
        dir: PathBuf,
        tasks: usize,
        #[serde(default)]
        samples_per_task: Option<usize>,
    },
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        subsample: Option<SubsampleConfig>,
    },
    /// FSTR train/test files.
    Features {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_tasks")]
        tasks: usize,
        /// Split classes into `tasks` contiguous groups, one per task.
        #[serde(default)]
        class_incremental: bool,
        #[serde(default)]
        subset: Option<ColumnSubset>,
        #[serde(default)]
        low_freq_threshold: usize,
        #[serde(default)]
        subsample: Option<SubsampleConfig>,
    },
}

fn default_tasks() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Every event is labeled and triggers an update.
    #[default]
    None,
    Fixed { tau: f64, score: ScoreKind },
    Random { rate: f64 },
    Budget {
        budget: f64,
        gamma_budget: f64,
        #[serde(default = "default_vr")]
        score: ScoreKind,
    },
}

fn default_vr() -> ScoreKind {
    ScoreKind::Vr
}

impl PolicyConfig {
    pub fn score_kind(&self) -> Option<ScoreKind> {
        match self {
            PolicyConfig::Fixed { score, .. } | PolicyConfig::Budget { score, .. } => Some(*score),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// MC samples for the evaluation predictor.
    #[serde(default = "default_eval_k")]
    pub k: usize,
    /// Samples sharing one set of weight draws during evaluation.
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
    /// Test samples per task at task ends (all when absent).
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Within-task checkpoints evaluating the current task.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default = "default_checkpoint_limit")]
    pub checkpoint_test_limit: usize,
    #[serde(default = "default_last_k")]
    pub last_k: usize,
    #[serde(default = "default_mmrr_eps")]
    pub mmrr_epsilon: f64,
}

fn default_eval_k() -> usize {
    5
}
fn default_eval_batch() -> usize {
    100
}
fn default_checkpoints() -> usize {
    100
}
fn default_checkpoint_limit() -> usize {
    200
}
fn default_last_k() -> usize {
    3
}
fn default_mmrr_eps() -> f64 {
    DEFAULT_MMRR_EPSILON
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: default_eval_k(),
            batch: default_eval_batch(),
            test_limit: None,
            checkpoints: default_checkpoints(),
            checkpoint_test_limit: default_checkpoint_limit(),
            last_k: default_last_k(),
            mmrr_epsilon: default_mmrr_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSource {
    /// Seeded uniform noise in `[0,1]` (image streams) or Gaussian noise
    /// matching the training features' global mean and std.
    Noise,
    /// IDX image/label pair (e.g. Fashion-MNIST), standardized with the
    /// in-distribution statistics.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub source: OodSource,
    #[serde(default = "default_ood_count")]
    pub count: usize,
    #[serde(default = "default_ood_scores")]
    pub scores: Vec<ScoreKind>,
}

fn default_ood_count() -> usize {
    1000
}
fn default_ood_scores() -> Vec<ScoreKind> {
    vec![ScoreKind::Aleatoric, ScoreKind::Epistemic]
}

fn default_init_radius() -> f64 {
    DEFAULT_INIT_RADIUS
}
fn default_cumulative_lr() -> f64 {
    DEFAULT_CUMULATIVE_LR
}
fn default_bias_lr() -> f64 {
    0.01
}
fn default_one() -> usize {
    1
}
fn default_k_query() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub network: NetworkSpec,
    /// BiMU hyperparameters; `k` and `temperature` also drive the
    /// cumulative rule's gradient estimate.
    #[serde(default)]
    pub bimu: BiMUConfig,
    #[serde(default = "default_cumulative_lr")]
    pub cumulative_lr: f64,
    #[serde(default)]
    pub ste: SteConfig,
    /// Half-width of the uniform `λ` initialization.
    #[serde(default = "default_init_radius")]
    pub init_radius: f64,
    /// SGD step for the optional real-valued biases.
    #[serde(default = "default_bias_lr")]
    pub bias_lr: f64,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    pub stream: StreamConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_k_query")]
    pub k_query: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ood: Option<OodConfig>,
    pub output_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses JSON; relative paths are taken relative to `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: Self = serde_json::from_str(text)?;
        match &mut cfg.stream {
            StreamConfig::PermutedMnist { dir, .. } => resolve(base_dir, dir),
            StreamConfig::Features { train, test, .. } => {
                resolve(base_dir, train);
                resolve(base_dir, test);
            }
            StreamConfig::Synthetic { .. } => {}
        }
        if let Some(OodConfig {
            source: OodSource::Idx { images, labels },
            ..
        }) = &mut cfg.ood
        {
            resolve(base_dir, images);
            resolve(base_dir, labels);
        }
        resolve(base_dir, &mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks hyperparameters, referenced files and method/policy pairing.
    pub fn validate(&self) -> Result<(), RunError> {
        self.network.validate()?;
        self.bimu.validate()?;
        let bad = |m: String| Err(RunError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k_query == 0 || self.eval.k == 0 || self.eval.batch == 0 {
            return bad("k_query, eval.k and eval.batch must be positive".into());
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return bad("init_radius must be finite and non-negative".into());
        }
        if !(self.cumulative_lr > 0.0) || !(self.ste.lr > 0.0) || !(self.bias_lr >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.eval.last_k == 0 || !(self.eval.mmrr_epsilon > 0.0) {
            return bad("eval.last_k and eval.mmrr_epsilon must be positive".into());
        }
        if self.method == Method::Ste && self.network.activation != crate::binnet::Activation::SignHardtanh {
            return bad("the STE baseline uses the sign activation".into());
        }
        match &self.policy {
            PolicyConfig::None => {}
            PolicyConfig::Fixed { tau, .. } if !tau.is_finite() && *tau != f64::INFINITY => {
                return bad("fixed threshold must be a number".into())
            }
            PolicyConfig::Fixed { .. } => {}
            PolicyConfig::Random { rate } if !(0.0..=1.0).contains(rate) => {
                return bad(format!("random rate {rate} outside [0, 1]"))
            }
            PolicyConfig::Random { .. } => {}
            PolicyConfig::Budget { budget, gamma_budget, .. } => {
                if !(0.0..=1.0).contains(budget) || !(*gamma_budget > 0.0) {
                    return bad("budget must lie in [0, 1] and gamma_budget be positive".into());
                }
            }
        }
        if let Some(kind) = self.policy.score_kind() {
            if self.method == Method::Ste && kind != ScoreKind::Aleatoric {
                return bad("STE querying uses the aleatoric score only".into());
            }
        }
        if let Some(ood) = &self.ood {
            if ood.count == 0 || ood.scores.is_empty() {
                return bad("ood.count and ood.scores must be non-empty".into());
            }
            if ood.scores.iter().any(|s| s.needs_label()) {
                return bad("vr_true needs labels and cannot score OOD samples".into());
            }
            if let OodSource::Idx { images, labels } = &ood.source {
                require_file(images)?;
                require_file(labels)?;
            }
        }
        match &self.stream {
            StreamConfig::PermutedMnist { dir, tasks, .. } => {
                if *tasks == 0 {
                    return bad("tasks must be positive".into());
                }
                for f in MNIST_FILES {
                    require_file(&dir.join(f))?;
                }
            }
            StreamConfig::Features { train, test, tasks, .. } => {
                if *tasks == 0 {
                    return bad("tasks must be positive".into());
                }
                require_file(train)?;
                require_file(test)?;
            }
            StreamConfig::Synthetic { spec, .. } => {
                if spec.dims != self.network.input_size() || spec.classes != self.network.output_size() {
                    return bad("synthetic stream shape does not match the network".into());
                }
            }
        }
        Ok(())
    }
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn require_file(p: &Path) -> Result<(), RunError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(RunError::MissingFile(p.to_path_buf()))
    }
}

/// Loaded stream plus the statistics used to standardize it.
pub struct PreparedStream {
    pub seq: TaskSequence,
    /// Global mean/std of the raw training inputs when they were standardized.
    pub input_stats: Option<(f64, f64)>,
}

/// Builds the configured stream.
pub fn prepare_stream(cfg: &ExperimentConfig) -> Result<PreparedStream, RunError> {
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_STREAM]);
    let (seq, stats, sub) = match &cfg.stream {
        StreamConfig::PermutedMnist {
            dir,
            tasks,
            samples_per_task,
        } => {
            let (tr_x, tr_y) = parse_idx(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]))?;
            let (te_x, te_y) = parse_idx(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]))?;
            let (seq, stats) = permuted_mnist((&tr_x, &tr_y), (&te_x, &te_y), *tasks, *samples_per_task, cfg.seed)?;
            (seq, Some(stats), None)
        }
        StreamConfig::Synthetic { spec, subsample } => (synthetic_imbalanced(spec, &mut rng)?, None, *subsample),
        StreamConfig::Features {
            train,
            test,
            tasks,
            class_incremental,
            subset,
            low_freq_threshold,
            subsample,
        } => {
            let tr = parse_features(train, None, *subset)?.features;
            let te = parse_features(test, Some(tr.dim()).filter(|_| subset.is_none()), *subset)?.features;
            let seq = feature_sequence(tr, te, *tasks, *class_incremental, *low_freq_threshold, cfg.seed)?;
            (seq, None, *subsample)
        }
    };
    let seq = match sub {
        Some(s) => subsample_low_freq(&seq, s.threshold_count, (s.removal_lo, s.removal_hi), &mut rng)?,
        None => seq,
    };
    if seq.dim() != cfg.network.input_size() {
        return Err(RunError::Config(format!(
            "stream has {} features but the network expects {}",
            seq.dim(),
            cfg.network.input_size()
        )));
    }
    if seq.num_classes() > cfg.network.output_size() {
        return Err(RunError::Config(format!(
            "stream has {} classes but the network has {} outputs",
            seq.num_classes(),
            cfg.network.output_size()
        )));
    }
    Ok(PreparedStream {
        seq,
        input_stats: stats,
    })
}

fn feature_sequence(
    train: Dataset,
    test: Dataset,
    tasks: usize,
    class_incremental: bool,
    low_freq_threshold: usize,
    seed: u64,
) -> Result<TaskSequence, RunError> {
    let classes = train.num_classes().max(test.num_classes());
    let train = Dataset::new(train.dim(), flat(&train), train.labels().to_vec(), classes)?;
    let test = Dataset::new(test.dim(), flat(&test), test.labels().to_vec(), classes)?;
    if class_incremental && tasks > classes {
        return Err(RunError::Config("more tasks than classes".into()));
    }
    let group = |label: usize| if class_incremental { label * tasks / classes } else { 0 };
    let task_list = (0..tasks)
        .map(|t| {
            let rows: Vec<usize> = streams::task_order(train.len(), seed, t)
                .into_iter()
                .filter(|&r| !class_incremental || group(train.label(r)) == t)
                .collect();
            let test_rows = (0..test.len())
                .filter(|&r| !class_incremental || group(test.label(r)) == t)
                .collect();
            Task {
                order: rows,
                test_rows,
                permutation: None,
                label_map: None,
            }
        })
        .collect();
    let low = train.class_counts().iter().map(|&c| c < low_freq_threshold).collect();
    Ok(TaskSequence::new(train, test, task_list, low)?)
}

fn flat(d: &Dataset) -> Vec<f32> {
    (0..d.len()).flat_map(|i| d.row(i).to_vec()).collect()
}

/// Trainable state of one experiment.
#[derive(Clone, Debug)]
pub enum Learner {
    Bayes {
        method: Method,
        post: BernoulliPosterior,
        biases: Option<Vec<Vec<f64>>>,
    },
    Ste {
        state: STEState,
        biases: Option<Vec<Vec<f64>>>,
    },
}

impl Learner {
    pub fn init(cfg: &ExperimentConfig) -> Self {
        let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_INIT]);
        let biases = cfg.network.bias.then(|| cfg.network.zero_biases());
        match cfg.method {
            Method::Ste => Learner::Ste {
                state: STEState::init_uniform(&cfg.network, &cfg.ste, &mut rng),
                biases,
            },
            m => Learner::Bayes {
                method: m,
                post: BernoulliPosterior::init_uniform(&cfg.network.weight_shapes(), cfg.init_radius, &mut rng),
                biases,
            },
        }
    }

    pub fn posterior(&self) -> Option<&BernoulliPosterior> {
        match self {
            Learner::Bayes { post, .. } => Some(post),
            Learner::Ste { .. } => None,
        }
    }

    pub fn biases(&self) -> Option<&[Vec<f64>]> {
        match self {
            Learner::Bayes { biases, .. } | Learner::Ste { biases, .. } => biases.as_deref(),
        }
    }

    /// Frozen view used for prediction.
    pub fn predictor(&self) -> Predictor<'_> {
        match self {
            Learner::Bayes { post, biases, .. } => Predictor::Bayes {
                probs: post.probability(),
                biases: biases.as_deref(),
            },
            Learner::Ste { state, biases } => Predictor::Deterministic {
                weights: state.binary_weights(),
                biases: biases.as_deref(),
            },
        }
    }
}

/// Snapshot of a learner's prediction-time parameters.
pub enum Predictor<'a> {
    Bayes {
        probs: Vec<DenseMatrix>,
        biases: Option<&'a [Vec<f64>]>,
    },
    Deterministic {
        weights: Vec<DenseMatrix>,
        biases: Option<&'a [Vec<f64>]>,
    },
}

impl Predictor<'_> {
    pub fn from_posterior<'b>(post: &BernoulliPosterior, biases: Option<&'b [Vec<f64>]>) -> Predictor<'b> {
        Predictor::Bayes {
            probs: post.probability(),
            biases,
        }
    }

    /// `K` hard-sampled predictions for one input (one deterministic vector
    /// for STE).
    pub fn predict_one(&self, spec: &NetworkSpec, x: &[f64], k: usize, rng: &mut RngStream) -> PredictionSet {
        match self {
            Predictor::Bayes { probs, biases } => mc_predictive_with_probability(spec, probs, *biases, x, k, rng),
            Predictor::Deterministic { weights, biases } => {
                let (logits, _) = forward(spec, weights, *biases, x);
                PredictionSet::new(vec![softmax(&logits)])
            }
        }
    }

    /// Prediction sets for a batch sharing `k` weight draws.
    pub fn predict_batch(&self, spec: &NetworkSpec, xs: &[&[f64]], k: usize, rng: &mut RngStream) -> Vec<PredictionSet> {
        match self {
            Predictor::Bayes { probs, biases } => mc_predictive_batch(spec, probs, *biases, xs, k, rng),
            Predictor::Deterministic { .. } => xs.iter().map(|x| self.predict_one(spec, x, 1, rng)).collect(),
        }
    }
}

/// Mean-prediction accuracy on `samples`, plus the predictions.
pub fn evaluate_samples(
    spec: &NetworkSpec,
    pred: &Predictor<'_>,
    samples: &[(Vec<f64>, usize)],
    k: usize,
    batch: usize,
    rng: &mut RngStream,
) -> (f64, Vec<usize>) {
    assert!(!samples.is_empty(), "empty evaluation set");
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let xs: Vec<&[f64]> = chunk.iter().map(|(x, _)| x.as_slice()).collect();
        for set in pred.predict_batch(spec, &xs, k, rng) {
            preds.push(argmax(&set.mean()));
        }
    }
    let hits = preds.iter().zip(samples).filter(|(p, (_, y))| **p == *y).count();
    (hits as f64 / samples.len() as f64, preds)
}

fn task_test_samples(seq: &TaskSequence, t: usize, limit: Option<usize>) -> Vec<(Vec<f64>, usize)> {
    let n = limit.map_or(seq.test_len(t), |l| l.min(seq.test_len(t)));
    (0..n).map(|j| seq.test_sample(t, j)).collect()
}

/// AUC per score kind for in-distribution vs OOD inputs.
pub fn evaluate_ood(
    spec: &NetworkSpec,
    pred: &Predictor<'_>,
    in_samples: &[Vec<f64>],
    ood_samples: &[Vec<f64>],
    kinds: &[ScoreKind],
    k: usize,
    rng: &mut RngStream,
) -> BTreeMap<String, f64> {
    assert!(!in_samples.is_empty() && !ood_samples.is_empty(), "empty OOD evaluation stream");
    let mut collect = |xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| {
                let set = pred.predict_one(spec, x, k, rng);
                let rep = score(&set);
                kinds.iter().map(|kind| kind.select(&set, &rep, None)).collect()
            })
            .collect()
    };
    let ins = collect(in_samples);
    let outs = collect(ood_samples);
    kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let a: Vec<f64> = ins.iter().map(|v| v[i]).collect();
            let b: Vec<f64> = outs.iter().map(|v| v[i]).collect();
            (kind.name().to_string(), roc_auc(&a, &b, DEFAULT_THRESHOLDS))
        })
        .collect()
}

/// In-distribution test inputs (round-robin over tasks) and OOD inputs
/// transformed like task `j mod M`.
pub fn ood_inputs(
    cfg: &ExperimentConfig,
    prepared: &PreparedStream,
    ood: &OodConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), RunError> {
    let seq = &prepared.seq;
    let m = seq.num_tasks();
    let mut ins = Vec::with_capacity(ood.count);
    for j in 0..ood.count {
        let t = j % m;
        if seq.test_len(t) == 0 {
            continue;
        }
        ins.push(seq.test_sample(t, (j / m) % seq.test_len(t)).0);
    }
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_OOD, 0]);
    let dim = seq.dim();
    let raw: Dataset = match &ood.source {
        OodSource::Noise => match prepared.input_stats {
            Some((mean, std)) => {
                let m = standardize(&uniform_noise_images(ood.count, dim, &mut rng), mean, std);
                Dataset::from_matrix(&m, vec![0; ood.count], 1)?
            }
            None => {
                let (mean, std) = mean_std(&seq.train().to_matrix());
                let std = if std > 0.0 { std } else { 1.0 };
                let m = DenseMatrix::from_fn(ood.count, dim, |_, _| {
                    use rand_distr::{Distribution, StandardNormal};
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean + std * z
                });
                Dataset::from_matrix(&m, vec![0; ood.count], 1)?
            }
        },
        OodSource::Idx { images, labels } => {
            let (x, _) = parse_idx(images, labels)?;
            if x.cols() != dim {
                return Err(StreamError::DimMismatch {
                    expected: dim,
                    found: x.cols(),
                }
                .into());
            }
            let x = match prepared.input_stats {
                Some((mean, std)) => standardize(&x, mean, std),
                None => x,
            };
            let n = x.rows().min(ood.count);
            let rows: Vec<usize> = (0..n).collect();
            Dataset::from_matrix(&x, vec![0; x.rows()], 1)?.select(&rows)
        }
    };
    let outs = (0..raw.len()).map(|j| seq.transform(j % m, raw.row(j))).collect();
    Ok((ins, outs))
}

/// One per-event log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub task_id: usize,
    pub queried: bool,
    pub score: Option<f64>,
    pub threshold: Option<f64>,
    pub loss: Option<f64>,
    pub query_rate: f64,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "step,task,queried,score,threshold,loss,query_rate";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        format!(
            "{},{},{},{},{},{},{:.9}",
            self.step,
            self.task_id,
            u8::from(self.queried),
            opt(self.score),
            opt(self.threshold),
            opt(self.loss),
            self.query_rate
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub inference_passes: u64,
    pub training_samples: u64,
    pub k_query: usize,
    pub k_grad: usize,
    pub update_rate: f64,
    /// `K_query + rate · K_grad · TRAIN_PASS_COST` inference-pass units per event.
    pub expected_cost_per_event: f64,
    /// Same quantity relative to updating on every event without querying.
    pub relative_to_full_training: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub tasks: usize,
    pub events: u64,
    pub queries: u64,
    pub updates: u64,
    pub query_rate: f64,
    pub policy: String,
    pub oracle_labels_used: bool,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub final_accuracies: Vec<f64>,
    pub final_mean_accuracy: f64,
    pub mean_last_k: f64,
    pub last_k: usize,
    pub diagonal: Vec<f64>,
    pub mmrr: f64,
    pub bwt: Option<f64>,
    pub low_freq_accuracy: Option<f64>,
    pub high_freq_accuracy: Option<f64>,
    pub balanced_accuracy: f64,
    pub ood_auc: BTreeMap<String, f64>,
    pub query_timing: Vec<QueryTiming>,
    pub saturated_fraction: Option<f64>,
    pub mean_abs_lambda: Option<f64>,
    pub training_state_bytes: u64,
    pub cost: CostReport,
}

/// In-memory result of [`run_stream`].
pub struct RunOutput {
    pub summary: RunSummary,
    pub learner: Learner,
    pub records: Vec<RunRecord>,
    pub checkpoints: Vec<(usize, usize, f64)>,
    pub task_seconds: Vec<f64>,
}

/// Saturation margin for the reported saturated fraction (`|p − ½| > 0.49`).
pub const SATURATION_MARGIN: f64 = 0.49;

/// Runs the online loop on a prepared stream without touching the disk.
pub fn run_stream(cfg: &ExperimentConfig, prepared: &PreparedStream) -> Result<RunOutput, RunError> {
    cfg.validate_core()?;
    let spec = &cfg.network;
    let seq = &prepared.seq;
    let mut learner = Learner::init(cfg);
    let mut ws = GradWorkspace::new(spec);
    let mut controller = match &cfg.policy {
        PolicyConfig::Budget { budget, gamma_budget, .. } => Some(BudgetController::new(*budget, *gamma_budget, cfg.k_query)),
        _ => None,
    };
    let mut queried_total = 0u64;
    let mut seen_total = 0u64;
    let mut updates = 0u64;
    let mut inference_passes = 0u64;
    let mut training_samples = 0u64;
    let mut records = Vec::with_capacity(seq.total_events());
    let mut checkpoints = Vec::new();
    let mut task_seconds = Vec::new();
    let mut acc = AccuracyMatrix::new();
    let mut task_logs: Vec<Vec<bool>> = Vec::new();
    let mut offset = 0usize;

    for t in 0..seq.num_tasks() {
        let started = Instant::now();
        let n = seq.task_len(t);
        let mut log = Vec::with_capacity(n);
        let mut batch: Vec<(Vec<f64>, usize)> = Vec::with_capacity(cfg.batch_size);
        let cp_samples = if cfg.eval.checkpoints > 0 {
            task_test_samples(seq, t, Some(cfg.eval.checkpoint_test_limit))
        } else {
            Vec::new()
        };
        let mut next_cp = 1usize;
        // Only the query phase needs a predictor snapshot; rebuild it lazily after updates.
        let mut snapshot_dirty = true;
        let mut snapshot_probs: Option<Vec<DenseMatrix>> = None;
        for j in 0..n {
            let ev = seq.event(t, j, offset);
            let step = ev.step as u64;
            let decision: Option<QueryDecision> = match &cfg.policy {
                PolicyConfig::None => None,
                PolicyConfig::Random { rate } => {
                    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_RANDOM_POLICY, step]);
                    Some(random_decide(*rate, &mut rng))
                }
                PolicyConfig::Fixed { tau, score: kind } | PolicyConfig::Budget { score: kind, budget: tau, .. } => {
                    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_QUERY, step]);
                    let set = match &learner {
                        Learner::Bayes { post, biases, .. } => {
                            if snapshot_dirty || snapshot_probs.is_none() {
                                snapshot_probs = Some(post.probability());
                                snapshot_dirty = false;
                            }
                            inference_passes += cfg.k_query as u64;
                            mc_predictive_with_probability(
                                spec,
                                snapshot_probs.as_ref().unwrap(),
                                biases.as_deref(),
                                &ev.features,
                                cfg.k_query,
                                &mut rng,
                            )
                        }
                        Learner::Ste { .. } => {
                            inference_passes += 1;
                            learner.predictor().predict_one(spec, &ev.features, 1, &mut rng)
                        }
                    };
                    let rep = score(&set);
                    let label = kind.needs_label().then_some(ev.label);
                    let s = kind.select(&set, &rep, label);
                    let threshold = match (&cfg.policy, &controller) {
                        (PolicyConfig::Budget { .. }, Some(c)) => adaptive_threshold(c),
                        _ => *tau,
                    };
                    Some(fixed_threshold_decide(s, threshold))
                }
            };
            if let (Some(c), Some(d)) = (controller.as_mut(), decision.as_ref()) {
                update_counts(c, d);
            }
            let queried = decision.as_ref().is_none_or(|d| d.query);
            seen_total += 1;
            if queried {
                queried_total += 1;
            }
            let mut loss = None;
            if queried {
                batch.push((ev.features.clone(), ev.label));
                if batch.len() == cfg.batch_size {
                    loss = Some(apply_update(cfg, &mut learner, &batch, step, &mut ws)?);
                    training_samples += batch.len() as u64;
                    updates += 1;
                    batch.clear();
                    snapshot_dirty = true;
                }
            }
            log.push(queried);
            records.push(RunRecord {
                step: ev.step,
                task_id: t,
                queried,
                score: decision.as_ref().filter(|_| !matches!(cfg.policy, PolicyConfig::Random { .. })).map(|d| d.score),
                threshold: decision.as_ref().map(|d| d.threshold_used),
                loss,
                query_rate: queried_total as f64 / seen_total as f64,
            });
            if cfg.eval.checkpoints > 0 && !cp_samples.is_empty() {
                let target = (n * next_cp).div_ceil(cfg.eval.checkpoints);
                if j + 1 == target.max(1) && next_cp <= cfg.eval.checkpoints {
                    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_CHECKPOINT_EVAL, t as u64, next_cp as u64]);
                    let pred = learner.predictor();
                    let (a, _) = evaluate_samples(spec, &pred, &cp_samples, cfg.eval.k, cfg.eval.batch, &mut rng);
                    checkpoints.push((t, j + 1, a));
                    while next_cp <= cfg.eval.checkpoints && (n * next_cp).div_ceil(cfg.eval.checkpoints).max(1) <= j + 1 {
                        next_cp += 1;
                    }
                }
            }
        }
        if !batch.is_empty() {
            let step = (offset + n) as u64;
            let loss = apply_update(cfg, &mut learner, &batch, step, &mut ws)?;
            training_samples += batch.len() as u64;
            updates += 1;
            if let Some(r) = records.last_mut() {
                r.loss = Some(loss);
            }
        }
        offset += n;
        task_logs.push(log);

        let pred = learner.predictor();
        let width = if matches!(cfg.stream, StreamConfig::Synthetic { .. }) { seq.num_tasks() } else { t + 1 };
        let mut row = Vec::with_capacity(width);
        for i in 0..width {
            let samples = task_test_samples(seq, i, cfg.eval.test_limit);
            if samples.is_empty() {
                row.push(0.0);
                continue;
            }
            let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_EVAL, t as u64, i as u64]);
            row.push(evaluate_samples(spec, &pred, &samples, cfg.eval.k, cfg.eval.batch, &mut rng).0);
        }
        acc.push_row(row);
        task_seconds.push(started.elapsed().as_secs_f64());
    }

    // Class-frequency breakdown on every task's test set after training.
    let pred = learner.predictor();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for t in 0..seq.num_tasks() {
        let samples = task_test_samples(seq, t, cfg.eval.test_limit);
        if samples.is_empty() {
            continue;
        }
        let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_EVAL, u64::MAX, t as u64]);
        let (_, p) = evaluate_samples(spec, &pred, &samples, cfg.eval.k, cfg.eval.batch, &mut rng);
        preds.extend(p);
        labels.extend(samples.iter().map(|(_, y)| *y));
    }
    let mut low_freq = seq.low_freq().to_vec();
    low_freq.resize(spec.output_size(), false);
    let class_acc = per_class_accuracy(&preds, &labels, &low_freq);
    let present: Vec<f64> = class_acc.per_class.iter().filter_map(|a| *a).collect();
    let balanced = present.iter().sum::<f64>() / present.len().max(1) as f64;

    let ood_auc = match &cfg.ood {
        Some(ood) => {
            let (ins, outs) = ood_inputs(cfg, prepared, ood)?;
            let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_OOD, 1]);
            let k = if cfg.method == Method::Ste { 1 } else { cfg.k_query };
            evaluate_ood(spec, &pred, &ins, &outs, &ood.scores, k, &mut rng)
        }
        None => BTreeMap::new(),
    };
    drop(pred);

    let m = acc.tasks();
    let last_k = cfg.eval.last_k.min(m);
    let diagonal = acc.diagonal();
    let final_row = acc.final_row().to_vec();
    let k_grad = if cfg.method == Method::Ste { 1 } else { cfg.bimu.k };
    let k_query = match (&cfg.policy, cfg.method) {
        (PolicyConfig::Fixed { .. } | PolicyConfig::Budget { .. }, Method::Ste) => 1,
        (PolicyConfig::Fixed { .. } | PolicyConfig::Budget { .. }, _) => cfg.k_query,
        _ => 0,
    };
    let rate = training_samples as f64 / seen_total.max(1) as f64;
    let per_event = k_query as f64 + rate * k_grad as f64 * TRAIN_PASS_COST;
    let full = k_grad as f64 * TRAIN_PASS_COST;
    let summary = RunSummary {
        method: cfg.method.name().to_string(),
        seed: cfg.seed,
        tasks: m,
        events: seen_total,
        queries: queried_total,
        updates,
        query_rate: queried_total as f64 / seen_total.max(1) as f64,
        policy: policy_name(&cfg.policy),
        oracle_labels_used: cfg.policy.score_kind() == Some(ScoreKind::VrTrue),
        accuracy_matrix: acc.rows().to_vec(),
        final_mean_accuracy: final_row.iter().sum::<f64>() / final_row.len() as f64,
        final_accuracies: final_row,
        mean_last_k: mean_last_k(&acc, last_k),
        last_k,
        mmrr: mmrr(&diagonal, cfg.eval.mmrr_epsilon),
        diagonal,
        bwt: (m >= 2).then(|| bwt(&acc)),
        low_freq_accuracy: class_acc.low,
        high_freq_accuracy: class_acc.high,
        balanced_accuracy: balanced,
        ood_auc,
        query_timing: task_logs.iter().map(|l| query_timing(l)).collect(),
        saturated_fraction: learner.posterior().map(|p| p.saturated_fraction(SATURATION_MARGIN)),
        mean_abs_lambda: learner.posterior().map(BernoulliPosterior::mean_abs_lambda),
        training_state_bytes: training_state_bytes(cfg.method, spec),
        cost: CostReport {
            inference_passes,
            training_samples,
            k_query,
            k_grad,
            update_rate: rate,
            expected_cost_per_event: per_event,
            relative_to_full_training: per_event / full,
        },
    };
    Ok(RunOutput {
        summary,
        learner,
        records,
        checkpoints,
        task_seconds,
    })
}

impl ExperimentConfig {
    /// Validation that does not touch the filesystem.
    fn validate_core(&self) -> Result<(), RunError> {
        self.network.validate()?;
        self.bimu.validate()?;
        if self.batch_size == 0 || self.k_query == 0 || self.eval.k == 0 || self.eval.batch == 0 {
            return Err(RunError::Config("batch sizes and sample counts must be positive".into()));
        }
        Ok(())
    }
}

fn policy_name(p: &PolicyConfig) -> String {
    match p {
        PolicyConfig::None => "none".into(),
        PolicyConfig::Fixed { tau, score } => format!("fixed:{}>={tau}", score.name()),
        PolicyConfig::Random { rate } => format!("random:{rate}"),
        PolicyConfig::Budget { budget, gamma_budget, score } => {
            format!("budget:{}:B={budget}:gamma={gamma_budget}", score.name())
        }
    }
}

/// One rule step on a batch of labeled samples; returns the mean loss.
fn apply_update(
    cfg: &ExperimentConfig,
    learner: &mut Learner,
    batch: &[(Vec<f64>, usize)],
    step: u64,
    ws: &mut GradWorkspace,
) -> Result<f64, RunError> {
    let spec = &cfg.network;
    match learner {
        Learner::Bayes { method, post, biases } => {
            let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_GRAD, step]);
            let xs: Vec<&[f64]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
            let grad = grad_lambda_mc_batch(
                spec,
                post,
                biases.as_deref(),
                &xs,
                &ys,
                cfg.bimu.k,
                cfg.bimu.temperature,
                &mut rng,
                ws,
            );
            match method {
                Method::Bimu => bimu_step(post, &grad, &cfg.bimu)?,
                _ => cumulative_step(post, &grad, cfg.cumulative_lr)?,
            }
            if let (Some(b), Some(gb)) = (biases.as_mut(), grad.bias.as_ref()) {
                sgd_biases(b, gb, cfg.bias_lr)?;
            }
            Ok(grad.loss)
        }
        Learner::Ste { state, biases } => {
            let mut total = 0.0;
            let mut acc: Option<Vec<DenseMatrix>> = None;
            let mut bias_acc = biases.as_ref().map(|_| spec.zero_biases());
            let w = state.binary_weights();
            let norm = 1.0 / batch.len() as f64;
            for (x, y) in batch {
                let (logits, tape) = forward(spec, &w, biases.as_deref(), x);
                let (l, dl) = crate::binnet::loss_ce(&logits, *y);
                total += l * norm;
                let (g, gb) = crate::binnet::backward(spec, &tape, &dl);
                match acc.as_mut() {
                    None => acc = Some(g.iter().map(|m| m.map(|v| v * norm)).collect()),
                    Some(a) => {
                        for (am, gm) in a.iter_mut().zip(&g) {
                            *am = am.zip_map(gm, |p, q| p + q * norm);
                        }
                    }
                }
                if let Some(ba) = bias_acc.as_mut() {
                    for (bl, gl) in ba.iter_mut().zip(&gb) {
                        for (bi, gi) in bl.iter_mut().zip(gl) {
                            *bi += gi * norm;
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            for (g, lat) in grads.iter_mut().zip(&state.latent) {
                *g = g.zip_map(lat, |gi, li| if li.abs() > 1.0 { 0.0 } else { gi });
            }
            state.adam_update(&grads)?;
            if let (Some(b), Some(gb)) = (biases.as_mut(), bias_acc.as_ref()) {
                sgd_biases(b, gb, cfg.bias_lr)?;
            }
            Ok(total)
        }
    }
}

fn sgd_biases(b: &mut [Vec<f64>], g: &[Vec<f64>], lr: f64) -> Result<(), RunError> {
    for (layer, (bl, gl)) in b.iter_mut().zip(g).enumerate() {
        if let Some(index) = gl.iter().position(|v| !v.is_finite()) {
            return Err(RuleError::NonFiniteGradient { layer, index }.into());
        }
        for (bi, gi) in bl.iter_mut().zip(gl) {
            *bi -= lr * gi;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes every output file of a finished run into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut results = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    results.push('\n');
    write_file(&dir.join(RESULTS_FILE), results.as_bytes())?;
    write_file(
        &dir.join(ACCMATRIX_FILE),
        AccuracyMatrix::from_rows(out.summary.accuracy_matrix.clone()).to_csv().as_bytes(),
    )?;

    let path = dir.join(RUNLOG_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    writeln!(w, "{}", RunRecord::CSV_HEADER).map_err(io_err(&path))?;
    for r in &out.records {
        writeln!(w, "{}", r.to_csv_row()).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let mut qt = String::from("task,early,middle,late,empty\n");
    for (t, q) in out.summary.query_timing.iter().enumerate() {
        qt.push_str(&format!("{t},{:.6},{:.6},{:.6},{}\n", q.early, q.middle, q.late, u8::from(q.empty)));
    }
    write_file(&dir.join(QUERY_TIMING_FILE), qt.as_bytes())?;

    let mut cp = String::from("task,event,accuracy\n");
    for (t, e, a) in &out.checkpoints {
        cp.push_str(&format!("{t},{e},{a:.6}\n"));
    }
    write_file(&dir.join(CHECKPOINTS_FILE), cp.as_bytes())?;

    let mut tm = String::from("task,seconds\n");
    for (t, s) in out.task_seconds.iter().enumerate() {
        tm.push_str(&format!("{t},{s:.3}\n"));
    }
    write_file(&dir.join(TIMING_FILE), tm.as_bytes())?;

    if let Some(post) = out.learner.posterior() {
        let path = dir.join(CHECKPOINT_FILE);
        let f = File::create(&path).map_err(io_err(&path))?;
        post.write_to(BufWriter::new(f))?;
    }
    if let Some(b) = out.learner.biases() {
        write_file(&dir.join(BIASES_FILE), serde_json::to_string(b).expect("biases serialize").as_bytes())?;
    }
    let _ = cfg;
    Ok(())
}

/// Loads the stream, runs the experiment and writes all outputs to
/// `cfg.output_dir`. On failure a `PARTIAL` marker holding the error is
/// written next to whatever outputs exist.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    let dir = cfg.output_dir.clone();
    let result = (|| {
        cfg.validate()?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let _ = fs::remove_file(dir.join(PARTIAL_MARKER));
        let prepared = prepare_stream(cfg)?;
        let out = run_stream(cfg, &prepared)?;
        write_outputs(&dir, cfg, &out)?;
        Ok(out.summary)
    })();
    if let Err(e) = &result {
        if dir.is_dir() || fs::create_dir_all(&dir).is_ok() {
            let _ = fs::write(dir.join(PARTIAL_MARKER), format!("{e}\n"));
        }
    }
    result
}

/// Loads a posterior checkpoint and the optional sibling bias file.
pub fn load_checkpoint(path: &Path) -> Result<(BernoulliPosterior, Option<Vec<Vec<f64>>>), RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    let post = BernoulliPosterior::read_from(io::BufReader::new(f))?;
    let bias_path = path.with_file_name(BIASES_FILE);
    let biases = if bias_path.is_file() {
        let text = fs::read_to_string(&bias_path).map_err(io_err(&bias_path))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok((post, biases))
}

/// OOD AUCs of a stored posterior against the config's stream and OOD source.
pub fn evaluate_checkpoint_ood(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<BTreeMap<String, f64>, RunError> {
    cfg.validate()?;
    let ood = cfg
        .ood
        .as_ref()
        .ok_or_else(|| RunError::Config("config has no ood section".into()))?;
    let (post, biases) = load_checkpoint(checkpoint)?;
    if post.shapes() != cfg.network.weight_shapes() {
        return Err(RunError::Config("checkpoint does not match the configured network".into()));
    }
    let biases = if cfg.network.bias { biases } else { None };
    let prepared = prepare_stream(cfg)?;
    let (ins, outs) = ood_inputs(cfg, &prepared, ood)?;
    let pred = Predictor::from_posterior(&post, biases.as_deref());
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_OOD, 1]);
    Ok(evaluate_ood(&cfg.network, &pred, &ins, &outs, &ood.scores, cfg.k_query, &mut rng))
}

/// Probability histogram CSV (`bin_lo,bin_hi,count`).
pub fn histogram_csv(post: &BernoulliPosterior, bins: usize) -> String {
    let h = post.probability_histogram(bins);
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.iter().enumerate() {
        s.push_str(&format!(
            "{:.6},{:.6},{c}\n",
            i as f64 / bins as f64,
            (i + 1) as f64 / bins as f64
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binnet::Activation;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            method: Method::Bimu,
            network: NetworkSpec::new(vec![6, 8, 3], Activation::Rbg).unwrap(),
            bimu: BiMUConfig::animals(),
            cumulative_lr: DEFAULT_CUMULATIVE_LR,
            ste: SteConfig::default(),
            init_radius: DEFAULT_INIT_RADIUS,
            bias_lr: 0.01,
            batch_size: 1,
            stream: StreamConfig::Synthetic {
                spec: SyntheticSpec {
                    classes: 3,
                    dims: 6,
                    freq: vec![40, 40, 10],
                    noise_std: 0.5,
                    separation: 3.0,
                    test_per_class: 10,
                    low_freq_threshold: 20,
                    tasks: 2,
                    label_permutations: 1,
                },
                subsample: None,
            },
            policy: PolicyConfig::None,
            k_query: 4,
            eval: EvalConfig {
                checkpoints: 5,
                checkpoint_test_limit: 10,
                ..EvalConfig::default()
            },
            ood: Some(OodConfig {
                source: OodSource::Noise,
                count: 20,
                scores: default_ood_scores(),
            }),
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn no_policy_updates_every_event() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.events, 180);
        assert_eq!(s.updates, 180);
        assert_eq!(s.query_rate, 1.0);
        for f in [RESULTS_FILE, ACCMATRIX_FILE, RUNLOG_FILE, CHECKPOINT_FILE, QUERY_TIMING_FILE, CHECKPOINTS_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let cps = fs::read_to_string(dir.path().join(CHECKPOINTS_FILE)).unwrap();
        assert_eq!(cps.lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn unreachable_threshold_never_updates() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.policy = PolicyConfig::Fixed {
            tau: 2.0,
            score: ScoreKind::Vr,
        };
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.updates, 0);
        assert_eq!(s.queries, 0);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(a.path());
        cfg.policy = PolicyConfig::Budget {
            budget: 0.3,
            gamma_budget: 0.5,
            score: ScoreKind::Vr,
        };
        run_experiment(&cfg).unwrap();
        cfg.output_dir = b.path().to_path_buf();
        run_experiment(&cfg).unwrap();
        for f in [RESULTS_FILE, RUNLOG_FILE, ACCMATRIX_FILE, CHECKPOINT_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn missing_dataset_is_named_and_marked() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.stream = StreamConfig::PermutedMnist {
            dir: dir.path().join("nope"),
            tasks: 2,
            samples_per_task: None,
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, RunError::MissingFile(_)));
        assert!(dir.path().join(PARTIAL_MARKER).is_file());
    }

    #[test]
    fn ste_only_queries_with_aleatoric() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.method = Method::Ste;
        cfg.network.activation = Activation::SignHardtanh;
        cfg.policy = PolicyConfig::Fixed {
            tau: 0.1,
            score: ScoreKind::Epistemic,
        };
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        cfg.policy = PolicyConfig::Fixed {
            tau: 0.1,
            score: ScoreKind::Aleatoric,
        };
        let s = run_experiment(&cfg).unwrap();
        assert!(s.saturated_fraction.is_none());
    }

    #[test]
    fn self_comparison_ood_is_chance() {
        let cfg = tiny_cfg(Path::new("."));
        let prepared = prepare_stream(&cfg).unwrap();
        let learner = Learner::init(&cfg);
        let pred = learner.predictor();
        let xs: Vec<Vec<f64>> = (0..200).map(|j| prepared.seq.test_sample(j % 2, j % 30).0).collect();
        let mut rng = RngStream::new(1, 1);
        let auc = evaluate_ood(&cfg.network, &pred, &xs, &xs, &[ScoreKind::Epistemic], 8, &mut rng);
        assert!((auc["epistemic"] - 0.5).abs() < 0.05);

        let sat = BernoulliPosterior::constant(&cfg.network.weight_shapes(), 50.0);
        let pred = Predictor::from_posterior(&sat, None);
        let outs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64; 6]).collect();
        let auc = evaluate_ood(&cfg.network, &pred, &xs[..50], &outs, &[ScoreKind::Epistemic], 8, &mut rng);
        assert!((auc["epistemic"] - 0.5).abs() < 0.05);
    }

    #[test]
    fn config_round_trip() {
        let cfg = tiny_cfg(Path::new("/tmp/out"));
        let back = ExperimentConfig::from_json(&cfg.to_json(), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
        let err = ExperimentConfig::from_json("{\"seed\": 1, \"bogus\": 2}", Path::new("."));
        assert!(err.is_err());
    }
}
