//! Evaluation metrics over accuracy matrices and query logs.

use serde::{Deserialize, Serialize};

/// Default MMRR `ε` with accuracies as fractions.
pub const DEFAULT_MMRR_EPSILON: f64 = 1e-3;

/// `a[t][i]`: accuracy on task `i` after training through task `t`.
///
/// Rows may be lower-triangular (length `t + 1`) or full.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r);
        }
        m
    }

    /// Appends the row for the next task; it must cover at least tasks `0..=t`.
    pub fn push_row(&mut self, row: Vec<f64>) {
        let t = self.rows.len();
        assert!(row.len() > t, "row {t} must cover tasks 0..={t}");
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)), "accuracy outside [0, 1]");
        self.rows.push(row);
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    /// `a_{t,t}` for each task.
    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(t, r)| r[t]).collect()
    }

    pub fn final_row(&self) -> &[f64] {
        self.rows.last().expect("empty accuracy matrix")
    }

    /// CSV with header `after_task,task_0,...`; cells beyond a row's length are empty.
    pub fn to_csv(&self) -> String {
        let width = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("after_task");
        for i in 0..width {
            out.push_str(&format!(",task_{i}"));
        }
        out.push('\n');
        for (t, r) in self.rows.iter().enumerate() {
            out.push_str(&t.to_string());
            for i in 0..width {
                out.push(',');
                if let Some(a) = r.get(i) {
                    out.push_str(&format!("{a:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `1/(a_max − a_T + ε)` where `a_T` is the last entry.
pub fn mmrr(per_task_acc: &[f64], epsilon: f64) -> f64 {
    assert!(!per_task_acc.is_empty(), "empty accuracy sequence");
    let a_max = per_task_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_t = *per_task_acc.last().unwrap();
    1.0 / (a_max - a_t + epsilon)
}

/// Mean of `a_{T,i} − a_{i,i}` over `i < T`.
pub fn bwt(am: &AccuracyMatrix) -> f64 {
    let t = am.tasks();
    assert!(t >= 2, "BWT needs at least two tasks");
    let last = am.final_row();
    (0..t - 1).map(|i| last[i] - am.get(i, i)).sum::<f64>() / (t - 1) as f64
}

pub fn hpo_cost(acc0: f64, mean_acc: f64, acc_t: f64, w1: f64, w2: f64, w3: f64) -> f64 {
    w1 * acc0 + w2 * mean_acc + w3 * acc_t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub early: f64,
    pub middle: f64,
    pub late: f64,
    pub empty: bool,
}

/// Number of equal parts each task stream is split into.
pub const TIMING_PARTS: usize = 100;
/// First part of the middle and of the late segment.
pub const TIMING_EDGES: (usize, usize) = (25, 74);

/// Fractions of a task's queries in parts `[0,24]`, `[25,73]`, `[74,99]`.
///
/// Event `j` of `n` falls in part `floor(100 j / n)`.
pub fn query_timing(task_log: &[bool]) -> QueryTiming {
    let n = task_log.len();
    let mut counts = [0usize; 3];
    for (j, &q) in task_log.iter().enumerate() {
        if !q {
            continue;
        }
        let part = j * TIMING_PARTS / n;
        let seg = if part < TIMING_EDGES.0 {
            0
        } else if part < TIMING_EDGES.1 {
            1
        } else {
            2
        };
        counts[seg] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return QueryTiming {
            early: 0.0,
            middle: 0.0,
            late: 0.0,
            empty: true,
        };
    }
    let f = |c: usize| c as f64 / total as f64;
    QueryTiming {
        early: f(counts[0]),
        middle: f(counts[1]),
        late: f(counts[2]),
        empty: false,
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "length mismatch");
    assert!(!preds.is_empty(), "empty input");
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Per-class accuracy; `None` for classes absent from `labels`.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present low-frequency classes (`None` if there are none).
    pub low: Option<f64>,
    /// Mean over present remaining classes.
    pub high: Option<f64>,
    pub overall: f64,
}

pub fn per_class_accuracy(preds: &[usize], labels: &[usize], low_freq: &[bool]) -> ClassAccuracy {
    let overall = accuracy(preds, labels);
    let c = low_freq.len();
    let mut hit = vec![0usize; c];
    let mut tot = vec![0usize; c];
    for (&p, &l) in preds.iter().zip(labels) {
        assert!(l < c, "label {l} outside the frequency table");
        tot[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&tot)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let group = |want: bool| {
        let vals: Vec<f64> = per_class
            .iter()
            .zip(low_freq)
            .filter(|(_, &lf)| lf == want)
            .filter_map(|(a, _)| *a)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    ClassAccuracy {
        low: group(true),
        high: group(false),
        per_class,
        overall,
    }
}

/// Mean final-row accuracy over the last `k` tasks.
pub fn mean_last_k(am: &AccuracyMatrix, k: usize) -> f64 {
    let last = am.final_row();
    let t = am.tasks();
    assert!(k >= 1 && k <= t, "k must lie in 1..=tasks");
    last[t - k..t].iter().sum::<f64>() / k as f64
}
