//! Monte-Carlo uncertainty scores over a set of `K` softmax vectors.
//!
//! All entropies are in nats with `0 · ln 0 = 0`.

use serde::{Deserialize, Serialize};

use crate::numkit::{argmax, entropy};

/// Default number of thresholds for [`roc_auc`].
pub const DEFAULT_THRESHOLDS: usize = 1000;

/// `K` softmax vectors over `C` classes, in sampling order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    vectors: Vec<Vec<f64>>,
}

impl PredictionSet {
    /// Panics when empty, ragged, or when a vector is not a distribution
    /// (negative entries or sum off by more than 1e-9).
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        assert!(!vectors.is_empty(), "prediction set needs K >= 1");
        let c = vectors[0].len();
        assert!(c >= 1, "prediction vectors need at least one class");
        for v in &vectors {
            assert_eq!(v.len(), c, "ragged prediction set");
            assert!(v.iter().all(|&p| p >= 0.0), "negative probability");
            let s: f64 = v.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "prediction vector sums to {s}");
        }
        Self { vectors }
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors[0].len()
    }

    /// Mean vector; exactly the common vector when all samples agree.
    pub fn mean(&self) -> Vec<f64> {
        if self.vectors.iter().all(|v| v == &self.vectors[0]) {
            return self.vectors[0].clone();
        }
        let k = self.k() as f64;
        let mut m = vec![0.0; self.num_classes()];
        for v in &self.vectors {
            for (mi, &p) in m.iter_mut().zip(v) {
                *mi += p;
            }
        }
        m.iter_mut().for_each(|x| *x /= k);
        m
    }

    /// Argmax class of each MC predictor.
    pub fn votes(&self) -> Vec<usize> {
        self.vectors.iter().map(|v| argmax(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub predictive: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub vr: f64,
    pub mode_class: usize,
}

/// Which uncertainty value a policy or OOD pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Predictive,
    Aleatoric,
    Epistemic,
    Vr,
    /// Needs the true label; diagnostic only.
    VrTrue,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Predictive,
        ScoreKind::Aleatoric,
        ScoreKind::Epistemic,
        ScoreKind::Vr,
        ScoreKind::VrTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Predictive => "predictive",
            ScoreKind::Aleatoric => "aleatoric",
            ScoreKind::Epistemic => "epistemic",
            ScoreKind::Vr => "vr",
            ScoreKind::VrTrue => "vr_true",
        }
    }

    pub fn needs_label(self) -> bool {
        self == ScoreKind::VrTrue
    }

    /// Picks this score from a report; `VrTrue` needs `label`.
    pub fn select(self, set: &PredictionSet, report: &UncertaintyReport, label: Option<usize>) -> f64 {
        match self {
            ScoreKind::Predictive => report.predictive,
            ScoreKind::Aleatoric => report.aleatoric,
            ScoreKind::Epistemic => report.epistemic,
            ScoreKind::Vr => report.vr,
            ScoreKind::VrTrue => vr_true(set, label.expect("vr_true needs the label")),
        }
    }
}

/// Class with the most votes, lowest index on ties, and its vote count.
fn mode(votes: &[usize], classes: usize) -> (usize, usize) {
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    (best, counts[best])
}

/// Predictive entropy of the mean, its expected-entropy part and the
/// mutual-information remainder, plus vote statistics.
///
/// The epistemic part is evaluated as the mean KL divergence from each
/// sample to the mean, which equals `H(mean) − mean H` and is exactly zero
/// when all samples agree.
pub fn score(v: &PredictionSet) -> UncertaintyReport {
    let mean = v.mean();
    let predictive = entropy(&mean);
    let k = v.k() as f64;
    let epistemic = v
        .vectors
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .filter(|(&pc, _)| pc > 0.0)
                .map(|(&pc, &mc)| pc * (pc / mc).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / k;
    let aleatoric = predictive - epistemic;
    let (mode_class, f_mode) = mode(&v.votes(), v.num_classes());
    UncertaintyReport {
        predictive,
        aleatoric,
        epistemic,
        vr: 1.0 - f_mode as f64 / v.k() as f64,
        mode_class,
    }
}

/// Fraction of MC predictors whose argmax disagrees with `y`.
pub fn vr_true(v: &PredictionSet, y: usize) -> f64 {
    assert!(y < v.num_classes(), "label {y} out of range");
    let agree = v.votes().iter().filter(|&&c| c == y).count();
    1.0 - agree as f64 / v.k() as f64
}

/// Threshold-sweep ROC-AUC with OOD as the positive class.
///
/// `thresholds` values are spaced uniformly from the smallest to the largest
/// observed score (inclusive); a sample is flagged OOD when its score is
/// `≥ τ`. The curve is closed at `(0, 0)` and integrated by the trapezoid
/// rule.
pub fn roc_auc(scores_in: &[f64], scores_out: &[f64], thresholds: usize) -> f64 {
    assert!(!scores_in.is_empty() && !scores_out.is_empty(), "empty score set");
    assert!(thresholds >= 2, "need at least two thresholds");
    let all = scores_in.iter().chain(scores_out);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo.is_finite() && hi.is_finite(), "non-finite scores");

    let mut sorted_in = scores_in.to_vec();
    let mut sorted_out = scores_out.to_vec();
    sorted_in.sort_by(f64::total_cmp);
    sorted_out.sort_by(f64::total_cmp);
    let frac_at_least = |sorted: &[f64], tau: f64| {
        let below = sorted.partition_point(|&s| s < tau);
        (sorted.len() - below) as f64 / sorted.len() as f64
    };

    // Sweep from the highest threshold (fewest positives) down to the lowest.
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for i in (0..thresholds).rev() {
        let tau = if i == thresholds - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (thresholds - 1) as f64
        };
        let fpr = frac_at_least(&sorted_in, tau);
        let tpr = frac_at_least(&sorted_out, tau);
        area += (fpr - prev.0) * (tpr + prev.1) * 0.5;
        prev = (fpr, tpr);
    }
    area.clamp(0.0, 1.0)
}

/// Mann–Whitney AUC: `P(out > in) + ½ P(out = in)`.
pub fn rank_auc(scores_in: &[f64], scores_out: &[f64]) -> f64 {
    assert!(!scores_in.is_empty() && !scores_out.is_empty(), "empty score set");
    let mut total = 0.0;
    for &o in scores_out {
        for &i in scores_in {
            total += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (scores_in.len() * scores_out.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn onehot(c: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    }

    #[test]
    fn identical_vectors_have_no_disagreement() {
        let v = PredictionSet::new(vec![vec![0.2, 0.5, 0.3]; 4]);
        let r = score(&v);
        assert!(r.epistemic.abs() < 1e-15);
        assert_eq!(r.vr, 0.0);
        assert_eq!(r.mode_class, 1);
    }

    #[test]
    fn opposite_onehots() {
        let v = PredictionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = score(&v);
        let ln2 = std::f64::consts::LN_2;
        assert!((r.predictive - ln2).abs() < 1e-15);
        assert_eq!(r.aleatoric, 0.0);
        assert!((r.epistemic - ln2).abs() < 1e-15);
        assert_eq!(r.vr, 0.5);
        assert_eq!(r.mode_class, 0);
    }

    #[test]
    fn vote_counts() {
        let mut vs = vec![onehot(0, 3); 6];
        vs.extend(vec![onehot(1, 3); 3]);
        vs.push(onehot(2, 3));
        let v = PredictionSet::new(vs);
        assert!((score(&v).vr - 0.4).abs() < 1e-15);

        let v = PredictionSet::new(vec![onehot(1, 3), onehot(1, 3), onehot(2, 3)]);
        assert!((vr_true(&v, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(vr_true(&v, 0), 1.0);
        let all = PredictionSet::new(vec![onehot(2, 3); 3]);
        assert_eq!(vr_true(&all, 2), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.9], 1000), 1.0);
        assert_eq!(roc_auc(&[0.4], &[0.4], 1000), 0.5);
        assert_eq!(roc_auc(&[0.9], &[0.1, 0.2], 1000), 0.0);
        assert_eq!(rank_auc(&[0.1, 0.2], &[0.9]), 1.0);
    }

    fn random_set() -> impl Strategy<Value = PredictionSet> {
        (1usize..8, 2usize..6).prop_flat_map(|(k, c)| {
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), k).prop_map(|raw| {
                PredictionSet::new(
                    raw.into_iter()
                        .map(|v| {
                            let s: f64 = v.iter().sum::<f64>() + 1e-12;
                            v.iter().map(|x| (x + 1e-12 / v.len() as f64) / s).collect()
                        })
                        .collect(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn decomposition_holds(v in random_set()) {
            let r = score(&v);
            prop_assert!((r.predictive - r.aleatoric - r.epistemic).abs() <= 1e-9);
            prop_assert!(r.epistemic >= -1e-9);
            prop_assert!(r.vr >= 0.0 && r.vr <= 1.0 - 1.0 / v.k() as f64 + 1e-15);
        }

        #[test]
        fn vr_permutation_invariant(v in random_set(), rot in 0usize..8) {
            let mut vs = v.vectors().to_vec();
            let n = vs.len();
            vs.rotate_left(rot % n);
            vs.reverse();
            prop_assert_eq!(score(&v).vr, score(&PredictionSet::new(vs)).vr);
        }

        #[test]
        fn vr_true_on_grid(v in random_set(), y in 0usize..2) {
            let f = vr_true(&v, y) * v.k() as f64;
            prop_assert!((f - f.round()).abs() < 1e-9);
        }

        #[test]
        fn auc_antisymmetric(a in prop::collection::vec(-3.0f64..3.0, 1..40),
                             b in prop::collection::vec(-3.0f64..3.0, 1..40)) {
            let s = roc_auc(&a, &b, 1000) + roc_auc(&b, &a, 1000);
            prop_assert!((s - 1.0).abs() <= 2.0 / 1000.0);
        }
    }
}
