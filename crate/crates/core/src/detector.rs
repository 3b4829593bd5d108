//! Single-video detection against a reference set, plus evaluation metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::kernel::KernelParams;
use crate::mmd::{MmdError, MmdReference};
use crate::nsg::NsgFeature;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error("test video {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: MmdError,
    },
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("AUROC is undefined without both real and fake samples")]
    SingleClass,
}

type Result<T> = std::result::Result<T, DetectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "real" => Ok(Self::Real),
            "fake" => Ok(Self::Fake),
            other => Err(format!("label must be real or fake, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Fake => "fake",
        })
    }
}

/// The detector's verdict; identical in kind to [`Label`].
pub type Decision = Label;

/// Frozen kernel, cached reference statistics and threshold.
#[derive(Debug, Clone)]
pub struct DetectorState {
    reference: MmdReference,
    tau: f64,
}

impl DetectorState {
    pub const DEFAULT_TAU: f64 = 1.0;
    pub const DEFAULT_REFERENCE_SIZE: usize = 100;

    pub fn new<F: AsRef<[f64]> + Sync>(reference: &[F], params: KernelParams, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(DetectError::Config(format!("tau must be finite, got {tau}")));
        }
        Ok(Self {
            reference: MmdReference::new(reference, params)?,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn reference_size(&self) -> usize {
        self.reference.len()
    }

    pub fn params(&self) -> &KernelParams {
        self.reference.params()
    }

    /// The statistic `Q` for a flattened feature.
    pub fn statistic(&self, test: &[f64]) -> Result<f64> {
        Ok(self.reference.statistic(test)?)
    }

    /// Fake iff `Q > τ`.
    pub fn decide(&self, q: f64) -> Decision {
        if q > self.tau {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub q: f64,
    pub decision: Decision,
    pub flags: Vec<bool>,
}

pub fn detect_one(test: &NsgFeature, state: &DetectorState) -> Result<DetectionResult> {
    let q = state.statistic(test.as_ref())?;
    Ok(DetectionResult {
        q,
        decision: state.decide(q),
        flags: test.flags().to_vec(),
    })
}

/// Elementwise [`detect_one`]; the first failure aborts with its index.
pub fn detect_batch(tests: &[NsgFeature], state: &DetectorState) -> Result<Vec<DetectionResult>> {
    let one = |(index, t): (usize, &NsgFeature)| {
        detect_one(t, state).map_err(|e| match e {
            DetectError::Mmd(source) => DetectError::Item { index, source },
            other => other,
        })
    };
    #[cfg(feature = "parallel")]
    return tests.par_iter().enumerate().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    return tests.iter().enumerate().map(one).collect();
}

/// One line of detection output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    #[serde(rename = "Q")]
    pub q: f64,
    pub decision: Decision,
    pub flags: Vec<bool>,
}

pub fn to_jsonl(records: &[DetectionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub auroc: Option<f64>,
}

impl MetricsReport {
    pub fn auroc(&self) -> Result<f64> {
        self.auroc.ok_or(DetectError::SingleClass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold metrics at `tau` (fake is the positive class) and AUROC.
///
/// Precision and recall are 0 when their denominators are empty.
pub fn compute_metrics(labels: &[Label], scores: &[f64], tau: f64) -> Result<MetricsReport> {
    if labels.len() != scores.len() {
        return Err(DetectError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&l, &q) in labels.iter().zip(scores) {
        match (l, q > tau) {
            (Label::Fake, true) => tp += 1,
            (Label::Real, true) => fp += 1,
            (Label::Real, false) => tn += 1,
            (Label::Fake, false) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        tau,
        tp,
        fp,
        tn,
        fn_,
        recall,
        precision,
        accuracy: ratio(tp + tn, labels.len()),
        f1,
        auroc: auroc(labels, scores).ok(),
    })
}

/// `P(Q_fake > Q_real)` with ties counted as ½, via midranks.
pub fn auroc(labels: &[Label], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(DetectError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let n_fake = labels.iter().filter(|&&l| l == Label::Fake).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(DetectError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_fake = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == Label::Fake {
                rank_sum_fake += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_fake - (n_fake * (n_fake + 1)) as f64 / 2.0;
    Ok(u / (n_fake * n_real) as f64)
}

pub fn threshold_sweep(labels: &[Label], scores: &[f64], taus: &[f64]) -> Result<Vec<MetricsReport>> {
    taus.iter().map(|&t| compute_metrics(labels, scores, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FrameMatrix;
    use proptest::prelude::*;

    fn feature(values: &[f64]) -> NsgFeature {
        NsgFeature::from_values(FrameMatrix::new(1, values.len(), values.to_vec()).unwrap())
    }

    fn state(reference: &[Vec<f64>], tau: f64) -> DetectorState {
        let p = KernelParams::init(&[reference[0].len(), 3], 0).unwrap();
        DetectorState::new(reference, p, tau).unwrap()
    }

    #[test]
    fn identical_single_reference_is_real() {
        let r = vec![vec![0.5, -1.0]];
        let s = state(&r, 1.0);
        let out = detect_one(&feature(&r[0]), &s).unwrap();
        assert!(out.q.abs() < 1e-15);
        assert_eq!(out.decision, Label::Real);
    }

    #[test]
    fn tie_at_threshold_is_real() {
        let r = vec![vec![0.5, -1.0]];
        let s = state(&r, 0.0);
        assert_eq!(s.decide(0.0), Label::Real);
        assert_eq!(s.decide(1e-12), Label::Fake);
    }

    #[test]
    fn batch_matches_single_and_respects_order() {
        let r = vec![vec![0.0, 0.0], vec![1.0, 0.5]];
        let s = state(&r, 0.5);
        let tests: Vec<NsgFeature> = [[0.1, 0.2], [3.0, -1.0], [0.5, 0.5]].iter().map(|v| feature(v)).collect();
        assert!(detect_batch(&[], &s).unwrap().is_empty());
        let all = detect_batch(&tests, &s).unwrap();
        assert_eq!(all[0], detect_one(&tests[0], &s).unwrap());
        let rev: Vec<NsgFeature> = tests.iter().rev().cloned().collect();
        let rev_out = detect_batch(&rev, &s).unwrap();
        for (a, b) in all.iter().zip(rev_out.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_error_names_the_index() {
        let r = vec![vec![0.0, 0.0]];
        let s = state(&r, 1.0);
        let tests = vec![feature(&[0.0, 0.0]), feature(&[1.0])];
        match detect_batch(&tests, &s) {
            Err(DetectError::Item { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected item error, got {other:?}"),
        }
    }

    #[test]
    fn confusion_arithmetic() {
        let mut labels = vec![Label::Fake; 10];
        labels.extend(vec![Label::Real; 10]);
        let mut scores = vec![2.0; 8];
        scores.extend([0.0; 2]);
        scores.extend([2.0; 2]);
        scores.extend([0.0; 8]);
        let m = compute_metrics(&labels, &scores, 1.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (8, 2, 2, 8));
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            assert!((v - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn auroc_examples() {
        let l = [Label::Fake, Label::Fake, Label::Real, Label::Real];
        assert_eq!(auroc(&l, &[0.9, 0.8, 0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(auroc(&l, &[0.9, 0.4, 0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&l, &[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_keeps_threshold_metrics() {
        let m = compute_metrics(&[Label::Real, Label::Real], &[0.1, 2.0], 1.0).unwrap();
        assert_eq!(m.auroc, None);
        assert!(matches!(m.auroc(), Err(DetectError::SingleClass)));
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn sweep_limits() {
        let l = [Label::Fake, Label::Real, Label::Fake];
        let q = [0.3, 0.2, 5.0];
        let s = threshold_sweep(&l, &q, &[f64::NEG_INFINITY, 1.0, f64::INFINITY]).unwrap();
        assert_eq!(s[0].recall, 1.0);
        assert_eq!(s[2].recall, 0.0);
        assert_eq!(s[1], compute_metrics(&l, &q, 1.0).unwrap());
    }

    #[test]
    fn jsonl_shape() {
        let rec = DetectionRecord {
            video_id: "v1".into(),
            q: 1.5,
            decision: Label::Fake,
            flags: vec![false, true],
        };
        let line = to_jsonl(&[rec]);
        assert_eq!(line, "{\"video_id\":\"v1\",\"Q\":1.5,\"decision\":\"fake\",\"flags\":[false,true]}\n");
    }

    proptest! {
        #[test]
        fn raising_tau_never_raises_recall(scores in proptest::collection::vec(-3.0f64..3.0, 2..30), t in -3.0f64..3.0, dt in 0.0f64..2.0) {
            let labels: Vec<Label> = (0..scores.len()).map(|i| if i % 2 == 0 { Label::Fake } else { Label::Real }).collect();
            let lo = compute_metrics(&labels, &scores, t).unwrap();
            let hi = compute_metrics(&labels, &scores, t + dt).unwrap();
            prop_assert!(hi.recall <= lo.recall);
        }
    }
}
