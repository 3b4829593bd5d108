//! Normalized spatiotemporal gradient (NSG) features.
//!
//! For each retained frame the feature is
//!
//! ```text
//! g(x, t) = s(x_t) / (⟨s(x_t), Δx_t⟩ / Δt + λ)
//! ```
//!
//! where `s` is the spatial score supplied by a [`ScoreProvider`] and `Δx_t`
//! is the forward frame difference. Under brightness constancy the inner
//! product term is the negated temporal log-density derivative, so the
//! denominator estimates `−∂_t log p + λ` without any flow computation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{frame_time, GaussianProcessSpec, TranslatingDensitySpec};
use crate::tensor::{FrameMatrix, ScoreField, VideoTensor};

#[derive(Debug, Error)]
pub enum NsgError {
    #[error("invalid NSG config: {0}")]
    Config(String),
    #[error("score provider has dimension {provider}, video has {video}")]
    DimensionMismatch { provider: usize, video: usize },
    #[error("score provider covers {provider} frames, video has {video}")]
    FrameMismatch { provider: usize, video: usize },
    #[error("score provider failed at frame {frame}: {reason}")]
    Provider { frame: usize, reason: String },
    #[error("non-finite NSG value at frame {frame}")]
    NonFinite { frame: usize },
    #[error("every retained frame has a near-degenerate denominator")]
    AllFramesDegenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastFrameRule {
    /// Reuse `x_T − x_{T−1}` for the final frame, keeping `T` features.
    BackwardDifference,
    /// Drop the final frame, keeping `T − 1` features.
    DropLast,
}

impl std::str::FromStr for LastFrameRule {
    type Err = NsgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "backward_difference" => Ok(Self::BackwardDifference),
            "drop_last" => Ok(Self::DropLast),
            other => Err(NsgError::Config(format!("unknown last-frame rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsgConfig {
    pub lambda: f64,
    pub delta_t: f64,
    pub last_frame_rule: LastFrameRule,
    pub denominator_floor: f64,
}

impl Default for NsgConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            delta_t: 1.0,
            last_frame_rule: LastFrameRule::BackwardDifference,
            denominator_floor: 1e-3,
        }
    }
}

impl NsgConfig {
    pub fn validate(&self) -> Result<(), NsgError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(NsgError::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(NsgError::Config(format!("delta_t must be > 0, got {}", self.delta_t)));
        }
        if !(self.denominator_floor >= 0.0) {
            return Err(NsgError::Config(format!(
                "denominator_floor must be >= 0, got {}",
                self.denominator_floor
            )));
        }
        Ok(())
    }

    /// Number of features kept for a `frames`-frame video.
    pub fn retained_frames(&self, frames: usize) -> usize {
        match self.last_frame_rule {
            LastFrameRule::BackwardDifference => frames,
            LastFrameRule::DropLast => frames - 1,
        }
    }
}

/// `G(x)`: per-frame NSG vectors plus the denominators that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NsgFeature {
    values: FrameMatrix,
    denominators: Vec<f64>,
    flags: Vec<bool>,
}

/// The sidecar record written next to each feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsgSidecar {
    pub denominators: Vec<f64>,
    pub flags: Vec<bool>,
    pub lambda: f64,
    pub delta_t: f64,
    pub last_frame_rule: LastFrameRule,
}

impl NsgFeature {
    pub fn new(values: FrameMatrix, denominators: Vec<f64>, flags: Vec<bool>) -> Self {
        assert_eq!(values.rows(), denominators.len());
        assert_eq!(values.rows(), flags.len());
        Self {
            values,
            denominators,
            flags,
        }
    }

    /// Wraps bare feature values (e.g. read back from a tensor file) with
    /// unknown denominators.
    pub fn from_values(values: FrameMatrix) -> Self {
        let n = values.rows();
        Self {
            values,
            denominators: vec![f64::NAN; n],
            flags: vec![false; n],
        }
    }

    pub fn values(&self) -> &FrameMatrix {
        &self.values
    }

    pub fn frame_count(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.rows(), self.values.cols())
    }

    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn sidecar(&self, cfg: &NsgConfig) -> NsgSidecar {
        NsgSidecar {
            denominators: self.denominators.clone(),
            flags: self.flags.clone(),
            lambda: cfg.lambda,
            delta_t: cfg.delta_t,
            last_frame_rule: cfg.last_frame_rule,
        }
    }
}

impl AsRef<[f64]> for NsgFeature {
    fn as_ref(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Source of `∇ₓ log p(x_t)` for each frame of a video.
pub trait ScoreProvider {
    fn dim(&self) -> usize;

    fn score(&self, video: &VideoTensor, frame: usize) -> Result<Vec<f64>, NsgError>;

    /// Frame count the provider is bound to, if any.
    fn frame_count(&self) -> Option<usize> {
        None
    }
}

/// Real-density Gaussian scores `−x/σ(t)²`.
pub struct GaussianOracle<'a> {
    pub spec: &'a GaussianProcessSpec,
}

impl ScoreProvider for GaussianOracle<'_> {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn score(&self, video: &VideoTensor, frame: usize) -> Result<Vec<f64>, NsgError> {
        Ok(crate::synth::oracle_score(
            video.frame(frame),
            self.spec,
            frame_time(frame),
        ))
    }
}

/// Scores of the translating density `N(c·t, σ² I)`.
pub struct TranslatingOracle<'a> {
    pub spec: &'a TranslatingDensitySpec,
}

impl ScoreProvider for TranslatingOracle<'_> {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn score(&self, video: &VideoTensor, frame: usize) -> Result<Vec<f64>, NsgError> {
        Ok(self.spec.score(video.frame(frame), frame_time(frame)))
    }
}

/// Precomputed scores, typically read from a tensor file.
pub struct PrecomputedScores {
    field: ScoreField,
}

impl PrecomputedScores {
    pub fn new(field: ScoreField) -> Self {
        Self { field }
    }
}

impl ScoreProvider for PrecomputedScores {
    fn dim(&self) -> usize {
        self.field.matrix().cols()
    }

    fn score(&self, _video: &VideoTensor, frame: usize) -> Result<Vec<f64>, NsgError> {
        if frame >= self.field.matrix().rows() {
            return Err(NsgError::Provider {
                frame,
                reason: "frame index beyond score field".into(),
            });
        }
        Ok(self.field.frame(frame).to_vec())
    }

    fn frame_count(&self) -> Option<usize> {
        Some(self.field.matrix().rows())
    }
}

/// `Δx` for 0-based `frame`; `None` when the rule drops the last frame.
pub fn frame_displacement(video: &VideoTensor, frame: usize, rule: LastFrameRule) -> Option<Vec<f64>> {
    let last = video.frame_count() - 1;
    let (from, to) = if frame < last {
        (frame, frame + 1)
    } else {
        match rule {
            LastFrameRule::BackwardDifference => (last - 1, last),
            LastFrameRule::DropLast => return None,
        }
    };
    Some(
        video
            .frame(to)
            .iter()
            .zip(video.frame(from))
            .map(|(b, a)| b - a)
            .collect(),
    )
}

/// `⟨s, Δx⟩ / Δt + λ`.
pub fn temporal_denominator(score: &[f64], dx: &[f64], dt: f64, lambda: f64) -> f64 {
    debug_assert_eq!(score.len(), dx.len());
    let inner: f64 = score.iter().zip(dx).map(|(s, d)| s * d).sum();
    inner / dt + lambda
}

/// NSG vector and denominator for one frame from its score and displacement.
pub fn nsg_from_parts(score: &[f64], dx: &[f64], cfg: &NsgConfig) -> (Vec<f64>, f64) {
    let denom = temporal_denominator(score, dx, cfg.delta_t, cfg.lambda);
    (score.iter().map(|s| s / denom).collect(), denom)
}

pub fn nsg_feature(
    video: &VideoTensor,
    provider: &dyn ScoreProvider,
    cfg: &NsgConfig,
) -> Result<NsgFeature, NsgError> {
    cfg.validate()?;
    if provider.dim() != video.dim() {
        return Err(NsgError::DimensionMismatch {
            provider: provider.dim(),
            video: video.dim(),
        });
    }
    if let Some(n) = provider.frame_count() {
        if n != video.frame_count() {
            return Err(NsgError::FrameMismatch {
                provider: n,
                video: video.frame_count(),
            });
        }
    }
    let kept = cfg.retained_frames(video.frame_count());
    let mut values = Vec::with_capacity(kept * video.dim());
    let mut denominators = Vec::with_capacity(kept);
    let mut flags = Vec::with_capacity(kept);
    for frame in 0..kept {
        let dx = frame_displacement(video, frame, cfg.last_frame_rule)
            .expect("retained frames always have a displacement");
        let score = provider.score(video, frame)?;
        if score.len() != video.dim() || score.iter().any(|v| !v.is_finite()) {
            return Err(NsgError::Provider {
                frame,
                reason: "score has wrong length or non-finite entries".into(),
            });
        }
        let (g, denom) = nsg_from_parts(&score, &dx, cfg);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NsgError::NonFinite { frame });
        }
        values.extend(g);
        denominators.push(denom);
        flags.push(denom.abs() < cfg.denominator_floor);
    }
    if flags.iter().all(|&f| f) {
        return Err(NsgError::AllFramesDegenerate);
    }
    let values = FrameMatrix::new(kept, video.dim(), values)
        .map_err(|_| NsgError::NonFinite { frame: 0 })?;
    Ok(NsgFeature::new(values, denominators, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::synth::{sample_video_with, SigmaSchedule};

    fn video_1d(xs: &[f64]) -> VideoTensor {
        VideoTensor::from_flat(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let still = VideoTensor::from_flat(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        for t in 0..3 {
            assert_eq!(
                frame_displacement(&still, t, LastFrameRule::BackwardDifference),
                Some(vec![0.0, 0.0])
            );
        }
        let v = video_1d(&[0.0, 1.0, 3.0]);
        assert_eq!(frame_displacement(&v, 0, LastFrameRule::DropLast), Some(vec![1.0]));
        assert_eq!(frame_displacement(&v, 1, LastFrameRule::DropLast), Some(vec![2.0]));
        assert_eq!(
            frame_displacement(&v, 2, LastFrameRule::BackwardDifference),
            Some(vec![2.0])
        );
        assert_eq!(frame_displacement(&v, 2, LastFrameRule::DropLast), None);
    }

    #[test]
    fn denominator_examples() {
        assert_eq!(temporal_denominator(&[3.0, -4.0], &[0.0, 0.0], 1.0, 0.37), 0.37);
        assert_eq!(temporal_denominator(&[-1.0, 2.0], &[1.0, 1.0], 1.0, 0.5), 1.5);
        // translating Gaussian d=1, c=1, σ=1, x=2 at t=1, λ=0
        let spec = TranslatingDensitySpec {
            dim: 1,
            frames: 2,
            sigma: 1.0,
            velocity: vec![1.0],
            seed: 0,
        };
        let s = spec.score(&[2.0], 1.0);
        assert_eq!(s, vec![-1.0]);
        let denom = temporal_denominator(&s, &[1.0], 1.0, 0.0);
        assert_eq!(denom, -1.0);
        assert_eq!(denom, -spec.temporal_derivative(&[2.0], 1.0));
    }

    #[test]
    fn denominator_scale_covariance() {
        let s = [0.3, -1.1, 2.0];
        let dx = [0.5, 0.25, -0.75];
        let dx2: Vec<f64> = dx.iter().map(|v| v * 2.0).collect();
        let a = temporal_denominator(&s, &dx, 1.0, 0.1);
        let b = temporal_denominator(&s, &dx2, 2.0, 0.1);
        assert!((a - b).abs() < 1e-15);
    }

    struct ZeroScores(usize);

    impl ScoreProvider for ZeroScores {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, _: &VideoTensor, _: usize) -> Result<Vec<f64>, NsgError> {
            Ok(vec![0.0; self.0])
        }
    }

    #[test]
    fn zero_scores_give_zero_feature() {
        let v = VideoTensor::from_flat(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let cfg = NsgConfig::default();
        let f = nsg_feature(&v, &ZeroScores(3), &cfg).unwrap();
        assert!(f.values().as_slice().iter().all(|&g| g == 0.0));
        assert!(f.denominators().iter().all(|&d| d == cfg.lambda));
        assert_eq!(f.shape(), (4, 3));
        let drop = NsgConfig {
            last_frame_rule: LastFrameRule::DropLast,
            ..cfg
        };
        assert_eq!(nsg_feature(&v, &ZeroScores(3), &drop).unwrap().shape(), (3, 3));
    }

    #[test]
    fn provider_dimension_mismatch() {
        let v = VideoTensor::from_flat(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            nsg_feature(&v, &ZeroScores(2), &NsgConfig::default()),
            Err(NsgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = NsgConfig {
            lambda: 0.0,
            ..NsgConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NsgConfig {
            delta_t: -1.0,
            ..NsgConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            "drop_last".parse::<LastFrameRule>().unwrap(),
            LastFrameRule::DropLast
        );
        assert!("sideways".parse::<LastFrameRule>().is_err());
    }

    #[test]
    fn all_degenerate_is_an_error() {
        // constant score (1) and Δx chosen so ⟨s, Δx⟩ ≈ −λ everywhere
        struct Ones;
        impl ScoreProvider for Ones {
            fn dim(&self) -> usize {
                1
            }
            fn score(&self, _: &VideoTensor, _: usize) -> Result<Vec<f64>, NsgError> {
                Ok(vec![1.0])
            }
        }
        let cfg = NsgConfig {
            lambda: 0.5,
            ..NsgConfig::default()
        };
        let v = video_1d(&[0.0, -0.4999999, -0.9999998]);
        assert!(matches!(
            nsg_feature(&v, &Ones, &cfg),
            Err(NsgError::AllFramesDegenerate)
        ));
        // one good frame is enough
        let v = video_1d(&[0.0, -0.4999999, 0.5]);
        let f = nsg_feature(&v, &Ones, &cfg).unwrap();
        assert_eq!(f.flags(), &[true, false, false]);
    }

    #[test]
    fn precomputed_scores_must_cover_video() {
        let v = VideoTensor::from_flat(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let field = ScoreField::new(FrameMatrix::new(2, 1, vec![1.0, 1.0]).unwrap());
        assert!(matches!(
            nsg_feature(&v, &PrecomputedScores::new(field), &NsgConfig::default()),
            Err(NsgError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn translating_sequence_is_exact() {
        let spec = TranslatingDensitySpec {
            dim: 6,
            frames: 8,
            sigma: 0.8,
            velocity: vec![0.3, -0.2, 0.5, 0.0, 0.1, -0.4],
            seed: 5,
        };
        let (video, derivs) = crate::synth::translating_sequence(&spec).unwrap();
        let cfg = NsgConfig::default();
        let f = nsg_feature(&video, &TranslatingOracle { spec: &spec }, &cfg).unwrap();
        for (r, (&est, &exact)) in f.denominators().iter().zip(&derivs).enumerate() {
            let target = -exact + cfg.lambda;
            assert!(
                (est - target).abs() <= 1e-6 * target.abs(),
                "frame {r}: {est} vs {target}"
            );
        }
    }

    #[test]
    fn denominators_rarely_near_lambda() {
        let spec = GaussianProcessSpec::real(16, 8, SigmaSchedule::default(), 0);
        let root = SeedStream::new(21);
        let cfg = NsgConfig::default();
        let mut near = 0usize;
        let mut total = 0usize;
        for i in 0..2000 {
            let v = sample_video_with(&spec, &mut root.substream("video", i)).unwrap();
            let f = nsg_feature(&v, &GaussianOracle { spec: &spec }, &cfg).unwrap();
            near += f
                .denominators()
                .iter()
                .filter(|&&d| (d - cfg.lambda).abs() < 0.1)
                .count();
            total += f.frame_count();
        }
        let rate = near as f64 / total as f64;
        assert!(rate < 0.01, "rate {rate}");
    }
}
