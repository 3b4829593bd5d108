//! Synthetic Gaussian video processes with exact analytic oracles.
//!
//! Frame row `r` (0-based) lives at frame time `t = r + 1`. The real class
//! draws each frame from `N(0, σ(t)² I)`, the fake class from
//! `N(μ, σ(t)² I)`; frames are independent across time. Scores and temporal
//! derivatives are always those of the *real* density `p`, including when a
//! fake sample is scored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{SeedStream, StreamRng};
use crate::tensor::{FrameMatrix, ScoreField, VideoTensor};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("spatial dimension must be positive")]
    ZeroDim,
    #[error("a video needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("mean vector has length {found}, expected {expected}")]
    MeanLength { expected: usize, found: usize },
    #[error("sigma schedule is not positive at t = {t} (σ = {sigma})")]
    NonPositiveSigma { t: f64, sigma: f64 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("degenerate NSG denominator {value} (floor {floor})")]
    DegenerateDenominator { value: f64, floor: f64 },
}

/// `σ(t)` together with its analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSchedule {
    Constant { sigma: f64 },
    /// `σ(t) = a + b·t`
    Linear { a: f64, b: f64 },
    /// `σ(t) = a·exp(b·t)`
    Exponential { a: f64, b: f64 },
}

impl SigmaSchedule {
    pub fn sigma(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { sigma } => sigma,
            Self::Linear { a, b } => a + b * t,
            Self::Exponential { a, b } => a * (b * t).exp(),
        }
    }

    pub fn sigma_dot(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Linear { b, .. } => b,
            Self::Exponential { a, b } => a * b * (b * t).exp(),
        }
    }

    /// `σ̇(t) / σ(t)`, the quantity the denominator laws branch on.
    pub fn log_rate(&self, t: f64) -> f64 {
        self.sigma_dot(t) / self.sigma(t)
    }
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self::Constant { sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianProcessSpec {
    pub dim: usize,
    pub frames: usize,
    pub mu: Vec<f64>,
    pub schedule: SigmaSchedule,
    pub seed: u64,
}

impl GaussianProcessSpec {
    pub fn real(dim: usize, frames: usize, schedule: SigmaSchedule, seed: u64) -> Self {
        Self {
            dim,
            frames,
            mu: vec![0.0; dim],
            schedule,
            seed,
        }
    }

    /// Fake class shifted by `mu_norm` along the all-ones direction.
    pub fn fake(dim: usize, frames: usize, mu_norm: f64, schedule: SigmaSchedule, seed: u64) -> Self {
        let each = mu_norm / (dim as f64).sqrt();
        Self {
            dim,
            frames,
            mu: vec![each; dim],
            schedule,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        if self.frames < 2 {
            return Err(SynthError::TooFewFrames(self.frames));
        }
        if self.mu.len() != self.dim {
            return Err(SynthError::MeanLength {
                expected: self.dim,
                found: self.mu.len(),
            });
        }
        if let Some(bad) = self.mu.iter().find(|v| !v.is_finite()) {
            return Err(SynthError::Invalid(format!("non-finite mean entry {bad}")));
        }
        for r in 0..self.frames {
            let t = frame_time(r);
            let sigma = self.schedule.sigma(t);
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(SynthError::NonPositiveSigma { t, sigma });
            }
        }
        Ok(())
    }

    pub fn is_real_class(&self) -> bool {
        self.mu.iter().all(|&m| m == 0.0)
    }

    /// `φ = ‖μ‖² / σ(t)²`.
    pub fn noncentrality(&self, t: f64) -> f64 {
        let s = self.schedule.sigma(t);
        norm_sq(&self.mu) / (s * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatingDensitySpec {
    pub dim: usize,
    pub frames: usize,
    pub sigma: f64,
    /// Displacement per unit frame time.
    pub velocity: Vec<f64>,
    pub seed: u64,
}

impl TranslatingDensitySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        if self.frames < 2 {
            return Err(SynthError::TooFewFrames(self.frames));
        }
        if self.velocity.len() != self.dim {
            return Err(SynthError::MeanLength {
                expected: self.dim,
                found: self.velocity.len(),
            });
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SynthError::NonPositiveSigma {
                t: 0.0,
                sigma: self.sigma,
            });
        }
        Ok(())
    }

    /// Score of `N(c·t, σ² I)` at `x`.
    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        x.iter()
            .zip(&self.velocity)
            .map(|(&xi, &ci)| -(xi - ci * t) / s2)
            .collect()
    }

    /// `∂_t log p(x, t) = c·(x − c·t) / σ²`.
    pub fn temporal_derivative(&self, x: &[f64], t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        x.iter()
            .zip(&self.velocity)
            .map(|(&xi, &ci)| ci * (xi - ci * t))
            .sum::<f64>()
            / s2
    }
}

/// Frame time of 0-based frame row `r`.
pub fn frame_time(r: usize) -> f64 {
    (r + 1) as f64
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn sample_video(spec: &GaussianProcessSpec) -> Result<VideoTensor, SynthError> {
    let mut rng = SeedStream::new(spec.seed).substream("video", 0);
    sample_video_with(spec, &mut rng)
}

/// Draws one video from `spec` using the caller's substream.
pub fn sample_video_with(
    spec: &GaussianProcessSpec,
    rng: &mut StreamRng,
) -> Result<VideoTensor, SynthError> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.frames * spec.dim);
    for r in 0..spec.frames {
        let sigma = spec.schedule.sigma(frame_time(r));
        for &m in &spec.mu {
            data.push(m + sigma * rng.normal());
        }
    }
    VideoTensor::from_flat(spec.frames, spec.dim, data)
        .map_err(|e| SynthError::Invalid(e.to_string()))
}

/// `∇ₓ log p(x, t) = −x / σ(t)²` under the real-class density.
pub fn oracle_score(x: &[f64], spec: &GaussianProcessSpec, t: f64) -> Vec<f64> {
    let s = spec.schedule.sigma(t);
    let s2 = s * s;
    x.iter().map(|&v| -v / s2).collect()
}

/// `∂_t log p(x, t) = −d·σ̇/σ + ‖x‖²·σ̇/σ³`.
pub fn oracle_temporal_derivative(x: &[f64], spec: &GaussianProcessSpec, t: f64) -> f64 {
    let s = spec.schedule.sigma(t);
    let sd = spec.schedule.sigma_dot(t);
    -(x.len() as f64) * sd / s + norm_sq(x) * sd / (s * s * s)
}

/// Exact `log p(x, t)` of the real-class density.
pub fn oracle_log_density(x: &[f64], spec: &GaussianProcessSpec, t: f64) -> f64 {
    let s = spec.schedule.sigma(t);
    let d = x.len() as f64;
    -0.5 * d * (std::f64::consts::TAU * s * s).ln() - norm_sq(x) / (2.0 * s * s)
}

/// The real-density NSG denominator `λ − ∂_t log p(x, t)`.
pub fn oracle_denominator(x: &[f64], spec: &GaussianProcessSpec, t: f64, lambda: f64) -> f64 {
    lambda - oracle_temporal_derivative(x, spec, t)
}

/// Exact NSG `g(x, t) = −(x/σ²) / (λ − ∂_t log p)`.
pub fn closed_form_nsg(
    x: &[f64],
    spec: &GaussianProcessSpec,
    t: f64,
    lambda: f64,
    floor: f64,
) -> Result<Vec<f64>, SynthError> {
    let denom = oracle_denominator(x, spec, t, lambda);
    if denom.abs() < floor || !denom.is_finite() {
        return Err(SynthError::DegenerateDenominator {
            value: denom,
            floor,
        });
    }
    Ok(oracle_score(x, spec, t)
        .into_iter()
        .map(|s| s / denom)
        .collect())
}

/// Real-density scores for every frame of `video`.
pub fn oracle_score_field(video: &VideoTensor, spec: &GaussianProcessSpec) -> ScoreField {
    let rows: Vec<Vec<f64>> = (0..video.frame_count())
        .map(|r| oracle_score(video.frame(r), spec, frame_time(r)))
        .collect();
    let m = FrameMatrix::from_rows(&rows).expect("scores of a finite video are finite");
    ScoreField::new(m)
}

/// One brightness-constant trajectory `x_{t+1} = x_t + c` with
/// `x_1 ~ N(c, σ² I)`, plus the exact `∂_t log p` at every frame.
pub fn translating_sequence(
    spec: &TranslatingDensitySpec,
) -> Result<(VideoTensor, Vec<f64>), SynthError> {
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed).substream("translating", 0);
    let mut x: Vec<f64> = spec
        .velocity
        .iter()
        .map(|&c| c + spec.sigma * rng.normal())
        .collect();
    let mut data = Vec::with_capacity(spec.frames * spec.dim);
    let mut derivs = Vec::with_capacity(spec.frames);
    for r in 0..spec.frames {
        derivs.push(spec.temporal_derivative(&x, frame_time(r)));
        data.extend_from_slice(&x);
        for (xi, ci) in x.iter_mut().zip(&spec.velocity) {
            *xi += ci;
        }
    }
    let video = VideoTensor::from_flat(spec.frames, spec.dim, data)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;
    Ok((video, derivs))
}
