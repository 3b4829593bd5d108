//! Synthetic detection tasks built from the Gaussian video processes.
//!
//! Reals are drawn from `N(0, σ²I)` per frame and fakes from `N(μ, σ²I)`.
//! Every video is scored under the real density. Features come either from
//! the exact per-frame NSG or from the practical estimator, which on
//! independent frames adds heavy denominator noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::kernel::{median_pairwise_distance, FeatureNet, KernelError, KernelParams};
use crate::mmd::TrainConfig;
use crate::nsg::{nsg_feature, GaussianOracle, NsgConfig, NsgError, NsgFeature};
use crate::rng::SeedStream;
use crate::synth::{closed_form_nsg, frame_time, sample_video_with, GaussianProcessSpec, SigmaSchedule, SynthError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Nsg(#[from] NsgError),
}

/// How per-frame NSG vectors are obtained from a sampled video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// `−(x/σ²) / (λ − ∂_t log p)` with the analytic temporal derivative.
    ClosedForm,
    /// Oracle scores with finite-difference displacements.
    Estimator,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closed_form" => Ok(Self::ClosedForm),
            "estimator" => Ok(Self::Estimator),
            other => Err(format!("unknown feature source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub dim: usize,
    pub frames: usize,
    /// `‖μ‖ / σ` for the fake class.
    pub shift: f64,
    pub schedule: SigmaSchedule,
    pub train_per_class: usize,
    pub reference: usize,
    pub test_per_class: usize,
    pub nsg: NsgConfig,
    pub source: FeatureSource,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            frames: 8,
            shift: 1.0,
            schedule: SigmaSchedule::Constant { sigma: 1.0 },
            train_per_class: 200,
            reference: 100,
            test_per_class: 100,
            nsg: NsgConfig::default(),
            source: FeatureSource::ClosedForm,
            seed: 0,
        }
    }
}

/// Flattened NSG features split into disjoint pools.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train_real: Vec<Vec<f64>>,
    pub train_fake: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub test_real: Vec<Vec<f64>>,
    pub test_fake: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn feature_len(&self) -> usize {
        self.train_real.first().map(Vec::len).unwrap_or(0)
    }
}

impl SyntheticTaskConfig {
    pub fn real_spec(&self) -> GaussianProcessSpec {
        GaussianProcessSpec::real(self.dim, self.frames, self.schedule, self.seed)
    }

    /// Fake spec with `‖μ‖ = shift · σ(1)`.
    pub fn fake_spec(&self) -> GaussianProcessSpec {
        let sigma = self.schedule.sigma(1.0);
        GaussianProcessSpec::fake(self.dim, self.frames, self.shift * sigma, self.schedule, self.seed)
    }

    pub fn build(&self) -> Result<SyntheticTask, ExperimentError> {
        let real = self.real_spec();
        let fake = self.fake_spec();
        real.validate()?;
        fake.validate()?;
        let n_real = self.train_per_class + self.reference + self.test_per_class;
        let n_fake = self.train_per_class + self.test_per_class;
        let mut reals = features(&real, &real, "task/real", n_real, self.source, &self.nsg, self.seed)?;
        let mut fakes = features(&fake, &real, "task/fake", n_fake, self.source, &self.nsg, self.seed)?;
        let test_real = reals.split_off(self.train_per_class + self.reference);
        let reference = reals.split_off(self.train_per_class);
        let test_fake = fakes.split_off(self.train_per_class);
        Ok(SyntheticTask {
            train_real: reals,
            train_fake: fakes,
            reference,
            test_real,
            test_fake,
        })
    }
}

/// Samples `count` videos from `sample` (substream `label`/i) and extracts
/// flattened NSG features against the real density `score`.
pub fn features(
    sample: &GaussianProcessSpec,
    score: &GaussianProcessSpec,
    label: &str,
    count: usize,
    source: FeatureSource,
    cfg: &NsgConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let root = SeedStream::new(seed);
    let one = |i: usize| -> Result<Vec<f64>, ExperimentError> {
        let mut rng = root.substream(label, i as u64);
        let video = sample_video_with(sample, &mut rng)?;
        match source {
            FeatureSource::Estimator => {
                let f: NsgFeature = nsg_feature(&video, &GaussianOracle { spec: score }, cfg)?;
                Ok(f.as_ref().to_vec())
            }
            FeatureSource::ClosedForm => {
                let mut out = Vec::with_capacity(video.frame_count() * video.dim());
                for r in 0..video.frame_count() {
                    let g = closed_form_nsg(video.frame(r), score, frame_time(r), cfg.lambda, cfg.denominator_floor)?;
                    out.extend(g);
                }
                Ok(out)
            }
        }
    };
    #[cfg(feature = "parallel")]
    return (0..count).into_par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..count).map(one).collect();
}

/// Data-adapted kernel initialization for the synthetic tasks.
///
/// The net is frame-pooled; inputs are divided by the RMS of the training
/// features so tanh units start unsaturated, and both
/// bandwidths are set to multiples of the median pairwise distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelRecipe {
    pub frame_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub epsilon: f64,
    pub sigma_net_scale: f64,
    pub sigma_raw_scale: f64,
    pub seed: u64,
}

impl Default for KernelRecipe {
    fn default() -> Self {
        Self {
            frame_widths: vec![8],
            head_widths: vec![4, 4],
            epsilon: 0.1,
            sigma_net_scale: 2.0,
            sigma_raw_scale: 10.0,
            seed: 0,
        }
    }
}

impl KernelRecipe {
    /// Builds parameters for `frames × dim` features from the training pools.
    pub fn init(
        &self,
        frames: usize,
        dim: usize,
        train_real: &[Vec<f64>],
        train_fake: &[Vec<f64>],
    ) -> Result<KernelParams, KernelError> {
        let mut fw = vec![dim];
        fw.extend(&self.frame_widths);
        let mut hw = vec![*fw.last().expect("nonempty")];
        hw.extend(&self.head_widths);
        let net = FeatureNet::init_pooled(frames, &fw, &hw, self.seed)?;
        let all: Vec<&[f64]> = train_real.iter().chain(train_fake).map(Vec::as_slice).collect();
        let count: usize = all.iter().map(|x| x.len()).sum();
        let rms = (all.iter().flat_map(|x| x.iter()).map(|v| v * v).sum::<f64>() / count.max(1) as f64).sqrt();
        let net = if rms > 0.0 { net.with_input_scale(1.0 / rms)? } else { net };
        let phis: Vec<Vec<f64>> = all.iter().map(|x| net.forward(x)).collect();
        let phi_refs: Vec<&[f64]> = phis.iter().map(Vec::as_slice).collect();
        let positive = |v: f64| if v > 0.0 { v } else { 1.0 };
        let sigma_net = positive(median_pairwise_distance(&phi_refs)) * self.sigma_net_scale;
        let sigma_raw = positive(median_pairwise_distance(&all)) * self.sigma_raw_scale;
        KernelParams::new(self.epsilon, net, sigma_net, sigma_raw)
    }
}

/// Training settings used for the synthetic end-to-end task.
pub fn synthetic_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        max_iters: 300,
        seed,
        ..TrainConfig::default()
    }
}
