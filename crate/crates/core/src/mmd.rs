//! Biased single-sample MMD, the multi-population training objective and
//! the kernel-training loop.


use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    weighted_kernel_gradient, GramMatrix, Kernel, KernelError, KernelParams, ParamGradient, NET_OFFSET,
};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum MmdError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error("population sizes differ: {real} real vs {fake} fake")]
    CountMismatch { real: usize, fake: usize },
    #[error("need at least 2 samples per population, got {0}")]
    TooFewSamples(usize),
    #[error("insufficient training data: {population} has {available}, batch needs {required}")]
    InsufficientData {
        population: &'static str,
        available: usize,
        required: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

type Result<T> = std::result::Result<T, MmdError>;

fn slices<F: AsRef<[f64]>>(xs: &[F]) -> Vec<&[f64]> {
    xs.iter().map(AsRef::as_ref).collect()
}

/// `Q = mean(K_RR) − 2·mean(K_R,test) + k(test, test)`.
pub fn mmd_biased_single<F: AsRef<[f64]>, K: Kernel + ?Sized>(
    reference: &[F],
    test: &[f64],
    kernel: &K,
) -> Result<f64> {
    if reference.is_empty() {
        return Err(MmdError::EmptyReference);
    }
    let refs = slices(reference);
    let ref_term = kernel.gram(&refs, &refs)?.mean();
    let cross = kernel.gram(&refs, &[test])?.mean();
    Ok(ref_term - 2.0 * cross + kernel.eval(test, test)?)
}

/// Reference set with its net images and Gram mean cached, so each test
/// video costs `n` kernel evaluations.
#[derive(Debug, Clone)]
pub struct MmdReference {
    params: KernelParams,
    features: Vec<Vec<f64>>,
    phis: Vec<Vec<f64>>,
    ref_term: f64,
}

impl MmdReference {
    pub fn new<F: AsRef<[f64]> + Sync>(reference: &[F], params: KernelParams) -> Result<Self> {
        if reference.is_empty() {
            return Err(MmdError::EmptyReference);
        }
        let embedded = params.embed_all(reference)?;
        let ref_term = crate::kernel::gram_symmetric_embedded(&embedded, &params).mean();
        let phis = embedded.into_iter().map(|e| e.phi).collect();
        Ok(Self {
            features: reference.iter().map(|f| f.as_ref().to_vec()).collect(),
            phis,
            params,
            ref_term,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn reference_term(&self) -> f64 {
        self.ref_term
    }

    pub fn statistic(&self, test: &[f64]) -> Result<f64> {
        let e = self.params.embed(test)?;
        let cross: f64 = self
            .features
            .iter()
            .zip(&self.phis)
            .map(|(raw, phi)| self.params.eval_parts(raw, phi, e.raw, &e.phi))
            .sum::<f64>()
            / self.features.len() as f64;
        // k(test, test) = 1 for this kernel family.
        Ok(self.ref_term - 2.0 * cross + 1.0)
    }
}

/// The multi-population proxy and the `H*` matrix it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Mpp {
    pub value: f64,
    pub n: usize,
    /// `N × N`, row-major.
    pub hstar: Vec<f64>,
}

/// `H*_ij = K_XX[i][j] − K_XY[i][j] − K_XY[j][i]`, using `k(y_i, x_j) = k(x_j, y_i)`.
pub fn hstar_from_grams(kxx: &GramMatrix, kxy: &GramMatrix) -> Vec<f64> {
    let n = kxx.rows();
    let mut h = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            h.push(kxx.get(i, j) - kxy.get(i, j) - kxy.get(j, i));
        }
    }
    h
}

fn mpp_from_hstar(h: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += h[i * n + j];
            }
        }
    }
    s / (n * (n - 1)) as f64
}

fn check_populations(real: usize, fake: usize) -> Result<usize> {
    if real != fake {
        return Err(MmdError::CountMismatch { real, fake });
    }
    if real < 2 {
        return Err(MmdError::TooFewSamples(real));
    }
    Ok(real)
}

pub fn mpp_statistic<F: AsRef<[f64]>, K: Kernel + ?Sized>(real: &[F], fake: &[F], kernel: &K) -> Result<Mpp> {
    let n = check_populations(real.len(), fake.len())?;
    let (x, y) = (slices(real), slices(fake));
    let kxx = kernel.gram(&x, &x)?;
    let kxy = kernel.gram(&x, &y)?;
    let hstar = hstar_from_grams(&kxx, &kxy);
    Ok(Mpp {
        value: mpp_from_hstar(&hstar, n),
        n,
        hstar,
    })
}

/// `σ̂² = (4/N³)·Σ_i R_i² − (4/N⁴)·S²` with `R_i` the row sums of `H*` and `S` its total.
pub fn variance_estimator(hstar: &[f64], n: usize) -> f64 {
    assert_eq!(hstar.len(), n * n, "H* must be N × N");
    let nf = n as f64;
    let rows: Vec<f64> = hstar.chunks(n).map(|r| r.iter().sum()).collect();
    let total: f64 = rows.iter().sum();
    let sq: f64 = rows.iter().map(|r| r * r).sum();
    4.0 / nf.powi(3) * sq - 4.0 / nf.powi(4) * total * total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub mpp: f64,
    pub variance: f64,
}

fn objective_from_hstar(h: &[f64], n: usize, lambda_reg: f64) -> ObjectiveValue {
    let mpp = mpp_from_hstar(h, n);
    let variance = variance_estimator(h, n);
    ObjectiveValue {
        objective: mpp / (variance + lambda_reg).sqrt(),
        mpp,
        variance,
    }
}

/// `Ĵ_λ = MPP / √(σ̂² + λ)`.
pub fn objective<F: AsRef<[f64]>, K: Kernel + ?Sized>(
    real: &[F],
    fake: &[F],
    kernel: &K,
    lambda_reg: f64,
) -> Result<ObjectiveValue> {
    let m = mpp_statistic(real, fake, kernel)?;
    Ok(objective_from_hstar(&m.hstar, m.n, lambda_reg))
}

/// `Ĵ_λ` and its exact gradient in the unconstrained parameter space.
pub fn objective_gradient<F: AsRef<[f64]> + Sync>(
    real: &[F],
    fake: &[F],
    params: &KernelParams,
    lambda_reg: f64,
) -> Result<(ObjectiveValue, ParamGradient)> {
    let n = check_populations(real.len(), fake.len())?;
    let x = slices(real);
    let y = slices(fake);
    let ex = params.embed_all(&x)?;
    let ey = params.embed_all(&y)?;
    let kxx = crate::kernel::gram_symmetric_embedded(&ex, params);
    let kxy = crate::kernel::gram_embedded(&ex, &ey, params);
    let h = hstar_from_grams(&kxx, &kxy);
    let val = objective_from_hstar(&h, n, lambda_reg);

    let nf = n as f64;
    let s = (val.variance + lambda_reg).sqrt();
    let rows: Vec<f64> = h.chunks(n).map(|r| r.iter().sum()).collect();
    let total: f64 = rows.iter().sum();
    let dmpp = 1.0 / (nf * (nf - 1.0));
    // ∂Ĵ/∂H_ij = ∂MPP/∂H_ij / s − MPP/(2 s³) · ∂σ̂²/∂H_ij
    let dh = |i: usize, j: usize| {
        let dm = if i == j { 0.0 } else { dmpp };
        let dv = 8.0 / nf.powi(3) * rows[i] - 8.0 / nf.powi(4) * total;
        dm / s - val.mpp / (2.0 * s * s * s) * dv
    };

    let inputs: Vec<&[f64]> = x.iter().chain(&y).copied().collect();
    let mut pairs = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j, dh(i, j)));
            }
            // K_XY[i][j] feeds H_ij and H_ji.
            pairs.push((i, n + j, -dh(i, j) - dh(j, i)));
        }
    }
    Ok((val, weighted_kernel_gradient(&inputs, &pairs, params)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1e-10,
            learning_rate: 1e-4,
            weight_decay: 0.1,
            batch_size: 24,
            max_iters: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const ADAM_EPS: f64 = 1e-8;
    /// Per-population cap on the samples used for the start/end objective.
    pub const EVAL_CAP: usize = 256;

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(MmdError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("lambda_reg", self.lambda_reg)?;
        positive("learning_rate", self.learning_rate)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MmdError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(MmdError::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub mpp: f64,
    pub variance: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// `Ĵ_λ` on up to [`TrainConfig::EVAL_CAP`] samples per population, before and after.
    pub initial: ObjectiveValue,
    #[serde(rename = "final")]
    pub final_: ObjectiveValue,
    pub trace: Vec<IterationRecord>,
    #[serde(skip)]
    pub params: KernelParams,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Milliseconds since the call; the bare wasm target has no clock and reports 0.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64() * 1e3
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Cycles through a population in freshly shuffled order each epoch.
struct EpochSampler {
    rng: crate::rng::StreamRng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(len: usize, rng: crate::rng::StreamRng) -> Self {
        Self {
            rng,
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

fn eval_objective<F: AsRef<[f64]>>(real: &[F], fake: &[F], params: &KernelParams, lambda: f64) -> Result<ObjectiveValue> {
    let m = real.len().min(fake.len()).min(TrainConfig::EVAL_CAP);
    objective(&real[..m], &fake[..m], params, lambda)
}

/// Gradient ascent on `Ĵ_λ` with AdamW; weight decay touches weight matrices only.
pub fn train_kernel<F: AsRef<[f64]> + Sync>(
    real: &[F],
    fake: &[F],
    cfg: &TrainConfig,
    init: KernelParams,
) -> Result<TrainReport> {
    cfg.validate()?;
    for (population, set) in [("real", real.len()), ("fake", fake.len())] {
        if set < cfg.batch_size {
            return Err(MmdError::InsufficientData {
                population,
                available: set,
                required: cfg.batch_size,
            });
        }
    }
    let initial = eval_objective(real, fake, &init, cfg.lambda_reg)?;
    let seeds = SeedStream::new(cfg.seed);
    let mut real_sampler = EpochSampler::new(real.len(), seeds.substream("train/real", 0));
    let mut fake_sampler = EpochSampler::new(fake.len(), seeds.substream("train/fake", 0));

    let mut params = init;
    let mut theta = params.to_unconstrained();
    let decay_mask: Vec<bool> = std::iter::repeat_n(false, NET_OFFSET)
        .chain(params.net().weight_mask())
        .collect();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(cfg.max_iters);

    for it in 1..=cfg.max_iters {
        let elapsed_ms = stopwatch();
        let xb: Vec<&[f64]> = real_sampler.batch(cfg.batch_size).into_iter().map(|i| real[i].as_ref()).collect();
        let yb: Vec<&[f64]> = fake_sampler.batch(cfg.batch_size).into_iter().map(|i| fake[i].as_ref()).collect();
        let (val, grad) = objective_gradient(&xb, &yb, &params, cfg.lambda_reg)?;
        let grad = grad.into_vec();
        if !val.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(MmdError::NonFiniteObjective { iteration: it });
        }
        let b1t = 1.0 - TrainConfig::BETA1.powi(it as i32);
        let b2t = 1.0 - TrainConfig::BETA2.powi(it as i32);
        for k in 0..theta.len() {
            if decay_mask[k] {
                theta[k] -= cfg.learning_rate * cfg.weight_decay * theta[k];
            }
            // Ascent: the optimizer descends on −Ĵ.
            let g = -grad[k];
            m[k] = TrainConfig::BETA1 * m[k] + (1.0 - TrainConfig::BETA1) * g;
            v[k] = TrainConfig::BETA2 * v[k] + (1.0 - TrainConfig::BETA2) * g * g;
            theta[k] -= cfg.learning_rate * (m[k] / b1t) / ((v[k] / b2t).sqrt() + TrainConfig::ADAM_EPS);
        }
        params = params
            .from_unconstrained(&theta)
            .map_err(|_| MmdError::NonFiniteObjective { iteration: it })?;
        trace.push(IterationRecord {
            iteration: it,
            objective: val.objective,
            mpp: val.mpp,
            variance: val.variance,
            wall_clock_ms: elapsed_ms(),
        });
    }
    let final_ = eval_objective(real, fake, &params, cfg.lambda_reg)?;
    Ok(TrainReport {
        config: cfg.clone(),
        initial,
        final_,
        trace,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::GaussianKernel;

    struct ConstKernel(f64);

    impl Kernel for ConstKernel {
        fn eval(&self, _: &[f64], _: &[f64]) -> std::result::Result<f64, KernelError> {
            Ok(self.0)
        }
    }

    fn randn(n: usize, dim: usize, seed: u64, shift: f64) -> Vec<Vec<f64>> {
        let mut r = SeedStream::new(seed).substream("mmd-test", 0);
        (0..n).map(|_| (0..dim).map(|_| r.normal() + shift).collect()).collect()
    }

    #[test]
    fn identical_single_reference_gives_zero() {
        let p = KernelParams::init(&[3, 2], 0).unwrap();
        let x = vec![vec![0.3, -1.0, 2.0]];
        let q = mmd_biased_single(&x, &x[0], &p).unwrap();
        assert!(q.abs() < 1e-15);
        let cached = MmdReference::new(&x, p).unwrap();
        assert!(cached.statistic(&x[0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn scalar_gaussian_example() {
        let k = GaussianKernel { sigma: 1.0 };
        let reference = vec![vec![0.0], vec![2.0]];
        let q = mmd_biased_single(&reference, &[1.0], &k).unwrap();
        let expected = (2.0 + 2.0 * (-2.0f64).exp()) / 4.0 - 2.0 * (-0.5f64).exp() + 1.0;
        assert!((q - expected).abs() < 1e-15);
        assert!((q - 0.35461).abs() < 1e-5);
    }

    #[test]
    fn empty_reference_rejected() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(
            mmd_biased_single(&empty, &[0.0], &GaussianKernel { sigma: 1.0 }),
            Err(MmdError::EmptyReference)
        ));
    }

    #[test]
    fn cached_reference_matches_direct() {
        let p = KernelParams::init(&[4, 3, 2], 1).unwrap().with_bandwidths(1.0, 3.0).unwrap();
        let reference = randn(5, 4, 2, 0.0);
        let cached = MmdReference::new(&reference, p.clone()).unwrap();
        for t in randn(4, 4, 3, 0.5) {
            let a = mmd_biased_single(&reference, &t, &p).unwrap();
            let b = cached.statistic(&t).unwrap();
            assert!((a - b).abs() < 1e-13);
            assert!(a >= -1e-12);
        }
    }

    #[test]
    fn constant_kernel_mpp_and_objective() {
        let x = randn(4, 2, 0, 0.0);
        let y = randn(4, 2, 1, 0.0);
        let c = 0.37;
        let m = mpp_statistic(&x, &y, &ConstKernel(c)).unwrap();
        assert!(m.hstar.iter().all(|&h| (h + c).abs() < 1e-15));
        assert!((m.value + c).abs() < 1e-15);
        assert!(variance_estimator(&m.hstar, 4).abs() < 1e-15);
        let j = objective(&x, &y, &ConstKernel(c), 1e-10).unwrap();
        assert!((j.objective - (-c / 1e-10f64.sqrt())).abs() < 1e-6 * j.objective.abs());
    }

    #[test]
    fn identical_populations() {
        let k = GaussianKernel { sigma: 1.5 };
        let x = randn(4, 3, 5, 0.0);
        let m = mpp_statistic(&x, &x, &k).unwrap();
        let mut off = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let kij = k.eval(&x[i], &x[j]).unwrap();
                assert!((m.hstar[i * 4 + j] + kij).abs() < 1e-15);
                if i != j {
                    off += kij;
                }
            }
        }
        assert!((m.value + off / 12.0).abs() < 1e-15);
    }

    #[test]
    fn variance_examples() {
        assert!((variance_estimator(&[1.0, 0.0, 0.0, 0.0], 2) - 0.25).abs() < 1e-15);
        assert!(variance_estimator(&[0.7; 9], 3).abs() < 1e-15);
    }

    #[test]
    fn zero_mpp_gives_zero_objective() {
        let h = [1.0, 1.0, -1.0, 1.0];
        let v = objective_from_hstar(&h, 2, 1e-10);
        assert_eq!(v.mpp, 0.0);
        assert_eq!(v.objective, 0.0);
    }

    #[test]
    fn population_guards() {
        let k = GaussianKernel { sigma: 1.0 };
        let x = randn(3, 2, 0, 0.0);
        assert!(matches!(mpp_statistic(&x, &x[..2], &k), Err(MmdError::CountMismatch { .. })));
        assert!(matches!(mpp_statistic(&x[..1], &x[..1], &k), Err(MmdError::TooFewSamples(1))));
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let p = KernelParams::init(&[3, 2], 0).unwrap();
        let cfg = TrainConfig {
            max_iters: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let r = train_kernel(&randn(4, 3, 0, 0.0), &randn(4, 3, 1, 1.0), &cfg, p.clone()).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(r.params, p);
    }

    #[test]
    fn training_rejects_small_sets() {
        let p = KernelParams::init(&[3, 2], 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_kernel(&randn(4, 3, 0, 0.0), &randn(40, 3, 1, 1.0), &cfg, p),
            Err(MmdError::InsufficientData { population: "real", .. })
        ));
    }

    #[test]
    fn epoch_sampler_covers_population_without_replacement() {
        let mut s = EpochSampler::new(10, SeedStream::new(1).substream("s", 0));
        let mut seen: Vec<usize> = s.batch(5).into_iter().chain(s.batch(5)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
