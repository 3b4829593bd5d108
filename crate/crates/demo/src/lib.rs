//! Browser demo. Each exported function takes plain numbers and returns a
//! JSON document for the page to plot; errors come back as strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nsg_core::detector::{auroc, threshold_sweep, DetectorState, Label};
use nsg_core::experiment::{synthetic_train_config, FeatureSource, KernelRecipe, SyntheticTaskConfig};
use nsg_core::mmd::train_kernel;
use nsg_core::rng::SeedStream;
use nsg_core::synth::{oracle_denominator, sample_video_with, GaussianProcessSpec, SigmaSchedule};
use nsg_core::theory::{compute_distance_bound, distance_samples, distance_bound_inputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub real: Vec<usize>,
    pub fake: Vec<usize>,
}

fn histogram(real: &[f64], fake: &[f64], bins: usize) -> Histogram {
    let all = real.iter().chain(fake);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let count = |xs: &[f64]| {
        let mut h = vec![0; bins];
        for &x in xs {
            let i = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[i.min(bins - 1)] += 1;
        }
        h
    };
    Histogram { lo, hi, real: count(real), fake: count(fake) }
}

fn schedule(kind: &str, a: f64, b: f64) -> Result<SigmaSchedule, String> {
    match kind {
        "constant" => Ok(SigmaSchedule::Constant { sigma: a }),
        "linear" => Ok(SigmaSchedule::Linear { a, b }),
        "exponential" => Ok(SigmaSchedule::Exponential { a, b }),
        other => Err(format!("unknown schedule {other:?}")),
    }
}

#[derive(Debug, Serialize)]
pub struct DenominatorReport {
    pub histogram: Histogram,
    pub lambda: f64,
    pub rate: f64,
    /// Share of frames with `|D − λ| < 0.1`.
    pub near_lambda_real: f64,
    pub near_lambda_fake: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
}

/// Exact NSG denominators `λ − ∂_t log p` at frame time `t` for real and
/// shifted videos.
#[allow(clippy::too_many_arguments)]
pub fn denominators(
    dim: usize,
    shift: f64,
    kind: &str,
    a: f64,
    b: f64,
    t: usize,
    lambda: f64,
    count: usize,
    bins: usize,
    seed: u64,
) -> Result<DenominatorReport, String> {
    if t == 0 || count == 0 || bins == 0 || count > 200_000 {
        return Err("need t >= 1, bins >= 1 and 1 <= count <= 200000".into());
    }
    let sched = schedule(kind, a, b)?;
    let frames = t.max(2);
    let real = GaussianProcessSpec::real(dim, frames, sched, seed);
    let fake = GaussianProcessSpec::fake(dim, frames, shift * sched.sigma(1.0), sched, seed);
    real.validate().map_err(|e| e.to_string())?;
    fake.validate().map_err(|e| e.to_string())?;
    let root = SeedStream::new(seed);
    let tf = t as f64;
    let draw = |spec: &GaussianProcessSpec, label: &str| -> Result<Vec<f64>, String> {
        (0..count)
            .map(|i| {
                let v = sample_video_with(spec, &mut root.substream(label, i as u64)).map_err(|e| e.to_string())?;
                Ok(oracle_denominator(v.frame(t - 1), &real, tf, lambda))
            })
            .collect()
    };
    let dr = draw(&real, "demo/real")?;
    let df = draw(&fake, "demo/fake")?;
    let near = |xs: &[f64]| xs.iter().filter(|d| (*d - lambda).abs() < 0.1).count() as f64 / xs.len() as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(DenominatorReport {
        histogram: histogram(&dr, &df, bins),
        lambda,
        rate: sched.log_rate(tf),
        near_lambda_real: near(&dr),
        near_lambda_fake: near(&df),
        mean_real: mean(&dr),
        mean_fake: mean(&df),
    })
}

#[derive(Debug, Serialize)]
pub struct BoundReport {
    pub phi: f64,
    pub c: f64,
    pub bound: f64,
    pub trials: usize,
    pub acceptance_rate: f64,
    pub max_distance: f64,
    pub mean_distance: f64,
    pub violations: usize,
    /// Sorted distances thinned to at most 512 points, for an empirical CDF.
    pub quantiles: Vec<f64>,
}

/// Squared NSG distance between paired real/shifted videos against the
/// closed-form high-probability bound.
pub fn distance_bound(phi: f64, trials: usize, seed: u64) -> Result<BoundReport, String> {
    if !(1..=200_000).contains(&trials) {
        return Err("need 1 <= trials <= 200000".into());
    }
    let inputs = distance_bound_inputs(phi);
    inputs.check_admissible().map_err(|e| e.to_string())?;
    let bound = compute_distance_bound(&inputs).map_err(|e| e.to_string())?;
    let (mut dists, attempts) = distance_samples(&inputs, trials, seed, "demo/distance_bound").map_err(|e| e.to_string())?;
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let step = n.div_ceil(512).max(1);
    Ok(BoundReport {
        phi,
        c: inputs.c,
        bound,
        trials: n,
        acceptance_rate: n as f64 / attempts as f64,
        max_distance: dists.last().copied().unwrap_or(0.0),
        mean_distance: dists.iter().sum::<f64>() / n as f64,
        violations: dists.iter().filter(|&&d| d > bound).count(),
        quantiles: dists.iter().step_by(step).copied().collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub auroc: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub histogram: Histogram,
    pub sweep: Vec<SweepPoint>,
}

/// Trains a deep kernel on a small synthetic task, scores held-out videos
/// and sweeps the decision threshold.
pub fn detection_sweep(shift: f64, iters: usize, seed: u64) -> Result<SweepReport, String> {
    if iters > 2000 {
        return Err("at most 2000 iterations".into());
    }
    let cfg = SyntheticTaskConfig {
        shift,
        source: FeatureSource::ClosedForm,
        train_per_class: 100,
        reference: 100,
        test_per_class: 100,
        seed,
        ..SyntheticTaskConfig::default()
    };
    let task = cfg.build().map_err(|e| e.to_string())?;
    let recipe = KernelRecipe { seed, ..KernelRecipe::default() };
    let init = recipe
        .init(cfg.frames, cfg.dim, &task.train_real, &task.train_fake)
        .map_err(|e| e.to_string())?;
    let mut train = synthetic_train_config(seed);
    train.max_iters = iters;
    let report = train_kernel(&task.train_real, &task.train_fake, &train, init).map_err(|e| e.to_string())?;
    let state = DetectorState::new(&task.reference, report.params, 1.0).map_err(|e| e.to_string())?;
    let score = |xs: &[Vec<f64>]| -> Result<Vec<f64>, String> {
        xs.iter().map(|x| state.statistic(x).map_err(|e| e.to_string())).collect()
    };
    let (qr, qf) = (score(&task.test_real)?, score(&task.test_fake)?);
    let labels: Vec<Label> = qr.iter().map(|_| Label::Real).chain(qf.iter().map(|_| Label::Fake)).collect();
    let scores: Vec<f64> = qr.iter().chain(&qf).copied().collect();
    let histogram = histogram(&qr, &qf, 30);
    let taus: Vec<f64> = (0..=60).map(|i| histogram.lo + (histogram.hi - histogram.lo) * i as f64 / 60.0).collect();
    let sweep = threshold_sweep(&labels, &scores, &taus)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|m| SweepPoint { tau: m.tau, accuracy: m.accuracy, recall: m.recall, precision: m.precision })
        .collect();
    Ok(SweepReport {
        auroc: auroc(&labels, &scores).map_err(|e| e.to_string())?,
        objective_before: report.initial.objective,
        objective_after: report.final_.objective,
        histogram,
        sweep,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("reports serialize"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = denominatorHistogram)]
#[allow(clippy::too_many_arguments)]
pub fn denominator_histogram_js(
    dim: usize,
    shift: f64,
    kind: &str,
    a: f64,
    b: f64,
    t: usize,
    lambda: f64,
    count: usize,
    bins: usize,
    seed: u64,
) -> Result<String, JsValue> {
    to_js(denominators(dim, shift, kind, a, b, t, lambda, count, bins, seed))
}

#[wasm_bindgen(js_name = distanceBound)]
pub fn distance_bound_js(phi: f64, trials: usize, seed: u64) -> Result<String, JsValue> {
    to_js(distance_bound(phi, trials, seed))
}

#[wasm_bindgen(js_name = detectionSweep)]
pub fn detection_sweep_js(shift: f64, iters: usize, seed: u64) -> Result<String, JsValue> {
    to_js(detection_sweep(shift, iters, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0], &[1.0, 2.0], 4);
        assert_eq!(h.real.iter().sum::<usize>(), 3);
        assert_eq!(h.fake.iter().sum::<usize>(), 2);
        assert_eq!(*h.fake.last().unwrap(), 1);
        let flat = histogram(&[3.0, 3.0], &[], 2);
        assert_eq!(flat.real, vec![2, 0]);
    }

    #[test]
    fn constant_schedule_denominator_is_lambda() {
        let r = denominators(4, 1.0, "constant", 1.0, 0.0, 3, 0.1, 100, 10, 0).unwrap();
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.near_lambda_real, 1.0);
        assert!((r.mean_fake - 0.1).abs() < 1e-12);
    }

    #[test]
    fn growing_sigma_separates_classes() {
        // D = λ − r(W − d): the shifted class has larger W, so smaller D when r > 0.
        let r = denominators(16, 2.0, "linear", 1.0, 0.5, 2, 0.1, 2000, 40, 1).unwrap();
        assert!(r.mean_fake < r.mean_real);
        assert!((r.mean_real - 0.1).abs() < 0.2);
        assert!(serde_json::to_string(&r).unwrap().contains("\"histogram\""));
        assert!(denominators(4, 1.0, "cubic", 1.0, 0.0, 1, 0.1, 10, 5, 0).is_err());
        assert!(denominators(4, 1.0, "linear", -1.0, 0.0, 1, 0.1, 10, 5, 0).is_err());
    }

    #[test]
    fn bound_holds_and_guard_rejects_large_shift() {
        let r = distance_bound(1.0, 10_000, 0).unwrap();
        assert!(r.max_distance < r.bound);
        assert_eq!(r.violations, 0);
        assert!(r.quantiles.len() <= 512);
        assert!(r.quantiles.windows(2).all(|w| w[0] <= w[1]));
        assert!(distance_bound(1.0, 0, 0).is_err());
        assert!(distance_bound(1.0, 1_000_000, 0).is_err());
        let err = distance_bound(50.0, 10_000, 0).unwrap_err();
        assert!(err.contains("inadmissible"), "{err}");
    }

    #[test]
    fn sweep_is_monotone_in_recall() {
        let r = detection_sweep(1.5, 60, 0).unwrap();
        assert!(r.auroc > 0.8, "{}", r.auroc);
        assert_eq!(r.sweep.len(), 61);
        assert!(r.sweep.windows(2).all(|w| w[1].recall <= w[0].recall));
        assert!(detection_sweep(1.0, 5000, 0).is_err());
    }
}
