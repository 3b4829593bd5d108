//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::time::{Duration, Instant};

use nsg_core::detector::{auroc, compute_metrics, Label};
use nsg_core::experiment::{synthetic_train_config, FeatureSource, KernelRecipe, SyntheticTaskConfig};
use nsg_core::kernel::{GaussianKernel, Kernel, KernelParams};
use nsg_core::mmd::{mmd_biased_single, mpp_statistic, objective, objective_gradient, train_kernel, variance_estimator};
use nsg_core::nsg::{nsg_feature, nsg_from_parts, NsgConfig, TranslatingOracle};
use nsg_core::rng::SeedStream;
use nsg_core::synth::{
    closed_form_nsg, oracle_score, oracle_temporal_derivative, sample_video_with, translating_sequence, GaussianProcessSpec,
    SigmaSchedule, TranslatingDensitySpec,
};
use nsg_core::theory::{run_suite, standard_normal_cdf, SuiteConfig};

// Tolerances and budgets.
const ORACLE_RTOL: f64 = 1e-6;
const BRUTE_ATOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;
const FD_ATOL: f64 = 1e-8;
const AUROC_MIN: f64 = 0.95;
const MW_ALPHA: f64 = 0.01;
const PLATEAU_MAX_SPREAD: f64 = 0.05;
const ORDERING_ALPHA: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

type KernelOracle<'a> = Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>;

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion(id: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = took < budget;
    let pass = o.pass && in_time;
    println!(
        "{} [{id}] {title}: {} ({:.2}s, budget {}s{})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// `Δx = Δt·target·s/‖s‖²`, so that `⟨s, Δx⟩/Δt = target`.
fn exact_displacement(score: &[f64], target: f64, dt: f64) -> Vec<f64> {
    let n2: f64 = score.iter().map(|v| v * v).sum();
    score.iter().map(|v| dt * target * v / n2).collect()
}

fn oracle_consistency() -> Outcome {
    let d = 16;
    let cfg = NsgConfig::default();
    let schedules = [
        SigmaSchedule::Linear { a: 0.5, b: 0.5 },
        SigmaSchedule::Exponential { a: 2.0, b: -0.1 },
        SigmaSchedule::Constant { sigma: 1.5 },
    ];
    let root = SeedStream::new(1);
    let mut worst = 0.0f64;
    let mut frames = 0;
    for i in 0..125u64 {
        let schedule = schedules[i as usize % 3];
        let spec = if i % 2 == 0 {
            GaussianProcessSpec::real(d, 8, schedule, i)
        } else {
            GaussianProcessSpec::fake(d, 8, 1.0, schedule, i)
        };
        let real = GaussianProcessSpec::real(d, 8, schedule, i);
        let video = sample_video_with(&spec, &mut root.substream("acceptance/c1", i)).unwrap();
        for r in 0..video.frame_count() {
            let t = (r + 1) as f64;
            let x = video.frame(r);
            let s = oracle_score(x, &real, t);
            let dx = exact_displacement(&s, -oracle_temporal_derivative(x, &real, t), cfg.delta_t);
            let (g, _) = nsg_from_parts(&s, &dx, &cfg);
            let exact = closed_form_nsg(x, &real, t, cfg.lambda, 0.0).unwrap();
            for (a, b) in g.iter().zip(&exact) {
                worst = worst.max(rel_err(*a, *b));
            }
            frames += 1;
        }
    }
    outcome(
        frames >= 1000 && worst <= ORACLE_RTOL,
        format!("{frames} frames, max rel err {worst:.2e} (tol {ORACLE_RTOL:.0e})"),
    )
}

fn brightness_constancy() -> Outcome {
    let cfg = NsgConfig {
        lambda: 0.1,
        ..NsgConfig::default()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut r = SeedStream::new(2).substream("acceptance/c2", 0);
    for seed in 0..50u64 {
        let d = 1 + (seed as usize % 16);
        let spec = TranslatingDensitySpec {
            dim: d,
            frames: 8,
            sigma: 0.5 + r.uniform() * 2.0,
            velocity: (0..d).map(|_| r.normal()).collect(),
            seed,
        };
        let (video, derivs) = translating_sequence(&spec).unwrap();
        let f = nsg_feature(&video, &TranslatingOracle { spec: &spec }, &cfg).unwrap();
        for (row, exact) in derivs.iter().enumerate().take(video.frame_count() - 1) {
            let est = f.denominators()[row] - cfg.lambda;
            let err = (est - (-exact)).abs() / (exact.abs() + 1e-12);
            worst = worst.max(err);
            checked += 1;
        }
    }
    outcome(
        worst <= ORACLE_RTOL,
        format!("{checked} interior frames, max rel err {worst:.2e} (tol {ORACLE_RTOL:.0e})"),
    )
}

fn deep_kernel_oracle(p: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let pa = p.net().forward(a);
    let pb = p.net().forward(b);
    let dn: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum();
    let dr: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let kappa = (-dn / (2.0 * p.sigma_net().powi(2))).exp();
    ((1.0 - p.epsilon()) * kappa + p.epsilon()) * (-dr / (2.0 * p.sigma_raw().powi(2))).exp()
}

fn brute_force() -> Outcome {
    let mut worst = 0.0f64;
    let root = SeedStream::new(3);
    for inst in 0..50u64 {
        let mut r = root.substream("acceptance/c3", inst);
        let dim = 2 + (inst as usize % 4);
        let n = 1 + (r.uniform() * 5.0) as usize;
        let big_n = 2 + (r.uniform() * 4.0) as usize;
        let mut draw = |count: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..count).map(|_| (0..dim).map(|_| r.normal() + shift).collect()).collect()
        };
        let reference = draw(n, 0.0);
        let test = draw(1, 0.5).remove(0);
        let xs = draw(big_n, 0.0);
        let ys = draw(big_n, 0.7);
        let params = KernelParams::init(&[dim, 3, 2], inst)
            .unwrap()
            .with_bandwidths(0.8, 2.0)
            .unwrap()
            .with_epsilon(0.3)
            .unwrap();
        let gauss = GaussianKernel { sigma: 1.3 };
        let kernels: [(&dyn Kernel, KernelOracle); 2] = [
            (&params, Box::new(|a: &[f64], b: &[f64]| deep_kernel_oracle(&params, a, b))),
            (
                &gauss,
                Box::new(|a: &[f64], b: &[f64]| {
                    (-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (2.0 * 1.3f64.powi(2))).exp()
                }),
            ),
        ];
        for (kernel, k) in kernels.iter() {
            // biased single-sample MMD
            let mut rr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    rr += k(&reference[i], &reference[j]);
                }
            }
            let mut rt = 0.0;
            for x in &reference {
                rt += k(x, &test);
            }
            let q_oracle = rr / (n * n) as f64 - 2.0 * rt / n as f64 + k(&test, &test);
            let q = mmd_biased_single(&reference, &test, *kernel).unwrap();
            worst = worst.max((q - q_oracle).abs());

            // MPP and its variance
            let h = |i: usize, j: usize| k(&xs[i], &xs[j]) - k(&xs[i], &ys[j]) - k(&ys[i], &xs[j]);
            let nf = big_n as f64;
            let mut mpp = 0.0;
            for i in 0..big_n {
                for j in 0..big_n {
                    if i != j {
                        mpp += h(i, j);
                    }
                }
            }
            mpp /= nf * (nf - 1.0);
            let mut first = 0.0;
            for i in 0..big_n {
                for j in 0..big_n {
                    for l in 0..big_n {
                        first += h(i, j) * h(i, l);
                    }
                }
            }
            let mut total = 0.0;
            for i in 0..big_n {
                for j in 0..big_n {
                    total += h(i, j);
                }
            }
            let var_oracle = 4.0 / nf.powi(3) * first - 4.0 / nf.powi(4) * total * total;
            let m = mpp_statistic(&xs, &ys, *kernel).unwrap();
            worst = worst.max((m.value - mpp).abs());
            worst = worst.max((variance_estimator(&m.hstar, big_n) - var_oracle).abs());
        }
    }
    outcome(worst <= BRUTE_ATOL, format!("50 instances x 2 kernels, max abs err {worst:.2e} (tol {BRUTE_ATOL:.0e})"))
}

fn gradient_correctness() -> Outcome {
    let lambda = 1e-8;
    let mut worst = 0.0f64;
    let mut bad = 0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut r = SeedStream::new(seed).substream("acceptance/c4", 0);
        let mut draw = |shift: f64| -> Vec<Vec<f64>> { (0..4).map(|_| (0..6).map(|_| r.normal() + shift).collect()).collect() };
        let xs = draw(0.0);
        let ys = draw(0.5);
        let params = KernelParams::init(&[6, 4, 3], seed)
            .unwrap()
            .with_bandwidths(1.0, 3.0)
            .unwrap()
            .with_epsilon(0.2)
            .unwrap();
        let (_, grad) = objective_gradient(&xs, &ys, &params, lambda).unwrap();
        let theta = params.to_unconstrained();
        let f = |th: &[f64]| objective(&xs, &ys, &params.from_unconstrained(th).unwrap(), lambda).unwrap().objective;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += FD_STEP;
            let mut tm = theta.clone();
            tm[k] -= FD_STEP;
            let fd = (f(&tp) - f(&tm)) / (2.0 * FD_STEP);
            let an = grad.as_slice()[k];
            let err = (an - fd).abs();
            let scale = an.abs().max(fd.abs());
            if err > FD_RTOL * scale + FD_ATOL {
                bad += 1;
            }
            if scale > FD_ATOL / FD_RTOL {
                worst = worst.max(err / scale);
            }
            checked += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{checked} partials over 20 instances, {bad} outside tol, max rel err {worst:.2e} (rtol {FD_RTOL:.0e}, atol {FD_ATOL:.0e})"),
    )
}

fn appendix_suite(cfg: &SuiteConfig) -> (Outcome, Option<serde_json::Value>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let report = pool.install(|| run_suite(cfg)).unwrap();
    let failed: Vec<&str> = report
        .entries
        .iter()
        .filter(|e| !e.pass && !e.name.contains("ordering"))
        .map(|e| e.name.as_str())
        .collect();
    let checks = report.entries.iter().filter(|e| !e.name.contains("ordering")).count();
    let ordering = report.entries.iter().find(|e| e.name.contains("ordering")).map(|e| e.report.clone());
    (
        outcome(
            failed.is_empty(),
            format!("{} of {checks} checks pass, single thread{}", checks - failed.len(), if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }),
        ),
        ordering,
    )
}

fn mann_whitney_p(fake: &[f64], real: &[f64]) -> f64 {
    let labels: Vec<Label> = fake.iter().map(|_| Label::Fake).chain(real.iter().map(|_| Label::Real)).collect();
    let scores: Vec<f64> = fake.iter().chain(real).copied().collect();
    let (n1, n0) = (fake.len() as f64, real.len() as f64);
    let u = auroc(&labels, &scores).unwrap() * n1 * n0;
    let z = (u - n1 * n0 / 2.0) / (n1 * n0 * (n1 + n0 + 1.0) / 12.0).sqrt();
    standard_normal_cdf(-z)
}

struct E2e {
    auroc: f64,
    q_real: Vec<f64>,
    q_fake: Vec<f64>,
}

fn run_e2e(source: FeatureSource, seed: u64) -> E2e {
    let task_cfg = SyntheticTaskConfig {
        source,
        seed,
        ..SyntheticTaskConfig::default()
    };
    let task = task_cfg.build().unwrap();
    let recipe = KernelRecipe {
        seed,
        ..KernelRecipe::default()
    };
    let init = recipe.init(task_cfg.frames, task_cfg.dim, &task.train_real, &task.train_fake).unwrap();
    let report = train_kernel(&task.train_real, &task.train_fake, &synthetic_train_config(seed), init).unwrap();
    let state = nsg_core::detector::DetectorState::new(&task.reference, report.params, 1.0).unwrap();
    let q = |xs: &[Vec<f64>]| xs.iter().map(|x| state.statistic(x).unwrap()).collect::<Vec<f64>>();
    let q_real = q(&task.test_real);
    let q_fake = q(&task.test_fake);
    let labels: Vec<Label> = q_fake.iter().map(|_| Label::Fake).chain(q_real.iter().map(|_| Label::Real)).collect();
    let scores: Vec<f64> = q_fake.iter().chain(&q_real).copied().collect();
    E2e {
        auroc: auroc(&labels, &scores).unwrap(),
        q_real,
        q_fake,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn plateau(run: &E2e) -> Outcome {
    let labels: Vec<Label> = run.q_fake.iter().map(|_| Label::Fake).chain(run.q_real.iter().map(|_| Label::Real)).collect();
    let scores: Vec<f64> = run.q_fake.iter().chain(&run.q_real).copied().collect();
    let accs: Vec<f64> = (0..=4)
        .map(|i| compute_metrics(&labels, &scores, 0.7 + 0.1 * i as f64).unwrap().accuracy)
        .collect();
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let listed: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    outcome(
        hi - lo < PLATEAU_MAX_SPREAD,
        format!("accuracy at tau 0.7..1.1 = [{}], spread {:.3} (max {PLATEAU_MAX_SPREAD})", listed.join(", "), hi - lo),
    )
}

fn metrics_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut arithmetic_ok = true;
    let root = SeedStream::new(9);
    for set in 0..100u64 {
        let mut r = root.substream("acceptance/c9", set);
        let n = 2 + (r.uniform() * 60.0) as usize;
        let mut labels: Vec<Label> = (0..n).map(|_| if r.uniform() < 0.5 { Label::Fake } else { Label::Real }).collect();
        labels[0] = Label::Fake;
        labels[1] = Label::Real;
        // coarse rounding produces ties
        let scores: Vec<f64> = (0..n).map(|_| (r.normal() * 4.0).round() / 4.0).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if *li == Label::Fake && *lj == Label::Real {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        worst = worst.max((auroc(&labels, &scores).unwrap() - wins / pairs).abs());

        let tau = r.normal();
        let m = compute_metrics(&labels, &scores, tau).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (l, s) in labels.iter().zip(&scores) {
            match (l, *s > tau) {
                (Label::Fake, true) => tp += 1.0,
                (Label::Real, true) => fp += 1.0,
                (Label::Real, false) => tn += 1.0,
                (Label::Fake, false) => fn_ += 1.0,
            }
        }
        let recall = tp / (tp + fn_);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let acc = (tp + tn) / n as f64;
        arithmetic_ok &= (m.recall - recall).abs() < 1e-15
            && (m.precision - precision).abs() < 1e-15
            && (m.f1 - f1).abs() < 1e-15
            && (m.accuracy - acc).abs() < 1e-15;
    }
    // fixed hand example: 8 TP, 2 FN, 2 FP, 8 TN
    let mut labels = vec![Label::Fake; 10];
    labels.extend(vec![Label::Real; 10]);
    let scores: Vec<f64> = [2.0; 8].iter().chain(&[0.0; 2]).chain(&[2.0; 2]).chain(&[0.0; 8]).copied().collect();
    let m = compute_metrics(&labels, &scores, 1.0).unwrap();
    arithmetic_ok &= [m.recall, m.precision, m.f1, m.accuracy].iter().all(|v| (v - 0.8).abs() < 1e-15);
    outcome(
        worst < 1e-15 && arithmetic_ok,
        format!("100 score sets, max AUROC deviation {worst:.1e}; confusion arithmetic {}", if arithmetic_ok { "exact" } else { "mismatch" }),
    )
}

fn main() {
    let mut all = true;
    all &= criterion(1, "oracle consistency", Duration::from_secs(1), oracle_consistency);
    all &= criterion(2, "brightness constancy", Duration::from_secs(1), brightness_constancy);
    all &= criterion(3, "brute-force equivalence", Duration::from_secs(5), brute_force);
    all &= criterion(4, "gradient correctness", Duration::from_secs(30), gradient_correctness);

    let mut ordering = None;
    all &= criterion(5, "bound suite", Duration::from_secs(300), || {
        let (o, ord) = appendix_suite(&SuiteConfig::default());
        ordering = ord;
        o
    });
    all &= criterion(6, "distance ordering", Duration::from_secs(300), || match &ordering {
        Some(o) => {
            let p = o["p_value"].as_f64().unwrap();
            outcome(
                p < ORDERING_ALPHA && o["z"].as_f64().unwrap() > 0.0,
                format!(
                    "mean distance phi=1 {:.3} vs phi=0 {:.3}, z {:.1}, p {p:.1e} (alpha {ORDERING_ALPHA})",
                    o["mean_shifted"].as_f64().unwrap(),
                    o["mean_unshifted"].as_f64().unwrap(),
                    o["z"].as_f64().unwrap()
                ),
            )
        }
        None => outcome(false, "ordering entry missing".into()),
    });

    let mut main_run = None;
    all &= criterion(7, "end-to-end synthetic detection", Duration::from_secs(180), || {
        let run = run_e2e(FeatureSource::ClosedForm, 0);
        let p = mann_whitney_p(&run.q_fake, &run.q_real);
        let (mf, mr) = (mean(&run.q_fake), mean(&run.q_real));
        let o = outcome(
            run.auroc >= AUROC_MIN && mf > mr && p < MW_ALPHA,
            format!("AUROC {:.4} (min {AUROC_MIN}), mean Q fake {mf:.4} > real {mr:.4}, Mann-Whitney p {p:.1e}", run.auroc),
        );
        main_run = Some(run);
        o
    });
    all &= criterion(8, "threshold plateau", Duration::from_secs(1), || match &main_run {
        Some(run) => plateau(run),
        None => outcome(false, "no detection run".into()),
    });
    all &= criterion(9, "metrics oracle", Duration::from_secs(1), metrics_oracle);

    // Diagnostics, not criteria.
    let t = Instant::now();
    let est = run_e2e(FeatureSource::Estimator, 0);
    println!("INFO estimator-path features, seed 0: AUROC {:.4} ({:.1}s)", est.auroc, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let spread: Vec<f64> = (1..5).map(|s| run_e2e(FeatureSource::ClosedForm, s).auroc).collect();
    let listed: Vec<String> = spread.iter().map(|a| format!("{a:.4}")).collect();
    println!("INFO closed-form AUROC over seeds 1-4: [{}] ({:.1}s)", listed.join(", "), t.elapsed().as_secs_f64());

    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
