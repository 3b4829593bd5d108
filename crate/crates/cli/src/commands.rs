use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use nsg_core::detector::{
    compute_metrics, detect_batch, threshold_sweep, to_jsonl, DetectionRecord, DetectorState, Label,
};
use nsg_core::experiment::KernelRecipe;
use nsg_core::kernel::{read_checkpoint, write_checkpoint};
use nsg_core::manifest::{read_manifest, write_manifest, ManifestRecord};
use nsg_core::mmd::{train_kernel, TrainConfig};
use nsg_core::nsg::{nsg_feature, LastFrameRule, NsgConfig, NsgFeature, NsgSidecar, PrecomputedScores};
use nsg_core::rng::SeedStream;
use nsg_core::synth::{oracle_score_field, sample_video_with, GaussianProcessSpec, SigmaSchedule};
use nsg_core::tensor::{read_matrix, write_matrix, ScoreField, VideoTensor};
use nsg_core::theory::{run_suite, SuiteConfig, CHECK_FAMILIES};

use crate::config::{parse_sweep, ConfigError, RunConfig};

/// At least one check ran and failed.
#[derive(Debug, Error)]
#[error("{failed} of {total} checks failed")]
pub struct VerificationFailed {
    pub failed: usize,
    pub total: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates the output directory and records the effective configuration.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_text(&out.join(format!("effective-{command}.conf")), &cfg.render())?;
    Ok(out)
}

/// Paths under `base` become relative so the output tree can be moved.
fn relative_to(base: &Path, path: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (base, path) = (abs(base), abs(path));
    path.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(path)
}

pub fn schedule(cfg: &RunConfig) -> Result<SigmaSchedule> {
    let a: f64 = cfg.get("synth.schedule.a")?;
    let b: f64 = cfg.get("synth.schedule.b")?;
    Ok(match cfg.raw("synth.schedule.kind") {
        "constant" => SigmaSchedule::Constant { sigma: a },
        "linear" => SigmaSchedule::Linear { a, b },
        "exponential" => SigmaSchedule::Exponential { a, b },
        other => return Err(ConfigError(format!("synth.schedule.kind: unknown schedule {other:?}")).into()),
    })
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    seed: u64,
    real: &'a GaussianProcessSpec,
    fake: &'a GaussianProcessSpec,
    /// Video `i` of class `c` draws from substream (`synth/<c>`, `i`).
    substreams: [&'static str; 2],
}

pub fn synth_gen(cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let (n_real, n_fake): (usize, usize) = (cfg.get("synth.real")?, cfg.get("synth.fake")?);
    let (dim, frames): (usize, usize) = (cfg.get("synth.dim")?, cfg.get("synth.frames")?);
    let shift: f64 = cfg.get("synth.shift")?;
    let with_scores: bool = cfg.get("synth.scores")?;
    let schedule = schedule(cfg)?;
    let real = GaussianProcessSpec::real(dim, frames, schedule, seed);
    let fake = GaussianProcessSpec::fake(dim, frames, shift * schedule.sigma(1.0), schedule, seed);
    real.validate()?;
    fake.validate()?;
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(ConfigError(format!("synth.shift must be >= 0, got {shift}")).into());
    }

    let out = prepare_out(cfg, "synth-gen")?;
    create_dir(&out.join("videos"))?;
    if with_scores {
        create_dir(&out.join("scores"))?;
    }
    let root = SeedStream::new(seed);
    let mut records = Vec::with_capacity(n_real + n_fake);
    for (label, spec, count) in [(Label::Real, &real, n_real), (Label::Fake, &fake, n_fake)] {
        for i in 0..count {
            let id = format!("{label}-{i:04}");
            let mut rng = root.substream(&format!("synth/{label}"), i as u64);
            let sampled = sample_video_with(spec, &mut rng)?;
            // Scores are taken at the stored (f32) frame values.
            let stored: Vec<f64> = sampled.frames().as_slice().iter().map(|&v| v as f32 as f64).collect();
            let video = VideoTensor::from_flat(frames, dim, stored)?;
            let mut rec = ManifestRecord::new(id.clone(), label);
            let video_rel = PathBuf::from(format!("videos/{id}.tensor"));
            write_matrix(out.join(&video_rel), video.frames())?;
            rec.video_path = Some(video_rel);
            if with_scores {
                let score_rel = PathBuf::from(format!("scores/{id}.tensor"));
                write_matrix(out.join(&score_rel), oracle_score_field(&video, &real).matrix())?;
                rec.score_path = Some(score_rel);
            }
            records.push(rec);
        }
    }
    write_manifest(&out.join("manifest.tsv"), &records)?;
    let meta = SynthMeta {
        seed,
        real: &real,
        fake: &fake,
        substreams: ["synth/real", "synth/fake"],
    };
    write_text(&out.join("synth.json"), &serde_json::to_string_pretty(&meta)?)?;
    info!("wrote {} videos to {}", records.len(), out.display());
    Ok(())
}

fn nsg_config(cfg: &RunConfig) -> Result<NsgConfig> {
    let c = NsgConfig {
        lambda: cfg.get("nsg.lambda")?,
        delta_t: cfg.get("nsg.delta_t")?,
        last_frame_rule: cfg.get::<LastFrameRule>("nsg.last_frame")?,
        denominator_floor: cfg.get("nsg.floor")?,
    };
    c.validate()?;
    Ok(c)
}

fn extract_one(rec: &ManifestRecord, cfg: &NsgConfig) -> Result<NsgFeature> {
    let video_path = rec.video()?;
    let score_path = rec.scores()?;
    let video = VideoTensor::new(read_matrix(video_path)?).with_context(|| format!("video {}", video_path.display()))?;
    let scores = read_matrix(score_path)?;
    let field = ScoreField::for_video(&video, scores).with_context(|| format!("scores {}", score_path.display()))?;
    Ok(nsg_feature(&video, &PrecomputedScores::new(field), cfg)?)
}

pub fn nsg_extract(cfg: &RunConfig) -> Result<()> {
    let nsg = nsg_config(cfg)?;
    let manifest = cfg.path_or_out("nsg.manifest", "manifest.tsv");
    let records = read_manifest(&manifest)?;
    let out = prepare_out(cfg, "nsg-extract")?;
    let feat_dir = out.join("features");
    create_dir(&feat_dir)?;
    let mut written = Vec::with_capacity(records.len());
    let mut flagged = 0;
    for rec in &records {
        let feature = extract_one(rec, &nsg).with_context(|| format!("record {:?}", rec.id))?;
        flagged += feature.flagged_count();
        let path = feat_dir.join(format!("{}.tensor", rec.id));
        write_matrix(&path, feature.values())?;
        let sidecar = serde_json::to_string_pretty(&feature.sidecar(&nsg))?;
        write_text(&path.with_extension("json"), &sidecar)?;
        let mut rec = rec.clone();
        rec.video_path = rec.video_path.map(|p| relative_to(&out, &p));
        rec.score_path = rec.score_path.map(|p| relative_to(&out, &p));
        rec.feature_path = Some(relative_to(&out, &path));
        written.push(rec);
    }
    write_manifest(&out.join("features.tsv"), &written)?;
    if flagged > 0 {
        warn!("{flagged} frames had denominators below the floor {}", nsg.denominator_floor);
    }
    info!("extracted {} feature files into {}", written.len(), feat_dir.display());
    Ok(())
}

/// Feature tensor of `rec` plus flags from its sidecar, when present.
fn load_feature(rec: &ManifestRecord) -> Result<NsgFeature> {
    let path = rec.features()?;
    let values = read_matrix(path)?;
    let sidecar_path = path.with_extension("json");
    if !sidecar_path.exists() {
        return Ok(NsgFeature::from_values(values));
    }
    let text = fs::read_to_string(&sidecar_path).with_context(|| format!("reading {}", sidecar_path.display()))?;
    let side: NsgSidecar =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", sidecar_path.display()))?;
    if side.flags.len() != values.rows() || side.denominators.len() != values.rows() {
        bail!("{}: sidecar covers {} frames, tensor has {}", sidecar_path.display(), side.flags.len(), values.rows());
    }
    Ok(NsgFeature::new(values, side.denominators, side.flags))
}

fn load_features(records: &[ManifestRecord]) -> Result<Vec<NsgFeature>> {
    let feats: Vec<NsgFeature> = records
        .iter()
        .map(|r| load_feature(r).with_context(|| format!("record {:?}", r.id)))
        .collect::<Result<_>>()?;
    if let Some(first) = feats.first() {
        if let Some((i, f)) = feats.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
            bail!(
                "record {:?} has feature shape {:?}, expected {:?}",
                records[i].id,
                f.shape(),
                first.shape()
            );
        }
    }
    Ok(feats)
}

fn flat(feats: &[NsgFeature]) -> Vec<Vec<f64>> {
    feats.iter().map(|f| f.as_ref().to_vec()).collect()
}

pub fn kernel_train(cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let train = TrainConfig {
        lambda_reg: cfg.get("kernel.lambda_reg")?,
        learning_rate: cfg.get("kernel.learning_rate")?,
        weight_decay: cfg.get("kernel.weight_decay")?,
        batch_size: cfg.get("kernel.batch_size")?,
        max_iters: cfg.get("kernel.iters")?,
        seed,
    };
    train.validate()?;
    let recipe = KernelRecipe {
        frame_widths: cfg.list("kernel.frame_widths")?,
        head_widths: cfg.list("kernel.head_widths")?,
        epsilon: cfg.get("kernel.epsilon")?,
        sigma_net_scale: cfg.get("kernel.sigma_net_scale")?,
        sigma_raw_scale: cfg.get("kernel.sigma_raw_scale")?,
        seed,
    };
    let manifest = cfg.path_or_out("kernel.manifest", "features.tsv");
    let records = read_manifest(&manifest)?;
    let feats = load_features(&records)?;
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for (rec, f) in records.iter().zip(&feats) {
        match rec.label {
            Label::Real => real.push(f.clone()),
            Label::Fake => fake.push(f.clone()),
        }
    }
    let Some(first) = feats.first() else {
        bail!("{} lists no features", manifest.display());
    };
    let (frames, dim) = first.shape();
    let (real, fake) = (flat(&real), flat(&fake));
    let init = recipe.init(frames, dim, &real, &fake)?;
    let out = prepare_out(cfg, "kernel-train")?;
    info!("training on {} real / {} fake for {} iterations", real.len(), fake.len(), train.max_iters);
    let report = train_kernel(&real, &fake, &train, init)?;
    write_checkpoint(out.join("kernel.ckpt"), &report.params)?;
    write_text(&out.join("train_report.json"), &report.to_json())?;
    info!(
        "objective {:.4} -> {:.4}",
        report.initial.objective, report.final_.objective
    );
    Ok(())
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    let tau: f64 = cfg.get("detect.tau")?;
    let n: usize = cfg.get("detect.reference_size")?;
    let sweep = parse_sweep(cfg.raw("detect.sweep"))?;
    let checkpoint = cfg.path_or_out("detect.checkpoint", "kernel.ckpt");
    let (Some(ref_path), Some(test_path)) = (cfg.opt::<PathBuf>("detect.reference")?, cfg.opt::<PathBuf>("detect.test")?)
    else {
        return Err(ConfigError("detect.reference and detect.test must both be set".into()).into());
    };
    if n == 0 {
        return Err(ConfigError("detect.reference_size must be positive".into()).into());
    }
    let params = read_checkpoint(&checkpoint)?;
    let reference: Vec<ManifestRecord> =
        read_manifest(&ref_path)?.into_iter().filter(|r| r.label == Label::Real).take(n).collect();
    if reference.len() < n {
        bail!(
            "{} has {} real records, detect.reference_size is {n}",
            ref_path.display(),
            reference.len()
        );
    }
    let reference = flat(&load_features(&reference)?);
    let state = DetectorState::new(&reference, params, tau)?;
    let tests = read_manifest(&test_path)?;
    let feats = load_features(&tests)?;
    let results = detect_batch(&feats, &state)?;

    let out = prepare_out(cfg, "detect")?;
    let records: Vec<DetectionRecord> = tests
        .iter()
        .zip(results)
        .map(|(rec, r)| DetectionRecord {
            video_id: rec.id.clone(),
            q: r.q,
            decision: r.decision,
            flags: r.flags,
        })
        .collect();
    write_text(&out.join("results.jsonl"), &to_jsonl(&records))?;
    let labels: Vec<Label> = tests.iter().map(|r| r.label).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.q).collect();
    let metrics = compute_metrics(&labels, &scores, tau)?;
    write_text(&out.join("metrics.json"), &metrics.to_json())?;
    if !sweep.is_empty() {
        let rows = threshold_sweep(&labels, &scores, &sweep)?;
        write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
    }
    match metrics.auroc {
        Some(a) => info!("{} videos, accuracy {:.3}, AUROC {a:.4}", records.len(), metrics.accuracy),
        None => info!("{} videos, accuracy {:.3}", records.len(), metrics.accuracy),
    }
    Ok(())
}

fn slug(name: &str) -> String {
    let mut s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    s.truncate(100);
    s
}

pub fn theory_verify(cfg: &RunConfig) -> Result<()> {
    let checks: Vec<String> = match cfg.raw("theory.checks").trim() {
        "all" => CHECK_FAMILIES.iter().map(|s| s.to_string()).collect(),
        _ => cfg.list("theory.checks")?,
    };
    let suite = SuiteConfig {
        checks,
        trials: cfg.get("theory.trials")?,
        distance_trials: cfg.get("theory.distance_trials")?,
        seed: cfg.get("seed")?,
        distance_bound_c: cfg.opt("theory.distance_bound_c")?,
        distance_bound_lambda: cfg.opt("theory.distance_bound_lambda")?,
    };
    suite.validate()?;
    let write_csv: bool = cfg.get("theory.csv")?;
    let out = prepare_out(cfg, "theory-verify")?;
    let report = run_suite(&suite)?;

    let dir = out.join("theory");
    create_dir(&dir)?;
    for (i, e) in report.entries.iter().enumerate() {
        let path = dir.join(format!("{i:03}-{}.json", slug(&e.name)));
        write_text(&path, &serde_json::to_string_pretty(e)?)?;
        info!("{} {}", if e.pass { "PASS" } else { "FAIL" }, e.name);
    }
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    if write_csv && !report.raw.is_empty() {
        let path = out.join("distance_samples.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["check", "trial", "distance"])?;
        for (name, dists) in &report.raw {
            for (i, d) in dists.iter().enumerate() {
                w.write_record([name.as_str(), &i.to_string(), &d.to_string()])?;
            }
        }
        w.flush()?;
    }
    let failed = report.entries.iter().filter(|e| !e.pass).count();
    if failed > 0 {
        return Err(VerificationFailed {
            failed,
            total: report.entries.len(),
        }
        .into());
    }
    info!("{} checks passed", report.entries.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_inside_out() {
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/a/b/c/d.t")), PathBuf::from("c/d.t"));
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/x/d.t")), PathBuf::from("/x/d.t"));
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("chi2_tail d=1 phi=0.5"), "chi2_tail_d_1_phi_0.5");
    }

    #[test]
    fn schedules_from_config() {
        let mut c = RunConfig::default();
        assert_eq!(schedule(&c).unwrap(), SigmaSchedule::Constant { sigma: 1.0 });
        c.set("synth.schedule.kind", "exponential").unwrap();
        c.set("synth.schedule.b", "-0.2").unwrap();
        assert_eq!(schedule(&c).unwrap(), SigmaSchedule::Exponential { a: 1.0, b: -0.2 });
        c.set("synth.schedule.kind", "cubic").unwrap();
        assert!(schedule(&c).unwrap_err().downcast_ref::<ConfigError>().is_some());
    }
}
