//! Flat `key = value` run configuration.
//!
//! Files use `[section]` headers; a key `lambda` under `[nsg]` is the same
//! setting as a top-level `nsg.lambda`. Command-line `--set key=value`
//! overrides are applied last. Every known key has a default, and unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use thiserror::Error;

/// Rejected configuration; maps to the validation exit code.
#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every random draw derives from it"),
    ("out", "out", "output directory"),
    ("threads", "0", "worker threads, 0 = all cores, 1 = bit-reproducible"),
    ("synth.real", "100", "number of real videos"),
    ("synth.fake", "100", "number of fake videos"),
    ("synth.dim", "16", "flattened frame dimension d"),
    ("synth.frames", "8", "frames per video T"),
    ("synth.shift", "1.0", "fake-class shift ‖μ‖/σ(1)"),
    ("synth.schedule.kind", "constant", "sigma schedule: constant | linear | exponential"),
    ("synth.schedule.a", "1.0", "constant: σ; linear: a in a + b·t; exponential: a in a·exp(b·t)"),
    ("synth.schedule.b", "0.0", "slope or rate of the schedule"),
    ("synth.scores", "true", "also write real-density oracle score fields"),
    ("nsg.manifest", "", "input manifest; empty = <out>/manifest.tsv"),
    ("nsg.lambda", "0.1", "denominator stabilizer λ"),
    ("nsg.delta_t", "1.0", "frame-time step Δt"),
    ("nsg.last_frame", "backward_difference", "backward_difference | drop_last"),
    ("nsg.floor", "0.001", "denominators below this magnitude are flagged"),
    ("kernel.manifest", "", "labeled feature manifest; empty = <out>/features.tsv"),
    ("kernel.frame_widths", "8", "per-frame layer widths of the pooled feature net"),
    ("kernel.head_widths", "4,4", "head layer widths after pooling"),
    ("kernel.epsilon", "0.1", "initial safeguard weight ε"),
    ("kernel.sigma_net_scale", "2.0", "σ_net as a multiple of the median feature distance"),
    ("kernel.sigma_raw_scale", "10.0", "σ_raw as a multiple of the median input distance"),
    ("kernel.learning_rate", "0.0001", "AdamW step size"),
    ("kernel.weight_decay", "0.1", "decoupled decay on weight matrices"),
    ("kernel.batch_size", "24", "samples per population per step"),
    ("kernel.iters", "1000", "optimizer steps"),
    ("kernel.lambda_reg", "1e-10", "variance regularizer in the objective"),
    ("detect.checkpoint", "", "kernel checkpoint; empty = <out>/kernel.ckpt"),
    ("detect.reference", "", "real-feature reference manifest"),
    ("detect.test", "", "test-feature manifest"),
    ("detect.reference_size", "100", "reference set size n (first n real records)"),
    ("detect.tau", "1.0", "decision threshold τ"),
    ("detect.sweep", "", "thresholds to sweep: comma list or start:stop:step"),
    ("theory.checks", "all", "comma list of check families, all, or empty for none"),
    ("theory.trials", "100000", "Monte Carlo trials per check"),
    ("theory.distance_trials", "10000", "trials per distance-bound run"),
    ("theory.distance_bound_c", "", "override the shared denominator bound C"),
    ("theory.distance_bound_lambda", "", "override λ of the distance-bound runs"),
    ("theory.csv", "false", "write raw distances of the distance-bound runs as CSV"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.merge_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        for (section, props) in &ini {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_owned(),
                };
                self.set(&key, v)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_owned();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown key {key:?}")).into()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a known config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e: T::Err| ConfigError(format!("{key} = {raw:?}: {e}")).into())
    }

    /// `None` when the value is empty.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).trim().is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| ConfigError(format!("{key}: {s:?}: {e}")).into()))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Path setting, falling back to `<out>/<default_name>` when empty.
    pub fn path_or_out(&self, key: &str, default_name: &str) -> PathBuf {
        match self.raw(key).trim() {
            "" => self.out_dir().join(default_name),
            p => PathBuf::from(p),
        }
    }

    /// Every key with its effective value, grouped by section.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        for (key, _, doc) in KEYS {
            let (section, name) = match key.split_once('.') {
                Some((s, n)) => (Some(s), n),
                None => (None, *key),
            };
            if section != current {
                let _ = write!(out, "\n[{}]\n", section.unwrap_or_default());
                current = section;
            }
            let _ = writeln!(out, "# {doc}\n{name} = {}", self.values[*key]);
        }
        out.trim_start().to_owned()
    }
}

/// Parses `a,b,c` or `start:stop:step` (inclusive of `stop` within rounding).
pub fn parse_sweep(raw: &str) -> Result<Vec<f64>, ConfigError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| ConfigError(format!("sweep value {s:?}: {e}")));
    if let [start, stop, step] = raw.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(ConfigError(format!("sweep {raw:?} needs step > 0 and stop >= start")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| start + step * i as f64).collect());
    }
    raw.split(',').map(num).collect()
}
