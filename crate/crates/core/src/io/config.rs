//! Run configuration in TOML. Every key is optional; see the README for the
//! full grammar and defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distributions::{AffineMap, DataSource, FractalClass, FractalSpec, GaussianComponent, GaussianMixture, DEFAULT_WARM_UP};
use crate::error::{Error, Result};
use crate::guidance::GuidanceSpec;
use crate::linalg::{Mat2, Vec2};
use crate::metrics::MetricSettings;
use crate::sampler::{Integrator, SamplerConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Unguided,
    Cfg,
    Autoguide,
    Insitu,
    Truncate,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Unguided => "unguided",
            ModeName::Cfg => "cfg",
            ModeName::Autoguide => "autoguide",
            ModeName::Insitu => "insitu",
            ModeName::Truncate => "truncate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Fractal,
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    /// Row-major 2x2 linear part.
    pub matrix: [f64; 4],
    pub offset: [f64; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub maps: Vec<MapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub weight: f64,
    pub mean: [f64; 2],
    /// Row-major 2x2 covariance.
    pub cov: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionSection {
    pub kind: DistributionKind,
    pub warm_up: usize,
    /// Custom fractal classes; empty means the built-in two-class spec.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentEntry>,
}

impl Default for DistributionSection {
    fn default() -> Self {
        Self { kind: DistributionKind::Fractal, warm_up: DEFAULT_WARM_UP, classes: Vec::new(), components: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub cond_drop: f64,
    pub p_train: f64,
    pub weak_step: usize,
    pub extra_snapshots: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub hidden: Vec<usize>,
    pub sigma_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            steps: d.steps,
            lr: d.lr,
            lr_min: d.lr_min,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            p_mean: d.p_mean,
            p_std: d.p_std,
            cond_drop: d.cond_drop,
            p_train: d.p_train,
            weak_step: d.weak_step,
            extra_snapshots: d.extra_snapshots,
            seed: None,
            hidden: d.hidden,
            sigma_embed_dim: d.sigma_embed_dim,
            class_embed_dim: d.class_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub integrator: Integrator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub samples_per_class: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            steps: d.steps,
            sigma_min: d.sigma_min,
            sigma_max: d.sigma_max,
            rho: d.rho,
            integrator: d.integrator,
            seed: None,
            samples_per_class: 4096,
        }
    }
}

/// Guidance parameters. Only the fields that belong to `mode` may be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_ckpt: Option<PathBuf>,
}

pub const DEFAULT_CFG_W: f64 = 4.0;
pub const DEFAULT_AUTOGUIDE_W: f64 = 1.5;
pub const DEFAULT_INSITU_W: f64 = 2.0;
pub const DEFAULT_INSITU_P: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub reference_per_class: usize,
    pub bins: usize,
    pub grid_expand: f64,
    pub tau_percentile: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_out: Option<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let d = MetricSettings::default();
        Self {
            reference_per_class: 100_000,
            bins: d.bins,
            grid_expand: d.grid_expand,
            tau_percentile: d.tau_percentile,
            tau_out: d.tau_out,
        }
    }
}

impl MetricsSection {
    pub fn settings(&self) -> MetricSettings {
        MetricSettings {
            bins: self.bins,
            grid_expand: self.grid_expand,
            tau_percentile: self.tau_percentile,
            tau_out: self.tau_out,
        }
    }
}

/// Axes of the sweep grid. `w` applies to cfg, autoguide and insitu, `p`
/// to insitu, `tau` to truncate and `snapshots` to autoguide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub modes: Vec<ModeName>,
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub tau: Vec<f64>,
    /// Snapshot steps for autoguide rows; empty means the weak snapshot.
    pub snapshots: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            modes: vec![ModeName::Insitu],
            w: vec![1.0, 2.0, 3.0],
            p: vec![0.05, 0.1, 0.15, 0.2],
            tau: vec![DEFAULT_TAU],
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Section {
    pub cfg_w: f64,
    pub tau: f64,
    pub autoguide_w: f64,
    pub insitu_w: f64,
    pub insitu_p: f64,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Self {
            cfg_w: DEFAULT_CFG_W,
            tau: DEFAULT_TAU,
            autoguide_w: DEFAULT_AUTOGUIDE_W,
            insitu_w: DEFAULT_INSITU_W,
            insitu_p: DEFAULT_INSITU_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; nested seeds default to it.
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    /// Main checkpoint for `sample` and `sweep`; defaults to `<out>/final.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub distribution: DistributionSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
    pub fig2: Fig2Section,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            workers: 1,
            checkpoint: None,
            distribution: DistributionSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            guidance: GuidanceSection::default(),
            metrics: MetricsSection::default(),
            sweep: SweepSection::default(),
            fig2: Fig2Section::default(),
        }
    }
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub mode: Option<ModeName>,
    pub w: Option<f64>,
    pub p: Option<f64>,
    pub tau: Option<f64>,
    pub weak_ckpt: Option<PathBuf>,
}

impl Overrides {
    fn flag_for(&self, key: &str) -> Option<&'static str> {
        let (set, flag) = match key {
            "seed" => (self.seed.is_some(), "seed"),
            "out" => (self.out.is_some(), "out"),
            "workers" => (self.workers.is_some(), "workers"),
            "guidance.mode" => (self.mode.is_some(), "mode"),
            "guidance.w" => (self.w.is_some(), "w"),
            "guidance.p" => (self.p.is_some(), "p"),
            "guidance.tau" => (self.tau.is_some(), "tau"),
            "guidance.weak_ckpt" => (self.weak_ckpt.is_some(), "weak-ckpt"),
            _ => return None,
        };
        set.then_some(flag)
    }
}

/// One item of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub spec: GuidanceSpec,
    /// Snapshot step of the guide for autoguide points; `None` is the weak snapshot.
    pub snapshot: Option<usize>,
}

/// Line number (1-based) where a dotted key is assigned, or where its
/// section starts; 0 when it does not appear in the text.
pub fn locate_key(text: &str, key: &str) -> usize {
    let mut section = String::new();
    let mut section_line = 0;
    let key_section = key.rsplit_once('.').map(|(s, _)| s).unwrap_or("");
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            section = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if section == key {
                return i + 1;
            }
            if section == key_section && section_line == 0 {
                section_line = i + 1;
            }
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim().trim_matches('"');
            let full = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if full == key {
                return i + 1;
            }
        }
    }
    section_line
}

fn key_at_offset(text: &str, offset: usize) -> (String, usize) {
    let offset = offset.min(text.len());
    let line_no = text[..offset].matches('\n').count() + 1;
    let mut section = String::new();
    for raw in text.lines().take(line_no - 1) {
        let l = raw.trim();
        if l.starts_with('[') {
            section = l.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
        }
    }
    let this = text.lines().nth(line_no - 1).unwrap_or("").trim();
    let key = match this.split_once('=') {
        Some((k, _)) => {
            let k = k.trim().trim_matches('"');
            if section.is_empty() { k.to_string() } else { format!("{section}.{k}") }
        }
        None => this.trim_start_matches('[').split(']').next().unwrap_or(&section).trim().to_string(),
    };
    (key, line_no)
}

fn from_toml_error(text: &str, e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let (mut key, line) = match e.span() {
        Some(span) => key_at_offset(text, span.start),
        None => (String::new(), 0),
    };
    if let Some(unknown) = message.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
        if !key.ends_with(unknown) {
            key = if key.is_empty() { unknown.to_string() } else { format!("{key}.{unknown}") };
        }
    }
    Error::ConfigKey { key, line, message }
}

/// Parse, apply overrides and validate.
pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| from_toml_error(text, e))?;
    cfg.apply(overrides);
    cfg.validate().map_err(|(key, message)| match overrides.flag_for(&key) {
        Some(flag) => Error::Usage(format!("--{flag}: {message}")),
        None => Error::ConfigKey { line: locate_key(text, &key), key, message },
    })?;
    cfg.fill_seeds();
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &Overrides::default())
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_with(&text, overrides)
}

type KeyError = (String, String);

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<(), KeyError> {
    if ok {
        Ok(())
    } else {
        Err((key.to_string(), message()))
    }
}

/// Pull the first `section.field` token out of a nested validation message.
fn keyed(section: &str, e: Error) -> KeyError {
    let msg = match e {
        Error::Config(m) => m,
        other => other.to_string(),
    };
    let prefix = format!("{section}.");
    let key = msg
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .find(|t| t.starts_with(&prefix) && t.len() > prefix.len())
        .unwrap_or(section)
        .to_string();
    (key, msg)
}

impl RunConfig {
    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        let g = &mut self.guidance;
        g.mode = o.mode.or(g.mode);
        g.w = o.w.or(g.w);
        g.p = o.p.or(g.p);
        g.tau = o.tau.or(g.tau);
        if let Some(path) = &o.weak_ckpt {
            g.weak_ckpt = Some(path.clone());
        }
    }

    fn fill_seeds(&mut self) {
        self.train.seed.get_or_insert(self.seed);
        self.sampler.seed.get_or_insert(self.seed);
    }

    fn validate(&self) -> Result<(), KeyError> {
        check(self.workers >= 1, "workers", || "workers must be at least 1".into())?;
        self.data_source().map_err(|e| keyed("distribution", e))?;
        self.train_config().validate().map_err(|e| keyed("train", e))?;
        self.sampler_config().validate().map_err(|e| keyed("sampler", e))?;
        check(self.sampler.samples_per_class >= 1, "sampler.samples_per_class", || {
            "sampler.samples_per_class must be positive".into()
        })?;
        self.guidance_spec_checked()?;
        self.validate_metrics()?;
        self.validate_sweep()?;
        let f = &self.fig2;
        for (key, w) in [("fig2.cfg_w", f.cfg_w), ("fig2.autoguide_w", f.autoguide_w), ("fig2.insitu_w", f.insitu_w)] {
            check_w(key, w)?;
        }
        check_p("fig2.insitu_p", f.insitu_p)?;
        check_tau("fig2.tau", f.tau)?;
        Ok(())
    }

    fn validate_metrics(&self) -> Result<(), KeyError> {
        let m = &self.metrics;
        check(m.reference_per_class >= 2, "metrics.reference_per_class", || {
            "metrics.reference_per_class must be at least 2".into()
        })?;
        check(m.bins >= 1, "metrics.bins", || "metrics.bins must be positive".into())?;
        check(m.grid_expand >= 0.0 && m.grid_expand.is_finite(), "metrics.grid_expand", || {
            format!("metrics.grid_expand must be a finite value >= 0, got {}", m.grid_expand)
        })?;
        check(m.tau_percentile > 0.0 && m.tau_percentile <= 1.0, "metrics.tau_percentile", || {
            format!("metrics.tau_percentile must lie in (0, 1], got {}", m.tau_percentile)
        })?;
        if let Some(t) = m.tau_out {
            check(t > 0.0 && t.is_finite(), "metrics.tau_out", || format!("metrics.tau_out must be positive, got {t}"))?;
        }
        Ok(())
    }

    fn validate_sweep(&self) -> Result<(), KeyError> {
        let s = &self.sweep;
        check(!s.modes.is_empty(), "sweep.modes", || "sweep grid is empty: sweep.modes has no entries".into())?;
        let uses = |m: &[ModeName]| s.modes.iter().any(|x| m.contains(x));
        if uses(&[ModeName::Cfg, ModeName::Autoguide, ModeName::Insitu]) {
            check(!s.w.is_empty(), "sweep.w", || "sweep grid is empty: sweep.w has no entries".into())?;
        }
        if uses(&[ModeName::Insitu]) {
            check(!s.p.is_empty(), "sweep.p", || "sweep grid is empty: sweep.p has no entries".into())?;
        }
        if uses(&[ModeName::Truncate]) {
            check(!s.tau.is_empty(), "sweep.tau", || "sweep grid is empty: sweep.tau has no entries".into())?;
        }
        s.w.iter().try_for_each(|&w| check_w("sweep.w", w))?;
        s.p.iter().try_for_each(|&p| check_p("sweep.p", p))?;
        s.tau.iter().try_for_each(|&t| check_tau("sweep.tau", t))?;
        for &step in &s.snapshots {
            check(
                step == self.train.weak_step || self.train.extra_snapshots.contains(&step),
                "sweep.snapshots",
                || format!("sweep.snapshots entry {step} is neither train.weak_step nor in train.extra_snapshots"),
            )?;
        }
        Ok(())
    }

    fn guidance_spec_checked(&self) -> Result<GuidanceSpec, KeyError> {
        let g = &self.guidance;
        let mode = g.mode.unwrap_or(ModeName::Insitu);
        let forbid = |key: &str, present: bool| {
            check(!present, &format!("guidance.{key}"), || {
                format!("guidance.{key} is meaningless in mode {}", mode.as_str())
            })
        };
        let spec = match mode {
            ModeName::Unguided => {
                forbid("w", g.w.is_some())?;
                forbid("p", g.p.is_some())?;
                forbid("passes", g.passes.is_some())?;
                forbid("tau", g.tau.is_some())?;
                forbid("weak_ckpt", g.weak_ckpt.is_some())?;
                GuidanceSpec::Unguided
            }
            ModeName::Cfg => {
                forbid("p", g.p.is_some())?;
                forbid("passes", g.passes.is_some())?;
                forbid("tau", g.tau.is_some())?;
                forbid("weak_ckpt", g.weak_ckpt.is_some())?;
                GuidanceSpec::Cfg { w: g.w.unwrap_or(DEFAULT_CFG_W) }
            }
            ModeName::Autoguide => {
                forbid("p", g.p.is_some())?;
                forbid("passes", g.passes.is_some())?;
                forbid("tau", g.tau.is_some())?;
                GuidanceSpec::Autoguidance { w: g.w.unwrap_or(DEFAULT_AUTOGUIDE_W) }
            }
            ModeName::Insitu => {
                forbid("tau", g.tau.is_some())?;
                forbid("weak_ckpt", g.weak_ckpt.is_some())?;
                let p = g.p.unwrap_or(DEFAULT_INSITU_P);
                check_p("guidance.p", p)?;
                let passes = g.passes.unwrap_or(1);
                check(passes >= 1, "guidance.passes", || "guidance.passes must be at least 1".into())?;
                GuidanceSpec::InSitu { w: g.w.unwrap_or(DEFAULT_INSITU_W), p, passes }
            }
            ModeName::Truncate => {
                forbid("w", g.w.is_some())?;
                forbid("p", g.p.is_some())?;
                forbid("passes", g.passes.is_some())?;
                forbid("weak_ckpt", g.weak_ckpt.is_some())?;
                let tau = g.tau.unwrap_or(DEFAULT_TAU);
                check_tau("guidance.tau", tau)?;
                GuidanceSpec::ScoreTruncation { tau }
            }
        };
        if let Some(w) = spec.weight() {
            check_w("guidance.w", w)?;
        }
        Ok(spec)
    }

    /// The guidance mode selected by the `[guidance]` section.
    pub fn guidance_spec(&self) -> GuidanceSpec {
        self.guidance_spec_checked().expect("validated at parse time")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            lr: t.lr,
            lr_min: t.lr_min,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            p_mean: t.p_mean,
            p_std: t.p_std,
            cond_drop: t.cond_drop,
            p_train: t.p_train,
            weak_step: t.weak_step,
            extra_snapshots: t.extra_snapshots.clone(),
            seed: t.seed.unwrap_or(self.seed),
            hidden: t.hidden.clone(),
            sigma_embed_dim: t.sigma_embed_dim,
            class_embed_dim: t.class_embed_dim,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            steps: s.steps,
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            rho: s.rho,
            integrator: s.integrator,
            seed: s.seed.unwrap_or(self.seed),
        }
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let d = &self.distribution;
        match d.kind {
            DistributionKind::Fractal => {
                if !d.components.is_empty() {
                    return Err(Error::Config("distribution.components only applies to kind = \"gmm\"".into()));
                }
                if d.classes.is_empty() {
                    let spec = FractalSpec::new(crate::distributions::standard_classes(), d.warm_up)?;
                    return Ok(DataSource::Fractal(spec));
                }
                let classes = d
                    .classes
                    .iter()
                    .map(|c| FractalClass {
                        maps: c
                            .maps
                            .iter()
                            .map(|m| AffineMap {
                                matrix: Mat2::from_row_major(m.matrix),
                                offset: Vec2::new(m.offset[0], m.offset[1]),
                                weight: m.weight,
                            })
                            .collect(),
                    })
                    .collect();
                Ok(DataSource::Fractal(
                    FractalSpec::new(classes, d.warm_up).map_err(|e| Error::Config(format!("distribution.classes: {e}")))?,
                ))
            }
            DistributionKind::Gmm => {
                if !d.classes.is_empty() {
                    return Err(Error::Config("distribution.classes only applies to kind = \"fractal\"".into()));
                }
                let comps = d
                    .components
                    .iter()
                    .map(|c| GaussianComponent {
                        weight: c.weight,
                        mean: Vec2::new(c.mean[0], c.mean[1]),
                        cov: Mat2::from_row_major(c.cov),
                    })
                    .collect();
                Ok(DataSource::Gmm(
                    GaussianMixture::new(comps).map_err(|e| Error::Config(format!("distribution.components: {e}")))?,
                ))
            }
        }
    }

    /// Sweep points in index order: modes in listed order, then `w`, then
    /// the mode's own axis (`p`, `tau` or `snapshots`).
    pub fn sweep_grid(&self) -> Vec<GridPoint> {
        let s = &self.sweep;
        let mut specs = Vec::new();
        for &mode in &s.modes {
            match mode {
                ModeName::Unguided => specs.push((GuidanceSpec::Unguided, None)),
                ModeName::Cfg => specs.extend(s.w.iter().map(|&w| (GuidanceSpec::Cfg { w }, None))),
                ModeName::Autoguide => {
                    for &w in &s.w {
                        if s.snapshots.is_empty() {
                            specs.push((GuidanceSpec::Autoguidance { w }, None));
                        }
                        specs.extend(s.snapshots.iter().map(|&k| (GuidanceSpec::Autoguidance { w }, Some(k))));
                    }
                }
                ModeName::Insitu => {
                    for &w in &s.w {
                        specs.extend(s.p.iter().map(|&p| (GuidanceSpec::InSitu { w, p, passes: 1 }, None)));
                    }
                }
                ModeName::Truncate => specs.extend(s.tau.iter().map(|&tau| (GuidanceSpec::ScoreTruncation { tau }, None))),
            }
        }
        specs
            .into_iter()
            .enumerate()
            .map(|(index, (spec, snapshot))| GridPoint { index, spec, snapshot })
            .collect()
    }

    /// The main checkpoint path used by `sample` and `sweep`.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("final.ckpt"))
    }

    /// TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_w(key: &str, w: f64) -> Result<(), KeyError> {
    check(w >= 0.0 && w.is_finite(), key, || format!("{key} must be a finite weight >= 0, got {w}"))
}

fn check_p(key: &str, p: f64) -> Result<(), KeyError> {
    check((0.0..1.0).contains(&p), key, || format!("{key} must lie in [0, 1), got {p}"))
}

fn check_tau(key: &str, t: f64) -> Result<(), KeyError> {
    check(t > 0.0 && t.is_finite(), key, || format!("{key} must be positive, got {t}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_err(text: &str) -> (String, usize, String) {
        match parse_config(text) {
            Err(Error::ConfigKey { key, line, message }) => (key, line, message),
            other => panic!("expected keyed error for {text:?}, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.guidance_spec(), GuidanceSpec::InSitu { w: 2.0, p: 0.1, passes: 1 });
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.sampler_config(), SamplerConfig::default());
        assert_eq!(cfg.metrics.settings(), MetricSettings::default());
        assert_eq!(cfg.train.seed, Some(0));
        assert!(matches!(cfg.data_source().unwrap(), DataSource::Fractal(ref f) if *f == FractalSpec::standard()));
    }

    #[test]
    fn insitu_operating_point() {
        for text in ["guidance.w = 2.0\nguidance.p = 0.1\n", "[guidance]\nw = 2.0\np = 0.1\n"] {
            let cfg = parse_config(text).unwrap();
            assert_eq!(cfg.guidance_spec(), GuidanceSpec::InSitu { w: 2.0, p: 0.1, passes: 1 });
        }
    }

    #[test]
    fn p_out_of_range_names_key_and_line() {
        let (key, line, message) = key_err("seed = 3\n\n[guidance]\nw = 2.0\np = 1.5\n");
        assert_eq!((key.as_str(), line), ("guidance.p", 5));
        assert!(message.contains("[0, 1)"), "{message}");
        let (key, line, _) = key_err("guidance.p = 1.5\n");
        assert_eq!((key.as_str(), line), ("guidance.p", 1));
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        let (key, line, _) = key_err("[train]\nsteps = 10\nlearning_rate = 0.1\n");
        assert_eq!((key.as_str(), line), ("train.learning_rate", 3));
        let (key, line, _) = key_err("[sampler]\n\nsteps = \"many\"\n");
        assert_eq!((key.as_str(), line), ("sampler.steps", 3));
        let (key, _, _) = key_err("bogus = 1\n");
        assert_eq!(key, "bogus");
    }

    #[test]
    fn nested_invariants_carry_keys() {
        let (key, line, _) = key_err("[train]\nsteps = 100\nweak_step = 100\n");
        assert_eq!((key.as_str(), line), ("train.weak_step", 3));
        let (key, _, _) = key_err("[sampler]\nsigma_min = 90.0\n");
        assert_eq!(key, "sampler.sigma_min");
        let (key, _, _) = key_err("[guidance]\nmode = \"unguided\"\nw = 0.7\n");
        assert_eq!(key, "guidance.w");
    }

    #[test]
    fn flags_override_and_report_as_usage() {
        let o = Overrides { mode: Some(ModeName::Unguided), w: Some(0.7), ..Overrides::default() };
        assert!(matches!(parse_config_with("", &o), Err(Error::Usage(m)) if m.contains("--w")));
        let o = Overrides { mode: Some(ModeName::Cfg), w: Some(4.0), seed: Some(9), ..Overrides::default() };
        let cfg = parse_config_with("seed = 1\n", &o).unwrap();
        assert_eq!(cfg.guidance_spec(), GuidanceSpec::Cfg { w: 4.0 });
        assert_eq!((cfg.seed, cfg.train.seed, cfg.sampler.seed), (9, Some(9), Some(9)));
    }

    #[test]
    fn sweep_grid_shapes() {
        let cfg = parse_config("").unwrap();
        let grid = cfg.sweep_grid();
        assert_eq!(grid.len(), 12);
        assert_eq!(grid[0].spec, GuidanceSpec::InSitu { w: 1.0, p: 0.05, passes: 1 });
        assert_eq!(grid[11].spec, GuidanceSpec::InSitu { w: 3.0, p: 0.2, passes: 1 });
        assert!(grid.iter().enumerate().all(|(i, g)| g.index == i));

        let cfg = parse_config(
            "[train]\nextra_snapshots = [500]\n[sweep]\nmodes = [\"unguided\", \"autoguide\", \"truncate\"]\nw = [1.5]\nsnapshots = [500, 2000]\ntau = [0.5, 1.0]\n",
        )
        .unwrap();
        let grid = cfg.sweep_grid();
        assert_eq!(grid.len(), 5);
        assert_eq!(grid[2].snapshot, Some(2000));

        let (key, _, message) = key_err("[sweep]\nw = []\n");
        assert_eq!(key, "sweep.w");
        assert!(message.contains("empty"));
        let (key, _, _) = key_err("[sweep]\nmodes = []\n");
        assert_eq!(key, "sweep.modes");
    }

    #[test]
    fn resolved_config_round_trips() {
        let texts = [
            "",
            "seed = 77\n[guidance]\nmode = \"truncate\"\ntau = 0.5\n",
            "[distribution]\nkind = \"gmm\"\n[[distribution.components]]\nweight = 1.0\nmean = [0.0, 1.0]\ncov = [0.25, 0.0, 0.0, 0.25]\n",
        ];
        for text in texts {
            let cfg = parse_config(text).unwrap();
            let resolved = cfg.to_toml();
            assert_eq!(parse_config(&resolved).unwrap(), cfg, "{resolved}");
        }
    }

    #[test]
    fn custom_fractal_and_bad_maps() {
        let ok = "[[distribution.classes]]\nmaps = [ { matrix = [0.5, 0.0, 0.0, 0.5], offset = [0.0, 0.0], weight = 0.5 }, { matrix = [0.5, 0.0, 0.0, 0.5], offset = [0.5, 0.0], weight = 0.5 } ]\n";
        let cfg = parse_config(ok).unwrap();
        assert_eq!(cfg.data_source().unwrap().num_classes(), 1);
        let bad = ok.replace("[0.5, 0.0, 0.0, 0.5], offset = [0.5", "[1.5, 0.0, 0.0, 0.5], offset = [0.5");
        let (key, line, _) = key_err(&bad);
        assert_eq!((key.as_str(), line), ("distribution.classes", 1));
    }
}
