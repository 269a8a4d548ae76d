//! Experiment commands and the `isag` command line.
//!
//! Output layout under `<out>`:
//!
//! ```text
//! final.ckpt, weak.ckpt, snapshot_<step>.ckpt   train
//! loss.csv                                     train
//! samples.csv, samples.svg                     sample
//! metrics.csv                                  eval
//! sweep.csv, sweep_rows/<index>.csv            sweep
//! fig2.svg, fig2.csv                           fig2
//! resolved_config.<command>.toml               every command
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::distributions::DataSource;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceSpec, GuidedDenoiser};
use crate::io::checkpoint::{load_checkpoint_for, save_checkpoint, CheckpointMeta};
use crate::io::config::{load_config, parse_config_with, GridPoint, ModeName, Overrides, RunConfig};
use crate::io::svg::{emit_scatter_svg, Layout, Panel, FIG2_PANELS};
use crate::io::tables::{group_samples, loss_rows, read_csv, sample_rows, write_csv, MetricRow, SampleRow, SweepRow};
use crate::linalg::Vec2;
use crate::metrics::{MetricReport, ReferenceSet};
use crate::nn::{Condition, DenoiserNet};
use crate::oracle::{run_all, OracleCheck};
use crate::rng::RngStream;
use crate::sampler::{sample, SamplerConfig};
use crate::trainer::{heldout_loss, train_with_progress};

/// Canonical configuration of the six-panel figure.
pub const FIG2_CONFIG: &str = include_str!("../../../configs/fig2.toml");

/// Size of the held-out batch used to compare final and weak checkpoints.
pub const HELDOUT_SIZE: usize = 8192;

/// Progress sink for long-running commands.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_resolved(cfg: &RunConfig, command: &str) -> Result<()> {
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join(format!("resolved_config.{command}.toml"));
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

pub fn snapshot_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("snapshot_{step}.ckpt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_path: PathBuf,
    pub weak_path: PathBuf,
    pub loss_path: PathBuf,
    pub heldout_final: f64,
    pub heldout_weak: f64,
    pub null_grad_steps: usize,
}

pub fn cmd_train(cfg: &RunConfig, log: Log<'_>) -> Result<TrainSummary> {
    let data = cfg.data_source()?;
    let tc = cfg.train_config();
    ensure_dir(&cfg.out)?;
    write_resolved(cfg, "train")?;
    let every = (tc.steps / 10).max(1);
    let outcome = train_with_progress(&tc, &data, |step, loss| {
        if (step + 1) % every == 0 {
            log(&format!("step {:>6}/{}  loss {loss:.5}", step + 1, tc.steps));
        }
    })?;
    let meta = |step: usize| CheckpointMeta { step: step as u64, seed: tc.seed, p_train: tc.p_train };
    let final_path = cfg.out.join("final.ckpt");
    let weak_path = cfg.out.join("weak.ckpt");
    save_checkpoint(&outcome.final_net, &meta(tc.steps), &final_path)?;
    save_checkpoint(&outcome.weak_net, &meta(tc.weak_step), &weak_path)?;
    for (step, net) in &outcome.snapshots {
        save_checkpoint(net, &meta(*step), &snapshot_path(&cfg.out, *step))?;
    }
    let loss_path = cfg.out.join("loss.csv");
    write_csv(&loss_path, &loss_rows(&outcome.losses))?;

    let arch = tc.architecture(data.num_classes());
    let (final_net, _) = load_checkpoint_for(&final_path, &arch)?;
    let (weak_net, _) = load_checkpoint_for(&weak_path, &arch)?;
    Ok(TrainSummary {
        heldout_final: heldout_loss(&final_net, &data, &tc, cfg.seed, HELDOUT_SIZE)?,
        heldout_weak: heldout_loss(&weak_net, &data, &tc, cfg.seed, HELDOUT_SIZE)?,
        final_path,
        weak_path,
        loss_path,
        null_grad_steps: outcome.null_grad_steps,
    })
}

/// Reference points per class from `(seed, "reference") / class`.
pub fn reference_points(cfg: &RunConfig, data: &DataSource) -> Result<Vec<Vec<Vec2>>> {
    let root = RngStream::new(cfg.seed, "reference")?;
    (0..data.num_classes())
        .map(|k| data.sample(k, &mut root.fork(k as u64), cfg.metrics.reference_per_class))
        .collect()
}

pub fn reference_sets(cfg: &RunConfig, data: &DataSource) -> Result<Vec<ReferenceSet>> {
    let settings = cfg.metrics.settings();
    reference_points(cfg, data)?
        .iter()
        .map(|pts| ReferenceSet::build(pts, &settings))
        .collect()
}

/// Samples of every class in `classes` (others left empty).
pub fn sample_classes(
    net: &DenoiserNet,
    weak: Option<&DenoiserNet>,
    spec: GuidanceSpec,
    sampler: &SamplerConfig,
    classes: &[usize],
    n: usize,
    workers: usize,
) -> Result<Vec<Vec<Vec2>>> {
    let gd = GuidedDenoiser::new(net, weak, spec, sampler.seed)?;
    let mut out = vec![Vec::new(); net.num_classes()];
    for &k in classes {
        let slot = out
            .get_mut(k)
            .ok_or_else(|| Error::Usage(format!("class {k} out of range for a {}-class net", net.num_classes())))?;
        *slot = sample(&gd, sampler, Condition::Class(k), net.num_classes(), n, workers)?;
    }
    Ok(out)
}

/// Per-class rows followed by the combined row; classes without samples are skipped.
pub fn evaluate(label: &str, refs: &[ReferenceSet], per_class: &[Vec<Vec2>]) -> Result<(Vec<MetricRow>, MetricReport)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (k, (r, pts)) in refs.iter().zip(per_class).enumerate() {
        if pts.is_empty() {
            continue;
        }
        let rep = r.report(pts)?;
        rows.push(MetricRow::per_class(label, k, &rep));
        reports.push(rep);
    }
    let all = MetricReport::combine(&reports).map_err(|_| Error::Metric(format!("{label}: no samples to evaluate")))?;
    rows.push(MetricRow::combined(label, &all));
    Ok((rows, all))
}

fn load_main(cfg: &RunConfig, data: &DataSource, path: &Path) -> Result<DenoiserNet> {
    let arch = cfg.train_config().architecture(data.num_classes());
    Ok(load_checkpoint_for(path, &arch)?.0)
}

pub fn cmd_sample(cfg: &RunConfig, classes: &[usize], svg: bool) -> Result<PathBuf> {
    let data = cfg.data_source()?;
    let spec = cfg.guidance_spec();
    let weak_path = match (spec, &cfg.guidance.weak_ckpt) {
        (GuidanceSpec::Autoguidance { .. }, None) => {
            return Err(Error::Usage("--mode autoguide needs a weak checkpoint (--weak-ckpt PATH)".into()));
        }
        (_, p) => p.clone(),
    };
    let net = load_main(cfg, &data, &cfg.checkpoint_path())?;
    let weak = weak_path.map(|p| load_main(cfg, &data, &p)).transpose()?;
    let classes: Vec<usize> = if classes.is_empty() { (0..data.num_classes()).collect() } else { classes.to_vec() };
    write_resolved(cfg, "sample")?;
    let per_class = sample_classes(
        &net,
        weak.as_ref(),
        spec,
        &cfg.sampler_config(),
        &classes,
        cfg.sampler.samples_per_class,
        cfg.workers,
    )?;
    let path = cfg.out.join("samples.csv");
    write_csv(&path, &sample_rows(&per_class))?;
    if svg {
        let panels = [Panel::from_classes(spec.mode_name(), &per_class)];
        emit_scatter_svg(&panels, &Layout::fitting(&panels, 1), &cfg.out.join("samples.svg"))?;
    }
    Ok(path)
}

pub fn cmd_eval(cfg: &RunConfig, files: &[PathBuf]) -> Result<Vec<MetricRow>> {
    if files.is_empty() {
        return Err(Error::Usage("eval needs at least one samples CSV".into()));
    }
    let data = cfg.data_source()?;
    let sets = files
        .iter()
        .map(|f| {
            let rows: Vec<SampleRow> = read_csv(f)?;
            Ok((f, group_samples(&rows, data.num_classes(), f)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs = reference_sets(cfg, &data)?;
    write_resolved(cfg, "eval")?;
    let mut rows = Vec::new();
    for (f, per_class) in &sets {
        rows.extend(evaluate(&f.display().to_string(), &refs, per_class)?.0);
    }
    write_csv(&cfg.out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// Sampler seed of sweep point `index`.
pub fn sweep_point_seed(cfg: &RunConfig, index: usize) -> Result<u64> {
    Ok(RngStream::new(cfg.sampler_config().seed, "sweep-point")?.fork(index as u64).next_u64())
}

fn describe(point: &GridPoint, seed: u64) -> SweepRow {
    let (w, p, tau) = match point.spec {
        GuidanceSpec::Unguided => (None, None, None),
        GuidanceSpec::Cfg { w } | GuidanceSpec::Autoguidance { w } => (Some(w), None, None),
        GuidanceSpec::InSitu { w, p, .. } => (Some(w), Some(p), None),
        GuidanceSpec::ScoreTruncation { tau } => (None, None, Some(tau)),
    };
    SweepRow {
        index: point.index,
        mode: point.spec.mode_name().to_string(),
        w,
        p,
        tau,
        snapshot: point.snapshot,
        seed,
        status: String::new(),
        n_samples: None,
        outlier_rate: None,
        coverage: None,
        hist_kl: None,
        error: String::new(),
    }
}

fn row_path(cfg: &RunConfig, index: usize) -> PathBuf {
    cfg.out.join("sweep_rows").join(format!("{index:05}.csv"))
}

/// A finished row from an earlier run with the same grid point, if any.
fn cached_row(path: &Path, expect: &SweepRow) -> Option<SweepRow> {
    let rows: Vec<SweepRow> = read_csv(path).ok()?;
    let row = rows.into_iter().next()?;
    let same = row.index == expect.index
        && row.mode == expect.mode
        && row.w == expect.w
        && row.p == expect.p
        && row.tau == expect.tau
        && row.snapshot == expect.snapshot
        && row.seed == expect.seed;
    (same && row.status == "ok").then_some(row)
}

pub fn cmd_sweep(cfg: &RunConfig, log: Log<'_>) -> Result<Vec<SweepRow>> {
    let data = cfg.data_source()?;
    let grid = cfg.sweep_grid();
    let net = load_main(cfg, &data, &cfg.checkpoint_path())?;
    let needs_guide = grid.iter().any(|g| matches!(g.spec, GuidanceSpec::Autoguidance { .. }));
    let mut guides: Vec<(Option<usize>, DenoiserNet)> = Vec::new();
    if needs_guide {
        let mut steps: Vec<Option<usize>> = grid.iter().filter(|g| matches!(g.spec, GuidanceSpec::Autoguidance { .. })).map(|g| g.snapshot).collect();
        steps.sort_unstable();
        steps.dedup();
        for s in steps {
            let path = match s {
                Some(k) if k != cfg.train.weak_step => snapshot_path(&cfg.out, k),
                _ => cfg.out.join("weak.ckpt"),
            };
            guides.push((s, load_main(cfg, &data, &path)?));
        }
    }
    let refs = reference_sets(cfg, &data)?;
    write_resolved(cfg, "sweep")?;
    ensure_dir(&cfg.out.join("sweep_rows"))?;

    let base = cfg.sampler_config();
    let run_point = |point: &GridPoint| -> Result<SweepRow> {
        let seed = sweep_point_seed(cfg, point.index)?;
        let mut row = describe(point, seed);
        let path = row_path(cfg, point.index);
        if let Some(done) = cached_row(&path, &row) {
            return Ok(done);
        }
        let weak = guides.iter().find(|(s, _)| *s == point.snapshot).map(|(_, n)| n);
        let sampler = SamplerConfig { seed, ..base.clone() };
        let classes: Vec<usize> = (0..data.num_classes()).collect();
        let outcome = sample_classes(&net, weak, point.spec, &sampler, &classes, cfg.sampler.samples_per_class, 1)
            .and_then(|pc| evaluate("sweep", &refs, &pc));
        match outcome {
            Ok((_, rep)) => {
                row.status = "ok".into();
                row.n_samples = Some(rep.n_samples);
                row.outlier_rate = Some(rep.outlier_rate);
                row.coverage = Some(rep.coverage);
                row.hist_kl = Some(rep.hist_kl);
            }
            Err(e) => {
                row.status = "error".into();
                row.error = e.to_string();
            }
        }
        write_csv(&path, std::slice::from_ref(&row))?;
        Ok(row)
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let workers = cfg.workers.clamp(1, grid.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = grid.get(i) else { break };
                let r = run_point(point);
                results.lock().expect("sweep results lock")[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|r| r.expect("every grid point ran"))
        .collect::<Result<Vec<_>>>()?;
    for r in &rows {
        log(&format!("[{:>3}] {:<9} {}", r.index, r.mode, if r.status == "ok" { "ok" } else { &r.error }));
    }
    write_csv(&cfg.out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Output {
    pub svg_path: PathBuf,
    pub csv_path: PathBuf,
    /// Combined report per panel, in panel order.
    pub reports: Vec<(String, MetricReport)>,
}

/// Metric labels of the six panels.
pub const FIG2_LABELS: [&str; 6] = ["ground_truth", "unguided", "cfg", "truncate", "autoguide", "insitu"];

pub fn cmd_fig2(cfg: &RunConfig, train_first: bool, log: Log<'_>) -> Result<Fig2Output> {
    let data = cfg.data_source()?;
    let final_path = cfg.out.join("final.ckpt");
    let weak_path = cfg.out.join("weak.ckpt");
    if train_first {
        let s = cmd_train(cfg, log)?;
        log(&format!("held-out loss: final {:.5}, weak {:.5}", s.heldout_final, s.heldout_weak));
    } else if !final_path.exists() || !weak_path.exists() {
        return Err(Error::Usage(format!(
            "no trained checkpoints in {}; rerun with --train",
            cfg.out.display()
        )));
    }
    let net = load_main(cfg, &data, &final_path)?;
    let weak = load_main(cfg, &data, &weak_path)?;
    write_resolved(cfg, "fig2")?;

    let f = &cfg.fig2;
    let n = cfg.sampler.samples_per_class;
    let sampler = cfg.sampler_config();
    let classes: Vec<usize> = (0..data.num_classes()).collect();
    let ground_root = RngStream::new(cfg.seed, "ground-truth")?;
    let ground = (0..data.num_classes())
        .map(|k| data.sample(k, &mut ground_root.fork(k as u64), n))
        .collect::<Result<Vec<_>>>()?;
    let runs = [
        (GuidanceSpec::Unguided, None, FIG2_PANELS[1].to_string()),
        (GuidanceSpec::Cfg { w: f.cfg_w }, None, format!("{} w={}", FIG2_PANELS[2], f.cfg_w)),
        (GuidanceSpec::ScoreTruncation { tau: f.tau }, None, format!("{} tau={}", FIG2_PANELS[3], f.tau)),
        (GuidanceSpec::Autoguidance { w: f.autoguide_w }, Some(&weak), format!("{} w={}", FIG2_PANELS[4], f.autoguide_w)),
        (
            GuidanceSpec::InSitu { w: f.insitu_w, p: f.insitu_p, passes: 1 },
            None,
            format!("{} w={} p={}", FIG2_PANELS[5], f.insitu_w, f.insitu_p),
        ),
    ];
    let mut sets = vec![(FIG2_PANELS[0].to_string(), ground)];
    for (spec, guide, title) in runs {
        log(&format!("sampling {title}"));
        sets.push((title, sample_classes(&net, guide, spec, &sampler, &classes, n, cfg.workers)?));
    }

    let refs = reference_sets(cfg, &data)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for ((_, per_class), label) in sets.iter().zip(FIG2_LABELS) {
        let (r, all) = evaluate(label, &refs, per_class)?;
        rows.extend(r);
        reports.push((label.to_string(), all));
    }
    let csv_path = cfg.out.join("fig2.csv");
    write_csv(&csv_path, &rows)?;

    let panels: Vec<Panel> = sets.iter().map(|(t, pc)| Panel::from_classes(t.clone(), pc)).collect();
    let layout = Layout::fitting(&panels[..1], 3);
    let svg_path = cfg.out.join("fig2.svg");
    emit_scatter_svg(&panels, &layout, &svg_path)?;
    Ok(Fig2Output { svg_path, csv_path, reports })
}

pub fn cmd_oracle_check(seed: u64) -> Result<Vec<OracleCheck>> {
    run_all(seed)
}

#[derive(Debug, Parser)]
#[command(name = "isag", version, about = "Guided diffusion sampling on toy 2D distributions")]
pub struct Cli {
    /// TOML run configuration; all keys optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (config key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (config key `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (config key `workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GuidanceArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub weak_ckpt: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser and write final and weak checkpoints.
    Train,
    /// Sample from a trained checkpoint under one guidance mode.
    Sample {
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Class to sample; repeat for several. Default: all classes.
        #[arg(long = "class")]
        classes: Vec<usize>,
        /// Samples per class (config key `sampler.samples_per_class`).
        #[arg(long)]
        n: Option<usize>,
        /// Also write samples.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Score sample CSVs against the configured reference distribution.
    Eval {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Sample and score every point of the configured grid.
    Sweep,
    /// Six-panel guidance comparison figure and its metric table.
    Fig2 {
        /// Train first instead of loading checkpoints from the output directory.
        #[arg(long)]
        train: bool,
    },
    /// Run the analytic self-checks.
    OracleCheck,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides { seed: self.seed, out: self.out.clone(), workers: self.workers, ..Overrides::default() };
        if let Command::Sample { guidance: g, .. } = &self.command {
            o.mode = g.mode;
            o.w = g.w;
            o.p = g.p;
            o.tau = g.tau;
            o.weak_ckpt = g.weak_ckpt.clone();
        }
        o
    }

    fn config(&self) -> Result<RunConfig> {
        let o = self.overrides();
        let mut cfg = match (&self.command, &self.config) {
            (Command::Fig2 { .. }, None) => parse_config_with(FIG2_CONFIG, &o)?,
            (_, path) => load_config(path.as_deref(), &o)?,
        };
        if let Command::Sample { n: Some(n), .. } = self.command {
            if n == 0 {
                return Err(Error::Usage("--n must be positive".into()));
            }
            cfg.sampler.samples_per_class = n;
        }
        Ok(cfg)
    }
}

fn print_checks(checks: &[OracleCheck]) -> bool {
    println!("{:<40} {:>14}  {:<22} result", "check", "value", "bound");
    for c in checks {
        println!("{:<40} {:>14.6e}  {:<22} {}", c.name, c.value, c.bound, if c.passed { "PASS" } else { "FAIL" });
    }
    checks.iter().all(|c| c.passed)
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = (|| -> Result<bool> {
        let mut log = |m: &str| eprintln!("{m}");
        if let Command::OracleCheck = cli.command {
            let checks = cmd_oracle_check(cli.seed.unwrap_or(crate::oracle::DEFAULT_SEED))?;
            let ok = print_checks(&checks);
            if !ok {
                for c in checks.iter().filter(|c| !c.passed) {
                    eprintln!("oracle check failed: {}", c.name);
                }
            }
            return Ok(ok);
        }
        let cfg = cli.config()?;
        match &cli.command {
            Command::Train => {
                let s = cmd_train(&cfg, &mut log)?;
                println!("wrote {}, {}, {}", s.final_path.display(), s.weak_path.display(), s.loss_path.display());
                println!("held-out loss: final {:.6}, weak {:.6}", s.heldout_final, s.heldout_weak);
            }
            Command::Sample { classes, svg, .. } => {
                println!("wrote {}", cmd_sample(&cfg, classes, *svg)?.display());
            }
            Command::Eval { files } => {
                for r in cmd_eval(&cfg, files)? {
                    println!(
                        "{} class {}: outlier_rate {:.5} coverage {:.5} hist_kl {:.5}",
                        r.label, r.class, r.outlier_rate, r.coverage, r.hist_kl
                    );
                }
            }
            Command::Sweep => {
                let rows = cmd_sweep(&cfg, &mut log)?;
                let failed = rows.iter().filter(|r| r.status != "ok").count();
                println!("wrote {} ({} rows, {failed} failed)", cfg.out.join("sweep.csv").display(), rows.len());
                return Ok(failed == 0);
            }
            Command::Fig2 { train } => {
                let out = cmd_fig2(&cfg, *train, &mut log)?;
                for (label, r) in &out.reports {
                    println!("{label:<13} outlier_rate {:.5} coverage {:.5} hist_kl {:.5}", r.outlier_rate, r.coverage, r.hist_kl);
                }
                println!("wrote {} and {}", out.svg_path.display(), out.csv_path.display());
            }
            Command::OracleCheck => unreachable!("handled above"),
        }
        Ok(true)
    })();
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
