//! Deterministic probability-flow ODE sampling, `dx/dsigma = (x - D(x; sigma)) / sigma`.

use crate::error::{Error, Result};
use crate::guidance::{Denoiser, StepContext};
use crate::linalg::Vec2;
use crate::nn::Condition;
use crate::rng::RngStream;

/// Trajectories are integrated in fixed chunks of this many samples, so the
/// batch composition (and therefore every floating-point result) does not
/// depend on the worker count.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Heun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub integrator: Integrator,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            integrator: Integrator::Heun,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("sampler.steps must be >= 2, got {}", self.steps)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sampler.sigma_min < sampler.sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("sampler.rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Strictly decreasing noise levels from `sigma_max` to `sigma_min`,
/// optionally followed by a final step to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    pub levels: Vec<f64>,
    pub to_zero: bool,
}

impl SigmaSchedule {
    /// `sigma_i = (max^(1/rho) + i/(N-1) (min^(1/rho) - max^(1/rho)))^rho`,
    /// with both endpoints pinned exactly.
    pub fn new(cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.steps;
        let inv = 1.0 / cfg.rho;
        let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
        let mut levels: Vec<f64> = (0..n)
            .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho))
            .collect();
        levels[0] = cfg.sigma_max;
        levels[n - 1] = cfg.sigma_min;
        if levels.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("sigma schedule is not strictly decreasing".into()));
        }
        Ok(Self { levels, to_zero: true })
    }

    /// Consecutive `(from, to)` pairs, including the final step to zero.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let mut s: Vec<(f64, f64)> = self.levels.windows(2).map(|w| (w[0], w[1])).collect();
        if self.to_zero {
            s.push((*self.levels.last().unwrap(), 0.0));
        }
        s
    }
}

fn non_finite(xs: &[Vec2], ids: &[u64], step: usize, what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Sampling {
            sample: ids.get(i).copied().unwrap_or(i as u64) as usize,
            step,
            message: format!("non-finite {what}"),
        }),
        None => Ok(()),
    }
}

/// One integration step of a batch from `sigma_from` to `sigma_to`. Heun
/// falls back to Euler when `sigma_to == 0`.
pub fn ode_step(
    gd: &dyn Denoiser,
    xs: &[Vec2],
    sigma_from: f64,
    sigma_to: f64,
    integrator: Integrator,
    ctx: &StepContext<'_>,
) -> Result<Vec<Vec2>> {
    if !(sigma_from > 0.0) || !(sigma_to >= 0.0) || sigma_to > sigma_from {
        return Err(Error::Domain(format!(
            "ode step needs sigma_from > 0 and 0 <= sigma_to <= sigma_from, got {sigma_from} -> {sigma_to}"
        )));
    }
    if sigma_to == sigma_from {
        return Ok(xs.to_vec());
    }
    let h = sigma_to - sigma_from;
    let d = gd.denoise(xs, sigma_from, ctx)?;
    non_finite(&d, ctx.sample_ids, ctx.step, "denoiser output")?;
    let slope: Vec<Vec2> = xs.iter().zip(&d).map(|(&x, &d)| (x - d) * (1.0 / sigma_from)).collect();
    let pred: Vec<Vec2> = xs.iter().zip(&slope).map(|(&x, &s)| x + s * h).collect();
    if integrator == Integrator::Euler || sigma_to == 0.0 {
        non_finite(&pred, ctx.sample_ids, ctx.step, "state")?;
        return Ok(pred);
    }
    let d2 = gd.denoise(&pred, sigma_to, ctx)?;
    non_finite(&d2, ctx.sample_ids, ctx.step, "denoiser output")?;
    let out: Vec<Vec2> = xs
        .iter()
        .zip(&slope)
        .zip(pred.iter().zip(&d2))
        .map(|((&x, &s1), (&p, &d2))| {
            let s2 = (p - d2) * (1.0 / sigma_to);
            x + (s1 + s2) * (0.5 * h)
        })
        .collect();
    non_finite(&out, ctx.sample_ids, ctx.step, "state")?;
    Ok(out)
}

/// Integrate a batch of states through `schedule`; step `i` of the schedule
/// is reported to the denoiser as step index `i`.
pub fn integrate(
    gd: &dyn Denoiser,
    mut xs: Vec<Vec2>,
    ids: &[u64],
    cond: Condition,
    schedule: &SigmaSchedule,
    integrator: Integrator,
) -> Result<Vec<Vec2>> {
    for (step, (from, to)) in schedule.steps().into_iter().enumerate() {
        let ctx = StepContext { cond, sample_ids: ids, step };
        xs = ode_step(gd, &xs, from, to, integrator, &ctx)?;
    }
    Ok(xs)
}

/// Initial state of sample `id`: `sigma_max * N(0, I)` from
/// `(seed, "sampler-init") / class / id`.
pub fn initial_noise(cfg: &SamplerConfig, cond: Condition, num_classes: usize, id: u64) -> Result<Vec2> {
    let class = match cond {
        Condition::Class(k) => k as u64,
        Condition::Null => num_classes as u64,
    };
    let mut s = RngStream::new(cfg.seed, "sampler-init")?.fork(class).fork(id);
    Ok(Vec2::new(s.gaussian(), s.gaussian()) * cfg.sigma_max)
}

/// Generate `n` samples of condition `cond` using up to `workers` threads.
/// Output is bit-identical for every worker count.
pub fn sample(
    gd: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: Condition,
    num_classes: usize,
    n: usize,
    workers: usize,
) -> Result<Vec<Vec2>> {
    if n == 0 {
        return Err(Error::Usage("need at least one sample".into()));
    }
    let schedule = SigmaSchedule::new(cfg)?;
    let chunks: Vec<(u64, u64)> = (0..n as u64)
        .step_by(CHUNK)
        .map(|start| (start, (start + CHUNK as u64).min(n as u64)))
        .collect();
    let run_chunk = |&(start, end): &(u64, u64)| -> Result<Vec<Vec2>> {
        let ids: Vec<u64> = (start..end).collect();
        let xs = ids
            .iter()
            .map(|&i| initial_noise(cfg, cond, num_classes, i))
            .collect::<Result<Vec<_>>>()?;
        integrate(gd, xs, &ids, cond, &schedule, cfg.integrator)
    };
    let workers = workers.clamp(1, chunks.len());
    let results: Vec<Result<Vec<Vec2>>> = if workers == 1 {
        chunks.iter().map(run_chunk).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Vec2>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run_chunk = &run_chunk;
                    scope.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|c| (c, run_chunk(&chunks[c])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("sampling worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk ran")).collect()
    };
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GaussianComponent, GaussianMixture};
    use crate::guidance::FnDenoiser;
    use crate::linalg::Mat2;

    fn ctx(ids: &[u64]) -> StepContext<'_> {
        StepContext { cond: Condition::Class(0), sample_ids: ids, step: 0 }
    }

    #[test]
    fn schedule_endpoints_and_middle() {
        let cfg = SamplerConfig { steps: 3, ..SamplerConfig::default() };
        let s = SigmaSchedule::new(&cfg).unwrap();
        assert_eq!(s.levels[0], 80.0);
        assert_eq!(s.levels[2], 0.002);
        // 50-digit evaluation of the closed form.
        let want = 2.515_218_976_147_158_6;
        assert!((s.levels[1] - want).abs() / want < 1e-14, "{}", s.levels[1]);
        let d = SigmaSchedule::new(&SamplerConfig::default()).unwrap();
        assert_eq!(d.levels.len(), 64);
        assert!(d.levels.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(d.steps().len(), 64);
        assert_eq!(*d.steps().last().unwrap(), (0.002, 0.0));
    }

    #[test]
    fn invalid_sampler_configs() {
        for bad in [
            SamplerConfig { steps: 1, ..SamplerConfig::default() },
            SamplerConfig { sigma_min: 0.0, ..SamplerConfig::default() },
            SamplerConfig { sigma_min: 100.0, ..SamplerConfig::default() },
            SamplerConfig { rho: 0.0, ..SamplerConfig::default() },
        ] {
            assert!(matches!(SigmaSchedule::new(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_length_step_is_identity() {
        let d = FnDenoiser(|_x: Vec2, _s: f64| Vec2::new(5.0, 5.0));
        let xs = [Vec2::new(1.0, -2.0)];
        let out = ode_step(&d, &xs, 0.5, 0.5, Integrator::Heun, &ctx(&[0])).unwrap();
        assert_eq!(out, xs);
    }

    #[test]
    fn heun_is_exact_for_constant_denoiser() {
        let d = FnDenoiser(|_x: Vec2, _s: f64| Vec2::ZERO);
        let out = ode_step(&d, &[Vec2::new(1.0, 1.0)], 1.0, 0.5, Integrator::Heun, &ctx(&[0])).unwrap();
        assert!((out[0] - Vec2::new(0.5, 0.5)).norm() < 1e-15);
        let to_zero = ode_step(&d, &[Vec2::new(1.0, 1.0)], 1.0, 0.0, Integrator::Heun, &ctx(&[0])).unwrap();
        assert!(to_zero[0].norm() < 1e-15);
    }

    #[test]
    fn non_finite_is_reported_with_sample_index() {
        let d = FnDenoiser(|x: Vec2, _s: f64| if x.x > 0.0 { Vec2::new(f64::NAN, 0.0) } else { x });
        let err = ode_step(&d, &[Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)], 1.0, 0.5, Integrator::Euler, &ctx(&[40, 41]))
            .unwrap_err();
        assert!(matches!(err, Error::Sampling { sample: 41, step: 0, .. }), "{err}");
    }

    #[test]
    fn point_mass_samples_collapse() {
        let mu = Vec2::new(0.4, -0.3);
        let g = GaussianMixture::new(vec![GaussianComponent { weight: 1.0, mean: mu, cov: Mat2::new(0.0, 0.0, 0.0, 0.0) }]).unwrap();
        let cfg = SamplerConfig { steps: 32, seed: 1, ..SamplerConfig::default() };
        for p in sample(&g, &cfg, Condition::Class(0), 1, 300, 1).unwrap() {
            assert!((p - mu).norm() < 1e-3, "{p:?}");
        }
    }

    #[test]
    fn worker_count_does_not_change_samples() {
        let g = GaussianMixture::isotropic(Vec2::new(0.1, 0.0), 0.5).unwrap();
        let cfg = SamplerConfig { steps: 8, seed: 2, ..SamplerConfig::default() };
        let one = sample(&g, &cfg, Condition::Class(0), 1, 700, 1).unwrap();
        let three = sample(&g, &cfg, Condition::Class(0), 1, 700, 3).unwrap();
        assert_eq!(one, three);
    }
}
