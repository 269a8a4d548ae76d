//! Analytic self-checks run by `isag oracle-check`.

use crate::distributions::{GaussianComponent, GaussianMixture};
use crate::error::Result;
use crate::guidance::{denoise_autoguidance, GuidanceSpec, GuidedDenoiser, StepContext, Denoiser};
use crate::linalg::{Mat2, Vec2};
use crate::metrics::{hist_kl, Grid};
use crate::nn::{Architecture, Condition, DenoiserNet, EvalMode};
use crate::rng::RngStream;
use crate::sampler::{initial_noise, integrate, sample, Integrator, SamplerConfig, SigmaSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl OracleCheck {
    fn below(name: &'static str, value: f64, limit: f64) -> Self {
        Self { name, value, bound: format!("< {limit:e}"), passed: value < limit }
    }

    fn within(name: &'static str, value: f64, lo: f64, hi: f64) -> Self {
        Self { name, value, bound: format!("in [{lo}, {hi}]"), passed: (lo..=hi).contains(&value) }
    }
}

/// A mixture of 1 to 4 components with random weights, means in
/// `[-2, 2]^2` and covariances `L L^T` bounded away from singular.
pub fn random_mixture(stream: &mut RngStream) -> GaussianMixture {
    let k = 1 + stream.below(4) as usize;
    let raw: Vec<f64> = (0..k).map(|_| 0.1 + stream.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .map(|w| {
            let l = Mat2::new(0.1 + stream.uniform(), 0.0, stream.uniform() - 0.5, 0.1 + stream.uniform());
            GaussianComponent {
                weight: w / total,
                mean: Vec2::new(4.0 * stream.uniform() - 2.0, 4.0 * stream.uniform() - 2.0),
                cov: l.mul_mat(l.transpose()),
            }
        })
        .collect();
    GaussianMixture::new(comps).expect("valid by construction")
}

/// Three-component mixture used for the sampler checks.
pub fn test_mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        GaussianComponent { weight: 0.5, mean: Vec2::new(-1.0, 0.0), cov: Mat2::new(0.25, 0.05, 0.05, 0.16) },
        GaussianComponent { weight: 0.3, mean: Vec2::new(1.0, 0.5), cov: Mat2::new(0.09, 0.0, 0.0, 0.36) },
        GaussianComponent { weight: 0.2, mean: Vec2::new(0.3, -1.2), cov: Mat2::new(0.2, -0.05, -0.05, 0.1) },
    ])
    .expect("valid mixture")
}

/// Max relative error between `(D - x) / sigma^2` and the analytic score.
pub fn score_identity_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rs = RngStream::new(seed, "oracle-score")?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let g = random_mixture(&mut rs);
        let x = Vec2::new(6.0 * rs.uniform() - 3.0, 6.0 * rs.uniform() - 3.0);
        let sigma = 10f64.powf(4.0 * rs.uniform() - 2.0);
        let via_d = (g.denoise(x, sigma)? - x) * (1.0 / (sigma * sigma));
        let s = g.score(x, sigma)?;
        worst = worst.max((via_d - s).norm() / s.norm());
    }
    Ok(worst)
}

/// Max elementwise relative error of backprop against central differences
/// on `nets` random networks, batches of 8 with replayed dropout masks.
pub fn gradient_error(nets: usize, seed: u64) -> Result<f64> {
    let mut rs = RngStream::new(seed, "oracle-grad")?;
    let mut worst: f64 = 0.0;
    for k in 0..nets {
        let depth = 1 + rs.below(3) as usize;
        let hidden: Vec<usize> = (0..depth).map(|_| 4 + rs.below(29) as usize).collect();
        let arch = Architecture::with_hidden(&hidden, 3, 4 + 2 * rs.below(3) as usize, 2 + rs.below(5) as usize);
        let net = DenoiserNet::new(arch, rs.next_u64())?;
        let xs: Vec<Vec2> = (0..8).map(|_| Vec2::new(rs.gaussian(), rs.gaussian())).collect();
        let ss: Vec<f64> = (0..8).map(|_| (1.2 * rs.gaussian() - 1.2).exp()).collect();
        let cs: Vec<Condition> = (0..8)
            .map(|i| if i % 4 == 3 { Condition::Null } else { Condition::Class(rs.below(3) as usize) })
            .collect();
        let gs: Vec<Vec2> = (0..8).map(|_| Vec2::new(rs.gaussian(), rs.gaussian())).collect();
        let masks = RngStream::new(seed, "oracle-grad-masks")?.fork(k as u64);
        let streams = || (0..8u64).map(|i| masks.fork(i)).collect::<Vec<_>>();
        let eval = |n: &DenoiserNet| -> Result<f64> {
            let mut s = streams();
            let t = n.forward_batch(&xs, &ss, &cs, EvalMode::Stochastic { p: 0.2, streams: &mut s })?;
            Ok(t.outputs().iter().zip(&gs).map(|(d, g)| d.dot(*g)).sum())
        };
        let mut s = streams();
        let tape = net.forward_batch(&xs, &ss, &cs, EvalMode::Stochastic { p: 0.2, streams: &mut s })?;
        let grad = net.backward(&tape, &gs)?;
        let h = 1e-5;
        for i in 0..net.params().len() {
            let mut plus = net.params().to_vec();
            plus[i] += h;
            let mut minus = net.params().to_vec();
            minus[i] -= h;
            let f = |p: Vec<f64>| DenoiserNet::from_params(net.architecture().clone(), p).and_then(|n| eval(&n));
            let fd = (f(plus)? - f(minus)?) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Count of degenerate-guidance identities violated bitwise: `w = 0` in
/// every guided mode, `p = 0` in-situ, and autoguidance with identical nets.
pub fn degenerate_violations(seed: u64) -> Result<usize> {
    let mut rs = RngStream::new(seed, "oracle-degenerate")?;
    let net = DenoiserNet::new(Architecture::with_hidden(&[32, 32], 2, 16, 8), rs.next_u64())?;
    let weak = DenoiserNet::new(Architecture::with_hidden(&[32, 32], 2, 16, 8), rs.next_u64())?;
    let xs: Vec<Vec2> = (0..64).map(|_| Vec2::new(2.0 * rs.gaussian(), 2.0 * rs.gaussian())).collect();
    let ids: Vec<u64> = (0..64).collect();
    let mut bad = 0;
    for &sigma in &[0.01, 0.3, 2.0, 40.0] {
        for class in 0..2 {
            let ctx = StepContext { cond: Condition::Class(class), sample_ids: &ids, step: 3 };
            let run = |spec, weak: Option<&DenoiserNet>| -> Result<Vec<Vec2>> {
                GuidedDenoiser::new(&net, weak, spec, seed)?.denoise(&xs, sigma, &ctx)
            };
            let good = run(GuidanceSpec::Unguided, None)?;
            let same = |a: &[Vec2]| a.iter().zip(&good).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits());
            for spec in [
                GuidanceSpec::Cfg { w: 0.0 },
                GuidanceSpec::InSitu { w: 0.0, p: 0.1, passes: 1 },
                GuidanceSpec::InSitu { w: 2.0, p: 0.0, passes: 1 },
                GuidanceSpec::InSitu { w: 2.0, p: 0.0, passes: 3 },
            ] {
                bad += usize::from(!same(&run(spec, None)?));
            }
            bad += usize::from(!same(&run(GuidanceSpec::Autoguidance { w: 0.0 }, Some(&weak))?));
            bad += usize::from(!same(&run(GuidanceSpec::Autoguidance { w: 1.5 }, Some(&net))?));
            let direct: Vec<Vec2> = xs
                .iter()
                .map(|&x| denoise_autoguidance(&net, &net, x, sigma, Condition::Class(class), 3.0))
                .collect::<Result<_>>()?;
            bad += usize::from(!same(&direct));
        }
    }
    Ok(bad)
}

/// Empirical order `log2(e_N / e_2N)` of `integrator` on the test mixture,
/// errors measured against a 1024-step Heun solution.
pub fn convergence_order(integrator: Integrator, n: usize, samples: usize, seed: u64) -> Result<f64> {
    let g = test_mixture();
    let ids: Vec<u64> = (0..samples as u64).collect();
    let base = SamplerConfig { seed, ..SamplerConfig::default() };
    let x0 = ids
        .iter()
        .map(|&i| initial_noise(&base, Condition::Class(0), 1, i))
        .collect::<Result<Vec<_>>>()?;
    let run = |steps: usize, integ: Integrator| -> Result<Vec<Vec2>> {
        let cfg = SamplerConfig { steps, integrator: integ, ..base.clone() };
        integrate(&g, x0.clone(), &ids, Condition::Class(0), &SigmaSchedule::new(&cfg)?, integ)
    };
    let reference = run(1024, Integrator::Heun)?;
    let err = |xs: Vec<Vec2>| xs.iter().zip(&reference).map(|(a, b)| (*a - *b).norm()).sum::<f64>() / samples as f64;
    let coarse = err(run(n, integrator)?);
    let fine = err(run(2 * n, integrator)?);
    Ok((coarse / fine).log2())
}

/// Mean error and worst relative covariance error of `n` unguided samples
/// from the exact denoiser of an isotropic Gaussian.
pub fn gaussian_recovery(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mean = Vec2::new(0.4, -0.3);
    let g = GaussianMixture::isotropic(mean, 0.25)?;
    let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
    let xs = sample(&g, &cfg, Condition::Class(0), 1, n, 1)?;
    let m = xs.iter().fold(Vec2::ZERO, |a, &x| a + x) * (1.0 / n as f64);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for x in &xs {
        let d = *x - m;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let k = 1.0 / (n - 1) as f64;
    let var = 0.25 * 0.25;
    let cov_err = [(sxx * k - var).abs() / var, (sxy * k).abs() / var, (syy * k - var).abs() / var]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(((m - mean).norm(), cov_err))
}

/// Histogram KL of `n` unguided samples of the test mixture against `n`
/// exact draws, on a 64-bin grid of mean +- 4 standard deviations.
pub fn mixture_kl(n: usize, seed: u64) -> Result<f64> {
    let g = test_mixture();
    let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
    let xs = sample(&g, &cfg, Condition::Class(0), 1, n, 1)?;
    let reference = g.sample(&mut RngStream::new(seed, "oracle-kl-reference")?, n);
    let (m, c) = (g.mean(), g.covariance());
    let r = 4.0 * c.a.max(c.d).sqrt();
    let grid = Grid::new(64, Vec2::new(m.x - r, m.y - r), Vec2::new(m.x + r, m.y + r))?;
    hist_kl(&xs, &reference, &grid)
}

/// Seed used by `oracle-check` when none is given.
pub const DEFAULT_SEED: u64 = 15;

/// The full suite, in reporting order.
pub fn run_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let (mean_err, cov_err) = gaussian_recovery(4096, seed)?;
    Ok(vec![
        OracleCheck::below("score identity max rel err", score_identity_error(100, seed)?, 1e-10),
        OracleCheck::below("backprop vs finite diff max rel err", gradient_error(5, seed)?, 1e-4),
        OracleCheck::below("degenerate guidance violations", degenerate_violations(seed)? as f64, 0.5),
        OracleCheck::within("heun order", convergence_order(Integrator::Heun, 32, 512, seed)?, 1.7, 2.3),
        OracleCheck::within("euler order", convergence_order(Integrator::Euler, 32, 512, seed)?, 0.8, 1.2),
        OracleCheck::below("gaussian mean error", mean_err, 0.01),
        OracleCheck::below("gaussian covariance rel err", cov_err, 0.03),
        OracleCheck::below("mixture histogram KL", mixture_kl(100_000, seed)?, 0.02),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        assert!(score_identity_error(20, 1).unwrap() < 1e-10);
        assert!(gradient_error(1, 2).unwrap() < 1e-4);
        assert_eq!(degenerate_violations(3).unwrap(), 0);
    }

    #[test]
    fn random_mixtures_are_valid_and_varied() {
        let mut rs = RngStream::new(0, "mixtures").unwrap();
        let sizes: Vec<usize> = (0..40).map(|_| random_mixture(&mut rs).components().len()).collect();
        assert!((1..=4).all(|k| sizes.contains(&k)));
    }
}
