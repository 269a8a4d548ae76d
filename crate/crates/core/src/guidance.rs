//! Guidance algebra over denoiser outputs.
//!
//! Every guided mode has the form `good + w * (good - bad)`; the modes differ
//! in where `bad` comes from: the null-token branch (CFG), an early snapshot
//! (autoguidance), or a dropout-active pass of the same network (in-situ).

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::nn::{check_dropout_p, Condition, DenoiserNet, EvalMode};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceSpec {
    Unguided,
    Cfg { w: f64 },
    Autoguidance { w: f64 },
    /// `passes` stochastic evaluations are averaged into the bad branch.
    InSitu { w: f64, p: f64, passes: usize },
    ScoreTruncation { tau: f64 },
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        let check_w = |w: f64| {
            if w >= 0.0 && w.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("guidance weight must be finite and >= 0, got {w}")))
            }
        };
        match *self {
            GuidanceSpec::Unguided => Ok(()),
            GuidanceSpec::Cfg { w } | GuidanceSpec::Autoguidance { w } => check_w(w),
            GuidanceSpec::InSitu { w, p, passes } => {
                check_w(w)?;
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("dropout probability p must lie in [0, 1), got {p}")));
                }
                if passes == 0 {
                    return Err(Error::Config("in-situ guidance needs at least one stochastic pass".into()));
                }
                Ok(())
            }
            GuidanceSpec::ScoreTruncation { tau } => {
                if tau > 0.0 && tau.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("truncation threshold tau must be positive, got {tau}")))
                }
            }
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            GuidanceSpec::Unguided => "unguided",
            GuidanceSpec::Cfg { .. } => "cfg",
            GuidanceSpec::Autoguidance { .. } => "autoguide",
            GuidanceSpec::InSitu { .. } => "insitu",
            GuidanceSpec::ScoreTruncation { .. } => "truncate",
        }
    }

    pub fn weight(&self) -> Option<f64> {
        match *self {
            GuidanceSpec::Cfg { w } | GuidanceSpec::Autoguidance { w } | GuidanceSpec::InSitu { w, .. } => Some(w),
            _ => None,
        }
    }
}

/// `(d - x) / sigma^2`.
pub fn score_from_denoiser(d: Vec2, x: Vec2, sigma: f64) -> Result<Vec2> {
    check_sigma(sigma)?;
    Ok((d - x) * (1.0 / (sigma * sigma)))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// `good + w * (good - bad)`.
#[inline]
pub fn extrapolate(good: Vec2, bad: Vec2, w: f64) -> Vec2 {
    good + (good - bad) * w
}

/// CFG: conditional and null-token branches of the same network, both in `mode`.
pub fn denoise_cfg(net: &DenoiserNet, x: Vec2, sigma: f64, c: Condition, w: f64, mut mode: EvalMode<'_>) -> Result<Vec2> {
    if c == Condition::Null {
        return Err(Error::Usage("classifier-free guidance needs a class condition, got the null token".into()));
    }
    let cond = net.forward(x, sigma, c, mode.reborrow())?;
    let uncond = net.forward(x, sigma, Condition::Null, mode)?;
    Ok(extrapolate(cond, uncond, w))
}

pub(crate) fn check_same_architecture(good: &DenoiserNet, bad: &DenoiserNet) -> Result<()> {
    if good.architecture() != bad.architecture() {
        return Err(Error::Config(format!(
            "autoguidance nets differ in architecture: {:?} vs {:?}",
            good.architecture().widths,
            bad.architecture().widths
        )));
    }
    Ok(())
}

/// Autoguidance with a separately stored weak network; both deterministic.
pub fn denoise_autoguidance(good: &DenoiserNet, bad: &DenoiserNet, x: Vec2, sigma: f64, c: Condition, w: f64) -> Result<Vec2> {
    check_same_architecture(good, bad)?;
    let g = good.forward(x, sigma, c, EvalMode::Deterministic)?;
    let b = bad.forward(x, sigma, c, EvalMode::Deterministic)?;
    Ok(extrapolate(g, b, w))
}

/// In-situ autoguidance: the bad branch is one dropout-active pass of `net`
/// with masks from `stream`. With `w == 0` or `p == 0` the stream is not touched.
pub fn denoise_insitu(net: &DenoiserNet, x: Vec2, sigma: f64, c: Condition, w: f64, p: f64, stream: &mut RngStream) -> Result<Vec2> {
    check_dropout_p(p)?;
    let good = net.forward(x, sigma, c, EvalMode::Deterministic)?;
    if w == 0.0 || p == 0.0 {
        return Ok(good);
    }
    let bad = net.forward(x, sigma, c, EvalMode::Stochastic { p, streams: std::slice::from_mut(stream) })?;
    Ok(extrapolate(good, bad, w))
}

/// Clip the implied score to norm `tau / sigma` and map back to a denoiser value.
pub fn truncate_denoised(d: Vec2, x: Vec2, sigma: f64, tau: f64) -> Result<Vec2> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("truncation threshold must be positive, got {tau}")));
    }
    let s = score_from_denoiser(d, x, sigma)?;
    let norm = s.norm();
    if norm * sigma <= tau {
        return Ok(d);
    }
    let clipped = s * (tau / (sigma * norm));
    Ok(x + clipped * (sigma * sigma))
}

pub fn denoise_truncated(net: &DenoiserNet, x: Vec2, sigma: f64, c: Condition, tau: f64) -> Result<Vec2> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("truncation threshold must be positive, got {tau}")));
    }
    let d = net.forward(x, sigma, c, EvalMode::Deterministic)?;
    truncate_denoised(d, x, sigma, tau)
}

/// Where a batch evaluation sits in the sampling run; used to derive
/// per-sample mask streams.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub cond: Condition,
    /// Global index of every row in the batch.
    pub sample_ids: &'a [u64],
    /// ODE step index. Both stages of a Heun step share it.
    pub step: usize,
}

/// Anything that maps a batch of noisy points at a common noise level to
/// denoised estimates.
pub trait Denoiser: Sync {
    fn denoise(&self, xs: &[Vec2], sigma: f64, ctx: &StepContext<'_>) -> Result<Vec<Vec2>>;
}

impl Denoiser for crate::distributions::GaussianMixture {
    fn denoise(&self, xs: &[Vec2], sigma: f64, _ctx: &StepContext<'_>) -> Result<Vec<Vec2>> {
        xs.iter().map(|&x| crate::distributions::GaussianMixture::denoise(self, x, sigma)).collect()
    }
}

/// Denoiser given as a plain function of `(x, sigma)`.
pub struct FnDenoiser<F>(pub F);

impl<F: Fn(Vec2, f64) -> Vec2 + Sync> Denoiser for FnDenoiser<F> {
    fn denoise(&self, xs: &[Vec2], sigma: f64, _ctx: &StepContext<'_>) -> Result<Vec<Vec2>> {
        Ok(xs.iter().map(|&x| (self.0)(x, sigma)).collect())
    }
}

/// A trained network (plus optional weak network) under one guidance mode.
pub struct GuidedDenoiser<'a> {
    net: &'a DenoiserNet,
    weak: Option<&'a DenoiserNet>,
    spec: GuidanceSpec,
    masks: RngStream,
}

impl<'a> GuidedDenoiser<'a> {
    /// `mask_seed` roots the in-situ dropout streams; the mask stream of a
    /// row is `(mask_seed, "insitu-masks") / class / sample / step / pass`,
    /// where the null token counts as class `num_classes`.
    pub fn new(net: &'a DenoiserNet, weak: Option<&'a DenoiserNet>, spec: GuidanceSpec, mask_seed: u64) -> Result<Self> {
        spec.validate()?;
        match (&spec, weak) {
            (GuidanceSpec::Autoguidance { .. }, None) => {
                return Err(Error::Usage("autoguidance needs a weak checkpoint".into()));
            }
            (GuidanceSpec::Autoguidance { .. }, Some(w)) => check_same_architecture(net, w)?,
            _ => {}
        }
        Ok(Self {
            net,
            weak,
            spec,
            masks: RngStream::new(mask_seed, "insitu-masks")?,
        })
    }

    pub fn spec(&self) -> &GuidanceSpec {
        &self.spec
    }

    fn mask_streams(&self, ctx: &StepContext<'_>, pass: usize) -> Vec<RngStream> {
        let class = match ctx.cond {
            Condition::Class(k) => k as u64,
            Condition::Null => self.net.num_classes() as u64,
        };
        let base = self.masks.fork(class);
        ctx.sample_ids
            .iter()
            .map(|&i| base.fork(i).fork(ctx.step as u64).fork(pass as u64))
            .collect()
    }

    fn det(&self, net: &DenoiserNet, xs: &[Vec2], sigma: f64, cond: Condition) -> Result<Vec<Vec2>> {
        let n = xs.len();
        Ok(net
            .forward_batch(xs, &vec![sigma; n], &vec![cond; n], EvalMode::Deterministic)?
            .into_outputs())
    }
}

impl Denoiser for GuidedDenoiser<'_> {
    fn denoise(&self, xs: &[Vec2], sigma: f64, ctx: &StepContext<'_>) -> Result<Vec<Vec2>> {
        let n = xs.len();
        if ctx.sample_ids.len() != n {
            return Err(Error::Internal(format!("{} sample ids for {} rows", ctx.sample_ids.len(), n)));
        }
        let combine = |good: Vec<Vec2>, bad: Vec<Vec2>, w: f64| -> Vec<Vec2> {
            good.iter().zip(&bad).map(|(&g, &b)| extrapolate(g, b, w)).collect()
        };
        match self.spec {
            GuidanceSpec::Unguided => self.det(self.net, xs, sigma, ctx.cond),
            GuidanceSpec::Cfg { w } => {
                if ctx.cond == Condition::Null {
                    return Err(Error::Usage("classifier-free guidance needs a class condition".into()));
                }
                let good = self.det(self.net, xs, sigma, ctx.cond)?;
                if w == 0.0 {
                    return Ok(good);
                }
                let bad = self.det(self.net, xs, sigma, Condition::Null)?;
                Ok(combine(good, bad, w))
            }
            GuidanceSpec::Autoguidance { w } => {
                let good = self.det(self.net, xs, sigma, ctx.cond)?;
                if w == 0.0 {
                    return Ok(good);
                }
                let weak = self.weak.expect("checked in GuidedDenoiser::new");
                let bad = self.det(weak, xs, sigma, ctx.cond)?;
                Ok(combine(good, bad, w))
            }
            GuidanceSpec::InSitu { w, p, passes } => {
                let good = self.det(self.net, xs, sigma, ctx.cond)?;
                if w == 0.0 || p == 0.0 {
                    return Ok(good);
                }
                let mut bad = vec![Vec2::ZERO; n];
                for pass in 0..passes {
                    let mut streams = self.mask_streams(ctx, pass);
                    let out = self
                        .net
                        .forward_batch(xs, &vec![sigma; n], &vec![ctx.cond; n], EvalMode::Stochastic { p, streams: &mut streams })?
                        .into_outputs();
                    for (b, o) in bad.iter_mut().zip(out) {
                        *b = *b + o;
                    }
                }
                if passes > 1 {
                    let inv = 1.0 / passes as f64;
                    for b in &mut bad {
                        *b = *b * inv;
                    }
                }
                Ok(combine(good, bad, w))
            }
            GuidanceSpec::ScoreTruncation { tau } => self
                .det(self.net, xs, sigma, ctx.cond)?
                .into_iter()
                .zip(xs)
                .map(|(d, &x)| truncate_denoised(d, x, sigma, tau))
                .collect(),
        }
    }
}

/// A probe point for degradation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub x: Vec2,
    pub sigma: f64,
    pub cond: Condition,
}

/// Mean `|D_good - D_bad|` over the probes, one dropout pass per probe with
/// masks from `stream.fork(i)`.
pub fn degradation_gap(net: &DenoiserNet, probes: &[Probe], p: f64, stream: &RngStream) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Metric("degradation gap over zero probes".into()));
    }
    check_dropout_p(p)?;
    let xs: Vec<Vec2> = probes.iter().map(|q| q.x).collect();
    let ss: Vec<f64> = probes.iter().map(|q| q.sigma).collect();
    let cs: Vec<Condition> = probes.iter().map(|q| q.cond).collect();
    let good = net.forward_batch(&xs, &ss, &cs, EvalMode::Deterministic)?.into_outputs();
    let mut streams: Vec<RngStream> = (0..probes.len() as u64).map(|i| stream.fork(i)).collect();
    let bad = net
        .forward_batch(&xs, &ss, &cs, EvalMode::Stochastic { p, streams: &mut streams })?
        .into_outputs();
    Ok(good.iter().zip(&bad).map(|(g, b)| (*g - *b).norm()).sum::<f64>() / probes.len() as f64)
}

/// Fraction of probes where the mask-averaged in-situ guidance direction
/// `D_good - E[D_bad]` has positive cosine with the autoguidance direction
/// `D_good - D_weak`.
pub fn compatibility_fraction(
    net: &DenoiserNet,
    weak: &DenoiserNet,
    probes: &[Probe],
    p: f64,
    masks_per_probe: usize,
    stream: &RngStream,
) -> Result<f64> {
    check_same_architecture(net, weak)?;
    check_dropout_p(p)?;
    if probes.is_empty() || masks_per_probe == 0 {
        return Err(Error::Metric("compatibility needs probes and at least one mask".into()));
    }
    let xs: Vec<Vec2> = probes.iter().map(|q| q.x).collect();
    let ss: Vec<f64> = probes.iter().map(|q| q.sigma).collect();
    let cs: Vec<Condition> = probes.iter().map(|q| q.cond).collect();
    let good = net.forward_batch(&xs, &ss, &cs, EvalMode::Deterministic)?.into_outputs();
    let weak_out = weak.forward_batch(&xs, &ss, &cs, EvalMode::Deterministic)?.into_outputs();
    let mut bad_mean = vec![Vec2::ZERO; probes.len()];
    for m in 0..masks_per_probe {
        let mut streams: Vec<RngStream> = (0..probes.len() as u64).map(|i| stream.fork(i).fork(m as u64)).collect();
        let out = net
            .forward_batch(&xs, &ss, &cs, EvalMode::Stochastic { p, streams: &mut streams })?
            .into_outputs();
        for (b, o) in bad_mean.iter_mut().zip(out) {
            *b = *b + o * (1.0 / masks_per_probe as f64);
        }
    }
    let agree = good
        .iter()
        .zip(&bad_mean)
        .zip(&weak_out)
        .filter(|((g, b), wk)| (**g - **b).dot(**g - **wk) > 0.0)
        .count();
    Ok(agree as f64 / probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::GaussianMixture;
    use crate::nn::Architecture;

    fn net(seed: u64) -> DenoiserNet {
        DenoiserNet::new(Architecture::with_hidden(&[32, 32], 2, 16, 8), seed).unwrap()
    }

    fn bits(v: Vec2) -> (u64, u64) {
        (v.x.to_bits(), v.y.to_bits())
    }

    #[test]
    fn score_from_denoiser_examples() {
        assert_eq!(score_from_denoiser(Vec2::new(1.0, 2.0), Vec2::new(1.0, 2.0), 0.3).unwrap(), Vec2::ZERO);
        assert_eq!(score_from_denoiser(Vec2::ZERO, Vec2::new(1.0, 0.0), 2.0).unwrap(), Vec2::new(-0.25, 0.0));
        assert!(matches!(score_from_denoiser(Vec2::ZERO, Vec2::ZERO, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn score_from_analytic_denoiser_matches_score() {
        let g = GaussianMixture::isotropic(Vec2::new(0.5, -0.5), 0.8).unwrap();
        let x = Vec2::new(1.3, 0.2);
        for sigma in [0.01, 0.3, 2.0, 50.0] {
            let s = score_from_denoiser(g.denoise(x, sigma).unwrap(), x, sigma).unwrap();
            let want = g.score(x, sigma).unwrap();
            assert!((s - want).norm() / want.norm() < 1e-10);
        }
    }

    #[test]
    fn extrapolation_arithmetic() {
        assert_eq!(extrapolate(Vec2::new(1.0, 0.0), Vec2::ZERO, 1.0), Vec2::new(2.0, 0.0));
        assert_eq!(extrapolate(Vec2::new(1.0, 2.0), Vec2::ZERO, 2.0), Vec2::new(3.0, 6.0));
    }

    #[test]
    fn cfg_degenerate_and_affine_in_w() {
        let n = net(1);
        let (x, s, c) = (Vec2::new(0.2, 0.1), 0.6, Condition::Class(1));
        let d1 = n.forward(x, s, c, EvalMode::Deterministic).unwrap();
        let d0 = n.forward(x, s, Condition::Null, EvalMode::Deterministic).unwrap();
        assert_eq!(bits(denoise_cfg(&n, x, s, c, 0.0, EvalMode::Deterministic).unwrap()), bits(d1));
        for w in [0.5, 1.0, 4.0] {
            let got = denoise_cfg(&n, x, s, c, w, EvalMode::Deterministic).unwrap();
            let alt = d1 * (1.0 + w) - d0 * w;
            assert!((got - alt).norm() < 1e-14 * (1.0 + alt.norm()));
        }
        assert!(matches!(
            denoise_cfg(&n, x, s, Condition::Null, 1.0, EvalMode::Deterministic),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn autoguidance_identities() {
        let good = net(1);
        let (x, s, c) = (Vec2::new(-0.4, 0.3), 1.2, Condition::Class(0));
        let d = good.forward(x, s, c, EvalMode::Deterministic).unwrap();
        for w in [0.0, 1.5, 7.0] {
            assert_eq!(bits(denoise_autoguidance(&good, &good, x, s, c, w).unwrap()), bits(d));
        }
        let other = DenoiserNet::new(Architecture::with_hidden(&[16, 32], 2, 16, 8), 2).unwrap();
        assert!(matches!(denoise_autoguidance(&good, &other, x, s, c, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn insitu_identities() {
        let n = net(4);
        let (x, s, c) = (Vec2::new(0.7, -0.1), 0.4, Condition::Class(1));
        let d = n.forward(x, s, c, EvalMode::Deterministic).unwrap();
        let mut st = RngStream::new(1, "insitu").unwrap();
        for w in [0.5, 2.0, 10.0] {
            assert_eq!(bits(denoise_insitu(&n, x, s, c, w, 0.0, &mut st).unwrap()), bits(d));
        }
        let mut fresh = RngStream::new(1, "insitu").unwrap();
        assert_eq!(bits(denoise_insitu(&n, x, s, c, 0.0, 0.3, &mut fresh).unwrap()), bits(d));
        assert_eq!(fresh.counter(), 0);
        assert!(matches!(denoise_insitu(&n, x, s, c, 1.0, 1.0, &mut fresh), Err(Error::Domain(_))));
        let guided = denoise_insitu(&n, x, s, c, 2.0, 0.1, &mut fresh).unwrap();
        assert_ne!(guided, d);
    }

    #[test]
    fn truncation() {
        let x = Vec2::ZERO;
        // s = (d - x) / sigma^2 = (10, 0) at sigma = 1.
        let d = Vec2::new(10.0, 0.0);
        let t = truncate_denoised(d, x, 1.0, 1.0).unwrap();
        assert_eq!(score_from_denoiser(t, x, 1.0).unwrap(), Vec2::new(1.0, 0.0));
        let small = Vec2::new(0.1, 0.2);
        assert_eq!(truncate_denoised(small, x, 1.0, 1.0).unwrap(), small);
        assert!(matches!(truncate_denoised(d, x, 1.0, 0.0), Err(Error::Domain(_))));
        let n = net(2);
        assert!(denoise_truncated(&n, x, 1.0, Condition::Class(0), -1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn truncated_score_norm_is_bounded(
            dx in -100.0f64..100.0, dy in -100.0f64..100.0,
            xx in -10.0f64..10.0, xy in -10.0f64..10.0,
            sigma in 0.1f64..50.0, tau in 0.01f64..10.0,
        ) {
            let x = Vec2::new(xx, xy);
            let t = truncate_denoised(Vec2::new(dx, dy), x, sigma, tau).unwrap();
            let s = score_from_denoiser(t, x, sigma).unwrap();
            proptest::prop_assert!(s.norm() <= tau / sigma + 1e-12);
        }
    }

    #[test]
    fn guided_denoiser_batch_matches_scalar_ops() {
        let good = net(5);
        let weak = net(6);
        let xs = [Vec2::new(0.1, 0.2), Vec2::new(-1.0, 0.5)];
        let ids = [0u64, 1];
        let ctx = StepContext { cond: Condition::Class(1), sample_ids: &ids, step: 3 };
        let cfg = GuidedDenoiser::new(&good, None, GuidanceSpec::Cfg { w: 4.0 }, 0).unwrap();
        let ag = GuidedDenoiser::new(&good, Some(&weak), GuidanceSpec::Autoguidance { w: 1.5 }, 0).unwrap();
        let out_cfg = cfg.denoise(&xs, 0.5, &ctx).unwrap();
        let out_ag = ag.denoise(&xs, 0.5, &ctx).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let want = denoise_cfg(&good, x, 0.5, ctx.cond, 4.0, EvalMode::Deterministic).unwrap();
            assert!((out_cfg[i] - want).norm() < 1e-12);
            let want = denoise_autoguidance(&good, &weak, x, 0.5, ctx.cond, 1.5).unwrap();
            assert!((out_ag[i] - want).norm() < 1e-12);
        }
        assert!(matches!(
            GuidedDenoiser::new(&good, None, GuidanceSpec::Autoguidance { w: 1.0 }, 0),
            Err(Error::Usage(_))
        ));
        assert!(GuidedDenoiser::new(&good, None, GuidanceSpec::InSitu { w: 1.0, p: 1.2, passes: 1 }, 0).is_err());
    }

    #[test]
    fn insitu_masks_depend_on_step_not_stage() {
        let n = net(7);
        let gd = GuidedDenoiser::new(&n, None, GuidanceSpec::InSitu { w: 2.0, p: 0.2, passes: 1 }, 9).unwrap();
        let xs = [Vec2::new(0.3, 0.3)];
        let ids = [12u64];
        let at = |step| gd.denoise(&xs, 0.7, &StepContext { cond: Condition::Class(0), sample_ids: &ids, step }).unwrap();
        assert_eq!(at(4), at(4));
        assert_ne!(at(4), at(5));
        // Same row id in a different batch position gets the same masks.
        let xs2 = [Vec2::new(9.0, 9.0), Vec2::new(0.3, 0.3)];
        let ids2 = [3u64, 12];
        let both = gd.denoise(&xs2, 0.7, &StepContext { cond: Condition::Class(0), sample_ids: &ids2, step: 4 }).unwrap();
        assert_eq!(both[1], at(4)[0]);
    }

    #[test]
    fn zero_weight_is_identity_for_every_mode() {
        let good = net(5);
        let weak = net(6);
        let xs = [Vec2::new(0.1, 0.2), Vec2::new(-1.0, 0.5)];
        let ids = [0u64, 1];
        let ctx = StepContext { cond: Condition::Class(0), sample_ids: &ids, step: 0 };
        let base = GuidedDenoiser::new(&good, None, GuidanceSpec::Unguided, 0).unwrap().denoise(&xs, 0.9, &ctx).unwrap();
        for spec in [
            GuidanceSpec::Cfg { w: 0.0 },
            GuidanceSpec::Autoguidance { w: 0.0 },
            GuidanceSpec::InSitu { w: 0.0, p: 0.1, passes: 1 },
        ] {
            let out = GuidedDenoiser::new(&good, Some(&weak), spec, 0).unwrap().denoise(&xs, 0.9, &ctx).unwrap();
            for (a, b) in out.iter().zip(&base) {
                assert_eq!(bits(*a), bits(*b), "{spec:?}");
            }
        }
    }
}
