//! Discretization bias of the default sampler, separated from Monte Carlo
//! noise by comparing each output variance with its own input noise draw.

use isag::distributions::GaussianMixture;
use isag::sampler::{initial_noise, sample, SamplerConfig};
use isag::{Condition, Vec2};

#[test]
fn heun_variance_bias_is_small_for_every_seed() {
    let s = 0.25;
    let g = GaussianMixture::isotropic(Vec2::new(0.4, -0.3), s).unwrap();
    for seed in 0..6 {
        let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
        let n = 2048;
        let xs = sample(&g, &cfg, Condition::Class(0), 1, n, 1).unwrap();
        let zs: Vec<Vec2> = (0..n as u64).map(|i| initial_noise(&cfg, Condition::Class(0), 1, i).unwrap()).collect();
        // The exact flow is affine: x = mean + z * s / sqrt(sigma_max^2 + s^2).
        let k = s / (cfg.sigma_max * cfg.sigma_max + s * s).sqrt();
        for axis in 0..2 {
            let get = |v: &Vec2| if axis == 0 { v.x } else { v.y };
            let mx = xs.iter().map(get).sum::<f64>() / n as f64;
            let mz = zs.iter().map(get).sum::<f64>() / n as f64;
            let vx: f64 = xs.iter().map(|v| (get(v) - mx).powi(2)).sum();
            let vz: f64 = zs.iter().map(|v| (get(v) - mz).powi(2)).sum::<f64>() * k * k;
            let bias = vx / vz - 1.0;
            assert!(bias.abs() < 0.015, "seed {seed} axis {axis}: variance ratio off by {bias}");
        }
    }
}
