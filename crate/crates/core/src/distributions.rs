//! Ground-truth 2D data: a class-conditional IFS fractal and Gaussian
//! mixtures with closed-form posterior mean and score.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::nn::SIGMA_DATA;
use crate::rng::RngStream;

/// `x -> matrix * x + offset`, chosen with probability `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub matrix: Mat2,
    pub offset: Vec2,
    pub weight: f64,
}

impl AffineMap {
    pub fn apply(&self, v: Vec2) -> Vec2 {
        self.matrix.apply(v) + self.offset
    }

    fn fixed_point(&self) -> Option<Vec2> {
        let m = self.matrix;
        Mat2::new(1.0 - m.a, -m.b, -m.c, 1.0 - m.d)
            .inverse()
            .map(|inv| inv.apply(self.offset))
    }
}

/// Maps of one class, with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FractalClass {
    pub maps: Vec<AffineMap>,
}

/// Disk that every map of a class sends into itself, in raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct InvariantDisk {
    center: Vec2,
    radius: f64,
}

/// Class-conditional chaos-game fractal.
#[derive(Debug, Clone, PartialEq)]
pub struct FractalSpec {
    classes: Vec<FractalClass>,
    warm_up: usize,
    disks: Vec<InvariantDisk>,
    /// Dataset mean in raw coordinates.
    center: Vec2,
    /// Raw-to-normalized scale factor.
    scale: f64,
}

pub const DEFAULT_WARM_UP: usize = 64;
const STATS_POINTS_PER_CLASS: usize = 100_000;
const STATS_SEED: u64 = 0x5eed_f4ac_7a15;

impl FractalSpec {
    /// Validates the maps, normalizes weights, and computes the dataset-level
    /// normalization (mean 0, per-coordinate std `SIGMA_DATA`) from a fixed
    /// pilot run of `10^5` points per class.
    pub fn new(classes: Vec<FractalClass>, warm_up: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("fractal needs at least one class".into()));
        }
        let mut normalized = Vec::with_capacity(classes.len());
        let mut disks = Vec::with_capacity(classes.len());
        for (ci, class) in classes.into_iter().enumerate() {
            if class.maps.is_empty() {
                return Err(Error::Config(format!("fractal class {ci} has no maps")));
            }
            let mut total = 0.0;
            for (mi, m) in class.maps.iter().enumerate() {
                let norm = m.matrix.spectral_norm();
                if !(norm < 1.0) {
                    return Err(Error::Config(format!(
                        "fractal class {ci} map {mi} is not a contraction (spectral norm {norm})"
                    )));
                }
                if !(m.weight > 0.0 && m.weight.is_finite()) {
                    return Err(Error::Config(format!(
                        "fractal class {ci} map {mi} has non-positive weight {}",
                        m.weight
                    )));
                }
                if !m.offset.is_finite() {
                    return Err(Error::Config(format!("fractal class {ci} map {mi} has a non-finite offset")));
                }
                total += m.weight;
            }
            let maps: Vec<AffineMap> = class
                .maps
                .iter()
                .map(|m| AffineMap { weight: m.weight / total, ..*m })
                .collect();
            disks.push(invariant_disk(&maps));
            normalized.push(FractalClass { maps });
        }
        let mut spec = Self {
            classes: normalized,
            warm_up,
            disks,
            center: Vec2::ZERO,
            scale: 1.0,
        };
        let root = RngStream::new(STATS_SEED, "fractal-stats")?;
        let mut sum = Vec2::ZERO;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for c in 0..spec.classes.len() {
            let pts = spec.raw_chain(c, &mut root.fork(c as u64), STATS_POINTS_PER_CLASS);
            for p in &pts {
                sum = sum + *p;
            }
            count += pts.len();
            sum_sq += pts.iter().map(|p| p.norm_sq()).sum::<f64>();
        }
        let mean = sum * (1.0 / count as f64);
        let var = (sum_sq / count as f64 - mean.norm_sq()) / 2.0;
        spec.center = mean;
        spec.scale = SIGMA_DATA / var.sqrt();
        Ok(spec)
    }

    /// The built-in two-class fractal.
    ///
    /// Class 0: Sierpinski triangle (scale 0.5 toward the vertices of an
    /// equilateral triangle). Class 1: the triangle rotated by 90 degrees,
    /// scale 0.45 (a Cantor-like dust), plus a fourth map of weight 0.1 that
    /// grows a sparse branch to the right of the triangle.
    pub fn standard() -> Self {
        Self::new(standard_classes(), DEFAULT_WARM_UP).expect("built-in fractal is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[FractalClass] {
        &self.classes
    }

    pub fn warm_up(&self) -> usize {
        self.warm_up
    }

    pub fn normalize(&self, raw: Vec2) -> Vec2 {
        (raw - self.center) * self.scale
    }

    pub fn denormalize(&self, v: Vec2) -> Vec2 {
        v * (1.0 / self.scale) + self.center
    }

    /// Apply map `map` of class `class` to a point given in normalized units.
    pub fn apply_map_normalized(&self, class: usize, map: usize, v: Vec2) -> Vec2 {
        self.normalize(self.classes[class].maps[map].apply(self.denormalize(v)))
    }

    /// Bounding box `(min, max)` of the class's invariant region, in normalized units.
    pub fn bounding_box(&self, class: usize) -> (Vec2, Vec2) {
        let d = self.disks[class];
        let r = Vec2::new(d.radius, d.radius);
        (self.normalize(d.center - r), self.normalize(d.center + r))
    }

    fn pick_map(&self, class: usize, stream: &mut RngStream) -> &AffineMap {
        let maps = &self.classes[class].maps;
        let u = stream.uniform();
        let mut acc = 0.0;
        for m in maps {
            acc += m.weight;
            if u < acc {
                return m;
            }
        }
        maps.last().unwrap()
    }

    fn raw_chain(&self, class: usize, stream: &mut RngStream, n: usize) -> Vec<Vec2> {
        let disk = self.disks[class];
        let r = disk.radius * stream.uniform().sqrt();
        let theta = 2.0 * PI * stream.uniform();
        let mut p = disk.center + Vec2::new(r * theta.cos(), r * theta.sin());
        for _ in 0..self.warm_up {
            p = self.pick_map(class, stream).apply(p);
        }
        (0..n)
            .map(|_| {
                p = self.pick_map(class, stream).apply(p);
                p
            })
            .collect()
    }

    /// `n` consecutive chaos-game points of class `class`, normalized.
    /// Draws: 2 for the start, then one per map application (`warm_up + n`).
    pub fn sample(&self, class: usize, stream: &mut RngStream, n: usize) -> Result<Vec<Vec2>> {
        if class >= self.classes.len() {
            return Err(Error::Domain(format!(
                "class {class} out of range for a {}-class fractal",
                self.classes.len()
            )));
        }
        Ok(self.raw_chain(class, stream, n).into_iter().map(|p| self.normalize(p)).collect())
    }
}

fn invariant_disk(maps: &[AffineMap]) -> InvariantDisk {
    let fixed: Vec<Vec2> = maps.iter().filter_map(AffineMap::fixed_point).collect();
    let center = fixed.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / fixed.len() as f64);
    // |f(x) - c| <= |A| |x - c| + |f(c) - c| <= R  whenever |x - c| <= R.
    let radius = maps
        .iter()
        .map(|m| (m.apply(center) - center).norm() / (1.0 - m.matrix.spectral_norm()))
        .fold(0.0, f64::max)
        * (1.0 + 1e-9);
    InvariantDisk { center, radius }
}

pub fn standard_classes() -> Vec<FractalClass> {
    let h = 3f64.sqrt() / 2.0;
    let tri = [Vec2::new(0.0, 1.0), Vec2::new(-h, -0.5), Vec2::new(h, -0.5)];
    let toward = |v: Vec2, s: f64, weight: f64| AffineMap {
        matrix: Mat2::scaled_rotation(s, 0.0),
        offset: v * (1.0 - s),
        weight,
    };
    let class0 = FractalClass {
        maps: tri.iter().map(|&v| toward(v, 0.5, 1.0 / 3.0)).collect(),
    };
    let rot = Mat2::scaled_rotation(1.0, PI / 2.0);
    let mut maps: Vec<AffineMap> = tri.iter().map(|&v| toward(rot.apply(v), 0.45, 0.3)).collect();
    maps.push(toward(Vec2::new(1.5, 0.0), 0.3, 0.1));
    vec![class0, FractalClass { maps }]
}

/// One mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec2,
    /// Symmetric positive semi-definite; zero gives an exact point mass.
    pub cov: Mat2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    chol: Vec<Mat2>,
}

fn cholesky_psd(m: Mat2) -> Mat2 {
    let l11 = m.a.sqrt();
    let l21 = if l11 > 0.0 { m.c / l11 } else { 0.0 };
    let l22 = (m.d - l21 * l21).max(0.0).sqrt();
    Mat2::new(l11, 0.0, l21, l22)
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        for (i, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(Error::Config(format!("component {i} has non-positive weight {}", c.weight)));
            }
            let cov = c.cov;
            if !c.mean.is_finite() || !cov.is_symmetric() || cov.a < 0.0 || cov.d < 0.0 || cov.det() < 0.0 {
                return Err(Error::Config(format!(
                    "component {i} covariance must be symmetric positive semi-definite and its mean finite"
                )));
            }
        }
        let chol = components.iter().map(|c| cholesky_psd(c.cov)).collect();
        Ok(Self { components, chol })
    }

    /// Isotropic single Gaussian `N(mean, s^2 I)`.
    pub fn isotropic(mean: Vec2, s: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent {
            weight: 1.0,
            mean,
            cov: Mat2::new(s * s, 0.0, 0.0, s * s),
        }])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn mean(&self) -> Vec2 {
        self.components.iter().fold(Vec2::ZERO, |a, c| a + c.mean * c.weight)
    }

    /// Mixture covariance (law of total covariance).
    pub fn covariance(&self) -> Mat2 {
        let mu = self.mean();
        let mut acc = Mat2::new(0.0, 0.0, 0.0, 0.0);
        for c in &self.components {
            let d = c.mean - mu;
            let outer = Mat2::new(d.x * d.x, d.x * d.y, d.x * d.y, d.y * d.y);
            for (a, (s, o)) in [&mut acc.a, &mut acc.b, &mut acc.c, &mut acc.d]
                .into_iter()
                .zip(c.cov.to_row_major().into_iter().zip(outer.to_row_major()))
            {
                *a += c.weight * (s + o);
            }
        }
        acc
    }

    /// Ancestral sampling; 5 draws per point (component, then two normals).
    pub fn sample(&self, stream: &mut RngStream, n: usize) -> Vec<Vec2> {
        (0..n)
            .map(|_| {
                let u = stream.uniform();
                let mut acc = 0.0;
                let mut k = self.components.len() - 1;
                for (i, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z = Vec2::new(stream.gaussian(), stream.gaussian());
                self.components[k].mean + self.chol[k].apply(z)
            })
            .collect()
    }

    fn check_sigma(sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
        }
        Ok(())
    }

    /// Per-component `(responsibility, x - mu_k, (Sigma_k + sigma^2 I)^-1)` at `x`.
    fn posterior_terms(&self, x: Vec2, sigma: f64) -> Vec<(f64, Vec2, Mat2)> {
        let s2 = sigma * sigma;
        let mut terms: Vec<(f64, Vec2, Mat2)> = self
            .components
            .iter()
            .map(|c| {
                let cov = c.cov.add_diag(s2);
                let inv = cov.inverse().expect("inflated covariance is positive definite");
                let d = x - c.mean;
                let log_like = c.weight.ln() - 0.5 * d.dot(inv.apply(d)) - 0.5 * cov.det().ln() - (2.0 * PI).ln();
                (log_like, d, inv)
            })
            .collect();
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.iter().map(|t| (t.0 - max).exp()).sum();
        for t in &mut terms {
            t.0 = (t.0 - max).exp() / total;
        }
        terms
    }

    /// Posterior mean `E[x0 | x0 + sigma * n = x]`.
    pub fn denoise(&self, x: Vec2, sigma: f64) -> Result<Vec2> {
        Self::check_sigma(sigma)?;
        let terms = self.posterior_terms(x, sigma);
        Ok(self
            .components
            .iter()
            .zip(&terms)
            .fold(Vec2::ZERO, |acc, (c, &(r, d, inv))| {
                acc + (c.mean + c.cov.apply(inv.apply(d))) * r
            }))
    }

    /// `grad_x log p(x; sigma)` of the noised marginal.
    pub fn score(&self, x: Vec2, sigma: f64) -> Result<Vec2> {
        Self::check_sigma(sigma)?;
        Ok(self
            .posterior_terms(x, sigma)
            .iter()
            .fold(Vec2::ZERO, |acc, &(r, d, inv)| acc - inv.apply(d) * r))
    }

    /// `log p(x; sigma)` of the noised marginal.
    pub fn log_density(&self, x: Vec2, sigma: f64) -> Result<f64> {
        Self::check_sigma(sigma)?;
        let s2 = sigma * sigma;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let cov = c.cov.add_diag(s2);
                let d = x - c.mean;
                c.weight.ln() - 0.5 * d.dot(cov.inverse().unwrap().apply(d)) - 0.5 * cov.det().ln() - (2.0 * PI).ln()
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

/// Source of training and reference data.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Fractal(FractalSpec),
    /// Single-class Gaussian mixture.
    Gmm(GaussianMixture),
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Fractal(f) => f.num_classes(),
            DataSource::Gmm(_) => 1,
        }
    }

    /// `n` points of class `class`.
    pub fn sample(&self, class: usize, stream: &mut RngStream, n: usize) -> Result<Vec<Vec2>> {
        match self {
            DataSource::Fractal(f) => f.sample(class, stream, n),
            DataSource::Gmm(g) if class == 0 => Ok(g.sample(stream, n)),
            DataSource::Gmm(_) => Err(Error::Domain(format!("class {class} out of range for a 1-class mixture"))),
        }
    }
}
