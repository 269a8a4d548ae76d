//! Sample-quality readouts against a ground-truth reference set: outlier
//! rate, mode coverage and histogram KL.

use crate::error::{Error, Result};
use crate::linalg::Vec2;

/// Exact nearest-neighbour search over a uniform grid of buckets.
#[derive(Debug, Clone)]
pub struct NearestIndex {
    points: Vec<Vec2>,
    min: Vec2,
    cell: f64,
    nx: i64,
    ny: i64,
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl NearestIndex {
    pub fn new(points: &[Vec2]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Metric("nearest-neighbour index over an empty set".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Metric("non-finite reference point".into()));
        }
        let (min, max) = bounds(points);
        let extent = (max.x - min.x).max(max.y - min.y).max(1e-12);
        // Roughly two points per cell, capped at 2048 cells a side.
        let side = ((points.len() as f64 / 2.0).sqrt().ceil() as i64).clamp(1, 2048);
        let cell = extent / side as f64 * (1.0 + 1e-9);
        let nx = (((max.x - min.x) / cell).floor() as i64 + 1).max(1);
        let ny = (((max.y - min.y) / cell).floor() as i64 + 1).max(1);
        let mut counts = vec![0usize; (nx * ny) as usize + 1];
        let cell_of = |p: &Vec2| {
            let cx = (((p.x - min.x) / cell) as i64).min(nx - 1);
            let cy = (((p.y - min.y) / cell) as i64).min(ny - 1);
            (cy * nx + cx) as usize
        };
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(Self {
            points: points.to_vec(),
            min,
            cell,
            nx,
            ny,
            starts,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    /// Distance from `q` to the nearest indexed point.
    pub fn nearest_distance(&self, q: Vec2) -> f64 {
        self.search(q, usize::MAX)
    }

    /// Distance from indexed point `i` to its nearest other indexed point
    /// (infinite when the index holds a single point).
    pub fn nearest_other(&self, i: usize) -> f64 {
        self.search(self.points[i], i)
    }

    fn search(&self, q: Vec2, skip: usize) -> f64 {
        let qx = ((q.x - self.min.x) / self.cell).floor();
        let qy = ((q.y - self.min.y) / self.cell).floor();
        let qx = qx.clamp(-1e15, 1e15) as i64;
        let qy = qy.clamp(-1e15, 1e15) as i64;
        let gap = |v: i64, n: i64| if v < 0 { -v } else if v >= n { v - n + 1 } else { 0 };
        let first_ring = gap(qx, self.nx).max(gap(qy, self.ny));
        let last_ring = (qx.max(self.nx - 1 - qx)).max(qy.max(self.ny - 1 - qy));
        let mut best = f64::INFINITY;
        let mut ring = first_ring;
        while ring <= last_ring {
            // Cells in ring `ring` hold points at distance >= (ring - 1) * cell.
            if best.is_finite() && best <= (ring - 1) as f64 * self.cell {
                break;
            }
            let (y0, y1) = ((qy - ring).max(0), (qy + ring).min(self.ny - 1));
            for cy in y0..=y1 {
                let edge_row = cy == qy - ring || cy == qy + ring;
                let step = if edge_row { 1 } else { 2 * ring.max(1) };
                let mut cx = qx - ring;
                while cx <= qx + ring {
                    if cx >= 0 && cx < self.nx {
                        let c = (cy * self.nx + cx) as usize;
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            if i != skip {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                    cx += step;
                }
            }
            ring += 1;
        }
        best
    }
}

fn bounds(points: &[Vec2]) -> (Vec2, Vec2) {
    points.iter().fold(
        (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Vec2::new(lo.x.min(p.x), lo.y.min(p.y)), Vec2::new(hi.x.max(p.x), hi.y.max(p.y))),
    )
}

/// Fraction of `samples` farther than `tau_out` from every reference point.
pub fn outlier_rate(samples: &[Vec2], reference: &NearestIndex, tau_out: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("outlier rate of an empty sample set".into()));
    }
    if !(tau_out > 0.0) {
        return Err(Error::Metric(format!("outlier threshold must be positive, got {tau_out}")));
    }
    let outliers = samples
        .iter()
        .filter(|&&s| reference.nearest_distance(s) > tau_out)
        .count();
    Ok(outliers as f64 / samples.len() as f64)
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of reference-to-reference
/// nearest-neighbour distances.
pub fn self_distance_percentile(reference: &NearestIndex, q: f64) -> Result<f64> {
    if reference.len() < 2 {
        return Err(Error::Metric("need at least two reference points".into()));
    }
    let mut d: Vec<f64> = (0..reference.len()).map(|i| reference.nearest_other(i)).collect();
    d.sort_by(f64::total_cmp);
    let rank = ((q * d.len() as f64).ceil() as usize).clamp(1, d.len());
    Ok(d[rank - 1])
}

/// Axis-aligned histogram grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub bins: usize,
    pub min: Vec2,
    pub max: Vec2,
}

impl Grid {
    pub fn new(bins: usize, min: Vec2, max: Vec2) -> Result<Self> {
        if bins == 0 || !(max.x > min.x) || !(max.y > min.y) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Config(format!(
                "degenerate grid: {bins} bins over ({}, {})..({}, {})",
                min.x, min.y, max.x, max.y
            )));
        }
        Ok(Self { bins, min, max })
    }

    /// Bounding box of `points` grown by `expand` (fraction of the extent) on each side.
    pub fn around(points: &[Vec2], bins: usize, expand: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("grid around an empty point set".into()));
        }
        let (lo, hi) = bounds(points);
        let pad = Vec2::new((hi.x - lo.x) * expand, (hi.y - lo.y) * expand);
        Self::new(bins, lo - pad, hi + pad)
    }

    pub fn cell(&self, p: Vec2) -> Option<usize> {
        let fx = (p.x - self.min.x) / (self.max.x - self.min.x);
        let fy = (p.y - self.min.y) / (self.max.y - self.min.y);
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return None;
        }
        let cx = ((fx * self.bins as f64) as usize).min(self.bins - 1);
        let cy = ((fy * self.bins as f64) as usize).min(self.bins - 1);
        Some(cy * self.bins + cx)
    }

    pub fn counts(&self, points: &[Vec2]) -> Vec<u64> {
        let mut h = vec![0u64; self.bins * self.bins];
        for p in points {
            if let Some(c) = self.cell(*p) {
                h[c] += 1;
            }
        }
        h
    }

    fn covers(&self, points: &[Vec2]) -> bool {
        points
            .iter()
            .all(|p| p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y)
    }
}

/// Among cells holding at least `max(1, 1e-4 |reference|)` reference points,
/// the fraction that also hold a sample.
pub fn coverage(samples: &[Vec2], reference: &[Vec2], grid: &Grid) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("coverage against an empty reference".into()));
    }
    if !grid.covers(reference) {
        return Err(Error::Config("grid does not cover the reference set".into()));
    }
    let threshold = (1e-4 * reference.len() as f64).max(1.0);
    let r = grid.counts(reference);
    let s = grid.counts(samples);
    let (mut occupied, mut hit) = (0usize, 0usize);
    for (rc, sc) in r.iter().zip(&s) {
        if *rc as f64 >= threshold {
            occupied += 1;
            if *sc > 0 {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / occupied as f64)
}

/// `KL(reference histogram || sample histogram)` with add-one smoothing.
/// Points outside the grid are ignored.
pub fn hist_kl(samples: &[Vec2], reference: &[Vec2], grid: &Grid) -> Result<f64> {
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Metric("histogram KL needs nonempty inputs".into()));
    }
    let r = grid.counts(reference);
    let s = grid.counts(samples);
    let k = r.len() as f64;
    let rt = r.iter().sum::<u64>() as f64 + k;
    let st = s.iter().sum::<u64>() as f64 + k;
    let kl: f64 = r
        .iter()
        .zip(&s)
        .map(|(&rc, &sc)| {
            let p = (rc as f64 + 1.0) / rt;
            let q = (sc as f64 + 1.0) / st;
            p * (p / q).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

/// One reference class, with its index, outlier threshold and grid computed once.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    index: NearestIndex,
    pub tau_out: f64,
    pub grid: Grid,
}

/// Defaults for [`ReferenceSet::build`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    pub bins: usize,
    pub grid_expand: f64,
    /// Percentile of reference self-distances used as the outlier threshold.
    pub tau_percentile: f64,
    /// Fixed outlier threshold; overrides the percentile when set.
    pub tau_out: Option<f64>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            bins: 64,
            grid_expand: 0.1,
            tau_percentile: 0.999,
            tau_out: None,
        }
    }
}

impl ReferenceSet {
    pub fn build(points: &[Vec2], settings: &MetricSettings) -> Result<Self> {
        let index = NearestIndex::new(points)?;
        let tau_out = match settings.tau_out {
            Some(t) => t,
            None => self_distance_percentile(&index, settings.tau_percentile)?,
        };
        let grid = Grid::around(points, settings.bins, settings.grid_expand)?;
        Ok(Self { index, tau_out, grid })
    }

    pub fn points(&self) -> &[Vec2] {
        self.index.points()
    }

    pub fn index(&self) -> &NearestIndex {
        &self.index
    }

    pub fn report(&self, samples: &[Vec2]) -> Result<MetricReport> {
        Ok(MetricReport {
            outlier_rate: outlier_rate(samples, &self.index, self.tau_out)?,
            coverage: coverage(samples, self.points(), &self.grid)?,
            hist_kl: hist_kl(samples, self.points(), &self.grid)?,
            n_samples: samples.len(),
            tau_out: self.tau_out,
            bins: self.grid.bins,
            grid_min: self.grid.min,
            grid_max: self.grid.max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub outlier_rate: f64,
    pub coverage: f64,
    pub hist_kl: f64,
    pub n_samples: usize,
    pub tau_out: f64,
    pub bins: usize,
    pub grid_min: Vec2,
    pub grid_max: Vec2,
}

impl MetricReport {
    /// Combine per-class reports: outlier rate weighted by sample count,
    /// coverage and KL averaged over classes. Threshold and grid are taken
    /// from the first class.
    pub fn combine(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Metric("no per-class reports to combine".into()))?;
        let n: usize = reports.iter().map(|r| r.n_samples).sum();
        let k = reports.len() as f64;
        Ok(MetricReport {
            outlier_rate: reports.iter().map(|r| r.outlier_rate * r.n_samples as f64).sum::<f64>() / n as f64,
            coverage: reports.iter().map(|r| r.coverage).sum::<f64>() / k,
            hist_kl: reports.iter().map(|r| r.hist_kl).sum::<f64>() / k,
            n_samples: n,
            ..*first
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn cloud(seed: u64, n: usize) -> Vec<Vec2> {
        let mut s = RngStream::new(seed, "cloud").unwrap();
        (0..n).map(|_| Vec2::new(s.gaussian(), 0.3 * s.gaussian())).collect()
    }

    fn brute(points: &[Vec2], q: Vec2, skip: usize) -> f64 {
        points
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, p)| (*p - q).norm())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn grid_index_matches_brute_force() {
        let pts = cloud(1, 3000);
        let idx = NearestIndex::new(&pts).unwrap();
        let mut s = RngStream::new(2, "queries").unwrap();
        for _ in 0..500 {
            let q = Vec2::new(8.0 * s.uniform() - 4.0, 8.0 * s.uniform() - 4.0);
            assert_eq!(idx.nearest_distance(q), brute(&pts, q, usize::MAX));
        }
        for i in (0..pts.len()).step_by(37) {
            assert_eq!(idx.nearest_other(i), brute(&pts, pts[i], i));
        }
        assert_eq!(idx.nearest_distance(Vec2::new(1e6, -1e6)), brute(&pts, Vec2::new(1e6, -1e6), usize::MAX));
    }

    #[test]
    fn samples_equal_reference() {
        let pts = cloud(3, 5000);
        let r = ReferenceSet::build(&pts, &MetricSettings::default()).unwrap();
        let rep = r.report(&pts).unwrap();
        assert_eq!(rep.outlier_rate, 0.0);
        assert_eq!(rep.coverage, 1.0);
        assert_eq!(rep.hist_kl, 0.0);
    }

    #[test]
    fn constructed_outlier_case() {
        let reference = cloud(4, 200);
        let idx = NearestIndex::new(&reference).unwrap();
        let tau = 0.05;
        let mut samples: Vec<Vec2> = reference[..99].to_vec();
        samples.push(Vec2::new(100.0, 0.0));
        assert!((outlier_rate(&samples, &idx, tau).unwrap() - 0.01).abs() < 1e-15);
        assert!(outlier_rate(&[], &idx, tau).is_err());
        assert!(outlier_rate(&samples, &idx, 0.0).is_err());
    }

    #[test]
    fn single_cell_coverage() {
        let reference = vec![
            Vec2::new(0.1, 0.1),
            Vec2::new(0.9, 0.1),
            Vec2::new(0.1, 0.9),
            Vec2::new(0.9, 0.9),
        ];
        let grid = Grid::new(2, Vec2::ZERO, Vec2::new(1.0, 1.0)).unwrap();
        let samples = vec![Vec2::new(0.2, 0.2); 50];
        assert_eq!(coverage(&samples, &reference, &grid).unwrap(), 0.25);
        assert!(Grid::new(0, Vec2::ZERO, Vec2::new(1.0, 1.0)).is_err());
        assert!(Grid::new(4, Vec2::ZERO, Vec2::new(0.0, 1.0)).is_err());
        let small = Grid::new(2, Vec2::ZERO, Vec2::new(0.5, 0.5)).unwrap();
        assert!(coverage(&samples, &reference, &small).is_err());
    }

    #[test]
    fn self_distance_percentile_nearest_rank() {
        let pts: Vec<Vec2> = (0..10).map(|i| Vec2::new((i * i) as f64, 0.0)).collect();
        let idx = NearestIndex::new(&pts).unwrap();
        // Gaps 1,3,5,...,17; nearest-other distances 1,1,3,5,...,17.
        assert_eq!(self_distance_percentile(&idx, 1.0).unwrap(), 17.0);
        assert_eq!(self_distance_percentile(&idx, 0.5).unwrap(), 7.0);
        assert_eq!(self_distance_percentile(&idx, 0.1).unwrap(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn kl_nonnegative_and_permutation_invariant(seed in 0u64..1000, rot in 1usize..50) {
            let reference = cloud(seed, 400);
            let samples: Vec<Vec2> = cloud(seed + 1, 300).iter().map(|p| *p * 1.3).collect();
            let grid = Grid::around(&reference, 16, 0.1).unwrap();
            let kl = hist_kl(&samples, &reference, &grid).unwrap();
            prop_assert!(kl >= 0.0);
            let mut shuffled = samples.clone();
            shuffled.rotate_left(rot);
            let mut ref_shuffled = reference.clone();
            ref_shuffled.reverse();
            prop_assert_eq!(kl, hist_kl(&shuffled, &reference, &grid).unwrap());
            let a = ReferenceSet::build(&reference, &MetricSettings { bins: 16, ..Default::default() }).unwrap();
            let b = ReferenceSet::build(&ref_shuffled, &MetricSettings { bins: 16, ..Default::default() }).unwrap();
            let ra = a.report(&samples).unwrap();
            let rb = b.report(&shuffled).unwrap();
            prop_assert_eq!(ra.outlier_rate, rb.outlier_rate);
            prop_assert_eq!(ra.coverage, rb.coverage);
            prop_assert!((ra.hist_kl - rb.hist_kl).abs() < 1e-12);
        }

        #[test]
        fn adding_a_far_point_never_lowers_outlier_rate(seed in 0u64..1000, far in 2.0f64..50.0) {
            let reference = cloud(seed, 300);
            let idx = NearestIndex::new(&reference).unwrap();
            let samples = cloud(seed + 7, 100);
            let tau = 0.1;
            let before = outlier_rate(&samples, &idx, tau).unwrap();
            let mut more = samples.clone();
            more.push(Vec2::new(far * 10.0, far));
            prop_assert!(outlier_rate(&more, &idx, tau).unwrap() >= before);
        }
    }
}
