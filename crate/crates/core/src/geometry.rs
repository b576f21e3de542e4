//! Point-cloud sampling and cropping kernels.
//!
//! All kernels use exhaustive O(N²) distance computation. Distances are
//! compared as squared Euclidean norms; ties always resolve to the lower
//! point index.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Ordered list of 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("point cloud has no points".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "point cloud has non-finite coordinates".into(),
            ));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Cloud made of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
        }
    }
}

/// Farthest-point sampling starting from a random index drawn from `rng`.
pub fn fps<R: Rng + ?Sized>(cloud: &PointCloud, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_count("fps", m, cloud.len())?;
    let start = rng.random_range(0..cloud.len());
    fps_from(cloud, m, start)
}

/// Greedy max-min selection from a fixed start index.
pub fn fps_from(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    check_count("fps", m, cloud.len())?;
    if start >= cloud.len() {
        return Err(Error::Parameter(format!(
            "fps start {start} outside cloud of {} points",
            cloud.len()
        )));
    }
    let pts = &cloud.points;
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}

/// Indices of the `k` points nearest to `center`, nearest first.
pub fn knn(cloud: &PointCloud, center: &Point, k: usize) -> Result<Vec<usize>> {
    check_count("knn", k, cloud.len())?;
    let mut keyed: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, center), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

fn check_count(what: &str, m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        Err(Error::Parameter(format!(
            "{what}: requested {m} of {n} points"
        )))
    } else {
        Ok(())
    }
}

/// Number of points a crop at `ratio` keeps from `n`.
pub fn crop_size(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Crops a contiguous region: the `round(ratio·N)` nearest neighbours of a
/// random anchor point. Returned points keep their original order.
pub fn crop<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: f64,
    min_points: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    let anchor = rng.random_range(0..cloud.len());
    crop_at(cloud, ratio, anchor, min_points)
}

/// [`crop`] with an explicit anchor index.
pub fn crop_at(
    cloud: &PointCloud,
    ratio: f64,
    anchor: usize,
    min_points: usize,
) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Parameter(format!(
            "crop ratio {ratio} not in (0, 1]"
        )));
    }
    let size = crop_size(cloud.len(), ratio);
    if size < min_points.max(1) {
        return Err(Error::DegenerateCrop {
            size,
            min: min_points.max(1),
        });
    }
    if size == cloud.len() {
        return Ok(cloud.clone());
    }
    let mut idx = knn(cloud, &cloud.points[anchor], size)?;
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// Random subset (or padding by repetition) to exactly `size` points.
///
/// Larger clouds are subsampled without replacement, keeping point order.
/// Smaller clouds keep all their points and are padded with randomly chosen
/// duplicates, so max-pooled patch features stay well defined.
pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, size: usize, rng: &mut R) -> PointCloud {
    let n = cloud.len();
    if size == n {
        return cloud.clone();
    }
    if size < n {
        let mut idx = index::sample(rng, n, size).into_vec();
        idx.sort_unstable();
        return cloud.select(&idx);
    }
    let mut out = cloud.clone();
    for _ in n..size {
        out.points.push(cloud.points[rng.random_range(0..n)]);
    }
    out
}

/// Centers on the centroid and scales so the farthest point has norm 1.
/// A cloud whose points all coincide is only centered.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let mut points: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max = points
        .iter()
        .map(|p| dist2(p, &[0.0; 3]))
        .fold(0.0, f64::max)
        .sqrt();
    if max > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= max;
            }
        }
    }
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Crop counts, ratio ranges and optional fixed output sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Number of global crops (I).
    pub globals: usize,
    /// Number of local crops (J).
    pub locals: usize,
    /// Number of half-resolution FPS clouds appended to the locals (R).
    pub resolutions: usize,
    pub global_ratio: (f64, f64),
    pub local_ratio: (f64, f64),
    /// Smallest admissible crop (one backbone patch).
    pub min_points: usize,
    /// Fixed global crop size; `None` keeps crops at their natural size.
    pub global_size: Option<usize>,
    /// Fixed local crop size; `None` keeps crops at their natural size.
    pub local_size: Option<usize>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            globals: 2,
            locals: 8,
            resolutions: 2,
            global_ratio: (0.7, 1.0),
            local_ratio: (0.2, 0.5),
            min_points: 32,
            global_size: Some(1024),
            local_size: Some(256),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let (l1, l2) = self.local_ratio;
        let (g1, g2) = self.global_ratio;
        if !(0.0 < l1 && l1 <= l2 && l2 <= g1 && g1 <= g2 && g2 <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratios must satisfy 0 < r_l1 <= r_l2 <= r_g1 <= r_g2 <= 1, got \
                 local ({l1}, {l2}) global ({g1}, {g2})"
            )));
        }
        if self.globals == 0 {
            return Err(Error::Config("at least one global crop is required".into()));
        }
        if matches!(self.global_size, Some(0)) || matches!(self.local_size, Some(0)) {
            return Err(Error::Config("fixed crop sizes must be positive".into()));
        }
        Ok(())
    }

    /// Fixed size of the half-resolution clouds when resampling is on.
    pub fn resolution_size(&self) -> Option<usize> {
        self.global_size.map(|g| (g / 2).max(1))
    }
}

/// Global and local views of one cloud. The last `resolutions` entries of
/// `locals` are the half-resolution clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    pub globals: Vec<PointCloud>,
    pub locals: Vec<PointCloud>,
    pub resolutions: usize,
}

impl CropSet {
    /// Local crops proper, without the half-resolution additions.
    pub fn local_crops(&self) -> &[PointCloud] {
        &self.locals[..self.locals.len() - self.resolutions]
    }

    pub fn resolution_clouds(&self) -> &[PointCloud] {
        &self.locals[self.locals.len() - self.resolutions..]
    }
}

fn uniform<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    let (lo, hi) = range;
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Builds the global and local crop sets of one cloud.
pub fn make_crop_set<R: Rng + ?Sized>(
    cloud: &PointCloud,
    config: &CropConfig,
    rng: &mut R,
) -> Result<CropSet> {
    config.validate()?;
    let mut globals = Vec::with_capacity(config.globals);
    for _ in 0..config.globals {
        let r = uniform(config.global_ratio, rng);
        let c = crop(cloud, r, config.min_points, rng)?;
        globals.push(match config.global_size {
            Some(s) => resample(&c, s, rng),
            None => c,
        });
    }
    let mut locals = Vec::with_capacity(config.locals + config.resolutions);
    for _ in 0..config.locals {
        let r = uniform(config.local_ratio, rng);
        let c = crop(cloud, r, config.min_points, rng)?;
        locals.push(match config.local_size {
            Some(s) => resample(&c, s, rng),
            None => c,
        });
    }
    let half = cloud.len() / 2;
    for _ in 0..config.resolutions {
        if half < config.min_points.max(1) {
            return Err(Error::DegenerateCrop {
                size: half,
                min: config.min_points.max(1),
            });
        }
        let idx = fps(cloud, half, rng)?;
        let c = cloud.select(&idx);
        locals.push(match config.resolution_size() {
            Some(s) => resample(&c, s, rng),
            None => c,
        });
    }
    Ok(CropSet {
        globals,
        locals,
        resolutions: config.resolutions,
    })
}
