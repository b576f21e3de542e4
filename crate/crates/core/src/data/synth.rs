use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{normalize, Point, PointCloud};
use crate::rng::{self, purpose};

/// Procedural primitive surfaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Sphere,
        Shape::Cube,
        Shape::Cylinder,
        Shape::Cone,
        Shape::Torus,
        Shape::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::Torus => "torus",
            Shape::Plane => "plane",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Parses either a count (the first `n` shapes) or a comma-separated list
    /// of names.
    pub fn parse_list(spec: &str) -> Result<Vec<Shape>> {
        let spec = spec.trim();
        if let Ok(n) = spec.parse::<usize>() {
            if n == 0 || n > Shape::ALL.len() {
                return Err(Error::Config(format!(
                    "--classes: count must be in 1..={}, got {n}",
                    Shape::ALL.len()
                )));
            }
            return Ok(Shape::ALL[..n].to_vec());
        }
        let mut out = Vec::new();
        for name in spec.split(',').map(str::trim) {
            let s = Shape::from_name(name).ok_or_else(|| {
                Error::Config(format!(
                    "--classes: unknown class name {name:?} (expected one of {})",
                    Shape::ALL.map(Shape::name).join(", ")
                ))
            })?;
            if out.contains(&s) {
                return Err(Error::Config(format!(
                    "--classes: duplicate class {name:?}"
                )));
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// Parameters of the synthetic shape dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: Vec<Shape>,
    pub per_class: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    /// Fraction of each class assigned to the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: Shape::ALL.to_vec(),
            per_class: 50,
            n_points: 1024,
            noise_sigma: 0.01,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Sphere points in antipodal pairs (plus one balanced triple for odd
/// counts), so the centroid is the sphere center and normalization leaves
/// every point at unit distance.
fn sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        if n == 1 {
            return vec![unit_vector(rng)];
        }
        let u = unit_vector(rng);
        let w = loop {
            let c = cross(&u, &unit_vector(rng));
            let l = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if l > 1e-6 {
                break c.map(|x| x / l);
            }
        };
        let h = 3f64.sqrt() / 2.0;
        pts.push(u);
        pts.push(std::array::from_fn(|k| -0.5 * u[k] + h * w[k]));
        pts.push(std::array::from_fn(|k| -0.5 * u[k] - h * w[k]));
    }
    while pts.len() < n {
        let u = unit_vector(rng);
        pts.push(u);
        pts.push(u.map(|x| -x));
    }
    pts
}

fn cube<R: Rng + ?Sized>(rng: &mut R) -> Point {
    let axis = rng.random_range(0..3);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p: Point = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    p[axis] = side;
    p
}

fn cylinder<R: Rng + ?Sized>(rng: &mut R) -> Point {
    // Lateral area 4π, each cap π.
    let theta = rng.random_range(0.0..2.0 * PI);
    let u: f64 = rng.random_range(0.0..6.0);
    if u < 4.0 {
        [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
    } else {
        let r = rng.random::<f64>().sqrt();
        let z = if u < 5.0 { 1.0 } else { -1.0 };
        [r * theta.cos(), r * theta.sin(), z]
    }
}

fn cone<R: Rng + ?Sized>(rng: &mut R) -> Point {
    // Apex at z = 1, base of radius 1 at z = -1; lateral area π√5, base π.
    let theta = rng.random_range(0.0..2.0 * PI);
    let lateral = 5f64.sqrt();
    let t = rng.random::<f64>().sqrt();
    if rng.random_range(0.0..lateral + 1.0) < lateral {
        [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
    } else {
        [t * theta.cos(), t * theta.sin(), -1.0]
    }
}

fn torus<R: Rng + ?Sized>(rng: &mut R) -> Point {
    let (big, small) = (1.0, 0.35);
    loop {
        let theta = rng.random_range(0.0..2.0 * PI);
        let phi = rng.random_range(0.0..2.0 * PI);
        let ring = big + small * phi.cos();
        if rng.random_range(0.0..big + small) < ring {
            return [ring * theta.cos(), ring * theta.sin(), small * phi.sin()];
        }
    }
}

fn plane<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        0.0,
    ]
}

/// Uniformly random rotation matrix from a unit quaternion.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// One normalized cloud of `shape`: surface sample, anisotropic scale in
/// [0.5, 1.5] per axis (not for spheres), random rotation, Gaussian jitter.
pub fn sample_shape<R: Rng + ?Sized>(
    shape: Shape,
    n: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Config("points per cloud must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} invalid")));
    }
    let mut pts: Vec<Point> = match shape {
        Shape::Sphere => sphere(n, rng),
        Shape::Cube => (0..n).map(|_| cube(rng)).collect(),
        Shape::Cylinder => (0..n).map(|_| cylinder(rng)).collect(),
        Shape::Cone => (0..n).map(|_| cone(rng)).collect(),
        Shape::Torus => (0..n).map(|_| torus(rng)).collect(),
        Shape::Plane => (0..n).map(|_| plane(rng)).collect(),
    };
    if shape != Shape::Sphere {
        let s: Point = std::array::from_fn(|_| rng.random_range(0.5..=1.5));
        for p in &mut pts {
            for k in 0..3 {
                p[k] *= s[k];
            }
        }
    }
    let rot = random_rotation(rng);
    for p in &mut pts {
        *p = std::array::from_fn(|r| (0..3).map(|c| rot[r][c] * p[c]).sum());
    }
    if noise_sigma > 0.0 {
        let jitter = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += jitter.sample(rng);
            }
        }
    }
    Ok(normalize(&PointCloud::new(pts, None)?))
}

/// Balanced labelled dataset with a stratified deterministic split.
pub fn synth_dataset(config: &SynthConfig) -> Result<Dataset> {
    if config.classes.is_empty() || config.per_class == 0 {
        return Err(Error::Config(
            "need at least one class and one cloud per class".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} not in [0, 1)",
            config.test_fraction
        )));
    }
    let n_test = (config.per_class as f64 * config.test_fraction).round() as usize;
    let mut clouds = Vec::with_capacity(config.classes.len() * config.per_class);
    let mut split = Vec::with_capacity(clouds.capacity());
    for (c, &shape) in config.classes.iter().enumerate() {
        let mut order: Vec<usize> = (0..config.per_class).collect();
        order.shuffle(&mut rng::derived(config.seed, &[purpose::SPLIT, c as u64]));
        let mut is_test = vec![false; config.per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (i, &test) in is_test.iter().enumerate() {
            let mut r = rng::derived(config.seed, &[purpose::SYNTH, c as u64, i as u64]);
            let mut cloud = sample_shape(shape, config.n_points, config.noise_sigma, &mut r)?;
            cloud.label = Some(c);
            clouds.push(cloud);
            split.push(if test { Split::Test } else { Split::Train });
        }
    }
    Dataset::new(
        clouds,
        config
            .classes
            .iter()
            .map(|s| s.name().to_string())
            .collect(),
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;

    #[test]
    fn noiseless_sphere_is_on_unit_sphere() {
        for n in [1, 2, 3, 100, 101, 1024] {
            let c = sample_shape(Shape::Sphere, n, 0.0, &mut rng::stream(n as u64)).unwrap();
            let m = c.centroid();
            for p in &c.points {
                assert!((dist2(p, &m).sqrt() - 1.0).abs() < 1e-9 || n == 1);
            }
        }
    }

    #[test]
    fn every_shape_is_normalized() {
        for s in Shape::ALL {
            let c = sample_shape(s, 500, 0.01, &mut rng::stream(3)).unwrap();
            let m = c.centroid();
            assert!(m.iter().all(|v| v.abs() < 1e-12));
            let max = c
                .points
                .iter()
                .map(|p| dist2(p, &[0.0; 3]))
                .fold(0.0, f64::max);
            assert!((max.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_and_split() {
        let cfg = SynthConfig {
            per_class: 50,
            n_points: 64,
            ..SynthConfig::default()
        };
        let d = synth_dataset(&cfg).unwrap();
        assert_eq!(d.clouds.len(), 300);
        for c in 0..6 {
            let idx: Vec<usize> = (0..300).filter(|&i| d.clouds[i].label == Some(c)).collect();
            assert_eq!(idx.len(), 50);
            assert_eq!(
                idx.iter().filter(|&&i| d.split[i] == Split::Test).count(),
                10
            );
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = SynthConfig {
            per_class: 3,
            n_points: 50,
            seed: 9,
            ..SynthConfig::default()
        };
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
    }

    #[test]
    fn class_list_parsing() {
        assert_eq!(
            Shape::parse_list("2").unwrap(),
            vec![Shape::Sphere, Shape::Cube]
        );
        assert_eq!(
            Shape::parse_list("torus, cone").unwrap(),
            vec![Shape::Torus, Shape::Cone]
        );
        for bad in ["0", "7", "sphere,blob", "cube,cube"] {
            match Shape::parse_list(bad) {
                Err(Error::Config(m)) => assert!(m.contains("--classes")),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }
}
