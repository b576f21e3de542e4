use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Default cutoff on normalized eigenvalues for the effective rank.
pub const RANK_THRESHOLD: f64 = 1e-3;

/// Eigen-spectrum of the feature covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, clamped to be nonnegative.
    pub eigenvalues: Vec<f64>,
    /// Each eigenvalue divided by the largest (all zero when degenerate).
    pub normalized: Vec<f64>,
    /// `log10` of `normalized`, floored at the smallest positive f64.
    pub log10_normalized: Vec<f64>,
    pub effective_rank: usize,
    pub threshold: f64,
    /// Set when the largest eigenvalue is zero (fully collapsed features).
    pub degenerate: bool,
}

/// Sample covariance `[D, D]` of the mean-centered rows of `x [M, D]`.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::Dimension(format!(
            "covariance needs a non-empty [M, D] matrix, got {:?}",
            x.shape()
        )));
    }
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mean = x.mean_rows()?;
    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for r in x.rows() {
        for j in 0..d {
            c[j] = r[j] - mean.data()[j];
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (m.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Tensor::new(vec![d, d], cov)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations,
/// iterated until the off-diagonal Frobenius norm drops below
/// `1e-10 · ‖A‖_F`. Returns eigenvalues in descending order and the
/// matching unit eigenvectors as columns of a `[D, D]` tensor, each with its
/// largest-magnitude entry positive.
pub fn jacobi_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        s => {
            return Err(Error::Dimension(format!(
                "square matrix required, got {s:?}"
            )))
        }
    };
    let mut m = a.data().to_vec();
    for i in 0..n {
        for j in 0..i {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-12 * (1.0 + m[i * n + j].abs()) {
                return Err(Error::Parameter("matrix is not symmetric".into()));
            }
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-10 * total;
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > tol {
        sweeps += 1;
        if sweeps > 100 {
            return Err(Error::Numeric("Jacobi iteration did not converge".into()));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        let mut big = 0;
        for k in 0..n {
            if v[k * n + i].abs() > v[big * n + i].abs() {
                big = k;
            }
        }
        let sign = if v[big * n + i] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vecs[k * n + col] = sign * v[k * n + i];
        }
    }
    Ok((values, Tensor::new(vec![n, n], vecs)?))
}

/// Covariance eigen-spectrum with normalization and effective rank.
pub fn spectrum(features: &Tensor, threshold: f64) -> Result<SpectrumReport> {
    let (vals, _) = jacobi_eigen(&covariance(features)?)?;
    let eigenvalues: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let degenerate = top <= 0.0;
    let normalized: Vec<f64> = eigenvalues
        .iter()
        .map(|&v| if degenerate { 0.0 } else { v / top })
        .collect();
    let log10_normalized = normalized
        .iter()
        .map(|&v| v.max(f64::MIN_POSITIVE).log10())
        .collect();
    let effective_rank = normalized.iter().filter(|&&v| v > threshold).count();
    Ok(SpectrumReport {
        eigenvalues,
        normalized,
        log10_normalized,
        effective_rank,
        threshold,
        degenerate,
    })
}

/// Coordinates of the mean-centered rows on the top `dims` principal axes.
pub fn pca_project(features: &Tensor, dims: usize) -> Result<Tensor> {
    let cov = covariance(features)?;
    let d = cov.shape()[0];
    if dims == 0 || dims > d {
        return Err(Error::Parameter(format!(
            "cannot project {d} columns to {dims}"
        )));
    }
    let (_, vecs) = jacobi_eigen(&cov)?;
    let mean = features.mean_rows()?;
    let mut out = Vec::with_capacity(features.shape()[0] * dims);
    for r in features.rows() {
        for c in 0..dims {
            out.push(
                (0..d)
                    .map(|k| (r[k] - mean.data()[k]) * vecs.data()[k * d + c])
                    .sum(),
            );
        }
    }
    Tensor::new(vec![features.shape()[0], dims], out)
}

/// CSV of projected coordinates with an optional label column.
pub fn write_projection_csv<W: Write>(
    w: &mut W,
    coords: &Tensor,
    labels: &[Option<usize>],
) -> Result<()> {
    let dims = coords.last_dim();
    let head: Vec<String> = (0..dims).map(|i| format!("pc{}", i + 1)).collect();
    writeln!(w, "index,{},label", head.join(","))?;
    for (i, r) in coords.rows().enumerate() {
        let vals: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .map_or(String::new(), |l| l.to_string());
        writeln!(w, "{i},{},{label}", vals.join(","))?;
    }
    Ok(())
}

pub fn write_spectrum_csv<W: Write>(w: &mut W, report: &SpectrumReport) -> Result<()> {
    writeln!(w, "index,eigenvalue,normalized,log10_normalized")?;
    for i in 0..report.eigenvalues.len() {
        writeln!(
            w,
            "{i},{:?},{:?},{:?}",
            report.eigenvalues[i], report.normalized[i], report.log10_normalized[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_sym(n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = r.random_range(-2.0..2.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        Tensor::new(vec![n, n], a).unwrap()
    }

    #[test]
    fn two_by_two_matches_closed_form() {
        for seed in 0..50 {
            let a = random_sym(2, seed);
            let [p, q, _, s] = [a.data()[0], a.data()[1], a.data()[2], a.data()[3]];
            let mid = (p + s) / 2.0;
            let rad = (((p - s) / 2.0).powi(2) + q * q).sqrt();
            let (vals, _) = jacobi_eigen(&a).unwrap();
            assert!((vals[0] - (mid + rad)).abs() < 1e-8);
            assert!((vals[1] - (mid - rad)).abs() < 1e-8);
        }
    }

    #[test]
    fn three_by_three_roots_of_characteristic_polynomial() {
        for seed in 0..50 {
            let a = random_sym(3, 100 + seed);
            let (vals, _) = jacobi_eigen(&a).unwrap();
            let m = |i: usize, j: usize| a.data()[i * 3 + j];
            let det = |l: f64| {
                let b = |i, j| m(i, j) - if i == j { l } else { 0.0 };
                b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                    - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                    + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0))
            };
            for &l in &vals {
                assert!(det(l).abs() < 1e-8, "seed {seed}: p({l}) = {}", det(l));
            }
            let trace = m(0, 0) + m(1, 1) + m(2, 2);
            assert!((vals.iter().sum::<f64>() - trace).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenvectors_reconstruct() {
        let a = random_sym(6, 7);
        let (vals, v) = jacobi_eigen(&a).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let r: f64 = (0..6)
                    .map(|k| v.data()[i * 6 + k] * vals[k] * v.data()[j * 6 + k])
                    .sum();
                assert!((r - a.data()[i * 6 + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let x = Tensor::new(vec![5, 3], [1.0, 2.0, 3.0].repeat(5)).unwrap();
        let r = spectrum(&x, RANK_THRESHOLD).unwrap();
        assert!(r.degenerate);
        assert!(r.eigenvalues.iter().all(|&v| v == 0.0));
        assert_eq!(r.effective_rank, 0);
    }

    #[test]
    fn rank_one_features() {
        let mut r = rng::stream(3);
        let dir = [0.3, -1.2, 0.7, 2.0];
        let data: Vec<f64> = (0..50)
            .flat_map(|_| {
                let s: f64 = r.random_range(-1.0..1.0);
                dir.map(|d| s * d)
            })
            .collect();
        let rep = spectrum(&Tensor::new(vec![50, 4], data).unwrap(), RANK_THRESHOLD).unwrap();
        assert!(rep.eigenvalues[0] > 0.1);
        assert!(rep.eigenvalues[1..].iter().all(|&v| v.abs() < 1e-9));
        assert_eq!(rep.effective_rank, 1);
        assert_eq!(rep.normalized[0], 1.0);
    }

    #[test]
    fn isotropic_gaussian_is_flat() {
        let x = Tensor::randn(&[10_000, 4], 1.0, &mut rng::stream(4));
        let r = spectrum(&x, RANK_THRESHOLD).unwrap();
        assert!(
            r.normalized.iter().all(|&v| (0.9..=1.0).contains(&v)),
            "{:?}",
            r.normalized
        );
        assert_eq!(r.effective_rank, 4);
    }

    #[test]
    fn permutation_and_shift_invariance() {
        let x = Tensor::randn(&[40, 5], 1.0, &mut rng::stream(5));
        let base = spectrum(&x, RANK_THRESHOLD).unwrap();
        let mut rows: Vec<Vec<f64>> = x.rows().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        for r in &mut rows {
            for (j, v) in r.iter_mut().enumerate() {
                *v += 10.0 * j as f64 - 3.0;
            }
        }
        let y = Tensor::from_rows(&rows).unwrap();
        let other = spectrum(&y, RANK_THRESHOLD).unwrap();
        for (a, b) in base.eigenvalues.iter().zip(&other.eigenvalues) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_separates_principal_axis() {
        let mut r = rng::stream(6);
        // Mirrored pairs make the x/y covariance exactly zero.
        let data: Vec<f64> = (0..100)
            .flat_map(|_| {
                let a = 10.0 * r.random_range(-1.0..1.0);
                let b = 0.1 * r.random_range(-1.0..1.0);
                [a, b, 0.0, -a, b, 0.0]
            })
            .collect();
        let x = Tensor::new(vec![200, 3], data).unwrap();
        let p = pca_project(&x, 2).unwrap();
        let mean0 = x.mean_rows().unwrap().data()[0];
        for (row, orig) in p.rows().zip(x.rows()) {
            assert!((row[0].abs() - (orig[0] - mean0).abs()).abs() < 1e-6);
        }
        let mut buf = Vec::new();
        write_projection_csv(&mut buf, &p, &[Some(1); 200]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 201);
        assert!(text.starts_with("index,pc1,pc2,label\n"));
    }
}
