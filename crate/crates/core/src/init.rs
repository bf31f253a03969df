//! Endmember initializers: vertex component analysis and a deterministic
//! farthest-point fallback.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mixing::{EndmemberMatrix, HsiCube};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Vca,
    FarthestPoint,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vca" => Ok(Self::Vca),
            "farthest_point" => Ok(Self::FarthestPoint),
            other => Err(Error::Config(format!("unknown init method {other:?}"))),
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vca => "vca",
            Self::FarthestPoint => "farthest_point",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub method: InitMethod,
    pub seed: u64,
    /// Replaces the SNR estimate that picks VCA's projection.
    pub snr_override: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: InitMethod::Vca,
            seed: 0,
            snr_override: None,
        }
    }
}

pub fn initialize(cube: &HsiCube, r: usize, cfg: &InitConfig) -> Result<EndmemberMatrix> {
    match cfg.method {
        InitMethod::Vca => vca_with(cube, r, cfg.seed, cfg.snr_override),
        InitMethod::FarthestPoint => farthest_point_init(cube, r),
    }
}

fn gather(cube: &HsiCube, indices: &[usize]) -> Result<EndmemberMatrix> {
    let l = cube.bands();
    let data = cube.tensor().data();
    let rows: Vec<Vec<f32>> = indices
        .iter()
        .map(|&i| data[i * l..(i + 1) * l].iter().map(|v| v.max(0.0)).collect())
        .collect();
    EndmemberMatrix::from_rows(&rows)
}

fn norm_sq(px: &[f32]) -> f64 {
    px.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

/// Residual norm, relative to the brightest pixel, below which a pixel
/// counts as lying in the span of those already chosen.
const RANK_TOLERANCE: f64 = 1e-6;

/// Index of the pixel with the largest Euclidean norm (first on ties).
fn max_norm_pixel(cube: &HsiCube) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, px) in cube.pixels().enumerate() {
        let n = norm_sq(px);
        if n > best.1 {
            best = (i, n);
        }
    }
    best.0
}

/// Top `k` eigenvectors of a symmetric matrix as columns, by decreasing
/// eigenvalue.
fn leading_eigenvectors(m: DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(eig.eigenvectors.nrows(), k, |i, j| eig.eigenvectors[(i, order[j])])
}

/// Vertex component analysis with an estimated SNR choosing between the
/// projective and the additive-noise projection.
pub fn vca(cube: &HsiCube, r: usize, seed: u64) -> Result<EndmemberMatrix> {
    vca_with(cube, r, seed, None)
}

/// SNR in dB, `+inf` when the subspace captures all the power.
fn estimate_snr(y: &DMatrix<f64>, mean: &DVector<f64>, projected: &DMatrix<f64>, r: usize) -> f64 {
    let (l, n) = (y.nrows() as f64, y.ncols() as f64);
    let p_y = y.norm_squared() / n;
    let p_x = projected.norm_squared() / n + mean.norm_squared();
    let noise = p_y - p_x;
    if noise <= p_y * 1e-12 {
        return f64::INFINITY;
    }
    10.0 * ((p_x - r as f64 / l * p_y).max(f64::MIN_POSITIVE) / noise).log10()
}

pub fn vca_with(cube: &HsiCube, r: usize, seed: u64, snr_override: Option<f64>) -> Result<EndmemberMatrix> {
    let (l, n) = (cube.bands(), cube.pixel_count());
    if r == 0 || r > l.min(n) {
        return Err(Error::data(format!("cannot extract {r} endmembers from {n} pixels of {l} bands")));
    }
    if r == 1 {
        return gather(cube, &[max_norm_pixel(cube)]);
    }
    // bands x pixels
    let y = DMatrix::from_fn(l, n, |b, i| f64::from(cube.tensor().data()[i * l + b]));
    let mean = y.column_mean();
    let centred = DMatrix::from_fn(l, n, |b, i| y[(b, i)] - mean[b]);
    let basis = leading_eigenvectors(&centred * centred.transpose() / n as f64, r);
    let x_p = basis.transpose() * &centred;
    let snr = snr_override.unwrap_or_else(|| estimate_snr(&y, &mean, &x_p, r));
    let threshold = 15.0 + 10.0 * (r as f64).log10();

    // points whose simplex vertices are searched, r x n
    let points = if snr < threshold {
        let x = x_p.rows(0, r - 1).into_owned();
        let c = (0..n).map(|i| x.column(i).norm()).fold(0.0, f64::max);
        DMatrix::from_fn(r, n, |d, i| if d < r - 1 { x[(d, i)] } else { c })
    } else {
        let basis = leading_eigenvectors(&y * y.transpose() / n as f64, r);
        let x = basis.transpose() * &y;
        let u = x.column_mean();
        let mut out = x.clone();
        for i in 0..n {
            let scale = x.column(i).dot(&u);
            if scale.abs() < 1e-300 {
                return Err(Error::data("pixel orthogonal to the mean direction"));
            }
            out.column_mut(i).unscale_mut(scale);
        }
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::<f64>::zeros(r, r);
    a[(r - 1, 0)] = 1.0;
    let mut picked = Vec::with_capacity(r);
    for i in 0..r {
        let w = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
        let pinv = a
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numerical(format!("VCA pseudo-inverse failed: {e}")))?;
        let f = &w - &a * (pinv * &w);
        let norm = f.norm();
        if norm < 1e-12 {
            return Err(Error::data("rank-deficient pixel set"));
        }
        let f = f / norm;
        let v = f.transpose() * &points;
        let (mut best, mut best_val) = (0, -1.0);
        for (j, val) in v.iter().enumerate() {
            if val.abs() > best_val {
                best = j;
                best_val = val.abs();
            }
        }
        if best_val < 1e-9 || picked.contains(&best) {
            return Err(Error::data(format!("fewer than {r} affinely independent pixels")));
        }
        picked.push(best);
        a.set_column(i, &points.column(best));
    }
    gather(cube, &picked)
}

/// Greedy selection starting from the brightest pixel: each step adds the
/// pixel with the largest residual after projecting out the span of those
/// already chosen. The residual norm is convex in the pixel, so on a
/// noiseless linear mixture every pick is a pure pixel. Deterministic.
pub fn farthest_point_init(cube: &HsiCube, r: usize) -> Result<EndmemberMatrix> {
    let n = cube.pixel_count();
    let l = cube.bands();
    if r == 0 || r > n {
        return Err(Error::data(format!("cannot pick {r} endmembers from {n} pixels")));
    }
    let first = max_norm_pixel(cube);
    let top = norm_sq(cube.pixel(first / cube.cols(), first % cube.cols())).sqrt();
    if top == 0.0 {
        return Err(Error::data("all pixels are zero"));
    }
    let mut residual: Vec<f64> = cube.tensor().data().iter().map(|&v| f64::from(v)).collect();
    let mut picked = vec![first];
    while picked.len() < r {
        // remove the direction of the latest pick from every residual
        let last = picked[picked.len() - 1];
        let q: Vec<f64> = residual[last * l..(last + 1) * l].to_vec();
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq > 0.0 {
            for px in residual.chunks_mut(l) {
                let k = px.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / qq;
                px.iter_mut().zip(&q).for_each(|(a, b)| *a -= k * b);
            }
        }
        let (mut best, mut best_val) = (0, 0.0);
        for (i, px) in residual.chunks(l).enumerate() {
            let v: f64 = px.iter().map(|v| v * v).sum();
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        if best_val.sqrt() <= RANK_TOLERANCE * top {
            return Err(Error::data(format!("cube has fewer than {r} linearly independent pixels")));
        }
        picked.push(best);
    }
    gather(cube, &picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cube(pixels: &[&[f32]]) -> HsiCube {
        let l = pixels[0].len();
        HsiCube::new(Tensor::new(&[1, pixels.len(), l], pixels.concat()).unwrap()).unwrap()
    }

    #[test]
    fn farthest_point_recovers_repeated_pure_pixels() {
        let a: &[f32] = &[1.0, 0.1, 0.1];
        let b: &[f32] = &[0.1, 0.8, 0.1];
        let c: &[f32] = &[0.1, 0.1, 0.9];
        let y = cube(&[b, a, c, b, a, c, a]);
        let m = farthest_point_init(&y, 3).unwrap();
        assert_eq!(m.row(0), a);
        let mut rows: Vec<&[f32]> = m.rows().collect();
        let mut expected = vec![a, b, c];
        rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
        expected.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(rows, expected);
        assert_eq!(farthest_point_init(&y, 1).unwrap().row(0), a);
        assert!(farthest_point_init(&cube(&[a, a, a]), 2).is_err());
    }

    #[test]
    fn vca_single_endmember_is_brightest_pixel() {
        let y = cube(&[&[0.1, 0.2], &[0.5, 0.4], &[0.3, 0.3]]);
        assert_eq!(vca(&y, 1, 0).unwrap().row(0), &[0.5, 0.4]);
        assert!(vca(&y, 3, 0).is_err());
    }

    #[test]
    fn method_names() {
        assert_eq!("farthest_point".parse::<InitMethod>().unwrap(), InitMethod::FarthestPoint);
        assert!("nfindr".parse::<InitMethod>().is_err());
    }
}
