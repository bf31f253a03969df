use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{
    gbm_pixel, pair_count, ppnmm_image, AbundanceTensor, EndmemberMatrix, GbmCoefficients, HsiCube,
    NonlinearField,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Power-law exponent of the abundance fields unless overridden.
pub const DEFAULT_SMOOTHNESS: f64 = 2.0;
/// Multiplier on the standardized fields before the per-pixel softmax.
/// Larger values give more near-pure pixels.
pub const ABUNDANCE_CONTRAST: f64 = 4.0;
/// Synthetic PPNMM coefficients are drawn from `U[-B_RANGE, B_RANGE]`.
pub const B_RANGE: f32 = 0.3;
/// Minimum pairwise spectral angle between generated endmembers (radians).
pub const MIN_ENDMEMBER_ANGLE: f64 = 0.1;

const MAX_ENDMEMBER_DRAWS: usize = 1000;

/// Independent generator for `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingModel {
    Lmm,
    Gbm,
    Ppnmm,
}

impl FromStr for MixingModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lmm" => Ok(Self::Lmm),
            "gbm" => Ok(Self::Gbm),
            "ppnmm" => Ok(Self::Ppnmm),
            other => Err(Error::Config(format!("unknown mixing model {other:?}"))),
        }
    }
}

impl fmt::Display for MixingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lmm => "lmm",
            Self::Gbm => "gbm",
            Self::Ppnmm => "ppnmm",
        })
    }
}

/// Additive white Gaussian noise at a target SNR. `snr_db = +inf` means
/// no noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(snr_db: f64, seed: u64) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::data(format!("invalid SNR {snr_db}")));
        }
        Ok(Self { snr_db, seed })
    }

    pub fn clean() -> Self {
        Self {
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.snr_db == f64::INFINITY
    }
}

/// Adds i.i.d. Gaussian noise with variance `mean(Y^2) * 10^(-snr/10)`.
pub fn add_noise_snr(y: &HsiCube, spec: NoiseSpec) -> HsiCube {
    if spec.is_clean() {
        return y.clone();
    }
    let data = y.tensor().data();
    let power = data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / data.len().max(1) as f64;
    let sigma = (power * 10f64.powf(-spec.snr_db / 10.0)).sqrt();
    let mut rng = stream_rng(spec.seed, 0);
    let noisy = data
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (f64::from(v) + sigma * n) as f32
        })
        .collect();
    let t = Tensor::new(y.tensor().shape(), noisy).expect("shape unchanged");
    HsiCube::new(t).expect("finite noise")
}

fn fft2(buf: &mut [Complex64], rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row_fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
    for row in buf.chunks_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(rows) } else { planner.plan_fft_forward(rows) };
    let mut column = vec![Complex64::default(); rows];
    for j in 0..cols {
        for i in 0..rows {
            column[i] = buf[i * cols + j];
        }
        col_fft.process(&mut column);
        for i in 0..rows {
            buf[i * cols + j] = column[i];
        }
    }
}

/// Signed frequency magnitude of FFT bin `i` out of `n`, in cycles/sample.
fn freq(i: usize, n: usize) -> f64 {
    i.min(n - i) as f64 / n as f64
}

/// Zero-mean, unit-variance Gaussian random field with power-law
/// amplitude spectrum `|k|^-smoothness`.
fn gaussian_field(rows: usize, cols: usize, smoothness: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..rows * cols)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    fft2(&mut buf, rows, cols, planner, false);
    for i in 0..rows {
        for j in 0..cols {
            let k = freq(i, rows).hypot(freq(j, cols));
            buf[i * cols + j] *= if k == 0.0 { 0.0 } else { k.powf(-smoothness) };
        }
    }
    fft2(&mut buf, rows, cols, planner, true);
    let mut field: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut field {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
    field
}

/// `R` power-law Gaussian random fields pushed through a per-pixel softmax.
pub fn gen_abundance_field(rows: usize, cols: usize, r: usize, smoothness: f64, seed: u64) -> Result<AbundanceTensor> {
    if rows == 0 || cols == 0 || r == 0 {
        return Err(Error::data(format!("invalid abundance extents {rows}x{cols}x{r}")));
    }
    if !smoothness.is_finite() {
        return Err(Error::data("smoothness must be finite"));
    }
    let mut planner = FftPlanner::new();
    let fields: Vec<Vec<f64>> = (0..r)
        .map(|k| gaussian_field(rows, cols, smoothness, &mut stream_rng(seed, k as u64), &mut planner))
        .collect();
    let mut out = vec![0.0f32; rows * cols * r];
    let mut logits = vec![0.0f64; r];
    for (p, px) in out.chunks_mut(r).enumerate() {
        for (l, f) in logits.iter_mut().zip(&fields) {
            *l = ABUNDANCE_CONTRAST * f[p];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (a, l) in px.iter_mut().zip(&logits) {
            *a = ((l - max).exp() / total) as f32;
        }
    }
    AbundanceTensor::new(Tensor::new(&[rows, cols, r], out)?)
}

pub(crate) fn spectral_angle(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0).acos()
}

fn bump_spectrum(l: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let count = rng.random_range(3..=6);
    let bumps: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.04..0.2),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..l)
        .map(|i| {
            let x = if l > 1 { i as f64 / (l - 1) as f64 } else { 0.5 };
            0.05 + bumps
                .iter()
                .map(|(amp, mu, sd)| amp * (-(x - mu).powi(2) / (2.0 * sd * sd)).exp())
                .sum::<f64>()
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|v| (v / max) as f32).collect()
}

/// Smooth spectra built from Gaussian bumps, normalized to peak 1, with
/// pairwise spectral angles of at least [`MIN_ENDMEMBER_ANGLE`].
pub fn gen_endmembers(r: usize, l: usize, seed: u64) -> Result<EndmemberMatrix> {
    if r == 0 || l == 0 || r > l {
        return Err(Error::data(format!("cannot generate {r} endmembers over {l} bands")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(r);
    for _ in 0..MAX_ENDMEMBER_DRAWS {
        let cand = bump_spectrum(l, &mut rng);
        if rows.iter().all(|m| spectral_angle(m, &cand) >= MIN_ENDMEMBER_ANGLE) {
            rows.push(cand);
            if rows.len() == r {
                return EndmemberMatrix::from_rows(&rows);
            }
        }
    }
    Err(Error::data(format!(
        "could not draw {r} separated endmembers over {l} bands in {MAX_ENDMEMBER_DRAWS} attempts"
    )))
}

/// Reads a header-free `R x L` CSV of nonnegative reflectances.
pub fn load_endmembers(path: impl AsRef<Path>) -> Result<EndmemberMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f32>().map_err(|_| {
                    Error::data(format!("{}:{}: not a number: {:?}", path.display(), n + 1, cell.trim()))
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::data(format!(
                    "{}:{}: expected {first} columns, found {}",
                    path.display(),
                    n + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no endmember rows", path.display())));
    }
    EndmemberMatrix::from_rows(&rows)
}

/// A synthetic scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: MixingModel,
    pub cube: HsiCube,
    pub abundances: AbundanceTensor,
    pub endmembers: EndmemberMatrix,
    /// PPNMM coefficients.
    pub bfield: Option<NonlinearField>,
    pub gbm: Option<GbmCoefficients>,
}

/// Generates endmembers, abundances and model coefficients, applies the
/// forward model and adds noise at `snr_db` (`+inf` for none).
pub fn gen_dataset(
    model: MixingModel,
    rows: usize,
    cols: usize,
    r: usize,
    l: usize,
    snr_db: f64,
    seed: u64,
) -> Result<Dataset> {
    let endmembers = gen_endmembers(r, l, seed)?;
    let abundances = gen_abundance_field(rows, cols, r, DEFAULT_SMOOTHNESS, seed.wrapping_add(1))?;
    let noise = NoiseSpec::new(snr_db, seed.wrapping_add(3))?;
    let mut coef_rng = stream_rng(seed.wrapping_add(2), 0);
    let (clean, bfield, gbm) = match model {
        MixingModel::Ppnmm | MixingModel::Lmm => {
            let b = if model == MixingModel::Ppnmm {
                Tensor::from_fn(&[rows, cols, 1], |_| coef_rng.random_range(-B_RANGE..=B_RANGE))
            } else {
                Tensor::zeros(&[rows, cols, 1])
            };
            let field = NonlinearField::new(b)?;
            let clean = ppnmm_image(&abundances, &endmembers, &field)?;
            (clean, (model == MixingModel::Ppnmm).then_some(field), None)
        }
        MixingModel::Gbm => {
            let pairs = pair_count(r);
            let beta = GbmCoefficients::new(Tensor::from_fn(&[rows, cols, pairs], |_| {
                coef_rng.random_range(0.0..=1.0)
            }))?;
            let mut data = Vec::with_capacity(rows * cols * l);
            for i in 0..rows {
                for j in 0..cols {
                    data.extend(gbm_pixel(&endmembers, abundances.pixel(i, j), beta.pixel(i, j))?);
                }
            }
            (HsiCube::new(Tensor::new(&[rows, cols, l], data)?)?, None, Some(beta))
        }
    };
    Ok(Dataset {
        model,
        cube: add_noise_snr(&clean, noise),
        abundances,
        endmembers,
        bfield,
        gbm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_variation(a: &AbundanceTensor) -> f64 {
        let (rows, cols, r) = (a.rows(), a.cols(), a.endmembers());
        let mut tv = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                for k in 0..r {
                    let v = f64::from(a.pixel(i, j)[k]);
                    if i + 1 < rows {
                        tv += (f64::from(a.pixel(i + 1, j)[k]) - v).abs();
                    }
                    if j + 1 < cols {
                        tv += (f64::from(a.pixel(i, j + 1)[k]) - v).abs();
                    }
                }
            }
        }
        tv / (rows * cols * r) as f64
    }

    #[test]
    fn abundance_fields() {
        let a = gen_abundance_field(64, 64, 4, 2.0, 5).unwrap();
        assert_eq!(a, gen_abundance_field(64, 64, 4, 2.0, 5).unwrap());
        assert_ne!(a, gen_abundance_field(64, 64, 4, 2.0, 6).unwrap());
        let rough = total_variation(&gen_abundance_field(64, 64, 4, 1.0, 5).unwrap());
        let smooth = total_variation(&gen_abundance_field(64, 64, 4, 3.0, 5).unwrap());
        assert!(smooth < rough, "tv {smooth} vs {rough}");
    }

    #[test]
    fn endmember_generation() {
        let m = gen_endmembers(6, 64, 9).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v > 0.0 && v <= 1.0));
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(spectral_angle(m.row(i), m.row(j)) >= MIN_ENDMEMBER_ANGLE);
            }
        }
        assert_eq!(m, gen_endmembers(6, 64, 9).unwrap());
        assert!(gen_endmembers(5, 4, 0).is_err());
        assert!(gen_endmembers(2, 1, 0).is_err());
    }

    #[test]
    fn noise_hits_target_snr() {
        let ds = gen_dataset(MixingModel::Lmm, 100, 100, 3, 50, f64::INFINITY, 1).unwrap();
        let noisy = add_noise_snr(&ds.cube, NoiseSpec::new(20.0, 4).unwrap());
        let (mut sig, mut err) = (0.0f64, 0.0f64);
        for (&y, &n) in ds.cube.tensor().data().iter().zip(noisy.tensor().data()) {
            sig += f64::from(y).powi(2);
            err += (f64::from(n) - f64::from(y)).powi(2);
        }
        let snr = 10.0 * (sig / err).log10();
        assert!((snr - 20.0).abs() < 0.3, "snr {snr}");
        assert_eq!(noisy, add_noise_snr(&ds.cube, NoiseSpec::new(20.0, 4).unwrap()));
        assert_eq!(add_noise_snr(&ds.cube, NoiseSpec::clean()), ds.cube);
    }

    #[test]
    fn dataset_variants() {
        let lmm = gen_dataset(MixingModel::Lmm, 8, 8, 3, 16, 30.0, 2).unwrap();
        assert!(lmm.bfield.is_none() && lmm.gbm.is_none());
        let gbm = gen_dataset(MixingModel::Gbm, 8, 8, 3, 16, 30.0, 2).unwrap();
        assert_eq!(gbm.gbm.as_ref().unwrap().pairs(), 3);
        let pp = gen_dataset(MixingModel::Ppnmm, 8, 8, 3, 16, f64::INFINITY, 2).unwrap();
        let b = pp.bfield.as_ref().unwrap();
        assert!(b.tensor().data().iter().all(|v| v.abs() <= B_RANGE));
        let again = ppnmm_image(&pp.abundances, &pp.endmembers, b).unwrap();
        assert!(again.tensor().max_abs_diff(pp.cube.tensor()) <= 1e-6);
        assert_eq!("PPNMM".parse::<MixingModel>().unwrap(), MixingModel::Ppnmm);
        assert!("hapke".parse::<MixingModel>().is_err());
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "1,0,1\n0,1,1\n").unwrap();
        let m = load_endmembers(&path).unwrap();
        assert_eq!(m.tensor().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        std::fs::write(&path, "1,0,1\n0,1\n").unwrap();
        assert!(matches!(load_endmembers(&path), Err(Error::Data(_))));
        std::fs::write(&path, "1,-0.1\n").unwrap();
        assert!(load_endmembers(&path).is_err());
        std::fs::write(&path, "1,x\n").unwrap();
        assert!(load_endmembers(&path).is_err());
    }
}
