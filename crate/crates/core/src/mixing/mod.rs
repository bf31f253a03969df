//! Mixing-model data types, forward simulators (LMM, GBM, PPNMM) and
//! synthetic dataset generation.

mod models;
mod synth;

pub use models::{gbm_pixel, lmm_pixel, ppnmm_image, ppnmm_pixel};
pub use synth::{
    add_noise_snr, gen_abundance_field, gen_dataset, gen_endmembers, load_endmembers, Dataset,
    MixingModel, NoiseSpec, ABUNDANCE_CONTRAST, B_RANGE, DEFAULT_SMOOTHNESS, MIN_ENDMEMBER_ANGLE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the per-pixel abundance sum.
pub const ASC_TOLERANCE: f32 = 1e-5;

/// Observed or reconstructed image, `(rows, cols, bands)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: Tensor,
}

impl HsiCube {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::data(format!("cube must be rank 3, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::data("cube contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn pixel_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let l = self.bands();
        &self.data.data()[(row * self.cols() + col) * l..][..l]
    }

    /// Pixel spectra in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.data().chunks(self.bands().max(1))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// `R` endmember spectra over `L` bands, stored `(R, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    values: Tensor,
}

impl EndmemberMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::data(format!("endmembers must be (R, L), got {:?}", values.shape())));
        }
        let l = values.shape()[1];
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data("endmember entries must be finite and nonnegative"));
        }
        if l == 0 || values.data().chunks(l).any(|row| row.iter().all(|&v| v == 0.0)) {
            return Err(Error::data("endmember row is identically zero"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::data("endmember rows have differing lengths"));
        }
        Self::new(Tensor::new(&[rows.len(), l], rows.concat())?)
    }

    pub fn count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values.data()[r * self.bands()..][..self.bands()]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.data().chunks(self.bands())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Per-pixel fractions `(rows, cols, R)`, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceTensor {
    values: Tensor,
}

impl AbundanceTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::data(format!("abundances must be rank 3, got {:?}", values.shape())));
        }
        let r = values.shape()[2];
        if r == 0 {
            return Err(Error::data("abundances need at least one channel"));
        }
        for px in values.data().chunks(r) {
            check_simplex(px)?;
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn endmembers(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let r = self.endmembers();
        &self.values.data()[(row * self.cols() + col) * r..][..r]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Validates nonnegativity and sum-to-one of one abundance vector.
pub(crate) fn check_simplex(a: &[f32]) -> Result<()> {
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::data(format!("abundances must be nonnegative: {a:?}")));
    }
    let sum: f32 = a.iter().sum();
    if (sum - 1.0).abs() > ASC_TOLERANCE {
        return Err(Error::data(format!("abundances sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Per-pixel nonlinear coefficient field `(rows, cols, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearField {
    values: Tensor,
}

impl NonlinearField {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[2] != 1 {
            return Err(Error::data(format!(
                "nonlinear field must be (rows, cols, 1), got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::data("nonlinear field contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values.data()[row * self.cols() + col]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Pairwise bilinear coefficients `beta_ij` (`i < j`) per pixel, stored
/// `(rows, cols, R(R-1)/2)` in `(0,1), (0,2), .., (1,2), ..` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmCoefficients {
    beta: Tensor,
}

impl GbmCoefficients {
    pub fn new(beta: Tensor) -> Result<Self> {
        if beta.rank() != 3 {
            return Err(Error::data("GBM coefficients must be rank 3"));
        }
        if beta.data().iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::data("GBM coefficients must lie in [0, 1]"));
        }
        Ok(Self { beta })
    }

    pub fn pairs(&self) -> usize {
        self.beta.shape()[2]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let n = self.pairs();
        &self.beta.data()[(row * self.beta.shape()[1] + col) * n..][..n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.beta
    }
}

/// Number of unordered endmember pairs.
pub fn pair_count(r: usize) -> usize {
    r * r.saturating_sub(1) / 2
}
