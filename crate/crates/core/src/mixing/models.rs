use super::{check_simplex, pair_count, AbundanceTensor, EndmemberMatrix, HsiCube, NonlinearField};
use crate::error::{Error, Result};
use crate::tensor::Tape;

fn check_pixel(m: &EndmemberMatrix, a: &[f32]) -> Result<()> {
    if a.len() != m.count() {
        return Err(Error::data(format!(
            "{} abundances for {} endmembers",
            a.len(),
            m.count()
        )));
    }
    check_simplex(a)
}

/// Linear mixture `M^T a`.
pub fn lmm_pixel(m: &EndmemberMatrix, a: &[f32]) -> Result<Vec<f32>> {
    check_pixel(m, a)?;
    let mut y = vec![0.0f32; m.bands()];
    for (row, &ar) in m.rows().zip(a) {
        for (yl, &ml) in y.iter_mut().zip(row) {
            *yl += ar * ml;
        }
    }
    Ok(y)
}

/// Polynomial post-nonlinear mixture `x + b * x ⊙ x` with `x = M^T a`.
pub fn ppnmm_pixel(m: &EndmemberMatrix, a: &[f32], b: f32) -> Result<Vec<f32>> {
    if !b.is_finite() {
        return Err(Error::data("nonlinear coefficient must be finite"));
    }
    let mut y = lmm_pixel(m, a)?;
    for v in &mut y {
        *v += b * *v * *v;
    }
    Ok(y)
}

/// Generalized bilinear mixture: the linear mixture plus
/// `beta_ij a_i a_j (m_i ⊙ m_j)` for every pair `i < j`.
pub fn gbm_pixel(m: &EndmemberMatrix, a: &[f32], beta: &[f32]) -> Result<Vec<f32>> {
    let r = m.count();
    if beta.len() != pair_count(r) {
        return Err(Error::data(format!(
            "{} pair coefficients for {r} endmembers",
            beta.len()
        )));
    }
    if beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::data("GBM coefficients must lie in [0, 1]"));
    }
    let mut y = lmm_pixel(m, a)?;
    let mut k = 0;
    for i in 0..r {
        for j in i + 1..r {
            let w = beta[k] * a[i] * a[j];
            k += 1;
            for ((yl, &mi), &mj) in y.iter_mut().zip(m.row(i)).zip(m.row(j)) {
                *yl += w * mi * mj;
            }
        }
    }
    Ok(y)
}

/// Whole-image PPNMM forward model `A x3 M + B ⊙ (A x3 M) ⊙ (A x3 M)`.
pub fn ppnmm_image(a: &AbundanceTensor, m: &EndmemberMatrix, b: &NonlinearField) -> Result<HsiCube> {
    if a.endmembers() != m.count() {
        return Err(Error::data(format!(
            "abundances have {} channels, endmember matrix has {} rows",
            a.endmembers(),
            m.count()
        )));
    }
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::data(format!(
            "abundances are {}x{}, nonlinear field is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let tape = Tape::new();
    let lin = tape
        .constant(a.tensor().clone())
        .mode3_product(tape.constant(m.tensor().clone()))?;
    let bilinear = tape.constant(b.tensor().clone()).broadcast_field_mul(lin.mul(lin)?)?;
    let y = lin.add(bilinear)?;
    HsiCube::new(y.value().as_ref().clone())
}
