//! Physics-constrained decoder: linear mixing with clamped endmember
//! weights, a per-pixel head estimating the nonlinear coefficient, and the
//! polynomial post-nonlinear reconstruction.

use crate::error::{Error, Result as CrateResult};
use crate::mixing::EndmemberMatrix;
use crate::params::{Bound, Conv3d, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{invalid, Activation, Result, Tensor, Var};

/// Feature width of the nonlinear head.
pub const HEAD_WIDTH: usize = 8;
const HEAD_KERNEL: usize = 5;
const HARDTANH: Activation = Activation::HardTanh { lo: -1.0, hi: 1.0 };

/// Estimates `B` from `[Y, Y_lin, Y_lin^2]`, treating the `3L` channels of
/// each pixel as a depth axis.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearHead {
    pub conv0: Conv3d,
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    /// Zero-initialized, so training starts from the linear model.
    pub out: Linear,
}

impl NonlinearHead {
    pub fn new(init: &mut Init, name: &str) -> Self {
        Self {
            conv0: Conv3d::new(init, &format!("{name}.conv0"), HEAD_KERNEL, 1, HEAD_WIDTH),
            conv1: Conv3d::new(init, &format!("{name}.conv1"), HEAD_KERNEL, HEAD_WIDTH, HEAD_WIDTH),
            conv2: Conv3d::new(init, &format!("{name}.conv2"), HEAD_KERNEL, HEAD_WIDTH, HEAD_WIDTH),
            out: Linear::zeros(init, &format!("{name}.out"), HEAD_WIDTH, 1),
        }
    }

    /// `(rows, cols, 1)` coefficient field.
    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>, y_lin: Var<'t>) -> Result<Var<'t>> {
        let shape = y.shape();
        if shape.len() != 3 || shape != y_lin.shape() {
            return Err(crate::tensor::mismatch("nonlinear_head", &shape, &y_lin.shape()));
        }
        let (rows, cols, l) = (shape[0], shape[1], shape[2]);
        let depth = 3 * l;
        if depth / 2 / 2 == 0 {
            return Err(invalid("nonlinear_head", format!("{l} bands too few for two poolings")));
        }
        let stacked = Var::concat_last(&[y, y_lin, y_lin.mul(y_lin)?])?;
        let x = stacked.permute(&[2, 0, 1])?.reshape(&[depth, rows, cols, 1])?;
        let x = self.conv0.forward(p, x)?;
        let x = self.conv1.forward(p, x)?.activation(HARDTANH)?.maxpool3d(2)?;
        let x = self.conv2.forward(p, x)?.activation(HARDTANH)?.maxpool3d(2)?;
        let d = x.shape()[0];
        let mean = Tensor::full(&[1, d], 1.0 / d as f32);
        let pooled = x.left_apply(&mean, &[1])?.reshape(&[rows, cols, HEAD_WIDTH])?;
        self.out.forward(p, pooled)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    /// Raw `(R, L)` kernel `W`; the endmembers are `max(0, W)`.
    pub weights: ParamId,
    pub head: NonlinearHead,
    /// When false, `B` is fixed at zero and the decoder is purely linear.
    pub nonlinear: bool,
}

/// Intermediate decoder outputs.
pub struct Decoded<'t> {
    pub y_hat: Var<'t>,
    pub y_lin: Var<'t>,
    pub b_hat: Var<'t>,
}

impl Decoder {
    pub fn new(init: &mut Init, endmembers: &EndmemberMatrix) -> Self {
        Self {
            weights: init.tensor("decoder.endmembers", endmembers.tensor().clone(), ParamGroup::Endmember),
            head: NonlinearHead::new(init, "decoder.head"),
            nonlinear: true,
        }
    }

    /// `A x3 max(0, W)`.
    pub fn linear_mixing<'t>(&self, p: &Bound<'t>, a_hat: Var<'t>) -> Result<Var<'t>> {
        a_hat.mode3_product(p[self.weights].relu()?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, a_hat: Var<'t>, y: Var<'t>) -> Result<Decoded<'t>> {
        let y_lin = self.linear_mixing(p, a_hat)?;
        let b_hat = if self.nonlinear {
            self.head.forward(p, y, y_lin)?
        } else {
            let s = y_lin.shape();
            y.tape().constant(Tensor::zeros(&[s[0], s[1], 1]))
        };
        Ok(Decoded {
            y_hat: reconstruct(y_lin, b_hat)?,
            y_lin,
            b_hat,
        })
    }

    /// Current endmember estimate `max(0, W)`.
    pub fn extract_endmembers(&self, store: &ParamStore) -> CrateResult<EndmemberMatrix> {
        let w = store.get(self.weights).map(|v| v.max(0.0));
        EndmemberMatrix::new(w).map_err(|e| match e {
            Error::Data(msg) => Error::Numerical(format!("endmember estimate degenerated: {msg}")),
            other => other,
        })
    }
}

/// `Y_lin + B ⊙ Y_lin ⊙ Y_lin`.
pub fn reconstruct<'t>(y_lin: Var<'t>, b_hat: Var<'t>) -> Result<Var<'t>> {
    y_lin.add(b_hat.broadcast_field_mul(y_lin.mul(y_lin)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::new();
        let y_lin = tape.constant(Tensor::full(&[2, 2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2, 1], -0.3));
        let out = reconstruct(y_lin, b).unwrap();
        assert!(out.value().data().iter().all(|v| (v - 0.7).abs() < 1e-7));
        let zero = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let y = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f32 * 0.1));
        assert_eq!(reconstruct(y, zero).unwrap().value(), y.value());
    }

    #[test]
    fn negative_weights_are_clamped() {
        let mut store = ParamStore::new();
        let m = EndmemberMatrix::from_rows(&[vec![0.5, 0.2], vec![0.1, 0.9]]).unwrap();
        let dec = Decoder::new(&mut Init::new(&mut store, 0), &m);
        assert_eq!(dec.extract_endmembers(&store).unwrap(), m);
        *store.get_mut(dec.weights) = Tensor::new(&[2, 2], vec![-0.5, 0.2, 0.1, 0.9]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap());
        assert_eq!(dec.linear_mixing(&p, a).unwrap().value().data(), &[0.0, 0.2]);
        let est = dec.extract_endmembers(&store).unwrap();
        assert_eq!(est.row(0), &[0.0, 0.2]);
    }
}
