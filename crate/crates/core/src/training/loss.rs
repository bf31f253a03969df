//! Reconstruction losses: mean squared error per pixel and the mean
//! spectral angle.

use crate::error::{Error, Result as CrateResult};
use crate::mixing::HsiCube;
use crate::tensor::{invalid, mismatch, Result, Tensor, Var};

/// `|cos|` above which the arccos slope is evaluated at this bound instead,
/// keeping gradients finite for nearly parallel spectra.
pub const SAD_COS_LIMIT: f64 = 1.0 - 1e-7;

fn pixel_cubes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    if a.rank() != 3 {
        return Err(invalid(op, format!("expected (rows, cols, bands), got {:?}", a.shape())));
    }
    let l = a.shape()[2];
    Ok((a.len() / l.max(1), l))
}

fn squared_error(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, _) = pixel_cubes("loss_re", y_hat, y)?;
    let total: f64 = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy)]
pub(crate) struct PixelAngle {
    pub angle: f64,
    cos: f64,
    norm_a: f64,
    norm_b: f64,
}

pub(crate) fn pixel_angle(a: &[f32], b: &[f32]) -> Option<PixelAngle> {
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    let (norm_a, norm_b) = (aa.sqrt(), bb.sqrt());
    let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
    // 2 atan2(|u - v|, |u + v|) on unit vectors stays accurate near 0 and pi
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (f64::from(x) / norm_a, f64::from(y) / norm_b);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(PixelAngle {
        angle: 2.0 * diff.sqrt().atan2(sum.sqrt()),
        cos,
        norm_a,
        norm_b,
    })
}

fn angles(y_hat: &Tensor, y: &Tensor) -> Result<Vec<PixelAngle>> {
    let (_, l) = pixel_cubes("loss_sad", y_hat, y)?;
    y_hat
        .data()
        .chunks(l)
        .zip(y.data().chunks(l))
        .enumerate()
        .map(|(i, (a, b))| pixel_angle(a, b).ok_or_else(|| invalid("loss_sad", format!("pixel {i} has zero norm"))))
        .collect()
}

/// `d angle / d a` for one pixel, scaled by `scale`.
fn angle_grad(p: &PixelAngle, a: &[f32], b: &[f32], scale: f64, out: &mut [f32]) {
    let sin = (1.0 - p.cos * p.cos).max(1.0 - SAD_COS_LIMIT * SAD_COS_LIMIT).sqrt();
    let k = -scale / sin;
    let inv_ab = 1.0 / (p.norm_a * p.norm_b);
    let c_aa = p.cos / (p.norm_a * p.norm_a);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = (k * (f64::from(y) * inv_ab - c_aa * f64::from(x))) as f32;
    }
}

/// `||Y_hat - Y||_F^2 / pixel_count`.
pub fn loss_re(y: &HsiCube, y_hat: &HsiCube) -> CrateResult<f64> {
    Ok(squared_error(y_hat.tensor(), y.tensor())?)
}

/// Mean spectral angle in radians between corresponding pixels.
pub fn loss_sad(y: &HsiCube, y_hat: &HsiCube) -> CrateResult<f64> {
    let a = angles(y_hat.tensor(), y.tensor())?;
    Ok(a.iter().map(|p| p.angle).sum::<f64>() / a.len() as f64)
}

/// `alpha * RE + SAD`.
pub fn total_loss(y: &HsiCube, y_hat: &HsiCube, alpha: f64) -> CrateResult<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha * loss_re(y, y_hat)? + loss_sad(y, y_hat)?)
}

impl<'t> Var<'t> {
    /// Reconstruction error of `self` against `target`, as a scalar.
    pub fn re_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), target.value());
        let value = squared_error(&a, &b)?;
        let n = a.len() / a.shape()[2].max(1);
        let (ia, ib) = (self.id(), target.id());
        self.tape()
            .push("re_loss", Tensor::scalar(value as f32), &[self, target], move |g, sink| {
                let k = 2.0 * g[0] / n as f32;
                let diff = || a.data().iter().zip(b.data()).map(move |(&x, &y)| k * (x - y));
                if sink.needs(ia) {
                    sink.add_owned(ia, diff().collect());
                }
                if sink.needs(ib) {
                    sink.add_owned(ib, diff().map(|d| -d).collect());
                }
            })
    }

    /// Mean spectral angle between the pixels of `self` and `target`.
    pub fn sad_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), target.value());
        let px = angles(&a, &b)?;
        let value = px.iter().map(|p| p.angle).sum::<f64>() / px.len() as f64;
        let l = a.shape()[2];
        let (ia, ib) = (self.id(), target.id());
        self.tape()
            .push("sad_loss", Tensor::scalar(value as f32), &[self, target], move |g, sink| {
                let scale = f64::from(g[0]) / px.len() as f64;
                let rows = a.data().chunks(l).zip(b.data().chunks(l)).zip(&px);
                for (id, flip) in [(ia, false), (ib, true)] {
                    if !sink.needs(id) {
                        continue;
                    }
                    let mut grad = vec![0.0; a.len()];
                    for (((x, y), p), out) in rows.clone().zip(grad.chunks_mut(l)) {
                        if flip {
                            let q = PixelAngle {
                                norm_a: p.norm_b,
                                norm_b: p.norm_a,
                                ..*p
                            };
                            angle_grad(&q, y, x, scale, out);
                        } else {
                            angle_grad(p, x, y, scale, out);
                        }
                    }
                    sink.add_owned(id, grad);
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    fn cube(shape: &[usize], data: Vec<f32>) -> HsiCube {
        HsiCube::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn reconstruction_error_examples() {
        let y = cube(&[1, 1, 2], vec![0.5, 0.5]);
        assert_eq!(loss_re(&y, &y).unwrap(), 0.0);
        let y_hat = cube(&[1, 1, 2], vec![0.6, 0.6]);
        assert!((loss_re(&y, &y_hat).unwrap() - 0.02).abs() < 1e-8);
        let wrong = cube(&[1, 2, 1], vec![0.6, 0.6]);
        assert!(loss_re(&y, &wrong).is_err());
    }

    #[test]
    fn spectral_angle_examples() {
        let y = cube(&[1, 2, 2], vec![1.0, 0.0, 0.3, 0.4]);
        assert_eq!(loss_sad(&y, &y).unwrap(), 0.0);
        let doubled = cube(&[1, 2, 2], vec![2.0, 0.0, 0.6, 0.8]);
        assert!(loss_sad(&y, &doubled).unwrap() < 1e-7);
        let a = cube(&[1, 1, 2], vec![1.0, 0.0]);
        let b = cube(&[1, 1, 2], vec![0.0, 3.0]);
        assert!((loss_sad(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let zero = cube(&[1, 1, 2], vec![0.0, 0.0]);
        assert!(loss_sad(&a, &zero).is_err());
        assert!((total_loss(&a, &b, 1.0).unwrap() - (10.0 + std::f64::consts::FRAC_PI_2)).abs() < 1e-6);
        assert!(total_loss(&a, &b, 0.0).is_err());
    }

    #[test]
    fn tape_losses_match_plain_ones() {
        let y = Tensor::from_fn(&[2, 3, 4], |i| 0.2 + ((i * 7) % 5) as f32 * 0.1);
        let y_hat = Tensor::from_fn(&[2, 3, 4], |i| 0.25 + ((i * 3) % 4) as f32 * 0.12);
        let tape = Tape::new();
        let (a, b) = (tape.variable(y_hat.clone()), tape.constant(y.clone()));
        let (cy, ch) = (HsiCube::new(y).unwrap(), HsiCube::new(y_hat).unwrap());
        assert!((a.re_loss(b).unwrap().item() as f64 - loss_re(&cy, &ch).unwrap()).abs() < 1e-6);
        assert!((a.sad_loss(b).unwrap().item() as f64 - loss_sad(&cy, &ch).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients() {
        let y = Tensor::from_fn(&[2, 2, 3], |i| 0.3 + ((i * 5) % 7) as f32 * 0.1);
        let x = Tensor::from_fn(&[2, 2, 3], |i| 0.2 + ((i * 3) % 5) as f32 * 0.15);
        let target = y.clone();
        let r = grad_check(move |v| v.re_loss(v.tape().constant(target.clone())), &x, 1e-3).unwrap();
        assert!(r.max_rel_err < 2e-3, "{r:?}");
        let target = y.clone();
        let r = grad_check(move |v| v.sad_loss(v.tape().constant(target.clone())), &x, 1e-3).unwrap();
        assert!(r.max_rel_err < 2e-3, "{r:?}");
        let est = x.clone();
        let r = grad_check(move |v| v.tape().constant(est.clone()).sad_loss(v), &y, 1e-3).unwrap();
        assert!(r.max_rel_err < 2e-3, "{r:?}");
    }

    #[test]
    fn parallel_spectra_have_finite_gradients() {
        let tape = Tape::new();
        let a = tape.variable(Tensor::new(&[1, 1, 3], vec![0.2, 0.4, 0.6]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let s = a.sad_loss(b).unwrap();
        let g = tape.backward(s).unwrap().get(a).unwrap();
        assert!(g.is_finite());
    }
}
