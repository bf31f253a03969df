//! Finite-difference checks over every differentiable op and both
//! transformer block types at toy shapes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dense_attention, dilated_attention, swda, AttentionConfig, TransformerBlock};
use crate::params::{Init, ParamStore};
use crate::tensor::{
    grad_check_with, Activation, GradCheckOptions, GradCheckReport, Result, Stride, Tape, Tensor, Var,
    COMPOSITE_DENOM_FLOOR,
};

/// Relative error bound of a passing case.
pub const TOLERANCE: f64 = 2e-3;
/// Base step of the op-level checks.
pub const OP_EPS: f32 = 1e-2;
/// Base step of the block-level checks.
pub const BLOCK_EPS: f32 = 3e-2;

/// Denominator floor of the op-level checks. Entries whose gradient is
/// below it are compared in absolute terms.
const OP_FLOOR: f64 = 1e-2;

type CaseFn = fn(f32) -> Result<GradCheckReport>;

struct Case {
    name: &'static str,
    eps: f32,
    run: CaseFn,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub eps: f32,
    /// The worst report over the inputs of the case, or the error it raised.
    pub result: std::result::Result<GradCheckReport, String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.max_rel_err < TOLERANCE)
    }

    pub fn max_rel_err(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.max_rel_err)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values at least 0.1 away from zero, clear of the kinks at 0.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// A shuffled grid with spacing 0.1, so maxima are unique by a margin.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.1).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, values).expect("shape matches")
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let checked = a.checked + b.checked;
    let skipped = a.skipped_kinks + b.skipped_kinks;
    let mut w = if b.max_rel_err > a.max_rel_err { b } else { a };
    w.checked = checked;
    w.skipped_kinks = skipped;
    w
}

/// Checks `f` at `x` through `sum((f(x') - f(x)) * w)` with random `w`.
/// Subtracting the unperturbed output keeps the scalar near zero, where
/// f32 resolves small differences best.
fn probe<F>(x: &Tensor, eps: f32, floor: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let base = f(tape.constant(x.clone()))?.value();
    let base = base.as_ref().clone();
    let weights = random(base.shape(), seed ^ 0x5eed);
    let opts = GradCheckOptions {
        floor,
        ..GradCheckOptions::new(eps)
    };
    grad_check_with(|v| f(v)?.sub(v.tape().constant(base.clone()))?.dot_const(&weights), x, &opts)
}

fn op<F>(x: &Tensor, eps: f32, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    probe(x, eps, OP_FLOOR, seed, f)
}

fn c<'t>(v: Var<'t>, t: &Tensor) -> Var<'t> {
    v.tape().constant(t.clone())
}

fn case_add(eps: f32) -> Result<GradCheckReport> {
    let (a, b) = (random(&[3, 4], 1), random(&[3, 4], 2));
    let r1 = op(&a, eps, 1, |x| x.add(c(x, &b)))?;
    let r2 = op(&b, eps, 2, |x| c(x, &a).add(x))?;
    Ok(worse(r1, r2))
}

fn case_sub(eps: f32) -> Result<GradCheckReport> {
    let (a, b) = (random(&[3, 4], 3), random(&[3, 4], 4));
    let r1 = op(&a, eps, 3, |x| x.sub(c(x, &b)))?;
    let r2 = op(&b, eps, 4, |x| c(x, &a).sub(x))?;
    Ok(worse(r1, r2))
}

fn case_mul(eps: f32) -> Result<GradCheckReport> {
    let (a, b) = (random(&[3, 4], 5), random(&[3, 4], 6));
    let r1 = op(&a, eps, 5, |x| x.mul(c(x, &b)))?;
    let r2 = op(&b, eps, 6, |x| c(x, &a).mul(x))?;
    let r3 = op(&a, eps, 7, |x| x.mul(x))?;
    Ok(worse(worse(r1, r2), r3))
}

fn case_scale(eps: f32) -> Result<GradCheckReport> {
    op(&random(&[5], 8), eps, 8, |x| x.scale(-1.7))
}

fn activation(kind: Activation, x: &Tensor, eps: f32) -> Result<GradCheckReport> {
    op(x, eps, 9, move |v| v.activation(kind))
}

fn case_relu(eps: f32) -> Result<GradCheckReport> {
    activation(Activation::Relu, &off_zero(&[12], 10), eps)
}

fn case_leaky_relu(eps: f32) -> Result<GradCheckReport> {
    activation(Activation::LEAKY_RELU, &off_zero(&[12], 11), eps)
}

fn case_gelu(eps: f32) -> Result<GradCheckReport> {
    activation(Activation::Gelu, &random(&[12], 12).scale_by(3.0), eps)
}

fn case_hardtanh(eps: f32) -> Result<GradCheckReport> {
    // magnitudes in [0.1, 0.4] and [0.6, 1.5] avoid the clamps at +-0.5
    let x = Tensor::new(&[8], vec![0.1, -0.25, 0.4, -0.35, 0.7, -0.9, 1.5, -0.6]).expect("shape matches");
    activation(Activation::HardTanh { lo: -0.5, hi: 0.5 }, &x, eps)
}

fn case_sigmoid(eps: f32) -> Result<GradCheckReport> {
    activation(Activation::Sigmoid, &random(&[12], 13).scale_by(4.0), eps)
}

fn case_sum_mean(eps: f32) -> Result<GradCheckReport> {
    let x = random(&[2, 3, 2], 14);
    let r1 = op(&x, eps, 14, |v| v.sum())?;
    let r2 = op(&x, eps, 15, |v| v.mean())?;
    Ok(worse(r1, r2))
}

fn case_dot_const(eps: f32) -> Result<GradCheckReport> {
    let w = random(&[3, 3], 16);
    op(&random(&[3, 3], 17), eps, 17, |v| v.dot_const(&w))
}

fn case_reshape_permute(eps: f32) -> Result<GradCheckReport> {
    let x = random(&[2, 3, 4], 18);
    let r1 = op(&x, eps, 18, |v| v.reshape(&[6, 4])?.mul(c(v, &random(&[6, 4], 19))))?;
    let r2 = op(&x, eps, 20, |v| v.permute(&[2, 0, 1])?.mul(c(v, &random(&[4, 2, 3], 21))))?;
    Ok(worse(r1, r2))
}

fn case_linear(eps: f32) -> Result<GradCheckReport> {
    let (x, w, b) = (random(&[2, 3, 4], 22), random(&[4, 5], 23), random(&[5], 24));
    let r1 = op(&x, eps, 22, |v| v.linear(c(v, &w), Some(c(v, &b))))?;
    let r2 = op(&w, eps, 23, |v| c(v, &x).linear(v, Some(c(v, &b))))?;
    let r3 = op(&b, eps, 24, |v| c(v, &x).linear(c(v, &w), Some(v)))?;
    Ok(worse(worse(r1, r2), r3))
}

fn case_mode3_product(eps: f32) -> Result<GradCheckReport> {
    let (a, m) = (random(&[3, 2, 3], 25), random(&[3, 5], 26));
    let r1 = op(&a, eps, 25, |v| v.mode3_product(c(v, &m)))?;
    let r2 = op(&m, eps, 26, |v| c(v, &a).mode3_product(v))?;
    Ok(worse(r1, r2))
}

fn case_broadcast_field_mul(eps: f32) -> Result<GradCheckReport> {
    let (b, y) = (random(&[3, 2, 1], 27), random(&[3, 2, 4], 28));
    let r1 = op(&b, eps, 27, |v| v.broadcast_field_mul(c(v, &y)))?;
    let r2 = op(&y, eps, 28, |v| c(v, &b).broadcast_field_mul(v))?;
    Ok(worse(r1, r2))
}

fn case_add_bias(eps: f32) -> Result<GradCheckReport> {
    let (x, b) = (random(&[2, 3, 4], 29), random(&[4], 30));
    let r1 = op(&x, eps, 29, |v| v.add_bias(c(v, &b)))?;
    let r2 = op(&b, eps, 30, |v| c(v, &x).add_bias(v))?;
    Ok(worse(r1, r2))
}

fn case_scale_channels(eps: f32) -> Result<GradCheckReport> {
    let (x, w) = (random(&[2, 3, 4], 31), random(&[4], 32));
    let r1 = op(&x, eps, 31, |v| v.scale_channels(c(v, &w)))?;
    let r2 = op(&w, eps, 32, |v| c(v, &x).scale_channels(v))?;
    Ok(worse(r1, r2))
}

fn case_mean_rows(eps: f32) -> Result<GradCheckReport> {
    op(&random(&[3, 2, 4], 33), eps, 33, |v| v.mean_rows())
}

fn case_max_rows(eps: f32) -> Result<GradCheckReport> {
    op(&distinct(&[3, 2, 4], 34), eps, 34, |v| v.max_rows())
}

fn case_scaled_softmax(eps: f32) -> Result<GradCheckReport> {
    op(&random(&[3, 5], 35), eps, 35, |v| v.scaled_softmax(1.5))
}

fn case_layer_norm(eps: f32) -> Result<GradCheckReport> {
    let (x, g, s) = (random(&[3, 6], 36), random(&[6], 37), random(&[6], 38));
    let r1 = op(&x, eps, 36, |v| v.layer_norm(c(v, &g), c(v, &s), 1e-5))?;
    let r2 = op(&g, eps, 37, |v| c(v, &x).layer_norm(v, c(v, &s), 1e-5))?;
    let r3 = op(&s, eps, 38, |v| c(v, &x).layer_norm(c(v, &g), v, 1e-5))?;
    Ok(worse(worse(r1, r2), r3))
}

fn case_concat_slice(eps: f32) -> Result<GradCheckReport> {
    let (a, b) = (random(&[2, 2, 3], 39), random(&[2, 2, 2], 40));
    let r1 = op(&a, eps, 39, |v| Var::concat_last(&[v, c(v, &b), v]))?;
    let r2 = op(&random(&[2, 5], 41), eps, 41, |v| v.slice_last(1, 3))?;
    Ok(worse(r1, r2))
}

fn case_left_apply(eps: f32) -> Result<GradCheckReport> {
    let m = random(&[6, 4], 42);
    op(&random(&[4, 3], 43), eps, 43, |v| v.left_apply(&m, &[2, 3]))
}

fn case_conv2d(eps: f32) -> Result<GradCheckReport> {
    let (x, k, b) = (random(&[5, 4, 2], 44), random(&[3, 3, 2, 3], 45), random(&[3], 46));
    let mut worst = op(&x, eps, 44, |v| v.conv2d(c(v, &k), Stride::ONE, true))?;
    worst = worse(worst, op(&x, eps, 47, |v| v.conv2d_bias(c(v, &k), c(v, &b), Stride::TWO, true))?);
    worst = worse(worst, op(&k, eps, 45, |v| c(v, &x).conv2d(v, Stride::TWO, false))?);
    worst = worse(worst, op(&b, eps, 46, |v| c(v, &x).conv2d_bias(c(v, &k), v, Stride::ONE, true))?);
    Ok(worst)
}

fn case_depthwise_conv2d(eps: f32) -> Result<GradCheckReport> {
    let (x, k) = (random(&[4, 5, 2], 48), random(&[3, 3, 2], 49));
    let r1 = op(&x, eps, 48, |v| v.depthwise_conv2d(c(v, &k)))?;
    let r2 = op(&k, eps, 49, |v| c(v, &x).depthwise_conv2d(v))?;
    Ok(worse(r1, r2))
}

fn case_conv3d(eps: f32) -> Result<GradCheckReport> {
    let (x, k, b) = (random(&[6, 2, 2, 2], 50), random(&[3, 1, 1, 2, 3], 51), random(&[3], 52));
    let mut worst = op(&x, eps, 50, |v| v.conv3d(c(v, &k)))?;
    worst = worse(worst, op(&k, eps, 51, |v| c(v, &x).conv3d(v))?);
    worst = worse(worst, op(&b, eps, 52, |v| c(v, &x).conv3d_bias(c(v, &k), v))?);
    Ok(worst)
}

fn case_maxpool3d(eps: f32) -> Result<GradCheckReport> {
    op(&distinct(&[6, 2, 2, 2], 53), eps, 53, |v| v.maxpool3d(2))
}

/// Nonnegative spectra, as in the reconstruction losses.
fn spectra(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.1..1.0))
}

fn case_re_loss(eps: f32) -> Result<GradCheckReport> {
    let (y, t) = (spectra(&[3, 2, 5], 54), spectra(&[3, 2, 5], 55));
    let r1 = op(&y, eps, 54, |v| v.re_loss(c(v, &t)))?;
    let r2 = op(&t, eps, 55, |v| c(v, &y).re_loss(v))?;
    Ok(worse(r1, r2))
}

fn case_sad_loss(eps: f32) -> Result<GradCheckReport> {
    let (y, t) = (spectra(&[3, 2, 5], 56), spectra(&[3, 2, 5], 57));
    let r1 = op(&y, eps, 56, |v| v.sad_loss(c(v, &t)))?;
    let r2 = op(&t, eps, 57, |v| c(v, &y).sad_loss(v))?;
    Ok(worse(r1, r2))
}

fn case_swda(eps: f32) -> Result<GradCheckReport> {
    let (q, k, vv) = (random(&[4, 4, 2], 58), random(&[4, 4, 2], 59), random(&[4, 4, 2], 60));
    let mut worst = op(&q, eps, 58, |v| swda(v, c(v, &k), c(v, &vv), 2, 3))?;
    worst = worse(worst, op(&k, eps, 59, |v| swda(c(v, &q), v, c(v, &vv), 1, 3))?);
    worst = worse(worst, op(&vv, eps, 60, |v| swda(c(v, &q), c(v, &k), v, 2, 3))?);
    Ok(worst)
}

fn case_dilated_attention(eps: f32) -> Result<GradCheckReport> {
    let (q, k, vv) = (random(&[4, 4, 4], 61), random(&[4, 4, 4], 62), random(&[4, 4, 4], 63));
    let mut worst = op(&q, eps, 61, |v| dilated_attention(v, c(v, &k), c(v, &vv), &[1, 2], 3))?;
    worst = worse(worst, op(&k, eps, 62, |v| dilated_attention(c(v, &q), v, c(v, &vv), &[1, 2], 3))?);
    worst = worse(worst, op(&vv, eps, 63, |v| dilated_attention(c(v, &q), c(v, &k), v, &[1, 2], 3))?);
    Ok(worst)
}

fn case_dense_attention(eps: f32) -> Result<GradCheckReport> {
    let (q, k) = (random(&[3, 3, 4], 64), random(&[3, 3, 4], 65));
    let r1 = op(&q, eps, 64, |v| dense_attention(c(v, &k), v, v, 2))?;
    let r2 = op(&k, eps, 65, |v| dense_attention(v, c(v, &q), c(v, &q), 2))?;
    Ok(worse(r1, r2))
}

fn block(block: &TransformerBlock, store: &ParamStore, eps: f32) -> Result<GradCheckReport> {
    let x = random(&[6, 6, 6], 70);
    probe(&x, eps, COMPOSITE_DENOM_FLOOR, 70, |v| block.forward(&store.bind(v.tape()), v))
}

fn case_msda_block(eps: f32) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::multi_scale(6, 3, 3)?;
    let b = TransformerBlock::msda(&mut Init::new(&mut store, 4), "b", &cfg)?;
    block(&b, &store, eps)
}

fn case_mhsa_block(eps: f32) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let b = TransformerBlock::mhsa(&mut Init::new(&mut store, 4), "b", 6, 3)?;
    block(&b, &store, eps)
}

const CASES: &[Case] = &[
    Case { name: "add", eps: OP_EPS, run: case_add },
    Case { name: "sub", eps: OP_EPS, run: case_sub },
    Case { name: "mul", eps: OP_EPS, run: case_mul },
    Case { name: "scale", eps: OP_EPS, run: case_scale },
    Case { name: "relu", eps: OP_EPS, run: case_relu },
    Case { name: "leaky_relu", eps: OP_EPS, run: case_leaky_relu },
    Case { name: "gelu", eps: OP_EPS, run: case_gelu },
    Case { name: "hardtanh", eps: OP_EPS, run: case_hardtanh },
    Case { name: "sigmoid", eps: OP_EPS, run: case_sigmoid },
    Case { name: "sum_mean", eps: OP_EPS, run: case_sum_mean },
    Case { name: "dot_const", eps: OP_EPS, run: case_dot_const },
    Case { name: "reshape_permute", eps: OP_EPS, run: case_reshape_permute },
    Case { name: "linear", eps: OP_EPS, run: case_linear },
    Case { name: "mode3_product", eps: OP_EPS, run: case_mode3_product },
    Case { name: "broadcast_field_mul", eps: OP_EPS, run: case_broadcast_field_mul },
    Case { name: "add_bias", eps: OP_EPS, run: case_add_bias },
    Case { name: "scale_channels", eps: OP_EPS, run: case_scale_channels },
    Case { name: "mean_rows", eps: OP_EPS, run: case_mean_rows },
    Case { name: "max_rows", eps: OP_EPS, run: case_max_rows },
    Case { name: "scaled_softmax", eps: OP_EPS, run: case_scaled_softmax },
    Case { name: "layer_norm", eps: OP_EPS, run: case_layer_norm },
    Case { name: "concat_slice", eps: OP_EPS, run: case_concat_slice },
    Case { name: "left_apply", eps: OP_EPS, run: case_left_apply },
    Case { name: "conv2d", eps: OP_EPS, run: case_conv2d },
    Case { name: "depthwise_conv2d", eps: OP_EPS, run: case_depthwise_conv2d },
    Case { name: "conv3d", eps: OP_EPS, run: case_conv3d },
    Case { name: "maxpool3d", eps: OP_EPS, run: case_maxpool3d },
    Case { name: "re_loss", eps: OP_EPS, run: case_re_loss },
    Case { name: "sad_loss", eps: OP_EPS, run: case_sad_loss },
    Case { name: "swda", eps: OP_EPS, run: case_swda },
    Case { name: "dilated_attention", eps: OP_EPS, run: case_dilated_attention },
    Case { name: "dense_attention", eps: OP_EPS, run: case_dense_attention },
    Case { name: "msda_block", eps: BLOCK_EPS, run: case_msda_block },
    Case { name: "mhsa_block", eps: BLOCK_EPS, run: case_mhsa_block },
];

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs the cases whose name equals `only` (all when `None`), with `eps`
/// replacing each case's default step when given. An unknown name selects
/// nothing.
pub fn run_suite(only: Option<&str>, eps: Option<f32>) -> Vec<CaseOutcome> {
    CASES
        .iter()
        .filter(|c| only.is_none_or(|n| n == c.name))
        .map(|c| {
            let step = eps.unwrap_or(c.eps);
            CaseOutcome {
                name: c.name,
                eps: step,
                result: (c.run)(step).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

trait ScaleBy {
    fn scale_by(self, k: f32) -> Self;
}

impl ScaleBy for Tensor {
    fn scale_by(mut self, k: f32) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= k);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        for outcome in run_suite(None, None) {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn filter_selects_one_case() {
        let out = run_suite(Some("swda"), Some(5e-3));
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].name, out[0].eps), ("swda", 5e-3));
        assert!(run_suite(Some("nope"), None).is_empty());
    }
}
