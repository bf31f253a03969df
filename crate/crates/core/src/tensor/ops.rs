use std::rc::Rc;

use super::gemm::{gemm, matmul, MatRef};
use super::{invalid, mismatch, Result, Tensor, Var};

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
/// Cubic coefficient of the tanh approximation to GELU.
pub const GELU_CUBIC: f32 = 0.044715;

/// Elementwise nonlinearities.
///
/// Kinks use left derivatives: `relu'(0) = 0`, `leaky_relu'(0) = slope`,
/// and `hardtanh` has zero derivative on and beyond its clamp bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    /// tanh approximation with cubic coefficient [`GELU_CUBIC`].
    Gelu,
    HardTanh { lo: f32, hi: f32 },
    Sigmoid,
}

impl Activation {
    /// Leaky ReLU with the usual 0.01 negative slope.
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu(0.01);

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::HardTanh { lo, hi } => x.clamp(lo, hi),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// `apply(x)` for kinds whose derivative uses the output, 0 otherwise.
    fn apply_if_needed(self, x: f32) -> f32 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            _ => 0.0,
        }
    }

    /// Derivative at `x`; `y` is `apply(x)`.
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = inner.tanh();
                let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Activation::HardTanh { lo, hi } => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` into (leading rows, last extent).
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (if last == 0 { 0 } else { total / last }, last)
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch("add", a.shape(), b.shape()));
        }
        let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            "add",
            Tensor::new(a.shape(), out)?,
            &[self, other],
            move |g, sink| {
                sink.add(ia, g);
                sink.add(ib, g);
            },
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch("sub", a.shape(), b.shape()));
        }
        let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            "sub",
            Tensor::new(a.shape(), out)?,
            &[self, other],
            move |g, sink| {
                sink.add(ia, g);
                if sink.needs(ib) {
                    sink.add_owned(ib, g.iter().map(|v| -v).collect());
                }
            },
        )
    }

    /// Hadamard product. `other` may instead have a trailing extent of 1
    /// with all leading extents equal, in which case it is broadcast along
    /// the last axis.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ia, ib) = (self.id(), other.id());
        if a.shape() == b.shape() {
            let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            return self.tape().push(
                "hadamard",
                Tensor::new(a.shape(), out)?,
                &[self, other],
                move |g, sink| {
                    if sink.needs(ia) {
                        sink.add_owned(ia, g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                    }
                    if sink.needs(ib) {
                        sink.add_owned(ib, g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                    }
                },
            );
        }
        let broadcastable = a.rank() == b.rank()
            && a.rank() > 0
            && b.last_dim() == 1
            && a.shape()[..a.rank() - 1] == b.shape()[..b.rank() - 1];
        if !broadcastable {
            return Err(mismatch("hadamard", a.shape(), b.shape()));
        }
        let (rows, width) = rows_last(a.shape());
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let s = b.data()[r];
            for (o, x) in out[r * width..(r + 1) * width]
                .iter_mut()
                .zip(&a.data()[r * width..(r + 1) * width])
            {
                *o = x * s;
            }
        }
        self.tape().push(
            "hadamard",
            Tensor::new(a.shape(), out)?,
            &[self, other],
            move |g, sink| {
                if sink.needs(ia) {
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = b.data()[r];
                        for (o, gv) in ga[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *o = gv * s;
                        }
                    }
                    sink.add_owned(ia, ga);
                }
                if sink.needs(ib) {
                    let gb = (0..rows)
                        .map(|r| {
                            g[r * width..(r + 1) * width]
                                .iter()
                                .zip(&a.data()[r * width..(r + 1) * width])
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    sink.add_owned(ib, gb);
                }
            },
        )
    }

    /// Multiplies by a constant.
    pub fn scale(self, factor: f32) -> Result<Var<'t>> {
        let a = self.value();
        let id = self.id();
        self.tape().push(
            "scale",
            a.map(|v| v * factor),
            &[self],
            move |g, sink| sink.add_owned(id, g.iter().map(|v| v * factor).collect()),
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(|v| kind.apply(v));
        let id = self.id();
        self.tape().push("activation", y, &[self], move |g, sink| {
            if !sink.needs(id) {
                return;
            }
            let grad = g
                .iter()
                .zip(x.data())
                .map(|(g, &x)| g * kind.derivative(x, kind.apply_if_needed(x)))
                .collect();
            sink.add_owned(id, grad);
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.activation(Activation::Sigmoid)
    }

    /// Sum of all entries as a scalar (accumulated in `f64`, sequentially).
    pub fn sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let total = a.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let (n, id) = (a.len(), self.id());
        self.tape().push("sum", Tensor::scalar(total), &[self], move |g, sink| {
            sink.add_owned(id, vec![g[0]; n]);
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.with_value(|t| t.len()).max(1);
        self.sum()?.scale(1.0 / n as f32)
    }

    /// Weighted sum `sum(self * weights)` against a constant weight tensor.
    pub fn dot_const(self, weights: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != weights.shape() {
            return Err(mismatch("dot_const", a.shape(), weights.shape()));
        }
        let total = a
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x as f64 * w as f64)
            .sum::<f64>() as f32;
        let w = weights.data().to_vec();
        let id = self.id();
        self.tape().push("dot_const", Tensor::scalar(total), &[self], move |g, sink| {
            sink.add_owned(id, w.iter().map(|w| w * g[0]).collect());
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = (*a).clone().reshape(shape)?;
        let id = self.id();
        self.tape()
            .push("reshape", out, &[self], move |g, sink| sink.add(id, g))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of {rank} axes")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let out = permute_data(a.data(), a.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let id = self.id();
        let grad_shape = out_shape.clone();
        self.tape().push(
            "permute",
            Tensor::new(&out_shape, out)?,
            &[self],
            move |g, sink| {
                if sink.needs(id) {
                    sink.add_owned(id, permute_data(g, &grad_shape, &inverse));
                }
            },
        )
    }

    /// Affine map over the last axis: `x W + bias` with `W` of shape
    /// `(din, dout)` and `bias` of shape `(dout)`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.last_dim() != w.shape()[0] {
            return Err(mismatch("linear", x.shape(), w.shape()));
        }
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let rows = if din == 0 { 0 } else { x.len() / din };
        let mut out = matmul(x.data(), w.data(), rows, din, dout);
        let mut parents = vec![self, weight];
        let mut bias_id = None;
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(mismatch("linear bias", bv.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout.max(1)) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
            parents.push(b);
            bias_id = Some(b.id());
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        let (ix, iw) = (self.id(), weight.id());
        self.tape().push(
            "linear",
            Tensor::new(&out_shape, out)?,
            &parents,
            move |g, sink| {
                if sink.needs(ix) {
                    let mut gx = vec![0.0; rows * din];
                    gemm(
                        MatRef::new(g, rows, dout),
                        MatRef::new(w.data(), din, dout).t(),
                        &mut gx,
                        din,
                        false,
                    );
                    sink.add_owned(ix, gx);
                }
                if sink.needs(iw) {
                    let mut gw = vec![0.0; din * dout];
                    gemm(
                        MatRef::new(x.data(), rows, din).t(),
                        MatRef::new(g, rows, dout),
                        &mut gw,
                        dout,
                        false,
                    );
                    sink.add_owned(iw, gw);
                }
                if let Some(ib) = bias_id {
                    if sink.needs(ib) {
                        sink.add_owned(ib, column_sums(g, rows, dout));
                    }
                }
            },
        )
    }

    /// Mode-3 product of a `(rows, cols, R)` tensor with an `(R, L)` matrix.
    pub fn mode3_product(self, matrix: Var<'t>) -> Result<Var<'t>> {
        let (a, m) = (self.value(), matrix.value());
        if a.rank() != 3 || m.rank() != 2 || a.shape()[2] != m.shape()[0] {
            return Err(mismatch("mode3_product", a.shape(), m.shape()));
        }
        self.linear(matrix, None)
    }

    /// `(rows, cols, 1)` field times `(rows, cols, L)` cube, broadcasting the
    /// field over the last axis.
    pub fn broadcast_field_mul(self, cube: Var<'t>) -> Result<Var<'t>> {
        let (b, t) = (self.value(), cube.value());
        if b.rank() != 3 || t.rank() != 3 || b.shape()[2] != 1 || b.shape()[..2] != t.shape()[..2] {
            return Err(mismatch("broadcast_field_mul", b.shape(), t.shape()));
        }
        cube.mul(self)
    }

    /// Adds a `(C)` vector to every row of a `(.., C)` tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = x.last_dim();
        if b.shape() != [c] {
            return Err(mismatch("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
        let rows = if c == 0 { 0 } else { x.len() / c };
        let (ix, ib) = (self.id(), bias.id());
        self.tape().push(
            "add_bias",
            Tensor::new(x.shape(), out)?,
            &[self, bias],
            move |g, sink| {
                sink.add(ix, g);
                if sink.needs(ib) {
                    sink.add_owned(ib, column_sums(g, rows, c));
                }
            },
        )
    }

    /// Multiplies every row of a `(.., C)` tensor by a `(C)` weight vector.
    pub fn scale_channels(self, weights: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weights.value());
        let c = x.last_dim();
        if w.shape() != [c] {
            return Err(mismatch("scale_channels", x.shape(), w.shape()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(w.data()).for_each(|(o, w)| *o *= w);
        }
        let (ix, iw) = (self.id(), weights.id());
        self.tape().push(
            "scale_channels",
            Tensor::new(x.shape(), out)?,
            &[self, weights],
            move |g, sink| {
                if sink.needs(ix) {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(c.max(1)) {
                        row.iter_mut().zip(w.data()).for_each(|(o, w)| *o *= w);
                    }
                    sink.add_owned(ix, gx);
                }
                if sink.needs(iw) {
                    let mut gw = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c.max(1)).zip(x.data().chunks(c.max(1))) {
                        for ((acc, g), x) in gw.iter_mut().zip(grow).zip(xrow) {
                            *acc += g * x;
                        }
                    }
                    sink.add_owned(iw, gw);
                }
            },
        )
    }

    /// Mean over every axis but the last: `(.., C) -> (C)`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, c) = rows_last(x.shape());
        if rows == 0 {
            return Err(invalid("mean_rows", "no rows to average"));
        }
        let mut acc = vec![0.0f64; c];
        for row in x.data().chunks(c) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
        }
        let out: Vec<f32> = acc.iter().map(|a| (a / rows as f64) as f32).collect();
        let id = self.id();
        let total = x.len();
        self.tape().push("mean_rows", Tensor::new(&[c], out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let inv = 1.0 / rows as f32;
                let grad = (0..total).map(|i| g[i % c] * inv).collect();
                sink.add_owned(id, grad);
            }
        })
    }

    /// Max over every axis but the last: `(.., C) -> (C)`. Ties send the
    /// gradient to the first maximal row.
    pub fn max_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, c) = rows_last(x.shape());
        if rows == 0 {
            return Err(invalid("max_rows", "no rows to reduce"));
        }
        let mut best = vec![0usize; c];
        let mut out = x.data()[..c].to_vec();
        for r in 1..rows {
            for ch in 0..c {
                let v = x.data()[r * c + ch];
                if v > out[ch] {
                    out[ch] = v;
                    best[ch] = r;
                }
            }
        }
        let id = self.id();
        let total = x.len();
        self.tape().push("max_rows", Tensor::new(&[c], out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let mut grad = vec![0.0; total];
                for ch in 0..c {
                    grad[best[ch] * c + ch] = g[ch];
                }
                sink.add_owned(id, grad);
            }
        })
    }

    /// Softmax over the last axis of `gamma * self`, max-subtracted.
    pub fn scaled_softmax(self, gamma: f32) -> Result<Var<'t>> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(invalid("scaled_softmax", format!("gamma must be positive, got {gamma}")));
        }
        let x = self.value();
        let (_, c) = rows_last(x.shape());
        let mut out = vec![0.0; x.len()];
        for (orow, xrow) in out.chunks_mut(c.max(1)).zip(x.data().chunks(c.max(1))) {
            let m = xrow.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (gamma * (v - m)).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let y = Rc::new(Tensor::new(x.shape(), out.clone())?);
        let id = self.id();
        self.tape().push("scaled_softmax", Tensor::new(x.shape(), out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let mut grad = vec![0.0; g.len()];
                for ((gr, grow), yrow) in grad
                    .chunks_mut(c.max(1))
                    .zip(g.chunks(c.max(1)))
                    .zip(y.data().chunks(c.max(1)))
                {
                    let dot: f32 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in gr.iter_mut().zip(grow).zip(yrow) {
                        *o = gamma * y * (g - dot);
                    }
                }
                sink.add_owned(id, grad);
            }
        })
    }

    /// Layer normalization over the last axis with affine `(C)` parameters.
    pub fn layer_norm(self, gain: Var<'t>, shift: Var<'t>, eps: f32) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gain.value(), shift.value());
        let c = x.last_dim();
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(mismatch("layer_norm", x.shape(), gm.shape()));
        }
        let rows = if c == 0 { 0 } else { x.len() / c };
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat[r * c + k] = h;
                out[r * c + k] = h * gm.data()[k] + bt.data()[k];
            }
        }
        let (ix, ig, ib) = (self.id(), gain.id(), shift.id());
        self.tape().push(
            "layer_norm",
            Tensor::new(x.shape(), out)?,
            &[self, gain, shift],
            move |g, sink| {
                if sink.needs(ix) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for k in 0..c {
                            let dh = grow[k] * gm.data()[k];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[k];
                        }
                        let (mean_dh, mean_dh_h) = (sum_dh / c as f32, sum_dh_h / c as f32);
                        for k in 0..c {
                            let dh = grow[k] * gm.data()[k];
                            gx[r * c + k] = inv_std[r] * (dh - mean_dh - hrow[k] * mean_dh_h);
                        }
                    }
                    sink.add_owned(ix, gx);
                }
                if sink.needs(ig) {
                    let mut gg = vec![0.0; c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(a, (g, h))| *a += g * h);
                    }
                    sink.add_owned(ig, gg);
                }
                if sink.needs(ib) {
                    sink.add_owned(ib, column_sums(g, rows, c));
                }
            },
        )
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_last", "nothing to concatenate"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for v in &values[1..] {
            if v.rank() != values[0].rank() || &v.shape()[..v.rank() - 1] != lead {
                return Err(mismatch("concat_last", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        first.tape().push("concat_last", Tensor::new(&shape, out)?, parts, move |g, sink| {
            let mut offset = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                if sink.needs(id) {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    sink.add_owned(id, part);
                }
                offset += w;
            }
        })
    }

    /// Columns `[start, start + width)` of the last axis.
    pub fn slice_last(self, start: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, c) = rows_last(x.shape());
        if start + width > c {
            return Err(invalid("slice_last", format!("[{start}, {}) exceeds extent {c}", start + width)));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * c + start..r * c + start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let id = self.id();
        self.tape().push("slice_last", Tensor::new(&shape, out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let mut grad = vec![0.0; rows * c];
                for r in 0..rows {
                    grad[r * c + start..r * c + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                sink.add_owned(id, grad);
            }
        })
    }

    /// Treats `self` as `(P_in, rest..)` and applies a constant
    /// `(P_out, P_in)` matrix on the left: `out = matrix * self`.
    pub fn left_apply(self, matrix: &Tensor, out_leading: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if matrix.rank() != 2 {
            return Err(invalid("left_apply", "matrix must be 2-D"));
        }
        let (p_out, p_in) = (matrix.shape()[0], matrix.shape()[1]);
        if p_in == 0 || x.len() % p_in != 0 || out_leading.iter().product::<usize>() != p_out {
            return Err(mismatch("left_apply", x.shape(), matrix.shape()));
        }
        let rest = x.len() / p_in;
        let out = matmul(matrix.data(), x.data(), p_out, p_in, rest);
        let mut shape = out_leading.to_vec();
        shape.push(rest);
        let m = matrix.data().to_vec();
        let id = self.id();
        self.tape().push("left_apply", Tensor::new(&shape, out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let mut grad = vec![0.0; p_in * rest];
                gemm(
                    MatRef::new(&m, p_out, p_in).t(),
                    MatRef::new(g, p_out, rest),
                    &mut grad,
                    rest,
                    false,
                );
                sink.add_owned(id, grad);
            }
        })
    }
}

pub(crate) fn column_sums(g: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols.max(1)).take(rows) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

pub(crate) fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let ones = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(a.mul(ones).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let b = tape.constant(t(&[2], &[0.2, 0.4]));
        let sq = b.mul(b).unwrap().value();
        assert_eq!(sq.data(), &[0.2f32 * 0.2, 0.4f32 * 0.4]);
        assert!((sq.data()[0] - 0.04).abs() < 1e-7 && (sq.data()[1] - 0.16).abs() < 1e-7);
        let zero = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(a.mul(zero).unwrap().value().data(), &[0.0; 3]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(a.mul(bad).is_err());
    }

    #[test]
    fn hadamard_gradient_is_other_factor() {
        let tape = Tape::new();
        let a = tape.variable(t(&[2], &[3.0, -1.0]));
        let b = tape.variable(t(&[2], &[2.0, 5.0]));
        let s = a.mul(b).unwrap().sum().unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn mode3_product_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2], &[0.3, 0.7]));
        let m = tape.constant(t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]));
        let out = a.mode3_product(m).unwrap().value();
        assert_eq!(out.shape(), &[1, 1, 3]);
        let expect = [0.3f32, 0.7, 0.3 + 0.7];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-7);
        }
        let one_hot = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        assert_eq!(one_hot.mode3_product(m).unwrap().value().data(), &[1.0, 0.0, 1.0]);
        let zero = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(zero.mode3_product(m).unwrap().value().data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(a.mode3_product(wrong).is_err());
    }

    #[test]
    fn broadcast_field_examples() {
        let tape = Tape::new();
        let cube = tape.constant(t(&[1, 1, 2], &[0.2, 0.4]));
        let half = tape.constant(t(&[1, 1, 1], &[0.5]));
        assert_eq!(half.broadcast_field_mul(cube).unwrap().value().data(), &[0.1, 0.2]);
        let ones = tape.constant(Tensor::full(&[1, 1, 1], 1.0));
        assert_eq!(ones.broadcast_field_mul(cube).unwrap().value().data(), &[0.2, 0.4]);
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 1]));
        assert_eq!(zeros.broadcast_field_mul(cube).unwrap().value().data(), &[0.0, 0.0]);
        let other = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(other.broadcast_field_mul(cube).is_err());
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        let ht = Activation::HardTanh { lo: -1.0, hi: 1.0 };
        assert_eq!(ht.apply(0.5), 0.5);
        assert_eq!(ht.apply(7.0), 1.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(Activation::LEAKY_RELU.derivative(0.0, 0.0), 0.01);
        assert_eq!(ht.derivative(1.0, 1.0), 0.0);
        assert_eq!(ht.derivative(-1.0, -1.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let flat = tape.constant(Tensor::full(&[2, 2, 4], 0.7));
        let out = flat.scaled_softmax(1.0).unwrap().value();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let logs = tape.constant(t(&[1, 1, 3], &[1f32.ln(), 2f32.ln(), 3f32.ln()]));
        let out = logs.scaled_softmax(1.0).unwrap().value();
        for (o, e) in out.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((o - e).abs() < 1e-6);
        }

        // gap 1 between the top two channels; gamma*gap = 10
        let f = tape.constant(t(&[1, 1, 3], &[2.0, 1.0, 0.5]));
        let out = f.scaled_softmax(10.0).unwrap().value();
        let closed = 1.0 / (1.0 + (-10.0f32).exp() + (-15.0f32).exp());
        assert!((out.data()[0] - closed).abs() < 1e-6);
        assert!(out.data()[0] >= 0.99);
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(x.linear(eye, Some(zb)).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let ones = tape.constant(Tensor::full(&[3, 2], 1.0));
        assert_eq!(x.linear(ones, None).unwrap().value().data(), &[6.0, 6.0]);
        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(t(&[2], &[0.5, -1.5]));
        assert_eq!(x.linear(zw, Some(b)).unwrap().value().data(), &[0.5, -1.5]);
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(x.linear(bad, None).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().get(&[3, 1, 2]), x.value().get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(*back.value(), *x.value());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[f32::MAX]));
        assert!(matches!(
            x.scale(10.0),
            Err(crate::tensor::TensorError::NonFinite { .. })
        ));
    }
}
