//! Convolution and pooling ops over channel-last layouts.
//!
//! 2-D ops take `(rows, cols, C)`. Spectral 3-D ops take depth-major
//! `(depth, rows, cols, C)` so that every depth slice is a contiguous
//! `(pixels, C)` block and a `k x 1 x 1` convolution is a sum of `k`
//! shifted matrix products.

use super::gemm::{gemm, MatRef};
use super::{invalid, mismatch, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stride {
    pub rows: usize,
    pub cols: usize,
}

impl Stride {
    pub const ONE: Stride = Stride { rows: 1, cols: 1 };
    pub const TWO: Stride = Stride { rows: 2, cols: 2 };
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: Stride,
    pad_r: usize,
    pad_c: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input pixel feeding output `(oi, oj)` at kernel tap `(ki, kj)`.
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let r = (oi * self.stride.rows + ki).checked_sub(self.pad_r)?;
        let c = (oj * self.stride.cols + kj).checked_sub(self.pad_c)?;
        (r < self.h && c < self.w).then(|| r * self.w + c)
    }
}

fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.ho * g.wo * patch];
    for oi in 0..g.ho {
        for oj in 0..g.wo {
            let row = &mut cols[(oi * g.wo + oj) * patch..][..patch];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    if let Some(p) = g.source(oi, oj, ki, kj) {
                        row[(ki * g.kw + kj) * g.cin..][..g.cin]
                            .copy_from_slice(&x[p * g.cin..][..g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &Geometry) -> Vec<f32> {
    let patch = g.patch();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oi in 0..g.ho {
        for oj in 0..g.wo {
            let row = &cols[(oi * g.wo + oj) * patch..][..patch];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    if let Some(p) = g.source(oi, oj, ki, kj) {
                        let src = &row[(ki * g.kw + kj) * g.cin..][..g.cin];
                        x[p * g.cin..][..g.cin]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
    x
}

/// Extents of a depth-only convolution; output rows are processed in
/// blocks of whole depth slices small enough to stay in cache.
#[derive(Clone, Copy)]
struct DepthGeometry {
    depth: usize,
    out_depth: usize,
    px: usize,
    cin: usize,
    cout: usize,
    kd: usize,
    pad: usize,
}

/// Target number of output values per block.
const DEPTH_BLOCK_VALUES: usize = 1 << 15;

impl DepthGeometry {
    fn patch(&self) -> usize {
        self.kd * self.cin
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per = (DEPTH_BLOCK_VALUES / (self.px * self.patch().max(self.cout)).max(1)).max(1);
        let n = self.out_depth;
        (0..n.div_ceil(per)).map(move |i| (i * per, ((i + 1) * per).min(n)))
    }

    /// Rows `(d, p)` for output depths `[d0, d1)`, each holding the `kd`
    /// input vectors `x[d + tap - pad, p, :]` (zero outside the input).
    fn im2col(&self, x: &[f32], d0: usize, d1: usize, buf: &mut Vec<f32>) {
        let (patch, cin) = (self.patch(), self.cin);
        buf.clear();
        buf.resize((d1 - d0) * self.px * patch, 0.0);
        for d in d0..d1 {
            for tap in 0..self.kd {
                let Some(src) = (d + tap).checked_sub(self.pad).filter(|&s| s < self.depth) else {
                    continue;
                };
                let src_rows = &x[src * self.px * cin..(src + 1) * self.px * cin];
                let dst = &mut buf[(d - d0) * self.px * patch..];
                for (p, v) in src_rows.chunks_exact(cin).enumerate() {
                    dst[p * patch + tap * cin..][..cin].copy_from_slice(v);
                }
            }
        }
    }

    /// Adjoint of [`DepthGeometry::im2col`], accumulating into `gx`.
    fn col2im(&self, cols: &[f32], d0: usize, d1: usize, gx: &mut [f32]) {
        let (patch, cin) = (self.patch(), self.cin);
        for d in d0..d1 {
            for tap in 0..self.kd {
                let Some(src) = (d + tap).checked_sub(self.pad).filter(|&s| s < self.depth) else {
                    continue;
                };
                let dst = &mut gx[src * self.px * cin..(src + 1) * self.px * cin];
                let rows = &cols[(d - d0) * self.px * patch..];
                for (p, v) in dst.chunks_exact_mut(cin).enumerate() {
                    v.iter_mut()
                        .zip(&rows[p * patch + tap * cin..][..cin])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `(rows, cols, Cin)` with a `(kh, kw, Cin, Cout)`
    /// kernel. With `zero_pad` the input is padded by `k / 2` on each side.
    pub fn conv2d(self, kernel: Var<'t>, stride: Stride, zero_pad: bool) -> Result<Var<'t>> {
        self.conv2d_impl(kernel, None, stride, zero_pad)
    }

    /// [`Var::conv2d`] followed by a per-channel `(Cout)` bias.
    pub fn conv2d_bias(self, kernel: Var<'t>, bias: Var<'t>, stride: Stride, zero_pad: bool) -> Result<Var<'t>> {
        self.conv2d_impl(kernel, Some(bias), stride, zero_pad)
    }

    fn conv2d_impl(self, kernel: Var<'t>, bias: Option<Var<'t>>, stride: Stride, zero_pad: bool) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 3 || k.rank() != 4 || x.shape()[2] != k.shape()[2] {
            return Err(mismatch("conv2d", x.shape(), k.shape()));
        }
        if stride.rows == 0 || stride.cols == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(mismatch("conv2d", k.shape(), b.shape()));
            }
        }
        let (pad_r, pad_c) = if zero_pad { (kh / 2, kw / 2) } else { (0, 0) };
        if kh > h + 2 * pad_r || kw > w + 2 * pad_c || kh == 0 || kw == 0 {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let geo = Geometry {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_r,
            pad_c,
            ho: (h + 2 * pad_r - kh) / stride.rows + 1,
            wo: (w + 2 * pad_c - kw) / stride.cols + 1,
        };
        let pointwise = kh == 1 && kw == 1 && stride == Stride::ONE;
        let cols = if pointwise {
            x.data().to_vec()
        } else {
            im2col(x.data(), &geo)
        };
        let m = geo.ho * geo.wo;
        let patch = geo.patch();
        let mut out = vec![0.0; m * cout];
        if let Some(b) = &b {
            for row in out.chunks_mut(cout.max(1)) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            MatRef::new(&cols, m, patch),
            MatRef::new(k.data(), patch, cout),
            &mut out,
            cout,
            true,
        );
        let out_shape = [geo.ho, geo.wo, cout];
        let (ix, ik, ib) = (self.id(), kernel.id(), bias.map(|b| b.id()));
        let parents: Vec<Var<'t>> = [Some(self), Some(kernel), bias].into_iter().flatten().collect();
        self.tape().push(
            "conv2d",
            Tensor::new(&out_shape, out)?,
            &parents,
            move |g, sink| {
                if let Some(ib) = ib {
                    if sink.needs(ib) {
                        sink.add_owned(ib, super::ops::column_sums(g, m, geo.cout));
                    }
                }
                if sink.needs(ik) {
                    let mut gk = vec![0.0; patch * geo.cout];
                    gemm(
                        MatRef::new(&cols, m, patch).t(),
                        MatRef::new(g, m, geo.cout),
                        &mut gk,
                        geo.cout,
                        false,
                    );
                    sink.add_owned(ik, gk);
                }
                if sink.needs(ix) {
                    let mut gcols = vec![0.0; m * patch];
                    gemm(
                        MatRef::new(g, m, geo.cout),
                        MatRef::new(k.data(), patch, geo.cout).t(),
                        &mut gcols,
                        patch,
                        false,
                    );
                    let gx = if pointwise { gcols } else { col2im(&gcols, &geo) };
                    sink.add_owned(ix, gx);
                }
            },
        )
    }

    /// Depthwise `k x k` convolution of `(rows, cols, C)` with a `(k, k, C)`
    /// kernel, stride 1, zero padding `k / 2`.
    pub fn depthwise_conv2d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 3 || k.rank() != 3 || k.shape()[2] != x.shape()[2] || k.shape()[0] != k.shape()[1] {
            return Err(mismatch("depthwise_conv2d", x.shape(), k.shape()));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ks = k.shape()[0];
        if ks % 2 == 0 {
            return Err(invalid("depthwise_conv2d", "kernel side must be odd"));
        }
        let pad = ks / 2;
        // (output pixel, input pixel, tap) triples, shared by both passes
        let taps = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for i in 0..h {
                for j in 0..w {
                    for ki in 0..ks {
                        let Some(r) = (i + ki).checked_sub(pad).filter(|&r| r < h) else {
                            continue;
                        };
                        for kj in 0..ks {
                            let Some(cc) = (j + kj).checked_sub(pad).filter(|&cc| cc < w) else {
                                continue;
                            };
                            f(i * w + j, r * w + cc, ki * ks + kj);
                        }
                    }
                }
            }
        };
        let mut out = vec![0.0; h * w * c];
        taps(&mut |o, p, t| {
            let (orow, xrow, krow) = (&mut out[o * c..][..c], &x.data()[p * c..][..c], &k.data()[t * c..][..c]);
            for ch in 0..c {
                orow[ch] += xrow[ch] * krow[ch];
            }
        });
        let (ix, ik) = (self.id(), kernel.id());
        self.tape().push(
            "depthwise_conv2d",
            Tensor::new(x.shape(), out)?,
            &[self, kernel],
            move |g, sink| {
                let (need_x, need_k) = (sink.needs(ix), sink.needs(ik));
                let mut gx = vec![0.0; if need_x { h * w * c } else { 0 }];
                let mut gk = vec![0.0; if need_k { ks * ks * c } else { 0 }];
                taps(&mut |o, p, t| {
                    let grow = &g[o * c..][..c];
                    if need_x {
                        let krow = &k.data()[t * c..][..c];
                        for ch in 0..c {
                            gx[p * c + ch] += grow[ch] * krow[ch];
                        }
                    }
                    if need_k {
                        let xrow = &x.data()[p * c..][..c];
                        for ch in 0..c {
                            gk[t * c + ch] += grow[ch] * xrow[ch];
                        }
                    }
                });
                if need_x {
                    sink.add_owned(ix, gx);
                }
                if need_k {
                    sink.add_owned(ik, gk);
                }
            },
        )
    }

    /// Spectral convolution of a depth-major `(D, rows, cols, Cin)` tensor
    /// with a `(kd, 1, 1, Cin, Cout)` kernel, stride 1, zero padding `kd / 2`
    /// along depth only.
    pub fn conv3d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.conv3d_impl(kernel, None)
    }

    /// [`Var::conv3d`] followed by a per-channel `(Cout)` bias.
    pub fn conv3d_bias(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.conv3d_impl(kernel, Some(bias))
    }

    fn conv3d_impl(self, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 4 || k.rank() != 5 || k.shape()[3] != x.shape()[3] {
            return Err(mismatch("conv3d", x.shape(), k.shape()));
        }
        if k.shape()[1] != 1 || k.shape()[2] != 1 {
            return Err(invalid("conv3d", "only k x 1 x 1 kernels are supported"));
        }
        let (depth, rows, cols, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kd, cout) = (k.shape()[0], k.shape()[4]);
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(mismatch("conv3d", k.shape(), b.shape()));
            }
        }
        let pad = kd / 2;
        if kd == 0 || kd > depth + 2 * pad {
            return Err(invalid(
                "conv3d",
                format!("depth kernel {kd} larger than padded depth {}", depth + 2 * pad),
            ));
        }
        let geo = DepthGeometry {
            depth,
            out_depth: depth + 2 * pad - kd + 1,
            px: rows * cols,
            cin,
            cout,
            kd,
            pad,
        };
        let mut out = vec![0.0; geo.out_depth * geo.px * cout];
        if let Some(b) = &b {
            for row in out.chunks_mut(cout.max(1)) {
                row.copy_from_slice(b.data());
            }
        }
        let mut cols_buf = Vec::new();
        for (d0, d1) in geo.blocks() {
            geo.im2col(x.data(), d0, d1, &mut cols_buf);
            let m = (d1 - d0) * geo.px;
            gemm(
                MatRef::new(&cols_buf, m, geo.patch()),
                MatRef::new(k.data(), geo.patch(), cout),
                &mut out[d0 * geo.px * cout..],
                cout,
                true,
            );
        }
        let out_shape = [geo.out_depth, rows, cols, cout];
        let (ix, ik, ib) = (self.id(), kernel.id(), bias.map(|b| b.id()));
        let parents: Vec<Var<'t>> = [Some(self), Some(kernel), bias].into_iter().flatten().collect();
        self.tape().push("conv3d", Tensor::new(&out_shape, out)?, &parents, move |g, sink| {
            let (need_x, need_k) = (sink.needs(ix), sink.needs(ik));
            if let Some(ib) = ib {
                if sink.needs(ib) {
                    sink.add_owned(ib, super::ops::column_sums(g, g.len() / cout.max(1), cout));
                }
            }
            if !need_x && !need_k {
                return;
            }
            let patch = geo.patch();
            let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
            let mut gk = vec![0.0; if need_k { patch * cout } else { 0 }];
            let (mut cols_buf, mut gcols) = (Vec::new(), Vec::new());
            for (d0, d1) in geo.blocks() {
                let m = (d1 - d0) * geo.px;
                let g_block = MatRef::new(&g[d0 * geo.px * cout..], m, cout);
                if need_k {
                    geo.im2col(x.data(), d0, d1, &mut cols_buf);
                    gemm(MatRef::new(&cols_buf, m, patch).t(), g_block, &mut gk, cout, true);
                }
                if need_x {
                    gcols.clear();
                    gcols.resize(m * patch, 0.0);
                    gemm(g_block, MatRef::new(k.data(), patch, cout).t(), &mut gcols, patch, false);
                    geo.col2im(&gcols, d0, d1, &mut gx);
                }
            }
            if need_x {
                sink.add_owned(ix, gx);
            }
            if need_k {
                sink.add_owned(ik, gk);
            }
        })
    }

    /// Max pooling of a depth-major `(D, rows, cols, C)` tensor over
    /// non-overlapping depth windows; output depth is `floor(D / window)`.
    /// Ties route the gradient to the lowest depth index.
    pub fn maxpool3d(self, window: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(invalid("maxpool3d", format!("expected rank 4, got {:?}", x.shape())));
        }
        let depth = x.shape()[0];
        if window == 0 || window > u8::MAX as usize || depth < window {
            return Err(invalid("maxpool3d", format!("depth {depth} smaller than window {window}")));
        }
        let block = x.len() / depth;
        let out_depth = depth / window;
        let mut out = vec![0.0; out_depth * block];
        let mut arg = vec![0u8; out_depth * block];
        for d in 0..out_depth {
            out[d * block..(d + 1) * block]
                .copy_from_slice(&x.data()[d * window * block..][..block]);
            for offset in 1..window {
                let src = &x.data()[(d * window + offset) * block..][..block];
                for (i, &v) in src.iter().enumerate() {
                    let o = d * block + i;
                    if v > out[o] {
                        out[o] = v;
                        arg[o] = offset as u8;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = out_depth;
        let (id, total) = (self.id(), x.len());
        self.tape().push("maxpool3d", Tensor::new(&shape, out)?, &[self], move |g, sink| {
            if sink.needs(id) {
                let mut grad = vec![0.0; total];
                for d in 0..out_depth {
                    for i in 0..block {
                        let o = d * block + i;
                        grad[(d * window + arg[o] as usize) * block + i] = g[o];
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
    use crate::tensor::Tape;

    #[test]
    fn pointwise_kernel_sums_channels() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[4, 4, 2], |i| (i % 7) as f32);
        let expect: Vec<f32> = x.data().chunks(2).map(|p| p[0] + p[1]).collect();
        let xv = tape.constant(x);
        let k = tape.constant(Tensor::full(&[1, 1, 2, 1], 1.0));
        let out = xv.conv2d(k, Stride::ONE, false).unwrap().value();
        assert_eq!(out.shape(), &[4, 4, 1]);
        assert_eq!(out.data(), &expect[..]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[5, 6, 3], |i| ((i * 31 % 17) as f32 - 8.0) * 0.37);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.set(&[1, 1, c, c], 1.0);
        }
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(k), Stride::ONE, true)
            .unwrap()
            .value();
        assert_eq!(*out, x);
    }

    #[test]
    fn strided_output_extents() {
        let tape = Tape::new();
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
        let out = tape.constant(Tensor::zeros(&[8, 8, 1])).conv2d(k, Stride::TWO, true).unwrap();
        assert_eq!(out.shape(), vec![4, 4, 2]);
        let out = tape.constant(Tensor::zeros(&[25, 25, 1])).conv2d(k, Stride::TWO, true).unwrap();
        assert_eq!(out.shape(), vec![13, 13, 2]);
        let small = tape.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(small.conv2d(k, Stride::ONE, false).is_err());
    }

    #[test]
    fn conv3d_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 1, 1, 1], vec![0.0, 3.0, 0.0]).unwrap());
        let avg = tape.constant(Tensor::full(&[3, 1, 1, 1, 1], 1.0 / 3.0));
        let out = x.conv3d(avg).unwrap().value();
        assert_eq!(out.shape(), &[3, 1, 1, 1]);
        assert!((out.data()[1] - 1.0).abs() < 1e-7);

        let seq = Tensor::from_fn(&[8, 2, 2, 1], |i| i as f32);
        let unit = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        assert_eq!(*tape.constant(seq.clone()).conv3d(unit).unwrap().value(), seq);

        let k3 = tape.constant(Tensor::zeros(&[3, 1, 1, 1, 4]));
        let out = tape.constant(seq).conv3d(k3).unwrap();
        assert_eq!(out.shape(), vec![8, 2, 2, 4]);
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1, 1, 1], vec![1.0, 5.0, 2.0, 2.0]).unwrap());
        assert_eq!(x.maxpool3d(2).unwrap().value().data(), &[5.0, 2.0]);
        let c = tape.constant(Tensor::full(&[6, 2, 1, 3], 0.4));
        assert!(c.maxpool3d(2).unwrap().value().data().iter().all(|&v| v == 0.4));
        let seven = tape.constant(Tensor::zeros(&[7, 1, 1, 1]));
        assert_eq!(seven.maxpool3d(2).unwrap().shape(), vec![3, 1, 1, 1]);
        let one = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(one.maxpool3d(2).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::new(&[2, 1, 1, 1], vec![2.0, 2.0]).unwrap());
        let s = x.maxpool3d(2).unwrap().sum().unwrap();
        let g = tape.backward(s).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn depthwise_border_attenuation() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 4, 1], 9.0));
        let k = tape.constant(Tensor::full(&[3, 3, 1], 1.0 / 9.0));
        let out = x.depthwise_conv2d(k).unwrap().value();
        assert!((out.get(&[1, 1, 0]) - 9.0).abs() < 1e-5);
        assert!((out.get(&[0, 1, 0]) - 6.0).abs() < 1e-5);
        assert!((out.get(&[0, 0, 0]) - 4.0).abs() < 1e-5);
    }
}
