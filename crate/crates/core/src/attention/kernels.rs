//! Fused attention ops over `(rows, cols, C)` query/key/value maps.
//!
//! Channels are split into `m` equal heads of width `d = C / m`. Scores use
//! the usual `1 / sqrt(d)` scaling.

use std::rc::Rc;

use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Result, Tensor, TensorError, Var};

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() { k.shape() } else { v.shape() }.to_vec(),
        });
    }
    let (h, w, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("{c} channels not divisible into {heads} heads"),
        });
    }
    Ok((h, w, c, c / heads))
}

/// Sliding-window neighbourhood of one query: tap `t` of a `window x window`
/// grid centred on `(i, j)` with spacing `rate`, or `None` when it falls
/// outside the map.
#[derive(Clone, Copy)]
struct Neighbourhood {
    rows: usize,
    cols: usize,
    window: usize,
}

impl Neighbourhood {
    fn taps(&self) -> usize {
        self.window * self.window
    }

    fn at(&self, i: usize, j: usize, tap: usize, rate: usize) -> Option<usize> {
        let half = (self.window / 2) as isize;
        let dp = (tap / self.window) as isize - half;
        let dq = (tap % self.window) as isize - half;
        let r = i as isize + dp * rate as isize;
        let c = j as isize + dq * rate as isize;
        (r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols)
            .then(|| r as usize * self.cols + c as usize)
    }
}

fn validate_window(rates: &[usize], window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op: "dilated_attention",
            reason: format!("window must be odd and positive, got {window}"),
        });
    }
    if rates.iter().any(|&r| r == 0) {
        return Err(TensorError::InvalidArgument {
            op: "dilated_attention",
            reason: "dilation rates must be at least 1".into(),
        });
    }
    Ok(())
}

/// Masked softmax weights of sliding-window dilated attention, shaped
/// `(rows * cols, heads, window^2)`. Head `h` uses `rates[h]`; taps outside
/// the map carry weight 0 and are excluded from the normalization.
pub fn dilated_attention_weights(q: &Tensor, k: &Tensor, rates: &[usize], window: usize) -> Result<Tensor> {
    validate_window(rates, window)?;
    let (rows, cols, c, d) = check_qkv("dilated_attention", q, k, k, rates.len())?;
    let heads = rates.len();
    let hood = Neighbourhood { rows, cols, window };
    let taps = hood.taps();
    let scale = 1.0 / (d as f32).sqrt();
    let mut weights = vec![0.0; rows * cols * heads * taps];
    let mut scores = vec![f32::NEG_INFINITY; taps];
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            for (head, &rate) in rates.iter().enumerate() {
                let qrow = &q.data()[p * c + head * d..][..d];
                let mut max = f32::NEG_INFINITY;
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = match hood.at(i, j, t, rate) {
                        Some(n) => {
                            let krow = &k.data()[n * c + head * d..][..d];
                            qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale
                        }
                        None => f32::NEG_INFINITY,
                    };
                    max = max.max(*s);
                }
                let out = &mut weights[(p * heads + head) * taps..][..taps];
                let mut total = 0.0;
                for (o, &s) in out.iter_mut().zip(&scores) {
                    *o = if s == f32::NEG_INFINITY { 0.0 } else { (s - max).exp() };
                    total += *o;
                }
                out.iter_mut().for_each(|o| *o /= total);
            }
        }
    }
    Tensor::new(&[rows * cols, heads, taps], weights)
}

/// Multi-head sliding-window dilated attention. `rates` holds one dilation
/// rate per head; the head count is `rates.len()`.
pub fn dilated_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    rates: &[usize],
    window: usize,
) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (rows, cols, c, d) = check_qkv("dilated_attention", &qv, &kv, &vv, rates.len())?;
    let attn = Rc::new(dilated_attention_weights(&qv, &kv, rates, window)?);
    let heads = rates.len();
    let hood = Neighbourhood { rows, cols, window };
    let taps = hood.taps();
    let rates: Vec<usize> = rates.to_vec();
    let pixels = rows * cols;

    let mut out = vec![0.0; pixels * c];
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            for (head, &rate) in rates.iter().enumerate() {
                let a = &attn.data()[(p * heads + head) * taps..][..taps];
                let orow = &mut out[p * c + head * d..][..d];
                for (t, &wt) in a.iter().enumerate() {
                    if let Some(n) = hood.at(i, j, t, rate) {
                        let vrow = &vv.data()[n * c + head * d..][..d];
                        orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += wt * v);
                    }
                }
            }
        }
    }

    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    let scale = 1.0 / (d as f32).sqrt();
    q.tape().push(
        "dilated_attention",
        Tensor::new(&[rows, cols, c], out)?,
        &[q, k, v],
        move |g, sink| {
            let mut gq = vec![0.0; pixels * c];
            let mut gk = vec![0.0; pixels * c];
            let mut gv = vec![0.0; pixels * c];
            let mut dscore = vec![0.0; taps];
            for i in 0..rows {
                for j in 0..cols {
                    let p = i * cols + j;
                    for (head, &rate) in rates.iter().enumerate() {
                        let a = &attn.data()[(p * heads + head) * taps..][..taps];
                        let grow = &g[p * c + head * d..][..d];
                        let mut weighted = 0.0;
                        for (t, &wt) in a.iter().enumerate() {
                            dscore[t] = match hood.at(i, j, t, rate) {
                                Some(n) => {
                                    let vrow = &vv.data()[n * c + head * d..][..d];
                                    let gvrow = &mut gv[n * c + head * d..][..d];
                                    gvrow.iter_mut().zip(grow).for_each(|(o, g)| *o += wt * g);
                                    grow.iter().zip(vrow).map(|(g, v)| g * v).sum::<f32>()
                                }
                                None => 0.0,
                            };
                            weighted += wt * dscore[t];
                        }
                        let qrow = &qv.data()[p * c + head * d..][..d];
                        for (t, &wt) in a.iter().enumerate() {
                            let Some(n) = hood.at(i, j, t, rate) else {
                                continue;
                            };
                            let ds = wt * (dscore[t] - weighted) * scale;
                            let krow = &kv.data()[n * c + head * d..][..d];
                            let gqrow = &mut gq[p * c + head * d..][..d];
                            gqrow.iter_mut().zip(krow).for_each(|(o, k)| *o += ds * k);
                            let gkrow = &mut gk[n * c + head * d..][..d];
                            gkrow.iter_mut().zip(qrow).for_each(|(o, q)| *o += ds * q);
                        }
                    }
                }
            }
            sink.add_owned(iq, gq);
            sink.add_owned(ik, gk);
            sink.add_owned(iv, gv);
        },
    )
}

/// Dense multi-head softmax attention over all `rows * cols` positions.
pub fn dense_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (rows, cols, c, d) = check_qkv("dense_attention", &qv, &kv, &vv, heads)?;
    let n = rows * cols;
    let scale = 1.0 / (d as f32).sqrt();
    // per-head (n x n) attention matrices, stacked
    let mut attn = vec![0.0; heads * n * n];
    let mut out = vec![0.0; n * c];
    for head in 0..heads {
        let a = &mut attn[head * n * n..][..n * n];
        gemm(
            MatRef::new(qv.data(), n, c).cols_range(head * d, d),
            MatRef::new(kv.data(), n, c).cols_range(head * d, d).t(),
            a,
            n,
            false,
        );
        for row in a.chunks_mut(n) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
        gemm(
            MatRef::new(a, n, n),
            MatRef::new(vv.data(), n, c).cols_range(head * d, d),
            &mut out[head * d..],
            c,
            false,
        );
    }

    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    q.tape().push(
        "dense_attention",
        Tensor::new(&[rows, cols, c], out)?,
        &[q, k, v],
        move |g, sink| {
            let mut gq = vec![0.0; n * c];
            let mut gk = vec![0.0; n * c];
            let mut gv = vec![0.0; n * c];
            let mut ds = vec![0.0; n * n];
            for head in 0..heads {
                let a = &attn[head * n * n..][..n * n];
                let g_head = MatRef::new(g, n, c).cols_range(head * d, d);
                gemm(MatRef::new(a, n, n).t(), g_head, &mut gv[head * d..], c, false);
                gemm(
                    g_head,
                    MatRef::new(vv.data(), n, c).cols_range(head * d, d).t(),
                    &mut ds,
                    n,
                    false,
                );
                for (drow, arow) in ds.chunks_mut(n).zip(a.chunks(n)) {
                    let dot: f32 = drow.iter().zip(arow).map(|(d, a)| d * a).sum();
                    for (dv, &av) in drow.iter_mut().zip(arow) {
                        *dv = av * (*dv - dot) * scale;
                    }
                }
                gemm(
                    MatRef::new(&ds, n, n),
                    MatRef::new(kv.data(), n, c).cols_range(head * d, d),
                    &mut gq[head * d..],
                    c,
                    false,
                );
                gemm(
                    MatRef::new(&ds, n, n).t(),
                    MatRef::new(qv.data(), n, c).cols_range(head * d, d),
                    &mut gk[head * d..],
                    c,
                    false,
                );
            }
            sink.add_owned(iq, gq);
            sink.add_owned(ik, gk);
            sink.add_owned(iv, gv);
        },
    )
}

/// Single-head sliding-window dilated attention with dilation `rate` over a
/// `window x window` neighbourhood.
pub fn swda<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, rate: usize, window: usize) -> Result<Var<'t>> {
    dilated_attention(q, k, v, &[rate], window)
}
