//! Forward kernels and their vector-Jacobian products.
//!
//! Every forward kernel here is a pure function of its inputs. The graph in
//! `graph.rs` records calls to these kernels and replays the matching
//! `*_backward` function during the reverse sweep.

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// `out[r][c] = Σ_k x[r][k]·w[k][c] + b[c]` for `x: B×in`, `w: in×out`, `b: out`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_affine(x, w, b)?;
    let (rows, inner, cols) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let xr = &x.data()[r * inner..(r + 1) * inner];
        let mut acc = b.data().to_vec();
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w.data()[k * cols..(k + 1) * cols];
            for (a, &wv) in acc.iter_mut().zip(wr) {
                *a += xv * wv;
            }
        }
        out.extend_from_slice(&acc);
    }
    Tensor::new(vec![rows, cols], out)
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    let ok = x.rank() == 2
        && w.rank() == 2
        && b.rank() == 1
        && x.shape()[1] == w.shape()[0]
        && b.shape()[0] == w.shape()[1];
    if ok {
        Ok(())
    } else {
        Err(dim_err(
            "affine",
            format!(
                "x {:?} incompatible with W {:?} and b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ))
    }
}

/// Returns `(dx, dw, db)`.
pub fn affine_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, inner, cols) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut dx = vec![0.0; rows * inner];
    let mut dw = vec![0.0; inner * cols];
    let mut db = vec![0.0; cols];
    for r in 0..rows {
        let g = &gy.data()[r * cols..(r + 1) * cols];
        let xr = &x.data()[r * inner..(r + 1) * inner];
        for (d, &gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for k in 0..inner {
            let wr = &w.data()[k * cols..(k + 1) * cols];
            dx[r * inner + k] = wr.iter().zip(g).map(|(a, b)| a * b).sum();
            let xv = xr[k];
            if xv != 0.0 {
                for (d, &gv) in dw[k * cols..(k + 1) * cols].iter_mut().zip(g) {
                    *d += xv * gv;
                }
            }
        }
    }
    (
        Tensor::new(vec![rows, inner], dx).expect("shape"),
        Tensor::new(vec![inner, cols], dw).expect("shape"),
        Tensor::vector(db),
    )
}

/// Geometry of one cross-correlation call.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (batch, c_in, h, w) = match x.shape() {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(dim_err("conv2d", format!("input must be C×H×W or B×C×H×W, got {s:?}"))),
    };
    let [c_out, kc, kh, kw] = kernels.shape() else {
        return Err(dim_err(
            "conv2d",
            format!("kernels must be C_out×C_in×k×k, got {:?}", kernels.shape()),
        ));
    };
    if *kc != c_in || kh != kw {
        return Err(dim_err(
            "conv2d",
            format!("input {:?} incompatible with kernels {:?}", x.shape(), kernels.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be positive".into()));
    }
    let k = *kh;
    if h + 2 * pad < k || w + 2 * pad < k || k == 0 {
        return Err(dim_err(
            "conv2d",
            format!(
                "kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out: *c_out,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (w + 2 * pad - k) / stride + 1,
    })
}

/// Zero-padded cross-correlation. Accepts `C×H×W` or a batch `B×C×H×W`.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, kernels, stride, pad)?;
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        let xb = &xd[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let ob = &mut out[b * g.c_out * g.oh * g.ow..(b + 1) * g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                let xc = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                let kern = &kd[(co * g.c_in + ci) * g.k * g.k..(co * g.c_in + ci + 1) * g.k * g.k];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += xc[iy as usize * g.w + ix as usize] * kern[ky * g.k + kx];
                            }
                        }
                        ob[(co * g.oh + oy) * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    let shape = if x.rank() == 3 {
        vec![g.c_out, g.oh, g.ow]
    } else {
        vec![g.batch, g.c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}

/// Returns `(dx, dkernels)`.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    gy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(x, kernels, stride, pad)?;
    let xd = x.data();
    let kd = kernels.data();
    let gd = gy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for b in 0..g.batch {
        let x_off = b * g.c_in * g.h * g.w;
        let g_off = b * g.c_out * g.oh * g.ow;
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                let k_off = (co * g.c_in + ci) * g.k * g.k;
                let xc_off = x_off + ci * g.h * g.w;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = gd[g_off + (co * g.oh + oy) * g.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = xc_off + iy as usize * g.w + ix as usize;
                                let ki = k_off + ky * g.k + kx;
                                dk[ki] += go * xd[xi];
                                dx[xi] += go * kd[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernels.shape().to_vec(), dk)?,
    ))
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient mask is `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

fn pool_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (batch, c, hw) = match x.shape() {
        [c, h, w] => (1, *c, h * w),
        [b, c, h, w] => (*b, *c, h * w),
        s => return Err(dim_err("global_avg_pool", format!("expected C×H×W or B×C×H×W, got {s:?}"))),
    };
    if hw == 0 {
        return Err(dim_err("global_avg_pool", "empty spatial extent"));
    }
    Ok((batch, c, hw))
}

/// Spatial mean per channel: `C×H×W → C`, `B×C×H×W → B×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (batch, c, hw) = pool_dims(x)?;
    let out: Vec<f64> = x
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    let shape = if x.rank() == 3 { vec![c] } else { vec![batch, c] };
    Tensor::new(shape, out)
}

pub fn global_avg_pool_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let (_, _, hw) = pool_dims(x)?;
    let mut dx = Vec::with_capacity(x.len());
    for &g in gy.data() {
        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(x.shape().to_vec(), dx)
}

fn last_axis(x: &Tensor) -> usize {
    x.shape().last().copied().unwrap_or(1)
}

/// `v / (‖v‖₂ + eps)`, applied to each row of the last axis.
pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Parameter(format!("l2_normalize eps must be positive, got {eps}")));
    }
    let d = last_axis(v);
    let mut out = Vec::with_capacity(v.len());
    for row in v.data().chunks(d.max(1)) {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.extend(row.iter().map(|a| a / (n + eps)));
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub fn l2_normalize_backward(v: &Tensor, eps: f64, gy: &Tensor) -> Tensor {
    let d = last_axis(v).max(1);
    let mut out = Vec::with_capacity(v.len());
    for (row, g) in v.data().chunks(d).zip(gy.data().chunks(d)) {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = n + eps;
        if n == 0.0 {
            out.extend(g.iter().map(|gv| gv / denom));
            continue;
        }
        let vg: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
        let coef = vg / (n * denom * denom);
        out.extend(row.iter().zip(g).map(|(a, gv)| gv / denom - a * coef));
    }
    Tensor::new(v.shape().to_vec(), out).expect("shape")
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// Tempered softmax over the last axis, with max-subtraction.
pub fn softmax_with_temperature(z: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let n = last_axis(z).max(1);
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    Tensor::new(z.shape().to_vec(), out)
}

pub fn softmax_backward(p: &Tensor, tau: f64, gy: &Tensor) -> Tensor {
    let n = last_axis(p).max(1);
    let mut out = Vec::with_capacity(p.len());
    for (pr, g) in p.data().chunks(n).zip(gy.data().chunks(n)) {
        let dot: f64 = pr.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(pr.iter().zip(g).map(|(pv, gv)| pv * (gv - dot) / tau));
    }
    Tensor::new(p.shape().to_vec(), out).expect("shape")
}

/// `ln softmax(z/τ)` over the last axis.
pub fn log_softmax_with_temperature(z: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let n = last_axis(z).max(1);
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(n) {
        let (k, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(i, a), (j, &b)| if b > a { (j, b) } else { (i, a) });
        // ln(1 + Σ_{j≠k} e^{(z_j−max)/τ}) keeps precision when one entry dominates
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, &v)| ((v - max) / tau).exp())
            .sum();
        let lse = rest.ln_1p();
        out.extend(row.iter().map(|&v| (v - max) / tau - lse));
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Backward of log-softmax given its output `logp`.
pub fn log_softmax_backward(logp: &Tensor, tau: f64, gy: &Tensor) -> Tensor {
    let n = last_axis(logp).max(1);
    let mut out = Vec::with_capacity(logp.len());
    for (lr, g) in logp.data().chunks(n).zip(gy.data().chunks(n)) {
        let gsum: f64 = g.iter().sum();
        out.extend(lr.iter().zip(g).map(|(l, gv)| (gv - l.exp() * gsum) / tau));
    }
    Tensor::new(logp.shape().to_vec(), out).expect("shape")
}

/// Similarity logits `[q·k₊, q·k₁, …, q·k_M]` per row (not yet divided by τ).
pub fn similarity_logits(q: &Tensor, positives: &Tensor, bank: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || positives.shape() != q.shape() || bank.rank() != 2 || bank.cols() != q.cols() {
        return Err(dim_err(
            "similarity_logits",
            format!(
                "q {:?}, positives {:?}, bank {:?}",
                q.shape(),
                positives.shape(),
                bank.shape()
            ),
        ));
    }
    let (b, m) = (q.rows(), bank.rows());
    let mut out = Vec::with_capacity(b * (m + 1));
    for i in 0..b {
        let qi = q.row(i);
        out.push(dot(qi, positives.row(i)));
        for j in 0..m {
            out.push(dot(qi, bank.row(j)));
        }
    }
    Tensor::new(vec![b, m + 1], out)
}

/// Gradient with respect to `q` only; positives and bank are constants.
pub fn similarity_logits_backward(positives: &Tensor, bank: &Tensor, gy: &Tensor) -> Tensor {
    let (b, d, m) = (positives.rows(), positives.cols(), bank.rows());
    let mut out = vec![0.0; b * d];
    for i in 0..b {
        let g = &gy.data()[i * (m + 1)..(i + 1) * (m + 1)];
        let row = &mut out[i * d..(i + 1) * d];
        for (r, p) in row.iter_mut().zip(positives.row(i)) {
            *r += g[0] * p;
        }
        for j in 0..m {
            let gj = g[j + 1];
            for (r, k) in row.iter_mut().zip(bank.row(j)) {
                *r += gj * k;
            }
        }
    }
    Tensor::new(vec![b, d], out).expect("shape")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_i t_i (ln t_i − logq_i)` averaged over rows, with `0·ln 0 = 0`.
pub fn kl_rows_mean(targets: &Tensor, logq: &Tensor) -> Result<f64> {
    if targets.shape() != logq.shape() {
        return Err(Error::Contract(format!(
            "distribution length mismatch: {:?} vs {:?}",
            targets.shape(),
            logq.shape()
        )));
    }
    let n = last_axis(logq).max(1);
    let rows = logq.len() / n;
    let mut total = 0.0;
    for (t, lq) in targets.data().chunks(n).zip(logq.data().chunks(n)) {
        total += t
            .iter()
            .zip(lq)
            .filter(|(tv, _)| **tv > 0.0)
            .map(|(tv, l)| tv * (tv.ln() - l))
            .sum::<f64>();
    }
    Ok(total / rows as f64)
}
