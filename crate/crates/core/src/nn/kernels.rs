//! Forward and backward kernels for the dense layers.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Unfolds one `(c, h, w)` image into a `(c·k·k) × (h·w)` column matrix for a
/// stride-1, same-padded `k × k` convolution.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, k, k2) = weight.dims4()?;
    if cin != c || k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut cols = vec![0.0; ckk * hw];
    let bias = bias.data();
    for (img, o) in x
        .data()
        .chunks_exact(c * hw)
        .zip(out.data_mut().chunks_exact_mut(cout * hw))
    {
        im2col(img, c, h, w, k, &mut cols);
        for (oc, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[oc]);
        }
        gemm(cout, ckk, hw, weight.data(), false, &cols, false, o, true);
    }
    Ok(out)
}

/// Returns `dx`; accumulates `dw` and `db` when provided.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    mut dw: Option<&mut Tensor>,
    mut db: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, _, k, _) = weight.dims4()?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let mut cols = vec![0.0; ckk * hw];
    let mut dcols = vec![0.0; ckk * hw];
    for b in 0..n {
        let img = &x.data()[b * c * hw..(b + 1) * c * hw];
        let g = &dy.data()[b * cout * hw..(b + 1) * cout * hw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(img, c, h, w, k, &mut cols);
            gemm(cout, hw, ckk, g, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(db) = db.as_deref_mut() {
            for (oc, plane) in g.chunks_exact(hw).enumerate() {
                db.data_mut()[oc] += plane.iter().sum::<f64>();
            }
        }
        gemm(ckk, cout, hw, weight.data(), true, g, false, &mut dcols, false);
        col2im(
            &dcols,
            c,
            h,
            w,
            k,
            &mut dx.data_mut()[b * c * hw..(b + 1) * c * hw],
        );
    }
    Ok(dx)
}

pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fin) = x.dims2()?;
    let (fout, win) = weight.dims2()?;
    if win != fin {
        return Err(Error::shape(format!(
            "linear weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, fin, fout, x.data(), false, weight.data(), true, out.data_mut(), true);
    Ok(out)
}

pub(crate) fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    dw: Option<&mut Tensor>,
    db: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = weight.dims2()?;
    if let Some(dw) = dw {
        gemm(fout, n, fin, dy.data(), true, x.data(), false, dw.data_mut(), true);
    }
    if let Some(db) = db {
        for row in dy.data().chunks_exact(fout) {
            for (d, g) in db.data_mut().iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    let mut dx = Tensor::zeros(&[n, fin]);
    gemm(n, fout, fin, dy.data(), false, weight.data(), false, dx.data_mut(), false);
    Ok(dx)
}

/// Per-channel statistics over `(n, h, w)`.
fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in x.data().chunks_exact(c * hw) {
        for (ch, plane) in img.chunks_exact(hw).enumerate() {
            mean[ch] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for img in x.data().chunks_exact(c * hw) {
        for (ch, plane) in img.chunks_exact(hw).enumerate() {
            let m = mean[ch];
            var[ch] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

pub(crate) struct BnTrainCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm. Returns output, cache, and the batch mean and
/// unbiased variance for the running-statistics update.
pub(crate) fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BnTrainCache, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let (mean, var) = channel_moments(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (i, (xp, yp)) in xhat
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(y.data_mut().chunks_exact_mut(hw))
        .enumerate()
    {
        let ch = i % c;
        let (g, bta) = (gamma.data()[ch], beta.data()[ch]);
        for (xv, yv) in xp.iter_mut().zip(yp.iter_mut()) {
            let nv = (*xv - mean[ch]) * inv_std[ch];
            *xv = nv;
            *yv = g * nv + bta;
        }
    }
    let count = (n * hw) as f64;
    let unbiased: Vec<f64> = var
        .iter()
        .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
        .collect();
    Ok((y, BnTrainCache { xhat, inv_std }, mean, unbiased))
}

pub(crate) fn batchnorm_train_backward(
    cache: &BnTrainCache,
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: Option<&mut Tensor>,
    dbeta: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (n, c, h, w) = dy.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (i, (g, xh)) in dy
        .data()
        .chunks_exact(hw)
        .zip(cache.xhat.data().chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        for (gv, xv) in g.iter().zip(xh) {
            sum_dy[ch] += gv;
            sum_dy_xhat[ch] += gv * xv;
        }
    }
    if let Some(dg) = dgamma {
        for (d, s) in dg.data_mut().iter_mut().zip(&sum_dy_xhat) {
            *d += s;
        }
    }
    if let Some(db) = dbeta {
        for (d, s) in db.data_mut().iter_mut().zip(&sum_dy) {
            *d += s;
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for (i, ((dxp, g), xh)) in dx
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(dy.data().chunks_exact(hw))
        .zip(cache.xhat.data().chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / count;
        for ((d, gv), xv) in dxp.iter_mut().zip(g).zip(xh) {
            *d = scale * (count * gv - sum_dy[ch] - xv * sum_dy_xhat[ch]);
        }
    }
    Ok(dx)
}

pub(crate) fn batchnorm_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
        let ch = i % c;
        let inv = 1.0 / (running_var.data()[ch] + BN_EPS).sqrt();
        let (g, b, m) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
        for v in plane {
            *v = g * (*v - m) * inv + b;
        }
    }
    Ok(y)
}

pub(crate) fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    dy: &Tensor,
    mut dgamma: Option<&mut Tensor>,
    mut dbeta: Option<&mut Tensor>,
) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut dx = dy.clone();
    for (i, (dxp, xp)) in dx
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(x.data().chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        let inv = 1.0 / (running_var.data()[ch] + BN_EPS).sqrt();
        let m = running_mean.data()[ch];
        if let Some(dg) = dgamma.as_deref_mut() {
            dg.data_mut()[ch] += dxp
                .iter()
                .zip(xp)
                .map(|(g, xv)| g * (xv - m) * inv)
                .sum::<f64>();
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db.data_mut()[ch] += dxp.iter().sum::<f64>();
        }
        let s = gamma.data()[ch] * inv;
        dxp.iter_mut().for_each(|g| *g *= s);
    }
    Ok(dx)
}
