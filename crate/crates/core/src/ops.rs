//! Forward and backward kernels for every differentiable operation.
//!
//! Single-image layout: activations are `(C, H, W)`, matrices `(R, C)`,
//! conv kernels `(C_out, C_in, k, k)`. Transposed-conv kernels are
//! `(C_in, C_out, k, k)` so that a transposed convolution with a shared
//! kernel is the exact adjoint of the matching convolution.

use crate::error::DiffError;
use crate::tensor::{Element, Tensor};

// ---------------------------------------------------------------------------
// convolution

pub fn conv2d_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = h + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

fn pad_image<E: Element>(x: &Tensor<E>, c: usize, h: usize, w: usize, pad: usize) -> Tensor<E> {
    if pad == 0 {
        return x.clone();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let s = ci * h * w + y * w;
            let d = ci * hp * wp + (y + pad) * wp + pad;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

fn unpad_image<E: Element>(xp: &Tensor<E>, c: usize, h: usize, w: usize, pad: usize) -> Tensor<E> {
    if pad == 0 {
        return xp.clone();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = xp.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let s = ci * hp * wp + (y + pad) * wp + pad;
            let d = ci * h * w + y * w;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>, DiffError> {
    let (c_in, h, w) = x.dims3("conv2d")?;
    let (c_out, kc_in, kh, kw) = kernel.dims4("conv2d")?;
    if kc_in != c_in {
        return Err(DiffError::dim(
            "conv2d",
            format!("input has {c_in} channels, kernel expects {kc_in}"),
        ));
    }
    if kh != kw {
        return Err(DiffError::dim("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(DiffError::invalid("conv2d", "stride must be positive"));
    }
    let oh = conv2d_out_dim(h, kh, stride, pad).ok_or_else(|| {
        DiffError::dim(
            "conv2d",
            format!("input {h}x{w}, kernel {kh}, stride {stride}, pad {pad} yields no integral output size"),
        )
    })?;
    let ow = conv2d_out_dim(w, kw, stride, pad).unwrap();

    let xp = pad_image(x, c_in, h, w, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let xd = xp.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for o in 0..c_out {
        for i in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[((o * c_in + i) * kh + ky) * kw + kx];
                    if wgt == E::zero() {
                        continue;
                    }
                    for y in 0..oh {
                        let xrow = i * hp * wp + (y * stride + ky) * wp + kx;
                        let orow = o * oh * ow + y * ow;
                        for xo in 0..ow {
                            od[orow + xo] = od[orow + xo] + wgt * xd[xrow + xo * stride];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<E: Element>(
    grad_out: &Tensor<E>,
    kernel: &Tensor<E>,
    in_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (c_in, h, w) = in_shape;
    let (c_out, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dxp = Tensor::zeros(&[c_in, hp, wp]);
    let gd = grad_out.data();
    let kd = kernel.data();
    let dd = dxp.data_mut();
    for o in 0..c_out {
        for i in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[((o * c_in + i) * kh + ky) * kw + kx];
                    if wgt == E::zero() {
                        continue;
                    }
                    for y in 0..oh {
                        let xrow = i * hp * wp + (y * stride + ky) * wp + kx;
                        let grow = o * oh * ow + y * ow;
                        for xo in 0..ow {
                            dd[xrow + xo * stride] = dd[xrow + xo * stride] + wgt * gd[grow + xo];
                        }
                    }
                }
            }
        }
    }
    unpad_image(&dxp, c_in, h, w, pad)
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_backward_kernel<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    kernel_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (c_out, c_in, kh, kw) = kernel_shape;
    let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let xp = pad_image(x, c_in, h, w, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dk = Tensor::zeros(&[c_out, c_in, kh, kw]);
    let gd = grad_out.data();
    let xd = xp.data();
    let kd = dk.data_mut();
    for o in 0..c_out {
        for i in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = E::zero();
                    for y in 0..oh {
                        let xrow = i * hp * wp + (y * stride + ky) * wp + kx;
                        let grow = o * oh * ow + y * ow;
                        for xo in 0..ow {
                            acc = acc + gd[grow + xo] * xd[xrow + xo * stride];
                        }
                    }
                    kd[((o * c_in + i) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dk
}

// ---------------------------------------------------------------------------
// transposed convolution

pub fn deconv2d_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = stride * (h - 1) + k;
    if full < 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

pub fn deconv2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>, DiffError> {
    let (c_in, h, w) = x.dims3("transposed_conv2d")?;
    let (kc_in, c_out, kh, kw) = kernel.dims4("transposed_conv2d")?;
    if kc_in != c_in {
        return Err(DiffError::dim(
            "transposed_conv2d",
            format!("input has {c_in} channels, kernel expects {kc_in}"),
        ));
    }
    if kh != kw {
        return Err(DiffError::dim(
            "transposed_conv2d",
            format!("kernel must be square, got {kh}x{kw}"),
        ));
    }
    if stride == 0 {
        return Err(DiffError::invalid("transposed_conv2d", "stride must be positive"));
    }
    let oh = deconv2d_out_dim(h, kh, stride, pad).ok_or_else(|| {
        DiffError::dim(
            "transposed_conv2d",
            format!("input {h}, kernel {kh}, stride {stride}, pad {pad} yields negative output size"),
        )
    })?;
    let ow = deconv2d_out_dim(w, kw, stride, pad).unwrap();

    // Scatter into a full (unpadded) buffer, then crop `pad` from each side.
    let (fh, fw) = (stride * (h - 1) + kh, stride * (w - 1) + kw);
    let mut full = Tensor::zeros(&[c_out, fh, fw]);
    let xd = x.data();
    let kd = kernel.data();
    let fd = full.data_mut();
    for i in 0..c_in {
        for o in 0..c_out {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[((i * c_out + o) * kh + ky) * kw + kx];
                    if wgt == E::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let xrow = i * h * w + y * w;
                        let frow = o * fh * fw + (y * stride + ky) * fw + kx;
                        for xi in 0..w {
                            fd[frow + xi * stride] = fd[frow + xi * stride] + wgt * xd[xrow + xi];
                        }
                    }
                }
            }
        }
    }
    Ok(unpad_image(&full, c_out, oh, ow, pad))
}

pub fn deconv2d_backward_input<E: Element>(
    grad_out: &Tensor<E>,
    kernel: &Tensor<E>,
    in_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (c_in, h, w) = in_shape;
    let (_, c_out, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let gp = pad_image(grad_out, c_out, oh, ow, pad);
    let (fh, fw) = (oh + 2 * pad, ow + 2 * pad);
    let mut dx = Tensor::zeros(&[c_in, h, w]);
    let gd = gp.data();
    let kd = kernel.data();
    let dd = dx.data_mut();
    for i in 0..c_in {
        for o in 0..c_out {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[((i * c_out + o) * kh + ky) * kw + kx];
                    if wgt == E::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let drow = i * h * w + y * w;
                        let grow = o * fh * fw + (y * stride + ky) * fw + kx;
                        for xi in 0..w {
                            dd[drow + xi] = dd[drow + xi] + wgt * gd[grow + xi * stride];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn deconv2d_backward_kernel<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    kernel_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (c_in, c_out, kh, kw) = kernel_shape;
    let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let gp = pad_image(grad_out, c_out, oh, ow, pad);
    let (fh, fw) = (oh + 2 * pad, ow + 2 * pad);
    let mut dk = Tensor::zeros(&[c_in, c_out, kh, kw]);
    let gd = gp.data();
    let xd = x.data();
    let kd = dk.data_mut();
    for i in 0..c_in {
        for o in 0..c_out {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = E::zero();
                    for y in 0..h {
                        let xrow = i * h * w + y * w;
                        let grow = o * fh * fw + (y * stride + ky) * fw + kx;
                        for xi in 0..w {
                            acc = acc + xd[xrow + xi] * gd[grow + xi * stride];
                        }
                    }
                    kd[((i * c_out + o) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dk
}

// ---------------------------------------------------------------------------
// dense algebra

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, DiffError> {
    let (r, ka) = a.dims2("matmul")?;
    let (kb, c) = b.dims2("matmul")?;
    if ka != kb {
        return Err(DiffError::dim("matmul", format!("inner dims {ka} vs {kb}")));
    }
    let mut out = Tensor::zeros(&[r, c]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..r {
        for k in 0..ka {
            let av = ad[i * ka + k];
            if av == E::zero() {
                continue;
            }
            let brow = k * c;
            let orow = i * c;
            for j in 0..c {
                od[orow + j] = od[orow + j] + av * bd[brow + j];
            }
        }
    }
    Ok(out)
}

pub fn transpose<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>, DiffError> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = Tensor::zeros(&[c, r]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            od[j * r + i] = ad[i * c + j];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// row-wise nonlinearities

/// Row-stable softmax: subtracts the row max before exponentiating.
pub fn softmax_rows<E: Element>(m: &Tensor<E>) -> Result<Tensor<E>, DiffError> {
    let (r, c) = m.dims2("softmax_rows")?;
    if c == 0 {
        return Err(DiffError::dim("softmax_rows", "zero columns"));
    }
    let mut out = Tensor::zeros(&[r, c]);
    let md = m.data();
    let od = out.data_mut();
    for i in 0..r {
        let row = &md[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(row[0], E::max);
        let mut sum = E::zero();
        for j in 0..c {
            let e = (row[j] - mx).exp();
            od[i * c + j] = e;
            sum = sum + e;
        }
        for j in 0..c {
            od[i * c + j] = od[i * c + j] / sum;
        }
    }
    Ok(out)
}

pub fn softmax_rows_backward<E: Element>(grad_out: &Tensor<E>, y: &Tensor<E>) -> Tensor<E> {
    let (r, c) = (y.shape()[0], y.shape()[1]);
    let mut dx = Tensor::zeros(&[r, c]);
    let gd = grad_out.data();
    let yd = y.data();
    let dd = dx.data_mut();
    for i in 0..r {
        let base = i * c;
        let mut dot = E::zero();
        for j in 0..c {
            dot = dot + gd[base + j] * yd[base + j];
        }
        for j in 0..c {
            dd[base + j] = yd[base + j] * (gd[base + j] - dot);
        }
    }
    dx
}

/// Normalizes each row to unit L2 norm; rows with norm below `eps` map to zero.
pub fn l2_normalize_rows<E: Element>(m: &Tensor<E>, eps: f64) -> Result<Tensor<E>, DiffError> {
    if eps <= 0.0 {
        return Err(DiffError::invalid("l2_normalize_rows", "eps must be positive"));
    }
    let (r, c) = m.dims2("l2_normalize_rows")?;
    let eps = E::from_f64(eps);
    let mut out = Tensor::zeros(&[r, c]);
    let md = m.data();
    let od = out.data_mut();
    for i in 0..r {
        let base = i * c;
        let mut sq = E::zero();
        for j in 0..c {
            sq = sq + md[base + j] * md[base + j];
        }
        let norm = sq.sqrt();
        if norm >= eps {
            for j in 0..c {
                od[base + j] = md[base + j] / norm;
            }
        }
    }
    Ok(out)
}

pub fn l2_normalize_rows_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    eps: f64,
) -> Tensor<E> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let eps = E::from_f64(eps);
    let mut dx = Tensor::zeros(&[r, c]);
    let gd = grad_out.data();
    let xd = x.data();
    let dd = dx.data_mut();
    for i in 0..r {
        let base = i * c;
        let mut sq = E::zero();
        for j in 0..c {
            sq = sq + xd[base + j] * xd[base + j];
        }
        let norm = sq.sqrt();
        if norm < eps {
            continue; // guarded rows output zero; subgradient zero
        }
        let mut dot = E::zero();
        for j in 0..c {
            dot = dot + gd[base + j] * xd[base + j];
        }
        let inv = E::one() / norm;
        let coef = dot * inv * inv * inv;
        for j in 0..c {
            dd[base + j] = gd[base + j] * inv - xd[base + j] * coef;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// residual aggregation

/// `V(j,l) = sum_n beta(n,l) * (sites(n,j) - centers(l,j))`.
///
/// `sites` is `(N, D)`, `beta` `(N, L)`, `centers` `(L, D)`; output is `(D, L)`.
pub fn aggregate_residuals<E: Element>(
    sites: &Tensor<E>,
    beta: &Tensor<E>,
    centers: &Tensor<E>,
) -> Result<Tensor<E>, DiffError> {
    let (n, d) = sites.dims2("aggregate_residuals")?;
    let (nb, l) = beta.dims2("aggregate_residuals")?;
    let (lc, dc) = centers.dims2("aggregate_residuals")?;
    if nb != n || lc != l || dc != d {
        return Err(DiffError::dim(
            "aggregate_residuals",
            format!("sites {n}x{d}, beta {nb}x{l}, centers {lc}x{dc}"),
        ));
    }
    // accumulate transposed (L, D) for contiguous inner loops
    let mut vt = Tensor::zeros(&[l, d]);
    let sd = sites.data();
    let bd = beta.data();
    let cd = centers.data();
    let vd = vt.data_mut();
    for ni in 0..n {
        let srow = ni * d;
        for li in 0..l {
            let b = bd[ni * l + li];
            if b == E::zero() {
                continue;
            }
            let vrow = li * d;
            let crow = li * d;
            for j in 0..d {
                vd[vrow + j] = vd[vrow + j] + b * (sd[srow + j] - cd[crow + j]);
            }
        }
    }
    transpose(&vt)
}

/// Gradients of `aggregate_residuals` for all three inputs.
pub fn aggregate_residuals_backward<E: Element>(
    grad_v: &Tensor<E>,
    sites: &Tensor<E>,
    beta: &Tensor<E>,
    centers: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, d) = (sites.shape()[0], sites.shape()[1]);
    let l = beta.shape()[1];
    let gvt = transpose(grad_v).expect("grad_v rank"); // (L, D)
    let gvd = gvt.data();
    let sd = sites.data();
    let bd = beta.data();
    let cd = centers.data();

    let mut ds = Tensor::zeros(&[n, d]);
    let dsd = ds.data_mut();
    for ni in 0..n {
        for li in 0..l {
            let b = bd[ni * l + li];
            if b == E::zero() {
                continue;
            }
            let grow = li * d;
            let orow = ni * d;
            for j in 0..d {
                dsd[orow + j] = dsd[orow + j] + b * gvd[grow + j];
            }
        }
    }

    let mut dbeta = Tensor::zeros(&[n, l]);
    let dbd = dbeta.data_mut();
    for ni in 0..n {
        let srow = ni * d;
        for li in 0..l {
            let grow = li * d;
            let crow = li * d;
            let mut acc = E::zero();
            for j in 0..d {
                acc = acc + gvd[grow + j] * (sd[srow + j] - cd[crow + j]);
            }
            dbd[ni * l + li] = acc;
        }
    }

    // column mass per cluster
    let mut mass = vec![E::zero(); l];
    for ni in 0..n {
        for li in 0..l {
            mass[li] = mass[li] + bd[ni * l + li];
        }
    }
    let mut dcenters = Tensor::zeros(&[l, d]);
    let dcd = dcenters.data_mut();
    for li in 0..l {
        let grow = li * d;
        for j in 0..d {
            dcd[grow + j] = -(gvd[grow + j] * mass[li]);
        }
    }

    (ds, dbeta, dcenters)
}

// ---------------------------------------------------------------------------
// loss kernels
//
// Targets are treated as constants: the backward functions return the
// gradient with respect to the prediction only.

/// Mean squared error over all elements.
pub fn mse<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E, DiffError> {
    if pred.shape() != target.shape() {
        return Err(DiffError::dim(
            "intensity_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let k = E::from_f64(pred.len() as f64);
    let mut acc = E::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc = acc + d * d;
    }
    Ok(acc / k)
}

pub fn mse_backward<E: Element>(grad: E, pred: &Tensor<E>, target: &Tensor<E>) -> Tensor<E> {
    let k = E::from_f64(pred.len() as f64);
    let two = E::from_f64(2.0);
    let mut out = Tensor::zeros(pred.shape());
    for ((o, &p), &t) in out.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        *o = grad * two * (p - t) / k;
    }
    out
}

fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

/// L1 distance between the absolute forward-difference images of prediction
/// and target, along both spatial axes, divided by the pixel count.
pub fn gradient_diff<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E, DiffError> {
    if pred.shape() != target.shape() {
        return Err(DiffError::dim(
            "gradient_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let (c, h, w) = pred.dims3("gradient_loss")?;
    if h < 2 || w < 2 {
        return Err(DiffError::dim("gradient_loss", format!("spatial dims {h}x{w} below 2")));
    }
    let k = E::from_f64((c * h * w) as f64);
    let pd = pred.data();
    let td = target.data();
    let mut acc = E::zero();
    for ci in 0..c {
        let base = ci * h * w;
        for y in 1..h {
            for x in 0..w {
                let gi = (td[base + y * w + x] - td[base + (y - 1) * w + x]).abs();
                let gp = (pd[base + y * w + x] - pd[base + (y - 1) * w + x]).abs();
                acc = acc + (gi - gp).abs();
            }
        }
        for y in 0..h {
            for x in 1..w {
                let gi = (td[base + y * w + x] - td[base + y * w + x - 1]).abs();
                let gp = (pd[base + y * w + x] - pd[base + y * w + x - 1]).abs();
                acc = acc + (gi - gp).abs();
            }
        }
    }
    Ok(acc / k)
}

pub fn gradient_diff_backward<E: Element>(
    grad: E,
    pred: &Tensor<E>,
    target: &Tensor<E>,
) -> Tensor<E> {
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let k = E::from_f64((c * h * w) as f64);
    let g = grad / k;
    let pd = pred.data();
    let td = target.data();
    let mut out = Tensor::zeros(pred.shape());
    let od = out.data_mut();
    for ci in 0..c {
        let base = ci * h * w;
        for y in 1..h {
            for x in 0..w {
                let dp = pd[base + y * w + x] - pd[base + (y - 1) * w + x];
                let gi = (td[base + y * w + x] - td[base + (y - 1) * w + x]).abs();
                // d|gi - |dp||/d dp = -sign(gi - |dp|) * sign(dp)
                let s = -(sign(gi - dp.abs()) * sign(dp)) * g;
                od[base + y * w + x] = od[base + y * w + x] + s;
                od[base + (y - 1) * w + x] = od[base + (y - 1) * w + x] - s;
            }
        }
        for y in 0..h {
            for x in 1..w {
                let dp = pd[base + y * w + x] - pd[base + y * w + x - 1];
                let gi = (td[base + y * w + x] - td[base + y * w + x - 1]).abs();
                let s = -(sign(gi - dp.abs()) * sign(dp)) * g;
                od[base + y * w + x] = od[base + y * w + x] + s;
                od[base + y * w + x - 1] = od[base + y * w + x - 1] - s;
            }
        }
    }
    out
}

fn row_dist<E: Element>(a: &[E], b: &[E]) -> E {
    let mut sq = E::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sq = sq + d * d;
    }
    sq.sqrt()
}

/// `sum_n ||sites[n] - protos[assign[n]]||_2`.
pub fn compaction<E: Element>(
    sites: &Tensor<E>,
    protos: &Tensor<E>,
    assign: &[usize],
) -> Result<E, DiffError> {
    let (n, d) = sites.dims2("compaction_loss")?;
    let (_, dp) = protos.dims2("compaction_loss")?;
    if dp != d || assign.len() != n {
        return Err(DiffError::dim(
            "compaction_loss",
            format!("sites {n}x{d}, protos cols {dp}, assignments {}", assign.len()),
        ));
    }
    let sd = sites.data();
    let pd = protos.data();
    let mut acc = E::zero();
    for ni in 0..n {
        let a = assign[ni];
        acc = acc + row_dist(&sd[ni * d..(ni + 1) * d], &pd[a * d..(a + 1) * d]);
    }
    Ok(acc)
}

pub fn compaction_backward<E: Element>(
    grad: E,
    sites: &Tensor<E>,
    protos: &Tensor<E>,
    assign: &[usize],
) -> (Tensor<E>, Tensor<E>) {
    let (n, d) = (sites.shape()[0], sites.shape()[1]);
    let sd = sites.data();
    let pd = protos.data();
    let mut ds = Tensor::zeros(sites.shape());
    let mut dp = Tensor::zeros(protos.shape());
    {
        let dsd = ds.data_mut();
        let mut dpd = vec![E::zero(); protos.len()];
        for ni in 0..n {
            let a = assign[ni];
            let srow = &sd[ni * d..(ni + 1) * d];
            let prow = &pd[a * d..(a + 1) * d];
            let dist = row_dist(srow, prow);
            if dist == E::zero() {
                continue;
            }
            let coef = grad / dist;
            for j in 0..d {
                let r = (srow[j] - prow[j]) * coef;
                dsd[ni * d + j] = dsd[ni * d + j] + r;
                dpd[a * d + j] = dpd[a * d + j] - r;
            }
        }
        dp.data_mut().copy_from_slice(&dpd);
    }
    (ds, dp)
}

/// Triplet-style hinge `sum_n [d(site, P_a) - d(site, P_b) + margin]_+`.
pub fn separation<E: Element>(
    sites: &Tensor<E>,
    protos: &Tensor<E>,
    nearest: &[usize],
    second: &[usize],
    margin: f64,
) -> Result<E, DiffError> {
    let (n, d) = sites.dims2("separation_loss")?;
    let (_, dp) = protos.dims2("separation_loss")?;
    if dp != d || nearest.len() != n || second.len() != n {
        return Err(DiffError::dim("separation_loss", "index lists must match site count"));
    }
    let m = E::from_f64(margin);
    let sd = sites.data();
    let pd = protos.data();
    let mut acc = E::zero();
    for ni in 0..n {
        let srow = &sd[ni * d..(ni + 1) * d];
        let da = row_dist(srow, &pd[nearest[ni] * d..(nearest[ni] + 1) * d]);
        let db = row_dist(srow, &pd[second[ni] * d..(second[ni] + 1) * d]);
        let h = da - db + m;
        if h > E::zero() {
            acc = acc + h;
        }
    }
    Ok(acc)
}

pub fn separation_backward<E: Element>(
    grad: E,
    sites: &Tensor<E>,
    protos: &Tensor<E>,
    nearest: &[usize],
    second: &[usize],
    margin: f64,
) -> (Tensor<E>, Tensor<E>) {
    let (n, d) = (sites.shape()[0], sites.shape()[1]);
    let m = E::from_f64(margin);
    let sd = sites.data();
    let pd = protos.data();
    let mut ds = Tensor::zeros(sites.shape());
    let mut dp = Tensor::zeros(protos.shape());
    {
        let dsd = ds.data_mut();
        let mut dpd = vec![E::zero(); protos.len()];
        for ni in 0..n {
            let a = nearest[ni];
            let b = second[ni];
            let srow = &sd[ni * d..(ni + 1) * d];
            let arow = &pd[a * d..(a + 1) * d];
            let brow = &pd[b * d..(b + 1) * d];
            let da = row_dist(srow, arow);
            let db = row_dist(srow, brow);
            if da - db + m <= E::zero() {
                continue;
            }
            if da > E::zero() {
                let coef = grad / da;
                for j in 0..d {
                    let r = (srow[j] - arow[j]) * coef;
                    dsd[ni * d + j] = dsd[ni * d + j] + r;
                    dpd[a * d + j] = dpd[a * d + j] - r;
                }
            }
            if db > E::zero() {
                let coef = grad / db;
                for j in 0..d {
                    let r = (srow[j] - brow[j]) * coef;
                    dsd[ni * d + j] = dsd[ni * d + j] - r;
                    dpd[b * d + j] = dpd[b * d + j] + r;
                }
            }
        }
        dp.data_mut().copy_from_slice(&dpd);
    }
    (ds, dp)
}

/// Per-row argmax and runner-up indices of a matrix; ties break to the
/// lower index.
pub fn top_two_indices<E: Element>(w: &Tensor<E>) -> Result<(Vec<usize>, Vec<usize>), DiffError> {
    let (r, c) = w.dims2("top_two")?;
    if c < 2 {
        return Err(DiffError::dim("top_two", format!("need at least 2 columns, got {c}")));
    }
    let wd = w.data();
    let mut first = Vec::with_capacity(r);
    let mut second = Vec::with_capacity(r);
    for i in 0..r {
        let row = &wd[i * c..(i + 1) * c];
        let mut a = 0usize;
        for j in 1..c {
            if row[j] > row[a] {
                a = j;
            }
        }
        let mut b = if a == 0 { 1 } else { 0 };
        for j in 0..c {
            if j != a && row[j] > row[b] {
                b = j;
            }
        }
        first.push(a);
        second.push(b);
    }
    Ok((first, second))
}

pub fn argmax_rows<E: Element>(w: &Tensor<E>) -> Result<Vec<usize>, DiffError> {
    let (r, c) = w.dims2("argmax_rows")?;
    if c == 0 {
        return Err(DiffError::dim("argmax_rows", "zero columns"));
    }
    let wd = w.data();
    Ok((0..r)
        .map(|i| {
            let row = &wd[i * c..(i + 1) * c];
            let mut a = 0usize;
            for j in 1..c {
                if row[j] > row[a] {
                    a = j;
                }
            }
            a
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Naive six-loop cross-correlation, kept independent of the production
    /// kernel on purpose.
    fn conv2d_reference(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let at = |ci: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[ci * h * w + y as usize * w + xx as usize]
            }
        };
        Tensor::from_fn(&[c_out, oh, ow], |idx| {
            let o = idx / (oh * ow);
            let y = (idx / ow) % oh;
            let xx = idx % ow;
            let mut acc = 0.0;
            for i in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = (y * stride + ky) as isize - pad as isize;
                        let sx = (xx * stride + kx) as isize - pad as isize;
                        acc += at(i, sy, sx) * k.data()[((o * c_in + i) * kh + ky) * kw + kx];
                    }
                }
            }
            acc
        })
    }

    fn inner<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x.to_f64() * y.to_f64())
            .sum()
    }

    #[test]
    fn conv_scalar_scaling() {
        let x = Tensor::<f64>::filled(&[1, 3, 3], 1.0);
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(x.max_abs_diff(&y) == 0.0);
    }

    #[test]
    fn conv_matches_six_loop_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 8, 8], &mut rng);
        let k3 = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let k4 = rand_tensor(&[4, 2, 4, 4], &mut rng);
        for (k, stride, pad) in [(&k3, 1, 0), (&k3, 1, 1), (&k4, 2, 1), (&k4, 2, 0)] {
            let got = conv2d(&x, k, stride, pad).unwrap();
            let want = conv2d_reference(&x, k, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-6, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> with a shared kernel
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 2), (2, 0, 2)] {
            let x = rand_tensor(&[2, 8, 8], &mut rng);
            let kern = rand_tensor(&[3, 2, k, k], &mut rng);
            let cx = conv2d(&x, &kern, stride, pad).unwrap();
            let y = rand_tensor(cx.shape(), &mut rng);
            let dy = deconv2d(&y, &kern, stride, pad).unwrap();
            assert_eq!(dy.shape(), x.shape());
            let lhs = inner(&cx, &y);
            let rhs = inner(&x, &dy);
            assert!((lhs - rhs).abs() < 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn deconv_single_pixel_upsample() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![2.5]).unwrap();
        let k = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn deconv_zero_input_zero_output() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let k = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let y = deconv2d(&x, &k, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let m = Tensor::<f64>::zeros(&[1, 3]);
        let y = softmax_rows(&m).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = Tensor::<f64>::new(&[1, 4], vec![0.3, -0.2, 1.1, 0.0]).unwrap();
        let b = a.map(|v| v + 7.5);
        let ya = softmax_rows(&a).unwrap();
        let yb = softmax_rows(&b).unwrap();
        assert!(ya.max_abs_diff(&yb) < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let m = Tensor::<f64>::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&m).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let m = rand_tensor(&[6, 9], &mut rng);
        let y = softmax_rows(&m).unwrap();
        for i in 0..6 {
            let s: f64 = y.data()[i * 9..(i + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_345_and_zero_row_and_idempotence() {
        let m = Tensor::<f64>::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = l2_normalize_rows(&m, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 0.8).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
        let yy = l2_normalize_rows(&y, 1e-12).unwrap();
        assert!(y.max_abs_diff(&yy) < 1e-6);
    }

    #[test]
    fn aggregate_matches_triple_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (n, l, d) = (2usize, 2usize, 2usize);
        let sites = rand_tensor(&[n, d], &mut rng);
        let beta = softmax_rows(&rand_tensor(&[n, l], &mut rng)).unwrap();
        let centers = rand_tensor(&[l, d], &mut rng);
        let got = aggregate_residuals(&sites, &beta, &centers).unwrap();
        let mut want = Tensor::<f64>::zeros(&[d, l]);
        for j in 0..d {
            for li in 0..l {
                let mut acc = 0.0;
                for ni in 0..n {
                    acc += beta.data()[ni * l + li]
                        * (sites.data()[ni * d + j] - centers.data()[li * d + j]);
                }
                want.data_mut()[j * l + li] = acc;
            }
        }
        assert!(got.max_abs_diff(&want) == 0.0);
    }

    #[test]
    fn aggregate_zero_residual_column() {
        // all sites equal center 0, one-hot assignment on cluster 0
        let d = 3;
        let c0 = vec![0.4f64, -0.2, 0.9];
        let sites = Tensor::new(&[2, d], [c0.clone(), c0.clone()].concat()).unwrap();
        let beta = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let centers = Tensor::new(&[2, d], [c0.clone(), vec![5.0, 5.0, 5.0]].concat()).unwrap();
        let v = aggregate_residuals(&sites, &beta, &centers).unwrap();
        for j in 0..d {
            assert_eq!(v.data()[j * 2], 0.0); // column 0
        }
    }

    #[test]
    fn aggregate_linear_in_beta() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sites = rand_tensor(&[4, 3], &mut rng);
        let beta = rand_tensor(&[4, 2], &mut rng);
        let centers = rand_tensor(&[2, 3], &mut rng);
        let v1 = aggregate_residuals(&sites, &beta, &centers).unwrap();
        let v2 = aggregate_residuals(&sites, &beta.map(|b| 2.0 * b), &centers).unwrap();
        assert!(v2.max_abs_diff(&v1.map(|v| 2.0 * v)) < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&b, &a).unwrap() - 0.01f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_diff_constant_images_zero() {
        let a = Tensor::<f64>::filled(&[1, 4, 4], 0.7);
        let b = Tensor::<f64>::filled(&[1, 4, 4], -0.3);
        assert_eq!(gradient_diff(&b, &a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_diff_step_edge_closed_form() {
        // target has one vertical step of height 1 across a 4x4 image;
        // prediction is flat, so the loss is (edge length) / K.
        let h = 4usize;
        let target = Tensor::from_fn(&[1, h, h], |i| if (i / h) >= 2 { 1.0 } else { 0.0 });
        let pred = Tensor::<f64>::zeros(&[1, h, h]);
        let got = gradient_diff(&pred, &target).unwrap();
        assert!((got - h as f64 / (h * h) as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_diff_matches_double_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let p = rand_tensor(&[1, 5, 5], &mut rng);
        let t = rand_tensor(&[1, 5, 5], &mut rng);
        let (h, w) = (5usize, 5usize);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                if y >= 1 {
                    let gi = (t.data()[y * w + x] - t.data()[(y - 1) * w + x]).abs();
                    let gp = (p.data()[y * w + x] - p.data()[(y - 1) * w + x]).abs();
                    acc += (gi - gp).abs();
                }
                if x >= 1 {
                    let gi = (t.data()[y * w + x] - t.data()[y * w + x - 1]).abs();
                    let gp = (p.data()[y * w + x] - p.data()[y * w + x - 1]).abs();
                    acc += (gi - gp).abs();
                }
            }
        }
        let want = acc / (h * w) as f64;
        assert!((gradient_diff(&p, &t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn compaction_zero_when_sites_sit_on_prototypes() {
        let protos = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sites = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let loss: f64 = compaction(&sites, &protos, &[1, 0]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn separation_duplicate_prototypes_give_margin() {
        let protos = Tensor::<f64>::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let sites = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0]).unwrap();
        let loss: f64 = separation(&sites, &protos, &[0, 0, 0], &[1, 1, 1], 1.0).unwrap();
        assert!((loss - 3.0).abs() < 1e-12); // gamma per site
    }

    #[test]
    fn separation_hinge_satisfied_is_zero() {
        let protos = Tensor::<f64>::new(&[2, 1], vec![0.0, 10.0]).unwrap();
        let sites = Tensor::new(&[2, 1], vec![0.1, -0.1]).unwrap();
        // d(site, P_0) ~ 0.1, d(site, P_1) ~ 10 => gap >> margin
        let loss: f64 = separation(&sites, &protos, &[0, 0], &[1, 1], 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn separation_decreases_as_negative_moves_away() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let sites = rand_tensor(&[4, 3], &mut rng);
        let base = rand_tensor(&[2, 3], &mut rng);
        let nearest = vec![0; 4];
        let second = vec![1; 4];
        let l0: f64 = separation(&sites, &base, &nearest, &second, 1.0).unwrap();
        // push prototype 1 radially away from every site
        let mut far = base.clone();
        for j in 0..3 {
            far.data_mut()[3 + j] += 10.0;
        }
        let l1 = separation(&sites, &far, &nearest, &second, 1.0).unwrap();
        assert!(l1 < l0, "{l1} vs {l0}");
    }

    #[test]
    fn top_two_breaks_ties_to_lower_index() {
        let w = Tensor::<f64>::new(&[1, 3], vec![0.4, 0.4, 0.2]).unwrap();
        let (a, b) = top_two_indices(&w).unwrap();
        assert_eq!(a, vec![0]);
        assert_eq!(b, vec![1]);
    }

    #[test]
    fn argmax_matches_scan() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let w = rand_tensor(&[7, 5], &mut rng);
        let idx = argmax_rows(&w).unwrap();
        for i in 0..7 {
            let row = &w.data()[i * 5..(i + 1) * 5];
            let best = (0..5).fold(0usize, |b, j| if row[j] > row[b] { j } else { b });
            assert_eq!(idx[i], best);
        }
    }
}
