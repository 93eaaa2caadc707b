//! Pure tensor kernels: forward math and hand-derived adjoints.
//!
//! The autodiff graph and the eval-mode forward path both call into these,
//! so there is a single implementation of every kernel.

use crate::error::{LeError, Result};
use crate::tensor::{idx4, Tensor};

#[inline]
fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Valid output-column range [lo, hi) such that `ow*stride + k_off - pad`
/// stays inside [0, in_extent).
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        ceil_div(pad - k_off, stride)
    } else {
        0
    };
    let hi = if in_extent + pad > k_off {
        ((in_extent - 1 + pad - k_off) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_out_size(in_extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = in_extent + 2 * pad;
    if k > span || (span - k) % stride != 0 {
        return Err(LeError::InvalidArgument(format!(
            "conv2d: extent {in_extent} with kernel {k}, stride {stride}, pad {pad} \
             does not produce an integral output size"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k] plus bias [Cout].
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (ish, ksh) = (input.shape(), kernel.shape());
    if ish.len() != 4 || ksh.len() != 4 {
        return Err(LeError::InvalidArgument(
            "conv2d expects 4-d input and kernel".into(),
        ));
    }
    let (b_n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (cout, kcin, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
    if kcin != cin {
        return Err(LeError::ShapeMismatch {
            context: "conv2d kernel input channels".into(),
            expected: vec![cout, cin, kh, kw],
            got: ksh.to_vec(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(LeError::InvalidArgument(format!(
            "conv2d kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(LeError::ShapeMismatch {
            context: "conv2d bias".into(),
            expected: vec![cout],
            got: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(LeError::InvalidArgument("conv2d stride must be positive".into()));
    }
    let oh = conv2d_out_size(h, kh, stride, pad)?;
    let ow = conv2d_out_size(w, kw, stride, pad)?;

    let x = input.data();
    let k = kernel.data();
    let bv = bias.data();
    let mut out = vec![0.0f64; b_n * cout * oh * ow];

    for b in 0..b_n {
        for co in 0..cout {
            let out_base = idx4(cout, oh, ow, b, co, 0, 0);
            out[out_base..out_base + oh * ow].fill(bv[co]);
            for ci in 0..cin {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wv = k[idx4(cin, kh, kw, co, ci, dkh, dkw)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_range(ow, w, stride, dkw, pad);
                        for or in 0..oh {
                            let ir = (or * stride + dkh) as isize - pad as isize;
                            if ir < 0 || ir as usize >= h {
                                continue;
                            }
                            let in_row = idx4(cin, h, w, b, ci, ir as usize, 0);
                            let out_row = out_base + or * ow;
                            for oc in lo..hi {
                                let icol = oc * stride + dkw - pad;
                                out[out_row + oc] += wv * x[in_row + icol];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, cout, oh, ow], out)
}

pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let gsh = grad_out.shape();
    let ksh = kernel.shape();
    let (b_n, cout, oh, ow) = (gsh[0], gsh[1], gsh[2], gsh[3]);
    let (cin, kh, kw) = (ksh[1], ksh[2], ksh[3]);
    let dy = grad_out.data();
    let k = kernel.data();
    let mut dx = vec![0.0f64; b_n * cin * in_h * in_w];

    for b in 0..b_n {
        for co in 0..cout {
            for ci in 0..cin {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wv = k[idx4(cin, kh, kw, co, ci, dkh, dkw)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_range(ow, in_w, stride, dkw, pad);
                        for or in 0..oh {
                            let ir = (or * stride + dkh) as isize - pad as isize;
                            if ir < 0 || ir as usize >= in_h {
                                continue;
                            }
                            let dx_row = idx4(cin, in_h, in_w, b, ci, ir as usize, 0);
                            let dy_row = idx4(cout, oh, ow, b, co, or, 0);
                            for oc in lo..hi {
                                let icol = oc * stride + dkw - pad;
                                dx[dx_row + icol] += wv * dy[dy_row + oc];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, cin, in_h, in_w], dx).expect("conv2d_grad_input shape")
}

pub fn conv2d_grad_kernel(grad_out: &Tensor, input: &Tensor, kernel_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let gsh = grad_out.shape();
    let ish = input.shape();
    let (b_n, cout, oh, ow) = (gsh[0], gsh[1], gsh[2], gsh[3]);
    let (cin, h, w) = (ish[1], ish[2], ish[3]);
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    let dy = grad_out.data();
    let x = input.data();
    let mut dk = vec![0.0f64; cout * cin * kh * kw];

    for b in 0..b_n {
        for co in 0..cout {
            for ci in 0..cin {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let (lo, hi) = valid_range(ow, w, stride, dkw, pad);
                        let mut acc = 0.0;
                        for or in 0..oh {
                            let ir = (or * stride + dkh) as isize - pad as isize;
                            if ir < 0 || ir as usize >= h {
                                continue;
                            }
                            let in_row = idx4(cin, h, w, b, ci, ir as usize, 0);
                            let dy_row = idx4(cout, oh, ow, b, co, or, 0);
                            for oc in lo..hi {
                                let icol = oc * stride + dkw - pad;
                                acc += x[in_row + icol] * dy[dy_row + oc];
                            }
                        }
                        dk[idx4(cin, kh, kw, co, ci, dkh, dkw)] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), dk).expect("conv2d_grad_kernel shape")
}

pub fn conv2d_grad_bias(grad_out: &Tensor) -> Tensor {
    let gsh = grad_out.shape();
    let (b_n, cout, oh, ow) = (gsh[0], gsh[1], gsh[2], gsh[3]);
    let dy = grad_out.data();
    let mut db = vec![0.0f64; cout];
    for b in 0..b_n {
        for co in 0..cout {
            let base = idx4(cout, oh, ow, b, co, 0, 0);
            db[co] += dy[base..base + oh * ow].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![cout], db).expect("conv2d_grad_bias shape")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_grad(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward from the forward output y: dx = dy * y * (1 - y).
pub fn sigmoid_grad(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (1.0 - v);
    }
    dx
}

/// Softmax over the channel axis of [B,K,H,W].
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let sh = x.shape();
    let (b_n, k_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let xd = x.data();
    let mut out = vec![0.0f64; xd.len()];
    let plane = h * w;
    for b in 0..b_n {
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k_n {
                m = m.max(xd[(b * k_n + c) * plane + p]);
            }
            let mut z = 0.0;
            for c in 0..k_n {
                let e = (xd[(b * k_n + c) * plane + p] - m).exp();
                out[(b * k_n + c) * plane + p] = e;
                z += e;
            }
            for c in 0..k_n {
                out[(b * k_n + c) * plane + p] /= z;
            }
        }
    }
    Tensor::new(sh.to_vec(), out).expect("softmax shape")
}

pub fn softmax_channels_grad(y: &Tensor, dy: &Tensor) -> Tensor {
    let sh = y.shape();
    let (b_n, k_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f64; yd.len()];
    let plane = h * w;
    for b in 0..b_n {
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..k_n {
                let i = (b * k_n + c) * plane + p;
                dot += dyd[i] * yd[i];
            }
            for c in 0..k_n {
                let i = (b * k_n + c) * plane + p;
                dx[i] = yd[i] * (dyd[i] - dot);
            }
        }
    }
    Tensor::new(sh.to_vec(), dx).expect("softmax grad shape")
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0f64; b_n * c_n * oh * ow];
    for bc in 0..b_n * c_n {
        let in_base = bc * h * w;
        let out_base = bc * oh * ow;
        for r in 0..oh {
            let in_row = in_base + (r / factor) * w;
            let out_row = out_base + r * ow;
            for col in 0..ow {
                out[out_row + col] = xd[in_row + col / factor];
            }
        }
    }
    Tensor::new(vec![b_n, c_n, oh, ow], out).expect("upsample shape")
}

/// Adjoint of upsample_nearest: sum over each factor x factor block.
pub fn upsample_nearest_grad(dy: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let sh = dy.shape();
    let (b_n, c_n, oh, ow) = (sh[0], sh[1], sh[2], sh[3]);
    let (h, w) = (oh / factor, ow / factor);
    let dyd = dy.data();
    let mut dx = vec![0.0f64; b_n * c_n * h * w];
    for bc in 0..b_n * c_n {
        let out_base = bc * oh * ow;
        let in_base = bc * h * w;
        for r in 0..oh {
            let dx_row = in_base + (r / factor) * w;
            let dy_row = out_base + r * ow;
            for col in 0..ow {
                dx[dx_row + col / factor] += dyd[dy_row + col];
            }
        }
    }
    Tensor::new(vec![b_n, c_n, h, w], dx).expect("upsample grad shape")
}

/// Nearest-neighbor downsampling: keeps the top-left sample of each block.
pub fn downsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(LeError::InvalidArgument(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let xd = x.data();
    let mut out = vec![0.0f64; b_n * c_n * oh * ow];
    for bc in 0..b_n * c_n {
        for r in 0..oh {
            for col in 0..ow {
                out[bc * oh * ow + r * ow + col] = xd[bc * h * w + r * factor * w + col * factor];
            }
        }
    }
    Tensor::new(vec![b_n, c_n, oh, ow], out)
}

pub fn downsample_nearest_grad(dy: &Tensor, factor: usize, in_h: usize, in_w: usize) -> Tensor {
    let sh = dy.shape();
    let (b_n, c_n, oh, ow) = (sh[0], sh[1], sh[2], sh[3]);
    let dyd = dy.data();
    let mut dx = vec![0.0f64; b_n * c_n * in_h * in_w];
    for bc in 0..b_n * c_n {
        for r in 0..oh {
            for col in 0..ow {
                dx[bc * in_h * in_w + r * factor * in_w + col * factor] += dyd[bc * oh * ow + r * ow + col];
            }
        }
    }
    Tensor::new(vec![b_n, c_n, in_h, in_w], dx).expect("downsample grad shape")
}

/// Per-channel batch statistics over (B,H,W). Returns (y, mean, biased var).
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let m = (b_n * h * w) as f64;
    let xd = x.data();
    let plane = h * w;
    let mut mean = vec![0.0f64; c_n];
    let mut var = vec![0.0f64; c_n];
    for c in 0..c_n {
        let mut s = 0.0;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            s += xd[base..base + plane].iter().sum::<f64>();
        }
        mean[c] = s / m;
        let mut v = 0.0;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for &xv in &xd[base..base + plane] {
                let d = xv - mean[c];
                v += d * d;
            }
        }
        var[c] = v / m;
    }
    let mut out = vec![0.0f64; xd.len()];
    for c in 0..c_n {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let (g, be) = (gamma.data()[c], beta.data()[c]);
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for i in 0..plane {
                out[base + i] = g * (xd[base + i] - mean[c]) * inv + be;
            }
        }
    }
    (
        Tensor::new(sh.to_vec(), out).expect("bn shape"),
        Tensor::new(vec![c_n], mean).expect("bn mean"),
        Tensor::new(vec![c_n], var).expect("bn var"),
    )
}

/// Backward of train-mode batchnorm. Returns (dx, dgamma, dbeta).
pub fn batchnorm_train_grad(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let m = (b_n * h * w) as f64;
    let plane = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f64; xd.len()];
    let mut dgamma = vec![0.0f64; c_n];
    let mut dbeta = vec![0.0f64; c_n];
    for c in 0..c_n {
        let mu = mean.data()[c];
        let inv = 1.0 / (var.data()[c] + eps).sqrt();
        let g = gamma.data()[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for i in 0..plane {
                let xhat = (xd[base + i] - mu) * inv;
                sum_dy += dyd[base + i];
                sum_dy_xhat += dyd[base + i] * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = g * inv / m;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for i in 0..plane {
                let xhat = (xd[base + i] - mu) * inv;
                dx[base + i] = k * (m * dyd[base + i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (
        Tensor::new(sh.to_vec(), dx).expect("bn dx"),
        Tensor::new(vec![c_n], dgamma).expect("bn dgamma"),
        Tensor::new(vec![c_n], dbeta).expect("bn dbeta"),
    )
}

/// Eval-mode batchnorm using running statistics.
pub fn batchnorm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, rmean: &Tensor, rvar: &Tensor, eps: f64) -> Tensor {
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0f64; xd.len()];
    for c in 0..c_n {
        let inv = 1.0 / (rvar.data()[c] + eps).sqrt();
        let scale = gamma.data()[c] * inv;
        let shift = beta.data()[c] - rmean.data()[c] * scale;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for i in 0..plane {
                out[base + i] = xd[base + i] * scale + shift;
            }
        }
    }
    Tensor::new(sh.to_vec(), out).expect("bn eval shape")
}

/// Backward of eval-mode batchnorm (stats are constants).
pub fn batchnorm_eval_grad(
    x: &Tensor,
    gamma: &Tensor,
    rmean: &Tensor,
    rvar: &Tensor,
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let sh = x.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let plane = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f64; xd.len()];
    let mut dgamma = vec![0.0f64; c_n];
    let mut dbeta = vec![0.0f64; c_n];
    for c in 0..c_n {
        let inv = 1.0 / (rvar.data()[c] + eps).sqrt();
        let g = gamma.data()[c];
        let mu = rmean.data()[c];
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for i in 0..plane {
                dx[base + i] = dyd[base + i] * g * inv;
                dgamma[c] += dyd[base + i] * (xd[base + i] - mu) * inv;
                dbeta[c] += dyd[base + i];
            }
        }
    }
    (
        Tensor::new(sh.to_vec(), dx).expect("bn eval dx"),
        Tensor::new(vec![c_n], dgamma).expect("bn eval dgamma"),
        Tensor::new(vec![c_n], dbeta).expect("bn eval dbeta"),
    )
}

/// Channel-axis concatenation of two [B,C,H,W] tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(LeError::ShapeMismatch {
            context: "concat_channels".into(),
            expected: sa.to_vec(),
            got: sb.to_vec(),
        });
    }
    let (b_n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let plane = h * w;
    let mut out = vec![0.0f64; b_n * (ca + cb) * plane];
    for bi in 0..b_n {
        let dst = bi * (ca + cb) * plane;
        let src_a = bi * ca * plane;
        let src_b = bi * cb * plane;
        out[dst..dst + ca * plane].copy_from_slice(&a.data()[src_a..src_a + ca * plane]);
        out[dst + ca * plane..dst + (ca + cb) * plane].copy_from_slice(&b.data()[src_b..src_b + cb * plane]);
    }
    Tensor::new(vec![b_n, ca + cb, h, w], out)
}

/// Split the gradient of a channel concatenation back into its two parts.
pub fn concat_channels_grad(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let sh = dy.shape();
    let (b_n, c_n, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let cb = c_n - ca;
    let plane = h * w;
    let mut da = vec![0.0f64; b_n * ca * plane];
    let mut db = vec![0.0f64; b_n * cb * plane];
    for bi in 0..b_n {
        let src = bi * c_n * plane;
        da[bi * ca * plane..(bi + 1) * ca * plane].copy_from_slice(&dy.data()[src..src + ca * plane]);
        db[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&dy.data()[src + ca * plane..src + c_n * plane]);
    }
    (
        Tensor::new(vec![b_n, ca, h, w], da).expect("concat grad a"),
        Tensor::new(vec![b_n, cb, h, w], db).expect("concat grad b"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(b: usize, c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[b, c, h, w], f)
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_dirac_is_identity() {
        let x = t4(1, 1, 5, 5, |i| (i as f64) * 0.37 - 3.0);
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center of a 3x3 kernel
        let k = Tensor::new(vec![1, 1, 3, 3], kd).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    /// Direct six-nested-loop reference convolution.
    fn conv2d_naive(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ish, ksh) = (x.shape(), k.shape());
        let (b_n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let (cout, _, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b_n, cout, oh, ow]);
        for b in 0..b_n {
            for co in 0..cout {
                for or in 0..oh {
                    for oc in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ir = (or * stride + dh) as isize - pad as isize;
                                    let ic = (oc * stride + dw) as isize - pad as isize;
                                    if ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w {
                                        acc += x.data()[idx4(cin, h, w, b, ci, ir as usize, ic as usize)]
                                            * k.data()[idx4(cin, kh, kw, co, ci, dh, dw)];
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx4(cout, oh, ow, b, co, or, oc)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = t4(1, 2, 5, 5, |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
            let fast = conv2d(&x, &k, &b, stride, pad).unwrap();
            let slow = conv2d_naive(&x, &k, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-6, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]); // channel mismatch
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &k, &b, 1, 1).is_err());
        let k_even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &k_even, &b, 1, 0).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = t4(2, 4, 3, 3, |i| ((i * 31) % 17) as f64 * 0.3 - 2.0);
        let y = softmax_channels(&x);
        let plane = 9;
        for b in 0..2 {
            for p in 0..plane {
                let s: f64 = (0..4).map(|c| y.data()[(b * 4 + c) * plane + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn up_then_down_is_identity() {
        let x = t4(1, 2, 4, 4, |i| i as f64);
        let up = upsample_nearest(&x, 2);
        let down = downsample_nearest(&up, 2).unwrap();
        assert_eq!(down.data(), x.data());
    }

    #[test]
    fn upsample_adjoint_dot_test() {
        // <up(x), y> == <x, up^T(y)>
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = t4(1, 1, 3, 3, |_| rng.gen_range(-1.0..1.0));
        let y = t4(1, 1, 6, 6, |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = upsample_nearest(&x, 2)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(upsample_nearest_grad(&y, 2).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let x = t4(2, 3, 4, 4, |i| (i as f64).sin() * 3.0 + 1.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (y, _, _) = batchnorm_train(&x, &gamma, &beta, 1e-5);
        let plane = 16;
        for c in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for b in 0..2 {
                let base = (b * 3 + c) * plane;
                for i in 0..plane {
                    s += y.data()[base + i];
                    s2 += y.data()[base + i] * y.data()[base + i];
                }
            }
            let m = s / 32.0;
            let v = s2 / 32.0 - m * m;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn concat_roundtrip() {
        let a = t4(2, 2, 3, 3, |i| i as f64);
        let b = t4(2, 1, 3, 3, |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 3]);
        let (da, db) = concat_channels_grad(&c, 2);
        assert_eq!(da.data(), a.data());
        assert_eq!(db.data(), b.data());
    }
}
