//! Forward and backward kernels for the layer primitives.
//!
//! These are plain functions over [`Tensor`]s; the autodiff graph in
//! [`crate::graph`] records which kernel produced a node and calls the
//! matching backward during reverse traversal.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Transposed-convolution geometry used by every deconvolution layer.
pub const DECONV_KERNEL: usize = 4;
pub const DECONV_STRIDE: usize = 2;
pub const DECONV_PAD: usize = 1;

/// Half-open range of `i` such that `0 <= i + delta < len`, clipped to `0..len`.
#[inline]
fn valid_range(len: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (len as isize - delta).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(op, format!("bias of length {channels}"), b.dims()));
        }
    }
    Ok(())
}

/// Same-padded 2-D convolution. `kernels` has dims `(out, in, k, k)` with odd `k`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let id = input.dims();
    let kd = kernels.dims();
    if kd.c != id.c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel in-channels {} (input {id})", id.c),
            format!("{} (kernels {kd})", kd.c),
        ));
    }
    if kd.h != kd.w || kd.h % 2 == 0 {
        return Err(Error::shape("conv2d", "square odd kernel", kd));
    }
    check_bias("conv2d", bias, kd.n)?;
    let k = kd.h;
    let pad = (k / 2) as isize;
    let (h, w) = (id.h, id.w);
    let od = Dims::new(id.n, kd.n, h, w);
    let mut out = Tensor::zeros(od);

    for n in 0..id.n {
        for oc in 0..kd.n {
            let base = od.offset(n, oc, 0, 0);
            let out_plane = &mut out.data_mut()[base..base + h * w];
            if let Some(b) = bias {
                out_plane.fill(b.data()[oc]);
            }
            for ic in 0..id.c {
                let in_plane = input.plane(n, ic);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let wv = kernels[[oc, ic, ky, kx]];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane
                                [sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let id = input.dims();
    let kd = kernels.dims();
    let k = kd.h;
    let pad = (k / 2) as isize;
    let (h, w) = (id.h, id.w);
    let mut g_in = Tensor::zeros(id);
    let mut g_k = Tensor::zeros(kd);
    let mut g_b = Tensor::zeros(Dims::vector(1, kd.n));

    for n in 0..id.n {
        for oc in 0..kd.n {
            let go = grad_out.plane(n, oc);
            g_b.data_mut()[oc] += go.iter().sum::<f64>();
            for ic in 0..id.c {
                let in_plane = input.plane(n, ic);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = kernels[[oc, ic, ky, kx]];
                        let mut acc = 0.0;
                        let gi_base = id.offset(n, ic, 0, 0);
                        let gi_plane = &mut g_in.data_mut()[gi_base..gi_base + h * w];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s0 = sy * w + (x0 as isize + dx) as usize;
                            let s1 = sy * w + (x1 as isize + dx) as usize;
                            let g_row = &go[y * w + x0..y * w + x1];
                            for (g, s) in g_row.iter().zip(&in_plane[s0..s1]) {
                                acc += g * s;
                            }
                            for (gi, g) in gi_plane[s0..s1].iter_mut().zip(g_row) {
                                *gi += wv * g;
                            }
                        }
                        g_k[[oc, ic, ky, kx]] += acc;
                    }
                }
            }
        }
    }
    (g_in, g_k, g_b)
}

/// Output spatial size of a transposed convolution.
pub fn deconv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size.checked_sub(1)? * stride) + kernel).checked_sub(2 * pad)
}

/// Transposed convolution with kernel 4, stride 2, padding 1: `h x w -> 2h x 2w`.
/// `kernels` has dims `(in, out, 4, 4)`.
pub fn deconv2d_forward(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let id = input.dims();
    let kd = kernels.dims();
    if kd.n != id.c {
        return Err(Error::shape(
            "deconv2d",
            format!("kernel in-channels {} (input {id})", id.c),
            format!("{} (kernels {kd})", kd.n),
        ));
    }
    if kd.h != DECONV_KERNEL || kd.w != DECONV_KERNEL {
        return Err(Error::shape("deconv2d", "4x4 kernel", kd));
    }
    check_bias("deconv2d", bias, kd.c)?;
    let oh = 2 * id.h;
    let ow = 2 * id.w;
    let od = Dims::new(id.n, kd.c, oh, ow);
    let mut out = Tensor::zeros(od);
    for n in 0..id.n {
        for oc in 0..kd.c {
            let base = od.offset(n, oc, 0, 0);
            if let Some(b) = bias {
                out.data_mut()[base..base + oh * ow].fill(b.data()[oc]);
            }
        }
        for ic in 0..id.c {
            let in_plane = input.plane(n, ic);
            for oc in 0..kd.c {
                let base = od.offset(n, oc, 0, 0);
                let out_plane = &mut out.data_mut()[base..base + oh * ow];
                for ky in 0..DECONV_KERNEL {
                    for kx in 0..DECONV_KERNEL {
                        let wv = kernels[[ic, oc, ky, kx]];
                        for iy in 0..id.h {
                            let oy = (DECONV_STRIDE * iy + ky) as isize - DECONV_PAD as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let row = oy as usize * ow;
                            for ix in 0..id.w {
                                let ox = (DECONV_STRIDE * ix + kx) as isize - DECONV_PAD as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out_plane[row + ox as usize] += wv * in_plane[iy * id.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let id = input.dims();
    let kd = kernels.dims();
    let (oh, ow) = (2 * id.h, 2 * id.w);
    let mut g_in = Tensor::zeros(id);
    let mut g_k = Tensor::zeros(kd);
    let mut g_b = Tensor::zeros(Dims::vector(1, kd.c));
    for n in 0..id.n {
        for oc in 0..kd.c {
            g_b.data_mut()[oc] += grad_out.plane(n, oc).iter().sum::<f64>();
        }
        for ic in 0..id.c {
            let in_plane = input.plane(n, ic);
            let gi_base = id.offset(n, ic, 0, 0);
            for oc in 0..kd.c {
                let go = grad_out.plane(n, oc);
                for ky in 0..DECONV_KERNEL {
                    for kx in 0..DECONV_KERNEL {
                        let wv = kernels[[ic, oc, ky, kx]];
                        let mut acc = 0.0;
                        for iy in 0..id.h {
                            let oy = (DECONV_STRIDE * iy + ky) as isize - DECONV_PAD as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let row = oy as usize * ow;
                            for ix in 0..id.w {
                                let ox = (DECONV_STRIDE * ix + kx) as isize - DECONV_PAD as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let g = go[row + ox as usize];
                                acc += g * in_plane[iy * id.w + ix];
                                g_in.data_mut()[gi_base + iy * id.w + ix] += wv * g;
                            }
                        }
                        g_k[[ic, oc, ky, kx]] += acc;
                    }
                }
            }
        }
    }
    (g_in, g_k, g_b)
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of the selected maximum. Ties go to the
/// first element in row-major window order.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let id = input.dims();
    if id.h % 2 != 0 || id.w % 2 != 0 {
        return Err(Error::shape("maxpool2", "even height and width", id));
    }
    let od = Dims::new(id.n, id.c, id.h / 2, id.w / 2);
    let mut out = Tensor::zeros(od);
    let mut argmax = Vec::with_capacity(od.len());
    let src = input.data();
    for n in 0..id.n {
        for c in 0..id.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut best_idx = id.offset(n, c, 2 * oy, 2 * ox);
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = id.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    out[[n, c, oy, ox]] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[usize], input_dims: Dims) -> Tensor {
    let mut g = Tensor::zeros(input_dims);
    for (go, &idx) in grad_out.data().iter().zip(argmax) {
        g.data_mut()[idx] += go;
    }
    g
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("relu dims")
}

/// Batched affine map `y = W x + b`. `input` is `(n,1,1,in)`, `weights` is
/// `(1,1,out,in)`, `bias` is `(1,1,1,out)`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xd = input.dims();
    let wd = weights.dims();
    let in_len = xd.c * xd.h * xd.w;
    if wd.w != in_len || wd.n * wd.c != 1 {
        return Err(Error::shape(
            "fully_connected",
            format!("weight columns {in_len} (input {xd})"),
            format!("{} (weights {wd})", wd.w),
        ));
    }
    if bias.len() != wd.h {
        return Err(Error::shape(
            "fully_connected",
            format!("bias of length {}", wd.h),
            bias.dims(),
        ));
    }
    let out_len = wd.h;
    let mut out = Tensor::zeros(Dims::vector(xd.n, out_len));
    for n in 0..xd.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        for r in 0..out_len {
            let row = &weights.data()[r * in_len..(r + 1) * in_len];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.data_mut()[n * out_len + r] = dot + bias.data()[r];
        }
    }
    Ok(out)
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xd = input.dims();
    let wd = weights.dims();
    let in_len = wd.w;
    let out_len = wd.h;
    let mut g_x = Tensor::zeros(xd);
    let mut g_w = Tensor::zeros(wd);
    let mut g_b = Tensor::zeros(Dims::vector(1, out_len));
    for n in 0..xd.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        for r in 0..out_len {
            let g = grad_out.data()[n * out_len + r];
            if g == 0.0 {
                continue;
            }
            g_b.data_mut()[r] += g;
            let row = &weights.data()[r * in_len..(r + 1) * in_len];
            let gw_row = &mut g_w.data_mut()[r * in_len..(r + 1) * in_len];
            for (gw, xv) in gw_row.iter_mut().zip(x) {
                *gw += g * xv;
            }
            let gx = &mut g_x.data_mut()[n * in_len..(n + 1) * in_len];
            for (gxv, wv) in gx.iter_mut().zip(row) {
                *gxv += g * wv;
            }
        }
    }
    (g_x, g_w, g_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Dims, v: &[f64]) -> Tensor {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_3x3() {
        let input = Tensor::filled(Dims::new(1, 1, 3, 3), 1.0);
        let k = Tensor::filled(Dims::new(1, 1, 3, 3), 1.0);
        let out = conv2d_forward(&input, &k, None).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_2x2_input_all_ones_kernel() {
        let input = t(Dims::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::filled(Dims::new(1, 1, 3, 3), 1.0);
        let out = conv2d_forward(&input, &k, None).unwrap();
        assert_eq!(out.data(), &[10.0; 4]);
    }

    #[test]
    fn conv_dirac_is_identity() {
        let input = t(Dims::new(1, 1, 3, 4), &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let mut k = Tensor::zeros(Dims::new(1, 1, 5, 5));
        k[[0, 0, 2, 2]] = 1.0;
        assert_eq!(conv2d_forward(&input, &k, None).unwrap(), input);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(Dims::new(1, 2, 4, 4));
        let k = Tensor::zeros(Dims::new(1, 3, 3, 3));
        let err = conv2d_forward(&input, &k, None).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
        let even = Tensor::zeros(Dims::new(1, 2, 2, 2));
        assert!(conv2d_forward(&input, &even, None).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let (out, arg) = maxpool2_forward(&t(Dims::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let (out, _) = maxpool2_forward(&t(Dims::new(1, 1, 4, 4), &ramp)).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);

        let flat = Tensor::filled(Dims::new(1, 1, 2, 4), 3.0);
        let (out, arg) = maxpool2_forward(&flat).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
        assert_eq!(arg, vec![0, 2]);
        let g = maxpool2_backward(&Tensor::filled(out.dims(), 1.0), &arg, flat.dims());
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert!(maxpool2_forward(&Tensor::zeros(Dims::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn deconv_single_pixel() {
        let input = Tensor::filled(Dims::new(1, 1, 1, 1), 1.0);
        let k = Tensor::filled(Dims::new(1, 1, 4, 4), 1.0);
        let out = deconv2d_forward(&input, &k, None).unwrap();
        assert_eq!(out.dims(), Dims::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[1.0; 4]);
    }

    #[test]
    fn deconv_size_formula() {
        for h in 1..12 {
            assert_eq!(deconv_output_size(h, 4, 2, 1), Some(2 * h));
        }
    }

    #[test]
    fn fc_examples() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = fc_forward(&Tensor::vector(&[1.0, 1.0]), &w, &Tensor::vector(&[0.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 8.0]);

        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(&[-3.5, 2.25]);
        assert_eq!(fc_forward(&x, &eye, &Tensor::vector(&[0.0, 0.0])).unwrap(), x);

        let zero = Tensor::zeros(Dims::new(1, 1, 2, 2));
        let beta = Tensor::vector(&[0.5, -1.0]);
        assert_eq!(fc_forward(&x, &zero, &beta).unwrap().data(), beta.data());

        assert!(fc_forward(&Tensor::vector(&[1.0; 3]), &w, &beta).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::vector(&[1.0, 1.0, 1.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
