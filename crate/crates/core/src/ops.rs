//! Forward and backward kernels for the layer types.
//!
//! Convolution is cross-correlation lowered through im2col + GEMM. A
//! deconvolution with factor `f` is the transpose of a stride-`f` convolution
//! and stores its weights in that convolution's layout
//! (`deconv_in x deconv_out x k x k`), so the same tensor drives both.

use crate::error::{Error, Result};
use crate::geom::LayerGeom;
use crate::tensor::{Scalar, Tensor};

fn out_extent(geom: &LayerGeom, h: usize, w: usize, what: &str) -> Result<(usize, usize)> {
    match (geom.output_extent(h), geom.output_extent(w)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::Geometry(format!(
            "{what}: {geom} gives no output for a {h}x{w} input"
        ))),
    }
}

/// Unfold one `c x h x w` image into a `(c k k) x (oh ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a `c x h x w` image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_weights<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &LayerGeom) -> Result<()> {
    let [_, wc, kh, kw] = w.dims();
    if wc != x.channels() {
        return Err(Error::Shape(format!(
            "conv expects {wc} input channels, got {}",
            x.channels()
        )));
    }
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::Shape(format!(
            "conv weights are {kh}x{kw} but geometry says k={}",
            geom.kernel
        )));
    }
    if geom.dilation != 1 {
        return Err(Error::Geometry(
            "dilated convolution is not supported".into(),
        ));
    }
    Ok(())
}

/// `y = conv(x, w) + b` with `w: out x in x k x k`, `b: 1 x out x 1 x 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &LayerGeom,
) -> Result<Tensor<T>> {
    check_conv_weights(x, w, geom)?;
    let [n, c, h, wd] = x.dims();
    let (oh, ow) = out_extent(geom, h, wd, "conv")?;
    let (o, k) = (w.batch(), geom.kernel);
    let ck = c * k * k;
    let mut cols = vec![T::zero(); ck * oh * ow];
    let mut y = Tensor::zeros([n, o, oh, ow]);
    for bi in 0..n {
        im2col(
            x.item(bi),
            c,
            h,
            wd,
            k,
            geom.stride,
            geom.pad,
            oh,
            ow,
            &mut cols,
        );
        let out = y.item_mut(bi);
        if let Some(b) = b {
            for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
                plane.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            ck,
            oh * ow,
            T::one(),
            w.data(),
            false,
            &cols,
            false,
            beta,
            out,
        );
    }
    Ok(y)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &LayerGeom,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_conv_weights(x, w, geom)?;
    let [n, c, h, wd] = x.dims();
    let (oh, ow) = out_extent(geom, h, wd, "conv")?;
    let (o, k) = (w.batch(), geom.kernel);
    if gy.dims() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?}",
            gy.dims()
        )));
    }
    let ck = c * k * k;
    let mut cols = vec![T::zero(); ck * oh * ow];
    let mut gcols = vec![T::zero(); ck * oh * ow];
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(w.dims());
    let mut gb = Tensor::zeros([1, o, 1, 1]);
    for bi in 0..n {
        let g = gy.item(bi);
        im2col(
            x.item(bi),
            c,
            h,
            wd,
            k,
            geom.stride,
            geom.pad,
            oh,
            ow,
            &mut cols,
        );
        T::gemm(
            o,
            oh * ow,
            ck,
            T::one(),
            g,
            false,
            &cols,
            true,
            T::one(),
            gw.data_mut(),
        );
        T::gemm(
            ck,
            o,
            oh * ow,
            T::one(),
            w.data(),
            true,
            g,
            false,
            T::zero(),
            &mut gcols,
        );
        col2im(
            &gcols,
            c,
            h,
            wd,
            k,
            geom.stride,
            geom.pad,
            oh,
            ow,
            gx.item_mut(bi),
        );
        for (oc, plane) in g.chunks_exact(oh * ow).enumerate() {
            let s: T = plane.iter().copied().sum();
            gb.data_mut()[oc] = gb.data()[oc] + s;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Max pooling; padded positions never win. Returns the output and, per
/// output element, the flat input index of its (first row-major) argmax.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, geom: &LayerGeom) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = out_extent(geom, h, w, "pool")?;
    if geom.pad >= geom.span() {
        return Err(Error::Geometry(format!(
            "{geom}: padding must be smaller than the window"
        )));
    }
    let (k, s, p, d) = (geom.kernel, geom.stride, geom.pad as isize, geom.dilation);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(y.len());
    let yd = y.data_mut();
    let mut oi = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let plane = &x.data()[base..base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx * d) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                // every window overlaps the input because pad < span
                let (v, idx) = best.expect("pool window inside padding");
                yd[oi] = v;
                arg.push(base + idx);
                oi += 1;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    input_dims: [usize; 4],
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_dims);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(gy.data()) {
        g[i] = g[i] + v;
    }
    gx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.dims(), data).expect("same dims")
}

/// Default deconvolution kernel size for factor `f`: `2f - f mod 2`.
pub fn default_deconv_kernel(f: usize) -> usize {
    2 * f - f % 2
}

fn check_deconv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &LayerGeom,
) -> Result<(usize, usize)> {
    let [wi, _, kh, kw] = w.dims();
    if wi != x.channels() {
        return Err(Error::Shape(format!(
            "deconv expects {wi} input channels, got {}",
            x.channels()
        )));
    }
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::Shape(format!(
            "deconv weights are {kh}x{kw} but geometry says k={}",
            geom.kernel
        )));
    }
    out_extent(geom, x.height(), x.width(), "deconv")
}

/// Transposed convolution with output stride `geom.factor`;
/// `w: in x out x k x k`. Output extent is `(H - 1) f + k - 2p`.
pub fn deconv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &LayerGeom) -> Result<Tensor<T>> {
    let (oh, ow) = check_deconv(x, w, geom)?;
    let [n, c, h, wd] = x.dims();
    let (o, k) = (w.channels(), geom.kernel);
    let ok = o * k * k;
    let mut cols = vec![T::zero(); ok * h * wd];
    let mut y = Tensor::zeros([n, o, oh, ow]);
    for bi in 0..n {
        T::gemm(
            ok,
            c,
            h * wd,
            T::one(),
            w.data(),
            true,
            x.item(bi),
            false,
            T::zero(),
            &mut cols,
        );
        col2im(
            &cols,
            o,
            oh,
            ow,
            k,
            geom.factor,
            geom.pad,
            h,
            wd,
            y.item_mut(bi),
        );
    }
    Ok(y)
}

pub struct DeconvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &LayerGeom,
    gy: &Tensor<T>,
) -> Result<DeconvGrads<T>> {
    let (oh, ow) = check_deconv(x, w, geom)?;
    let [n, c, h, wd] = x.dims();
    let (o, k) = (w.channels(), geom.kernel);
    if gy.dims() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "deconv upstream gradient {:?}",
            gy.dims()
        )));
    }
    let ok = o * k * k;
    let mut cols = vec![T::zero(); ok * h * wd];
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(w.dims());
    for bi in 0..n {
        im2col(
            gy.item(bi),
            o,
            oh,
            ow,
            k,
            geom.factor,
            geom.pad,
            h,
            wd,
            &mut cols,
        );
        T::gemm(
            c,
            ok,
            h * wd,
            T::one(),
            w.data(),
            false,
            &cols,
            false,
            T::zero(),
            gx.item_mut(bi),
        );
        T::gemm(
            c,
            h * wd,
            ok,
            T::one(),
            x.item(bi),
            false,
            &cols,
            true,
            T::one(),
            gw.data_mut(),
        );
    }
    Ok(DeconvGrads {
        input: gx,
        weight: gw,
    })
}

/// 1-D bilinear interpolation weights for factor `f`:
/// `w_i = 1 - |i / f - c|` with `c = (k - 1) / (2 f)`.
pub fn bilinear_weights(f: usize) -> Vec<f64> {
    assert!(f >= 1, "upsampling factor must be positive");
    let k = default_deconv_kernel(f);
    let c = (k - 1) as f64 / (2 * f) as f64;
    (0..k)
        .map(|i| 1.0 - (i as f64 / f as f64 - c).abs())
        .collect()
}

/// Channel-diagonal bilinear upsampling kernel, `channels x channels x k x k`.
pub fn bilinear_kernel<T: Scalar>(f: usize, channels: usize) -> Tensor<T> {
    let w1 = bilinear_weights(f);
    Tensor::from_fn([channels, channels, w1.len(), w1.len()], |[i, o, y, x]| {
        if i == o {
            T::of_f64(w1[y] * w1[x])
        } else {
            T::zero()
        }
    })
}

pub fn fuse_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "fuse_sum: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Gradient of a crop: place `gy` at the window inside a zero tensor.
pub fn crop_backward<T: Scalar>(
    input_dims: [usize; 4],
    offset_h: usize,
    offset_w: usize,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let [_, _, h, w] = input_dims;
    gy.pad(
        offset_h,
        offset_w,
        h - offset_h - gy.height(),
        w - offset_w - gy.width(),
    )
}

/// Reshape an `out x (c h w)` fully connected matrix into `out x c x h x w`
/// convolution weights. A stride-1, unpadded conv with these weights over an
/// exactly `c x h x w` input reproduces the FC output at its single cell.
pub fn convolutionalize_fc<T: Scalar>(
    fc: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let [o, cols, one_a, one_b] = fc.dims();
    if (one_a, one_b) != (1, 1) || cols != c * h * w {
        return Err(Error::Shape(format!(
            "FC weights {:?} do not cover a {c}x{h}x{w} input",
            fc.dims()
        )));
    }
    fc.clone().reshape([o, c, h, w])
}

/// Fully connected layer over a whole `c x k x k` input; `w: out x (c k k) x 1 x 1`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.dims();
    let [o, cols, _, _] = w.dims();
    if cols != c * h * wd {
        return Err(Error::Shape(format!(
            "FC layer expects {cols} inputs per item, got {c}x{h}x{wd}"
        )));
    }
    let mut y = Tensor::zeros([n, o, 1, 1]);
    if let Some(b) = b {
        for bi in 0..n {
            y.item_mut(bi).copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    // y (n x o) = x (n x cols) * w^T
    T::gemm(
        n,
        cols,
        o,
        T::one(),
        x.data(),
        false,
        w.data(),
        true,
        beta,
        y.data_mut(),
    );
    Ok(y)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, c, h, wd] = x.dims();
    let [o, cols, _, _] = w.dims();
    if cols != c * h * wd || gy.dims() != [n, o, 1, 1] {
        return Err(Error::Shape("FC backward dims".into()));
    }
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(w.dims());
    T::gemm(
        n,
        o,
        cols,
        T::one(),
        gy.data(),
        false,
        w.data(),
        false,
        T::zero(),
        gx.data_mut(),
    );
    T::gemm(
        o,
        n,
        cols,
        T::one(),
        gy.data(),
        true,
        x.data(),
        false,
        T::zero(),
        gw.data_mut(),
    );
    let mut gb = Tensor::zeros([1, o, 1, 1]);
    for bi in 0..n {
        for (g, &v) in gb.data_mut().iter_mut().zip(gy.item(bi)) {
            *g = *g + v;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
pub(crate) mod reference {
    //! Nested-loop oracles for the lowered kernels.
    use super::*;

    pub fn conv2d<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        s: usize,
        p: usize,
    ) -> Tensor<T> {
        let [n, c, h, wd] = x.dims();
        let [o, _, k, _] = w.dims();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        Tensor::from_fn([n, o, oh, ow], |[bi, oc, y, xx]| {
            let mut acc = b.map_or(0.0, |b| b.data()[oc].as_f64());
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * s + ky) as isize - p as isize;
                        let ix = (xx * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at(bi, ci, iy as usize, ix as usize).as_f64()
                                * w.at(oc, ci, ky, kx).as_f64();
                        }
                    }
                }
            }
            T::of_f64(acc)
        })
    }

    /// Scatter form of the transposed convolution.
    pub fn deconv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, f: usize, p: usize) -> Tensor<T> {
        let [n, c, h, wd] = x.dims();
        let [_, o, k, _] = w.dims();
        let oh = (h - 1) * f + k - 2 * p;
        let ow = (wd - 1) * f + k - 2 * p;
        let mut y = vec![0.0f64; n * o * oh * ow];
        for bi in 0..n {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x.at(bi, ci, iy, ix).as_f64();
                        for oc in 0..o {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yy = (iy * f + ky) as isize - p as isize;
                                    let xx = (ix * f + kx) as isize - p as isize;
                                    if yy >= 0
                                        && xx >= 0
                                        && (yy as usize) < oh
                                        && (xx as usize) < ow
                                    {
                                        y[((bi * o + oc) * oh + yy as usize) * ow + xx as usize] +=
                                            v * w.at(ci, oc, ky, kx).as_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new([n, o, oh, ow], y.into_iter().map(T::of_f64).collect()).unwrap()
    }
}
