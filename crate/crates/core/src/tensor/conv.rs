//! Raw convolution / pooling / upsampling kernels (forward and backward).
//!
//! Inner loops run over precomputed valid output ranges so the hot paths
//! stay branch-free and vectorizable.

use crate::error::{CodecError, Result};

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        3 => Ok((1, shape[0], shape[1], shape[2])),
        _ => Err(CodecError::Shape(format!(
            "expected (N,C,H,W) or (C,H,W), got {:?}",
            shape
        ))),
    }
}

fn with_batch(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 4 {
        vec![shape[0], c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// Valid output range [lo, hi) for one kernel tap: input index
/// o * stride + d - pad must land in [0, extent_in).
fn tap_range(extent_out: usize, extent_in: usize, stride: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d).div_ceil(stride);
    let hi_in = extent_in + pad;
    let hi = if hi_in > d {
        ((hi_in - d - 1) / stride + 1).min(extent_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(
    x: &[f32],
    xs: &[usize],
    k: &[f32],
    ks: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, ci, h, w) = spatial_dims(xs)?;
    if ks.len() != 4 {
        return Err(CodecError::Shape(format!("kernel must be (O,I,kh,kw), got {:?}", ks)));
    }
    let (co, ki, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if ki != ci {
        return Err(CodecError::Shape(format!(
            "conv2d channel mismatch: input {} vs kernel {}",
            ci, ki
        )));
    }
    if stride == 0 {
        return Err(CodecError::Shape("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(CodecError::Shape(format!(
            "conv2d geometry: input {}x{} pad {} kernel {}x{}",
            h, w, pad, kh, kw
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * ho * wo;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                for dy in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ho, h, stride, dy, pad);
                    for dx in 0..kw {
                        let kv = k[((o * ci + ic) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(wo, w, stride, dx, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dy - pad;
                            let irow = ibase + iy * w;
                            let orow = obase + oy * wo;
                            if stride == 1 {
                                let ix0 = ox_lo + dx - pad;
                                let len = ox_hi - ox_lo;
                                let src = &x[irow + ix0..irow + ix0 + len];
                                let dst = &mut out[orow + ox_lo..orow + ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += kv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + dx - pad;
                                    out[orow + ox] += kv * x[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((with_batch(xs, co, ho, wo), out))
}

pub fn conv2d_backward_input(
    g: &[f32],
    gs: &[usize],
    k: &[f32],
    ks: &[usize],
    xs: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (n, ci, h, w) = spatial_dims(xs).unwrap();
    let (_, co, ho, wo) = spatial_dims(gs).unwrap();
    let (kh, kw) = (ks[2], ks[3]);
    let mut gx = vec![0.0f32; n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * ho * wo;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                for dy in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ho, h, stride, dy, pad);
                    for dx in 0..kw {
                        let kv = k[((o * ci + ic) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(wo, w, stride, dx, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dy - pad;
                            let irow = ibase + iy * w;
                            let grow = gbase + oy * wo;
                            if stride == 1 {
                                let ix0 = ox_lo + dx - pad;
                                let len = ox_hi - ox_lo;
                                let src = &g[grow + ox_lo..grow + ox_hi];
                                let dst = &mut gx[irow + ix0..irow + ix0 + len];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += kv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + dx - pad;
                                    gx[irow + ix] += kv * g[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_backward_kernel(
    g: &[f32],
    gs: &[usize],
    x: &[f32],
    xs: &[usize],
    ks: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (n, ci, h, w) = spatial_dims(xs).unwrap();
    let (_, co, ho, wo) = spatial_dims(gs).unwrap();
    let (kh, kw) = (ks[2], ks[3]);
    let mut gk = vec![0.0f32; co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * ho * wo;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                for dy in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ho, h, stride, dy, pad);
                    for dx in 0..kw {
                        let (ox_lo, ox_hi) = tap_range(wo, w, stride, dx, pad);
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dy - pad;
                            let irow = ibase + iy * w;
                            let grow = gbase + oy * wo;
                            if stride == 1 {
                                let ix0 = ox_lo + dx - pad;
                                let len = ox_hi - ox_lo;
                                let src = &x[irow + ix0..irow + ix0 + len];
                                let gsrc = &g[grow + ox_lo..grow + ox_hi];
                                for (xv, gv) in src.iter().zip(gsrc) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + dx - pad;
                                    acc += x[irow + ix] * g[grow + ox];
                                }
                            }
                        }
                        gk[((o * ci + ic) * kh + dy) * kw + dx] += acc;
                    }
                }
            }
        }
    }
    gk
}

/// Source taps for one output position of the half-pixel 2x upsample.
fn up_taps(o: usize, extent_in: usize) -> [(usize, f32); 2] {
    // Output o samples input at (o + 0.5) / 2 - 0.5.
    let pos = (o as f32 + 0.5) * 0.5 - 0.5;
    let clamped = pos.max(0.0).min(extent_in as f32 - 1.0);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(extent_in - 1);
    let f = clamped - i0 as f32;
    [(i0, 1.0 - f), (i1, f)]
}

pub fn upsample2x_forward(x: &[f32], xs: &[usize]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, c, h, w) = spatial_dims(xs)?;
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    for b in 0..n * c {
        let src = &x[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * ho * wo..(b + 1) * ho * wo];
        for oy in 0..ho {
            let ty = up_taps(oy, h);
            for ox in 0..wo {
                let tx = up_taps(ox, w);
                let mut acc = 0.0f32;
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        acc += wy * wx * src[iy * w + ix];
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
    Ok((with_batch(xs, c, ho, wo), out))
}

pub fn upsample2x_backward(g: &[f32], gs: &[usize], xs: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = spatial_dims(xs).unwrap();
    let (_, _, ho, wo) = spatial_dims(gs).unwrap();
    let mut gx = vec![0.0f32; n * c * h * w];
    for b in 0..n * c {
        let src = &g[b * ho * wo..(b + 1) * ho * wo];
        let dst = &mut gx[b * h * w..(b + 1) * h * w];
        for oy in 0..ho {
            let ty = up_taps(oy, h);
            for ox in 0..wo {
                let tx = up_taps(ox, w);
                let gv = src[oy * wo + ox];
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        dst[iy * w + ix] += wy * wx * gv;
                    }
                }
            }
        }
    }
    gx
}

/// Taps for arbitrary-size bilinear resize, half-pixel alignment.
fn resize_taps(o: usize, extent_out: usize, extent_in: usize) -> [(usize, f32); 2] {
    let scale = extent_in as f32 / extent_out as f32;
    let pos = (o as f32 + 0.5) * scale - 0.5;
    let clamped = pos.max(0.0).min(extent_in as f32 - 1.0);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(extent_in - 1);
    let f = clamped - i0 as f32;
    [(i0, 1.0 - f), (i1, f)]
}

pub fn resize_forward(
    x: &[f32],
    xs: &[usize],
    ho: usize,
    wo: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, c, h, w) = spatial_dims(xs)?;
    if ho == 0 || wo == 0 {
        return Err(CodecError::Shape("resize to zero extent".into()));
    }
    let mut out = vec![0.0f32; n * c * ho * wo];
    for b in 0..n * c {
        let src = &x[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * ho * wo..(b + 1) * ho * wo];
        for oy in 0..ho {
            let ty = resize_taps(oy, ho, h);
            for ox in 0..wo {
                let tx = resize_taps(ox, wo, w);
                let mut acc = 0.0f32;
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        acc += wy * wx * src[iy * w + ix];
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
    Ok((with_batch(xs, c, ho, wo), out))
}

pub fn resize_backward(g: &[f32], gs: &[usize], xs: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = spatial_dims(xs).unwrap();
    let (_, _, ho, wo) = spatial_dims(gs).unwrap();
    let mut gx = vec![0.0f32; n * c * h * w];
    for b in 0..n * c {
        let src = &g[b * ho * wo..(b + 1) * ho * wo];
        let dst = &mut gx[b * h * w..(b + 1) * h * w];
        for oy in 0..ho {
            let ty = resize_taps(oy, ho, h);
            for ox in 0..wo {
                let tx = resize_taps(ox, wo, w);
                let gv = src[oy * wo + ox];
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        dst[iy * w + ix] += wy * wx * gv;
                    }
                }
            }
        }
    }
    gx
}

pub fn avgpool2_forward(x: &[f32], xs: &[usize]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, c, h, w) = spatial_dims(xs)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CodecError::Shape(format!(
            "avg_pool2 needs even extents, got {}x{}",
            h, w
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    for b in 0..n * c {
        let src = &x[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * ho * wo..(b + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = 0.25
                    * (src[(2 * oy) * w + 2 * ox]
                        + src[(2 * oy) * w + 2 * ox + 1]
                        + src[(2 * oy + 1) * w + 2 * ox]
                        + src[(2 * oy + 1) * w + 2 * ox + 1]);
            }
        }
    }
    Ok((with_batch(xs, c, ho, wo), out))
}

pub fn avgpool2_backward(g: &[f32], gs: &[usize], xs: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = spatial_dims(xs).unwrap();
    let (_, _, ho, wo) = spatial_dims(gs).unwrap();
    let mut gx = vec![0.0f32; n * c * h * w];
    for b in 0..n * c {
        let src = &g[b * ho * wo..(b + 1) * ho * wo];
        let dst = &mut gx[b * h * w..(b + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = 0.25 * src[oy * wo + ox];
                dst[(2 * oy) * w + 2 * ox] += gv;
                dst[(2 * oy) * w + 2 * ox + 1] += gv;
                dst[(2 * oy + 1) * w + 2 * ox] += gv;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += gv;
            }
        }
    }
    gx
}
