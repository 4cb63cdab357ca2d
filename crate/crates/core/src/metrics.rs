//! Quality metrics: PSNR, multi-scale SSIM, and BD-rate.
//!
//! MS-SSIM is built from tensor ops so the same code serves as a training
//! distortion; metric calls just read the forward value. Gaussian windows
//! use replicate padding; the scale count drops below five when the
//! spatial extent cannot support it (extent / 2^(s-1) >= 10), with the
//! scale weights renormalized over the scales used.

use crate::error::{CodecError, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB over [0,1] frames, capped at 100.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CodecError::Shape(format!(
            "psnr shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse <= 1e-10 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

const MSSSIM_WEIGHTS: [f32; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f32 = 0.01 * 0.01;
const C2: f32 = 0.03 * 0.03;
const WIN: usize = 11;
const SIGMA: f32 = 1.5;

fn gaussian_kernel() -> Vec<f32> {
    let mut k = vec![0.0f32; WIN * WIN];
    let c = (WIN / 2) as f32;
    let mut sum = 0.0f32;
    for i in 0..WIN {
        for j in 0..WIN {
            let d2 = (i as f32 - c).powi(2) + (j as f32 - c).powi(2);
            let v = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
            k[i * WIN + j] = v;
            sum += v;
        }
    }
    k.iter().map(|v| v / sum).collect()
}

/// Replicate-pad a (N,1,H,W) tensor spatially by `p` on every side.
fn pad_replicate(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let top = x.slice_axis(2, 0, 1)?;
    let bot = x.slice_axis(2, h - 1, 1)?;
    let mut rows = Vec::new();
    for _ in 0..p {
        rows.push(top.clone());
    }
    rows.push(x.reshape(&s)?);
    for _ in 0..p {
        rows.push(bot.clone());
    }
    let v = Tensor::concat(&rows, 2)?;
    let left = v.slice_axis(3, 0, 1)?;
    let right = v.slice_axis(3, w - 1, 1)?;
    let mut cols = Vec::new();
    for _ in 0..p {
        cols.push(left.clone());
    }
    cols.push(v.clone());
    for _ in 0..p {
        cols.push(right.clone());
    }
    Tensor::concat(&cols, 3)
}

/// Gaussian blur of (N,1,H,W), same extent.
fn blur(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    pad_replicate(x, WIN / 2)?.conv2d(kernel, 1, 0)
}

fn scales_for(extent: usize) -> usize {
    let mut s = 1usize;
    while s < 5 && (extent >> s) >= 10 {
        s += 1;
    }
    s
}

/// Multi-scale structural similarity of two (3,H,W) frames in [0,1].
/// Differentiable; also the metric implementation.
pub fn ms_ssim_graph(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CodecError::Shape(format!(
            "ms_ssim shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.len() != 3 {
        return Err(CodecError::Shape("ms_ssim expects (C,H,W)".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let min_ext = h.min(w);
    let nscales = scales_for(min_ext);
    let wsum: f32 = MSSSIM_WEIGHTS[..nscales].iter().sum();
    let kernel = Tensor::from_vec(gaussian_kernel(), &[1, 1, WIN, WIN])?;

    let mut x = a.reshape(&[c, 1, h, w])?;
    let mut y = b.reshape(&[c, 1, h, w])?;
    let mut acc: Option<Tensor> = None;
    for scale in 0..nscales {
        let mx = blur(&x, &kernel)?;
        let my = blur(&y, &kernel)?;
        let mx2 = mx.square()?;
        let my2 = my.square()?;
        let mxy = mx.mul(&my)?;
        let sx = blur(&x.square()?, &kernel)?.sub(&mx2)?;
        let sy = blur(&y.square()?, &kernel)?.sub(&my2)?;
        let sxy = blur(&x.mul(&y)?, &kernel)?.sub(&mxy)?;
        let cs = sxy
            .affine(2.0, C2)
            .div(&sx.add(&sy)?.affine(1.0, C2))?;
        let term = if scale + 1 == nscales {
            // Luminance enters at the final scale.
            let l = mxy.affine(2.0, C1).div(&mx2.add(&my2)?.affine(1.0, C1))?;
            l.mul(&cs)?.mean_all()
        } else {
            cs.mean_all()
        };
        // Positive part before the exponent (cs can dip negative).
        let term = term.relu().affine(1.0, 1e-8);
        let weighted = term
            .log()
            .scale(MSSSIM_WEIGHTS[scale] / wsum)
            .exp();
        acc = Some(match acc {
            Some(p) => p.mul(&weighted)?,
            None => weighted,
        });
        if scale + 1 < nscales {
            let (mut hh, mut ww) = (x.shape()[2], x.shape()[3]);
            if hh % 2 == 1 {
                hh -= 1;
                x = x.slice_axis(2, 0, hh)?;
                y = y.slice_axis(2, 0, hh)?;
            }
            if ww % 2 == 1 {
                ww -= 1;
                x = x.slice_axis(3, 0, ww)?;
                y = y.slice_axis(3, 0, ww)?;
            }
            x = x.avg_pool2()?;
            y = y.avg_pool2()?;
        }
    }
    Ok(acc.unwrap())
}

pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ms_ssim_graph(a, b)?.item() as f64)
}

/// One rate-distortion point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// Fit log10(rate) as a polynomial in quality, least squares, degree
/// min(3, n-1).
fn fit_log_rate(points: &[RdPoint]) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(CodecError::Range("need >= 2 RD points".into()));
    }
    let deg = n.saturating_sub(1).min(3);
    let m = deg + 1;
    // Normal equations A^T A c = A^T b.
    let mut ata = vec![0.0f64; m * m];
    let mut atb = vec![0.0f64; m];
    for p in points {
        if p.bpp <= 0.0 {
            return Err(CodecError::Range("non-positive bitrate".into()));
        }
        let logr = p.bpp.log10();
        let mut pow = vec![1.0f64; m];
        for i in 1..m {
            pow[i] = pow[i - 1] * p.quality;
        }
        for i in 0..m {
            for j in 0..m {
                ata[i * m + j] += pow[i] * pow[j];
            }
            atb[i] += pow[i] * logr;
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut a = ata;
    let mut b = atb;
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if a[piv * m + col].abs() < 1e-12 {
            return Err(CodecError::Range("degenerate RD fit".into()));
        }
        if piv != col {
            for j in 0..m {
                a.swap(col * m + j, piv * m + j);
            }
            b.swap(col, piv);
        }
        for r in col + 1..m {
            let f = a[r * m + col] / a[col * m + col];
            for j in col..m {
                a[r * m + j] -= f * a[col * m + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut coef = vec![0.0f64; m];
    for i in (0..m).rev() {
        let mut v = b[i];
        for j in i + 1..m {
            v -= a[i * m + j] * coef[j];
        }
        coef[i] = v / a[i * m + i];
    }
    Ok(coef)
}

fn poly_integral(coef: &[f64], lo: f64, hi: f64) -> f64 {
    let eval_anti = |x: f64| -> f64 {
        coef.iter()
            .enumerate()
            .map(|(i, &c)| c * x.powi(i as i32 + 1) / (i as f64 + 1.0))
            .sum()
    };
    eval_anti(hi) - eval_anti(lo)
}

/// Bjontegaard delta rate of `test` against `anchor`, in percent;
/// negative means bitrate savings at equal quality.
pub fn bd_rate(test: &[RdPoint], anchor: &[RdPoint]) -> Result<f64> {
    let span = |pts: &[RdPoint]| -> (f64, f64) {
        let lo = pts.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.quality).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    if test.len() < 2 || anchor.len() < 2 {
        return Err(CodecError::Range("need >= 2 RD points per curve".into()));
    }
    let (tl, th) = span(test);
    let (al, ah) = span(anchor);
    let lo = tl.max(al);
    let hi = th.min(ah);
    if hi <= lo {
        return Err(CodecError::Range(format!(
            "quality ranges do not overlap: [{}, {}] vs [{}, {}]",
            tl, th, al, ah
        )));
    }
    let ct = fit_log_rate(test)?;
    let ca = fit_log_rate(anchor)?;
    let avg = (poly_integral(&ct, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((10.0f64.powf(avg) - 1.0) * 100.0)
}
