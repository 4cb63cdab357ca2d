//! Bilinear sampling kernels: fixed-coordinate grid queries and flow warps.
//!
//! Convention: grid sample centers sit at integer coordinates, so a query at
//! an integer position returns that cell exactly.

use crate::error::{CodecError, Result};

/// The 4 integer taps and weights for a bilinear query at (y, x).
pub fn bilinear_taps(y: f32, x: f32, h: usize, w: usize) -> [(usize, usize, f32); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let iy0 = y0 as usize;
    let ix0 = x0 as usize;
    let iy1 = (iy0 + 1).min(h - 1);
    let ix1 = (ix0 + 1).min(w - 1);
    [
        (iy0, ix0, (1.0 - fy) * (1.0 - fx)),
        (iy0, ix1, (1.0 - fy) * fx),
        (iy1, ix0, fy * (1.0 - fx)),
        (iy1, ix1, fy * fx),
    ]
}

/// Bilinear value of one (H,W) plane at (y, x), coordinates pre-validated.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    bilinear_taps(y, x, h, w)
        .iter()
        .map(|&(iy, ix, wt)| wt * plane[iy * w + ix])
        .sum()
}

pub fn sample_forward(grid: &[f32], gs: &[usize], coords: &[(f32, f32)]) -> Result<Vec<f32>> {
    if gs.len() != 3 {
        return Err(CodecError::Shape(format!("interp_bilinear grid must be (C,H,W), got {:?}", gs)));
    }
    let (c, h, w) = (gs[0], gs[1], gs[2]);
    for &(y, x) in coords {
        if !(0.0..=(h - 1) as f32).contains(&y) || !(0.0..=(w - 1) as f32).contains(&x) {
            return Err(CodecError::Coord(format!(
                "coordinate ({}, {}) outside grid {}x{}",
                y, x, h, w
            )));
        }
    }
    let n = coords.len();
    let mut out = vec![0.0f32; c * n];
    for (j, &(y, x)) in coords.iter().enumerate() {
        let taps = bilinear_taps(y, x, h, w);
        for ch in 0..c {
            let plane = &grid[ch * h * w..(ch + 1) * h * w];
            out[ch * n + j] = taps.iter().map(|&(iy, ix, wt)| wt * plane[iy * w + ix]).sum();
        }
    }
    Ok(out)
}

pub fn sample_backward(g: &[f32], gs: &[usize], coords: &[(f32, f32)]) -> Vec<f32> {
    let (c, h, w) = (gs[0], gs[1], gs[2]);
    let n = coords.len();
    let mut gx = vec![0.0f32; c * h * w];
    for (j, &(y, x)) in coords.iter().enumerate() {
        let taps = bilinear_taps(y, x, h, w);
        for ch in 0..c {
            let gv = g[ch * n + j];
            if gv == 0.0 {
                continue;
            }
            let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
            for &(iy, ix, wt) in &taps {
                plane[iy * w + ix] += wt * gv;
            }
        }
    }
    gx
}

/// Backward-warp: out(p) = img(p + flow(p)), source clamped to the frame.
pub fn warp_forward(img: &[f32], is: &[usize], flow: &[f32], fs: &[usize]) -> Result<Vec<f32>> {
    if is.len() != 3 || fs.len() != 3 || fs[0] != 2 || is[1] != fs[1] || is[2] != fs[2] {
        return Err(CodecError::Shape(format!(
            "warp expects img (C,H,W) and flow (2,H,W), got {:?} / {:?}",
            is, fs
        )));
    }
    let (c, h, w) = (is[0], is[1], is[2]);
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for p in 0..hw {
        let y = (p / w) as f32 + flow[p];
        let x = (p % w) as f32 + flow[hw + p];
        let yc = y.max(0.0).min((h - 1) as f32);
        let xc = x.max(0.0).min((w - 1) as f32);
        let taps = bilinear_taps(yc, xc, h, w);
        for ch in 0..c {
            let plane = &img[ch * hw..(ch + 1) * hw];
            out[ch * hw + p] = taps.iter().map(|&(iy, ix, wt)| wt * plane[iy * w + ix]).sum();
        }
    }
    Ok(out)
}

pub fn warp_backward(
    g: &[f32],
    img: &[f32],
    is: &[usize],
    flow: &[f32],
    _fs: &[usize],
) -> (Vec<f32>, Vec<f32>) {
    let (c, h, w) = (is[0], is[1], is[2]);
    let hw = h * w;
    let mut gi = vec![0.0f32; c * hw];
    let mut gf = vec![0.0f32; 2 * hw];
    for p in 0..hw {
        let y = (p / w) as f32 + flow[p];
        let x = (p % w) as f32 + flow[hw + p];
        let inside_y = y > 0.0 && y < (h - 1) as f32;
        let inside_x = x > 0.0 && x < (w - 1) as f32;
        let yc = y.max(0.0).min((h - 1) as f32);
        let xc = x.max(0.0).min((w - 1) as f32);
        let y0 = yc.floor();
        let x0 = xc.floor();
        let fy = yc - y0;
        let fx = xc - x0;
        let iy0 = y0 as usize;
        let ix0 = x0 as usize;
        let iy1 = (iy0 + 1).min(h - 1);
        let ix1 = (ix0 + 1).min(w - 1);
        for ch in 0..c {
            let gv = g[ch * hw + p];
            if gv == 0.0 {
                continue;
            }
            let plane = &img[ch * hw..(ch + 1) * hw];
            let gp = &mut gi[ch * hw..(ch + 1) * hw];
            gp[iy0 * w + ix0] += gv * (1.0 - fy) * (1.0 - fx);
            gp[iy0 * w + ix1] += gv * (1.0 - fy) * fx;
            gp[iy1 * w + ix0] += gv * fy * (1.0 - fx);
            gp[iy1 * w + ix1] += gv * fy * fx;
            // d out / d fy and d out / d fx, zero where the clamp saturates.
            let top = (1.0 - fx) * plane[iy0 * w + ix0] + fx * plane[iy0 * w + ix1];
            let bot = (1.0 - fx) * plane[iy1 * w + ix0] + fx * plane[iy1 * w + ix1];
            let left = (1.0 - fy) * plane[iy0 * w + ix0] + fy * plane[iy1 * w + ix0];
            let right = (1.0 - fy) * plane[iy0 * w + ix1] + fy * plane[iy1 * w + ix1];
            if inside_y {
                gf[p] += gv * (bot - top);
            }
            if inside_x {
                gf[hw + p] += gv * (right - left);
            }
        }
    }
    (gi, gf)
}
