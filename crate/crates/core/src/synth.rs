//! Procedurally generated clips for pretraining and tests: moving shapes
//! over textured backgrounds, noise textures, and global pans.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipKind {
    MovingShapes,
    NoiseTexture,
    GlobalPan,
}

fn smooth_noise(rng: &mut ChaCha20Rng, h: usize, w: usize, cells: usize) -> Vec<f32> {
    // Value noise: a coarse random lattice, bilinearly upsampled.
    let gh = cells.max(2);
    let gw = cells.max(2);
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let y = i as f32 / h as f32 * (gh - 1) as f32;
            let x = j as f32 / w as f32 * (gw - 1) as f32;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
            let (fy, fx) = (y - y0 as f32, x - x0 as f32);
            out[i * w + j] = (1.0 - fy) * (1.0 - fx) * lattice[y0 * gw + x0]
                + (1.0 - fy) * fx * lattice[y0 * gw + x1]
                + fy * (1.0 - fx) * lattice[y1 * gw + x0]
                + fy * fx * lattice[y1 * gw + x1];
        }
    }
    out
}

/// Generate one clip of `t` frames at (h, w), values in [0, 1].
pub fn clip(kind: ClipKind, t: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
    match kind {
        ClipKind::MovingShapes => moving_shapes(&mut rng, t, h, w),
        ClipKind::NoiseTexture => noise_texture(&mut rng, t, h, w),
        ClipKind::GlobalPan => global_pan(&mut rng, t, h, w),
    }
}

fn moving_shapes(rng: &mut ChaCha20Rng, t: usize, h: usize, w: usize) -> Vec<Tensor> {
    let bg: Vec<Vec<f32>> = (0..3).map(|_| smooth_noise(rng, h, w, 5)).collect();
    struct Shape {
        cx: f32,
        cy: f32,
        vx: f32,
        vy: f32,
        r: f32,
        color: [f32; 3],
        square: bool,
    }
    let shapes: Vec<Shape> = (0..3)
        .map(|_| Shape {
            cx: rng.gen_range(0.2f32..0.8) * w as f32,
            cy: rng.gen_range(0.2f32..0.8) * h as f32,
            vx: rng.gen_range(-2.0f32..2.0),
            vy: rng.gen_range(-2.0f32..2.0),
            r: rng.gen_range(0.08f32..0.2) * h.min(w) as f32,
            color: [rng.gen_range(0.0f32..1.0), rng.gen_range(0.0f32..1.0), rng.gen_range(0.0f32..1.0)],
            square: rng.gen_bool(0.5),
        })
        .collect();
    (0..t)
        .map(|ft| {
            let mut data = vec![0.0f32; 3 * h * w];
            for c in 0..3 {
                data[c * h * w..(c + 1) * h * w].copy_from_slice(&bg[c]);
            }
            for s in &shapes {
                let cx = s.cx + s.vx * ft as f32;
                let cy = s.cy + s.vy * ft as f32;
                for i in 0..h {
                    for j in 0..w {
                        let dx = j as f32 - cx;
                        let dy = i as f32 - cy;
                        let inside = if s.square {
                            dx.abs() < s.r && dy.abs() < s.r
                        } else {
                            dx * dx + dy * dy < s.r * s.r
                        };
                        if inside {
                            for c in 0..3 {
                                data[(c * h + i) * w + j] = s.color[c];
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(data, &[3, h, w]).unwrap()
        })
        .collect()
}

fn noise_texture(rng: &mut ChaCha20Rng, t: usize, h: usize, w: usize) -> Vec<Tensor> {
    // A slowly drifting mid-frequency texture with per-frame shimmer.
    let base: Vec<Vec<f32>> = (0..3).map(|_| smooth_noise(rng, h * 2, w * 2, 12)).collect();
    (0..t)
        .map(|ft| {
            let oy = (ft * 2) % h;
            let ox = (ft) % w;
            let mut data = vec![0.0f32; 3 * h * w];
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        data[(c * h + i) * w + j] = base[c][((i + oy) % (h * 2)) * (w * 2) + ((j + ox) % (w * 2))];
                    }
                }
            }
            Tensor::from_vec(data, &[3, h, w]).unwrap()
        })
        .collect()
}

fn global_pan(rng: &mut ChaCha20Rng, t: usize, h: usize, w: usize) -> Vec<Tensor> {
    // Pan a window across a larger static scene: pure global motion.
    let big_h = h + 4 * t;
    let big_w = w + 4 * t;
    let scene: Vec<Vec<f32>> = (0..3).map(|_| smooth_noise(rng, big_h, big_w, 9)).collect();
    let (dy, dx): (usize, usize) = (rng.gen_range(0..=2), rng.gen_range(1..=3));
    (0..t)
        .map(|ft| {
            let oy = dy * ft;
            let ox = dx * ft;
            let mut data = vec![0.0f32; 3 * h * w];
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        data[(c * h + i) * w + j] = scene[c][(i + oy) * big_w + (j + ox)];
                    }
                }
            }
            Tensor::from_vec(data, &[3, h, w]).unwrap()
        })
        .collect()
}

/// A deterministic mixed corpus of short clips.
pub fn corpus(clips: usize, frames: usize, h: usize, w: usize, seed: u64) -> Vec<Vec<Tensor>> {
    let kinds = [ClipKind::MovingShapes, ClipKind::NoiseTexture, ClipKind::GlobalPan];
    (0..clips)
        .map(|i| clip(kinds[i % kinds.len()], frames, h, w, seed.wrapping_add(i as u64 * 7919)))
        .collect()
}
