//! Simplified convolutional image encoder producing hierarchical latents.
//!
//! A stride-2 trunk with one residual block per stage; each stage feeds a
//! zero-initialized 1x1 head emitting that level's (gamma || beta) grid.
//! For P/B frames every stage is modulated by the matching level of the
//! motion-feature pyramid (one modulation per reference, identity when the
//! reference is absent).

use rand_chacha::ChaCha20Rng;

use super::motion::MotionPyramid;
use crate::error::{CodecError, Result};
use crate::nn::Conv2dLayer;
use crate::optim::Param;
use crate::tensor::Tensor;

struct Stage {
    down: Conv2dLayer,
    res1: Conv2dLayer,
    res2: Conv2dLayer,
    /// Motion modulation generator: feat -> (gamma, beta) over the trunk
    /// width; zero-initialized and bias-free so absent motion is identity.
    mot_gen: Conv2dLayer,
    head: Conv2dLayer,
}

pub struct ImageEncoder {
    pub levels: usize,
    pub width: usize,
    pub c_lat: usize,
    stages: Vec<Stage>,
    /// Deploy-time scale folded into the heads at consolidation.
    pub head_scale: f32,
}

impl ImageEncoder {
    pub fn init(
        levels: usize,
        width: usize,
        c_lat: usize,
        feat_ch: usize,
        rng: &mut ChaCha20Rng,
    ) -> ImageEncoder {
        let mut stages = Vec::with_capacity(levels);
        for l in 0..levels {
            let c_in = if l == 0 { 3 } else { width };
            let mut mot_gen = Conv2dLayer::init_zero(feat_ch, 2 * width, 1, 1, 0);
            mot_gen.b = None;
            stages.push(Stage {
                down: Conv2dLayer::init(c_in, width, 3, 2, 1, rng),
                res1: Conv2dLayer::init(width, width, 3, 1, 1, rng),
                res2: Conv2dLayer::init_zero(width, width, 3, 1, 1),
                mot_gen,
                head: Conv2dLayer::init_zero(width, 2 * c_lat, 1, 1, 0),
            });
        }
        ImageEncoder {
            levels,
            width,
            c_lat,
            stages,
            head_scale: 1.0,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut ps = Vec::new();
        for (l, s) in self.stages.iter().enumerate() {
            let mut add = |part: &str, layer: &Conv2dLayer| {
                ps.push((format!("stage{l}.{part}.k"), layer.k.clone()));
                if let Some(b) = &layer.b {
                    ps.push((format!("stage{l}.{part}.b"), b.clone()));
                }
            };
            add("down", &s.down);
            add("res1", &s.res1);
            add("res2", &s.res2);
            add("mot_gen", &s.mot_gen);
            add("head", &s.head);
        }
        ps
    }

    /// Fold a constant into every latent head (deploy reparameterization).
    pub fn scale_heads(&mut self, factor: f32) {
        for s in &self.stages {
            let scale = |p: &Param| {
                p.set_values(p.values().iter().map(|v| v * factor).collect());
            };
            scale(&s.head.k);
            if let Some(b) = &s.head.b {
                scale(b);
            }
        }
        self.head_scale *= factor;
    }

    /// Hierarchical latents, finest level first. `grid_extents` gives the
    /// per-level target grid sizes (scaled griding resizes the heads'
    /// outputs); pass the natural extents for the unscaled scheme.
    pub fn forward(
        &self,
        x: &Tensor,
        motion: &[Option<&MotionPyramid>],
        grid_extents: &[(usize, usize)],
    ) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(CodecError::Shape(format!("encoder expects (3,H,W), got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        let align = 1 << self.levels;
        if h % align != 0 || w % align != 0 {
            return Err(CodecError::Shape(format!(
                "encoder input {}x{} not divisible by 2^{}; pad first",
                h, w, self.levels
            )));
        }
        if grid_extents.len() != self.levels {
            return Err(CodecError::Shape("one grid extent per level required".into()));
        }
        let mut latents = Vec::with_capacity(self.levels);
        let mut hcur = x.reshape(s)?;
        for (l, stage) in self.stages.iter().enumerate() {
            hcur = stage.down.forward(&hcur)?.relu();
            for pyr in motion.iter().flatten() {
                let feat = pyr.feat_for_stage(l);
                let gb = stage.mot_gen.forward(feat)?;
                let gamma = gb.slice_axis(0, 0, self.width)?;
                let beta = gb.slice_axis(0, self.width, self.width)?;
                hcur = hcur.mul(&gamma.affine(1.0, 1.0))?.add(&beta)?;
            }
            let r = stage.res1.forward(&hcur)?.relu();
            hcur = hcur.add(&stage.res2.forward(&r)?)?;
            let mut y = stage.head.forward(&hcur)?;
            let (gh, gw) = grid_extents[l];
            y = y.resize_bilinear(gh, gw)?;
            latents.push(y);
        }
        Ok(latents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn enc() -> ImageEncoder {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        ImageEncoder::init(3, 8, 8, 4, &mut rng)
    }

    fn natural_extents(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
        (1..=levels).map(|l| (h >> l, w >> l)).collect()
    }

    #[test]
    fn latent_shape_contract() {
        let e = enc();
        let x = Tensor::zeros(&[3, 64, 64]);
        let ys = e.forward(&x, &[None, None], &natural_extents(64, 64, 3)).unwrap();
        assert_eq!(ys.len(), 3);
        assert_eq!(ys[0].shape(), &[16, 32, 32]);
        assert_eq!(ys[1].shape(), &[16, 16, 16]);
        assert_eq!(ys[2].shape(), &[16, 8, 8]);
    }

    #[test]
    fn zero_input_zero_heads_zero_latents() {
        let e = enc();
        let x = Tensor::zeros(&[3, 32, 32]);
        let ys = e.forward(&x, &[None, None], &natural_extents(32, 32, 3)).unwrap();
        for y in ys {
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_unaligned_input() {
        let e = enc();
        let x = Tensor::zeros(&[3, 30, 32]);
        assert!(matches!(
            e.forward(&x, &[None, None], &natural_extents(32, 32, 3)),
            Err(CodecError::Shape(_))
        ));
    }

    #[test]
    fn gradients_reach_trunk_weights() {
        let e = enc();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rand::Rng::gen_range(&mut rng, 0.0f32..1.0)).collect();
        let x = Tensor::from_slice(&data, &[3, 16, 16]).unwrap();
        // Nudge the heads off zero so gradients pass through them.
        for st in &e.stages {
            let n = st.head.k.numel();
            st.head.k.set_values(vec![0.01; n]);
        }
        let ys = e.forward(&x, &[None, None], &natural_extents(16, 16, 3)).unwrap();
        let loss = ys
            .iter()
            .map(|y| y.square().unwrap().sum_all())
            .try_fold(Tensor::scalar(0.0), |acc, t| acc.add(&t))
            .unwrap()
            .sum_all();
        let grads = crate::tensor::backward(&loss).unwrap();
        let gw = grads.get(&e.stages[0].down.k.leaf());
        assert!(gw.is_some(), "trunk weights receive gradients");
        assert!(gw.unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn scaled_extents_resize_heads() {
        let e = enc();
        let x = Tensor::zeros(&[3, 64, 64]);
        let ys = e
            .forward(&x, &[None, None], &[(32, 32), (13, 13), (4, 4)])
            .unwrap();
        assert_eq!(ys[1].shape(), &[16, 13, 13]);
        assert_eq!(ys[2].shape(), &[16, 4, 4]);
    }

    #[test]
    fn head_scaling_halves_latents() {
        let mut e = enc();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for st in &e.stages {
            let n = st.head.k.numel();
            st.head.k.set_values(crate::nn::randn(&mut rng, n, 0.1));
        }
        let data: Vec<f32> = (0..3 * 16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
        let x = Tensor::from_slice(&data, &[3, 16, 16]).unwrap();
        let a = e.forward(&x, &[None, None], &natural_extents(16, 16, 3)).unwrap();
        e.scale_heads(0.5);
        let b = e.forward(&x, &[None, None], &natural_extents(16, 16, 3)).unwrap();
        for (ya, yb) in a.iter().zip(&b) {
            for i in 0..ya.numel() {
                assert!((0.5 * ya.data()[i] - yb.data()[i]).abs() < 1e-6);
            }
        }
    }
}
