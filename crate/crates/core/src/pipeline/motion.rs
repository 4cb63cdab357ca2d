//! Coarse-to-fine pyramid flow estimator (desk-scale SpyNet stand-in).
//!
//! Each pyramid level refines the upsampled coarser flow from the current
//! frame, the warped reference, and the flow itself, and emits a feature
//! map that conditions the matching image-encoder stage. Final layers are
//! zero-initialized so an untrained estimator predicts zero flow.

use rand_chacha::ChaCha20Rng;

use crate::error::{CodecError, Result};
use crate::nn::Conv2dLayer;
use crate::optim::Param;
use crate::tensor::Tensor;

/// Per-level flows (2,h,w) and conditioning features (F,h,w), finest
/// first. Level 0 sits at full frame resolution; image-encoder stage l
/// (output H/2^(l+1)) conditions on level l + 1.
pub struct MotionPyramid {
    pub flows: Vec<Tensor>,
    pub feats: Vec<Tensor>,
}

impl MotionPyramid {
    pub fn feat_for_stage(&self, stage: usize) -> &Tensor {
        &self.feats[stage + 1]
    }
}

struct Refiner {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    c4: Conv2dLayer,
    /// Emits (2 + feat) channels; zero-initialized.
    out: Conv2dLayer,
}

pub struct MotionEncoder {
    pub levels: usize,
    pub feat_ch: usize,
    width: usize,
    refiners: Vec<Refiner>,
}

impl MotionEncoder {
    pub fn init(levels: usize, width: usize, feat_ch: usize, rng: &mut ChaCha20Rng) -> MotionEncoder {
        let refiners = (0..levels)
            .map(|_| Refiner {
                // cur(3) + warped ref(3) + upsampled flow(2).
                c1: Conv2dLayer::init(8, width, 3, 1, 1, rng),
                c2: Conv2dLayer::init(width, width, 3, 1, 1, rng),
                c3: Conv2dLayer::init(width, width, 3, 1, 1, rng),
                c4: Conv2dLayer::init(width, width, 3, 1, 1, rng),
                out: Conv2dLayer::init_zero(width, 2 + feat_ch, 3, 1, 1),
            })
            .collect();
        MotionEncoder {
            levels,
            feat_ch,
            width,
            refiners,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut ps = Vec::new();
        for (l, r) in self.refiners.iter().enumerate() {
            let mut add = |part: &str, layer: &Conv2dLayer| {
                ps.push((format!("ref{l}.{part}.k"), layer.k.clone()));
                if let Some(b) = &layer.b {
                    ps.push((format!("ref{l}.{part}.b"), b.clone()));
                }
            };
            add("c1", &r.c1);
            add("c2", &r.c2);
            add("c3", &r.c3);
            add("c4", &r.c4);
            add("out", &r.out);
        }
        ps
    }

    /// Image pyramid at resolutions H .. H/2^(levels-1).
    fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(self.levels);
        levels.push(x.reshape(&x.shape().to_vec())?);
        for _ in 1..self.levels {
            let next = levels.last().unwrap().avg_pool2()?;
            levels.push(next);
        }
        Ok(levels)
    }

    /// Coarse-to-fine flow estimation between same-shape (3,H,W) frames.
    pub fn estimate(&self, x_t: &Tensor, x_ref: &Tensor) -> Result<MotionPyramid> {
        if x_t.shape() != x_ref.shape() {
            return Err(CodecError::Shape(format!(
                "flow inputs differ: {:?} vs {:?}",
                x_t.shape(),
                x_ref.shape()
            )));
        }
        let cur_pyr = self.pyramid(x_t)?;
        let ref_pyr = self.pyramid(x_ref)?;
        let mut flows = vec![None; self.levels];
        let mut feats = vec![None; self.levels];
        let mut flow: Option<Tensor> = None;
        for l in (0..self.levels).rev() {
            let shape = cur_pyr[l].shape();
            let (h, w) = (shape[1], shape[2]);
            let flow_up = match &flow {
                // Flow vectors double when the grid doubles.
                Some(f) => f.upsample2x()?.scale(2.0),
                None => Tensor::zeros(&[2, h, w]),
            };
            let warped = ref_pyr[l].warp_bilinear(&flow_up)?;
            let inp = Tensor::concat(&[cur_pyr[l].clone(), warped, flow_up.clone()], 0)?;
            let r = &self.refiners[l];
            let mut hid = r.c1.forward(&inp)?.relu();
            hid = r.c2.forward(&hid)?.relu();
            hid = r.c3.forward(&hid)?.relu();
            hid = r.c4.forward(&hid)?.relu();
            let out = r.out.forward(&hid)?;
            let dflow = out.slice_axis(0, 0, 2)?;
            let feat = out.slice_axis(0, 2, self.feat_ch)?;
            let new_flow = flow_up.add(&dflow)?;
            flows[l] = Some(new_flow.clone());
            feats[l] = Some(feat);
            flow = Some(new_flow);
        }
        Ok(MotionPyramid {
            flows: flows.into_iter().map(Option::unwrap).collect(),
            feats: feats.into_iter().map(Option::unwrap).collect(),
    })
    }

    pub fn hidden_width(&self) -> usize {
        self.width
    }
}

/// Photometric self-supervision: every level's flow should warp the
/// reference onto the current frame. Run on synthetic pairs before the
/// main pretraining so the estimator starts as an actual flow net.
pub fn pretrain_flow(
    motion: &MotionEncoder,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    lr: f32,
) -> Result<()> {
    use crate::optim::{begin_step, Adam, ParamGroup};
    let params = motion.params();
    let mut opt = Adam::new(vec![ParamGroup {
        params: params.clone(),
        lr,
    }])
    .with_cosine_decay(steps.max(1));
    for step in 0..steps {
        begin_step(&params);
        let (cur, reference) = &pairs[step % pairs.len()];
        let pyr = motion.estimate(cur, reference)?;
        let cur_pyr = motion.pyramid(cur)?;
        let ref_pyr = motion.pyramid(reference)?;
        let mut loss: Option<Tensor> = None;
        for l in 0..motion.levels {
            let warped = ref_pyr[l].warp_bilinear(&pyr.flows[l])?;
            let err = warped.sub(&cur_pyr[l])?.square()?.mean_all();
            loss = Some(match loss {
                Some(t) => t.add(&err)?,
                None => err,
            });
        }
        let loss = loss.unwrap().sum_all();
        if !loss.item().is_finite() {
            return Err(crate::error::CodecError::Train {
                step,
                last_good: step.saturating_sub(1),
            });
        }
        let grads = crate::tensor::backward(&loss)?;
        opt.step(&grads);
    }
    Ok(())
}
