//! Patch-wise neural-field decoder.
//!
//! Tokens start at the coarsest level from t_S (a learned bias for I
//! frames, the embedded co-located reference patch for P/B frames) and
//! flow through one ModMixer layer per level: bilinear-queried (gamma,
//! beta) modulate the instance-normalized activations, a residual joins,
//! the layer's linear and ReLU apply, and the token grid upsamples by two.
//! The deploy form runs contracted weights on grids that carry the folded
//! scale, so it reproduces the mask-zero training form exactly.

use rand_chacha::ChaCha20Rng;

use crate::error::{CodecError, Result};
use crate::hierpe::query_latent;
use crate::modmixer::{ContractedLinear, ModMixerBlock};
use crate::nn::Linear;
use crate::optim::Param;
use crate::tensor::{instance_norm, Tensor};

pub const IN_EPS: f32 = 1e-5;

/// Training-form decoder (expanded blocks).
pub struct FieldDecoder {
    pub levels: usize,
    pub c_lat: usize,
    pub patch: usize,
    /// blocks[l] consumes grid level l (0 = finest); applied coarse to fine.
    pub blocks: Vec<ModMixerBlock>,
    pub t_bias: Param,
    pub ref_embed: Linear,
    pub out_head: Linear,
}

impl FieldDecoder {
    pub fn init(levels: usize, c_lat: usize, patch: usize, branches: usize, rng: &mut ChaCha20Rng) -> FieldDecoder {
        let depth_in = 3usize * (1 << (2 * levels));
        FieldDecoder {
            levels,
            c_lat,
            patch,
            blocks: (0..levels).map(|_| ModMixerBlock::init(c_lat, branches, rng)).collect(),
            t_bias: Param::zeros(&[c_lat]),
            ref_embed: Linear::init(depth_in, c_lat, true, rng),
            out_head: Linear::init(c_lat, 3, true, rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = vec![self.t_bias.clone()];
        ps.extend(self.ref_embed.params());
        ps.extend(self.out_head.params());
        for b in &self.blocks {
            ps.extend(b.params());
        }
        ps
    }

    /// Freeze to deploy form. Grids must carry the 0.5 fold (the encoder
    /// heads are scaled at the same consolidation step).
    pub fn consolidate(&self) -> DecoderWeights {
        DecoderWeights {
            levels: self.levels,
            c_lat: self.c_lat,
            patch: self.patch,
            blocks: self.blocks.iter().map(|b| b.contract()).collect(),
            t_bias: self.t_bias.values(),
            ref_embed_w: self.ref_embed.w.values(),
            ref_embed_b: self.ref_embed.b.as_ref().map(|b| b.values()).unwrap_or_default(),
            out_head_w: self.out_head.w.values(),
            out_head_b: self.out_head.b.as_ref().map(|b| b.values()).unwrap_or_default(),
        }
    }
}

/// Frozen deploy-form decoder weights.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub levels: usize,
    pub c_lat: usize,
    pub patch: usize,
    pub blocks: Vec<ContractedLinear>,
    pub t_bias: Vec<f32>,
    pub ref_embed_w: Vec<f32>,
    pub ref_embed_b: Vec<f32>,
    pub out_head_w: Vec<f32>,
    pub out_head_b: Vec<f32>,
}

/// Initial token content: learned bias (I) or co-located reference (P/B).
pub enum TSource<'a> {
    Bias,
    /// Padded reference reconstruction (3, H, W).
    Reference(&'a Tensor),
}

pub enum DecodeMode<'a> {
    Train { dec: &'a FieldDecoder, mask: f32 },
    Deploy { w: &'a DecoderWeights },
}

struct DecShape {
    levels: usize,
    c_lat: usize,
    patch: usize,
}

fn mode_shape(mode: &DecodeMode) -> DecShape {
    match mode {
        DecodeMode::Train { dec, .. } => DecShape {
            levels: dec.levels,
            c_lat: dec.c_lat,
            patch: dec.patch,
        },
        DecodeMode::Deploy { w } => DecShape {
            levels: w.levels,
            c_lat: w.c_lat,
            patch: w.patch,
        },
    }
}

/// Space-to-depth of a (3, P, P) patch by factor f: (3 f^2, P/f, P/f).
fn space_to_depth(patch: &Tensor, f: usize) -> Result<Tensor> {
    let s = patch.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % f != 0 || w % f != 0 {
        return Err(CodecError::Shape("space_to_depth misaligned".into()));
    }
    let (ho, wo) = (h / f, w / f);
    let mut data = vec![0.0f32; c * f * f * ho * wo];
    let src = patch.data();
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = (ch * f + dy) * f + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        data[(oc * ho + oy) * wo + ox] =
                            src[(ch * h + oy * f + dy) * w + ox * f + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, &[c * f * f, ho, wo])
}

/// Reconstruct one padded frame from dequantized latents.
///
/// `latents[l]` is the level-l grid (2C, gh, gw), finest first; `shrink[l]`
/// is that level's cumulative grid shrink (1 everywhere when scaled
/// griding is off). The output is (3, out_h, out_w), clamped to [0, 1].
pub fn decode_frame(
    mode: &DecodeMode,
    latents: &[Tensor],
    t_source: &TSource,
    shrink: &[f64],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let ds = mode_shape(mode);
    if latents.len() != ds.levels {
        return Err(CodecError::State(format!(
            "need {} latent levels, got {}",
            ds.levels,
            latents.len()
        )));
    }
    let p = ds.patch;
    if out_h % p != 0 || out_w % p != 0 {
        return Err(CodecError::Shape(format!(
            "padded frame {}x{} not tiled by patch {}",
            out_h, out_w, p
        )));
    }
    for (l, t) in latents.iter().enumerate() {
        if t.shape()[0] != 2 * ds.c_lat {
            return Err(CodecError::State(format!(
                "latent level {} has {} channels, want {}",
                l,
                t.shape()[0],
                2 * ds.c_lat
            )));
        }
    }

    let mut rows: Vec<Tensor> = Vec::new();
    for py in (0..out_h).step_by(p) {
        let mut row: Vec<Tensor> = Vec::new();
        for px in (0..out_w).step_by(p) {
            row.push(decode_patch(mode, &ds, latents, t_source, shrink, py, px)?);
        }
        rows.push(Tensor::concat(&row, 2)?);
    }
    Ok(Tensor::concat(&rows, 1)?.clamp01())
}

fn decode_patch(
    mode: &DecodeMode,
    ds: &DecShape,
    latents: &[Tensor],
    t_source: &TSource,
    shrink: &[f64],
    py: usize,
    px: usize,
) -> Result<Tensor> {
    let p = ds.patch;
    let lcoarse = ds.levels - 1;
    let t0 = p >> ds.levels;

    // t_S: learned bias plane or embedded reference patch.
    let mut h = match t_source {
        TSource::Bias => {
            let bias = match mode {
                DecodeMode::Train { dec, .. } => dec.t_bias.leaf(),
                DecodeMode::Deploy { w } => Tensor::from_slice(&w.t_bias, &[ds.c_lat])?,
            };
            bias.reshape(&[ds.c_lat, 1, 1])?
                .mul(&Tensor::ones(&[ds.c_lat, t0, t0]))?
        }
        TSource::Reference(frame) => {
            let fs = frame.shape();
            let mut patch_data = vec![0.0f32; 3 * p * p];
            for c in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        patch_data[(c * p + i) * p + j] =
                            frame.data()[(c * fs[1] + py + i) * fs[2] + px + j];
                    }
                }
            }
            let patch = Tensor::from_vec(patch_data, &[3, p, p])?;
            let deep = space_to_depth(&patch, 1 << ds.levels)?;
            let tokens = deep.chw_to_tokens()?;
            let emb = match mode {
                DecodeMode::Train { dec, .. } => dec.ref_embed.forward(&tokens)?,
                DecodeMode::Deploy { w } => {
                    let c_in = 3usize * (1 << (2 * ds.levels));
                    let wt = Tensor::from_slice(&w.ref_embed_w, &[c_in, ds.c_lat])?;
                    let bt = Tensor::from_slice(&w.ref_embed_b, &[1, ds.c_lat])?;
                    tokens.matmul(&wt)?.add(&bt)?
                }
            };
            emb.tokens_to_chw(t0, t0)?
        }
    };

    // Coarse-to-fine layer stack.
    for l in (0..=lcoarse).rev() {
        let th = p >> (l + 1);
        let grid = &latents[l];
        let (gh, gw) = (grid.shape()[1], grid.shape()[2]);
        let s = shrink[l];
        let base_y = py >> (l + 1);
        let base_x = px >> (l + 1);
        let mut coords = Vec::with_capacity(th * th);
        for i in 0..th {
            for j in 0..th {
                let qy = ((base_y + i) as f64 / s).min((gh - 1) as f64) as f32;
                let qx = ((base_x + j) as f64 / s).min((gw - 1) as f64) as f32;
                coords.push((qy, qx));
            }
        }
        let (gamma, beta) = query_latent(grid, &coords)?;
        let gamma = gamma.reshape(&[ds.c_lat, th, th])?;
        let beta = beta.reshape(&[ds.c_lat, th, th])?;

        h = match mode {
            DecodeMode::Train { dec, mask } => {
                let tokens = h.chw_to_tokens()?;
                let staged = dec.blocks[l].token_stage(&tokens, *mask)?;
                let u = staged.tokens_to_chw(th, th)?;
                let normed = instance_norm(&u, IN_EPS)?;
                let v = gamma.mul(&normed)?.add(&beta)?.add(&u)?;
                let out = dec.blocks[l].linear.forward(&v.chw_to_tokens()?)?.relu();
                out.tokens_to_chw(th, th)?
            }
            DecodeMode::Deploy { w } => {
                // The mask-zero training path normalizes 2h; IN(2h, eps)
                // equals IN(h, eps/4), so the folded form uses eps/4.
                let normed = instance_norm(&h, IN_EPS * 0.25)?;
                let v = gamma.mul(&normed)?.add(&beta)?.add(&h)?;
                let out = w.blocks[l].forward(&v.chw_to_tokens()?)?.relu();
                out.tokens_to_chw(th, th)?
            }
        };
        h = h.upsample2x()?;
    }

    // C -> 3 projection per pixel token.
    let tokens = h.chw_to_tokens()?;
    let rgb = match mode {
        DecodeMode::Train { dec, .. } => dec.out_head.forward(&tokens)?,
        DecodeMode::Deploy { w } => {
            let wt = Tensor::from_slice(&w.out_head_w, &[ds.c_lat, 3])?;
            let bt = Tensor::from_slice(&w.out_head_b, &[1, 3])?;
            tokens.matmul(&wt)?.add(&bt)?
        }
    };
    rgb.tokens_to_chw(p, p)
}
