//! The conditional Gaussian parameter network g_psi.
//!
//! Pointwise trunk over latent tokens with a 3x3 spatial-context conv;
//! hierarchical, spatial, and temporal features enter through element-wise
//! modulation (gamma, beta) of the instance-normalized activations, never
//! concatenation (the concat path exists as an ablation). The two trunk
//! blocks and three FC layers are reparameterized ModMixer layers; at
//! coding time they run contracted, optionally shifted by per-level
//! residual weight updates.
//!
//! One forward skeleton serves all three modes so the encoder, the
//! decoder, and the training path cannot drift apart.

use rand_chacha::ChaCha20Rng;

use super::{ChannelGrouping, DecodeStep, GroupingKind};
use crate::error::{CodecError, Result};
use crate::modmixer::{ContractedLinear, ExpandedLinear, ModMixerBlock, ReparamLayer};
use crate::nn::{Conv2dLayer, Linear};
use crate::optim::Param;
use crate::range_coder::{
    value_bits, FreqTable, GaussParams, GaussTableCache, RangeDecoder, RangeEncoder,
};
use crate::tensor::{instance_norm, Tensor};

pub const IN_EPS: f32 = 1e-5;
/// Token-mixer attention window: bands of this many token rows.
pub const MIX_BAND_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Modulation,
    Concat,
}

#[derive(Clone, Copy, Debug)]
pub struct EntropyConfig {
    /// Latent channels per stream; tensors carry 2C (gamma || beta).
    pub c_lat: usize,
    pub hidden: usize,
    pub branches: usize,
    pub fusion: Fusion,
    pub grouping: GroupingKind,
}

/// Conditioning state for one level of one frame. `cur` is the masked
/// decoded-so-far latent (dequantized); absent contexts stay `None` and
/// contribute nothing (modulation identity).
pub struct CtxInputs {
    pub cur: Tensor,
    pub hier: Option<Tensor>,
    pub t1: Option<Tensor>,
    pub t2: Option<Tensor>,
}

pub struct EntropyModel {
    pub cfg: EntropyConfig,
    pub embed: ExpandedLinear,
    pub embed_concat: Linear,
    pub spat: Conv2dLayer,
    pub gen_spat: Linear,
    pub gen_hier: Linear,
    pub gen_t1: Linear,
    pub gen_t2: Linear,
    pub block1: ModMixerBlock,
    pub block2: ModMixerBlock,
    pub head_mu: ExpandedLinear,
    pub head_sigma: ExpandedLinear,
}

fn zero_head(c_in: usize, c_out: usize, m: usize, rng: &mut ChaCha20Rng) -> ExpandedLinear {
    let head = ExpandedLinear::init(c_in, c_out, m, rng);
    for br in &head.branches {
        br.mix_gw.set_values(vec![0.0; c_out]);
        br.mix_bw.set_values(vec![0.0; c_out]);
        br.mix_bb.set_values(vec![0.0; c_out]);
    }
    head
}

impl EntropyModel {
    pub fn init(cfg: EntropyConfig, rng: &mut ChaCha20Rng) -> EntropyModel {
        let c2 = 2 * cfg.c_lat;
        let d = cfg.hidden;
        EntropyModel {
            cfg,
            embed: ExpandedLinear::init(c2, d, cfg.branches, rng),
            embed_concat: Linear::init(4 * c2 + d, d, true, rng),
            spat: Conv2dLayer::init(c2, d, 3, 1, 1, rng),
            gen_spat: Linear::init_zero(d, 2 * d, false),
            gen_hier: Linear::init_zero(c2, 2 * d, false),
            gen_t1: Linear::init_zero(c2, 2 * d, false),
            gen_t2: Linear::init_zero(c2, 2 * d, false),
            block1: ModMixerBlock::init(d, cfg.branches, rng),
            block2: ModMixerBlock::init(d, cfg.branches, rng),
            head_mu: zero_head(d, c2, cfg.branches, rng),
            head_sigma: zero_head(d, c2, cfg.branches, rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = Vec::new();
        match self.cfg.fusion {
            Fusion::Modulation => {
                ps.extend(self.embed.params());
                ps.extend(self.gen_spat.params());
                ps.extend(self.gen_hier.params());
                ps.extend(self.gen_t1.params());
                ps.extend(self.gen_t2.params());
            }
            Fusion::Concat => ps.extend(self.embed_concat.params()),
        }
        ps.extend(self.spat.params());
        ps.extend(self.block1.params());
        ps.extend(self.block2.params());
        ps.extend(self.head_mu.params());
        ps.extend(self.head_sigma.params());
        ps
    }

    /// Training-time forward; returns (mu, sigma), each (2C, H, W).
    pub fn forward_expanded(&self, ctx: &CtxInputs, mask: f32) -> Result<(Tensor, Tensor)> {
        let mode = NetMode::Expanded { model: self, mask };
        net_forward(&mode, &self.cfg, ctx)
    }

    /// Freeze into the coding form.
    pub fn contract(&self) -> ContractedEntropy {
        ContractedEntropy {
            cfg: self.cfg,
            embed: ReparamLayer::from_expanded(&self.embed, 1.0),
            embed_concat_w: self.embed_concat.w.values(),
            embed_concat_b: self.embed_concat.b.as_ref().map(|b| b.values()).unwrap_or_default(),
            spat_k: self.spat.k.values(),
            spat_b: self.spat.b.as_ref().map(|b| b.values()).unwrap_or_default(),
            gen_spat: self.gen_spat.w.values(),
            gen_hier: self.gen_hier.w.values(),
            gen_t1: self.gen_t1.w.values(),
            gen_t2: self.gen_t2.w.values(),
            block1: ReparamLayer::from_expanded(&self.block1.linear, 2.0),
            block2: ReparamLayer::from_expanded(&self.block2.linear, 2.0),
            head_mu: ReparamLayer::from_expanded(&self.head_mu, 1.0),
            head_sigma: ReparamLayer::from_expanded(&self.head_sigma, 1.0),
        }
    }
}

/// Frozen coding-form entropy model: contracted layers plus the frozen
/// reparameterization bases that per-level weight updates act on.
#[derive(Clone, Debug)]
pub struct ContractedEntropy {
    pub cfg: EntropyConfig,
    pub embed: ReparamLayer,
    pub embed_concat_w: Vec<f32>,
    pub embed_concat_b: Vec<f32>,
    pub spat_k: Vec<f32>,
    pub spat_b: Vec<f32>,
    pub gen_spat: Vec<f32>,
    pub gen_hier: Vec<f32>,
    pub gen_t1: Vec<f32>,
    pub gen_t2: Vec<f32>,
    pub block1: ReparamLayer,
    pub block2: ReparamLayer,
    pub head_mu: ReparamLayer,
    pub head_sigma: ReparamLayer,
}

/// Post-update plain layers used to code one level.
pub struct CodingLayers {
    pub embed: ContractedLinear,
    pub block1: ContractedLinear,
    pub block2: ContractedLinear,
    pub head_mu: ContractedLinear,
    pub head_sigma: ContractedLinear,
}

impl ContractedEntropy {
    fn reparam_layers(&self) -> [&ReparamLayer; 5] {
        [
            &self.embed,
            &self.block1,
            &self.block2,
            &self.head_mu,
            &self.head_sigma,
        ]
    }

    /// Length of the flat per-level weight-update vector.
    pub fn delta_len(&self) -> usize {
        self.reparam_layers().iter().map(|l| l.delta_len()).sum()
    }

    pub fn split_delta<'a>(&self, delta: &'a [f32]) -> Result<[&'a [f32]; 5]> {
        if delta.len() != self.delta_len() {
            return Err(CodecError::Shape(format!(
                "weight update length {} != {}",
                delta.len(),
                self.delta_len()
            )));
        }
        let mut out: [&[f32]; 5] = [&[]; 5];
        let mut off = 0;
        for (i, l) in self.reparam_layers().iter().enumerate() {
            out[i] = &delta[off..off + l.delta_len()];
            off += l.delta_len();
        }
        Ok(out)
    }

    /// psi + delta-psi: consolidate a dequantized update into plain layers.
    pub fn apply_weight_update(&self, delta: Option<&[f32]>) -> Result<CodingLayers> {
        Ok(match delta {
            None => CodingLayers {
                embed: self.embed.contracted(),
                block1: self.block1.contracted(),
                block2: self.block2.contracted(),
                head_mu: self.head_mu.contracted(),
                head_sigma: self.head_sigma.contracted(),
            },
            Some(d) => {
                let parts = self.split_delta(d)?;
                CodingLayers {
                    embed: self.embed.apply_delta(parts[0]),
                    block1: self.block1.apply_delta(parts[1]),
                    block2: self.block2.apply_delta(parts[2]),
                    head_mu: self.head_mu.apply_delta(parts[3]),
                    head_sigma: self.head_sigma.apply_delta(parts[4]),
                }
            }
        })
    }

    /// Coding-side forward with explicit post-update layers.
    pub fn forward_coding(&self, layers: &CodingLayers, ctx: &CtxInputs) -> Result<(Tensor, Tensor)> {
        let mode = NetMode::Coding { model: self, layers };
        net_forward(&mode, &self.cfg, ctx)
    }

    /// Overfitting forward: gradients flow into the five delta tensors
    /// (flat per-layer layouts) and into the context.
    pub fn forward_with_deltas(&self, ctx: &CtxInputs, deltas: &[Tensor; 5]) -> Result<(Tensor, Tensor)> {
        let mode = NetMode::Overfit { model: self, deltas };
        net_forward(&mode, &self.cfg, ctx)
    }
}

enum NetMode<'a> {
    Expanded {
        model: &'a EntropyModel,
        mask: f32,
    },
    Coding {
        model: &'a ContractedEntropy,
        layers: &'a CodingLayers,
    },
    Overfit {
        model: &'a ContractedEntropy,
        deltas: &'a [Tensor; 5],
    },
}

#[derive(Clone, Copy)]
enum Fc {
    Embed,
    Block1,
    Block2,
    HeadMu,
    HeadSigma,
}

fn apply_fc(mode: &NetMode, which: Fc, h: &Tensor) -> Result<Tensor> {
    match mode {
        NetMode::Expanded { model, .. } => match which {
            Fc::Embed => model.embed.forward(h),
            Fc::Block1 => model.block1.linear.forward(h),
            Fc::Block2 => model.block2.linear.forward(h),
            Fc::HeadMu => model.head_mu.forward(h),
            Fc::HeadSigma => model.head_sigma.forward(h),
        },
        NetMode::Coding { layers, .. } => match which {
            Fc::Embed => layers.embed.forward(h),
            Fc::Block1 => layers.block1.forward(h),
            Fc::Block2 => layers.block2.forward(h),
            Fc::HeadMu => layers.head_mu.forward(h),
            Fc::HeadSigma => layers.head_sigma.forward(h),
        },
        NetMode::Overfit { model, deltas } => match which {
            Fc::Embed => model.embed.forward_with_delta(h, &deltas[0]),
            Fc::Block1 => model.block1.forward_with_delta(h, &deltas[1]),
            Fc::Block2 => model.block2.forward_with_delta(h, &deltas[2]),
            Fc::HeadMu => model.head_mu.forward_with_delta(h, &deltas[3]),
            Fc::HeadSigma => model.head_sigma.forward_with_delta(h, &deltas[4]),
        },
    }
}

/// Token-mixer attention applied over contiguous row bands.
fn mix_banded(
    mixer: &crate::modmixer::TokenMixer,
    tokens: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let rows_per = MIX_BAND_ROWS.min(h);
    if rows_per == h {
        return mixer.forward(tokens);
    }
    let mut parts = Vec::new();
    let mut y0 = 0usize;
    while y0 < h {
        let rows = rows_per.min(h - y0);
        let slice = tokens.slice_axis(0, y0 * w, rows * w)?;
        parts.push(mixer.forward(&slice)?);
        y0 += rows;
    }
    Tensor::concat(&parts, 0)
}

/// ModMixer block body: masked token stage (expanded) or doubled skip
/// (contracted, folded into the weights), instance norm, sequential
/// element-wise modulation, residual, FC, ReLU.
fn apply_block(
    mode: &NetMode,
    which: Fc,
    tokens: &Tensor,
    mods: &[(Tensor, Tensor)],
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let d = tokens.shape()[1];
    // Contracted weights carry the x2 skip fold: the modulated term halves
    // and the norm uses eps/4 (IN(2h, eps) == IN(h, eps/4)).
    let (u, mod_factor, eps) = match mode {
        NetMode::Expanded { model, mask } => {
            let block = match which {
                Fc::Block1 => &model.block1,
                _ => &model.block2,
            };
            let u = if *mask == 0.0 {
                tokens.scale(2.0)
            } else {
                let mixed = mix_banded(&block.mixer, tokens, h, w)?;
                crate::modmixer::token_stage_combine(tokens, &mixed, *mask)?
            };
            (u, 1.0f32, IN_EPS)
        }
        _ => (tokens.clone(), 0.5f32, IN_EPS * 0.25),
    };
    let normed = instance_norm(&u.tokens_to_chw(h, w)?, eps)?.chw_to_tokens()?;
    let mut x = normed;
    for (gamma_raw, beta_raw) in mods {
        x = x.mul(&gamma_raw.affine(1.0, 1.0))?.add(beta_raw)?;
    }
    debug_assert_eq!(x.shape(), &[h * w, d]);
    let v = x.scale(mod_factor).add(&u)?;
    Ok(apply_fc(mode, which, &v)?.relu())
}

/// Bias-free modulation generator: ctx tokens -> (gamma_raw, beta_raw).
fn apply_gen(mode: &NetMode, which: Gen, ctx_tokens: &Tensor, d: usize) -> Result<(Tensor, Tensor)> {
    let raw = match mode {
        NetMode::Expanded { model, .. } => {
            let lin = match which {
                Gen::Spat => &model.gen_spat,
                Gen::Hier => &model.gen_hier,
                Gen::T1 => &model.gen_t1,
                Gen::T2 => &model.gen_t2,
            };
            lin.forward(ctx_tokens)?
        }
        NetMode::Coding { model, .. } | NetMode::Overfit { model, .. } => {
            let (wdata, c_in) = match which {
                Gen::Spat => (&model.gen_spat, model.cfg.hidden),
                Gen::Hier => (&model.gen_hier, 2 * model.cfg.c_lat),
                Gen::T1 => (&model.gen_t1, 2 * model.cfg.c_lat),
                Gen::T2 => (&model.gen_t2, 2 * model.cfg.c_lat),
            };
            let w = Tensor::from_slice(wdata, &[c_in, 2 * d])?;
            ctx_tokens.matmul(&w)?
        }
    };
    let gamma = raw.slice_axis(1, 0, d)?;
    let beta = raw.slice_axis(1, d, d)?;
    Ok((gamma, beta))
}

#[derive(Clone, Copy)]
enum Gen {
    Spat,
    Hier,
    T1,
    T2,
}

fn apply_spat_conv(mode: &NetMode, cur: &Tensor) -> Result<Tensor> {
    match mode {
        NetMode::Expanded { model, .. } => Ok(model.spat.forward(cur)?.relu()),
        NetMode::Coding { model, .. } | NetMode::Overfit { model, .. } => {
            let d = model.cfg.hidden;
            let c2 = 2 * model.cfg.c_lat;
            let k = Tensor::from_slice(&model.spat_k, &[d, c2, 3, 3])?;
            let b = Tensor::from_slice(&model.spat_b, &[d, 1, 1])?;
            Ok(cur.conv2d(&k, 1, 1)?.add(&b)?.relu())
        }
    }
}

fn net_forward(mode: &NetMode, cfg: &EntropyConfig, ctx: &CtxInputs) -> Result<(Tensor, Tensor)> {
    let shape = ctx.cur.shape().to_vec();
    if shape.len() != 3 || shape[0] != 2 * cfg.c_lat {
        return Err(CodecError::Shape(format!(
            "entropy context must be (2C,H,W), got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let d = cfg.hidden;
    let cur_tokens = ctx.cur.chw_to_tokens()?;
    let spat_feat = apply_spat_conv(mode, &ctx.cur)?.chw_to_tokens()?;

    let h0 = match cfg.fusion {
        Fusion::Modulation => apply_fc(mode, Fc::Embed, &cur_tokens)?,
        Fusion::Concat => {
            let zeros = Tensor::zeros(&[h * w, 2 * cfg.c_lat]);
            let hier_t = match &ctx.hier {
                Some(t) => t.chw_to_tokens()?,
                None => zeros.clone(),
            };
            let t1_t = match &ctx.t1 {
                Some(t) => t.chw_to_tokens()?,
                None => zeros.clone(),
            };
            let t2_t = match &ctx.t2 {
                Some(t) => t.chw_to_tokens()?,
                None => zeros,
            };
            let cat = Tensor::concat(&[cur_tokens.clone(), hier_t, t1_t, t2_t, spat_feat.clone()], 1)?;
            match mode {
                NetMode::Expanded { model, .. } => model.embed_concat.forward(&cat)?,
                NetMode::Coding { model, .. } | NetMode::Overfit { model, .. } => {
                    let c_in = 4 * 2 * cfg.c_lat + d;
                    let wt = Tensor::from_slice(&model.embed_concat_w, &[c_in, d])?;
                    let bt = Tensor::from_slice(&model.embed_concat_b, &[1, d])?;
                    cat.matmul(&wt)?.add(&bt)?
                }
            }
        }
    };

    let (mods1, mods2) = match cfg.fusion {
        Fusion::Modulation => {
            let mut m1 = vec![apply_gen(mode, Gen::Spat, &spat_feat, d)?];
            if let Some(hier) = &ctx.hier {
                m1.push(apply_gen(mode, Gen::Hier, &hier.chw_to_tokens()?, d)?);
            }
            let mut m2 = Vec::new();
            if let Some(t1) = &ctx.t1 {
                m2.push(apply_gen(mode, Gen::T1, &t1.chw_to_tokens()?, d)?);
            }
            if let Some(t2) = &ctx.t2 {
                m2.push(apply_gen(mode, Gen::T2, &t2.chw_to_tokens()?, d)?);
            }
            (m1, m2)
        }
        Fusion::Concat => (Vec::new(), Vec::new()),
    };

    let h1 = apply_block(mode, Fc::Block1, &h0, &mods1, h, w)?;
    let h2 = apply_block(mode, Fc::Block2, &h1, &mods2, h, w)?;

    let mu = apply_fc(mode, Fc::HeadMu, &h2)?.tokens_to_chw(h, w)?;
    let sigma = apply_fc(mode, Fc::HeadSigma, &h2)?.exp().tokens_to_chw(h, w)?;
    Ok((mu, sigma))
}

// ---- level coding (shared encoder/decoder walk) ----

/// Either side of the range coder behind one interface, so the context
/// evolution during encode and decode is literally the same code.
pub trait ValueCoder {
    fn code(&mut self, table: &FreqTable, known: Option<i32>) -> Result<i32>;
}

pub struct EncodeSink<'a> {
    pub enc: &'a mut RangeEncoder,
}

impl ValueCoder for EncodeSink<'_> {
    fn code(&mut self, table: &FreqTable, known: Option<i32>) -> Result<i32> {
        let v = known.ok_or_else(|| CodecError::State("encoder needs the symbol".into()))?;
        crate::range_coder::encode_value(self.enc, table, v)?;
        Ok(v)
    }
}

pub struct DecodeSink<'a, 'b> {
    pub dec: &'a mut RangeDecoder<'b>,
}

impl ValueCoder for DecodeSink<'_, '_> {
    fn code(&mut self, table: &FreqTable, known: Option<i32>) -> Result<i32> {
        if known.is_some() {
            return Err(CodecError::State("decoder cannot take symbols".into()));
        }
        crate::range_coder::decode_value(self.dec, table)
    }
}

/// Replays the coding walk without emitting bytes: exact rate accounting
/// for objective evaluation.
pub struct NullSink;

impl ValueCoder for NullSink {
    fn code(&mut self, _table: &FreqTable, known: Option<i32>) -> Result<i32> {
        known.ok_or_else(|| CodecError::State("null coder needs the symbol".into()))
    }
}

/// Outcome of coding one level.
pub struct LevelCode {
    pub symbols: Vec<i32>,
    pub dequant: Tensor,
    /// Table-exact estimate of the gamma / beta stream payloads.
    pub est_bits_gamma: f64,
    pub est_bits_beta: f64,
}

/// Walk the quadtree schedule over one level, predicting (mu, sigma) per
/// step and coding every slot of the step through the two stream coders.
/// The encoder passes `known`; the decoder passes `None` and receives the
/// reconstructed symbols. Both sides execute this exact function.
#[allow(clippy::too_many_arguments)]
pub fn code_level(
    model: &ContractedEntropy,
    layers: &CodingLayers,
    grouping: &ChannelGrouping,
    steps: &[DecodeStep],
    shape: &[usize],
    q_inv: &[f32],
    hier: Option<&Tensor>,
    t1: Option<&Tensor>,
    t2: Option<&Tensor>,
    gamma_coder: &mut dyn ValueCoder,
    beta_coder: &mut dyn ValueCoder,
    known: Option<&[i32]>,
    cache: &mut GaussTableCache,
) -> Result<LevelCode> {
    let (c2, h, w) = (shape[0], shape[1], shape[2]);
    let c = c2 / 2;
    if c2 != 2 * grouping.channels() || q_inv.len() != c2 {
        return Err(CodecError::Shape(format!(
            "level shape {:?} does not match grouping {:?}",
            shape, grouping.sizes
        )));
    }
    if let Some(k) = known {
        if k.len() != c2 * h * w {
            return Err(CodecError::Shape("known symbol count mismatch".into()));
        }
    }
    let mut symbols = vec![0i32; c2 * h * w];
    let mut dequant = vec![0.0f32; c2 * h * w];
    let mut est_gamma = 0.0f64;
    let mut est_beta = 0.0f64;

    for step in steps {
        let cur = Tensor::from_slice(&dequant, shape)?;
        let ctx = CtxInputs {
            cur,
            hier: hier.cloned(),
            t1: t1.cloned(),
            t2: t2.cloned(),
        };
        let (mu, sigma) = model.forward_coding(layers, &ctx)?;
        let positions = super::phase_positions(h, w, step.phase);
        for ch in grouping.range(step.group) {
            for &(i, j) in &positions {
                for (stream_ch, is_gamma) in [(ch, true), (c + ch, false)] {
                    let idx = (stream_ch * h + i) * w + j;
                    let params =
                        GaussParams::quantize(mu.data()[idx], sigma.data()[idx]);
                    let table = cache.get(params);
                    let v = if let Some(k) = known {
                        gammabeta_code(is_gamma, gamma_coder, beta_coder, table, Some(k[idx]))?
                    } else {
                        gammabeta_code(is_gamma, gamma_coder, beta_coder, table, None)?
                    };
                    symbols[idx] = v;
                    dequant[idx] = q_inv[stream_ch] * v as f32;
                    let bits = value_bits(table, v);
                    if is_gamma {
                        est_gamma += bits;
                    } else {
                        est_beta += bits;
                    }
                }
            }
        }
    }

    Ok(LevelCode {
        symbols,
        dequant: Tensor::from_slice(&dequant, shape)?,
        est_bits_gamma: est_gamma,
        est_bits_beta: est_beta,
    })
}

fn gammabeta_code(
    is_gamma: bool,
    gamma_coder: &mut dyn ValueCoder,
    beta_coder: &mut dyn ValueCoder,
    table: &FreqTable,
    known: Option<i32>,
) -> Result<i32> {
    if is_gamma {
        gamma_coder.code(table, known)
    } else {
        beta_coder.code(table, known)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{schedule_quadtree, split_channels};
    use rand::{Rng, SeedableRng};

    fn cfg() -> EntropyConfig {
        EntropyConfig {
            c_lat: 4,
            hidden: 8,
            branches: 2,
            fusion: Fusion::Modulation,
            grouping: GroupingKind::Uneven,
        }
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_chw(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_slice(&data, shape).unwrap()
    }

    #[test]
    fn zeroed_heads_give_mu_zero_sigma_one() {
        let model = EntropyModel::init(cfg(), &mut rng(1));
        let ctx = CtxInputs {
            cur: Tensor::zeros(&[8, 4, 4]),
            hier: None,
            t1: None,
            t2: None,
        };
        let (mu, sigma) = model.forward_expanded(&ctx, 0.0).unwrap();
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(sigma.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn temporal_absence_is_multiplicative_identity() {
        // Predictions with refs of None equal predictions where the
        // temporal generators never existed (they are skipped entirely).
        let model = EntropyModel::init(cfg(), &mut rng(2));
        let cur = rand_chw(&[8, 4, 4], 10);
        let no_refs = CtxInputs {
            cur: cur.clone(),
            hier: None,
            t1: None,
            t2: None,
        };
        let (mu_a, sg_a) = model.forward_expanded(&no_refs, 0.0).unwrap();
        // Poison the temporal generators; absent refs must not read them.
        model.gen_t1.w.set_values(vec![7.7; model.gen_t1.w.numel()]);
        model.gen_t2.w.set_values(vec![-3.3; model.gen_t2.w.numel()]);
        let (mu_b, sg_b) = model
            .forward_expanded(
                &CtxInputs {
                    cur,
                    hier: None,
                    t1: None,
                    t2: None,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(mu_a.data(), mu_b.data());
        assert_eq!(sg_a.data(), sg_b.data());
    }

    #[test]
    fn expanded_and_contracted_agree_at_mask_zero() {
        let mut model = EntropyModel::init(cfg(), &mut rng(3));
        // Give the heads real weights so the check is non-trivial.
        for br in &model.head_mu.branches {
            let n = br.mix_gw.numel();
            br.mix_gw.set_values(vec![0.31; n]);
        }
        for br in &model.head_sigma.branches {
            let n = br.mix_gw.numel();
            br.mix_gw.set_values(vec![-0.17; n]);
        }
        let contracted = model.contract();
        let layers = contracted.apply_weight_update(None).unwrap();
        let ctx = CtxInputs {
            cur: rand_chw(&[8, 6, 6], 20),
            hier: Some(rand_chw(&[8, 6, 6], 21)),
            t1: Some(rand_chw(&[8, 6, 6], 22)),
            t2: None,
        };
        let (mu_e, sg_e) = model.forward_expanded(&ctx, 0.0).unwrap();
        let (mu_c, sg_c) = contracted
            .forward_coding(
                &layers,
                &CtxInputs {
                    cur: ctx.cur.clone(),
                    hier: ctx.hier.clone(),
                    t1: ctx.t1.clone(),
                    t2: ctx.t2.clone(),
                },
            )
            .unwrap();
        for i in 0..mu_e.numel() {
            let d = (mu_e.data()[i] - mu_c.data()[i]).abs();
            assert!(d <= 1e-4 * mu_e.data()[i].abs().max(1.0), "mu {} vs {}", mu_e.data()[i], mu_c.data()[i]);
            let ds = (sg_e.data()[i] - sg_c.data()[i]).abs();
            assert!(ds <= 1e-4 * sg_e.data()[i].abs().max(1.0));
        }
    }

    #[test]
    fn weight_update_zero_is_noop_and_bias_additive() {
        let model = EntropyModel::init(cfg(), &mut rng(4));
        let ce = model.contract();
        let zero = vec![0.0f32; ce.delta_len()];
        let a = ce.apply_weight_update(None).unwrap();
        let b = ce.apply_weight_update(Some(&zero)).unwrap();
        assert_eq!(a.embed.w, b.embed.w);
        assert_eq!(a.head_mu.b, b.head_mu.b);

        // Sequential additivity on the bias path:
        // apply(apply(psi, a), b - a) == apply(psi, b).
        let mut d1 = vec![0.0f32; ce.delta_len()];
        let mut d2 = vec![0.0f32; ce.delta_len()];
        // Bias-beta group of the embed layer starts at 3 * m * c_out.
        let mc = ce.embed.m * ce.embed.c_out;
        d1[3 * mc] = 0.25;
        d2[3 * mc] = 0.4;
        let l1 = ce.apply_weight_update(Some(&d1)).unwrap();
        let l2 = ce.apply_weight_update(Some(&d2)).unwrap();
        let delta_diff = d2[3 * mc] - d1[3 * mc];
        assert!((l2.embed.b[0] - (l1.embed.b[0] + delta_diff)).abs() < 1e-7);
    }

    #[test]
    fn encode_decode_replay_bit_identical() {
        // Decoder-side replay of the same schedule reproduces identical
        // (mu, sigma), hence identical symbols and dequantized values.
        let mut r = rng(5);
        let model = EntropyModel::init(cfg(), &mut r);
        let ce = model.contract();
        let layers = ce.apply_weight_update(None).unwrap();
        let grouping = split_channels(4).unwrap();
        let steps = schedule_quadtree(&grouping);
        let shape = [8usize, 4, 4];
        let q_inv = vec![0.5f32; 8];
        let hier = rand_chw(&[8, 4, 4], 30);
        let mut symbols = vec![0i32; 8 * 16];
        for (i, s) in symbols.iter_mut().enumerate() {
            *s = ((i * 37) % 9) as i32 - 4;
        }

        let mut cache = GaussTableCache::new();
        let mut enc_g = RangeEncoder::new();
        let mut enc_b = RangeEncoder::new();
        let enc_out = code_level(
            &ce,
            &layers,
            &grouping,
            &steps,
            &shape,
            &q_inv,
            Some(&hier),
            None,
            None,
            &mut EncodeSink { enc: &mut enc_g },
            &mut EncodeSink { enc: &mut enc_b },
            Some(&symbols),
            &mut cache,
        )
        .unwrap();
        assert_eq!(enc_out.symbols, symbols);
        let bytes_g = enc_g.finish();
        let bytes_b = enc_b.finish();

        let mut dec_g = RangeDecoder::new(&bytes_g).unwrap();
        let mut dec_b = RangeDecoder::new(&bytes_b).unwrap();
        let mut cache2 = GaussTableCache::new();
        let dec_out = code_level(
            &ce,
            &layers,
            &grouping,
            &steps,
            &shape,
            &q_inv,
            Some(&hier),
            None,
            None,
            &mut DecodeSink { dec: &mut dec_g },
            &mut DecodeSink { dec: &mut dec_b },
            None,
            &mut cache2,
        )
        .unwrap();
        assert_eq!(dec_out.symbols, symbols, "lossless replay");
        assert_eq!(dec_out.dequant.data(), enc_out.dequant.data());
        // Rate-consistency: actual within [est - 1, est * 1.02 + 64] bits
        // per stream.
        for (bytes, est) in [(&bytes_g, enc_out.est_bits_gamma), (&bytes_b, enc_out.est_bits_beta)] {
            let actual = (bytes.len() * 8) as f64;
            assert!(actual >= est - 1.0, "actual {} est {}", actual, est);
            assert!(actual <= est * 1.02 + 64.0, "actual {} est {}", actual, est);
        }
    }

    #[test]
    fn concat_fusion_runs() {
        let mut c = cfg();
        c.fusion = Fusion::Concat;
        let model = EntropyModel::init(c, &mut rng(6));
        let ctx = CtxInputs {
            cur: rand_chw(&[8, 4, 4], 40),
            hier: Some(rand_chw(&[8, 4, 4], 41)),
            t1: None,
            t2: None,
        };
        let (mu, sigma) = model.forward_expanded(&ctx, 0.5).unwrap();
        assert_eq!(mu.shape(), &[8, 4, 4]);
        assert!(sigma.data().iter().all(|&v| v > 0.0));
    }
}
